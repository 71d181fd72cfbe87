"""Dense head: target assignment, loss wiring, decoding, and an overfit smoke."""

import math

import numpy as np
import pytest

from ocsafpn import tensor as T
from ocsafpn.detection import (
    DetectionHead,
    RotatedBox,
    assign_and_loss,
    assign_targets,
    decode_detections,
)
from ocsafpn.tensor import Tensor, grad_check

SMALL_STRIDES = (4, 8)


def _pyramid(rng, c, shapes, dtype=np.float64, grad=False):
    return [Tensor(rng.standard_normal((1, c) + s).astype(dtype), requires_grad=grad)
            for s in shapes]


class TestHeadForward:
    def test_output_shapes_mirror_pyramid(self, rng):
        head = DetectionHead(8, 5, rng=rng, dtype=np.float64)
        pyr = _pyramid(rng, 8, [(16, 16), (8, 8), (4, 4)])
        out = head(pyr)
        assert len(out) == 3
        for (cls, reg), p in zip(out, pyr):
            assert cls.shape == (1, 5) + p.shape[2:]
            assert reg.shape == (1, 6) + p.shape[2:]

    def test_channel_mismatch_rejected(self, rng):
        head = DetectionHead(8, 3, rng=rng)
        with pytest.raises(ValueError, match="channels"):
            head([Tensor(np.zeros((1, 4, 8, 8), dtype=np.float32))])

    def test_initial_scores_near_prior(self, rng):
        head = DetectionHead(8, 3, rng=rng, dtype=np.float64)
        head_out = head(_pyramid(rng, 8, [(8, 8)]))
        scores = 1.0 / (1.0 + np.exp(-head_out[0][0].data))
        # bias starts at the 1% objectness prior; tower output shifts it a bit
        assert np.median(scores) < 0.1

    def test_grad_check(self, rng):
        head = DetectionHead(4, 2, rng=rng, dtype=np.float64, tower_depth=1)
        pyr = _pyramid(rng, 4, [(4, 4)], grad=True)
        gts = [[RotatedBox(8, 8, 6, 4, 0.3, class_id=1)]]
        named = dict(head.named_parameters())
        picked = [named["cls_out.bias"], named["reg_out.bias"],
                  named["cls_tower.0.bias"], named["reg_tower.0.bias"],
                  pyr[0]]

        def loss():
            out = head(pyr)
            l, _ = assign_and_loss(out, gts, 2, strides=(4,))
            return l

        assert grad_check(loss, picked) <= 1e-6


class TestAssignment:
    def test_small_object_lands_on_fine_level(self):
        gts = [RotatedBox(10, 10, 6, 4, 0.0, class_id=0)]
        cls_t, reg_t, pos = assign_targets([(8, 8), (4, 4)], gts, 2, SMALL_STRIDES)
        assert pos[0].sum() > 0
        assert pos[1].sum() == 0

    def test_large_object_lands_on_coarse_level(self):
        # stride (size/6) halfway in log2 between 4 and 8 is ~34; go past it
        gts = [RotatedBox(16, 16, 40, 40, 0.0, class_id=0)]
        cls_t, reg_t, pos = assign_targets([(8, 8), (4, 4)], gts, 2, SMALL_STRIDES)
        assert pos[0].sum() == 0
        assert pos[1].sum() > 0

    def test_center_window_radius(self):
        gts = [RotatedBox(16, 16, 6, 6, 0.0, class_id=1)]
        cls_t, reg_t, pos = assign_targets([(8, 8)], gts, 2, strides=(4,))
        ys = (np.arange(8) + 0.5) * 4
        want = (np.abs(ys - 16) <= 6.0)
        np.testing.assert_array_equal(pos[0], np.outer(want, want))
        ii, jj = np.nonzero(pos[0])
        assert (cls_t[0][1, ii, jj] == 1.0).all()
        assert (cls_t[0][0, ii, jj] == 0.0).all()

    def test_regression_targets_at_center(self):
        gts = [RotatedBox(10, 10, 8, 4, 0.25, class_id=0)]
        _, reg_t, pos = assign_targets([(8, 8)], gts, 1, strides=(4,))
        i = j = 2   # location center (10, 10) exactly
        assert pos[0][i, j]
        np.testing.assert_allclose(
            reg_t[0][:, i, j],
            [0.0, 0.0, math.log(2.0), math.log(1.0),
             math.sin(0.5), math.cos(0.5)], atol=1e-12)

    def test_nearest_center_wins_contested_location(self):
        gts = [RotatedBox(10, 10, 6, 6, 0.0, class_id=0),
               RotatedBox(11, 10, 6, 6, 0.0, class_id=1)]
        cls_t, _, pos = assign_targets([(8, 8)], gts, 2, strides=(4,))
        # location (10,10) is distance 0 from the first box center
        assert cls_t[0][0, 2, 2] == 1.0 and cls_t[0][1, 2, 2] == 0.0

    def test_class_range_validated(self):
        with pytest.raises(ValueError, match="class_id"):
            assign_targets([(8, 8)], [RotatedBox(5, 5, 2, 2, 0, class_id=7)], 2,
                           strides=(4,))


class TestLoss:
    def _preds(self, rng, shapes, k=2, dtype=np.float64):
        out = []
        for s in shapes:
            out.append((Tensor(rng.standard_normal((1, k) + s).astype(dtype)),
                        Tensor(rng.standard_normal((1, 6) + s).astype(dtype))))
        return out

    def test_no_truth_is_classification_only(self, rng):
        preds = self._preds(rng, [(8, 8), (4, 4)])
        loss, parts = assign_and_loss(preds, [[]], 2, SMALL_STRIDES)
        assert parts["reg"] == 0.0
        assert parts["num_pos"] == 0
        assert parts["cls"] > 0
        assert float(loss.data) == pytest.approx(parts["cls"])

    def test_exact_prediction_zeroes_box_term(self, rng):
        gts = [[RotatedBox(10, 10, 8, 4, 0.25, class_id=0)]]
        shapes = [(8, 8)]
        _, reg_t, pos = assign_targets(shapes, gts[0], 1, strides=(4,))
        cls = Tensor(rng.standard_normal((1, 1, 8, 8)))
        reg = Tensor(reg_t[0][None].copy())
        loss, parts = assign_and_loss([(cls, reg)], gts, 1, strides=(4,))
        assert parts["reg"] == 0.0
        assert parts["num_pos"] == int(pos[0].sum())

    def test_batch_mismatch_rejected(self, rng):
        preds = self._preds(rng, [(4, 4)])
        with pytest.raises(ValueError, match="batch"):
            assign_and_loss(preds, [[], []], 2, strides=(4,))

    def test_normalized_by_positive_count(self, rng):
        gts = [[RotatedBox(16, 16, 6, 6, 0.0, class_id=0)]]
        preds = self._preds(rng, [(8, 8)], k=1)
        loss, parts = assign_and_loss(preds, gts, 1, strides=(4,))
        n_pos = parts["num_pos"]
        assert n_pos > 1
        raw_cls = float(T.bce_with_logits(
            preds[0][0], assign_targets([(8, 8)], gts[0], 1, (4,))[0][0][None]).data)
        assert parts["cls"] == pytest.approx(raw_cls / n_pos)


class TestDecode:
    def test_roundtrip_through_targets(self, rng):
        gt = RotatedBox(10, 10, 8, 4, 0.25, class_id=1)
        cls_t, reg_t, pos = assign_targets([(8, 8)], [gt], 3, strides=(4,))
        logits = np.full((1, 3, 8, 8), -12.0)
        logits[0, 1, 2, 2] = 6.0   # only the true center fires
        preds = [(Tensor(logits), Tensor(reg_t[0][None].copy()))]
        dets = decode_detections(preds, strides=(4,), score_thresh=0.5)
        assert len(dets) == 1
        d = dets[0]
        assert d.class_id == 1
        assert d.cx == pytest.approx(gt.cx, abs=1e-9)
        assert d.cy == pytest.approx(gt.cy, abs=1e-9)
        assert d.w == pytest.approx(gt.w, rel=1e-9)
        assert d.h == pytest.approx(gt.h, rel=1e-9)
        assert d.theta == pytest.approx(gt.theta, abs=1e-9)

    def test_score_threshold_gates(self, rng):
        logits = np.full((1, 2, 4, 4), -12.0)
        preds = [(Tensor(logits), Tensor(np.zeros((1, 6, 4, 4))))]
        assert decode_detections(preds, strides=(4,), score_thresh=0.05) == []

    def test_extreme_regression_stays_finite(self):
        logits = np.full((1, 1, 2, 2), 5.0)
        reg = np.zeros((1, 6, 2, 2))
        reg[0, 2:4] = 50.0   # decoded extents clamp instead of overflowing
        dets = decode_detections([(Tensor(logits), Tensor(reg))], strides=(4,),
                                 score_thresh=0.5, nms_thresh=0.99)
        assert all(math.isfinite(d.w) and math.isfinite(d.h) for d in dets)


class TestOverfitSmoke:
    def test_loss_collapses_on_one_image(self, rng):
        # single fixed image, 50 momentum-SGD steps: final < 0.1 x initial
        head = DetectionHead(8, 2, rng=rng, dtype=np.float64, tower_depth=2)
        pyr = _pyramid(rng, 8, [(8, 8), (4, 4)])
        gts = [[RotatedBox(14, 14, 10, 6, 0.4, class_id=0),
                RotatedBox(22, 8, 6, 4, -0.8, class_id=1)]]
        params = [p for _, p in head.named_parameters()]
        vel = [np.zeros_like(p.data) for p in params]
        first = last = None
        for step in range(50):
            out = head(pyr)
            loss, _ = assign_and_loss(out, gts, 2, SMALL_STRIDES)
            last = float(loss.data)
            if first is None:
                first = last
            head.zero_grad()
            T.backward(loss, leaves=params)
            for p, v in zip(params, vel):
                v *= 0.9
                v += p.grad
                p.data -= 0.02 * v
        assert last < 0.1 * first, (first, last)
