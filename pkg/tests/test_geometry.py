"""Rotated-rectangle overlap and VOC-style scoring against hand and MC oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ocsafpn.detection import (
    MatchResult,
    RotatedBox,
    average_precision,
    intersection_area,
    match_detections,
    mean_ap,
    nms_rotated,
    normalize_angle,
    rotated_iou,
)


def B(cx, cy, w, h, t=0.0, cid=0, score=None):
    return RotatedBox(cx, cy, w, h, t, cid, score)


def _random_box(rng, cid=0, score=None):
    return RotatedBox(
        cx=rng.uniform(-5, 5), cy=rng.uniform(-5, 5),
        w=rng.uniform(0.5, 6), h=rng.uniform(0.5, 6),
        theta=rng.uniform(-math.pi / 2, math.pi / 2), class_id=cid, score=score)


class TestAngleAndBox:
    def test_normalization(self):
        assert normalize_angle(math.pi / 2) == pytest.approx(-math.pi / 2)
        assert normalize_angle(math.pi) == pytest.approx(0.0)
        assert normalize_angle(-math.pi / 2) == pytest.approx(-math.pi / 2)
        assert normalize_angle(0.3) == pytest.approx(0.3)

    def test_positive_extents_required(self):
        with pytest.raises(ValueError):
            RotatedBox(0, 0, 0.0, 1, 0)

    def test_corners_match_reference(self):
        got = B(1, 2, 4, 2, 0.3).corners()
        want = oracles.box_corners(1, 2, 4, 2, 0.3)
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestRotatedIoU:
    def test_identity(self):
        a = B(0, 0, 2, 2, 0.4)
        assert rotated_iou(a, a) == 1.0

    def test_disjoint(self):
        assert rotated_iou(B(0, 0, 2, 2), B(10, 0, 2, 2)) == 0.0

    def test_half_shift_axis_aligned(self):
        # 2x2 squares offset by 1: overlap 2, union 6
        assert rotated_iou(B(0, 0, 2, 2), B(1, 0, 2, 2)) == pytest.approx(1 / 3, abs=1e-9)

    def test_square_vs_rotated_45(self):
        # octagon intersection 8(sqrt2 - 1); IoU reduces to 1/sqrt2
        got = rotated_iou(B(0, 0, 2, 2, 0.0), B(0, 0, 2, 2, math.pi / 4))
        assert got == pytest.approx(1 / math.sqrt(2), abs=1e-9)
        inter = intersection_area(B(0, 0, 2, 2, 0.0), B(0, 0, 2, 2, math.pi / 4))
        assert inter == pytest.approx(8 * (math.sqrt(2) - 1), abs=1e-9)

    def test_containment(self):
        assert rotated_iou(B(0, 0, 4, 4), B(0, 0, 2, 2, 0.7)) == pytest.approx(
            4 / 16, abs=1e-9)

    def test_symmetry_random(self, rng):
        for _ in range(50):
            a, b = _random_box(rng), _random_box(rng)
            assert rotated_iou(a, b) == pytest.approx(rotated_iou(b, a), abs=1e-9)

    def test_joint_rigid_motion_invariance(self, rng):
        for _ in range(25):
            a, b = _random_box(rng), _random_box(rng)
            base = rotated_iou(a, b)
            tx, ty, phi = rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0, 2)
            c, s = math.cos(phi), math.sin(phi)

            def moved(x):
                cx = c * x.cx - s * x.cy + tx
                cy = s * x.cx + c * x.cy + ty
                return RotatedBox(cx, cy, x.w, x.h, x.theta + phi)

            assert rotated_iou(moved(a), moved(b)) == pytest.approx(base, abs=1e-9)

    def test_monte_carlo_agreement_sample(self, rng):
        # the full 1000-pair sweep lives in the acceptance gate
        for _ in range(40):
            a, b = _random_box(rng), _random_box(rng)
            exact = rotated_iou(a, b)
            mc = oracles.iou_monte_carlo(
                (a.cx, a.cy, a.w, a.h, a.theta),
                (b.cx, b.cy, b.w, b.h, b.theta), 200_000, rng)
            assert exact == pytest.approx(mc, abs=8e-3)

    def test_degenerate_rejected(self):
        a = B(0, 0, 2, 2)
        a.w = 0.0   # bypass the constructor check
        with pytest.raises(ValueError, match="degenerate"):
            rotated_iou(a, B(0, 0, 2, 2))

    @given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(0.2, 3),
           st.floats(0.2, 3), st.floats(-1.5, 1.5))
    @settings(max_examples=60, deadline=None)
    def test_bounds_property(self, cx, cy, w, h, t):
        v = rotated_iou(B(0, 0, 2, 2), B(cx, cy, w, h, t))
        assert 0.0 <= v <= 1.0 + 1e-12


class TestNMS:
    def test_single_kept(self):
        d = [B(0, 0, 2, 2, score=0.7)]
        assert nms_rotated(d) == d

    def test_duplicate_suppressed(self):
        d = [B(0, 0, 2, 2, score=0.9), B(0, 0, 2, 2, score=0.8)]
        kept = nms_rotated(d, 0.5)
        assert len(kept) == 1 and kept[0].score == 0.9

    def test_classes_do_not_interact(self):
        d = [B(0, 0, 2, 2, cid=0, score=0.9), B(0, 0, 2, 2, cid=1, score=0.8)]
        assert len(nms_rotated(d, 0.5)) == 2

    def test_unscored_rejected(self):
        with pytest.raises(ValueError, match="scored"):
            nms_rotated([B(0, 0, 1, 1)])

    def test_matches_quadratic_oracle(self, rng):
        dets = [_random_box(rng, cid=int(rng.integers(2)), score=float(rng.random()))
                for _ in range(30)]
        kept = nms_rotated(dets, 0.3)
        # oracle: independent greedy loop, no shared code path
        surviving = []
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        dead = set()
        for i in order:
            if i in dead:
                continue
            surviving.append(i)
            for j in order:
                if j != i and j not in dead and dets[j].class_id == dets[i].class_id:
                    if rotated_iou(dets[i], dets[j]) > 0.3:
                        dead.add(j)
        want = [dets[i] for i in sorted(surviving,
                                        key=lambda i: (-dets[i].score, i))]
        assert kept == want


class TestMatching:
    def test_perfect_single(self):
        m = match_detections([B(0, 0, 2, 2, score=0.9)], [B(0, 0, 2, 2)])
        assert m.is_tp.tolist() == [True]
        assert m.gt_matched.tolist() == [True]

    def test_single_match_rule(self):
        dets = [B(0, 0, 2, 2, score=0.9), B(0.1, 0, 2, 2, score=0.8)]
        m = match_detections(dets, [B(0, 0, 2, 2)])
        assert m.is_tp.tolist() == [True, False]

    def test_class_gate(self):
        m = match_detections([B(0, 0, 2, 2, cid=1, score=0.9)], [B(0, 0, 2, 2, cid=0)])
        assert m.is_tp.tolist() == [False]

    def test_low_iou_is_fp(self):
        m = match_detections([B(3, 0, 2, 2, score=0.9)], [B(0, 0, 2, 2)])
        assert m.is_tp.tolist() == [False]

    def test_greedy_equals_reference_assignment(self, rng):
        gts = [_random_box(rng, cid=int(rng.integers(2))) for _ in range(4)]
        dets = []
        for _ in range(10):
            base = gts[int(rng.integers(4))]
            dets.append(RotatedBox(
                base.cx + rng.normal(0, 0.4), base.cy + rng.normal(0, 0.4),
                base.w, base.h, base.theta, base.class_id, float(rng.random())))
        got = match_detections(dets, gts, 0.5)
        # independent re-derivation of the greedy protocol
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        taken = [False] * len(gts)
        want = []
        for i in order:
            cands = [(rotated_iou(dets[i], g), k) for k, g in enumerate(gts)
                     if not taken[k] and g.class_id == dets[i].class_id]
            cands = [c for c in cands if c[0] >= 0.5]
            if cands:
                _, k = max(cands)
                taken[k] = True
                want.append(True)
            else:
                want.append(False)
        assert got.is_tp.tolist() == want


class TestAveragePrecision:
    def test_perfect(self):
        m = MatchResult(np.array([0.9]), np.array([True]), np.array([True]))
        assert average_precision(m, 1) == pytest.approx(1.0)

    def test_empty(self):
        m = MatchResult(np.array([]), np.array([], dtype=bool), np.array([], dtype=bool))
        assert average_precision(m, 3) == 0.0

    def test_no_truth_defined_zero(self):
        m = MatchResult(np.array([0.9]), np.array([False]), np.array([], dtype=bool))
        assert average_precision(m, 0) == 0.0

    def test_hand_swept_case(self):
        # TP, FP, TP over 2 gts: envelope 1.0 to r=0.5, then 2/3 -> 28/33
        m = MatchResult(np.array([0.9, 0.8, 0.7]),
                        np.array([True, False, True]), np.array([True, True]))
        assert average_precision(m, 2) == pytest.approx(28 / 33, abs=1e-12)

    def test_agrees_with_oracle_sweep(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 12))
            flags = rng.random(n) < 0.5
            num_gt = max(1, int(flags.sum()) + int(rng.integers(0, 3)))
            scores = np.sort(rng.random(n))[::-1]
            m = MatchResult(scores, flags, np.zeros(num_gt, dtype=bool))
            tp = np.cumsum(flags)
            rec = tp / num_gt
            prec = tp / np.arange(1, n + 1)
            assert average_precision(m, num_gt) == pytest.approx(
                oracles.ap_11pt(rec, prec), abs=1e-12)

    def test_monotone_score_invariance(self, rng):
        flags = rng.random(10) < 0.4
        scores = np.sort(rng.random(10))[::-1]
        m1 = MatchResult(scores, flags, np.zeros(5, dtype=bool))
        base = average_precision(m1, 5)
        for f in (lambda s: s * 3.7, lambda s: s + 2, lambda s: np.tanh(s) + 1e-9 * s):
            m2 = MatchResult(f(scores), flags, np.zeros(5, dtype=bool))
            assert average_precision(m2, 5) == pytest.approx(base, abs=0)

    def test_trailing_fp_never_raises_ap(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 8))
            flags = rng.random(n) < 0.5
            scores = np.sort(rng.random(n))[::-1]
            m = MatchResult(scores, flags, np.zeros(4, dtype=bool))
            base = average_precision(m, 4)
            m_ext = MatchResult(
                np.concatenate([scores, [scores[-1] / 2]]),
                np.concatenate([flags, [False]]), np.zeros(4, dtype=bool))
            assert average_precision(m_ext, 4) <= base + 1e-12

    def test_continuous_variant_differs_but_bounded(self):
        m = MatchResult(np.array([0.9, 0.8, 0.7]),
                        np.array([True, False, True]), np.array([True, True]))
        c = average_precision(m, 2, interpolation="continuous")
        assert 0.0 <= c <= 1.0
        with pytest.raises(ValueError):
            average_precision(m, 2, interpolation="linear")


class TestMeanAP:
    def test_single_class(self):
        assert mean_ap({0: 0.7}) == pytest.approx(0.7)

    def test_two_classes(self):
        assert mean_ap({0: 1.0, 1: 0.0}) == pytest.approx(0.5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_ap({})
