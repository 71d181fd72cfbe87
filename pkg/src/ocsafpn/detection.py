"""Rotated-box geometry, VOC-style scoring, and a dense detection head.

Boxes are (cx, cy, w, h, theta) with theta in [-pi/2, pi/2); a rectangle is
pi-periodic in theta, so angles are normalized modulo pi.  IoU comes from
Sutherland-Hodgman clipping of one rectangle against the other's four
half-planes.  Scoring follows the VOC2007 protocol: greedy score-ordered
matching at IoU >= 0.5 within each class, 11-point interpolated AP, and an
unweighted class mean.

The head is anchor-free: one prediction per pyramid location, a shared
4-conv tower per branch, class logits plus a 6-channel box regression
(dx, dy, dw, dh, sin 2theta, cos 2theta).  The doubled angle respects the
rectangle's symmetry, so the loss sees no wrap discontinuity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, ModuleList
from .tensor import Tensor

STRIDES = (4, 8, 16, 32, 64)        # P2..P6
CELLS_PER_OBJECT = 6.0              # level picker: stride ~ box size / this
CENTER_RADIUS = 1.5                 # positives within this many strides


def normalize_angle(theta: float) -> float:
    """Wrap into [-pi/2, pi/2); rectangles repeat every pi."""
    t = (theta + math.pi / 2) % math.pi - math.pi / 2
    return -math.pi / 2 if t >= math.pi / 2 else t


@dataclass
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float
    class_id: int = 0
    score: float | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got {self.w}x{self.h}")
        self.theta = normalize_angle(self.theta)

    def corners(self) -> np.ndarray:
        """(4,2) corner coordinates, counter-clockwise."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx = np.array([-self.w, self.w, self.w, -self.w]) / 2
        dy = np.array([-self.h, -self.h, self.h, self.h]) / 2
        return np.stack([self.cx + c * dx - s * dy,
                         self.cy + s * dx + c * dy], axis=1)

    def area(self) -> float:
        return self.w * self.h


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_halfplane(poly, p1, p2):
    """Keep the part of poly left of the directed edge p1 -> p2."""
    if len(poly) == 0:
        return poly
    ex, ey = p2[0] - p1[0], p2[1] - p1[1]
    side = ex * (poly[:, 1] - p1[1]) - ey * (poly[:, 0] - p1[0])
    out = []
    n = len(poly)
    for i in range(n):
        j = (i + 1) % n
        if side[i] >= 0:
            out.append(poly[i])
        if (side[i] >= 0) != (side[j] >= 0):
            t = side[i] / (side[i] - side[j])
            out.append(poly[i] + t * (poly[j] - poly[i]))
    return np.array(out) if out else np.empty((0, 2))


def intersection_area(a: RotatedBox, b: RotatedBox) -> float:
    poly = a.corners()
    cb = b.corners()
    for i in range(4):
        poly = _clip_halfplane(poly, cb[i], cb[(i + 1) % 4])
        if len(poly) == 0:
            return 0.0
    return _polygon_area(poly)


def rotated_iou(a: RotatedBox, b: RotatedBox) -> float:
    if a.area() <= 0 or b.area() <= 0:
        raise ValueError("degenerate zero-area box")
    inter = intersection_area(a, b)
    union = a.area() + b.area() - inter
    return inter / union


def nms_rotated(dets: list[RotatedBox], iou_thresh: float = 0.5) -> list[RotatedBox]:
    """Greedy per-class suppression; order stable by score then insertion."""
    by_class = {}
    for idx, d in enumerate(dets):
        if d.score is None:
            raise ValueError("nms needs scored detections")
        by_class.setdefault(d.class_id, []).append((idx, d))
    kept_idx = []
    for cid in sorted(by_class):
        pool = sorted(by_class[cid], key=lambda t: (-t[1].score, t[0]))
        while pool:
            idx, best = pool.pop(0)
            kept_idx.append((best.score, idx))
            pool = [(i, d) for i, d in pool if rotated_iou(best, d) <= iou_thresh]
    kept_idx.sort(key=lambda t: (-t[0], t[1]))
    return [dets[i] for _, i in kept_idx]


@dataclass
class MatchResult:
    """Score-ordered detection verdicts plus per-ground-truth match flags."""

    scores: np.ndarray          # descending
    is_tp: np.ndarray           # bool per detection in score order
    gt_matched: np.ndarray      # bool per ground truth

    def __post_init__(self):
        if len(self.scores) != len(self.is_tp):
            raise ValueError("scores and verdicts disagree in length")


def match_detections(dets: list[RotatedBox], gts: list[RotatedBox],
                     iou_thresh: float = 0.5) -> MatchResult:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = np.zeros(len(gts), dtype=bool)
    is_tp = np.zeros(len(dets), dtype=bool)
    scores = np.array([dets[i].score for i in order], dtype=np.float64)
    for rank, i in enumerate(order):
        d = dets[i]
        best, best_iou = -1, 0.0
        for g, gt in enumerate(gts):
            if matched[g] or gt.class_id != d.class_id:
                continue
            iou = rotated_iou(d, gt)
            if iou > best_iou:
                best, best_iou = g, iou
        if best >= 0 and best_iou >= iou_thresh:
            matched[best] = True
            is_tp[rank] = True
    return MatchResult(scores, is_tp, matched)


def average_precision(match: MatchResult, num_gt: int,
                      interpolation: str = "11point") -> float:
    """VOC2007 11-point AP by default; "continuous" integrates the envelope."""
    if interpolation not in ("11point", "continuous"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if num_gt < 1:
        return 0.0          # detections with no truth: zero by definition
    if len(match.is_tp) == 0:
        return 0.0
    tp = np.cumsum(match.is_tp)
    fp = np.cumsum(~match.is_tp)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    if interpolation == "11point":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t - 1e-12
            ap += (precision[mask].max() if mask.any() else 0.0) / 11.0
        return float(ap)
    # envelope integration (never used by the acceptance gate)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]).sum())


def mean_ap(per_class_aps: dict[int, float]) -> float:
    if not per_class_aps:
        raise ValueError("mean over zero classes is undefined")
    return float(np.mean(list(per_class_aps.values())))


# ---------------------------------------------------------------------------
# interchange format: JSON lines, one object per line, angle in radians.
# The first line is a header object naming the format and angle unit so a
# file is self-describing.

_ANNOT_HEADER = {"format": "rotated-boxes", "angle_unit": "radians"}


def write_annotations(path, boxes_by_image: dict[int, list[RotatedBox]]) -> None:
    lines = [json.dumps(_ANNOT_HEADER, sort_keys=True)]
    for image_id in sorted(boxes_by_image):
        for b in boxes_by_image[image_id]:
            rec = {"image_id": int(image_id), "class_id": int(b.class_id),
                   "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "theta": b.theta}
            if b.score is not None:
                rec["score"] = b.score
            lines.append(json.dumps(rec, sort_keys=True))
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def read_annotations(path) -> dict[int, list[RotatedBox]]:
    with open(path, encoding="ascii") as f:
        header = json.loads(f.readline())
        if header.get("angle_unit") != "radians":
            raise ValueError(f"unsupported annotation header: {header}")
        out: dict[int, list[RotatedBox]] = {}
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            box = RotatedBox(rec["cx"], rec["cy"], rec["w"], rec["h"],
                             rec["theta"], class_id=rec["class_id"],
                             score=rec.get("score"))
            out.setdefault(int(rec["image_id"]), []).append(box)
    return out


# ---------------------------------------------------------------------------
# dense head

class DetectionHead(Module):
    """Shared towers over every pyramid level; one prediction per location."""

    def __init__(self, in_channels: int, num_classes: int, *, rng,
                 dtype=np.float32, tower_depth: int = 4):
        super().__init__()
        if num_classes < 1:
            raise ValueError(f"need at least one class, got {num_classes}")
        self.in_channels = in_channels
        self.num_classes = num_classes
        c = in_channels
        self.cls_tower = ModuleList(
            [Conv2d(c, c, 3, rng=rng, dtype=dtype) for _ in range(tower_depth)])
        self.reg_tower = ModuleList(
            [Conv2d(c, c, 3, rng=rng, dtype=dtype) for _ in range(tower_depth)])
        self.cls_out = Conv2d(c, num_classes, 3, rng=rng, dtype=dtype)
        # rare-positive prior: start every location near P(object) = 0.01
        self.cls_out.bias.data[:] = -math.log(99.0)
        self.reg_out = Conv2d(c, 6, 3, rng=rng, dtype=dtype)

    def forward(self, pyramid: list[Tensor]) -> list[tuple[Tensor, Tensor]]:
        out = []
        for p in pyramid:
            if p.shape[1] != self.in_channels:
                raise ValueError(
                    f"head built for {self.in_channels} channels, level has {p.shape[1]}")
            t = p
            for conv in self.cls_tower:
                t = T.relu(conv(t))
            cls = self.cls_out(t)
            t = p
            for conv in self.reg_tower:
                t = T.relu(conv(t))
            reg = self.reg_out(t)
            out.append((cls, reg))
        return out


def _pick_level(size: float, strides) -> int:
    want = math.log2(max(size / CELLS_PER_OBJECT, 1e-6))
    gaps = [abs(math.log2(s) - want) for s in strides]
    return int(np.argmin(gaps))


def assign_targets(shapes: list[tuple[int, int]], gts: list[RotatedBox],
                   num_classes: int, strides=STRIDES):
    """Per-level dense targets for one image.

    Returns (cls_targets, reg_targets, pos_masks) as numpy arrays shaped
    (K,h,w), (6,h,w), (h,w).  Positives sit within CENTER_RADIUS strides of
    a box center at the level matching the box scale; the nearest center
    wins a contested location.
    """
    cls_t = [np.zeros((num_classes,) + s, dtype=np.float64) for s in shapes]
    reg_t = [np.zeros((6,) + s, dtype=np.float64) for s in shapes]
    pos = [np.zeros(s, dtype=bool) for s in shapes]
    claim_d2 = [np.full(s, np.inf) for s in shapes]
    for gt in gts:
        if not 0 <= gt.class_id < num_classes:
            raise ValueError(f"class_id {gt.class_id} outside 0..{num_classes - 1}")
        lvl = _pick_level(math.sqrt(gt.area()), strides)
        s = strides[lvl]
        h, w = shapes[lvl]
        ys = (np.arange(h) + 0.5) * s
        xs = (np.arange(w) + 0.5) * s
        near_y = np.abs(ys - gt.cy) <= CENTER_RADIUS * s
        near_x = np.abs(xs - gt.cx) <= CENTER_RADIUS * s
        for i in np.nonzero(near_y)[0]:
            for j in np.nonzero(near_x)[0]:
                d2 = (ys[i] - gt.cy) ** 2 + (xs[j] - gt.cx) ** 2
                if d2 >= claim_d2[lvl][i, j]:
                    continue
                claim_d2[lvl][i, j] = d2
                cls_t[lvl][:, i, j] = 0.0
                cls_t[lvl][gt.class_id, i, j] = 1.0
                reg_t[lvl][:, i, j] = (
                    (gt.cx - xs[j]) / s, (gt.cy - ys[i]) / s,
                    math.log(gt.w / s), math.log(gt.h / s),
                    math.sin(2 * gt.theta), math.cos(2 * gt.theta))
                pos[lvl][i, j] = True
    return cls_t, reg_t, pos


def assign_and_loss(preds: list[tuple[Tensor, Tensor]],
                    gts_per_image: list[list[RotatedBox]],
                    num_classes: int, strides=STRIDES):
    """Total loss over a batch: BCE everywhere + smooth-L1 at positives.

    Both terms are normalized by max(1, total positives).  Images without
    ground truth contribute classification only; the box term is then an
    exact zero, not a small number.
    """
    b = preds[0][0].shape[0]
    if len(gts_per_image) != b:
        raise ValueError(f"batch {b} but {len(gts_per_image)} ground-truth lists")
    shapes = [p[0].shape[2:] for p in preds]
    cls_b, reg_b, pos_b = [], [], []
    for gts in gts_per_image:
        c, r, p = assign_targets(shapes, gts, num_classes, strides)
        cls_b.append(c)
        reg_b.append(r)
        pos_b.append(p)
    n_pos = int(sum(p.sum() for pp in pos_b for p in pp))
    norm = 1.0 / max(1, n_pos)

    cls_terms, reg_terms = [], []
    for lvl, (cls_pred, reg_pred) in enumerate(preds):
        dt = cls_pred.data.dtype
        cls_target = np.stack([cb[lvl] for cb in cls_b]).astype(dt)
        cls_terms.append(T.bce_with_logits(cls_pred, cls_target))
        if any(pb[lvl].any() for pb in pos_b):
            reg_target = np.stack([rb[lvl] for rb in reg_b]).astype(dt)
            mask = np.stack([pb[lvl] for pb in pos_b])[:, None].astype(dt)
            mask = np.broadcast_to(mask, reg_pred.shape)
            reg_terms.append(T.smooth_l1(reg_pred, reg_target, mask=mask))

    def total(terms):
        if not terms:
            return None
        acc = terms[0]
        for t in terms[1:]:
            acc = T.add(acc, t)
        return acc

    cls_loss = total(cls_terms)
    reg_loss = total(reg_terms)
    scale = Tensor(np.asarray(norm, dtype=cls_loss.data.dtype))
    loss = T.multiply(cls_loss, scale) if reg_loss is None else \
        T.multiply(T.add(cls_loss, reg_loss), scale)
    parts = {
        "cls": float(cls_loss.data) * norm,
        "reg": 0.0 if reg_loss is None else float(reg_loss.data) * norm,
        "num_pos": n_pos,
    }
    return loss, parts


def decode_detections(preds: list[tuple[Tensor, Tensor]], image_index: int = 0,
                      strides=STRIDES, score_thresh: float = 0.05,
                      nms_thresh: float = 0.5, max_dets: int = 100
                      ) -> list[RotatedBox]:
    """Raw head outputs for one image -> scored, NMS-filtered boxes."""
    cand = []
    for (cls_pred, reg_pred), s in zip(preds, strides):
        logits = cls_pred.data[image_index]
        reg = reg_pred.data[image_index]
        with np.errstate(over="ignore"):  # exp overflow saturates to score 0
            scores = 1.0 / (1.0 + np.exp(-logits))
        k, h, w = scores.shape
        cids, iis, jjs = np.nonzero(scores > score_thresh)
        for cid, i, j in zip(cids, iis, jjs):
            dx, dy, dw, dh, sn, cs = reg[:, i, j]
            theta = 0.5 * math.atan2(sn, cs)
            cand.append(RotatedBox(
                cx=(j + 0.5) * s + dx * s, cy=(i + 0.5) * s + dy * s,
                w=math.exp(min(dw, 8.0)) * s, h=math.exp(min(dh, 8.0)) * s,
                theta=theta, class_id=int(cid), score=float(scores[cid, i, j])))
    kept = nms_rotated(cand, nms_thresh)
    return kept[:max_dets]
