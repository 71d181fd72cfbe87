"""Experiment harness: configs, dataset builds, training, evaluation, reports.

Everything here is a deterministic function of an ExperimentConfig.  The
config's sha256 hash is embedded in every artifact (dataset manifest, loss
log header, checkpoint, report rows) so outputs are traceable to the exact
settings that produced them.  Files that the determinism contract compares
byte-for-byte (manifest, training log) never contain wall-clock values;
timing lives in the run summary only.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import blocks as B
from . import degrade as D
from . import detection as det
from . import fdt
from . import tensor as T
from .backbone import BackboneConfig, FeatureHierarchy, build_backbone
from .blocks import OctaveFeature
from .detection import (STRIDES, DetectionHead, MatchResult, RotatedBox,
                        assign_and_loss, average_precision, decode_detections,
                        match_detections, read_annotations, write_annotations)
from .neck import BaselineFPN, NeckConfig, OcSaFPN
from .nn import Module
from .tensor import Tensor


class NumericFailure(RuntimeError):
    """Raised when a run hits non-finite numbers; maps to exit code 3."""


NOISE_UNIT_NOTE = (
    "Noise std unit is ambiguous at the source: 0.2 is enormous in [0,1] "
    "units and tiny in [0,255] units. This corpus uses noise_unit as "
    "recorded here; change it only together with the consumers."
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Every experimental axis in one flat, hashable record."""

    # model
    backbone: str = "octave"            # octave | plain
    width_scale: int = 8
    neck: str = "ocsafpn"               # ocsafpn | baseline_fpn
    enable_near: bool = True
    enable_far: bool = True
    enable_attention: bool = True
    enable_fusion: bool = True
    topdown_source: str = "M"
    # data
    image_size: int = 128
    num_classes: int = 5
    train_images: int = 100
    test_images: int = 100
    min_objects: int = 2
    max_objects: int = 5
    presets: tuple = ("n0.01_v1", "n0.2_v0.5", "n0.2_v1")
    noise_unit: str = "unit"
    train_split: str = "n0.01_v1"
    eval_split: str = "clean"
    # optimizer (Adam with fixed betas 0.9/0.999)
    lr: float = 0.003
    steps: int = 500
    batch_size: int = 2
    lr_decay: float = 0.1
    decay_at: tuple = (0.75, 0.92)      # fractions of total steps
    warmup: int = 30                    # linear ramp; tames first-step shock
    # seeds and output
    model_seed: int = 0
    data_seed: int = 0
    out_dir: str = "runs"
    threads: int = 1

    def __post_init__(self):
        if self.backbone not in ("octave", "plain"):
            raise ValueError(f"backbone must be octave|plain, got {self.backbone!r}")
        if self.neck not in ("ocsafpn", "baseline_fpn"):
            raise ValueError(f"neck must be ocsafpn|baseline_fpn, got {self.neck!r}")
        if self.neck == "baseline_fpn" and self.backbone != "plain":
            raise ValueError("baseline_fpn consumes single-map features; use backbone=plain")
        if self.width_scale not in (1, 2, 4, 8, 16):
            raise ValueError(f"width_scale must be in {{1,2,4,8,16}}, got {self.width_scale}")
        if self.image_size % 64 or self.image_size <= 0:
            raise ValueError(f"image_size must be a positive multiple of 64, got {self.image_size}")
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if self.train_images < 1 or self.test_images < 1:
            raise ValueError("need at least one image per subset")
        unknown = [p for p in self.presets if p not in D.PRESETS]
        if unknown:
            raise ValueError(f"unknown presets {unknown}; choose from {sorted(D.PRESETS)}")
        for name, split in (("train_split", self.train_split),
                            ("eval_split", self.eval_split)):
            if split != "clean" and split not in self.presets:
                raise ValueError(f"{name} {split!r} is not clean or a configured preset")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must be in (0,1], got {self.lr_decay}")
        if any(not 0 < f < 1 for f in self.decay_at):
            raise ValueError(f"decay_at entries must be fractions in (0,1), got {self.decay_at}")
        if self.warmup < 0:
            raise ValueError(f"warmup must be >= 0, got {self.warmup}")
        if self.noise_unit not in ("unit", "8bit"):
            raise ValueError(f"noise_unit must be unit|8bit, got {self.noise_unit!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["presets"] = list(self.presets)
        d["decay_at"] = list(self.decay_at)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("presets", "decay_at"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        with open(path) as f:
            d = json.load(f)
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        d.update(overrides)
        return cls.from_dict(d)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def data_fingerprint(self) -> str:
        """Hash of only the fields that shape the dataset, so ablation rows
        with different model toggles can share one corpus."""
        keys = ("image_size", "num_classes", "train_images", "test_images",
                "min_objects", "max_objects", "presets", "noise_unit", "data_seed")
        d = {k: self.to_dict()[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def scene_spec(cfg: ExperimentConfig) -> D.SceneSpec:
    return D.SceneSpec(size=cfg.image_size, num_classes=cfg.num_classes,
                       min_objects=cfg.min_objects, max_objects=cfg.max_objects,
                       seed=cfg.data_seed)


def degradation_spec(cfg: ExperimentConfig, split: str) -> D.DegradationSpec:
    if split == "clean":
        return D.DegradationSpec(n=0.0, v=0.0, seed=cfg.data_seed,
                                 noise_unit=cfg.noise_unit)
    n, v = D.PRESETS[split]
    return D.DegradationSpec(n=n, v=v, seed=cfg.data_seed,
                             noise_unit=cfg.noise_unit)


# ---------------------------------------------------------------------------
# dataset build / load

def _subset_ids(cfg: ExperimentConfig, subset: str) -> list[int]:
    if subset == "train":
        return list(range(cfg.train_images))
    return list(range(cfg.train_images, cfg.train_images + cfg.test_images))


def build_dataset(cfg: ExperimentConfig, data_dir, overwrite: bool = False,
                  log=None) -> dict:
    """Clean split plus one degraded copy per preset; returns the manifest."""
    data_dir = Path(data_dir)
    if data_dir.exists() and any(data_dir.iterdir()) and not overwrite:
        raise ValueError(f"{data_dir} exists and is not empty; pass overwrite to rebuild")
    splits = ["clean"] + list(cfg.presets)
    spec = scene_spec(cfg)
    stats = {}
    for subset in ("train", "test"):
        ids = _subset_ids(cfg, subset)
        placed = skipped = 0
        annots: dict[int, list[RotatedBox]] = {}
        for split in splits:
            (data_dir / split / subset).mkdir(parents=True, exist_ok=True)
        for image_id in ids:
            meta: dict = {}
            img, gts = D.synth_scene(spec, image_id, meta=meta)
            placed += meta["placed"]
            skipped += meta["skipped"]
            annots[image_id] = gts
            for split in splits:
                out = img if split == "clean" else \
                    D.degrade_image(img, degradation_spec(cfg, split), image_id)
                D.write_ppm(data_dir / split / subset / f"{image_id:05d}.ppm", out)
        for split in splits:
            write_annotations(data_dir / split / subset / "annotations.jsonl", annots)
        stats[subset] = {"images": len(ids), "objects_placed": placed,
                         "objects_skipped": skipped}
        if log:
            log(f"built {subset}: {len(ids)} scenes x {len(splits)} splits, "
                f"{placed} objects ({skipped} skipped)")
    manifest = {
        "format": "ocsafpn-dataset-v1",
        "config_hash": cfg.config_hash,
        "data_fingerprint": cfg.data_fingerprint,
        "image_size": cfg.image_size,
        "num_classes": cfg.num_classes,
        "data_seed": cfg.data_seed,
        "splits": {s: {"n": degradation_spec(cfg, s).n,
                       "v": degradation_spec(cfg, s).v} for s in splits},
        "noise_unit": cfg.noise_unit,
        "noise_unit_note": NOISE_UNIT_NOTE,
        "subsets": stats,
        "image_format": "binary PPM (P6), 8-bit",
        "annotation_format": "rotated-boxes JSON lines, angle in radians",
    }
    with open(data_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise ValueError(f"no dataset manifest at {path}; run build-data first")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format") != "ocsafpn-dataset-v1":
        raise ValueError(f"{path}: unrecognized dataset format")
    return manifest


def load_split(data_dir, split: str, subset: str):
    """(image ids, id -> image path, id -> ground truth boxes)."""
    base = Path(data_dir) / split / subset
    if not base.is_dir():
        raise ValueError(f"dataset has no {split}/{subset} at {base}")
    paths = {int(p.stem): p for p in sorted(base.glob("*.ppm"))}
    if not paths:
        raise ValueError(f"no images under {base}")
    gts = read_annotations(base / "annotations.jsonl")
    return sorted(paths), paths, gts


# ---------------------------------------------------------------------------
# model assembly

class DetectionModel(Module):
    """Backbone -> neck -> head, wired per config."""

    def __init__(self, cfg: ExperimentConfig, *, rng, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.backbone_cfg = BackboneConfig(variant=cfg.backbone,
                                           width_scale=cfg.width_scale)
        self.backbone = build_backbone(self.backbone_cfg, rng=rng, dtype=dtype)
        channels = self.backbone_cfg.level_channels()
        neck_cfg = NeckConfig(enable_near=cfg.enable_near,
                              enable_far=cfg.enable_far,
                              enable_attention=cfg.enable_attention,
                              enable_fusion=cfg.enable_fusion,
                              topdown_source=cfg.topdown_source)
        self.out_channels = neck_cfg.resolved_out_channels(cfg.width_scale)
        if cfg.neck == "ocsafpn":
            self.neck = OcSaFPN(channels, neck_cfg, cfg.width_scale,
                                rng=rng, dtype=dtype)
        else:
            self.neck = BaselineFPN({i: h for i, (h, _) in channels.items()},
                                    self.out_channels, rng=rng, dtype=dtype)
        self.head = DetectionHead(self.out_channels, cfg.num_classes,
                                  rng=rng, dtype=dtype)

    def pyramid(self, images: Tensor) -> list[Tensor]:
        hierarchy = self.backbone(images)
        if self.cfg.neck == "ocsafpn":
            return self.neck(hierarchy)
        feats = {i: f.high if isinstance(f, OctaveFeature) else f
                 for i, f in hierarchy.levels().items()}
        return self.neck(feats)

    def forward(self, images: Tensor) -> list[tuple[Tensor, Tensor]]:
        return self.head(self.pyramid(images))


def build_model(cfg: ExperimentConfig, *, rng=None,
                dtype=np.float64) -> DetectionModel:
    if rng is None:
        rng = np.random.default_rng(cfg.model_seed)
    return DetectionModel(cfg, rng=rng, dtype=dtype)


def analytic_param_count(cfg: ExperimentConfig) -> int:
    """Independent audit path: a fresh model's count, no training state."""
    return build_model(cfg).parameter_count()


# ---------------------------------------------------------------------------
# training

def _lr_at(cfg: ExperimentConfig, step: int) -> float:
    milestones = sorted(int(f * cfg.steps) for f in cfg.decay_at)
    passed = sum(1 for m in milestones if step >= m)
    lr = cfg.lr * cfg.lr_decay ** passed
    if step < cfg.warmup:
        lr *= (step + 1) / cfg.warmup
    return lr


def train(cfg: ExperimentConfig, data_dir, run_dir, *, log=None) -> dict:
    """Adam over cfg.steps; writes checkpoint, loss log, run summary.

    Adam rather than plain SGD: per-parameter step scaling is what lets a
    from-scratch detector reach useful accuracy inside a few hundred steps
    on one CPU.  Betas are fixed at 0.9/0.999; only lr and its schedule are
    configurable.
    """
    manifest = load_manifest(data_dir)
    if manifest["num_classes"] != cfg.num_classes:
        raise ValueError(f"dataset has {manifest['num_classes']} classes, "
                         f"config wants {cfg.num_classes}")
    if manifest["data_fingerprint"] != cfg.data_fingerprint:
        raise ValueError("dataset was built from different data settings "
                         f"({manifest['data_fingerprint']} != {cfg.data_fingerprint})")
    ids, paths, gts = load_split(data_dir, cfg.train_split, "train")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    model = build_model(cfg)
    model.train()
    params = list(model.named_parameters())
    moment1 = {name: np.zeros_like(p.data) for name, p in params}
    moment2 = {name: np.zeros_like(p.data) for name, p in params}
    order_rng = np.random.default_rng((cfg.data_seed, cfg.model_seed, 1))
    cache: dict[int, np.ndarray] = {}

    def fetch(image_id: int) -> np.ndarray:
        if image_id not in cache:
            cache[image_id] = D.read_ppm(paths[image_id])
        return cache[image_id]

    def snapshot() -> dict[str, np.ndarray]:
        # state_arrays hands back live views; the rollback copy must not
        # track the in-place SGD updates
        return {k: v.copy() for k, v in model.state_arrays().items()}

    log_lines = ["step,lr,loss,cls,reg,num_pos"]
    last_good = snapshot()
    losses = []
    for step in range(cfg.steps):
        batch_ids = [int(i) for i in order_rng.choice(
            ids, size=min(cfg.batch_size, len(ids)), replace=False)]
        images = Tensor(np.stack([fetch(i) for i in batch_ids]))
        batch_gts = [gts.get(i, []) for i in batch_ids]
        model.zero_grad()
        preds = model(images)
        loss, parts = assign_and_loss(preds, batch_gts, cfg.num_classes)
        loss_val = float(loss.data)
        lr = _lr_at(cfg, step)
        log_lines.append(f"{step},{lr!r},{loss_val!r},"
                         f"{parts['cls']!r},{parts['reg']!r},{parts['num_pos']}")
        if not math.isfinite(loss_val):
            fdt.save_checkpoint(run_dir / "checkpoint", last_good, meta={
                "config": cfg.to_dict(), "config_hash": cfg.config_hash,
                "param_count": model.parameter_count(),
                "steps_completed": step, "aborted": True})
            _write_text(run_dir / "train_log.csv", "\n".join(log_lines) + "\n")
            raise NumericFailure(
                f"non-finite loss at step {step}; last-good checkpoint saved "
                f"to {run_dir / 'checkpoint'}")
        losses.append(loss_val)
        T.backward(loss, leaves=[p for _, p in params])
        t = step + 1
        for name, p in params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = moment1[name]
            m *= 0.9
            m += 0.1 * g
            v = moment2[name]
            v *= 0.999
            v += 0.001 * g * g
            mh = m / (1.0 - 0.9 ** t)
            vh = v / (1.0 - 0.999 ** t)
            p.data -= lr * mh / (np.sqrt(vh) + 1e-8)
        last_good = snapshot()
        if log and (step % 25 == 0 or step == cfg.steps - 1):
            log(f"step {step:5d}  lr {lr:.4g}  loss {loss_val:.4f}  "
                f"pos {parts['num_pos']}")

    wall = time.perf_counter() - t0
    fdt.save_checkpoint(run_dir / "checkpoint", model.state_arrays(), meta={
        "config": cfg.to_dict(), "config_hash": cfg.config_hash,
        "param_count": model.parameter_count(),
        "steps_completed": cfg.steps, "aborted": False})
    _write_text(run_dir / "train_log.csv", "\n".join(log_lines) + "\n")
    summary = {"config_hash": cfg.config_hash,
               "param_count": model.parameter_count(),
               "steps": cfg.steps, "final_loss": losses[-1],
               "wall_time_s": round(wall, 3), "aborted": False}
    with open(run_dir / "run_summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(text)


def load_model(checkpoint_dir) -> tuple[DetectionModel, dict]:
    arrays, meta = fdt.load_checkpoint(checkpoint_dir)
    cfg = ExperimentConfig.from_dict(meta["config"])
    model = build_model(cfg)
    model.load_state_arrays(arrays)
    return model, meta


# ---------------------------------------------------------------------------
# evaluation

def dataset_average_precision(dets_by_image: dict[int, list[RotatedBox]],
                              gts_by_image: dict[int, list[RotatedBox]],
                              num_classes: int, iou_thresh: float = 0.5
                              ) -> dict[int, float | None]:
    """Per-class AP over a whole split; None for classes with no truth.

    Detections are matched greedily inside their own image, then pooled and
    re-ranked by score across images, the usual VOC aggregation.
    """
    aps: dict[int, float | None] = {}
    image_ids = sorted(set(dets_by_image) | set(gts_by_image))
    for c in range(num_classes):
        scores, is_tp = [], []
        num_gt = 0
        for i in image_ids:
            dets_c = [d for d in dets_by_image.get(i, []) if d.class_id == c]
            gts_c = [g for g in gts_by_image.get(i, []) if g.class_id == c]
            num_gt += len(gts_c)
            if dets_c:
                m = match_detections(dets_c, gts_c, iou_thresh)
                scores.extend(m.scores.tolist())
                is_tp.extend(m.is_tp.tolist())
        if num_gt == 0:
            aps[c] = None
            continue
        order = np.argsort(-np.asarray(scores, dtype=np.float64),
                           kind="stable") if scores else np.array([], dtype=int)
        merged = MatchResult(
            np.asarray(scores, dtype=np.float64)[order],
            np.asarray(is_tp, dtype=bool)[order],
            np.zeros(num_gt, dtype=bool))
        aps[c] = average_precision(merged, num_gt)
    return aps


def evaluate(cfg: ExperimentConfig, data_dir, run_dir, *, checkpoint=None,
             split: str | None = None, oracle: bool = False,
             score_thresh: float = 0.05, log=None) -> dict:
    """One ReportRow: per-class AP + mAP on a split's test subset."""
    split = split or cfg.eval_split
    manifest = load_manifest(data_dir)
    ids, paths, gts = load_split(data_dir, split, "test")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    if oracle:
        param_count = 0
        dets_by_image = {i: [replace(g, score=1.0) for g in gts.get(i, [])]
                         for i in ids}
    else:
        if checkpoint is None:
            raise ValueError("evaluate needs a checkpoint unless oracle=True")
        model, meta = load_model(checkpoint)
        if meta["config"]["num_classes"] != manifest["num_classes"]:
            raise ValueError(
                f"checkpoint was trained for {meta['config']['num_classes']} "
                f"classes, dataset has {manifest['num_classes']}")
        model.eval()
        param_count = meta["param_count"]
        dets_by_image = {}
        batch = 8
        for k in range(0, len(ids), batch):
            chunk = ids[k:k + batch]
            images = Tensor(np.stack([D.read_ppm(paths[i]) for i in chunk]))
            preds = model(images)
            for bi, image_id in enumerate(chunk):
                dets_by_image[image_id] = decode_detections(
                    preds, image_index=bi, score_thresh=score_thresh)
            if log and k % 32 == 0:
                log(f"evaluated {min(k + batch, len(ids))}/{len(ids)} images")

    aps = dataset_average_precision(dets_by_image, gts, cfg.num_classes)
    present = [v for v in aps.values() if v is not None]
    row = {
        "config_hash": cfg.config_hash,
        "seed": cfg.model_seed,
        "split": split,
        "param_count": param_count,
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "ap": {str(c): aps[c] for c in sorted(aps)},
        "map": float(np.mean(present)) if present else 0.0,
    }
    tag = "oracle" if oracle else "model"
    write_report_csv(run_dir / f"eval_{split}_{tag}.csv", [row], cfg.num_classes)
    with open(run_dir / f"eval_{split}_{tag}.json", "w") as f:
        json.dump(row, f, indent=2, sort_keys=True)
        f.write("\n")
    return row


def write_report_csv(path, rows: list[dict], num_classes: int,
                     extra_cols: tuple = ()) -> None:
    """CSV mirror of the report rows; the mAP cell is the exact float mean
    of the non-empty per-class AP cells in the same row."""
    cols = list(extra_cols) + ["config_hash", "seed", "split", "param_count",
                               "wall_time_s"]
    cols += [f"ap_{c}" for c in range(num_classes)] + ["map"]
    lines = [",".join(cols)]
    for row in rows:
        cells = [str(row.get(k, "")) for k in extra_cols]
        cells += [row["config_hash"], str(row["seed"]), row["split"],
                  str(row["param_count"]), repr(row["wall_time_s"])]
        for c in range(num_classes):
            ap = row["ap"].get(str(c))
            cells.append("" if ap is None else repr(ap))
        cells.append(repr(row["map"]))
        lines.append(",".join(cells))
    _write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# ablation grids

ABLATE_ROWS = {
    "connections": [("full", {}),
                    ("near_only", {"enable_far": False}),
                    ("far_only", {"enable_near": False})],
    "fusion": [("full", {}),
               ("attention_off", {"enable_attention": False}),
               ("fusion_off", {"enable_fusion": False})],
    "backbone": [("ocsafpn_octave", {"backbone": "octave", "neck": "ocsafpn"}),
                 ("fpn_plain", {"backbone": "plain", "neck": "baseline_fpn"})],
}


def ablate(cfg: ExperimentConfig, data_dir, out_dir, axis: str = "all",
           n_seeds: int = 1, log=None) -> list[dict]:
    axes = list(ABLATE_ROWS) if axis == "all" else [axis]
    unknown = [a for a in axes if a not in ABLATE_ROWS]
    if unknown:
        raise ValueError(f"unknown ablation axis {unknown[0]!r}; "
                         f"choose from {sorted(ABLATE_ROWS)} or 'all'")
    out_dir = Path(out_dir)
    all_rows = []
    for ax in axes:
        rows = _ablate_axis(cfg, data_dir, out_dir, ax, n_seeds, log)
        all_rows.extend(rows)
    return all_rows


def _ablate_axis(cfg, data_dir, out_dir, axis, n_seeds, log) -> list[dict]:
    rows = []
    if axis == "backbone":
        # the A/B: both arms share cfg.train_split, tested clean and hard
        eval_splits = ["clean"]
        if "n0.2_v1" in cfg.presets:
            eval_splits.append("n0.2_v1")
        for row_name, overrides in ABLATE_ROWS[axis]:
            for s in range(n_seeds):
                run_cfg = replace(cfg, model_seed=cfg.model_seed + s, **overrides)
                run_dir = out_dir / f"ablate_{axis}" / f"{row_name}_s{run_cfg.model_seed}"
                if log:
                    log(f"[{axis}] {row_name} seed {run_cfg.model_seed}: training")
                train(run_cfg, data_dir, run_dir, log=log)
                for split in eval_splits:
                    row = evaluate(run_cfg, data_dir, run_dir,
                                   checkpoint=run_dir / "checkpoint",
                                   split=split, log=log)
                    row["row"] = row_name
                    rows.append(row)
        _write_ab_summary(out_dir / f"ablate_{axis}", rows, eval_splits)
    else:
        presets = ["clean"] + list(cfg.presets)
        for row_name, overrides in ABLATE_ROWS[axis]:
            for preset in presets:
                for s in range(n_seeds):
                    run_cfg = replace(cfg, train_split=preset, eval_split=preset,
                                      model_seed=cfg.model_seed + s, **overrides)
                    run_dir = out_dir / f"ablate_{axis}" / \
                        f"{row_name}_{preset}_s{run_cfg.model_seed}"
                    if log:
                        log(f"[{axis}] {row_name} on {preset} "
                            f"seed {run_cfg.model_seed}: training")
                    train(run_cfg, data_dir, run_dir, log=log)
                    row = evaluate(run_cfg, data_dir, run_dir,
                                   checkpoint=run_dir / "checkpoint",
                                   split=preset, log=log)
                    row["row"] = row_name
                    rows.append(row)
    write_report_csv(Path(out_dir) / f"ablate_{axis}.csv", rows,
                     cfg.num_classes, extra_cols=("row",))
    with open(Path(out_dir) / f"ablate_{axis}.json", "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
        f.write("\n")
    return rows


def _write_ab_summary(ab_dir: Path, rows: list[dict], eval_splits) -> None:
    ab_dir.mkdir(parents=True, exist_ok=True)
    summary = {"splits": {}}
    for split in eval_splits:
        arms = {}
        for row_name, _ in ABLATE_ROWS["backbone"]:
            maps = [r["map"] for r in rows
                    if r["row"] == row_name and r["split"] == split]
            arms[row_name] = {"maps": maps,
                              "mean_map": float(np.mean(maps)) if maps else None}
        delta = None
        if arms["ocsafpn_octave"]["maps"] and arms["fpn_plain"]["maps"]:
            delta = arms["ocsafpn_octave"]["mean_map"] - arms["fpn_plain"]["mean_map"]
        summary["splits"][split] = {**arms, "delta_ocsafpn_minus_fpn": delta}
    clean = summary["splits"].get("clean", {})
    summary["clean_gate_both_above_0.5"] = bool(
        clean and all(clean[a]["mean_map"] is not None and clean[a]["mean_map"] > 0.5
                      for a, _ in ABLATE_ROWS["backbone"]))
    hard = summary["splits"].get("n0.2_v1")
    summary["degraded_direction_ocsafpn_ge_fpn"] = (
        None if not hard or hard["delta_ocsafpn_minus_fpn"] is None
        else bool(hard["delta_ocsafpn_minus_fpn"] >= 0))
    with open(ab_dir / "ab_summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# gradient-check registry

def _weighted_sum(t: Tensor, rng: np.random.Generator) -> Tensor:
    """Sum against fixed noise so no gradient direction is structurally zero."""
    w = Tensor(rng.standard_normal(t.shape))
    return T.tensor_sum(T.multiply(t, w))


def _check_conv2d():
    rng = np.random.default_rng(10)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    k = Tensor(0.5 * rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    w = T.ConvWeights(k, b, stride=1, padding=1)
    wred = np.random.default_rng(11)
    fixed = Tensor(wred.standard_normal((1, 3, 5, 5)))
    return T.grad_check(lambda: T.tensor_sum(T.multiply(T.conv2d(x, w), fixed)),
                        [x, k, b])


def _check_deconv2d():
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
    k = Tensor(0.5 * rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    w = T.ConvWeights(k, b, stride=2, padding=1)
    fixed = Tensor(np.random.default_rng(13).standard_normal((1, 2, 6, 6)))
    return T.grad_check(lambda: T.tensor_sum(T.multiply(T.deconv2d(x, w), fixed)),
                        [x, k, b])


def _check_pool2d():
    rng = np.random.default_rng(14)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    worst = 0.0
    for mode in ("average", "max"):
        fixed = Tensor(np.random.default_rng(15).standard_normal((1, 2, 2, 2)))
        err = T.grad_check(
            lambda m=mode: T.tensor_sum(T.multiply(T.pool2d(x, 2, m), fixed)), [x])
        worst = max(worst, err)
    return worst


def _check_upsample(mode: str):
    rng = np.random.default_rng(16)
    x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    fixed = Tensor(np.random.default_rng(17).standard_normal((1, 2, 6, 6)))
    return T.grad_check(
        lambda: T.tensor_sum(T.multiply(T.upsample(x, 2, mode), fixed)), [x])


def _check_batchnorm2d():
    rng = np.random.default_rng(18)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    gamma = Tensor(1.0 + 0.2 * rng.standard_normal(3), requires_grad=True)
    beta = Tensor(0.1 * rng.standard_normal(3), requires_grad=True)
    rm, rv = np.zeros(3), np.ones(3)
    fixed = Tensor(np.random.default_rng(19).standard_normal((2, 3, 4, 4)))
    return T.grad_check(
        lambda: T.tensor_sum(T.multiply(
            T.batchnorm2d(x, gamma, beta, rm, rv, mode="train"), fixed)),
        [x, gamma, beta])


def _check_octave_conv():
    rng = np.random.default_rng(20)
    x = OctaveFeature(Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True),
                      Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True))
    w = B.make_octave_weights(4, 4, 0.5, 0.5, 3, rng=rng, dtype=np.float64)
    params = [x.high, x.low]
    for path in (w.w_hh, w.w_lh, w.w_ll, w.w_hl):
        if path is not None:
            path.kernel.requires_grad = True
            params.append(path.kernel)
            if path.bias is not None:
                path.bias.requires_grad = True
                params.append(path.bias)
    wred = np.random.default_rng(21)
    fh = Tensor(wred.standard_normal((1, 2, 6, 6)))
    fl = Tensor(wred.standard_normal((1, 2, 3, 3)))

    def loss():
        out = B.octave_conv(x, w)
        return T.tensor_sum(T.multiply(out.high, fh)) + \
            T.tensor_sum(T.multiply(out.low, fl))
    return T.grad_check(loss, params)


def _module_check(module: Module, x: Tensor, out_shape, seed: int,
                  params=None) -> float:
    fixed = Tensor(np.random.default_rng(seed).standard_normal(out_shape))
    ps = params if params is not None else module.parameters() + [x]
    return T.grad_check(
        lambda: T.tensor_sum(T.multiply(module(x), fixed)), ps)


def _check_cbr():
    rng = np.random.default_rng(22)
    worst = 0.0
    m1 = B.CBR(2, 3, rng=rng, dtype=np.float64)
    x1 = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    worst = max(worst, _module_check(m1, x1, (1, 3, 5, 5), 23))
    m2 = B.CBR(2, 3, k=4, stride=2, rng=rng, dtype=np.float64)
    x2 = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    worst = max(worst, _module_check(m2, x2, (1, 3, 3, 3), 24))
    return worst


def _check_inception():
    # seed picked clear of max-pool argmax ties under the probe step
    rng = np.random.default_rng(2)
    m = B.InceptionBlock(4, rng=rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 4, 6, 6)), requires_grad=True)
    return _module_check(m, x, (1, 4, 6, 6), 1002)


def _check_attention():
    rng = np.random.default_rng(27)
    m = B.AttentionBlock(8, 4, rng=rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 8, 6, 6)), requires_grad=True)
    return _module_check(m, x, (1, 8, 6, 6), 28)


def _mini_neck():
    rng = np.random.default_rng(29)
    donors = {2: (4, 4), 3: (4, 4), 4: (8, 8), 5: (16, 0)}
    neck = OcSaFPN(donors, NeckConfig(out_channels=8), 8,
                   rng=rng, dtype=np.float64)
    t = lambda *s: Tensor(rng.standard_normal(s), requires_grad=True)
    # batch 2 keeps train-mode batch norm fed at the 1x1 pyramid top
    hier = FeatureHierarchy(
        OctaveFeature(t(2, 4, 16, 16), t(2, 4, 8, 8)),
        OctaveFeature(t(2, 4, 8, 8), t(2, 4, 4, 4)),
        OctaveFeature(t(2, 8, 4, 4), t(2, 8, 2, 2)),
        t(2, 16, 2, 2))
    return neck, hier


def _check_fuse_level():
    neck, hier = _mini_neck()
    named = dict(neck.named_parameters())
    picks = [named["attention.1.fc1.kernel"], named["attention.1.fc2.kernel"],
             named["merge.1.bn.gamma"], named["merge.1.bn.beta"],
             named[f"paths.{neck._path_index['m3_o5w']}.cbr.conv.kernel"],
             named[f"paths.{neck._path_index['m3_o2h']}.conv.kernel"],
             hier.o3.high, hier.o5]
    fixed = Tensor(np.random.default_rng(30).standard_normal((2, 8, 8, 8)))
    return T.grad_check(
        lambda: T.tensor_sum(T.multiply(neck.fuse_level(3, hier), fixed)), picks)


def _check_build_pyramid():
    neck, hier = _mini_neck()
    named = dict(neck.named_parameters())
    picks = [named["out_cbr.0.bn.gamma"], named["out_cbr.1.bn.gamma"],
             named["out_cbr.2.bn.gamma"], named["out_cbr.3.bn.gamma"],
             named["p6_cbr.bn.gamma"], named["p6_cbr.bn.beta"]]
    rng = np.random.default_rng(31)
    fixed = [Tensor(rng.standard_normal((2, 8, 16 >> i, 16 >> i)))
             for i in range(4)] + [Tensor(rng.standard_normal((2, 8, 1, 1)))]

    def loss():
        fused = {i: neck.fuse_level(i, hier) for i in (2, 3, 4, 5)}
        p = neck.build_pyramid(fused)
        total = T.tensor_sum(T.multiply(p[0], fixed[0]))
        for t, f in zip(p[1:], fixed[1:]):
            total = total + T.tensor_sum(T.multiply(t, f))
        return total
    return T.grad_check(loss, picks)


def _check_detection_head():
    rng = np.random.default_rng(32)
    head = DetectionHead(8, 2, rng=rng, dtype=np.float64, tower_depth=1)
    pyramid = [Tensor(rng.standard_normal((1, 8, 8, 8)), requires_grad=True),
               Tensor(rng.standard_normal((1, 8, 4, 4)), requires_grad=True)]
    gts = [[RotatedBox(32.0, 32.0, 24.0, 12.0, 0.3, class_id=1)]]
    named = dict(head.named_parameters())
    picks = [named["cls_out.bias"], named["reg_out.bias"],
             named["cls_tower.0.bias"], named["reg_tower.0.bias"]] + pyramid

    def loss():
        preds = head(pyramid)
        return assign_and_loss(preds, gts, 2, strides=(8, 16))[0]
    return T.grad_check(loss, picks)


GRADCHECK_BLOCKS = {
    "conv2d": _check_conv2d,
    "deconv2d": _check_deconv2d,
    "pool2d": _check_pool2d,
    "upsample_nearest": lambda: _check_upsample("nearest"),
    "upsample_bilinear": lambda: _check_upsample("bilinear"),
    "batchnorm2d": _check_batchnorm2d,
    "octave_conv": _check_octave_conv,
    "cbr": _check_cbr,
    "inception_block": _check_inception,
    "attention_block": _check_attention,
    "fuse_level": _check_fuse_level,
    "build_pyramid": _check_build_pyramid,
    "detection_head": _check_detection_head,
}


def run_gradcheck(blocks=None, threshold: float = 1e-6, log=None
                  ) -> tuple[list[dict], bool]:
    """One line per block: analytic vs central-difference max relative error."""
    names = list(GRADCHECK_BLOCKS) if blocks is None else list(blocks)
    unknown = [n for n in names if n not in GRADCHECK_BLOCKS]
    if unknown:
        raise ValueError(f"unknown gradcheck blocks {unknown}")
    report, all_ok = [], True
    for name in names:
        err = float(GRADCHECK_BLOCKS[name]())
        ok = err <= threshold
        all_ok &= ok
        report.append({"block": name, "max_rel_err": err, "pass": ok})
        if log:
            log(f"{name:<18} {'PASS' if ok else 'FAIL'}  max_rel_err={err:.3e}")
    return report, all_ok


# ---------------------------------------------------------------------------
# frequency diagnostics (panel bundle + energy report)

def freq_diag(cfg: ExperimentConfig, out_dir, preset: str = "n0.2_v1",
              sigma: float = 2.0, image_id: int = 0, log=None) -> dict:
    if preset != "clean" and preset not in D.PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    if cfg.image_size & (cfg.image_size - 1):
        raise ValueError("spectrum panels need a power-of-two image size")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    clean, _ = D.synth_scene(scene_spec(cfg), image_id)
    degraded = D.degrade_image(clean, degradation_spec(cfg, preset), image_id)
    report = {"config_hash": cfg.config_hash, "preset": preset,
              "sigma": sigma, "image_id": image_id, "bands": {}}
    for tag, img in (("clean", clean), ("degraded", degraded)):
        gray = img.mean(axis=0)
        low, high = D.frequency_split(gray, sigma)
        D.write_pgm(out_dir / f"{tag}_image.pgm", gray)
        D.write_pgm(out_dir / f"{tag}_low.pgm", low)
        # high band is signed; map [-1,1] onto [0,1] around mid-gray
        D.write_pgm(out_dir / f"{tag}_high.pgm", np.clip(0.5 + 0.5 * high, 0, 1))
        D.write_pgm(out_dir / f"{tag}_spectrum.pgm", D.dft_magnitude(gray))
        report["bands"][tag] = {
            "low_energy": float((low ** 2).mean()),
            "high_energy": float((high ** 2).mean()),
        }
    report["low_energy_delta_degraded_minus_clean"] = (
        report["bands"]["degraded"]["low_energy"]
        - report["bands"]["clean"]["low_energy"])
    with open(out_dir / "energies.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    if log:
        log(f"low-band energy delta (degraded - clean): "
            f"{report['low_energy_delta_degraded_minus_clean']:.6f}")
    return report
