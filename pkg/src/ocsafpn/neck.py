"""Dense cross-resolution fusion neck and the plain FPN baseline.

Every backbone level donates BOTH frequency components to every fused map
M_i (O5 donates its single undivided map), under a fixed rule set:

* same level: inception, then 1x1 compression to the target's contribution
  width (the low component additionally rises x2 to M_i's extent);
* one level below (j = i-1): CBR only, stride 2 on the high component;
* any smaller donor: channel compression plus bilinear up x2^m;
* two or more levels below: channel compression plus m stride-2 average pools.

Contribution widths double per target level (32*2^(i-2) at reference,
divided by width_scale).  Donors concatenate in fixed order (ascending
level, high before low, O5 last), pass a 3x3 CBR to the uniform pyramid
width, then channel+spatial attention.  P6..P2 come from the fused maps
through CBRs with a top-down sum (Eq.-style, bilinear x2 on the fused map
by default, on the finished pyramid level as a variant).

Near (|i-j| = 1) and far (|i-j| >= 2) donor groups, the attention gate and
the fusion scheme each toggle off independently for ablations; with fusion
off all donors are CBR+resample at one uniform width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import FeatureHierarchy
from .blocks import AttentionBlock, CBR, InceptionBlock, ResampleBlock
from .nn import Module, ModuleList
from .tensor import Tensor

LEVELS = (2, 3, 4, 5)
BASE_CONTRIBUTION = 32      # channels donated to M2 at reference width


@dataclass
class NeckConfig:
    out_channels: int | None = None     # None: 256/width_scale, floor 64
    enable_near: bool = True
    enable_far: bool = True
    enable_attention: bool = True
    enable_fusion: bool = True
    topdown_source: str = "M"           # M: fused maps feed g(.); P: finished levels

    def __post_init__(self):
        if self.topdown_source not in ("M", "P"):
            raise ValueError(f"topdown_source must be M|P, got {self.topdown_source!r}")
        if self.out_channels is not None and self.out_channels < 4:
            raise ValueError(f"out_channels too small ({self.out_channels})")

    def resolved_out_channels(self, width_scale: int) -> int:
        if self.out_channels is not None:
            return self.out_channels
        return max(64, 256 // width_scale)


@dataclass
class ConnectionEntry:
    target: int
    donor: int
    component: str          # high | low | whole
    proximity: str          # same | near | far
    transform: str          # inception | cbr | up | down
    m: int                  # x2 steps for up/down (0 otherwise)
    stride: int             # cbr stride (1 unless near-below high)
    c_donor: int
    c_contrib: int
    enabled: bool

    def key(self) -> str:
        return f"m{self.target}_o{self.donor}{self.component[0]}"


@dataclass
class ConnectionPlan:
    entries: list = field(default_factory=list)
    contribution: dict = field(default_factory=dict)   # target -> per-donor width

    def for_target(self, i: int, enabled_only: bool = True):
        return [e for e in self.entries
                if e.target == i and (e.enabled or not enabled_only)]


def plan_connections(donor_channels: dict[int, tuple[int, int]],
                     cfg: NeckConfig, width_scale: int) -> ConnectionPlan:
    """Lay out every donor->target edge with its transform and widths.

    donor_channels maps level -> (high, low) channel counts; level 5 must
    have low == 0 (the undivided map).
    """
    if sorted(donor_channels) != list(LEVELS):
        raise ValueError(f"donor levels must be {LEVELS}, got {sorted(donor_channels)}")
    if donor_channels[5][1] != 0:
        raise ValueError("level 5 donates a single undivided map")
    plan = ConnectionPlan()
    uniform = max(1, BASE_CONTRIBUTION // width_scale)
    for i in LEVELS:
        if cfg.enable_fusion:
            width = max(1, (BASE_CONTRIBUTION * 2 ** (i - 2)) // width_scale)
        else:
            width = uniform
        plan.contribution[i] = width
        for j in LEVELS:
            comps = ["whole"] if j == 5 else ["high", "low"]
            for comp in comps:
                c_donor = donor_channels[j][0 if comp != "low" else 1]
                if c_donor == 0:
                    continue        # plain hierarchy: no low component to donate
                # component extent as a level: low sits one octave deeper
                eff = j if comp != "low" else j + 1
                delta = i - eff        # positive: donor larger by 2^delta
                if j == i:
                    proximity = "same"
                elif abs(j - i) == 1:
                    proximity = "near"
                else:
                    proximity = "far"
                transform, m, stride = None, 0, 1
                if j == i and cfg.enable_fusion:
                    transform = "inception"
                    m = 1 if comp == "low" else 0
                elif delta == 0:
                    transform = "cbr"
                elif delta < 0:
                    transform, m = "up", -delta
                elif delta == 1 and j == i - 1:
                    transform, stride = "cbr", 2
                else:
                    transform, m = "down", delta
                enabled = (proximity == "same"
                           or (proximity == "near" and cfg.enable_near)
                           or (proximity == "far" and cfg.enable_far))
                plan.entries.append(ConnectionEntry(
                    target=i, donor=j, component=comp, proximity=proximity,
                    transform=transform, m=m, stride=stride,
                    c_donor=c_donor, c_contrib=width, enabled=enabled))
    return plan


def _build_transform(entry: ConnectionEntry, *, rng, dtype) -> Module:
    if entry.transform == "inception":
        return _InceptionPath(entry, rng=rng, dtype=dtype)
    if entry.transform == "cbr":
        # stride 2 needs an even kernel for an exact halved extent
        k = 4 if entry.stride == 2 else 1
        return CBR(entry.c_donor, entry.c_contrib, k=k, stride=entry.stride,
                   rng=rng, dtype=dtype)
    if entry.transform == "up":
        return ResampleBlock(entry.c_donor, entry.c_contrib, "up", entry.m,
                             rng=rng, dtype=dtype)
    return ResampleBlock(entry.c_donor, entry.c_contrib, "down", entry.m,
                         rng=rng, dtype=dtype)


class _InceptionPath(Module):
    """Same-level donor: inception, 1x1 compression, optional x2 rise."""

    def __init__(self, entry: ConnectionEntry, *, rng, dtype):
        super().__init__()
        self.inception = InceptionBlock(entry.c_donor, rng=rng, dtype=dtype)
        self.compress = CBR(entry.c_donor, entry.c_contrib, k=1, rng=rng, dtype=dtype)
        self.m = entry.m

    def forward(self, x: Tensor) -> Tensor:
        y = self.compress(self.inception(x))
        if self.m:
            y = T.upsample(y, 2 ** self.m, "bilinear")
        return y


class OcSaFPN(Module):
    """Dense donor fusion with attention, then the top-down pyramid."""

    def __init__(self, donor_channels: dict[int, tuple[int, int]],
                 cfg: NeckConfig, width_scale: int, *, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.plan = plan_connections(donor_channels, cfg, width_scale)
        self.out_channels = cfg.resolved_out_channels(width_scale)
        self.paths = ModuleList()
        self._path_index = {}
        for entry in self.plan.entries:
            if not entry.enabled:
                continue
            self._path_index[entry.key()] = len(self.paths)
            self.paths.append(_build_transform(entry, rng=rng, dtype=dtype))
        self.merge = ModuleList()
        self._merge_index = {}
        for i in LEVELS:
            cat_c = sum(e.c_contrib for e in self.plan.for_target(i))
            self._merge_index[i] = len(self.merge)
            self.merge.append(CBR(cat_c, self.out_channels, k=3, rng=rng, dtype=dtype))
        if cfg.enable_attention:
            reduction = 16 if self.out_channels >= 256 else 4
            self.attention = ModuleList(
                [AttentionBlock(self.out_channels, reduction, rng=rng, dtype=dtype)
                 for _ in LEVELS])
        else:
            self.attention = None
        self.out_cbr = ModuleList(
            [CBR(self.out_channels, self.out_channels, k=3, rng=rng, dtype=dtype)
             for _ in LEVELS])
        self.p6_cbr = CBR(self.out_channels, self.out_channels, k=3, rng=rng, dtype=dtype)

    # -- fusion ------------------------------------------------------------
    def fuse_level(self, i: int, hierarchy: FeatureHierarchy) -> Tensor:
        """Build M_i: transform every enabled donor, concat, CBR, attention."""
        levels = hierarchy.levels()
        target_hw = levels[i].high.shape[2:] if i != 5 else levels[5].shape[2:]
        parts = []
        for entry in self.plan.for_target(i):
            if entry.component == "whole":
                x = levels[5]
            elif entry.component == "high":
                x = levels[entry.donor].high
            else:
                x = levels[entry.donor].low
            y = self.paths[self._path_index[entry.key()]](x)
            if y.shape[2:] != target_hw:
                raise ValueError(
                    f"plan bug: donor o{entry.donor}/{entry.component} reached "
                    f"{y.shape[2:]} instead of {target_hw} for M{i}")
            parts.append(y)
        fused = self.merge[self._merge_index[i]](T.concat(parts))
        if self.attention is not None:
            fused = self.attention[i - 2](fused)
        return fused

    # -- pyramid -----------------------------------------------------------
    def build_pyramid(self, fused: dict[int, Tensor]) -> list[Tensor]:
        """P2..P6 from the fused maps with a top-down sum."""
        p = {5: self.out_cbr[3](fused[5])}
        for i in (4, 3, 2):
            source = fused[i + 1] if self.cfg.topdown_source == "M" else p[i + 1]
            td = T.upsample(source, 2, "bilinear")
            p[i] = T.add(self.out_cbr[i - 2](fused[i]), td)
        p6 = self.p6_cbr(T.pool2d(fused[5], 2, "max"))
        return [p[2], p[3], p[4], p[5], p6]

    def forward(self, hierarchy: FeatureHierarchy) -> list[Tensor]:
        fused = {i: self.fuse_level(i, hierarchy) for i in LEVELS}
        return self.build_pyramid(fused)


class BaselineFPN(Module):
    """Lateral 1x1 + nearest top-down + 3x3 smoothing; P6 by stride-2 pool."""

    def __init__(self, in_channels: dict[int, int], out_channels: int, *,
                 rng, dtype=np.float32):
        super().__init__()
        if sorted(in_channels) != list(LEVELS):
            raise ValueError(f"baseline FPN needs levels {LEVELS}, got {sorted(in_channels)}")
        from .nn import Conv2d
        self.out_channels = out_channels
        self.lateral = ModuleList(
            [Conv2d(in_channels[i], out_channels, 1, rng=rng, dtype=dtype)
             for i in LEVELS])
        self.smooth = ModuleList(
            [Conv2d(out_channels, out_channels, 3, rng=rng, dtype=dtype)
             for i in LEVELS])

    def forward(self, feats: dict[int, Tensor]) -> list[Tensor]:
        lat = {i: self.lateral[i - 2](feats[i]) for i in LEVELS}
        tops = {5: lat[5]}
        for i in (4, 3, 2):
            tops[i] = T.add(lat[i], T.upsample(tops[i + 1], 2, "nearest"))
        p = [self.smooth[i - 2](tops[i]) for i in LEVELS]
        p6 = T.pool2d(p[3], 2, "max")
        return p + [p6]
