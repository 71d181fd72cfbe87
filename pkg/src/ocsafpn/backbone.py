"""Residual backbone with frequency-split stages.

Four bottleneck stages over a stride-4 stem.  Stages 2-4 carry octave
features (high + half-resolution low); stage 5 merges back to an undivided
map.  The plain variant is the same network at alpha 0, which makes the
two parameter counts match exactly (the octave kernel paths partition the
vanilla kernels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (OctaveBatchNorm, OctaveConv, OctaveFeature, octave_pool,
                     octave_relu)
from .nn import BatchNorm2d, Conv2d, Deconv2d, Module, ModuleList
from .tensor import Tensor

STEM_WIDTH = 64
STAGE_WIDTHS = (256, 512, 1024, 2048)
ALLOWED_SCALES = (1, 2, 4, 8, 16)


@dataclass
class BackboneConfig:
    variant: str = "octave"           # octave | plain
    width_scale: int = 8
    alpha: float = 0.5
    blocks_per_stage: tuple = (1, 1, 1, 1)

    def __post_init__(self):
        if self.variant not in ("octave", "plain"):
            raise ValueError(f"variant must be octave|plain, got {self.variant!r}")
        if self.width_scale not in ALLOWED_SCALES:
            raise ValueError(f"width_scale must be one of {ALLOWED_SCALES}, "
                             f"got {self.width_scale}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must be in [0,1), got {self.alpha}")
        if len(self.blocks_per_stage) != 4 or any(b < 1 for b in self.blocks_per_stage):
            raise ValueError(f"blocks_per_stage needs four positive counts, "
                             f"got {self.blocks_per_stage}")
        for w in self.stage_widths + (self.stem_width,):
            if w % 4:
                raise ValueError(f"scaled width {w} not divisible by 4 "
                                 f"(width_scale {self.width_scale})")

    @property
    def stage_widths(self) -> tuple:
        return tuple(w // self.width_scale for w in STAGE_WIDTHS)

    @property
    def stem_width(self) -> int:
        return STEM_WIDTH // self.width_scale

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.variant == "octave" else 0.0

    def level_channels(self) -> dict[int, tuple[int, int]]:
        """level -> (high, low) channel counts of the emitted hierarchy."""
        a = self.effective_alpha
        out = {}
        for lvl, wtot in zip((2, 3, 4), self.stage_widths[:3]):
            cl = int(round(a * wtot))
            out[lvl] = (wtot - cl, cl)
        out[5] = (self.stage_widths[3], 0)
        return out


@dataclass
class FeatureHierarchy:
    """o2..o4 octave features at n/4..n/16, o5 undivided at n/32."""

    o2: OctaveFeature
    o3: OctaveFeature
    o4: OctaveFeature
    o5: Tensor

    def __post_init__(self):
        b, _, h2, w2 = self.o2.high.shape
        for lvl, feat in ((3, self.o3), (4, self.o4)):
            fb, _, fh, fw = feat.high.shape
            if fb != b:
                raise ValueError(f"o{lvl}: batch {fb} differs from o2's {b}")
            scale = 2 ** (lvl - 2)
            if (fh, fw) != (h2 // scale, w2 // scale):
                raise ValueError(
                    f"o{lvl} extent {fh}x{fw}, expected {h2 // scale}x{w2 // scale}")
        b5, _, h5, w5 = self.o5.shape
        if b5 != b or (h5, w5) != (h2 // 8, w2 // 8):
            raise ValueError(f"o5 shape {self.o5.shape} inconsistent with o2 "
                             f"{self.o2.high.shape}")

    def levels(self) -> dict[int, OctaveFeature | Tensor]:
        return {2: self.o2, 3: self.o3, 4: self.o4, 5: self.o5}


class Bottleneck(Module):
    """1x1 reduce, 3x3, 1x1 expand, all octave; projection shortcut on change."""

    def __init__(self, c_in: int, c_out: int, alpha_in: float, alpha_out: float, *,
                 rng, dtype=np.float32):
        super().__init__()
        mid = c_out // 4

        def oc(ci, co, ai, ao, k):
            return OctaveConv(ci, co, ai, ao, k, bias=False, rng=rng, dtype=dtype)

        def bn(c, a):
            cl = int(round(a * c)) if a > 0 else 0
            return OctaveBatchNorm(c - cl, cl, dtype=dtype)

        self.conv1 = oc(c_in, mid, alpha_in, alpha_out, 1)
        self.bn1 = bn(mid, alpha_out)
        self.conv2 = oc(mid, mid, alpha_out, alpha_out, 3)
        self.bn2 = bn(mid, alpha_out)
        self.conv3 = oc(mid, c_out, alpha_out, alpha_out, 1)
        self.bn3 = bn(c_out, alpha_out)
        self.project = None
        if c_in != c_out or alpha_in != alpha_out:
            self.project = oc(c_in, c_out, alpha_in, alpha_out, 1)
            self.project_bn = bn(c_out, alpha_out)

    def forward(self, x: OctaveFeature) -> OctaveFeature:
        y = octave_relu(self.bn1(self.conv1(x)))
        y = octave_relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        s = self.project_bn(self.project(x)) if self.project is not None else x
        low = T.add(y.low, s.low) if y.low is not None else None
        return octave_relu(OctaveFeature(T.add(y.high, s.high), low))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, *, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        a = cfg.effective_alpha
        w = cfg.stage_widths
        # even kernel: odd k with stride 2 cannot halve an even extent exactly
        self.stem_conv = Conv2d(3, cfg.stem_width, 4, stride=2, padding=1,
                                bias=False, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(cfg.stem_width, dtype=dtype)
        stages = []
        c_prev, a_prev = cfg.stem_width, 0.0
        for si, (width, nblocks) in enumerate(zip(w, cfg.blocks_per_stage)):
            a_out = a if si < 3 else 0.0
            blocks = []
            for bi in range(nblocks):
                blocks.append(Bottleneck(c_prev, width, a_prev, a_out,
                                         rng=rng, dtype=dtype))
                c_prev, a_prev = width, a_out
            stages.append(ModuleList(blocks))
        self.stage2, self.stage3, self.stage4, self.stage5 = stages

    def forward(self, image: Tensor) -> FeatureHierarchy:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"backbone expects (b,3,n,n) images, got {image.shape}")
        n = image.shape[2]
        if n % 64 or image.shape[3] % 64:
            raise ValueError(f"image extent {image.shape[2:]} not divisible by 64")
        x = T.relu(self.stem_bn(self.stem_conv(image)))
        x = OctaveFeature(T.pool2d(x, 2, "max"))
        feats = []
        for si, stage in enumerate((self.stage2, self.stage3, self.stage4, self.stage5)):
            if si > 0:
                x = octave_pool(x, 2)
            for block in stage:
                x = block(x)
            feats.append(x)
        o2, o3, o4, o5 = feats
        return FeatureHierarchy(o2, o3, o4, o5.high)


def build_backbone(cfg: BackboneConfig, *, rng, dtype=np.float32) -> Backbone:
    return Backbone(cfg, rng=rng, dtype=dtype)


class LowFreqAdapter(Module):
    """Rejoin an octave feature into one undivided map.

    The low map is brought to the high map's extent with a stride-2
    transposed conv (k4/p1, exact doubling) plus BN and relu, then the two
    are concatenated, so downstream consumers see high+low channels.
    """

    def __init__(self, c_high: int, c_low: int, *, rng, dtype=np.float32):
        super().__init__()
        if c_low < 1:
            raise ValueError("adapter needs a low-frequency component")
        self.up = Deconv2d(c_low, c_low, 4, 2, 1, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(c_low, dtype=dtype)

    def forward(self, o: OctaveFeature) -> Tensor:
        if o.low is None:
            raise ValueError("adapter input has no low component")
        up = T.relu(self.bn(self.up(o.low)))
        return T.concat([o.high, up])
