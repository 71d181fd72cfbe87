"""Frequency-split convolution and the fusion blocks built on it.

An octave feature keeps a high-frequency map at full resolution and a
low-frequency map at half resolution; the octave convolution exchanges
information between the two with four kernel paths whose channel extents
partition a vanilla kernel exactly.  The remaining blocks (CBR, inception,
channel+spatial attention, resample) are the donor transforms the pyramid
fusion uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module, ModuleList, Parameter, kaiming
from .tensor import ConvWeights, Tensor


@dataclass
class OctaveFeature:
    """High map (b,ch,h,w) plus optional low map (b,cl,h/2,w/2)."""

    high: Tensor
    low: Tensor | None = None

    def __post_init__(self):
        if self.high.ndim != 4:
            raise ValueError(f"high map must be 4-D, got {self.high.shape}")
        if self.low is not None:
            if self.low.ndim != 4:
                raise ValueError(f"low map must be 4-D, got {self.low.shape}")
            bh, _, hh, wh = self.high.shape
            bl, _, hl, wl = self.low.shape
            if bh != bl:
                raise ValueError(f"batch mismatch: high {bh} vs low {bl}")
            if (hh, wh) != (2 * hl, 2 * wl):
                raise ValueError(
                    f"low extent {hl}x{wl} is not half of high {hh}x{wh}")

    @property
    def alpha(self) -> float:
        if self.low is None:
            return 0.0
        ch, cl = self.high.shape[1], self.low.shape[1]
        return cl / (ch + cl)

    @property
    def channels(self) -> int:
        return self.high.shape[1] + (self.low.shape[1] if self.low is not None else 0)


def split_channels(c: int, alpha: float) -> tuple[int, int]:
    """(high, low) channel split; alpha in [0,1)."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0,1), got {alpha}")
    cl = int(round(alpha * c))
    ch = c - cl
    if ch < 1:
        raise ValueError(f"alpha {alpha} leaves no high-frequency channels of {c}")
    return ch, cl


@dataclass
class OctaveWeights:
    """Four optional conv paths; absent paths encode alpha 0 on either side.

    Kernel channel extents partition the vanilla (c_out, c_in, k, k) kernel:
    the four blocks tile the channel plane, so parameter counts match a
    plain convolution exactly.  Biases live on one path per output branch.
    """

    w_hh: ConvWeights | None
    w_lh: ConvWeights | None
    w_ll: ConvWeights | None
    w_hl: ConvWeights | None
    alpha_in: float
    alpha_out: float

    def __post_init__(self):
        paths = [p for p in (self.w_hh, self.w_lh, self.w_ll, self.w_hl) if p is not None]
        if not paths:
            raise ValueError("octave weights need at least one path")
        k0 = paths[0]
        for p in paths[1:]:
            if (p.kernel.shape[2:], p.stride, p.padding) != (k0.kernel.shape[2:], k0.stride, k0.padding):
                raise ValueError("octave paths disagree on kernel size/stride/padding")
        if (self.alpha_in > 0) != (self.w_lh is not None or self.w_ll is not None):
            raise ValueError(f"alpha_in {self.alpha_in} inconsistent with present paths")
        if (self.alpha_out > 0) != (self.w_ll is not None or self.w_hl is not None):
            raise ValueError(f"alpha_out {self.alpha_out} inconsistent with present paths")

    def parameters(self) -> list[Tensor]:
        out = []
        for p in (self.w_hh, self.w_lh, self.w_ll, self.w_hl):
            if p is not None:
                out.append(p.kernel)
                if p.bias is not None:
                    out.append(p.bias)
        return out


def make_octave_weights(c_in: int, c_out: int, alpha_in: float, alpha_out: float,
                        k: int, stride: int = 1, padding: int | None = None,
                        bias: bool = True, *, rng: np.random.Generator,
                        dtype=np.float32) -> OctaveWeights:
    if padding is None:
        padding = (k - 1) // 2
    ci_h, ci_l = split_channels(c_in, alpha_in)
    co_h, co_l = split_channels(c_out, alpha_out) if alpha_out > 0 else (c_out, 0)

    def path(co, ci, with_bias):
        if co == 0 or ci == 0:
            return None
        kern = Parameter(kaiming(rng, (co, ci, k, k), ci * k * k, dtype))
        b = Parameter(np.zeros(co, dtype=dtype)) if (bias and with_bias) else None
        return ConvWeights(kern, b, stride, padding)

    return OctaveWeights(
        w_hh=path(co_h, ci_h, True),
        w_lh=path(co_h, ci_l, ci_h == 0),
        w_ll=path(co_l, ci_l, True),
        w_hl=path(co_l, ci_h, ci_l == 0),
        alpha_in=alpha_in, alpha_out=alpha_out)


def octave_conv(x: OctaveFeature, w: OctaveWeights,
                alpha_out: float | None = None) -> OctaveFeature:
    """Two-branch exchange: high keeps resolution, low runs at half.

    High output adds the x2-upsampled low->high conv; low output adds the
    conv of the 2x2-average-pooled high path.  With both alphas zero this
    is exactly conv2d on the high map, no extra arithmetic.
    """
    if alpha_out is not None and abs(alpha_out - w.alpha_out) > 1e-9:
        raise ValueError(f"alpha_out {alpha_out} does not match weights ({w.alpha_out})")
    if (x.low is not None) != (w.alpha_in > 0):
        raise ValueError(
            f"input alpha {x.alpha:.3f} inconsistent with weights alpha_in {w.alpha_in}")

    high = None
    if w.w_hh is not None:
        high = T.conv2d(x.high, w.w_hh)
    if w.w_lh is not None:
        lh = T.upsample(T.conv2d(x.low, w.w_lh), 2, "nearest")
        high = lh if high is None else T.add(high, lh)

    low = None
    if w.w_ll is not None:
        low = T.conv2d(x.low, w.w_ll)
    if w.w_hl is not None:
        hl = T.conv2d(T.pool2d(x.high, 2, "average"), w.w_hl)
        low = hl if low is None else T.add(low, hl)

    return OctaveFeature(high, low)


class OctaveConv(Module):
    def __init__(self, c_in: int, c_out: int, alpha_in: float, alpha_out: float,
                 k: int, stride: int = 1, padding: int | None = None,
                 bias: bool = True, *, rng, dtype=np.float32):
        super().__init__()
        w = make_octave_weights(c_in, c_out, alpha_in, alpha_out, k, stride,
                                padding, bias, rng=rng, dtype=dtype)
        self.octave_weights = w
        for name in ("w_hh", "w_lh", "w_ll", "w_hl"):
            cw = getattr(w, name)
            if cw is not None:
                setattr(self, f"{name}_kernel", cw.kernel)
                if cw.bias is not None:
                    setattr(self, f"{name}_bias", cw.bias)

    def forward(self, x: OctaveFeature) -> OctaveFeature:
        return octave_conv(x, self.octave_weights)


class OctaveBatchNorm(Module):
    """Independent batch norm per frequency branch."""

    def __init__(self, c_high: int, c_low: int, *, dtype=np.float32):
        super().__init__()
        self.bn_high = BatchNorm2d(c_high, dtype=dtype)
        self.bn_low = BatchNorm2d(c_low, dtype=dtype) if c_low else None

    def forward(self, x: OctaveFeature) -> OctaveFeature:
        low = self.bn_low(x.low) if self.bn_low is not None else None
        return OctaveFeature(self.bn_high(x.high), low)


def octave_relu(x: OctaveFeature) -> OctaveFeature:
    return OctaveFeature(T.relu(x.high), T.relu(x.low) if x.low is not None else None)


def octave_pool(x: OctaveFeature, k: int = 2) -> OctaveFeature:
    return OctaveFeature(T.pool2d(x.high, k, "average"),
                         T.pool2d(x.low, k, "average") if x.low is not None else None)


class CBR(Module):
    """Conv - batch norm - relu."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, *,
                 rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, stride, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class InceptionBlock(Module):
    """Four parallel branches of c/4 channels each, concatenated back to c.

    1x1 | 1x1-3x3 | 1x1-5x5 | 3x3maxpool-1x1; spatial extent preserved.
    """

    def __init__(self, c: int, *, rng, dtype=np.float32):
        super().__init__()
        if c % 4:
            raise ValueError(f"inception needs channels divisible by 4, got {c}")
        q = c // 4
        self.b1 = Conv2d(c, q, 1, rng=rng, dtype=dtype)
        self.b2_reduce = Conv2d(c, q, 1, rng=rng, dtype=dtype)
        self.b2 = Conv2d(q, q, 3, rng=rng, dtype=dtype)
        self.b3_reduce = Conv2d(c, q, 1, rng=rng, dtype=dtype)
        self.b3 = Conv2d(q, q, 5, rng=rng, dtype=dtype)
        self.b4 = Conv2d(c, q, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y1 = T.relu(self.b1(x))
        y2 = T.relu(self.b2(T.relu(self.b2_reduce(x))))
        y3 = T.relu(self.b3(T.relu(self.b3_reduce(x))))
        y4 = T.relu(self.b4(T.max_pool2d(x, 3, 1, 1)))
        return T.concat([y1, y2, y3, y4])


class AttentionBlock(Module):
    """Channel gate then spatial gate, CBAM-style.

    Channel gate: sigmoid of a shared two-layer bottleneck applied to the
    global average and max pools, summed.  Spatial gate: sigmoid of a 7x7
    conv over the stacked channelwise mean and max maps.
    """

    def __init__(self, c: int, reduction: int, *, rng, dtype=np.float32):
        super().__init__()
        if c < reduction:
            raise ValueError(f"channels {c} below reduction ratio {reduction}")
        mid = c // reduction
        self.fc1 = Conv2d(c, mid, 1, bias=False, rng=rng, dtype=dtype)
        self.fc2 = Conv2d(mid, c, 1, bias=False, rng=rng, dtype=dtype)
        self.spatial = Conv2d(2, 1, 7, bias=False, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        avg = self.fc2(T.relu(self.fc1(T.spatial_mean(x))))
        mx = self.fc2(T.relu(self.fc1(T.spatial_max(x))))
        gate_c = T.sigmoid(T.add(avg, mx))
        x = T.multiply(x, T.expand(gate_c, x.shape))
        stacked = T.concat([T.channel_mean(x), T.channel_max(x)])
        gate_s = T.sigmoid(self.spatial(stacked))
        return T.multiply(x, T.expand(gate_s, x.shape))


class ResampleBlock(Module):
    """Channel compression plus a 2^m extent change.

    Up: 1x1 CBR then one bilinear x2^m resize.  Down: 1x1 CBR then m
    stride-2 average pools.
    """

    def __init__(self, c_in: int, c_out: int, direction: str, m: int, *,
                 rng, dtype=np.float32):
        super().__init__()
        if direction not in ("up", "down"):
            raise ValueError(f"direction must be up|down, got {direction!r}")
        if m < 1:
            raise ValueError(f"resample exponent must be >= 1, got {m}")
        self.cbr = CBR(c_in, c_out, k=1, rng=rng, dtype=dtype)
        self.direction = direction
        self.m = m

    def forward(self, x: Tensor) -> Tensor:
        y = self.cbr(x)
        if self.direction == "up":
            return T.upsample(y, 2 ** self.m, "bilinear")
        for _ in range(self.m):
            y = T.pool2d(y, 2, "average")
        return y
