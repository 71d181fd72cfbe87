"""Reverse-mode autodiff on 4-D numpy arrays.

Every differentiable value is a :class:`Tensor` holding a numpy array plus
the bookkeeping needed to replay the chain rule: the parent tensors it was
computed from and a closure that maps the output gradient to parent
gradients.  ``backward(loss)`` walks that record in reverse topological
order.  Kernels are plain numpy (im2col + BLAS matmul for the conv family),
so the same code runs in float32 for experiments and float64 for tests.

Shape convention for feature maps is (b, c, h, w).  Reductions and losses
produce 0-d tensors.  Binary elementwise ops require identical shapes;
broadcasting is explicit via :func:`expand`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ConvWeights",
    "conv2d",
    "deconv2d",
    "pool2d",
    "max_pool2d",
    "upsample",
    "batchnorm2d",
    "relu",
    "sigmoid",
    "add",
    "multiply",
    "concat",
    "channel_slice",
    "expand",
    "spatial_mean",
    "spatial_max",
    "channel_mean",
    "channel_max",
    "tensor_sum",
    "bce_with_logits",
    "smooth_l1",
    "backward",
    "grad_check",
    "op_counter",
    "counted_macs",
]


class Tensor:
    """A numpy array with an operation record for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward_fn: Callable | None = None, _op: str = "leaf"):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # Small arithmetic surface; heavy ops live as module functions.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _scalar_affine(self, 1.0, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return _scalar_affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __neg__(self):
        return _scalar_affine(self, -1.0, 0.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, -other)
        return _scalar_affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return _scalar_affine(self, -1.0, float(other))

    def sum(self):
        return tensor_sum(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if _needs_grad(*parents):
        return Tensor(data, _parents=parents, _backward_fn=backward_fn, _op=op)
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# operation-count audit

_MAC_COUNTER: list[int] | None = None


@contextlib.contextmanager
def op_counter():
    """Count multiply-accumulates of conv/deconv kernels executed inside.

    Used by the forward-cost audit; yields a one-element list that holds the
    running total.
    """
    global _MAC_COUNTER
    prev = _MAC_COUNTER
    _MAC_COUNTER = [0]
    try:
        yield _MAC_COUNTER
    finally:
        _MAC_COUNTER = prev


def counted_macs(n: int):
    if _MAC_COUNTER is not None:
        _MAC_COUNTER[0] += int(n)


# ---------------------------------------------------------------------------
# conv family

@dataclass
class ConvWeights:
    """Kernel (out_channels, in_channels, kh, kw) plus optional bias, stride, padding.

    The same layout serves conv2d and deconv2d; for deconv the channel roles
    are read from the layer's own perspective (input has in_channels).
    """

    kernel: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ValueError(f"kernel must be 4-D (out,in,kh,kw), got {self.kernel.shape}")
        if not np.all(np.isfinite(self.kernel.data)):
            raise ValueError("kernel contains non-finite values")
        if self.bias is not None:
            if self.bias.data.shape != (self.kernel.shape[0],):
                raise ValueError(
                    f"bias shape {self.bias.data.shape} does not match out_channels {self.kernel.shape[0]}")
            if not np.all(np.isfinite(self.bias.data)):
                raise ValueError("bias contains non-finite values")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad stride/padding ({self.stride}, {self.padding})")

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def in_channels(self):
        return self.kernel.shape[1]


def _im2col(x: np.ndarray, kh: int, kw: int, s: int, p: int):
    """(b,c,h,w) -> column matrix (b*oh*ow, c*kh*kw), plus (oh, ow)."""
    b, c, h, w = x.shape
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    oh = (h + 2 * p - kh) // s + 1
    ow = (w + 2 * p - kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]                      # (b, c, oh, ow, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _corr2d(x: np.ndarray, k: np.ndarray, s: int, p: int):
    """Cross-correlation, the gather direction."""
    b = x.shape[0]
    co, ci, kh, kw = k.shape
    cols, oh, ow = _im2col(x, kh, kw, s, p)
    out = cols @ k.reshape(co, ci * kh * kw).T
    counted_macs(out.size * ci * kh * kw)
    return out.reshape(b, oh, ow, co).transpose(0, 3, 1, 2), oh, ow


def _scatter2d(g: np.ndarray, k: np.ndarray, s: int, p: int, out_hw: tuple[int, int]):
    """Adjoint of _corr2d: scatter g (b, co, gh, gw) back to (b, ci, *out_hw)."""
    b, co, gh, gw = g.shape
    _, ci, kh, kw = k.shape
    oh, ow = out_hw
    buf = np.zeros((b, ci, oh + 2 * p, ow + 2 * p), dtype=g.dtype)
    # (b, gh, gw, co) @ (co, ci*kh*kw) -> per-tap contributions in one gemm
    gmat = g.transpose(0, 2, 3, 1).reshape(b * gh * gw, co)
    contrib = gmat @ k.reshape(co, ci * kh * kw)
    counted_macs(contrib.size * co)
    contrib = contrib.reshape(b, gh, gw, ci, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for u in range(kh):
        for v in range(kw):
            buf[:, :, u:u + s * gh:s, v:v + s * gw:s] += contrib[:, :, u, v]
    if p:
        buf = buf[:, :, p:oh + p, p:ow + p]
    return buf


def _kernel_grad(g: np.ndarray, x: np.ndarray, kshape, s: int, p: int):
    """d(loss)/d(kernel) where g sits at conv-output positions of x."""
    co, ci, kh, kw = kshape
    cols, oh, ow = _im2col(x, kh, kw, s, p)
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, co)
    dk = gmat.T @ cols
    counted_macs(dk.size * gmat.shape[0])
    return dk.reshape(co, ci, kh, kw)


def _check_extent(h: int, p: int, k: int, s: int, what: str):
    if h + 2 * p < k:
        raise ValueError(f"{what}: spatial extent {h} with padding {p} smaller than kernel {k}")
    if (h + 2 * p - k) % s != 0:
        raise ValueError(
            f"{what}: extent {h} with padding {p}, kernel {k}, stride {s} "
            f"gives a non-integer output extent")


def conv2d(x: Tensor, w: ConvWeights) -> Tensor:
    """Standard cross-correlation with zero padding."""
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be (b,c,h,w), got {x.shape}")
    b, c, h, wd = x.shape
    if c != w.in_channels:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {w.kernel.shape}")
    co, ci, kh, kw = w.kernel.shape
    _check_extent(h, w.padding, kh, w.stride, "conv2d")
    _check_extent(wd, w.padding, kw, w.stride, "conv2d")
    k = w.kernel.data
    out, oh, ow = _corr2d(x.data, k, w.stride, w.padding)
    if w.bias is not None:
        out = out + w.bias.data[None, :, None, None]
    parents = (x, w.kernel) + ((w.bias,) if w.bias is not None else ())
    s, p = w.stride, w.padding

    def backward_fn(g):
        grads = [
            _scatter2d(g, k, s, p, (h, wd)),
            _kernel_grad(g, x.data, k.shape, s, p),
        ]
        if w.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, backward_fn, "conv2d")


def deconv2d(x: Tensor, w: ConvWeights) -> Tensor:
    """Transposed convolution; exact adjoint of conv2d with the swapped-axes kernel.

    Output extent is (h-1)*stride - 2*padding + kh, so kernel 4 / stride 2 /
    padding 1 doubles the extent exactly.
    """
    if x.ndim != 4:
        raise ValueError(f"deconv2d input must be (b,c,h,w), got {x.shape}")
    b, c, h, wd = x.shape
    if c != w.in_channels:
        raise ValueError(
            f"deconv2d channel mismatch: input {x.shape} vs kernel {w.kernel.shape}")
    co, ci, kh, kw = w.kernel.shape
    s, p = w.stride, w.padding
    oh = (h - 1) * s - 2 * p + kh
    ow = (wd - 1) * s - 2 * p + kw
    if oh < 1 or ow < 1:
        raise ValueError(f"deconv2d: output extent ({oh},{ow}) not positive")
    kswap = np.ascontiguousarray(w.kernel.data.swapaxes(0, 1))   # (ci, co, kh, kw)
    out = _scatter2d(x.data, kswap, s, p, (oh, ow))
    if w.bias is not None:
        out = out + w.bias.data[None, :, None, None]
    parents = (x, w.kernel) + ((w.bias,) if w.bias is not None else ())

    def backward_fn(g):
        dx, _, _ = _corr2d(g, kswap, s, p)
        dk = _kernel_grad(x.data, g, (ci, co, kh, kw), s, p).swapaxes(0, 1)
        grads = [dx, np.ascontiguousarray(dk)]
        if w.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, backward_fn, "deconv2d")


# ---------------------------------------------------------------------------
# pooling and resampling

def pool2d(x: Tensor, k: int, mode: str = "average") -> Tensor:
    """Non-overlapping k x k window reduction (stride = k).

    Extents must divide by k; no silent flooring.
    """
    if mode not in ("average", "max"):
        raise ValueError(f"pool2d mode must be average|max, got {mode!r}")
    if x.ndim != 4:
        raise ValueError(f"pool2d input must be (b,c,h,w), got {x.shape}")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"pool2d: extent ({h},{w}) not divisible by window {k}")
    oh, ow = h // k, w // k
    win = x.data.reshape(b, c, oh, k, ow, k)
    if mode == "average":
        out = win.mean(axis=(3, 5))

        def backward_fn(g):
            gk = np.broadcast_to(g[:, :, :, None, :, None] / (k * k),
                                 (b, c, oh, k, ow, k))
            return [gk.reshape(b, c, h, w).copy()]
    else:
        flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def backward_fn(g):
            gflat = np.zeros((b, c, oh, ow, k * k), dtype=g.dtype)
            np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
            gwin = gflat.reshape(b, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
            return [gwin.reshape(b, c, h, w).copy()]

    return _make(np.ascontiguousarray(out), (x,), backward_fn, f"pool2d[{mode}]")


def max_pool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """General sliding max pool; -inf padding. Ties route gradient to the first hit."""
    if x.ndim != 4:
        raise ValueError(f"max_pool2d input must be (b,c,h,w), got {x.shape}")
    b, c, h, w = x.shape
    _check_extent(h, padding, k, stride, "max_pool2d")
    _check_extent(w, padding, k, stride, "max_pool2d")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, oh, ow, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        hp, wp = h + 2 * padding, w + 2 * padding
        gx = np.zeros((b, c, hp, wp), dtype=g.dtype)
        iu, iv = np.divmod(arg, k)
        gi = np.arange(oh)[None, None, :, None] * stride + iu
        gj = np.arange(ow)[None, None, None, :] * stride + iv
        bi = np.arange(b)[:, None, None, None]
        cj = np.arange(c)[None, :, None, None]
        np.add.at(gx, (bi, cj, gi, gj), g)
        if padding:
            gx = gx[:, :, padding:h + padding, padding:w + padding]
        return [gx]

    return _make(np.ascontiguousarray(out), (x,), backward_fn, "max_pool2d")


def _resize_matrix(n_in: int, factor: int, mode: str, dtype) -> np.ndarray:
    """Row-stochastic (n_in*factor, n_in) interpolation matrix for one axis."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    if mode == "nearest":
        m[np.arange(n_out), np.arange(n_out) // factor] = 1
    else:  # bilinear, half-pixel centers (align_corners=False)
        src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
        i0 = np.floor(src).astype(int)
        t = src - i0
        lo = np.clip(i0, 0, n_in - 1)
        hi = np.clip(i0 + 1, 0, n_in - 1)
        rows = np.arange(n_out)
        np.add.at(m, (rows, lo), (1.0 - t).astype(dtype))
        np.add.at(m, (rows, hi), t.astype(dtype))
    return m


def upsample(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    """Integer-factor upsampling; bilinear uses half-pixel centers."""
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"upsample mode must be nearest|bilinear, got {mode!r}")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ValueError(f"upsample input must be (b,c,h,w), got {x.shape}")
    b, c, h, w = x.shape
    mh = _resize_matrix(h, factor, mode, x.data.dtype)
    mw = _resize_matrix(w, factor, mode, x.data.dtype)
    out = np.einsum("Hh,bchw,Ww->bcHW", mh, x.data, mw, optimize=True)

    def backward_fn(g):
        return [np.einsum("Hh,bcHW,Ww->bchw", mh, g, mw, optimize=True)]

    return _make(out, (x,), backward_fn, f"upsample[{mode}x{factor}]")


# ---------------------------------------------------------------------------
# batch norm

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                mode: str = "train", eps: float = 1e-5,
                momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics over (b,h,w) and updates the
    running buffers in place (biased stats normalize, unbiased feed the
    running variance); eval mode uses the buffers. Epsilon sits inside the
    square root.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d mode must be train|eval, got {mode!r}")
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d input must be (b,c,h,w), got {x.shape}")
    b, c, h, w = x.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"batchnorm2d affine shape mismatch: gamma {gamma.data.shape}, "
            f"beta {beta.data.shape}, channels {c}")
    n = b * h * w
    if mode == "train":
        if n < 2:
            raise ValueError("batchnorm2d train mode needs more than one value per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * (var * n / (n - 1))
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        if mode == "train":
            gm = g.mean(axis=(0, 2, 3))
            gxm = (g * xhat).mean(axis=(0, 2, 3))
            dx = (gamma.data * inv)[None, :, None, None] * (
                g - gm[None, :, None, None] - xhat * gxm[None, :, None, None])
        else:
            dx = (gamma.data * inv)[None, :, None, None] * g
        return [dx, dgamma, dbeta]

    return _make(out, (x, gamma, beta), backward_fn, f"batchnorm2d[{mode}]")


# ---------------------------------------------------------------------------
# elementwise, concat, reductions

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,), lambda g: [g * mask], "relu")


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):    # exp overflow saturates to exactly 0
        out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: [g * out * (1.0 - out)], "sigmoid")


def _require_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ "
                         f"(broadcasting is explicit, see expand)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: [g, g], "add")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "multiply")
    return _make(a.data * b.data, (a, b),
                 lambda g: [g * b.data, g * a.data], "multiply")


def _scalar_affine(x: Tensor, scale: float, shift: float) -> Tensor:
    return _make(x.data * scale + shift, (x,), lambda g: [g * scale], "scalar_affine")


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    xs = list(xs)
    if not xs:
        raise ValueError("concat of an empty sequence")
    base = xs[0]
    for t in xs[1:]:
        if t.ndim != 4 or base.ndim != 4:
            raise ValueError("concat expects 4-D tensors")
        if t.shape[0] != base.shape[0] or t.shape[2:] != base.shape[2:]:
            raise ValueError(
                f"concat: non-channel extents differ ({base.shape} vs {t.shape})")
    sizes = [t.shape[1] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return list(np.split(g, splits, axis=1))

    return _make(out, tuple(xs), backward_fn, "concat")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[1]):
        raise ValueError(f"channel_slice [{start}:{stop}] out of range for {x.shape}")

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return [gx]

    return _make(x.data[:, start:stop].copy(), (x,), backward_fn, "channel_slice")


def expand(x: Tensor, shape: tuple) -> Tensor:
    """Broadcast singleton axes up to ``shape``; backward sums them back."""
    if len(shape) != x.ndim:
        raise ValueError(f"expand: rank mismatch {x.shape} -> {shape}")
    axes = []
    for i, (a, b) in enumerate(zip(x.shape, shape)):
        if a != b:
            if a != 1:
                raise ValueError(f"expand: axis {i} is {a}, cannot reach {b}")
            axes.append(i)
    out = np.broadcast_to(x.data, shape).copy()

    def backward_fn(g):
        return [g.sum(axis=tuple(axes), keepdims=True)]

    return _make(out, (x,), backward_fn, "expand")


def spatial_mean(x: Tensor) -> Tensor:
    """(b,c,h,w) -> (b,c,1,1) global average."""
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _make(out, (x,),
                 lambda g: [np.broadcast_to(g / (h * w), x.shape).copy()],
                 "spatial_mean")


def spatial_max(x: Tensor) -> Tensor:
    """(b,c,h,w) -> (b,c,1,1) global max; gradient to the first argmax."""
    b, c, h, w = x.shape
    flat = x.data.reshape(b, c, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1).reshape(b, c, 1, 1)

    def backward_fn(g):
        gf = np.zeros((b, c, h * w), dtype=g.dtype)
        np.put_along_axis(gf, arg[..., None], g.reshape(b, c, 1), axis=-1)
        return [gf.reshape(b, c, h, w)]

    return _make(out, (x,), backward_fn, "spatial_max")


def channel_mean(x: Tensor) -> Tensor:
    """(b,c,h,w) -> (b,1,h,w) mean over channels."""
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)
    return _make(out, (x,),
                 lambda g: [np.broadcast_to(g / c, x.shape).copy()], "channel_mean")


def channel_max(x: Tensor) -> Tensor:
    """(b,c,h,w) -> (b,1,h,w) max over channels; gradient to the first argmax."""
    arg = x.data.argmax(axis=1)
    out = np.take_along_axis(x.data, arg[:, None], axis=1)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg[:, None], g, axis=1)
        return [gx]

    return _make(out, (x,), backward_fn, "channel_max")


def tensor_sum(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,),
                 lambda g: [np.broadcast_to(g, x.shape).copy()], "sum")


# ---------------------------------------------------------------------------
# loss kernels (stable closed-form backward)

def bce_with_logits(logits: Tensor, targets: np.ndarray,
                    weights: np.ndarray | None = None) -> Tensor:
    """Sum of elementwise binary cross-entropy on logits.

    max(z,0) - z*t + log1p(exp(-|z|)) keeps everything finite for any z.
    """
    z = logits.data
    if targets.shape != z.shape:
        raise ValueError(f"bce targets {targets.shape} vs logits {z.shape}")
    per = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    if weights is not None:
        per = per * weights
    out = np.asarray(per.sum())

    def backward_fn(g):
        d = (1.0 / (1.0 + np.exp(-z))) - targets
        if weights is not None:
            d = d * weights
        return [g * d]

    return _make(out, (logits,), backward_fn, "bce_with_logits")


def smooth_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None,
              beta: float = 1.0) -> Tensor:
    """Sum of Huber terms: 0.5*d^2/beta inside |d|<beta, |d|-0.5*beta outside."""
    d = pred.data - target
    if mask is not None:
        d = d * mask
    a = np.abs(d)
    per = np.where(a < beta, 0.5 * d * d / beta, a - 0.5 * beta)
    out = np.asarray(per.sum())

    def backward_fn(g):
        dd = np.where(a < beta, d / beta, np.sign(d))
        if mask is not None:
            dd = dd * mask
        return [g * dd]

    return _make(out, (pred,), backward_fn, "smooth_l1")


# ---------------------------------------------------------------------------
# backward pass and gradient checking

def _topo_order(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into .grad for every reachable tensor.

    ``loss`` must be a 0-d tensor.  Leaves passed explicitly that the graph
    never touched get zero gradients rather than None.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"backward on non-finite loss ({loss.data})")
    order = _topo_order(loss)
    loss.grad = np.asarray(1.0, dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward_fn is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward_fn(node.grad)):
            _accum(parent, g)
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per element is |analytic - numeric| / max(1, |numeric|).
    Perturbs every element of every parameter, so keep fixtures small.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise FloatingPointError("grad_check: loss is not finite")
    backward(loss, leaves=params)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(loss_fn().data)
            flat[i] = keep - eps
            dn = float(loss_fn().data)
            flat[i] = keep
            numeric = (up - dn) / (2 * eps)
            a = analytic[pi].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
