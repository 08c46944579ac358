"""Forward/backward kernels for every operation in a DenseNet.

All kernels take and return :class:`~denseplan.tensor.Tensor` values and
accept an optional destination.  When a destination is given nothing is
allocated, which is how pooled storage is written.  Without one, the result
is charged to the ``SCRATCH`` arena (or ``arena=`` when supplied).

Reductions always run over a channel-major copy so the summation order is
the same whatever the memory layout of the input; convolution is im2col +
matmul with a fixed loop order.  Both properties are needed for bitwise
recompute.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import CapacityError, DegenerateBatchError, LabelError, ShapeError
from .tensor import ArenaTag, Shape4, Tensor, alloc, channel_view, copy_into

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ShapeError(f"BatchNormState.{name} must have length {c}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")

    @classmethod
    def create(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class BatchStats:
    """Per-channel mean and biased variance used to normalise one batch."""

    mean: np.ndarray
    var: np.ndarray


@dataclass
class ConvParams:
    weights: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError("conv weights must be (out, in, kh, kw)")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


def _arr(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def _dest(shape, dtype, out: Tensor | None, arena: ArenaTag) -> Tensor:
    shape = Shape4.of(shape)
    if out is None:
        return alloc(shape, arena, dtype)
    if out.data.shape != shape.as_tuple():
        raise ShapeError(f"destination has shape {out.data.shape}, expected {shape.as_tuple()}")
    return out


def channel_sums(a: np.ndarray) -> np.ndarray:
    """Per-channel sums of an (N, C, H, W) array in a layout-independent order."""
    c = a.shape[1]
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(c, -1).sum(axis=1)


def _bcast(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


# -- concatenation ---------------------------------------------------------

def concat_forward(inputs, dst: Tensor | None = None, arena: ArenaTag = ArenaTag.SCRATCH) -> Tensor:
    """Copy ``inputs`` side by side along the channel axis into one block."""
    if not inputs:
        raise ShapeError("concat needs at least one input")
    n, _, h, w = inputs[0].data.shape
    for t in inputs:
        if (t.data.shape[0], t.data.shape[2], t.data.shape[3]) != (n, h, w):
            raise ShapeError(f"concat input {t.data.shape} does not match (n, h, w)=({n}, {h}, {w})")
    total = sum(t.data.shape[1] for t in inputs)
    if dst is None:
        dst = alloc((n, total, h, w), arena, inputs[0].dtype)
    else:
        dn, dc, dh, dw = dst.data.shape
        if (dn, dh, dw) != (n, h, w):
            raise ShapeError(f"concat destination {dst.data.shape} does not match inputs")
        if dc < total:
            raise CapacityError(f"concat destination has {dc} channels, {total} needed")
        if dc > total:
            raise ShapeError(f"concat destination has {dc} channels, expected {total}")
    offset = 0
    for t in inputs:
        c = t.data.shape[1]
        copy_into(t, channel_view(dst, offset, c))
        offset += c
    return dst


def concat_backward(grad_out: Tensor, splits) -> list[Tensor]:
    if sum(splits) != grad_out.data.shape[1]:
        raise ShapeError(f"splits {list(splits)} do not sum to {grad_out.data.shape[1]} channels")
    views, offset = [], 0
    for c in splits:
        views.append(channel_view(grad_out, offset, c))
        offset += c
    return views


# -- batch normalisation ---------------------------------------------------

def batch_statistics(x: np.ndarray) -> BatchStats:
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = channel_sums(x) / m
    centred = x - _bcast(mean)
    var = channel_sums(centred * centred) / m
    return BatchStats(mean, var)


def _normalise_into(x: np.ndarray, state: BatchNormState, stats: BatchStats, out: np.ndarray) -> None:
    scale = state.gamma / np.sqrt(stats.var + state.eps)
    np.subtract(x, _bcast(stats.mean), out=out)
    np.multiply(out, _bcast(scale), out=out)
    np.add(out, _bcast(state.beta), out=out)


def batchnorm_forward(
    x: Tensor,
    state: BatchNormState,
    mode: Mode | str = Mode.TRAIN,
    dst: Tensor | None = None,
    stats: BatchStats | None = None,
    arena: ArenaTag = ArenaTag.SCRATCH,
) -> tuple[Tensor, BatchStats]:
    """Per-channel normalisation over (N, H, W).

    In train mode the batch statistics are computed (biased variance) and
    the running statistics are updated, unless ``stats`` is passed: then the
    given statistics are reused verbatim and the running statistics are left
    alone.  That is the rematerialisation path.
    """
    xa = x.data
    n, c, h, w = xa.shape
    if c != state.channels:
        raise ShapeError(f"batchnorm over {c} channels with state for {state.channels}")
    mode = Mode(mode)
    out = _dest(xa.shape, xa.dtype, dst, arena)
    if mode is Mode.TRAIN:
        if stats is None:
            if n * h * w < 2:
                raise DegenerateBatchError(f"train-mode batchnorm needs n*h*w >= 2, got {n * h * w}")
            stats = batch_statistics(xa)
            m = n * h * w
            mom = state.momentum
            state.running_mean *= 1.0 - mom
            state.running_mean += mom * stats.mean
            state.running_var *= 1.0 - mom
            state.running_var += mom * stats.var * (m / (m - 1))
    else:
        stats = BatchStats(state.running_mean.copy(), state.running_var.copy())
    _normalise_into(xa, state, stats, out.data)
    return out, stats


def batchnorm_backward(
    grad_y: Tensor,
    x: Tensor,
    state: BatchNormState,
    stats: BatchStats,
    out: Tensor | None = None,
    arena: ArenaTag = ArenaTag.SCRATCH,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    g, xa = grad_y.data, x.data
    if g.shape != xa.shape:
        raise ShapeError(f"grad {g.shape} does not match input {xa.shape}")
    if xa.shape[1] != state.channels:
        raise ShapeError("batchnorm state/channel mismatch")
    n, c, h, w = xa.shape
    m = n * h * w
    inv_std = 1.0 / np.sqrt(stats.var + state.eps)
    xhat = (xa - _bcast(stats.mean)) * _bcast(inv_std)
    grad_beta = channel_sums(g)
    grad_gamma = channel_sums(g * xhat)
    dst = _dest(xa.shape, xa.dtype, out, arena)
    coef = state.gamma * inv_std / m
    dx = (m * g - _bcast(grad_beta) - xhat * _bcast(grad_gamma)) * _bcast(coef)
    np.copyto(dst.data, dx)
    return dst, grad_gamma, grad_beta


# -- ReLU ------------------------------------------------------------------

def relu_forward(x: Tensor, out: Tensor | None = None, arena: ArenaTag = ArenaTag.SCRATCH) -> Tensor:
    """``max(x, 0)``; pass ``out=x`` to apply in place."""
    dst = _dest(x.data.shape, x.dtype, out, arena)
    np.maximum(x.data, 0, out=dst.data)
    return dst


def relu_backward(grad_y: Tensor, x: Tensor, out: Tensor | None = None,
                  arena: ArenaTag = ArenaTag.SCRATCH) -> Tensor:
    """Gradient is passed where ``x > 0`` and zeroed elsewhere (including 0).

    ``x`` may be the ReLU output instead of its input: the mask is the same.
    """
    if grad_y.data.shape != x.data.shape:
        raise ShapeError("relu_backward shape mismatch")
    dst = _dest(grad_y.data.shape, grad_y.dtype, out, arena)
    np.multiply(grad_y.data, x.data > 0, out=dst.data)
    return dst


# -- convolution -----------------------------------------------------------

def conv_output_hw(h: int, w: int, p: ConvParams) -> tuple[int, int]:
    kh, kw = p.kernel
    ho = (h + 2 * p.padding - kh) // p.stride + 1
    wo = (w + 2 * p.padding - kw) // p.stride + 1
    return ho, wo


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*kh*kw, Ho*Wo) patch matrix (always a fresh copy)."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if kh == kw == 1 and stride == 1 and pad == 0:
        return np.array(x, order="C").reshape(n, c, h * w)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)
    s0, s1, s2, s3 = xp.strides
    patches = as_strided(
        xp, shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False,
    )
    return patches.reshape(n, c * kh * kw, ho * wo)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if kh == kw == 1 and stride == 1 and pad == 0:
        return cols.reshape(n, c, h, w)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w]


def conv2d_forward(x: Tensor, p: ConvParams, out: Tensor | None = None,
                   arena: ArenaTag = ArenaTag.SCRATCH) -> Tensor:
    """Cross-correlation (no kernel flip).  ``x`` may be a strided view."""
    xa = x.data
    n, c, h, w = xa.shape
    if c != p.in_channels:
        raise ShapeError(f"conv expects {p.in_channels} input channels, got {c}")
    ho, wo = conv_output_hw(h, w, p)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output would be {ho}x{wo}")
    kh, kw = p.kernel
    cols = im2col(xa, kh, kw, p.stride, p.padding)
    wm = p.weights.reshape(p.out_channels, -1)
    y = np.matmul(wm, cols)
    dst = _dest((n, p.out_channels, ho, wo), xa.dtype, out, arena)
    np.copyto(dst.data, y.reshape(n, p.out_channels, ho, wo))
    return dst


def conv2d_backward(
    grad_y: Tensor,
    x: Tensor,
    p: ConvParams,
    out: Tensor | None = None,
    need_input_grad: bool = True,
    arena: ArenaTag = ArenaTag.SCRATCH,
) -> tuple[Tensor | None, np.ndarray]:
    if not x.contiguous:
        raise ShapeError("conv2d_backward requires a contiguous input")
    xa = x.data
    n, c, h, w = xa.shape
    if c != p.in_channels:
        raise ShapeError(f"conv expects {p.in_channels} input channels, got {c}")
    ho, wo = conv_output_hw(h, w, p)
    if grad_y.data.shape != (n, p.out_channels, ho, wo):
        raise ShapeError(f"grad_y has shape {grad_y.data.shape}, expected {(n, p.out_channels, ho, wo)}")
    kh, kw = p.kernel
    gy = np.ascontiguousarray(grad_y.data).reshape(n, p.out_channels, ho * wo)
    cols = im2col(xa, kh, kw, p.stride, p.padding)
    grad_w = np.tensordot(gy, cols, axes=([0, 2], [0, 2])).reshape(p.weights.shape)
    if not need_input_grad:
        return None, grad_w
    wm = p.weights.reshape(p.out_channels, -1)
    dcols = np.matmul(wm.T, gy)
    dst = _dest(xa.shape, xa.dtype, out, arena)
    np.copyto(dst.data, col2im(dcols, xa.shape, kh, kw, p.stride, p.padding))
    return dst, grad_w


# -- pooling, classifier, loss ---------------------------------------------

def avgpool2d(x: Tensor, window: int = 2, stride: int = 2, out: Tensor | None = None,
              arena: ArenaTag = ArenaTag.SCRATCH) -> Tensor:
    xa = x.data
    n, c, h, w = xa.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"pooling {h}x{w} with window {window} leaves no output")
    acc = np.zeros((n, c, ho, wo), dtype=xa.dtype)
    for i in range(window):
        for j in range(window):
            acc += xa[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    dst = _dest(acc.shape, xa.dtype, out, arena)
    np.multiply(acc, 1.0 / (window * window), out=dst.data)
    return dst


def avgpool2d_backward(grad_y: Tensor, x_shape, window: int = 2, stride: int = 2,
                       out: Tensor | None = None, arena: ArenaTag = ArenaTag.SCRATCH) -> Tensor:
    n, c, h, w = Shape4.of(x_shape)
    g = grad_y.data * (1.0 / (window * window))
    ho, wo = g.shape[2], g.shape[3]
    gx = np.zeros((n, c, h, w), dtype=g.dtype)
    for i in range(window):
        for j in range(window):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g
    dst = _dest(gx.shape, g.dtype, out, arena)
    np.copyto(dst.data, gx)
    return dst


def global_avgpool(x: Tensor, out: Tensor | None = None, arena: ArenaTag = ArenaTag.SCRATCH) -> Tensor:
    xa = x.data
    n, c, h, w = xa.shape
    means = np.ascontiguousarray(xa).reshape(n, c, h * w).sum(axis=2) / (h * w)
    dst = _dest((n, c, 1, 1), xa.dtype, out, arena)
    np.copyto(dst.data, means.reshape(n, c, 1, 1))
    return dst


def global_avgpool_backward(grad_y: Tensor, x_shape, out: Tensor | None = None,
                            arena: ArenaTag = ArenaTag.SCRATCH) -> Tensor:
    n, c, h, w = Shape4.of(x_shape)
    dst = _dest((n, c, h, w), grad_y.dtype, out, arena)
    np.copyto(dst.data, np.broadcast_to(grad_y.data / (h * w), (n, c, h, w)))
    return dst


def linear(x_flat, weight: np.ndarray, bias: np.ndarray, out: Tensor | None = None,
           arena: ArenaTag = ArenaTag.SCRATCH) -> Tensor:
    """``x @ W.T + b``; ``x`` is (N, C) or an (N, C, 1, 1) tensor."""
    xa = _arr(x_flat)
    n = xa.shape[0]
    x2 = xa.reshape(n, -1)
    if x2.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects {weight.shape[1]} features, got {x2.shape[1]}")
    y = x2 @ weight.T + bias
    dst = _dest((n, weight.shape[0], 1, 1), xa.dtype, out, arena)
    np.copyto(dst.data, y.reshape(dst.data.shape))
    return dst


def linear_backward(grad_y, x_flat, weight: np.ndarray, out: Tensor | None = None,
                    arena: ArenaTag = ArenaTag.SCRATCH):
    g = _arr(grad_y).reshape(_arr(grad_y).shape[0], -1)
    xa = _arr(x_flat)
    x2 = xa.reshape(xa.shape[0], -1)
    grad_w = g.T @ x2
    grad_b = g.sum(axis=0)
    shape = xa.shape if xa.ndim == 4 else (xa.shape[0], xa.shape[1], 1, 1)
    dst = _dest(shape, g.dtype, out, arena)
    np.copyto(dst.data, (g @ weight).reshape(shape))
    return dst, grad_w, grad_b


def softmax_xent(logits, labels, grad_out: Tensor | None = None,
                 arena: ArenaTag = ArenaTag.SCRATCH) -> tuple[float, Tensor]:
    """Mean cross-entropy of softmax(logits) and its gradient w.r.t. logits."""
    la = _arr(logits)
    n = la.shape[0]
    z = la.reshape(n, -1)
    k = z.shape[1]
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be integers")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = float(-logp[rows, labels].sum() / n)
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    dst = _dest((n, k, 1, 1), la.dtype, grad_out, arena)
    np.copyto(dst.data, grad.reshape(n, k, 1, 1))
    return loss, dst
