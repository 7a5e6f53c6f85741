"""Forward and backward kernels for every layer kind the network uses.

All kernels are pure functions of their inputs and follow the dtype of the
input array, so the same code runs in float32 for training and float64 for
gradient checks.  Activations are NCHW; dense layers and softmax work on
``(n, features, 1, 1)`` tensors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NumericError, Rng, ShapeError, check_tensor

ALLOWED_KERNELS = ((5, 5), (3, 3))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def out_extent(size: int, k: int, stride: int, pad: int = 0) -> int:
    return (size + 2 * pad - k) // stride + 1


@dataclass
class LayerGrad:
    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


# --------------------------------------------------------------------------- #
# Convolution
# --------------------------------------------------------------------------- #
@dataclass
class ConvParams:
    weight: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray  # (out_channels,)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv bias {self.bias.shape} does not match {self.weight.shape[0]} filters")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError(f"bad stride/padding {self.stride}/{self.padding}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        oh, ow = out_extent(h, kh, sh, ph), out_extent(w, kw, sw, pw)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv {kh}x{kw}/s{sh} on {h}x{w} (pad {ph}) gives no output")
        return oh, ow


def _check_conv_input(x: np.ndarray, p: ConvParams) -> tuple[int, int]:
    check_tensor(x, "conv input")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"conv expects {p.in_channels} channels, got {x.shape[1]}")
    return p.output_hw(x.shape[2], x.shape[3])


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_reference(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Direct nested-loop convolution; slow, kept as the oracle for the fast path."""
    oh, ow = _check_conv_input(x, p)
    (kh, kw), (sh, sw), (ph, pw) = p.kernel, p.stride, p.padding
    xp = _pad(x, ph, pw)
    n_batch = x.shape[0]
    y = np.empty((n_batch, p.out_channels, oh, ow), dtype=np.result_type(x, p.weight))
    for n in range(n_batch):
        for o in range(p.out_channels):
            for i in range(oh):
                for j in range(ow):
                    window = xp[n, :, i * sh:i * sh + kh, j * sw:j * sw + kw]
                    y[n, o, i, j] = p.bias[o] + np.sum(window * p.weight[o], dtype=np.float64)
    return y


def im2col(x: np.ndarray, kernel, stride, padding) -> np.ndarray:
    """Unroll patches into a ``(c*kh*kw, n*oh*ow)`` matrix.

    Patch columns are channel-major so each kernel tap is a single strided
    block copy and the GEMM output already comes out as ``(out_c, n, oh, ow)``.
    """
    (kh, kw), (sh, sw), (ph, pw) = _pair(kernel), _pair(stride), _pair(padding)
    n, c, h, w = x.shape
    oh, ow = out_extent(h, kh, sh, ph), out_extent(w, kw, sw, pw)
    xt = _pad(x, ph, pw).transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xt[:, :, u:u + sh * (oh - 1) + 1:sh, v:v + sw * (ow - 1) + 1:sw]
    return cols.reshape(c * kh * kw, n * oh * ow)


def col2im(cols: np.ndarray, x_shape, kernel, stride, padding) -> np.ndarray:
    """Adjoint of :func:`im2col`; overlapping patches accumulate."""
    (kh, kw), (sh, sw), (ph, pw) = _pair(kernel), _pair(stride), _pair(padding)
    n, c, h, w = x_shape
    oh, ow = out_extent(h, kh, sh, ph), out_extent(w, kw, sw, pw)
    cols6 = cols.reshape(c, kh, kw, n, oh, ow)
    xt = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            xt[:, :, u:u + sh * (oh - 1) + 1:sh, v:v + sw * (ow - 1) + 1:sw] += cols6[:, u, v]
    return xt[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3)


# Patch matrices are built for sub-batches of roughly this many elements so
# they stay cache-resident; per-sample cost is then flat in the batch size.
CHUNK_ELEMENTS = 1 << 20


def even_slices(n: int, most: int) -> list[slice]:
    """Split ``range(n)`` into the fewest near-equal slices of at most ``most``."""
    parts = -(-n // max(most, 1))
    bounds = [n * k // parts for k in range(parts + 1)]
    return [slice(a, b) for a, b in zip(bounds, bounds[1:])]


def _chunks(n: int, per_sample: int):
    return even_slices(n, CHUNK_ELEMENTS // max(per_sample, 1))


def conv2d_forward(x: np.ndarray, p: ConvParams, return_cols: bool = False):
    """Fast convolution via :func:`im2col` + GEMM.

    With ``return_cols`` also returns the per-sub-batch patch matrices, which
    :func:`conv2d_backward` accepts to skip rebuilding them.
    """
    oh, ow = _check_conv_input(x, p)
    wmat = p.weight.reshape(p.out_channels, -1)
    y = np.empty((x.shape[0], p.out_channels, oh, ow), dtype=np.result_type(x, p.weight))
    saved = []
    for sl in _chunks(x.shape[0], wmat.shape[1] * oh * ow):
        cols = im2col(x[sl], p.kernel, p.stride, p.padding)
        out = wmat @ cols
        out += p.bias[:, None]
        y[sl] = out.reshape(p.out_channels, -1, oh, ow).transpose(1, 0, 2, 3)
        if return_cols:
            saved.append(cols)
    return (y, saved) if return_cols else y


def conv2d_backward(x: np.ndarray, p: ConvParams, upstream: np.ndarray, cols=None) -> LayerGrad:
    oh, ow = _check_conv_input(x, p)
    expected = (x.shape[0], p.out_channels, oh, ow)
    if upstream.shape != expected:
        raise ShapeError(f"conv upstream {upstream.shape} != output {expected}")
    wmat = p.weight.reshape(p.out_channels, -1)
    chunks = _chunks(x.shape[0], wmat.shape[1] * oh * ow)
    if cols is None or len(cols) != len(chunks):
        cols = [None] * len(chunks)
    dw = np.zeros_like(wmat)
    db = np.zeros(p.out_channels, dtype=upstream.dtype)
    dx = np.empty(x.shape, dtype=np.result_type(upstream, p.weight))
    for sl, c in zip(chunks, cols):
        if c is None:
            c = im2col(x[sl], p.kernel, p.stride, p.padding)
        dy = np.ascontiguousarray(upstream[sl].transpose(1, 0, 2, 3)).reshape(p.out_channels, -1)
        dw += dy @ c.T
        db += dy.sum(axis=1)
        dx[sl] = col2im(wmat.T @ dy, x[sl].shape, p.kernel, p.stride, p.padding)
    return LayerGrad(dx, {"weight": dw.reshape(p.weight.shape), "bias": db})


# --------------------------------------------------------------------------- #
# Max pooling
# --------------------------------------------------------------------------- #
@dataclass
class PoolParams:
    window: tuple[int, int] = (2, 2)
    stride: tuple[int, int] = (2, 2)

    def __post_init__(self):
        self.window = _pair(self.window)
        self.stride = _pair(self.stride)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw) = self.window, self.stride
        if kh > h or kw > w:
            raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
        return out_extent(h, kh, sh), out_extent(w, kw, sw)


@dataclass
class PoolRecord:
    """Winning flat (h*W + w) input position for every pooled output."""

    input_shape: tuple[int, int, int, int]
    argmax: np.ndarray  # int64, shape of the pooled output


def maxpool_forward(x: np.ndarray, p: PoolParams) -> tuple[np.ndarray, PoolRecord]:
    check_tensor(x, "pool input")
    n, c, h, w = x.shape
    oh, ow = p.output_hw(h, w)
    (kh, kw), (sh, sw) = p.window, p.stride
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    win = win.reshape(n, c, oh, ow, kh * kw)
    # np.argmax returns the first maximum; row-major window order matches flat input order
    local = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    u, v = np.divmod(local, kw)
    rows = np.arange(oh).reshape(1, 1, oh, 1) * sh + u
    cols = np.arange(ow).reshape(1, 1, 1, ow) * sw + v
    return np.ascontiguousarray(y), PoolRecord((n, c, h, w), rows * w + cols)


def maxpool_backward(record: PoolRecord, upstream: np.ndarray) -> np.ndarray:
    if upstream.shape != record.argmax.shape:
        raise ShapeError(f"pool upstream {upstream.shape} does not match record {record.argmax.shape}")
    n, c, h, w = record.input_shape
    plane = np.arange(n * c, dtype=np.int64).reshape(n, c, 1, 1) * (h * w)
    idx = (record.argmax + plane).reshape(-1)
    dx = np.bincount(idx, weights=upstream.reshape(-1).astype(np.float64), minlength=n * c * h * w)
    return dx.astype(upstream.dtype).reshape(n, c, h, w)


# --------------------------------------------------------------------------- #
# Pointwise layers
# --------------------------------------------------------------------------- #
def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


@dataclass
class DropoutParams:
    rate: float = 0.5
    train: bool = True

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")


def dropout(x: np.ndarray, p: DropoutParams, rng: Rng | None = None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None when inactive."""
    if not p.train or p.rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.size).reshape(x.shape) >= p.rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p.rate))
    return x * mask, mask


def dropout_backward(mask, upstream: np.ndarray) -> np.ndarray:
    return upstream if mask is None else upstream * mask


def flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1, 1, 1)


# --------------------------------------------------------------------------- #
# Dense and softmax
# --------------------------------------------------------------------------- #
@dataclass
class DenseParams:
    weight: np.ndarray  # (out_features, in_features)
    bias: np.ndarray  # (out_features,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"dense weight {self.weight.shape} / bias {self.bias.shape} inconsistent")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


def _rows(x: np.ndarray, features: int | None = None) -> np.ndarray:
    rows = x.reshape(x.shape[0], -1)
    if features is not None and rows.shape[1] != features:
        raise ShapeError(f"expected {features} features, got {rows.shape[1]}")
    return rows


def dense_forward(x: np.ndarray, p: DenseParams) -> np.ndarray:
    y = _rows(x, p.in_features) @ p.weight.T + p.bias
    return y.reshape(x.shape[0], p.out_features, 1, 1)


def dense_backward(x: np.ndarray, p: DenseParams, upstream: np.ndarray) -> LayerGrad:
    xr = _rows(x, p.in_features)
    dy = _rows(upstream, p.out_features)
    dx = (dy @ p.weight).reshape(x.shape)
    return LayerGrad(dx, {"weight": dy.T @ xr, "bias": dy.sum(axis=0)})


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.reshape(logits.shape[0], -1) if logits.ndim == 4 else logits
    if logits.ndim == 4 and (logits.shape[2], logits.shape[3]) != (1, 1):
        raise ShapeError(f"softmax needs h == w == 1, got {logits.shape}")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax received non-finite logits")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    return y.reshape(logits.shape)


def softmax_backward(y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``y``."""
    yr, gr = _rows(y), _rows(upstream)
    dz = yr * (gr - np.sum(gr * yr, axis=1, keepdims=True))
    return dz.reshape(y.shape)
