"""Declarative layer specs, the network container, and the seed-classifier architecture."""
from __future__ import annotations

import hashlib
from dataclasses import astuple, dataclass, fields
from typing import ClassVar, Union

import numpy as np

from . import layers as L
from .tensor import DTYPE, NumericError, Rng, ShapeError, check_tensor

# --------------------------------------------------------------------------- #
# Layer specs
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class InputSpec:
    kind: ClassVar[str] = "input"
    channels: int
    height: int
    width: int


@dataclass(frozen=True)
class ConvSpec:
    kind: ClassVar[str] = "conv"
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReluSpec:
    kind: ClassVar[str] = "relu"


@dataclass(frozen=True)
class PoolSpec:
    kind: ClassVar[str] = "maxpool"
    window: int
    stride: int


@dataclass(frozen=True)
class DropoutSpec:
    kind: ClassVar[str] = "dropout"
    rate: float = 0.5


@dataclass(frozen=True)
class FlattenSpec:
    kind: ClassVar[str] = "flatten"


@dataclass(frozen=True)
class DenseSpec:
    kind: ClassVar[str] = "dense"
    in_features: int
    out_features: int


@dataclass(frozen=True)
class SoftmaxSpec:
    kind: ClassVar[str] = "softmax"


LayerSpec = Union[InputSpec, ConvSpec, ReluSpec, PoolSpec, DropoutSpec, FlattenSpec, DenseSpec, SoftmaxSpec]

SPEC_TYPES: dict[str, type] = {
    cls.kind: cls
    for cls in (InputSpec, ConvSpec, ReluSpec, PoolSpec, DropoutSpec, FlattenSpec, DenseSpec, SoftmaxSpec)
}


def spec_values(spec) -> tuple[float, ...]:
    return tuple(float(v) for v in astuple(spec))


def spec_from_values(kind: str, values) -> LayerSpec:
    try:
        cls = SPEC_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    names = [f for f in fields(cls)]
    if len(values) != len(names):
        raise ValueError(f"{kind} expects {len(names)} values, got {len(values)}")
    args = {f.name: (float(v) if f.type in ("float", float) else int(v)) for f, v in zip(names, values)}
    return cls(**args)


def describe(spec) -> str:
    vals = ", ".join(f"{f.name}={getattr(spec, f.name)}" for f in fields(spec))
    return f"{spec.kind}({vals})"


def spec_digest(specs) -> str:
    text = "\n".join(describe(s) for s in specs)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def param_shapes(spec) -> dict[str, tuple[int, ...]]:
    if isinstance(spec, ConvSpec):
        return {
            "weight": (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel),
            "bias": (spec.out_channels,),
        }
    if isinstance(spec, DenseSpec):
        return {"weight": (spec.out_features, spec.in_features), "bias": (spec.out_features,)}
    return {}


def trace_shapes(specs, allow_any_kernel: bool = False) -> list[tuple[int, int, int]]:
    """Propagate (c, h, w) through the spec list, raising on any mismatch."""
    if not specs or not isinstance(specs[0], InputSpec):
        raise ShapeError("first layer must be an input spec")
    if not isinstance(specs[-1], SoftmaxSpec):
        raise ShapeError("last layer must be softmax")
    first = specs[0]
    shape = (first.channels, first.height, first.width)
    if min(shape) < 1:
        raise ShapeError(f"bad input shape {shape}")
    out = [shape]
    for idx, spec in enumerate(specs[1:], start=1):
        c, h, w = shape
        where = f"layer {idx + 1} ({spec.kind})"
        if isinstance(spec, InputSpec):
            raise ShapeError(f"{where}: input spec only allowed first")
        if isinstance(spec, ConvSpec):
            if c != spec.in_channels:
                raise ShapeError(f"{where}: expects {spec.in_channels} channels, gets {c}")
            if not allow_any_kernel and (spec.kernel, spec.kernel) not in L.ALLOWED_KERNELS:
                raise ShapeError(f"{where}: kernel {spec.kernel} not in {L.ALLOWED_KERNELS}")
            oh = L.out_extent(h, spec.kernel, spec.stride, spec.padding)
            ow = L.out_extent(w, spec.kernel, spec.stride, spec.padding)
            if oh < 1 or ow < 1:
                raise ShapeError(f"{where}: no output for {h}x{w}")
            shape = (spec.out_channels, oh, ow)
        elif isinstance(spec, PoolSpec):
            if spec.window > h or spec.window > w:
                raise ShapeError(f"{where}: window {spec.window} exceeds {h}x{w}")
            shape = (c, L.out_extent(h, spec.window, spec.stride), L.out_extent(w, spec.window, spec.stride))
        elif isinstance(spec, FlattenSpec):
            shape = (c * h * w, 1, 1)
        elif isinstance(spec, DenseSpec):
            if (h, w) != (1, 1) or c != spec.in_features:
                raise ShapeError(f"{where}: expects {spec.in_features} features, gets {shape}")
            shape = (spec.out_features, 1, 1)
        elif isinstance(spec, SoftmaxSpec):
            if (h, w) != (1, 1):
                raise ShapeError(f"{where}: softmax needs a flat input, gets {shape}")
        elif isinstance(spec, DropoutSpec):
            if not 0.0 <= spec.rate < 1.0:
                raise ShapeError(f"{where}: rate {spec.rate} outside [0, 1)")
        out.append(shape)
    return out


# --------------------------------------------------------------------------- #
# Per-layer dispatch
# --------------------------------------------------------------------------- #
def layer_forward(spec, x, params, train=False, rng=None):
    """Run one layer. Returns ``(y, cache)`` where cache feeds :func:`layer_backward`."""
    if isinstance(spec, ConvSpec):
        p = L.ConvParams(params["weight"], params["bias"], spec.stride, spec.padding)
        # patches are rebuilt in backward; caching them costs more in memory traffic than it saves
        return L.conv2d_forward(x, p), (x, None)
    if isinstance(spec, ReluSpec):
        y = L.relu(x)
        return y, y
    if isinstance(spec, PoolSpec):
        return L.maxpool_forward(x, L.PoolParams(spec.window, spec.stride))
    if isinstance(spec, DropoutSpec):
        return L.dropout(x, L.DropoutParams(spec.rate, train), rng)
    if isinstance(spec, FlattenSpec):
        return L.flatten(x), x.shape
    if isinstance(spec, DenseSpec):
        return L.dense_forward(x, L.DenseParams(params["weight"], params["bias"])), x
    if isinstance(spec, SoftmaxSpec):
        y = L.softmax(x)
        return y, y
    if isinstance(spec, InputSpec):
        return x, None
    raise TypeError(f"unsupported spec {spec!r}")


def layer_backward(spec, cache, params, upstream) -> L.LayerGrad:
    if isinstance(spec, ConvSpec):
        x, cols = cache
        p = L.ConvParams(params["weight"], params["bias"], spec.stride, spec.padding)
        return L.conv2d_backward(x, p, upstream, cols=cols)
    if isinstance(spec, ReluSpec):
        return L.LayerGrad(L.relu_backward(cache, upstream))
    if isinstance(spec, PoolSpec):
        return L.LayerGrad(L.maxpool_backward(cache, upstream))
    if isinstance(spec, DropoutSpec):
        return L.LayerGrad(L.dropout_backward(cache, upstream))
    if isinstance(spec, FlattenSpec):
        return L.LayerGrad(upstream.reshape(cache))
    if isinstance(spec, DenseSpec):
        return L.dense_backward(cache, L.DenseParams(params["weight"], params["bias"]), upstream)
    if isinstance(spec, SoftmaxSpec):
        return L.LayerGrad(L.softmax_backward(cache, upstream))
    if isinstance(spec, InputSpec):
        return L.LayerGrad(upstream)
    raise TypeError(f"unsupported spec {spec!r}")


def init_params(specs, rng: Rng, dtype=DTYPE) -> list[dict[str, np.ndarray]]:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases, drawn in spec order."""
    from .tensor import uniform

    params = []
    for spec in specs:
        shapes = param_shapes(spec)
        if not shapes:
            params.append({})
            continue
        wshape = shapes["weight"]
        fan_in = int(np.prod(wshape[1:]))
        bound = float(np.sqrt(6.0 / fan_in))
        w = uniform((1, 1, 1, int(np.prod(wshape))), -bound, bound, rng).reshape(wshape)
        params.append({"weight": w.astype(dtype), "bias": np.zeros(shapes["bias"], dtype=dtype)})
    return params


# --------------------------------------------------------------------------- #
# Network
# --------------------------------------------------------------------------- #
# The convolutional trunk runs in sub-batches whose largest activation holds
# about this many elements, so its working set stays in cache at any batch size.
TRUNK_BLOCK_ELEMENTS = 1 << 19

class Network:
    """Ordered layer specs plus their parameters.

    ``forward`` returns ``(n, classes)`` probabilities.  In train mode it keeps
    the per-layer caches that ``backward`` consumes.
    """

    def __init__(self, specs, params=None, rng: Rng | None = None, dtype=DTYPE, allow_any_kernel=False):
        self.specs = list(specs)
        self.shapes = trace_shapes(self.specs, allow_any_kernel)
        if params is None:
            params = init_params(self.specs, rng if rng is not None else Rng(0), dtype)
        if len(params) != len(self.specs):
            raise ShapeError(f"{len(params)} parameter groups for {len(self.specs)} layers")
        for idx, (spec, group) in enumerate(zip(self.specs, params)):
            expected = param_shapes(spec)
            got = {k: tuple(v.shape) for k, v in group.items()}
            if got != expected:
                raise ShapeError(f"layer {idx + 1} ({spec.kind}): parameters {got} != {expected}")
        self.params = params
        self.mode = "eval"
        self._caches = None
        self._probs = None

    # mode handling
    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        self._caches = None
        return self

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.shapes[0]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def __len__(self) -> int:
        return len(self.specs)

    def num_params(self) -> int:
        return sum(int(v.size) for group in self.params for v in group.values())

    def digest(self) -> str:
        return spec_digest(self.specs)

    def astype(self, dtype) -> "Network":
        params = [{k: v.astype(dtype) for k, v in g.items()} for g in self.params]
        net = Network(self.specs, params, allow_any_kernel=True)
        net.mode = self.mode
        return net

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        for group in self.params:
            for v in group.values():
                return v.dtype
        return np.dtype(DTYPE)

    def _trunk_end(self) -> int:
        """Index one past the last layer that acts on each sample independently
        and draws no randomness; those layers can run in cache-sized blocks."""
        end = 1
        while end < len(self.specs) and isinstance(self.specs[end], (ConvSpec, ReluSpec, PoolSpec)):
            end += 1
        return end

    def _block(self) -> int:
        # largest per-sample activation in the trunk decides the block size
        per_sample = max(c * h * w for c, h, w in self.shapes[:self._trunk_end()])
        return max(1, TRUNK_BLOCK_ELEMENTS // per_sample)

    def forward(self, x: np.ndarray, rng: Rng | None = None) -> np.ndarray:
        check_tensor(x, "network input")
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"network expects (n, {self.input_shape}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NumericError("network input contains non-finite values")
        training = self.mode == "train"
        x = x.astype(self.dtype, copy=False)
        end = self._trunk_end()
        # trunk: one cache list per block; the rest: one cache per layer
        blocks, outs = [], []
        for sl in L.even_slices(x.shape[0], self._block()):
            h, caches = x[sl], []
            for spec, group in zip(self.specs[1:end], self.params[1:end]):
                h, cache = layer_forward(spec, h, group, train=training, rng=rng)
                caches.append(cache)
            outs.append(h)
            blocks.append(caches)
        h = outs[0] if len(outs) == 1 else np.concatenate(outs)
        head = []
        for spec, group in zip(self.specs[end:], self.params[end:]):
            h, cache = layer_forward(spec, h, group, train=training, rng=rng)
            head.append(cache)
        probs = h.reshape(h.shape[0], -1)
        if training:
            self._caches = (blocks, head)
            self._probs = probs
        else:
            self._caches = self._probs = None
        return probs

    def cached(self):
        """``(spec, cache)`` pairs from the last train-mode forward, trunk blocks first."""
        if self._caches is None:
            raise RuntimeError("no train-mode forward has run")
        end = self._trunk_end()
        blocks, head = self._caches
        for caches in blocks:
            yield from zip(self.specs[1:end], caches)
        yield from zip(self.specs[end:], head)

    def backward(self, targets: np.ndarray) -> list[dict[str, np.ndarray]]:
        """Gradients of mean cross-entropy for the last train-mode forward.

        ``targets`` is either integer labels or a one-hot ``(n, classes)`` array.
        The softmax and loss are differentiated together as (p - y) / n.
        """
        if self._caches is None:
            raise RuntimeError("backward needs a preceding train-mode forward")
        probs = self._probs
        onehot = one_hot(targets, probs.shape[1], probs.dtype) if np.ndim(targets) == 1 else targets
        if onehot.shape != probs.shape:
            raise ShapeError(f"targets {onehot.shape} do not match predictions {probs.shape}")
        n = probs.shape[0]
        grad = ((probs - onehot) / n).astype(probs.dtype).reshape(n, -1, 1, 1)
        grads: list[dict[str, np.ndarray]] = [{} for _ in self.specs]
        end = self._trunk_end()
        blocks, head = self._caches
        slices = L.even_slices(n, self._block())
        # the softmax layer itself is skipped: grad already is dL/dlogits
        for idx in range(len(self.specs) - 2, end - 1, -1):
            lg = layer_backward(self.specs[idx], head[idx - end], self.params[idx], grad)
            grads[idx] = lg.param_grads
            grad = lg.input_grad
        dx = []
        for sl, caches in zip(slices, blocks):
            g = grad[sl]
            for idx in range(end - 1, 0, -1):
                lg = layer_backward(self.specs[idx], caches[idx - 1], self.params[idx], g)
                for key, val in lg.param_grads.items():
                    if key in grads[idx]:
                        grads[idx][key] += val
                    else:
                        grads[idx][key] = val
                g = lg.input_grad
            dx.append(g)
        self._input_grad = dx[0] if len(dx) == 1 else np.concatenate(dx)
        return grads


def one_hot(labels, k: int, dtype=DTYPE) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"labels must lie in [0, {k})")
    out = np.zeros((labels.shape[0], k), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


# --------------------------------------------------------------------------- #
# Architectures
# --------------------------------------------------------------------------- #
def brassica_specs(channels=(32, 32, 64, 64, 128), hidden: int = 512, classes: int = 10, dropout: float = 0.5):
    """The 23-layer classifier for 3x128x128 input.

    Spatial schedule 128 -> 42 -> 14 -> 4 -> 2, flatten 128*2*2 = 512.
    """
    c1, c2, c3, c4, c5 = channels
    return [
        InputSpec(3, 128, 128),
        ConvSpec(3, c1, 5, stride=3, padding=0),
        ReluSpec(),
        ConvSpec(c1, c2, 3, stride=1, padding=1),
        ReluSpec(),
        PoolSpec(3, 3),
        ConvSpec(c2, c3, 3, stride=1, padding=1),
        ReluSpec(),
        ConvSpec(c3, c4, 3, stride=1, padding=1),
        ReluSpec(),
        PoolSpec(3, 3),
        ConvSpec(c4, c5, 3, stride=1, padding=1),
        ReluSpec(),
        PoolSpec(2, 2),
        DropoutSpec(dropout),
        FlattenSpec(),
        DenseSpec(c5 * 4, hidden),
        ReluSpec(),
        DropoutSpec(dropout),
        DenseSpec(hidden, hidden),
        ReluSpec(),
        DenseSpec(hidden, classes),
        SoftmaxSpec(),
    ]


BRASSICA_SPATIAL = (42, 14, 4, 2)


def build_brassica_net(rng: Rng | None = None, dtype=DTYPE) -> Network:
    net = Network(brassica_specs(), rng=rng if rng is not None else Rng(0), dtype=dtype)
    spatial = {h for _, h, w in net.shapes if h == w}
    missing = [s for s in BRASSICA_SPATIAL if s not in spatial]
    if missing or len(net) != 23:
        raise AssertionError(f"architecture drifted: {len(net)} layers, missing sizes {missing}")
    flat = net.shapes[[s.kind for s in net.specs].index("flatten")]
    if flat != (512, 1, 1):
        raise AssertionError(f"architecture drifted: flatten width {flat}")
    return net


def mini_specs(input_size: int = 16, channels=(4, 4, 6, 6, 8), hidden: int = 16, classes: int = 10,
               dropout: float = 0.5):
    """Same 23-layer topology scaled down for gradient checks and quick tests.

    The first conv stride is picked so the pools (3, 2, 2) end at 1x1.
    """
    stride = max(1, (input_size - 5) // 11)
    c1, c2, c3, c4, c5 = channels
    specs = [
        InputSpec(3, input_size, input_size),
        ConvSpec(3, c1, 5, stride=stride, padding=0),
        ReluSpec(),
        ConvSpec(c1, c2, 3, stride=1, padding=1),
        ReluSpec(),
        PoolSpec(3, 3),
        ConvSpec(c2, c3, 3, stride=1, padding=1),
        ReluSpec(),
        ConvSpec(c3, c4, 3, stride=1, padding=1),
        ReluSpec(),
        PoolSpec(2, 2),
        ConvSpec(c4, c5, 3, stride=1, padding=1),
        ReluSpec(),
        PoolSpec(2, 2),
        DropoutSpec(dropout),
        FlattenSpec(),
        None,
        ReluSpec(),
        DropoutSpec(dropout),
        DenseSpec(hidden, hidden),
        ReluSpec(),
        DenseSpec(hidden, classes),
        SoftmaxSpec(),
    ]
    # flatten width depends on where the pools land
    c, h, w = 3, input_size, input_size
    for s in specs[1:16]:
        if isinstance(s, ConvSpec):
            c = s.out_channels
            h, w = (L.out_extent(d, s.kernel, s.stride, s.padding) for d in (h, w))
        elif isinstance(s, PoolSpec):
            h, w = (L.out_extent(d, s.window, s.stride) for d in (h, w))
    specs[16] = DenseSpec(c * h * w, hidden)
    return specs


def build_mini_net(rng: Rng | None = None, input_size: int = 16, dtype=DTYPE, **kw) -> Network:
    return Network(mini_specs(input_size, **kw), rng=rng if rng is not None else Rng(0), dtype=dtype)


ARCHITECTURES = {
    "brassica": lambda: brassica_specs(),
    "mini16": lambda: mini_specs(16),
    "mini32": lambda: mini_specs(32),
}
