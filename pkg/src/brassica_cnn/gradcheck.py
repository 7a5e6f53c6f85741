"""Central finite-difference checks for layer and network backward passes.

Everything is evaluated in float64.  The relative error for a coordinate is
``|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)``; the floor keeps
coordinates whose true gradient is zero from turning round-off into a huge
ratio.

ReLU and max pooling are only piecewise smooth.  A probe at ``x +- step`` that
flips a ReLU or moves a pooling argmax straddles a kink, and the difference
quotient there says nothing about the derivative.  Each probe therefore
compares the activation pattern with the unperturbed one and shrinks the step
(down to ``MIN_STEP``) until no kink is crossed.  Coordinates that still
cross are left out and counted in ``CheckResult.skipped``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .net import Network, PoolSpec, ReluSpec, layer_backward, layer_forward, one_hot
from .tensor import NumericError, Rng

FLOOR = 1e-6
MIN_STEP = 1e-9


@dataclass
class CheckResult:
    max_rel_error: float
    checked: int
    skipped: int = 0

    def __float__(self) -> float:
        return self.max_rel_error


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float | None = None) -> float:
    floor = FLOOR if floor is None else floor
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(n))):
        raise NumericError("non-finite gradient in check")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def pattern(pairs) -> bytes:
    """Digest of every ReLU on/off state and pooling argmax in ``(spec, cache)`` pairs."""
    h = hashlib.blake2b(digest_size=16)
    for spec, cache in pairs:
        if isinstance(spec, ReluSpec):
            h.update(np.packbits(cache > 0).tobytes())
        elif isinstance(spec, PoolSpec):
            h.update(cache.argmax.tobytes())
    return h.digest()


def _coords(size: int, limit: int | None, rng: Rng) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.permutation(size)[:limit])


def numeric_grad(f, arr: np.ndarray, coords, step: float):
    """Fourth-order central differences of ``f`` w.r.t. ``arr`` at flat ``coords``.

    ``(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h`` has O(h^4) truncation
    error, which allows a step large enough that round-off in ``f`` stays
    negligible.  ``arr`` is perturbed in place and restored.

    ``f`` returns either a float or ``(float, pattern)``.  With patterns, a
    probe is accepted only when all four points share the base pattern.
    Returns ``(values, ok)`` where ``ok`` marks the coordinates that found
    such a step.
    """
    flat = arr.reshape(-1)

    def call():
        out = f()
        return out if isinstance(out, tuple) else (out, None)

    _, base = call()
    values = np.zeros(len(coords))
    ok = np.ones(len(coords), dtype=bool)
    for k, i in enumerate(coords):
        orig = flat[i]
        h = step
        while True:
            probes = []
            for mult in (2, 1, -1, -2):
                flat[i] = orig + mult * h
                probes.append(call())
            flat[i] = orig
            if all(p == base for _, p in probes):
                (f2, _), (f1, _), (m1, _), (m2, _) = probes
                # differences first, so equal probes cancel exactly
                values[k] = (8 * (f1 - m1) - (f2 - m2)) / (12 * h)
                break
            h /= 10
            if h < MIN_STEP:
                ok[k] = False
                break
    return values, ok


def gradient_check(spec, x: np.ndarray, params: dict | None = None, step: float = 1e-3,
                   seed: int = 0, max_coords: int | None = 400, train: bool = False) -> CheckResult:
    """Worst relative error of one layer's backward against finite differences.

    The scalar probed is ``sum(upstream * forward(x))`` for a fixed random
    ``upstream``.  Tensors larger than ``max_coords`` are checked on a seeded
    random subset of that many coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = Rng(seed)
    x = np.array(x, dtype=np.float64)
    params = {k: np.array(v, dtype=np.float64) for k, v in (params or {}).items()}
    mask_seed = rng.next_u64()

    def run():
        return layer_forward(spec, x, params, train=train, rng=Rng(mask_seed))

    y, cache = run()
    upstream = rng.random(y.size).reshape(y.shape) * 2 - 1

    def f():
        out, c = run()
        return float(np.sum(upstream * out)), pattern([(spec, c)])

    grads = layer_backward(spec, cache, params, upstream)
    return _compare(f, [(x, grads.input_grad)] + [(params[k], grads.param_grads[k]) for k in params],
                    step, max_coords, rng)


def _compare(f, targets, step, max_coords, rng) -> CheckResult:
    worst, checked, skipped = 0.0, 0, 0
    for arr, analytic in targets:
        coords = _coords(arr.size, max_coords, rng)
        numeric, ok = numeric_grad(f, arr, coords, step)
        if ok.any():
            worst = max(worst, relative_error(analytic.reshape(-1)[coords][ok], numeric[ok]))
        checked += int(ok.sum())
        skipped += int((~ok).sum())
    return CheckResult(worst, checked, skipped)


def softmax_ce_check(logits: np.ndarray, labels, step: float = 1e-3) -> CheckResult:
    """Combined softmax + mean cross-entropy: analytic (p - y)/n vs differences."""
    from .layers import softmax

    z = np.array(logits, dtype=np.float64)
    n = z.shape[0]
    y = one_hot(labels, z.shape[1], np.float64).reshape(z.shape)

    def f():
        p = softmax(z)
        return float(-np.sum(y * np.log(p)) / n)

    analytic = (softmax(z) - y) / n
    numeric, ok = numeric_grad(f, z, np.arange(z.size), step)
    return CheckResult(relative_error(analytic, numeric), int(ok.sum()))


def network_check(net: Network, x: np.ndarray, labels, step: float = 1e-3, seed: int = 0,
                  max_coords: int | None = 200) -> CheckResult:
    """End-to-end check of ``Network.backward`` on mean cross-entropy.

    Runs in train mode with a fixed dropout mask so dropout is exercised.
    """
    rng = Rng(seed)
    net64 = net.astype(np.float64).train()
    x = np.array(x, dtype=np.float64)
    labels = np.asarray(labels)
    mask_seed = rng.next_u64()
    rows = np.arange(len(labels))

    def f():
        p = net64.forward(x, Rng(mask_seed))[rows, labels]
        # no clamp: a floor would flatten the loss where the analytic gradient is not flat
        if np.any(p <= 0):
            raise NumericError("label probability underflowed to zero")
        value = float(-np.mean(np.log(p)))
        return value, pattern(net64.cached())

    f()
    grads = net64.backward(labels)
    targets = [(arr, grads[i][key]) for i, group in enumerate(net64.params) for key, arr in group.items()]
    return _compare(f, targets, step, max_coords, rng)
