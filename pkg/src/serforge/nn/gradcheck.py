"""Central finite-difference verification of backward passes.

Gradient checks only make sense in float64: float32 rounding is the same
order as the finite-difference truncation error. Callers build the model
under test with ``dtype=np.float64`` and hand this module a closure that
recomputes the scalar loss from current parameter values.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_STEP = 1e-4


def numerical_gradient(loss_fn: Callable[[], float], array: np.ndarray,
                       step: float = DEFAULT_STEP,
                       indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. entries of ``array``.

    The array is perturbed in place and restored. When ``indices`` is given,
    only those flat positions are probed (the rest stay zero in the result).
    """
    if array.dtype != np.float64:
        raise TypeError(f"finite differences need float64 arrays, got {array.dtype}")
    flat = array.reshape(-1)
    grad = np.zeros_like(flat)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = loss_fn()
        flat[i] = orig - step
        f_minus = loss_fn()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(array.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    """max |a - n| / (floor + max(|a|, |n|)) over all entries.

    The floor keeps dead directions (true zero gradients plus FD noise) from
    registering as spurious relative errors.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = floor + np.maximum(np.abs(a), np.abs(n))
    return float(np.max(np.abs(a - n) / denom))


def directional_derivative(loss_fn: Callable[[], float], array: np.ndarray,
                           direction: np.ndarray, step: float = DEFAULT_STEP) -> float:
    """Central-difference derivative of ``loss_fn`` along ``direction``."""
    if array.dtype != np.float64:
        raise TypeError(f"finite differences need float64 arrays, got {array.dtype}")
    base = array.copy()
    array[...] = base + step * direction
    f_plus = loss_fn()
    array[...] = base - step * direction
    f_minus = loss_fn()
    array[...] = base
    return (f_plus - f_minus) / (2.0 * step)


def directional_check(loss_fn: Callable[[], float],
                      pairs: Iterable[tuple[np.ndarray, np.ndarray]],
                      rng: np.random.Generator,
                      step: float = DEFAULT_STEP,
                      directions: int = 2,
                      floor: float = 1e-6) -> float:
    """Worst relative error of analytic vs numeric directional derivatives.

    Per-element probes are ill-conditioned through deep stacks (normalization
    layers concentrate curvature; clamped square roots sit at kinks), while a
    full-tensor direction aggregates to a well-conditioned scalar. Each value
    array is probed along ``directions`` random unit directions.
    """
    worst = 0.0
    for value, analytic in pairs:
        for _ in range(directions):
            d = rng.normal(size=value.shape)
            d /= np.linalg.norm(d) + 1e-30
            a = float((analytic * d).sum())
            n = directional_derivative(loss_fn, value, d, step=step)
            err = abs(a - n) / (floor + max(abs(a), abs(n)))
            worst = max(worst, err)
    return worst


def joint_directional_check(loss_fn: Callable[[], float],
                            pairs: Iterable[tuple[np.ndarray, np.ndarray]],
                            rng: np.random.Generator,
                            directions: int = 3,
                            step: float = DEFAULT_STEP,
                            floor: float = 1e-6,
                            region_state: Callable[[], bytes] | None = None,
                            max_resamples: int = 25) -> float:
    """Directional check along random unit directions spanning every tensor.

    Deep stacks of normalization layers evaluate with relative rounding noise
    far above machine epsilon, which drowns per-element probes of small
    gradient entries. Perturbing all tensors at once keeps the projection at
    the scale of the full gradient norm, where that noise is negligible,
    while still covering every backward path.

    The loss is only piecewise smooth (relu signs, clamp states). A probe
    whose two evaluations land in different linear regions measures a kink,
    not the gradient; when ``region_state`` is given (a callable capturing
    the active region after a forward pass) such straddling directions are
    resampled. Returns the worst relative error over ``directions`` probes.
    """
    pairs = [(v, g) for v, g in pairs]
    worst = 0.0
    checked = 0
    resamples = 0
    while checked < directions:
        ds = [rng.normal(size=v.shape) for v, _ in pairs]
        norm = np.sqrt(sum(float((d * d).sum()) for d in ds))
        ds = [d / norm for d in ds]
        analytic = sum(float((g * d).sum()) for (_, g), d in zip(pairs, ds))
        bases = [v.copy() for v, _ in pairs]
        for (v, _), d, b in zip(pairs, ds, bases):
            v[...] = b + step * d
        f_plus = loss_fn()
        state_plus = region_state() if region_state is not None else None
        for (v, _), d, b in zip(pairs, ds, bases):
            v[...] = b - step * d
        f_minus = loss_fn()
        state_minus = region_state() if region_state is not None else None
        for (v, _), b in zip(pairs, bases):
            v[...] = b
        if region_state is not None and state_plus != state_minus:
            resamples += 1
            if resamples > max_resamples:
                raise RuntimeError(
                    "finite-difference probes keep straddling non-smooth points; "
                    "move the check to a generic parameter point")
            continue
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = abs(analytic - numeric) / (floor + max(abs(analytic), abs(numeric)))
        worst = max(worst, err)
        checked += 1
    return worst


def relu_region_state(roots) -> bytes:
    """Concatenated relu sign masks from the last training-mode forward.

    Walks ``Layer`` attribute trees looking for cached relu masks; the result
    identifies which linear region of the piecewise-smooth network the last
    forward pass evaluated in.
    """
    from .layers import Layer, ReLU

    parts: list[bytes] = []

    def walk(obj):
        if isinstance(obj, ReLU):
            if obj._cache is not None:
                parts.append(obj._cache.tobytes())
            return
        if isinstance(obj, Layer):
            for child in obj.__dict__.values():
                walk(child)
        elif isinstance(obj, (list, tuple)):
            for item in obj:
                if isinstance(item, (Layer, list, tuple)):
                    walk(item)

    for root in roots:
        walk(root)
    return b"".join(parts)


def compare_gradients(loss_fn: Callable[[], float],
                      pairs: Iterable[tuple[np.ndarray, np.ndarray]],
                      step: float = DEFAULT_STEP,
                      max_entries: int | None = None,
                      rng: np.random.Generator | None = None,
                      floor: float = 1e-6) -> float:
    """Worst relative error between analytic gradients and finite differences.

    ``pairs`` yields (value_array, analytic_grad) tuples. Large arrays can be
    spot-checked by sampling ``max_entries`` coordinates per array.
    """
    worst = 0.0
    for value, analytic in pairs:
        if max_entries is not None and value.size > max_entries:
            if rng is None:
                raise ValueError("rng required when subsampling coordinates")
            idx = rng.choice(value.size, size=max_entries, replace=False)
        else:
            idx = None
        numeric = numerical_gradient(loss_fn, value, step=step, indices=idx)
        if idx is not None:
            sel = np.asarray(idx)
            err = max_relative_error(analytic.reshape(-1)[sel],
                                     numeric.reshape(-1)[sel], floor=floor)
        else:
            err = max_relative_error(analytic, numeric, floor=floor)
        worst = max(worst, err)
    return worst
