"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(
    fn: Callable[[], Tensor],
    param: Tensor,
    step: float = 1e-5,
    coords: Optional[Sequence[tuple[int, ...]]] = None,
) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Central differences of scalar ``fn()`` with respect to ``param``.

    Perturbs ``param.data`` in place and restores it. ``coords`` restricts
    the check to selected entries (all entries when None).
    """
    if coords is None:
        coords = list(np.ndindex(param.shape))
    out = np.empty(len(coords))
    data = param.data
    for i, c in enumerate(coords):
        orig = data[c]
        data[c] = orig + step
        plus = float(fn().data.sum())
        data[c] = orig - step
        minus = float(fn().data.sum())
        data[c] = orig
        out[i] = (plus - minus) / (2 * step)
    return out, list(coords)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-6,
) -> dict[str, float]:
    """Compare autodiff and finite-difference gradients.

    Returns the max relative error per parameter (keyed by name or
    position). With ``max_entries`` each parameter is checked on a random
    subset of its entries.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    errors: dict[str, float] = {}
    for i, (p, ga) in enumerate(zip(params, analytic)):
        coords = list(np.ndindex(p.shape))
        if max_entries is not None and len(coords) > max_entries:
            pick = rng.choice(len(coords), size=max_entries, replace=False)
            coords = [coords[j] for j in sorted(pick)]
        num, coords = numeric_grad(fn, p, step, coords)
        ana = np.array([ga[c] for c in coords])
        errors[p.name or str(i)] = relative_error(ana, num, floor)
    return errors


def directional_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
) -> tuple[float, float]:
    """Compare <grad, v> with the finite difference of ``fn`` along a random
    unit direction v spanning every entry of every parameter."""
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    fn().backward()
    dirs = [rng.standard_normal(p.shape) for p in params]
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs) if p.grad is not None)
    originals = [p.data.copy() for p in params]
    for p, d, o in zip(params, dirs, originals):
        p.data = o + step * d
    plus = float(fn().data.sum())
    for p, d, o in zip(params, dirs, originals):
        p.data = o - step * d
    minus = float(fn().data.sum())
    for p, o in zip(params, originals):
        p.data = o
    return analytic, (plus - minus) / (2 * step)
