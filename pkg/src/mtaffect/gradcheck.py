"""Central finite-difference gradient checks (run these under ``precision("float64")``)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_gradient(f: Callable[[], float], param: Tensor, h: float = 1e-3,
                       max_entries: int | None = None, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. entries of ``param``.

    Returns ``(flat_indices, estimates)``; with ``max_entries`` a random subset
    of entries is probed.
    """
    flat = param.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False))
    est = np.empty(idx.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        est[j] = (fp - fm) / (2.0 * h)
    return idx, est


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over the entries."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
                    max_entries: int | None = 24, seed: int = 0) -> dict[str, float]:
    """Compare backprop against central differences for every tensor in ``params``.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call and be deterministic. Returns the worst relative error per tensor.
    """
    for p in params:
        p.zero_grad()
    grads = backward(loss_fn(), params)
    analytic = [g.copy() for g in grads]
    rng = np.random.default_rng(seed)
    errors = {}
    for k, (p, g) in enumerate(zip(params, analytic)):
        idx, est = numerical_gradient(lambda: float(loss_fn().data), p, h, max_entries, rng)
        errors[p.name or f"param{k}"] = relative_error(g.reshape(-1)[idx], est)
    return errors
