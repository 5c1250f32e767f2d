"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

import numpy as np

from .errors import NumericError


def numeric_grad(f, param: np.ndarray, eps: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``param``, perturbed in place.

    Only ``indices`` (flat) are probed when given; other entries are NaN.
    """
    flat = param.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite objective while probing element {i}")
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(param.shape)


def finite_diff_check(
    f, param: np.ndarray, analytic: np.ndarray, eps: float = 1e-5, max_elements: int = 64, rng=None
) -> float:
    """Max relative error between ``analytic`` and central differences.

    ``f`` is a zero-argument closure reading ``param``. Tensors larger than
    ``max_elements`` are checked on a random subset of that many entries.
    The relative error uses ``max(|a|, |n|, 1e-8)`` as denominator.
    """
    analytic = np.asarray(analytic)
    if analytic.shape != param.shape:
        raise ValueError(f"gradient shape {analytic.shape} != parameter shape {param.shape}")
    if param.size > max_elements:
        rng = rng or np.random.default_rng(0)
        indices = np.sort(rng.choice(param.size, size=max_elements, replace=False))
    else:
        indices = np.arange(param.size)
    num = numeric_grad(f, param, eps, indices).reshape(-1)[indices]
    a = analytic.reshape(-1)[indices]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
    return float(np.max(np.abs(a - num) / denom))
