"""Shared dense numerics: stable softmax in log space, sigmoid, gradient oracle.

All attention weighting in this package runs in the log domain: a multiplicative
retention weight r is folded into the logits as ``z + log r`` before the usual
max-subtracted exp-normalize. Geometric weights beta**age underflow to zero in
linear space for old tokens, while their logs stay exactly representable.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

Array = np.ndarray


class EmptySupportError(ValueError):
    """Every candidate entry was suppressed; no distribution exists."""


def as_vector(x, name: str = "x") -> Array:
    """Coerce to a contiguous 1-D float64 array, rejecting non-finite input."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def as_matrix(x, name: str = "x") -> Array:
    """Coerce to a contiguous 2-D float64 array, rejecting non-finite input."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def softmax(logits: Array) -> Array:
    """Plain max-subtracted softmax over a 1-D logit vector."""
    z = as_vector(logits, "logits")
    if z.size == 0:
        raise EmptySupportError("softmax of an empty logit vector")
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_log_space(logits: Array, log_weights: Array) -> Array:
    """Softmax of ``logits`` with multiplicative weights given in log space.

    Computes w_i proportional to r_i * exp(z_i) as exp(z_i + log r_i), with
    max-subtraction over the finite support. Entries with log weight -inf are
    mapped to exactly 0; they never contribute to the normalizer.

    Raises
    ------
    EmptySupportError
        If every combined logit is -inf (all entries suppressed).
    """
    z = as_vector(logits, "logits")
    lw = np.ascontiguousarray(log_weights, dtype=np.float64)
    if lw.shape != z.shape:
        raise ValueError(f"shape mismatch: logits {z.shape} vs log_weights {lw.shape}")
    if np.any(np.isnan(lw)) or np.any(lw > 0.0):
        raise ValueError("log_weights must lie in [-inf, 0]")
    combined = z + lw
    finite = np.isfinite(combined)
    if not finite.any():
        raise EmptySupportError("all entries have zero weight")
    m = combined[finite].max()
    w = np.exp(combined - m)  # exp(-inf) == 0.0 exactly
    return w / w.sum()


def geometric_log_weights(betas: Array, ages: Array) -> Array:
    """Log of beta**age under the convention 0**0 == 1.

    A token at age zero participates at full weight even when its retention
    score is exactly zero, so the age-0 log weight is 0 regardless of beta.
    """
    b = np.ascontiguousarray(betas, dtype=np.float64)
    a = np.ascontiguousarray(ages, dtype=np.float64)
    if b.shape != a.shape:
        raise ValueError(f"shape mismatch: betas {b.shape} vs ages {a.shape}")
    if np.any(b < 0.0) or np.any(b > 1.0):
        raise ValueError("betas must lie in [0, 1]")
    if np.any(a < 0.0):
        raise ValueError("ages must be nonnegative")
    out = np.zeros_like(b)
    old = a > 0
    with np.errstate(divide="ignore"):
        out[old] = a[old] * np.log(b[old])
    return out


def finite_diff_grad(f: Callable[[Array], float], x: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function. Test oracle only.

    h = 1e-5 balances truncation against rounding at 64-bit precision.
    """
    x = as_vector(x, "x")
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g
