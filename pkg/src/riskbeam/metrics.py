"""Rates, MSEs, empirical CVaR and reporting statistics.

Rates are in nats unless a function says otherwise; divide by ``LN2`` for
bits per channel use. Channel and precoder arrays follow the ``(..., M, K)``
layout with column ``i`` belonging to user ``i``.
"""

from __future__ import annotations

import math

import numpy as np

LN2 = math.log(2.0)
ZERO_RATE_BITS = 0.01


def gains(V: np.ndarray, H: np.ndarray) -> np.ndarray:
    """``G[..., i, j] = h_i^H v_j``."""
    return np.einsum("...mi,...mj->...ij", np.conj(H), V)


def rates(V: np.ndarray, H: np.ndarray, sigma2) -> np.ndarray:
    """Per-user rates for all users at once, shape ``(..., K)``."""
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise ValueError("noise variance must be positive")
    P = np.abs(gains(V, H)) ** 2
    sig = np.diagonal(P, axis1=-2, axis2=-1)
    interf = P.sum(axis=-1) - sig
    return np.log1p(sig / (np.maximum(interf, 0.0) + sigma2))


def user_rate(V: np.ndarray, h_i: np.ndarray, i: int, sigma2_i: float) -> float:
    if sigma2_i <= 0:
        raise ValueError("noise variance must be positive")
    g = np.conj(h_i) @ V
    p = np.abs(g) ** 2
    interf = p.sum() - p[i]
    return float(np.log1p(p[i] / (interf + sigma2_i)))


def mse(u_i: complex, V: np.ndarray, h_i: np.ndarray, i: int, sigma2_i: float) -> float:
    """Symbol MSE of user ``i`` under scalar receiver ``u_i``."""
    g = np.conj(h_i) @ V
    e = abs(1 - np.conj(u_i) * g[i]) ** 2
    e += sum(abs(np.conj(u_i) * g[j]) ** 2 for j in range(V.shape[1]) if j != i)
    return float(e + sigma2_i * abs(u_i) ** 2)


def mse_all(u: np.ndarray, V: np.ndarray, H: np.ndarray, sigma2) -> np.ndarray:
    """Vectorised :func:`mse` for every user, shape ``(..., K)``."""
    G = gains(V, H)
    sig = np.diagonal(G, axis1=-2, axis2=-1)
    tot = (np.abs(G) ** 2).sum(axis=-1)
    return np.abs(1 - np.conj(u) * sig) ** 2 - np.abs(u * sig) ** 2 + np.abs(u) ** 2 * (tot + sigma2)


def surrogate_rate(u_i, w_i, V, h_i, i, sigma2_i) -> float:
    """``log w - w * e`` with ``e`` the MSE of user ``i``."""
    if w_i <= 0:
        raise ValueError("w must be positive")
    return float(np.log(w_i) - w_i * mse(u_i, V, h_i, i, sigma2_i))


def weighted_sum_rate(V, H, sigma2, gamma) -> np.ndarray:
    return (np.asarray(gamma) * rates(V, H, sigma2)).sum(axis=-1)


# ---------------------------------------------------------------------------
# CVaR
# ---------------------------------------------------------------------------

def _check_alpha(alpha):
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")


def cvar_lower_tail(samples, alpha: float) -> float:
    """Mean of the lowest ``alpha`` fraction, counting the boundary sample fractionally."""
    _check_alpha(alpha)
    z = np.asarray(samples, dtype=np.float64).reshape(-1)
    n = z.size
    if n == 0:
        raise ValueError("empty sample set")
    if alpha == 1.0:
        return float(z.mean())
    z = np.sort(z)
    an = alpha * n
    k = math.floor(an)
    frac = an - k
    total = z[:k].sum()
    if frac > 0:
        total += frac * z[k]
    return float(total / an)


def cvar_variational(samples, alpha: float, t: float) -> float:
    """``t - E[(t - Z)_+] / alpha`` for the empirical law of ``samples``."""
    _check_alpha(alpha)
    z = np.asarray(samples, dtype=np.float64).reshape(-1)
    if z.size == 0:
        raise ValueError("empty sample set")
    return float(t - np.maximum(t - z, 0.0).sum() / (alpha * z.size))


def empirical_quantile(samples, alpha: float) -> float:
    """Lower ``alpha``-quantile: the ``ceil(alpha n)``-th smallest sample."""
    z = np.sort(np.asarray(samples, dtype=np.float64).reshape(-1))
    k = max(1, math.ceil(alpha * z.size - 1e-12))
    return float(z[k - 1])


def risk_objective(rates_by_sample, t, gamma, alpha) -> float:
    """Sample mean of ``sum_i gamma_i [t_i - (t_i - r_i)_+ / alpha_i]``."""
    r = np.atleast_2d(np.asarray(rates_by_sample, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    per = gamma * (t - np.maximum(t - r, 0.0) / alpha)
    return float(per.sum(axis=1).mean())


# ---------------------------------------------------------------------------
# reporting statistics
# ---------------------------------------------------------------------------

def sharpe_ratio(samples) -> tuple[float, bool]:
    """Mean over unbiased std. Returns ``(value, defined)``; ``(inf, False)`` on zero spread."""
    z = np.asarray(samples, dtype=np.float64).reshape(-1)
    if z.size < 2:
        raise ValueError("need at least two samples")
    sd = z.std(ddof=1)
    if sd == 0 or not np.isfinite(sd):
        return math.inf, False
    return float(z.mean() / sd), True


def zero_rate_fraction(samples, threshold: float = ZERO_RATE_BITS) -> float:
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    z = np.asarray(samples, dtype=np.float64).reshape(-1)
    return float(np.mean(z < threshold))
