"""Block-coordinate WMMSE baseline for MISO downlink weighted sum rate.

Every routine is vectorised over leading batch axes: ``H`` and ``V`` are
``(..., M, K)`` complex arrays, ``u`` and ``w`` are ``(..., K)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics


class BisectionError(RuntimeError):
    pass


@dataclass
class WmmseState:
    V: np.ndarray
    u: np.ndarray
    w: np.ndarray
    iteration: int = 0


def uniform_precoder(M: int, K: int, P: float, batch: tuple = ()) -> np.ndarray:
    """Equal power ``P/K`` per user along the all-ones direction."""
    v = np.full(batch + (M, K), np.sqrt(P / (K * M)), dtype=np.complex128)
    return v


def update_u(state: WmmseState, H: np.ndarray, sigma2) -> np.ndarray:
    G = metrics.gains(state.V, H)
    tot = (np.abs(G) ** 2).sum(axis=-1) + sigma2
    return np.diagonal(G, axis1=-2, axis2=-1) / tot


def update_w(state: WmmseState, H: np.ndarray, sigma2) -> np.ndarray:
    e = metrics.mse_all(state.u, state.V, H, sigma2)
    if np.any(e <= 0):
        raise ZeroDivisionError("MSE reached zero")
    return 1.0 / e


def _eig_terms(state: WmmseState, H, gamma):
    """Eigen-decomposition of the weighted Gram matrix and the projected right-hand side."""
    c = gamma * state.w * np.abs(state.u) ** 2  # (..., K)
    A = np.einsum("...k,...mk,...nk->...mn", c, H, np.conj(H))
    A = 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))
    B = H * (gamma * state.w * state.u)[..., None, :]
    lam, Q = np.linalg.eigh(A)
    lam = np.maximum(lam, 0.0)
    QB = np.einsum("...mn,...mk->...nk", np.conj(Q), B)
    c2 = (np.abs(QB) ** 2).sum(axis=-1)  # (..., M)
    scale = np.max(lam, axis=-1, keepdims=True)
    null = lam <= 1e-13 * np.maximum(scale, np.finfo(float).tiny) * lam.shape[-1]
    c2 = np.where(null, 0.0, c2)
    return lam, Q, QB, c2, null


def _power(lam, c2, null, mu):
    den = (lam + mu[..., None]) ** 2
    return np.where(null, 0.0, c2 / np.where(null, 1.0, den)).sum(axis=-1)


def solve_mu(lam, c2, null, P, tol=1e-13, max_iter=300):
    """Smallest ``mu >= 0`` with transmit power at most ``P`` (vectorised bisection)."""
    shape = lam.shape[:-1]
    mu = np.zeros(shape)
    p0 = _power(lam, c2, null, mu)
    active = p0 > P
    if not np.any(active):
        return mu
    hi = np.where(active, np.maximum(lam.max(axis=-1), 1e-300), 0.0)
    for _ in range(2100):
        over = active & (_power(lam, c2, null, hi) > P)
        if not np.any(over):
            break
        hi = np.where(over, hi * 2, hi)
    else:
        raise BisectionError("could not bracket the power constraint")
    lo = np.zeros(shape)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        pm = _power(lam, c2, null, mid)
        feas = pm <= P
        hi = np.where(active & feas, mid, hi)
        lo = np.where(active & ~feas, mid, lo)
        ph = _power(lam, c2, null, hi)
        done = ~active | (np.abs(ph - P) <= tol * P) | (hi - lo <= 1e-16 * hi)
        if np.all(done):
            break
    return np.where(active, hi, 0.0)


def update_v(state: WmmseState, H, sigma2, gamma, P_BS: float) -> np.ndarray:
    """MMSE-weighted transmit filter with the power multiplier found by bisection."""
    gamma = np.asarray(gamma, dtype=np.float64)
    lam, Q, QB, c2, null = _eig_terms(state, H, gamma)
    mu = solve_mu(lam, c2, null, P_BS)
    inv = np.where(null, 0.0, 1.0 / np.where(null, 1.0, lam + mu[..., None]))
    V = np.einsum("...mn,...n,...nk->...mk", Q, inv, QB)
    # A rank-deficient Gram matrix leaves the mu = 0 minimiser ambiguous; the
    # min-norm choice can sit below the budget. Scaling up raises every SINR,
    # so spend the remaining power.
    p = precoder_power(V)
    fill = (mu == 0) & null.any(axis=-1) & (p > 0) & (p < P_BS)
    scale = np.sqrt(np.where(fill, P_BS / np.where(p > 0, p, 1.0), 1.0))
    return V * scale[..., None, None]


def precoder_power(V: np.ndarray) -> np.ndarray:
    return (np.abs(V) ** 2).sum(axis=(-2, -1))


def wmmse_solve(H, sigma2, gamma, P_BS: float, iters: int = 20, V0=None, history: bool = False):
    """Run ``iters`` rounds of u/w/v updates from the uniform precoder.

    Returns ``(V, rates)``; with ``history=True`` also the weighted sum rate
    after each round (index 0 is the initial precoder).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    H = np.asarray(H, dtype=np.complex128)
    M, K = H.shape[-2:]
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), H.shape[:-2] + (K,))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (K,))
    V = uniform_precoder(M, K, P_BS, H.shape[:-2]) if V0 is None else np.array(V0, dtype=np.complex128)
    state = WmmseState(V, np.zeros(H.shape[:-2] + (K,), complex), np.ones(H.shape[:-2] + (K,)))
    wsr = [metrics.weighted_sum_rate(state.V, H, sigma2, gamma)]
    for _ in range(iters):
        state.u = update_u(state, H, sigma2)
        state.w = update_w(state, H, sigma2)
        state.V = update_v(state, H, sigma2, gamma, P_BS)
        state.iteration += 1
        if history:
            wsr.append(metrics.weighted_sum_rate(state.V, H, sigma2, gamma))
    r = metrics.rates(state.V, H, sigma2)
    if history:
        return state.V, r, np.stack(wsr, axis=-1)
    return state.V, r


def wmmse_trace(H, sigma2, gamma, P_BS: float, iters: int = 20):
    """All intermediate precoders (for feasibility and scale checks)."""
    H = np.asarray(H, dtype=np.complex128)
    M, K = H.shape[-2:]
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), H.shape[:-2] + (K,))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (K,))
    state = WmmseState(uniform_precoder(M, K, P_BS, H.shape[:-2]), None, None)
    out = [state.V]
    for _ in range(iters):
        state.u = update_u(state, H, sigma2)
        state.w = update_w(state, H, sigma2)
        state.V = update_v(state, H, sigma2, gamma, P_BS)
        out.append(state.V)
    return out
