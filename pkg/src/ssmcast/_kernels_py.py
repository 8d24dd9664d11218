"""Pure-Python (numpy) implementations of the compiled kernels.

Signatures and results match ``ssmcast._kernels`` to rounding.
"""

from __future__ import annotations

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class KernelLinAlgError(ArithmeticError):
    def __init__(self, what: str, t: int):
        self.t = t
        super().__init__(f"{what} covariance is not positive definite at t={t} even after jitter")


def _chol(s, what, t, jitter=1e-9, retries=3):
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(s.shape[0])
    for _ in range(retries):
        try:
            return np.linalg.cholesky(s + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise KernelLinAlgError(what, t)


def _condition(m, P, resid, H, noise, what, t):
    """Condition belief rows ``m`` on ``resid = y - H m``; returns loglik rows."""
    S = H @ P @ H.T + noise
    L = _chol(0.5 * (S + S.T), what, t)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    # whitened residuals, one row per record
    w = np.linalg.solve(L, resid.T)
    ll = -0.5 * (H.shape[0] * LOG_2PI + logdet + np.sum(w * w, axis=0))
    PHt = P @ H.T
    K = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T
    m = m + resid @ K.T
    P = P - K @ PHt.T
    return m, 0.5 * (P + P.T), ll


def kalman_filter(A, B, C, D, Q, R, U, m0, P0, x, u, lengths, include_interventions):
    """Batched Kalman filter over records sharing one parameter set.

    Returns ``(loglik[N], means[N,T,z], covs[T,z,z], obs_ll[N,T], int_ll[N,T])``.
    Covariances do not depend on the data so they are shared by all records.
    """
    n, T, _ = x.shape
    zd = A.shape[0]
    lengths = np.asarray(lengths, dtype=np.int64)
    means = np.zeros((n, T, zd))
    covs = np.zeros((T, zd, zd))
    obs_ll = np.zeros((n, T))
    int_ll = np.zeros((n, T))
    m = np.broadcast_to(m0, (n, zd)).copy()
    P = P0.copy()
    for t in range(T):
        active = (t < lengths).astype(np.float64)
        if t > 0:
            if include_interventions:
                resid = u[:, t, :] - m @ D.T
                m, P, ll = _condition(m, P, resid, D, U, "intervention", t + 1)
                int_ll[:, t] = ll * active
            m = m @ A.T + u[:, t, :] @ B.T
            P = A @ P @ A.T + Q
            P = 0.5 * (P + P.T)
        resid = x[:, t, :] - m @ C.T
        m, P, ll = _condition(m, P, resid, C, R, "innovation", t + 1)
        obs_ll[:, t] = ll * active
        means[:, t, :] = m * active[:, None]
        covs[t] = P
    return obs_ll.sum(axis=1) + int_ll.sum(axis=1), means, covs, obs_ll, int_ll


def locf_fill(x, mask):
    """Last observation carried forward per column; leading gaps become 0."""
    out = np.array(x, dtype=np.float64)
    T, d = out.shape
    for j in range(d):
        last = 0.0
        for t in range(T):
            if mask[t, j]:
                last = out[t, j]
            else:
                out[t, j] = last
    return out


def continue_interventions(u, mask, thresholds):
    """Carry a setting across gaps of at most ``thresholds[j]`` steps, else 0."""
    src = np.array(u, dtype=np.float64)
    T, d = src.shape
    out = np.zeros((T, d))
    for j in range(d):
        prev = -1
        for t in range(T):
            if not mask[t, j]:
                continue
            out[t, j] = src[t, j]
            if prev >= 0 and t - prev <= thresholds[j]:
                out[prev + 1 : t, j] = src[prev, j]
            prev = t
    return out
