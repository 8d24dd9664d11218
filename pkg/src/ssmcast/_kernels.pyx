# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Kalman recursion and imputation loops.

Mirrors ``ssmcast._kernels_py``; see that module for the contracts.
"""

import numpy as np
from libc.math cimport log, sqrt

from ssmcast._kernels_py import KernelLinAlgError

cdef double LOG_2PI = 1.8378770664093453


cdef int _chol(double[:, ::1] S, double[:, ::1] L, int n) noexcept nogil:
    cdef int i, j, k
    cdef double s
    for i in range(n):
        for j in range(n):
            L[i, j] = 0.0
    for i in range(n):
        for j in range(i + 1):
            s = S[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if not (s > 0.0):
                    return -1
                L[i, i] = sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return 0


cdef int _chol_jitter(double[:, ::1] S, double[:, ::1] work, double[:, ::1] L, int n) noexcept nogil:
    cdef int i, j, r
    cdef double jitter = 1e-9
    if _chol(S, L, n) == 0:
        return 0
    for r in range(3):
        for i in range(n):
            for j in range(n):
                work[i, j] = S[i, j]
            work[i, i] += jitter
        if _chol(work, L, n) == 0:
            return 0
        jitter *= 10.0
    return -1


cdef class _Conditioner:
    """Shared covariance-side work of one conditioning step."""

    cdef double[:, ::1] PHt, S, L, Kt, work, W
    cdef int zd, k
    cdef double logdet

    def __init__(self, int zd, int k):
        self.zd = zd
        self.k = k
        self.PHt = np.zeros((zd, k))
        self.S = np.zeros((k, k))
        self.L = np.zeros((k, k))
        self.Kt = np.zeros((k, zd))
        self.work = np.zeros((k, k))
        self.W = np.zeros((zd, zd))

    cdef int covariance(self, double[:, ::1] P, const double[:, ::1] H, const double[:, ::1] noise):
        """Gain and posterior covariance (P updated in place)."""
        cdef double[:, ::1] PHt = self.PHt, S = self.S, L = self.L, Kt = self.Kt, W = self.W
        cdef int zd = self.zd, k = self.k
        cdef int a, b, c
        cdef double s
        for a in range(zd):
            for b in range(k):
                s = 0.0
                for c in range(zd):
                    s += P[a, c] * H[b, c]
                PHt[a, b] = s
        for a in range(k):
            for b in range(k):
                s = noise[a, b]
                for c in range(zd):
                    s += H[a, c] * PHt[c, b]
                S[a, b] = s
        for a in range(k):
            for b in range(a):
                s = 0.5 * (S[a, b] + S[b, a])
                S[a, b] = s
                S[b, a] = s
        if _chol_jitter(S, self.work, L, k) != 0:
            return -1
        self.logdet = 0.0
        for a in range(k):
            self.logdet += 2.0 * log(L[a, a])
        # Kt = S^{-1} PHt^T, column by column through L L^T
        for c in range(zd):
            for a in range(k):
                s = PHt[c, a]
                for b in range(a):
                    s -= L[a, b] * Kt[b, c]
                Kt[a, c] = s / L[a, a]
            for a in range(k - 1, -1, -1):
                s = Kt[a, c]
                for b in range(a + 1, k):
                    s -= L[b, a] * Kt[b, c]
                Kt[a, c] = s / L[a, a]
        # P -= K PHt^T
        for a in range(zd):
            for b in range(zd):
                s = 0.0
                for c in range(k):
                    s += Kt[c, a] * PHt[b, c]
                W[a, b] = P[a, b] - s
        for a in range(zd):
            for b in range(zd):
                P[a, b] = 0.5 * (W[a, b] + W[b, a])
        return 0

    cdef double mean(self, double[:, ::1] m, int row, const double[:, :, ::1] y, int t,
                     const double[:, ::1] H, double[::1] r) noexcept:
        """Update ``m[row]`` in place from ``y[row, t]``; returns the log density."""
        cdef double[:, ::1] L = self.L, Kt = self.Kt
        cdef int zd = self.zd, k = self.k
        cdef int a, b
        cdef double s, quad = 0.0
        for a in range(k):
            s = y[row, t, a]
            for b in range(zd):
                s -= H[a, b] * m[row, b]
            r[a] = s
        for a in range(zd):
            s = 0.0
            for b in range(k):
                s += Kt[b, a] * r[b]
            m[row, a] += s
        # whiten the residual in place
        for a in range(k):
            s = r[a]
            for b in range(a):
                s -= L[a, b] * r[b]
            r[a] = s / L[a, a]
            quad += r[a] * r[a]
        return -0.5 * (k * LOG_2PI + self.logdet + quad)


def kalman_filter(A, B, C, D, Q, R, U, m0, P0, x, u, lengths, include_interventions):
    cdef const double[:, ::1] A_ = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[:, ::1] B_ = np.ascontiguousarray(B, dtype=np.float64)
    cdef const double[:, ::1] C_ = np.ascontiguousarray(C, dtype=np.float64)
    cdef const double[:, ::1] D_ = np.ascontiguousarray(D, dtype=np.float64)
    cdef const double[:, ::1] Q_ = np.ascontiguousarray(Q, dtype=np.float64)
    cdef const double[:, ::1] R_ = np.ascontiguousarray(R, dtype=np.float64)
    cdef const double[:, ::1] U_ = np.ascontiguousarray(U, dtype=np.float64)
    cdef const double[:, :, ::1] x_ = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :, ::1] u_ = np.ascontiguousarray(u, dtype=np.float64)
    cdef const long[::1] len_ = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef int n = x_.shape[0], T = x_.shape[1], od = x_.shape[2], idim = u_.shape[2]
    cdef int zd = A_.shape[0]
    cdef bint with_int = bool(include_interventions)
    means_np = np.zeros((n, T, zd))
    covs_np = np.zeros((T, zd, zd))
    obs_np = np.zeros((n, T))
    int_np = np.zeros((n, T))
    m_np = np.zeros((n, zd))
    m_np[:] = np.asarray(m0, dtype=np.float64)
    cdef double[:, :, ::1] means = means_np
    cdef double[:, :, ::1] covs = covs_np
    cdef double[:, ::1] obs_ll = obs_np
    cdef double[:, ::1] int_ll = int_np
    cdef double[:, ::1] m = m_np
    cdef double[:, ::1] P = np.array(P0, dtype=np.float64, order="C")
    cdef double[:, ::1] W = np.zeros((zd, zd))
    cdef double[::1] r = np.zeros(max(od, idim, zd))
    cdef double[::1] tmp = np.zeros(zd)
    cdef _Conditioner cobs = _Conditioner(zd, od)
    cdef _Conditioner cint = _Conditioner(zd, idim)
    cdef int t, b, a, c
    cdef double s
    for t in range(T):
        if t > 0:
            if with_int:
                if cint.covariance(P, D_, U_) != 0:
                    raise KernelLinAlgError("intervention", t + 1)
                for b in range(n):
                    if t < len_[b]:
                        int_ll[b, t] = cint.mean(m, b, u_, t, D_, r)
            for b in range(n):
                for a in range(zd):
                    s = 0.0
                    for c in range(zd):
                        s += A_[a, c] * m[b, c]
                    for c in range(idim):
                        s += B_[a, c] * u_[b, t, c]
                    tmp[a] = s
                for a in range(zd):
                    m[b, a] = tmp[a]
            for a in range(zd):
                for c in range(zd):
                    s = 0.0
                    for b in range(zd):
                        s += A_[a, b] * P[b, c]
                    W[a, c] = s
            for a in range(zd):
                for c in range(zd):
                    s = Q_[a, c]
                    for b in range(zd):
                        s += W[a, b] * A_[c, b]
                    covs[t, a, c] = s
            for a in range(zd):
                for c in range(zd):
                    P[a, c] = 0.5 * (covs[t, a, c] + covs[t, c, a])
        if cobs.covariance(P, C_, R_) != 0:
            raise KernelLinAlgError("innovation", t + 1)
        for b in range(n):
            if t < len_[b]:
                obs_ll[b, t] = cobs.mean(m, b, x_, t, C_, r)
                for a in range(zd):
                    means[b, t, a] = m[b, a]
            else:
                cobs.mean(m, b, x_, t, C_, r)
        for a in range(zd):
            for c in range(zd):
                covs[t, a, c] = P[a, c]
    return obs_np.sum(axis=1) + int_np.sum(axis=1), means_np, covs_np, obs_np, int_np


def locf_fill(x, mask):
    out_np = np.array(x, dtype=np.float64, order="C")
    cdef double[:, ::1] out = out_np
    cdef const unsigned char[:, ::1] mk = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef int T = out.shape[0], d = out.shape[1], t, j
    cdef double last
    for j in range(d):
        last = 0.0
        for t in range(T):
            if mk[t, j]:
                last = out[t, j]
            else:
                out[t, j] = last
    return out_np


def continue_interventions(u, mask, thresholds):
    cdef const double[:, ::1] src = np.ascontiguousarray(u, dtype=np.float64)
    cdef const unsigned char[:, ::1] mk = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef const long[::1] thr = np.ascontiguousarray(thresholds, dtype=np.int64)
    cdef int T = src.shape[0], d = src.shape[1], t, j, s, prev
    out_np = np.zeros((T, d))
    cdef double[:, ::1] out = out_np
    for j in range(d):
        prev = -1
        for t in range(T):
            if not mk[t, j]:
                continue
            out[t, j] = src[t, j]
            if prev >= 0 and t - prev <= thr[j]:
                for s in range(prev + 1, t):
                    out[s, j] = src[prev, j]
            prev = t
    return out_np
