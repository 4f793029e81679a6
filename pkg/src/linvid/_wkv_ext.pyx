# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled wkv kernels. Same contracts as ``_wkv_py``."""

import numpy as np
cimport cython
from libc.math cimport exp

ctypedef fused real:
    float
    double

BACKEND = "cython"


cdef inline real _max(real x, real y) noexcept nogil:
    return x if x > y else y


# Loops run time-outer, channel-inner so every access walks a contiguous row;
# the per-channel arithmetic is unchanged.

def _forward(real[:, ::1] k, real[:, ::1] v, real[::1] w, real[::1] u,
             real[::1] a, real[::1] b, real[::1] p,
             real[:, ::1] out, real[:, :, ::1] saved, bint save):
    cdef Py_ssize_t T = k.shape[0], C = k.shape[1], t, c
    cdef real aa, bb, pp, kt, vt, ww, q, e1, e2
    with nogil:
        for t in range(T):
            if save:
                for c in range(C):
                    saved[0, t, c] = a[c]
                    saved[1, t, c] = b[c]
                    saved[2, t, c] = p[c]
            for c in range(C):
                aa = a[c]
                bb = b[c]
                pp = p[c]
                kt = k[t, c]
                vt = v[t, c]
                ww = u[c] + kt
                q = _max(pp, ww)
                e1 = exp(pp - q)
                e2 = exp(ww - q)
                out[t, c] = (e1 * aa + e2 * vt) / (e1 * bb + e2)
                ww = pp - w[c]
                q = _max(ww, kt)
                e1 = exp(ww - q)
                e2 = exp(kt - q)
                a[c] = e1 * aa + e2 * vt
                b[c] = e1 * bb + e2
                p[c] = q


def _backward(real[:, ::1] k, real[:, ::1] v, real[::1] w, real[::1] u,
              real[:, :, ::1] saved, real[:, ::1] out, real[:, ::1] gy,
              real[:, ::1] dk, real[:, ::1] dv, real[::1] dw, real[::1] du,
              real[::1] ga, real[::1] gb):
    # dw, du, ga, gb arrive zeroed and accumulate across the reverse sweep
    cdef Py_ssize_t T = k.shape[0], C = k.shape[1], t, c
    cdef real a0, b0, p0, kt, vt, y, g, ww, q, e1, e2, den, ge, f1, f2, A, B
    with nogil:
        for t in range(T - 1, -1, -1):
            for c in range(C):
                a0 = saved[0, t, c]
                b0 = saved[1, t, c]
                p0 = saved[2, t, c]
                kt = k[t, c]
                vt = v[t, c]
                y = out[t, c]
                g = gy[t, c]
                A = ga[c]
                B = gb[c]
                ww = u[c] + kt
                q = _max(p0, ww)
                e1 = exp(p0 - q)
                e2 = exp(ww - q)
                den = e1 * b0 + e2
                ge = g * e2 * (vt - y) / den
                du[c] = du[c] + ge
                ww = p0 - w[c]
                q = _max(ww, kt)
                f1 = exp(ww - q)
                f2 = exp(kt - q)
                dk[t, c] = ge + f2 * (A * vt + B)
                dv[t, c] = g * e2 / den + f2 * A
                dw[c] = dw[c] - f1 * (A * a0 + B * b0)
                ga[c] = g * e1 / den + f1 * A
                gb[c] = -g * y * e1 / den + f1 * B


def _matrix_forward(real[:, :, ::1] r, real[:, :, ::1] k, real[:, :, ::1] v,
                    real[:, ::1] w, real[:, ::1] u, real[:, :, ::1] S,
                    real[:, :, ::1] out):
    cdef Py_ssize_t T = r.shape[0], H = r.shape[1], N = r.shape[2]
    cdef Py_ssize_t t, h, i, j
    cdef real acc, kv, ri, ki, decay, bonus
    with nogil:
        for t in range(T):
            for h in range(H):
                for j in range(N):
                    out[t, h, j] = 0
                for i in range(N):
                    ri = r[t, h, i]
                    ki = k[t, h, i]
                    decay = exp(-w[h, i])
                    bonus = exp(u[h, i])
                    for j in range(N):
                        kv = ki * v[t, h, j]
                        out[t, h, j] += ri * (bonus * kv + S[h, i, j])
                        S[h, i, j] = decay * S[h, i, j] + kv


def wkv_forward(k, v, w, u, a, b, p, save=False):
    dt = k.dtype
    k = np.ascontiguousarray(k)
    v = np.ascontiguousarray(v, dtype=dt)
    w = np.ascontiguousarray(w, dtype=dt)
    u = np.ascontiguousarray(u, dtype=dt)
    a = np.array(a, dtype=dt, copy=True)
    b = np.array(b, dtype=dt, copy=True)
    p = np.array(p, dtype=dt, copy=True)
    T, C = k.shape
    out = np.empty((T, C), dtype=dt)
    saved = np.empty((3, T, C) if save else (3, 0, C), dtype=dt)
    _forward(k, v, w, u, a, b, p, out, saved, save)
    return out, a, b, p, (saved if save else None)


def wkv_backward(k, v, w, u, saved, out, gy):
    dt = k.dtype
    k = np.ascontiguousarray(k)
    T, C = k.shape
    dk = np.empty((T, C), dtype=dt)
    dv = np.empty((T, C), dtype=dt)
    dw = np.zeros(C, dtype=dt)
    du = np.zeros(C, dtype=dt)
    _backward(k, np.ascontiguousarray(v, dtype=dt), np.ascontiguousarray(w, dtype=dt),
              np.ascontiguousarray(u, dtype=dt), np.ascontiguousarray(saved, dtype=dt),
              np.ascontiguousarray(out, dtype=dt), np.ascontiguousarray(gy, dtype=dt),
              dk, dv, dw, du, np.zeros(C, dtype=dt), np.zeros(C, dtype=dt))
    return dk, dv, dw, du


def wkv_matrix_forward(r, k, v, w, u, S):
    dt = r.dtype
    r = np.ascontiguousarray(r)
    S = np.array(S, dtype=dt, copy=True, order="C")
    out = np.empty_like(r)
    _matrix_forward(r, np.ascontiguousarray(k, dtype=dt), np.ascontiguousarray(v, dtype=dt),
                    np.ascontiguousarray(w, dtype=dt), np.ascontiguousarray(u, dtype=dt), S, out)
    return out, S
