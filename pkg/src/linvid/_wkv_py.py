"""Pure numpy fallback for the wkv kernels.

Mirrors ``_wkv_ext.pyx`` operation for operation. Loops run over time; every
step is vectorised across channels.
"""

import numpy as np

BACKEND = "python"


def wkv_forward(k, v, w, u, a, b, p, save=False):
    """Exponent-shifted wkv recurrence over ``T`` steps.

    ``k``, ``v`` are ``(T, C)``; ``w``, ``u``, ``a``, ``b``, ``p`` are ``(C,)``.
    Returns ``(out, a, b, p, saved)`` where ``saved`` is ``None`` or the
    per-step pre-update ``(a, b, p)`` stacked as ``(3, T, C)``.
    """
    T, C = k.shape
    out = np.empty_like(k)
    a = np.array(a, dtype=k.dtype, copy=True)
    b = np.array(b, dtype=k.dtype, copy=True)
    p = np.array(p, dtype=k.dtype, copy=True)
    saved = np.empty((3, T, C), dtype=k.dtype) if save else None
    # non-finite steps are located and reported by the caller
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            kt = k[t]
            vt = v[t]
            if save:
                saved[0, t] = a
                saved[1, t] = b
                saved[2, t] = p
            ww = u + kt
            q = np.maximum(p, ww)
            e1 = np.exp(p - q)
            e2 = np.exp(ww - q)
            out[t] = (e1 * a + e2 * vt) / (e1 * b + e2)
            ww = p - w
            q = np.maximum(ww, kt)
            e1 = np.exp(ww - q)
            e2 = np.exp(kt - q)
            a = e1 * a + e2 * vt
            b = e1 * b + e2
            p = q
    return out, a, b, p, saved


def wkv_backward(k, v, w, u, saved, out, gy):
    """Reverse-mode pass for :func:`wkv_forward`.

    Adjoints of the naive state are carried rescaled by ``exp(p)`` so every
    intermediate stays bounded. Returns ``(dk, dv, dw, du)``.
    """
    T, C = k.shape
    dk = np.empty_like(k)
    dv = np.empty_like(k)
    dw = np.zeros(C, dtype=k.dtype)
    du = np.zeros(C, dtype=k.dtype)
    ga = np.zeros(C, dtype=k.dtype)
    gb = np.zeros(C, dtype=k.dtype)
    for t in range(T - 1, -1, -1):
        a0 = saved[0, t]
        b0 = saved[1, t]
        p0 = saved[2, t]
        kt = k[t]
        vt = v[t]
        y = out[t]
        g = gy[t]
        ww = u + kt
        q = np.maximum(p0, ww)
        e1 = np.exp(p0 - q)
        e2 = np.exp(ww - q)
        den = e1 * b0 + e2
        ge = g * e2 * (vt - y) / den
        du += ge
        ww = p0 - w
        q = np.maximum(ww, kt)
        f1 = np.exp(ww - q)
        f2 = np.exp(kt - q)
        dk[t] = ge + f2 * (ga * vt + gb)
        dv[t] = g * e2 / den + f2 * ga
        dw -= f1 * (ga * a0 + gb * b0)
        ga = g * e1 / den + f1 * ga
        gb = -g * y * e1 / den + f1 * gb
    return dk, dv, dw, du


def wkv_matrix_forward(r, k, v, w, u, S):
    """Matrix-state recurrence. ``r, k, v`` are ``(T, H, N)``, ``S`` is ``(H, N, N)``."""
    T = r.shape[0]
    out = np.empty_like(r)
    S = np.array(S, dtype=r.dtype, copy=True)
    decay = np.exp(-w)[:, :, None]
    bonus = np.exp(u)
    for t in range(T):
        kv = k[t][:, :, None] * v[t][:, None, :]
        out[t] = np.einsum("hi,hij->hj", r[t], bonus[:, :, None] * kv + S)
        S = decay * S + kv
    return out, S
