"""RWKV time-mixing kernels.

The wkv recurrence keeps a numerator ``alpha`` and denominator ``beta`` per
channel::

    wkv_i   = (exp(u + k_i) v_i + alpha_{i-1}) / (exp(u + k_i) + beta_{i-1})
    alpha_i = exp(-w) alpha_{i-1} + exp(k_i) v_i
    beta_i  = exp(-w) beta_{i-1}  + exp(k_i)

Read literally this overflows once ``k`` grows past ~700 (double) or ~88
(single). The state is therefore stored exponent-shifted: ``a = alpha *
exp(-p)``, ``b = beta * exp(-p)`` with ``p`` the running maximum exponent.
Both forms agree in exact arithmetic.

The per-step loop lives in a compiled extension (``_wkv_ext``) when it was
built, otherwise in the numpy fallback ``_wkv_py``. ``BACKEND`` says which
one was picked; set ``LINVID_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

if os.environ.get("LINVID_PURE_PYTHON") == "1":
    from . import _wkv_py as _backend
else:
    try:
        from . import _wkv_ext as _backend
    except ImportError:  # extension not built
        from . import _wkv_py as _backend

BACKEND: str = _backend.BACKEND

# Finite stand-in for the -inf exponent of an empty state; exp(P_EMPTY - q)
# underflows to exactly 0 in both precisions, so the first token bypasses decay.
P_EMPTY = -1e38


class KernelInputError(ValueError):
    """Shapes or values handed to a kernel violate its preconditions."""


class NumericalError(ArithmeticError):
    """A kernel produced a non-finite value."""

    def __init__(self, message, step=None, channel=None):
        super().__init__(message)
        self.step = step
        self.channel = channel


def _first_bad(arr):
    idx = np.argwhere(~np.isfinite(arr))
    return tuple(int(i) for i in idx[0]) if len(idx) else None


def _require_finite(name, arr):
    bad = _first_bad(np.asarray(arr))
    if bad is not None:
        channel = bad[-1]
        raise KernelInputError(f"non-finite value in {name} at channel {channel}")


@dataclass
class DecayParams:
    """Per-channel decay rate ``w >= 0`` and current-token bonus ``u``."""

    w: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w)
        self.u = np.asarray(self.u)
        if self.w.shape != self.u.shape:
            raise KernelInputError(f"w shape {self.w.shape} != u shape {self.u.shape}")
        _require_finite("w", self.w)
        _require_finite("u", self.u)
        if np.any(self.w < 0):
            ch = int(np.argmax(self.w < 0))
            raise KernelInputError(f"decay w must be non-negative, channel {ch} has {self.w.flat[ch]}")

    @property
    def dim(self):
        return self.w.shape[-1]

    def astype(self, dtype):
        return DecayParams(self.w.astype(dtype), self.u.astype(dtype))


@dataclass
class WkvState:
    """Constant-size recurrent state of one RWKV block.

    ``a``/``b``/``p`` are the shifted wkv numerator, denominator and exponent
    offset; ``shift_tm``/``shift_cm`` hold the previous token's input to the
    time-mix and channel-mix sublayers.
    """

    a: np.ndarray
    b: np.ndarray
    p: np.ndarray
    shift_tm: np.ndarray
    shift_cm: np.ndarray

    @classmethod
    def zeros(cls, d, dtype=np.float64):
        z = np.zeros(d, dtype=dtype)
        return cls(z.copy(), z.copy(), np.full(d, P_EMPTY, dtype=dtype), z.copy(), z.copy())

    @property
    def dim(self):
        return self.a.shape[-1]

    def copy(self):
        return WkvState(*(np.array(x, copy=True) for x in self._arrays()))

    def naive(self):
        """Recover the unshifted ``(alpha, beta)`` pair."""
        scale = np.exp(self.p)
        return self.a * scale, self.b * scale

    def _arrays(self):
        return (self.a, self.b, self.p, self.shift_tm, self.shift_cm)

    @property
    def nbytes(self):
        return sum(x.nbytes for x in self._arrays())

    def to_bytes(self):
        return b"".join(np.ascontiguousarray(x).astype(x.dtype.newbyteorder("<")).tobytes() for x in self._arrays())

    def validate(self):
        for name, arr in zip(("a", "b", "p", "shift_tm", "shift_cm"), self._arrays()):
            _require_finite(f"state.{name}", arr)
        if np.any(self.b < 0):
            raise KernelInputError("state.b must be non-negative")


@dataclass
class TimeMixInputs:
    """Receptance, key and value per step, each ``(d,)`` or ``(T, d)``."""

    r: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k)
        self.v = np.asarray(self.v, dtype=self.k.dtype)
        self.r = np.ones_like(self.k) if self.r is None else np.asarray(self.r, dtype=self.k.dtype)
        if not (self.r.shape == self.k.shape == self.v.shape):
            raise KernelInputError(f"r/k/v shapes differ: {self.r.shape} {self.k.shape} {self.v.shape}")

    def __len__(self):
        return 1 if self.k.ndim == 1 else self.k.shape[0]

    def __getitem__(self, idx):
        return TimeMixInputs(self.r[idx], self.k[idx], self.v[idx])


@dataclass
class MatrixState:
    """Per-head ``(head_dim, head_dim)`` accumulators, shape ``(heads, N, N)``."""

    S: np.ndarray

    @classmethod
    def zeros(cls, n_heads, head_dim, dtype=np.float64):
        return cls(np.zeros((n_heads, head_dim, head_dim), dtype=dtype))

    @property
    def n_heads(self):
        return self.S.shape[0]

    @property
    def head_dim(self):
        return self.S.shape[1]

    @property
    def nbytes(self):
        return self.S.nbytes


@dataclass
class ShiftMixParams:
    """Token-shift interpolation weights, one vector per projected quantity.

    With ``data_dependent`` set, every target listed in ``mix_weights`` gets
    ``mu = sigmoid(logit(mu) + x_t @ W)`` instead of the static ``mu``.
    """

    mu: dict
    data_dependent: bool = False
    mix_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, m in self.mu.items():
            m = np.asarray(m)
            if np.any((m < 0) | (m > 1)) or not np.all(np.isfinite(m)):
                raise KernelInputError(f"static mu for {name!r} must lie in [0, 1]")
            self.mu[name] = m


def _logit(m):
    m = np.clip(m, 1e-6, 1 - 1e-6)
    return np.log(m) - np.log1p(-m)


def lerp_shift(x_t, x_prev, mu):
    """``x_t + mu * (x_prev - x_t)``."""
    return x_t + mu * (x_prev - x_t)


def data_dependent_shift(x_t, x_prev, params: ShiftMixParams):
    """Token-shifted input for every projection named in ``params.mu``."""
    x_t = np.asarray(x_t)
    x_prev = np.asarray(x_prev, dtype=x_t.dtype)
    if x_t.shape != x_prev.shape:
        raise KernelInputError(f"x_t shape {x_t.shape} != x_prev shape {x_prev.shape}")
    _require_finite("x_t", x_t)
    _require_finite("x_prev", x_prev)
    out = {}
    for name, mu in params.mu.items():
        if params.data_dependent and name in params.mix_weights:
            z = _logit(mu) + x_t @ params.mix_weights[name]
            mu = 1.0 / (1.0 + np.exp(-z))
        out[name] = lerp_shift(x_t, x_prev, mu.astype(x_t.dtype, copy=False))
    return out


def _check_dims(params, d):
    if params.dim != d:
        raise KernelInputError(f"decay params have dimension {params.dim}, inputs have {d}")


def wkv_step(state: WkvState, inp: TimeMixInputs, params: DecayParams):
    """Advance the recurrence by one token. Returns ``(wkv, new_state)``."""
    if inp.k.ndim != 1:
        raise KernelInputError("wkv_step takes a single time step; use wkv_sequence")
    _check_dims(params, inp.k.shape[0])
    _require_finite("k", inp.k)
    _require_finite("v", inp.v)
    state.validate()
    dt = inp.k.dtype
    out, a, b, p, _ = _backend.wkv_forward(
        inp.k[None, :], inp.v[None, :], params.w.astype(dt), params.u.astype(dt),
        state.a, state.b, state.p,
    )
    if not np.all(np.isfinite(out)):
        ch = _first_bad(out)[-1]
        raise NumericalError(f"non-finite wkv at channel {ch}", step=0, channel=ch)
    new = WkvState(a, b, p, state.shift_tm.copy(), state.shift_cm.copy())
    return out[0], new


def _as_sequence(seq):
    if isinstance(seq, TimeMixInputs):
        if seq.k.ndim == 1:
            seq = TimeMixInputs(seq.r[None], seq.k[None], seq.v[None])
        return seq
    seq = list(seq)
    if not seq:
        raise KernelInputError("empty sequence")
    return TimeMixInputs(
        np.stack([s.r for s in seq]), np.stack([s.k for s in seq]), np.stack([s.v for s in seq])
    )


def _raise_first_nonfinite(out, offset=0):
    bad = _first_bad(out)
    if bad is not None:
        step, ch = bad[0] + offset, bad[-1]
        raise NumericalError(f"non-finite wkv at step {step}, channel {ch}", step=step, channel=ch)


def wkv_sequence(seq, params: DecayParams, init: WkvState | None = None):
    """Fold :func:`wkv_step` over a ``(T, d)`` sequence.

    ``seq`` is a :class:`TimeMixInputs` with ``(T, d)`` arrays or a list of
    single-step inputs. Returns ``(outputs, final_state)``; only the output
    buffer grows with ``T``.
    """
    seq = _as_sequence(seq)
    if len(seq) == 0:
        raise KernelInputError("empty sequence")
    d = seq.k.shape[1]
    _check_dims(params, d)
    _require_finite("k", seq.k)
    _require_finite("v", seq.v)
    dt = seq.k.dtype
    init = WkvState.zeros(d, dt) if init is None else init
    init.validate()
    out, a, b, p, _ = _backend.wkv_forward(
        seq.k, seq.v, params.w.astype(dt), params.u.astype(dt), init.a, init.b, init.p
    )
    _raise_first_nonfinite(out)
    return out, WkvState(a, b, p, init.shift_tm.copy(), init.shift_cm.copy())


def _chunk_closed_form(k, v, w, u, a, b, p):
    """All outputs of one chunk plus the carried state, without a time loop.

    Every contribution to output ``t`` is an exponent plus a value: the carry
    ``(p - t w, a)``, earlier in-chunk tokens ``(k_j - (t-1-j) w, v_j)`` and
    the current token ``(u + k_t, v_t)``. Each row is normalised by its own
    maximum exponent.
    """
    L = k.shape[0]
    t_idx = np.arange(L)
    lag = (t_idx[:, None] - 1 - t_idx[None, :]).astype(k.dtype)  # (t, j)
    past = t_idx[None, :] < t_idx[:, None]
    ex_past = np.where(past[:, :, None], k[None, :, :] - lag[:, :, None] * w, -np.inf)
    ex_carry = p[None, :] - t_idx[:, None].astype(k.dtype) * w[None, :]
    ex_cur = u[None, :] + k
    m = np.maximum(np.maximum(ex_past.max(axis=1), ex_carry), ex_cur)
    e_past = np.exp(ex_past - m[:, None, :])
    e_carry = np.exp(ex_carry - m)
    e_cur = np.exp(ex_cur - m)
    num = (e_past * v[None, :, :]).sum(axis=1) + e_carry * a + e_cur * v
    den = e_past.sum(axis=1) + e_carry * b + e_cur
    out = num / den

    ex_tok = k - (L - 1 - t_idx)[:, None].astype(k.dtype) * w
    ex_c = p - L * w
    q = np.maximum(ex_tok.max(axis=0), ex_c)
    f_tok = np.exp(ex_tok - q)
    f_c = np.exp(ex_c - q)
    a_new = (f_tok * v).sum(axis=0) + f_c * a
    b_new = f_tok.sum(axis=0) + f_c * b
    return out, a_new, b_new, q


def wkv_chunked(seq, params: DecayParams, init: WkvState | None = None, chunk_size: int = 64):
    """Chunk-parallel evaluation with the same contract as :func:`wkv_sequence`.

    Inside a chunk every output is computed in closed form; chunks hand the
    state to each other. ``chunk_size=1`` runs the sequential kernel itself.
    """
    if not isinstance(chunk_size, (int, np.integer)) or chunk_size < 1:
        raise KernelInputError(f"chunk_size must be a positive integer, got {chunk_size!r}")
    if chunk_size == 1:
        return wkv_sequence(seq, params, init)
    seq = _as_sequence(seq)
    if len(seq) == 0:
        raise KernelInputError("empty sequence")
    d = seq.k.shape[1]
    _check_dims(params, d)
    _require_finite("k", seq.k)
    _require_finite("v", seq.v)
    dt = seq.k.dtype
    init = WkvState.zeros(d, dt) if init is None else init
    init.validate()
    w = params.w.astype(dt)
    u = params.u.astype(dt)
    a, b, p = init.a.astype(dt), init.b.astype(dt), init.p.astype(dt)
    T = len(seq)
    out = np.empty((T, d), dtype=dt)
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(0, T, chunk_size):
            e = min(s + chunk_size, T)
            out[s:e], a, b, p = _chunk_closed_form(seq.k[s:e], seq.v[s:e], w, u, a, b, p)
            _raise_first_nonfinite(out[s:e], offset=s)
    return out, WkvState(a, b, p, init.shift_tm.copy(), init.shift_cm.copy())


def _split_heads(x, n_heads):
    d = x.shape[-1]
    if n_heads < 1 or d % n_heads:
        raise KernelInputError(f"head count {n_heads} does not divide dimension {d}")
    return x.reshape(*x.shape[:-1], n_heads, d // n_heads)


def wkv_matrix_sequence(seq, params: DecayParams, state: MatrixState):
    """Matrix-state recurrence over ``(T, d)`` inputs.

    Per head: ``out = r @ (diag(exp(u)) k^T v + S)`` and then
    ``S <- diag(exp(-w)) S + k^T v``.
    """
    seq = _as_sequence(seq)
    H, N = state.n_heads, state.head_dim
    d = seq.k.shape[1]
    if H * N != d:
        raise KernelInputError(f"head geometry {H}x{N} does not match dimension {d}")
    _check_dims(params, d)
    for name in ("r", "k", "v"):
        _require_finite(name, getattr(seq, name))
    dt = seq.k.dtype
    out, S = _backend.wkv_matrix_forward(
        _split_heads(seq.r, H), _split_heads(seq.k, H), _split_heads(seq.v, H),
        _split_heads(params.w.astype(dt), H), _split_heads(params.u.astype(dt), H),
        state.S.astype(dt),
    )
    out = out.reshape(len(seq), d)
    _raise_first_nonfinite(out)
    return out, MatrixState(S)


def wkv_matrix_step(state: MatrixState, inp: TimeMixInputs, params: DecayParams):
    """One step of :func:`wkv_matrix_sequence`. Returns ``(out, new_state)``."""
    if inp.k.ndim != 1:
        raise KernelInputError("wkv_matrix_step takes a single time step")
    d = inp.k.shape[0]
    if state.n_heads < 1 or d % state.n_heads:
        raise KernelInputError(f"head count {state.n_heads} does not divide dimension {d}")
    out, new = wkv_matrix_sequence(inp, params, state)
    return out[0], new


def wkv_forward_raw(k, v, w, u, a, b, p, save=False):
    """Direct backend call on flat ``(T, C)`` arrays, no validation."""
    return _backend.wkv_forward(k, v, w, u, a, b, p, save)


def wkv_backward_raw(k, v, w, u, saved, out, gy):
    """Backend reverse pass matching :func:`wkv_forward_raw` with ``save=True``."""
    return _backend.wkv_backward(k, v, w, u, saved, out, gy)
