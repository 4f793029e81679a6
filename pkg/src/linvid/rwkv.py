"""Numpy RWKV block and a recurrent decoder built from it.

Block layout (pre-norm residual)::

    h  = LN1(x);  x_r, x_k, x_v = token_shift(h, h_prev)
    x  = x + W_o (sigmoid(x_r W_r) * wkv(x_k W_k, x_v W_v))
    h2 = LN2(x);  x_c = lerp(h2, h2_prev, mu_c)
    x  = x + relu(x_c W_1)^2 W_2

This is the inference reference; ``linvid.model`` holds the trainable torch
twin and checks itself against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import (
    DecayParams,
    KernelInputError,
    ShiftMixParams,
    TimeMixInputs,
    WkvState,
    data_dependent_shift,
    lerp_shift,
    wkv_forward_raw,
    wkv_sequence,
)

LN_EPS = 1e-5


def layer_norm(x, g, b, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class BlockParams:
    ln1: tuple
    ln2: tuple
    shift: ShiftMixParams
    W_r: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    decay: DecayParams
    mu_c: np.ndarray
    W_1: np.ndarray
    W_2: np.ndarray

    @property
    def dim(self):
        return self.W_r.shape[0]

    @classmethod
    def random(cls, d, rng, d_ff=None, data_dependent=True, dtype=np.float64):
        d_ff = d_ff or 2 * d
        rng = np.random.default_rng(rng)

        def mat(a, b):
            return (rng.standard_normal((a, b)) / np.sqrt(a)).astype(dtype)

        mu = {name: rng.uniform(0.2, 0.8, d).astype(dtype) for name in ("r", "k", "v")}
        mix = {name: (0.1 * rng.standard_normal((d, d))).astype(dtype) for name in mu} if data_dependent else {}
        return cls(
            ln1=(np.ones(d, dtype), np.zeros(d, dtype)),
            ln2=(np.ones(d, dtype), np.zeros(d, dtype)),
            shift=ShiftMixParams(mu, data_dependent, mix),
            W_r=mat(d, d), W_k=mat(d, d), W_v=mat(d, d), W_o=mat(d, d),
            decay=DecayParams(rng.uniform(0.05, 2.0, d).astype(dtype), rng.uniform(-0.5, 0.5, d).astype(dtype)),
            mu_c=rng.uniform(0.2, 0.8, d).astype(dtype),
            W_1=mat(d, d_ff), W_2=mat(d_ff, d),
        )

    def arrays(self):
        """Flat name -> array mapping (for serialization)."""
        out = {
            "ln1.g": self.ln1[0], "ln1.b": self.ln1[1], "ln2.g": self.ln2[0], "ln2.b": self.ln2[1],
            "W_r": self.W_r, "W_k": self.W_k, "W_v": self.W_v, "W_o": self.W_o,
            "decay.w": self.decay.w, "decay.u": self.decay.u, "mu_c": self.mu_c,
            "W_1": self.W_1, "W_2": self.W_2,
        }
        for name, m in self.shift.mu.items():
            out[f"mu.{name}"] = m
        for name, m in self.shift.mix_weights.items():
            out[f"mix.{name}"] = m
        return out

    def astype(self, dtype):
        a = {k: v.astype(dtype) for k, v in self.arrays().items()}
        return BlockParams(
            ln1=(a["ln1.g"], a["ln1.b"]), ln2=(a["ln2.g"], a["ln2.b"]),
            shift=ShiftMixParams(
                {n: a[f"mu.{n}"] for n in self.shift.mu}, self.shift.data_dependent,
                {n: a[f"mix.{n}"] for n in self.shift.mix_weights},
            ),
            W_r=a["W_r"], W_k=a["W_k"], W_v=a["W_v"], W_o=a["W_o"],
            decay=DecayParams(a["decay.w"], a["decay.u"]), mu_c=a["mu_c"], W_1=a["W_1"], W_2=a["W_2"],
        )


def _prev(h, buf):
    return np.concatenate([buf[None].astype(h.dtype), h[:-1]], axis=0)


def rwkv_block_forward(x, state: WkvState, params: BlockParams):
    """Run a ``(T, d)`` token sequence through one block.

    Returns ``(y, new_state)``; the shift buffers in ``new_state`` hold the
    last token's normalised sublayer inputs.
    """
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None]
    if x.shape[-1] != params.dim or state.dim != params.dim:
        raise KernelInputError(f"input width {x.shape[-1]} / state width {state.dim} vs block width {params.dim}")
    h = layer_norm(x, *params.ln1)
    sh = data_dependent_shift(h, _prev(h, state.shift_tm), params.shift)
    r = sh["r"] @ params.W_r
    k = sh["k"] @ params.W_k
    v = sh["v"] @ params.W_v
    wkv, st = wkv_sequence(TimeMixInputs(r, k, v), params.decay, state)
    x = x + (sigmoid(r) * wkv) @ params.W_o
    h2 = layer_norm(x, *params.ln2)
    xc = lerp_shift(h2, _prev(h2, state.shift_cm), params.mu_c)
    x = x + np.maximum(xc @ params.W_1, 0) ** 2 @ params.W_2
    return x, WkvState(st.a, st.b, st.p, h[-1].copy(), h2[-1].copy())


def _step_block(x, state: WkvState, params: BlockParams):
    """Single-token fast path of :func:`rwkv_block_forward` (no validation)."""
    h = layer_norm(x, *params.ln1)
    sh = data_dependent_shift(h, state.shift_tm, params.shift)
    r = sh["r"] @ params.W_r
    k = sh["k"] @ params.W_k
    v = sh["v"] @ params.W_v
    out, a, b, p, _ = wkv_forward_raw(k[None], v[None], params.decay.w, params.decay.u, state.a, state.b, state.p)
    x = x + (sigmoid(r) * out[0]) @ params.W_o
    h2 = layer_norm(x, *params.ln2)
    xc = lerp_shift(h2, state.shift_cm, params.mu_c)
    x = x + np.maximum(xc @ params.W_1, 0) ** 2 @ params.W_2
    return x, WkvState(a, b, p, h, h2)


class RecurrentDecoder:
    """Stack of RWKV blocks with constant-size per-layer state."""

    def __init__(self, d_model, n_layers, seed=0, dtype=np.float64, data_dependent=True):
        rng = np.random.default_rng(seed)
        self.d_model = d_model
        self.dtype = np.dtype(dtype)
        self.blocks = [BlockParams.random(d_model, rng, data_dependent=data_dependent, dtype=dtype) for _ in range(n_layers)]
        self.states = self.initial_state()

    @property
    def n_layers(self):
        return len(self.blocks)

    def initial_state(self):
        return [WkvState.zeros(self.d_model, self.dtype) for _ in self.blocks]

    def reset(self):
        self.states = self.initial_state()

    def state_bytes(self):
        return sum(s.nbytes for s in self.states)

    def state_floats(self):
        return sum(s.nbytes for s in self.states) // self.dtype.itemsize

    def prefill(self, x):
        """Consume ``(T, d)`` inputs, advancing the state; returns the last hidden row."""
        x = np.asarray(x, dtype=self.dtype)
        for i, blk in enumerate(self.blocks):
            x, self.states[i] = rwkv_block_forward(x, self.states[i], blk)
        return x[-1]

    def step(self, x):
        x = np.asarray(x, dtype=self.dtype)
        for i, blk in enumerate(self.blocks):
            x, self.states[i] = _step_block(x, self.states[i], blk)
        return x
