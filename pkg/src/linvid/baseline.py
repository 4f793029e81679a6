"""Causal softmax-attention comparator and closed-form memory accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .rwkv import layer_norm

VARIANTS = ("kv-cache", "rwkv4-state", "rwkv5-state")


class KvCache:
    """Per-layer key/value store that grows by one row per decoded token.

    Storage is over-allocated (doubling); ``keys(l)``/``values(l)`` are views
    of the first ``length`` rows, and ``nbytes`` reports only those.
    """

    def __init__(self, n_layers, d, dtype=np.float64, capacity=16, ledger=None, tag="kv-cache"):
        self.n_layers = n_layers
        self.d = d
        self.dtype = np.dtype(dtype)
        self._k = [np.empty((capacity, d), self.dtype) for _ in range(n_layers)]
        self._v = [np.empty((capacity, d), self.dtype) for _ in range(n_layers)]
        self._len = [0] * n_layers
        self.ledger = ledger
        self.tag = tag

    def __len__(self):
        return self._len[0]

    def length(self, layer=0):
        return self._len[layer]

    def keys(self, layer=0):
        return self._k[layer][: self._len[layer]]

    def values(self, layer=0):
        return self._v[layer][: self._len[layer]]

    @property
    def nbytes(self):
        return 2 * sum(self._len) * self.d * self.dtype.itemsize

    def _report(self):
        if self.ledger is not None:
            self.ledger.set(self.tag, self.nbytes)

    def _grow(self, layer, need):
        cap = self._k[layer].shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for store in (self._k, self._v):
            buf = np.empty((new_cap, self.d), self.dtype)
            buf[: self._len[layer]] = store[layer][: self._len[layer]]
            store[layer] = buf

    def append(self, k, v, layer=0):
        n = self._len[layer]
        self._grow(layer, n + 1)
        self._k[layer][n] = k
        self._v[layer][n] = v
        self._len[layer] = n + 1
        self._report()

    def extend(self, K, V, layer=0):
        n = self._len[layer]
        m = len(K)
        self._grow(layer, n + m)
        self._k[layer][n : n + m] = K
        self._v[layer][n : n + m] = V
        self._len[layer] = n + m
        self._report()

    def truncate(self, length):
        self._len = [min(n, length) for n in self._len]
        self._report()


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def causal_attention_step(cache: KvCache, q, k, v, layer=0):
    """Attend from ``q`` over every cached position plus ``(k, v)``.

    ``(k, v)`` is appended to the cache (single owner, updated in place).
    Returns ``(out, cache)``.
    """
    q = np.asarray(q)
    if not (q.shape == np.shape(k) == np.shape(v) == (cache.d,)):
        raise ValueError(f"q/k/v must all have shape ({cache.d},), got {q.shape} {np.shape(k)} {np.shape(v)}")
    cache.append(k, v, layer)
    K = cache.keys(layer)
    V = cache.values(layer)
    w = _softmax(K @ q / np.sqrt(cache.d))
    return w @ V, cache


def causal_attention_full(Q, K, V):
    """Quadratic masked attention over a whole ``(T, d)`` sequence."""
    T, d = Q.shape
    s = Q @ K.T / np.sqrt(d)
    s = np.where(np.tril(np.ones((T, T), dtype=bool)), s, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(axis=1, keepdims=True)) @ V


class AttentionDecoder:
    """Minimal pre-norm decoder (single-head attention + ReLU^2 MLP) matched
    to :class:`linvid.rwkv.RecurrentDecoder` in width and depth."""

    def __init__(self, d_model, n_layers, seed=0, dtype=np.float64, ledger=None):
        rng = np.random.default_rng(seed)
        self.d_model = d_model
        self.dtype = np.dtype(dtype)
        d = d_model

        def mat(a, b):
            return (rng.standard_normal((a, b)) / np.sqrt(a)).astype(dtype)

        self.layers = [
            dict(Wq=mat(d, d), Wk=mat(d, d), Wv=mat(d, d), Wo=mat(d, d), W1=mat(d, 2 * d), W2=mat(2 * d, d),
                 g=np.ones(d, dtype), b=np.zeros(d, dtype))
            for _ in range(n_layers)
        ]
        self.cache = KvCache(n_layers, d, dtype, ledger=ledger)

    @property
    def n_layers(self):
        return len(self.layers)

    def step(self, x):
        x = np.asarray(x, dtype=self.dtype)
        for li, L in enumerate(self.layers):
            h = layer_norm(x, L["g"], L["b"])
            att, _ = causal_attention_step(self.cache, h @ L["Wq"], h @ L["Wk"], h @ L["Wv"], li)
            x = x + att @ L["Wo"]
            h = layer_norm(x, L["g"], L["b"])
            x = x + np.maximum(h @ L["W1"], 0) ** 2 @ L["W2"]
        return x

    def prefill(self, X):
        """Exact causal forward over ``(T, d)`` inputs, filling the cache."""
        X = np.asarray(X, dtype=self.dtype)
        for li, L in enumerate(self.layers):
            h = layer_norm(X, L["g"], L["b"])
            Q, K, V = h @ L["Wq"], h @ L["Wk"], h @ L["Wv"]
            if self.cache.length(li):
                raise ValueError("prefill expects an empty cache")
            self.cache.extend(K, V, li)
            X = X + causal_attention_full(Q, K, V) @ L["Wo"]
            h = layer_norm(X, L["g"], L["b"])
            X = X + np.maximum(h @ L["W1"], 0) ** 2 @ L["W2"]
        return X[-1]

    def fill_synthetic(self, T, rng):
        """Populate every layer's cache with ``T`` random rows.

        Per-step cost depends only on cache length, so latency measurements
        at long prefixes skip the quadratic exact prefill.
        """
        for li in range(self.n_layers):
            self.cache.extend(
                rng.standard_normal((T, self.d_model)).astype(self.dtype),
                rng.standard_normal((T, self.d_model)).astype(self.dtype),
                li,
            )


@dataclass
class MemoryModel:
    d_model: int
    n_layers: int
    bytes_per_scalar: int = 2
    variant: str = "kv-cache"
    n_heads: int = 1

    def __post_init__(self):
        if self.d_model < 1 or self.n_layers < 1 or self.bytes_per_scalar < 1 or self.n_heads < 1:
            raise ValueError("memory model dimensions must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads {self.n_heads} does not divide d_model {self.d_model}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)


def kv_cache_floats(model: MemoryModel, T):
    """Scalars held by a KV cache after ``T`` tokens: keys + values, all layers."""
    if T < 0:
        raise ValueError("T must be non-negative")
    return 2 * T * model.d_model * model.n_layers


def recurrent_state_floats(model: MemoryModel):
    """Scalars held by the recurrent state; there is no sequence-length input."""
    if model.variant == "rwkv5-state":
        return (model.n_heads * model.head_dim**2 + 2 * model.d_model) * model.n_layers
    return (3 + 2) * model.d_model * model.n_layers


def crossover_tokens(kv_model: MemoryModel, state_model: MemoryModel, factor=34.0):
    """Smallest ``T`` with ``kv_cache_floats > factor * recurrent_state_floats``."""
    target = factor * recurrent_state_floats(state_model)
    per_token = 2 * kv_model.d_model * kv_model.n_layers
    return int(target // per_token) + 1
