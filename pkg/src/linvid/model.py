"""Trainable torch modules: wkv autograd op, RWKV block, video classifier."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .kernels import P_EMPTY, DecayParams, ShiftMixParams, wkv_backward_raw, wkv_forward_raw
from .rwkv import LN_EPS, BlockParams
from .vision import EncoderConfig, VisionEncoder

SHIFT_TARGETS = ("r", "k", "v")


def _flat(x):
    # (B, T, C) -> (T, B*C)
    B, T, C = x.shape
    return x.detach().permute(1, 0, 2).reshape(T, B * C).contiguous().cpu().numpy()


class WKVFunction(torch.autograd.Function):
    """wkv over ``(B, T, C)`` from a zero state; backward is the analytic
    reverse pass of the compiled kernel."""

    @staticmethod
    def forward(ctx, k, v, w, u):
        B, T, C = k.shape
        kk, vv = _flat(k), _flat(v)
        ww = np.tile(w.detach().cpu().numpy(), B)
        uu = np.tile(u.detach().cpu().numpy(), B)
        z = np.zeros(B * C, dtype=kk.dtype)
        out, _, _, _, saved = wkv_forward_raw(kk, vv, ww, uu, z, z, np.full_like(z, P_EMPTY), save=True)
        ctx.arrays = (kk, vv, ww, uu, saved, out)
        ctx.shape = (B, T, C)
        return torch.from_numpy(out).reshape(T, B, C).permute(1, 0, 2).to(k.dtype)

    @staticmethod
    def backward(ctx, gy):
        B, T, C = ctx.shape
        kk, vv, ww, uu, saved, out = ctx.arrays
        dk, dv, dw, du = wkv_backward_raw(kk, vv, ww, uu, saved, out, _flat(gy).astype(kk.dtype))

        def unflat(a):
            return torch.from_numpy(a).reshape(T, B, C).permute(1, 0, 2)

        return (unflat(dk), unflat(dv), torch.from_numpy(dw.reshape(B, C).sum(0)),
                torch.from_numpy(du.reshape(B, C).sum(0)))


def wkv(k, v, w, u):
    return WKVFunction.apply(k, v, w, u)


def _shift(x):
    # previous token, zero vector before the first
    return F.pad(x, (0, 0, 1, -1))


class RWKVBlock(nn.Module):
    """Torch twin of :func:`linvid.rwkv.rwkv_block_forward` (zero initial state)."""

    def __init__(self, d, seed=0, d_ff=None, data_dependent=True, dtype=torch.float32):
        super().__init__()
        p = BlockParams.random(d, seed, d_ff=d_ff, data_dependent=data_dependent)
        self.load_params(p, dtype)

    def load_params(self, p: BlockParams, dtype=torch.float32):
        def par(a):
            return nn.Parameter(torch.tensor(np.asarray(a), dtype=dtype))

        d = p.dim
        self.ln1 = nn.LayerNorm(d, eps=LN_EPS, dtype=dtype)
        self.ln2 = nn.LayerNorm(d, eps=LN_EPS, dtype=dtype)
        with torch.no_grad():
            self.ln1.weight.copy_(torch.tensor(p.ln1[0]))
            self.ln1.bias.copy_(torch.tensor(p.ln1[1]))
            self.ln2.weight.copy_(torch.tensor(p.ln2[0]))
            self.ln2.bias.copy_(torch.tensor(p.ln2[1]))
        self.data_dependent = p.shift.data_dependent
        self.mu = nn.ParameterDict({n: par(p.shift.mu[n]) for n in SHIFT_TARGETS})
        self.mix = nn.ParameterDict({n: par(m) for n, m in p.shift.mix_weights.items()})
        self.W_r, self.W_k, self.W_v, self.W_o = (par(x) for x in (p.W_r, p.W_k, p.W_v, p.W_o))
        self.log_w = par(np.log(np.maximum(p.decay.w, 1e-12)))
        self.u = par(p.decay.u)
        self.mu_c = par(p.mu_c)
        self.W_1, self.W_2 = par(p.W_1), par(p.W_2)

    def to_params(self):
        """Export as numpy :class:`BlockParams` (decay ``w = exp(log_w)``)."""

        def a(t):
            return t.detach().cpu().numpy().copy()

        mu = {n: np.clip(a(self.mu[n]), 0, 1) for n in SHIFT_TARGETS}
        return BlockParams(
            ln1=(a(self.ln1.weight), a(self.ln1.bias)), ln2=(a(self.ln2.weight), a(self.ln2.bias)),
            shift=ShiftMixParams(mu, self.data_dependent, {n: a(m) for n, m in self.mix.items()}),
            W_r=a(self.W_r), W_k=a(self.W_k), W_v=a(self.W_v), W_o=a(self.W_o),
            decay=DecayParams(np.exp(a(self.log_w)), a(self.u)), mu_c=np.clip(a(self.mu_c), 0, 1),
            W_1=a(self.W_1), W_2=a(self.W_2),
        )

    def _mu(self, name, h):
        mu = self.mu[name]
        if self.data_dependent and name in self.mix:
            return torch.sigmoid(torch.logit(mu.clamp(1e-6, 1 - 1e-6)) + h @ self.mix[name])
        return mu.clamp(0, 1)

    def forward(self, x):
        h = self.ln1(x)
        hp = _shift(h)
        xs = {n: h + self._mu(n, h) * (hp - h) for n in SHIFT_TARGETS}
        r = xs["r"] @ self.W_r
        k = xs["k"] @ self.W_k
        v = xs["v"] @ self.W_v
        y = wkv(k, v, torch.exp(self.log_w), self.u)
        x = x + (torch.sigmoid(r) * y) @ self.W_o
        h2 = self.ln2(x)
        xc = h2 + self.mu_c.clamp(0, 1) * (_shift(h2) - h2)
        return x + torch.relu(xc @ self.W_1) ** 2 @ self.W_2


class VideoClassifier(nn.Module):
    """Encoder -> sandwich prompt -> RWKV blocks -> class logits at the last token."""

    def __init__(self, enc: EncoderConfig, n_blocks=2, n_classes=4, vocab=256, seed=0, dtype=torch.float32,
                 data_dependent=True):
        super().__init__()
        self.enc_config = enc
        d = enc.d_llm
        self.encoder = VisionEncoder(enc, seed=seed, dtype=dtype)
        g = torch.Generator().manual_seed(seed + 1)
        self.embed = nn.Parameter(torch.randn(vocab, d, generator=g, dtype=dtype) * 0.5)
        self.blocks = nn.ModuleList(
            RWKVBlock(d, seed=seed + 10 + i, data_dependent=data_dependent, dtype=dtype) for i in range(n_blocks)
        )
        self.ln_out = nn.LayerNorm(d, dtype=dtype)
        self.head = nn.Parameter(torch.randn(d, n_classes, generator=g, dtype=dtype) * d**-0.5)

    def forward(self, pixels, prefix_ids, suffix_ids, removals=None, order="ascending", rng=None):
        pixels = np.asarray(pixels)
        B, Fr = pixels.shape[:2]
        toks, _, _, _ = self.encoder(pixels.reshape(B * Fr, *pixels.shape[2:]), removals, order, rng)
        vis = toks.reshape(B, Fr * toks.shape[1], toks.shape[2])
        pre = self.embed[list(prefix_ids)].expand(B, -1, -1)
        suf = self.embed[list(suffix_ids)].expand(B, -1, -1)
        x = torch.cat([pre, vis, suf], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.ln_out(x[:, -1]) @ self.head
