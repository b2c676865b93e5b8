"""Shared branch: temporal/structural factorisation with gated integration."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, LayerNorm, Linear, Module, gaussian, zeros

CORR_EPS = 1e-8


class LSTM(Module):
    """Single-direction LSTM; gate order (input, forget, cell, output)."""

    def __init__(self, rng, d_in: int, hidden: int):
        self.hidden = hidden
        self.w_ih = gaussian(rng, d_in, 4 * hidden)
        self.w_hh = gaussian(rng, hidden, 4 * hidden)
        self.bias = zeros(4 * hidden)

    def __call__(self, x: Tensor, reverse: bool = False) -> Tensor:
        B, T, _ = x.shape
        h_sz = self.hidden
        xw = x @ self.w_ih + self.bias
        steps = range(T - 1, -1, -1) if reverse else range(T)
        h = c = None
        outs: list[Tensor] = [None] * T  # type: ignore[list-item]
        for t in steps:
            pre = ad.slice_axis(xw, 1, t, t + 1).reshape(B, 4 * h_sz)
            if h is not None:
                pre = pre + h @ self.w_hh
            gates = ad.sigmoid(pre)
            i = ad.slice_axis(gates, 1, 0, h_sz)
            f = ad.slice_axis(gates, 1, h_sz, 2 * h_sz)
            o = ad.slice_axis(gates, 1, 3 * h_sz, 4 * h_sz)
            g = ad.tanh(ad.slice_axis(pre, 1, 2 * h_sz, 3 * h_sz))
            c = i * g if c is None else f * c + i * g
            h = o * ad.tanh(c)
            outs[t] = h
        return ad.stack(outs, axis=1)


class TemporalEncoder(Module):
    """LN(Linear(BiLSTM(x))), hidden size d//2 per direction by default."""

    def __init__(self, rng, d: int, hidden: int | None = None):
        hidden = hidden or max(1, d // 2)
        self.fwd = LSTM(rng, d, hidden)
        self.bwd = LSTM(rng, d, hidden)
        self.proj = Linear(rng, 2 * hidden, d)
        self.norm = LayerNorm(d)

    def __call__(self, x: Tensor) -> Tensor:
        both = ad.concat([self.fwd(x), self.bwd(x, reverse=True)], axis=-1)
        return self.norm(self.proj(both))


class StructuralEncoder(Module):
    """LN(Linear(MultiHead(x, x, x))) with scaled dot-product heads."""

    def __init__(self, rng, d: int, n_heads: int = 2):
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.w_q = gaussian(rng, d, d)
        self.w_k = gaussian(rng, d, d)
        self.w_v = gaussian(rng, d, d)
        self.proj = Linear(rng, d, d)
        self.norm = LayerNorm(d)

    def attend(self, x: Tensor) -> tuple[Tensor, Tensor]:
        B, T, d = x.shape
        H = self.n_heads
        dk = d // H

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, T, H, dk).transpose(0, 2, 1, 3)

        q, k, v = heads(x @ self.w_q), heads(x @ self.w_k), heads(x @ self.w_v)
        scores = ad.scale(q @ k.swap_last(), 1.0 / math.sqrt(dk))
        attn = ad.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        return ctx, attn

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward_with_attention(x)[0]

    def forward_with_attention(self, x: Tensor) -> tuple[Tensor, np.ndarray]:
        ctx, attn = self.attend(x)
        return self.norm(self.proj(ctx)), attn.data


@dataclass
class TsfOutput:
    h_temp: dict[str, Tensor]
    h_struct: dict[str, Tensor]
    z_fusion: Tensor
    gates: Tensor
    struct_attention: dict[str, np.ndarray]


class CrossStreamGate(Module):
    """K candidate MLP fusions mixed by a softmax gate."""

    def __init__(self, rng, n_modalities: int, d: int, k: int = 4):
        if k < 1:
            raise ValueError("K must be at least 1")
        width = n_modalities * d
        self.candidates = [MLP(rng, 2 * width, 2 * d, width) for _ in range(k)]
        self.gate = MLP(rng, 2 * width, 2 * d, k)

    def __call__(self, z_temp: Tensor, z_struct: Tensor) -> tuple[Tensor, Tensor]:
        joint = ad.concat([z_temp, z_struct], axis=-1)
        B = joint.shape[0]
        cands = ad.stack([mlp(joint) for mlp in self.candidates], axis=1)
        gates = ad.softmax(self.gate(joint), axis=-1)
        z = (cands * gates.reshape(B, len(self.candidates), 1)).sum(axis=1)
        return z, gates


class TSFBranch(Module):
    def __init__(self, rng, modalities: list[str], d: int, k: int = 4, n_heads: int = 2):
        self.modalities = list(modalities)
        self.temporal = {m: TemporalEncoder(rng, d) for m in modalities}
        self.structural = {m: StructuralEncoder(rng, d, n_heads) for m in modalities}
        self.cgi = CrossStreamGate(rng, len(modalities), d, k)

    def __call__(self, x_sha: dict[str, Tensor]) -> TsfOutput:
        h_temp, h_struct, attn = {}, {}, {}
        for m in self.modalities:
            h_temp[m] = self.temporal[m](x_sha[m])
            h_struct[m], attn[m] = self.structural[m].forward_with_attention(x_sha[m])
        z_temp = ad.concat([h_temp[m].mean(axis=1) for m in self.modalities], axis=-1)
        z_struct = ad.concat([h_struct[m].mean(axis=1) for m in self.modalities], axis=-1)
        z, gates = self.cgi(z_temp, z_struct)
        return TsfOutput(h_temp, h_struct, z, gates, attn)


def correlation(a: Tensor, b: Tensor, eps: float = CORR_EPS) -> Tensor:
    """Per-sample ``(d, d)`` Pearson cross-correlation along time.

    Column norms are floored at ``eps`` so constant columns give 0.
    """
    B, T, d = a.shape
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    num = ac.swap_last() @ bc
    na = ad.l2norm(ac, axis=1, eps=eps).reshape(B, d, 1)
    nb = ad.l2norm(bc, axis=1, eps=eps).reshape(B, 1, d)
    return num / (na * nb)


def tsf_decor_loss(h_temp: dict[str, Tensor], h_struct: dict[str, Tensor]) -> Tensor:
    terms = []
    for m in h_temp:
        if h_temp[m].shape[1] < 2:
            raise ValueError("decorrelation needs at least 2 time steps")
        corr = correlation(h_temp[m], h_struct[m])
        terms.append((corr * corr).sum(axis=(1, 2)).mean())
    return ad.stack(terms).mean()


def tsf_align_loss(h_temp: dict[str, Tensor], h_struct: dict[str, Tensor]) -> Tensor:
    total = None
    for feats in (h_temp, h_struct):
        mus = ad.stack([feats[m].mean(axis=(0, 1)) for m in feats])
        diff = mus - mus.mean(axis=0, keepdims=True)
        term = (diff * diff).sum(axis=1).mean()
        total = term if total is None else total + term
    return total


def tsf_loss(decor, align, alpha1: float, alpha2: float):
    if alpha1 < 0 or alpha2 < 0:
        raise ValueError("alpha weights must be non-negative")
    return alpha1 * decor + alpha2 * align
