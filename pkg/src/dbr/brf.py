"""Bidirectional rebalancing fusion over modality tokens.

Tokens are stacked as ``(B, N, d)`` where ``N`` is the number of modalities,
or ``N = M + 1`` when a standalone shared token is appended.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import LayerNorm, Linear, Module, gaussian, zeros


def shared_slices(z_fusion: Tensor, n_modalities: int) -> Tensor:
    """Split ``(B, M*d)`` into ``(B, M, d)``; slice ``m`` belongs to modality ``m``."""
    B, width = z_fusion.shape
    if width % n_modalities:
        raise ShapeError(f"fused width {width} is not a multiple of M={n_modalities}")
    return z_fusion.reshape(B, n_modalities, width // n_modalities)


def build_modality_features(
    z_fusion: Tensor,
    z_hat: Tensor,
    w_f,
    include_shared_token: bool = False,
) -> Tensor:
    """``F_m = W_f [z_sha_m ; z_hat_m]`` for every modality.

    ``w_f`` is a callable (usually a shared :class:`Linear`) applied on the last
    axis.  With ``include_shared_token`` the modality tokens carry only the
    private half and one extra token carries the mean of the shared slices.
    """
    B, M, d = z_hat.shape
    if z_fusion.shape[-1] != M * d:
        raise ShapeError(f"z_fusion width {z_fusion.shape[-1]} != M*d = {M * d}")
    z_sha = shared_slices(z_fusion, M)
    if not include_shared_token:
        return w_f(ad.concat([z_sha, z_hat], axis=-1))
    private_tokens = w_f(ad.concat([Tensor(np.zeros((B, M, d))), z_hat], axis=-1))
    shared_mean = z_sha.mean(axis=1, keepdims=True)
    shared_token = w_f(ad.concat([shared_mean, Tensor(np.zeros((B, 1, d)))], axis=-1))
    return ad.concat([private_tokens, shared_token], axis=1)


@dataclass
class FusionState:
    f_all: Tensor  # (B, N, d)
    y: Tensor  # (B, N, d)
    y_bar: Tensor  # (B, d)
    logits: Tensor  # (B, N)
    psi: Tensor  # (B, N)
    y_fin: Tensor  # (B, d)
    forward_attention: np.ndarray  # (B, N, N), row i = token i attending over the stack
    backward_attention: np.ndarray  # (B, N, N), [b, i, m] weight of stack row i on token m


class BidirectionalAttention(Module):
    def __init__(self, rng, d: int, d_k: int | None = None):
        d_k = d_k or d
        self.d_k = d_k
        self.w_q = gaussian(rng, d, d_k)
        self.w_k = gaussian(rng, d, d_k)
        self.w_v = gaussian(rng, d, d)
        self.w_q_back = gaussian(rng, d, d_k)
        self.w_k_back = gaussian(rng, d, d_k)
        self.w_v_back = gaussian(rng, d, d)
        self.norm = LayerNorm(d)

    def __call__(self, f: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
        B, N, d = f.shape
        inv = 1.0 / math.sqrt(self.d_k)
        # forward: each token queries the whole stack
        q = f @ self.w_q
        k = f @ self.w_k
        v = f @ self.w_v
        attn_fwd = ad.softmax(ad.scale(q @ k.swap_last(), inv), axis=-1)
        f_to_all = attn_fwd @ v
        # backward: every stack row queries the single token m, rows averaged
        qb = f @ self.w_q_back
        kb = f @ self.w_k_back
        vb = f @ self.w_v_back
        scores = ad.scale(qb @ kb.swap_last(), inv).reshape(B, N, N, 1)
        attn_bwd = ad.softmax(scores, axis=-1)
        rows = attn_bwd * vb.reshape(B, 1, N, d)
        all_to_f = rows.mean(axis=1)
        y = self.norm(f + f_to_all + all_to_f)
        return y, attn_fwd.data, attn_bwd.data.reshape(B, N, N)


def global_context(y: Tensor) -> Tensor:
    return y.mean(axis=1)


class ContextGate(Module):
    """``psi = softmax_m(q . tanh(W_m [y_m ; y_bar] + bias_m))``."""

    def __init__(self, rng, n_tokens: int, d: int, d_att: int | None = None):
        d_att = d_att or d
        self.weights = gaussian(rng, n_tokens, 2 * d, d_att)
        self.biases = zeros(n_tokens, d_att)
        self.query = gaussian(rng, d_att, 1)

    def logits(self, y: Tensor, y_bar: Tensor) -> Tensor:
        B, N, d = y.shape
        ctx = y_bar.reshape(B, 1, d) * np.ones((1, N, 1))
        inp = ad.concat([y, ctx], axis=-1).reshape(B, N, 1, 2 * d)
        hidden = ad.tanh((inp @ self.weights).reshape(B, N, -1) + self.biases)
        return (hidden @ self.query).reshape(B, N)

    def __call__(self, y: Tensor, y_bar: Tensor) -> Tensor:
        return ad.softmax(self.logits(y, y_bar), axis=-1)


def context_gate_from_logits(logits: Tensor) -> Tensor:
    return ad.softmax(logits, axis=-1)


def fuse_final(psi: Tensor, y: Tensor) -> Tensor:
    """Scalar gate per token, broadcast over the feature axis and summed."""
    B, N, d = y.shape
    return (y * psi.reshape(B, N, 1)).sum(axis=1)


class BRF(Module):
    def __init__(
        self,
        rng,
        n_modalities: int,
        d: int,
        include_shared_token: bool = False,
        per_modality_wf: bool = False,
        attend: bool = True,
    ):
        self.n_modalities = n_modalities
        self.include_shared_token = include_shared_token
        n_tokens = n_modalities + (1 if include_shared_token else 0)
        if per_modality_wf:
            self.w_f_list = [Linear(rng, 2 * d, d) for _ in range(n_tokens)]
        else:
            self.w_f = Linear(rng, 2 * d, d)
        if attend:
            self.attention = BidirectionalAttention(rng, d)
            self.gate = ContextGate(rng, n_tokens, d)

    def project(self, x: Tensor) -> Tensor:
        if hasattr(self, "w_f"):
            return self.w_f(x)
        B, N, _ = x.shape
        return ad.concat(
            [lin(ad.slice_axis(x, 1, i, i + 1)) for i, lin in enumerate(self.w_f_list)],
            axis=1,
        )

    def tokens(self, z_fusion: Tensor, z_hat: Tensor) -> Tensor:
        return build_modality_features(z_fusion, z_hat, self.project, self.include_shared_token)

    def __call__(self, z_fusion: Tensor, z_hat: Tensor) -> FusionState:
        f = self.tokens(z_fusion, z_hat)
        y, fwd, bwd = self.attention(f)
        y_bar = global_context(y)
        logits = self.gate.logits(y, y_bar)
        psi = context_gate_from_logits(logits)
        return FusionState(f, y, y_bar, logits, psi, fuse_final(psi, y), fwd, bwd)
