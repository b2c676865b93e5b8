"""Private branch: anchor-guided routing between modality-specific vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module, param

COS_EPS = 1e-8


def init_anchors(rng: np.random.Generator, n_modalities: int, d: int, std: float = 0.1, offset: float = 1.0) -> np.ndarray:
    """Gaussian anchors, each pushed along its own orthonormal direction."""
    noise = rng.normal(0.0, std, size=(n_modalities, d))
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    dirs = np.stack([basis[:, m % d] for m in range(n_modalities)])
    return noise + offset * dirs


class PrivatePooler(Module):
    """Temporal mean pool followed by Linear + tanh."""

    def __init__(self, rng, d: int):
        self.linear = Linear(rng, d, d)

    def __call__(self, x_pri: Tensor) -> Tensor:
        return ad.tanh(self.linear(x_pri.mean(axis=1)))


@dataclass
class PrivateState:
    z_pri: Tensor  # (B, M, d)
    z_hat: Tensor  # (B, M, d)
    routing: Tensor  # (B, M, M): routing[b, n, m] = w_{n->m}, zero diagonal
    similarity: Tensor  # (B, M, M): s_{n->m}


def cosine_to_anchors(z: Tensor, anchors: Tensor, eps: float = COS_EPS) -> Tensor:
    """``s[b, n, m] = cos(z[b, n], anchors[m])`` with norms floored at eps."""
    zn = z / ad.l2norm(z, axis=-1, eps=eps, keepdims=True)
    bn = anchors / ad.l2norm(anchors, axis=-1, eps=eps, keepdims=True)
    return zn @ bn.swap_last()


def route_private(
    z: Tensor,
    anchors: Tensor,
    gamma: float = 1.0,
    lam: float = 0.5,
    detach_routing: bool = False,
) -> PrivateState:
    """Borrow private content from other modalities with anchor-cosine weights.

    ``z`` is ``(B, M, d)``.  Incoming weights to modality ``m`` are a softmax at
    temperature ``gamma`` over donors ``n != m``; the updated vector is
    ``z_m + lam * sum_n w[n, m] z_n``.
    """
    M = z.shape[1]
    if M < 2:
        raise ValueError("routing needs at least two modalities")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    s = cosine_to_anchors(z, anchors)
    donors = ~np.eye(M, dtype=bool)
    w = ad.softmax(ad.scale(s, gamma), axis=1, mask=donors)
    w_used = w.detach() if detach_routing else w
    borrowed = w_used.swap_last() @ z
    z_hat = z + ad.scale(borrowed, lam)
    return PrivateState(z, z_hat, w, s)


def _sq_dist_to_anchors(z: Tensor, anchors: Tensor) -> Tensor:
    """``D[b, m, n] = ||z[b, m] - anchors[n]||^2``."""
    B, M, d = z.shape
    diff = z.reshape(B, M, 1, d) - anchors.reshape(1, 1, anchors.shape[0], d)
    return (diff * diff).sum(axis=-1)


def agpr_ali_loss(z: Tensor, anchors: Tensor) -> Tensor:
    """Sum over modalities of ``||z_m - b_m||^2``, averaged over the batch."""
    diff = z - anchors
    return (diff * diff).sum(axis=(1, 2)).mean()


def agpr_sep_loss(z: Tensor, anchors: Tensor, delta: float = 0.2) -> Tensor:
    """Hinge ``max(0, delta + ||z_m - b_m||^2 - ||z_m - b_n||^2)`` over n != m."""
    if delta < 0:
        raise ValueError("margin must be non-negative")
    B, M, _ = z.shape
    dist = _sq_dist_to_anchors(z, anchors)
    eye = np.eye(M)
    own = (dist * eye).sum(axis=-1, keepdims=True)
    hinge = ad.relu(ad.shift(own - dist, delta))
    return (hinge * (1.0 - eye)).sum(axis=(1, 2)).mean()


def agpr_loss(ali, sep, beta1: float, beta2: float):
    if beta1 < 0 or beta2 < 0:
        raise ValueError("beta weights must be non-negative")
    return beta1 * ali + beta2 * sep


class AGPRBranch(Module):
    def __init__(self, rng, modalities: list[str], d: int, gamma=1.0, lam=0.5, delta=0.2, detach_routing=False):
        self.modalities = list(modalities)
        self.poolers = {m: PrivatePooler(rng, d) for m in modalities}
        self.anchors = param(init_anchors(rng, len(modalities), d))
        self.gamma = gamma
        self.lam = lam
        self.delta = delta
        self.detach_routing = detach_routing

    def pool(self, x_pri: dict[str, Tensor]) -> Tensor:
        return ad.stack([self.poolers[m](x_pri[m]) for m in self.modalities], axis=1)

    def route(self, z: Tensor) -> PrivateState:
        return route_private(z, self.anchors, self.gamma, self.lam, self.detach_routing)

    def losses(self, z: Tensor) -> tuple[Tensor, Tensor]:
        return agpr_ali_loss(z, self.anchors), agpr_sep_loss(z, self.anchors, self.delta)
