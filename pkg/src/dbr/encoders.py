"""Per-modality sequence encoders and shared/private decoupling.

All tensors are batched: sequences are ``(B, T, width)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import LayerNorm, Linear, Module, gaussian, zeros


class TCN(Module):
    """Stack of causal 1-D convolutions with tanh between layers.

    Layer ``l`` uses dilation ``2**l``; left padding keeps the sequence length.
    """

    def __init__(self, rng: np.random.Generator, d_in: int, d: int, n_layers: int = 2, kernel: int = 3):
        widths = [d_in] + [d] * n_layers
        self.kernels = [gaussian(rng, kernel, widths[i], widths[i + 1]) for i in range(n_layers)]
        self.biases = [zeros(d) for _ in range(n_layers)]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i, (w, b) in enumerate(zip(self.kernels, self.biases)):
            if i:
                h = ad.tanh(h)
            h = ad.conv1d(h, w, dilation=2**i) + b
        return h


class SequenceEncoder(Module):
    """TCN for acoustic/visual streams, a linear projection for language."""

    def __init__(self, rng, modality: str, d_in: int, d: int, tcn_layers: int = 2, kernel: int = 3):
        self.modality = modality
        if modality == "L":
            self.proj = Linear(rng, d_in, d)
        else:
            self.tcn = TCN(rng, d_in, d, tcn_layers, kernel)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] < 1:
            raise ShapeError("empty sequence")
        if self.modality == "L":
            return self.proj(x)
        return self.tcn(x)


class BranchEncoder(Module):
    """Linear(d -> d) -> tanh -> LayerNorm."""

    def __init__(self, rng, d: int):
        self.linear = Linear(rng, d, d)
        self.norm = LayerNorm(d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(ad.tanh(self.linear(x)))


@dataclass
class SharedPrivatePair:
    x_sha: Tensor
    x_pri: Tensor


class Decoupler(Module):
    def __init__(self, rng, d: int):
        self.d = d
        self.shared = BranchEncoder(rng, d)
        self.private = BranchEncoder(rng, d)

    def __call__(self, x: Tensor) -> SharedPrivatePair:
        if x.shape[-1] != self.d:
            raise ShapeError(f"decouple expects width {self.d}, got {x.shape[-1]}")
        return SharedPrivatePair(self.shared(x), self.private(x))


def _center_time(x: Tensor) -> Tensor:
    return x - x.mean(axis=1, keepdims=True)


def cross_covariance(a: Tensor, b: Tensor) -> Tensor:
    """Per-sample ``(d, d)`` covariance between time-centred ``a`` and ``b``."""
    T = a.shape[1]
    if T < 2:
        raise ValueError(f"covariance needs at least 2 time steps, got T={T}")
    return ad.scale(_center_time(a).swap_last() @ _center_time(b), 1.0 / (T - 1))


def md_loss(pairs: dict[str, SharedPrivatePair]) -> Tensor:
    """Entry-wise L1 norm of off-diagonal shared/private cross-covariance.

    Summed over modalities, averaged over the batch.
    """
    total = None
    for pair in pairs.values():
        cov = cross_covariance(pair.x_sha, pair.x_pri)
        d = cov.shape[-1]
        off = 1.0 - np.eye(d)
        per_sample = ad.absolute(cov * off).sum(axis=(1, 2))
        total = per_sample if total is None else total + per_sample
    return total.mean()
