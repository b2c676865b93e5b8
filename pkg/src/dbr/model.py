"""End-to-end dual-branch model, its loss assembly and branch-state capture."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .agpr import AGPRBranch, PrivatePooler
from .autodiff import NonFiniteError, Tensor
from .brf import BRF, build_modality_features
from .config import RunConfig
from .data import MODALITY_ORDER, ordered_modalities  # noqa: F401
from .encoders import Decoupler, SequenceEncoder, md_loss
from .nn import Linear, Module
from .tsf import TSFBranch, tsf_align_loss, tsf_decor_loss



@dataclass
class BranchState:
    """Detached numpy snapshot of every intermediate the diagnostics read."""

    modalities: list[str]
    shared: np.ndarray  # (B, M, d) shared slices of the fused shared vector
    z_pri: np.ndarray  # (B, M, d)
    z_hat: np.ndarray  # (B, M, d)
    tokens: np.ndarray  # (B, N, d) fusion tokens F
    fused: np.ndarray  # (B, d) representation fed to the head
    cgi_gates: np.ndarray | None = None  # (B, K)
    routing: np.ndarray | None = None  # (B, M, M)
    psi: np.ndarray | None = None  # (B, N)
    y: np.ndarray | None = None  # (B, N, d)
    forward_attention: np.ndarray | None = None  # (B, N, N)
    h_temp: dict[str, np.ndarray] = field(default_factory=dict)
    h_struct: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ForwardResult:
    output: Tensor  # (B,) regression scores or (B, C) logits
    losses: dict[str, Tensor]
    total: Tensor
    state: BranchState


def total_loss(task, md, tsf, agpr, flags: RunConfig | None = None):
    """``task + md + tsf + agpr`` with disabled terms contributing exactly 0."""
    flags = flags or RunConfig()
    total = task
    if flags.use_md_loss:
        total = total + flags.md_weight * md
    if flags.use_tsf and flags.use_tsf_loss:
        total = total + tsf
    if flags.use_agpr and flags.use_agpr_loss:
        total = total + agpr
    return total


def task_loss(output: Tensor, labels: np.ndarray, task: str) -> Tensor:
    if task == "regression":
        diff = output - np.asarray(labels, dtype=float)
        return (diff * diff).mean()
    labels = np.asarray(labels, dtype=int)
    onehot = np.zeros(output.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(ad.log_softmax(output, axis=-1) * onehot).sum(axis=-1).mean()


class DBRModel(Module):
    def __init__(self, config: RunConfig, modality_dims: dict[str, int], rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        self.modalities = ordered_modalities(modality_dims)
        if len(self.modalities) < 2:
            raise ValueError("at least two modalities are required")
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        d = config.d
        M = len(self.modalities)
        self.encoders = {
            m: SequenceEncoder(rng, m, modality_dims[m], d, config.tcn_layers, config.tcn_kernel)
            for m in self.modalities
        }
        self.decouplers = {m: Decoupler(rng, d) for m in self.modalities}
        if config.use_tsf:
            self.tsf = TSFBranch(rng, self.modalities, d, config.k, config.n_heads)
        if config.use_agpr:
            self.agpr = AGPRBranch(
                rng, self.modalities, d, config.gamma, config.lam, config.delta, config.detach_routing
            )
        else:
            self.poolers = {m: PrivatePooler(rng, d) for m in self.modalities}
        use_brf = config.use_brf and config.fusion_kind == "brf"
        self.brf = BRF(
            rng, M, d, config.brf_include_shared_token and use_brf, config.brf_per_modality_wf, attend=use_brf
        )
        if config.fusion_kind == "brf" and not config.use_brf:
            self.plain_fusion = Linear(rng, M * d, d)
        out_dim = 1 if config.task == "regression" else config.n_classes
        self.head = Linear(rng, d, out_dim)

    def __call__(self, batch: dict[str, np.ndarray], labels: np.ndarray | None = None) -> ForwardResult:
        return forward_pass(self, batch, labels)


def forward_pass(model: DBRModel, batch: dict[str, np.ndarray], labels: np.ndarray | None = None) -> ForwardResult:
    cfg = model.config
    mods = model.modalities
    missing = [m for m in mods if m not in batch]
    if missing:
        raise KeyError(f"batch is missing modalities {missing}")
    B = len(next(iter(batch.values())))
    if B == 0:
        raise ValueError("empty batch")

    pairs = {}
    for m in mods:
        x = model.encoders[m](Tensor(batch[m]))
        pairs[m] = model.decouplers[m](x)
    x_sha = {m: pairs[m].x_sha for m in mods}
    x_pri = {m: pairs[m].x_pri for m in mods}
    zero = Tensor(0.0)
    losses: dict[str, Tensor] = {"md": md_loss(pairs)}

    extra: dict = {}
    if cfg.use_tsf:
        tsf_out = model.tsf(x_sha)
        z_fusion = tsf_out.z_fusion
        decor = tsf_decor_loss(tsf_out.h_temp, tsf_out.h_struct)
        align = tsf_align_loss(tsf_out.h_temp, tsf_out.h_struct)
        losses.update(decor=decor, align=align, tsf=cfg.alpha1 * decor + cfg.alpha2 * align)
        extra["cgi_gates"] = tsf_out.gates.data
        extra["h_temp"] = {m: t.data for m, t in tsf_out.h_temp.items()}
        extra["h_struct"] = {m: t.data for m, t in tsf_out.h_struct.items()}
    else:
        z_fusion = ad.concat([x_sha[m].mean(axis=1) for m in mods], axis=-1)
        losses.update(decor=zero, align=zero, tsf=zero)

    if cfg.use_agpr:
        z_pri = model.agpr.pool(x_pri)
        routed = model.agpr.route(z_pri)
        z_hat = routed.z_hat
        ali, sep = model.agpr.losses(z_pri)
        losses.update(ali=ali, sep=sep, agpr=cfg.beta1 * ali + cfg.beta2 * sep)
        extra["routing"] = routed.routing.data
    else:
        z_pri = ad.stack([model.poolers[m](x_pri[m]) for m in mods], axis=1)
        z_hat = z_pri
        losses.update(ali=zero, sep=zero, agpr=zero)

    brf = model.brf
    if cfg.fusion_kind == "brf" and cfg.use_brf:
        fs = brf(z_fusion, z_hat)
        tokens, fused = fs.f_all, fs.y_fin
        extra.update(psi=fs.psi.data, y=fs.y.data, forward_attention=fs.forward_attention)
    else:
        tokens = brf.tokens(z_fusion, z_hat)
        N = tokens.shape[1]
        if cfg.fusion_kind == "add":
            fused = tokens.sum(axis=1)
        elif cfg.fusion_kind == "multiply":
            fused = ad.slice_axis(tokens, 1, 0, 1)
            for i in range(1, N):
                fused = fused * ad.slice_axis(tokens, 1, i, i + 1)
            fused = fused.reshape(B, -1)
        else:
            fused = model.plain_fusion(tokens.reshape(B, -1))

    output = model.head(fused)
    if cfg.task == "regression":
        output = output.reshape(B)
    if labels is not None:
        losses["task"] = task_loss(output, labels, cfg.task)
    else:
        losses["task"] = zero
    total = total_loss(losses["task"], losses["md"], losses["tsf"], losses["agpr"], cfg)
    if not np.isfinite(total.data):
        raise NonFiniteError("loss is not finite")

    shared = z_fusion.data.reshape(B, len(mods), -1)
    state = BranchState(
        modalities=list(mods),
        shared=shared,
        z_pri=z_pri.data,
        z_hat=z_hat.data,
        tokens=tokens.data,
        fused=fused.data,
        **extra,
    )
    return ForwardResult(output, losses, total, state)
