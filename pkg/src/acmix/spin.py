"""Swapped-prediction objective over learnable cluster prototypes.

Frame embeddings of both views are projected onto the unit sphere, scored
against ``K`` unit-norm prototypes, and turned into soft codes with
log-domain Sinkhorn iterations that split the pooled batch equally across
clusters. Each view then predicts the other view's codes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import log_softmax, logsumexp
from torch import nn

from .exceptions import ConfigError, InvariantError, ShapeError


@dataclass(frozen=True)
class SpinConfig:
    K: int = 64
    proj_dim: int = 64
    temp: float = 0.1
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.temp <= 0 or self.sinkhorn_eps <= 0:
            raise ConfigError("temp and sinkhorn_eps must be positive")
        if self.sinkhorn_iters < 1:
            raise ConfigError("sinkhorn_iters must be >= 1")


class SpinHead(nn.Module):
    """Bias-free linear projection plus ``K`` unit-norm prototypes."""

    def __init__(self, d_model: int, cfg: SpinConfig = SpinConfig()):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed + 7919)
        self.proj = nn.Parameter(torch.randn(cfg.proj_dim, d_model, generator=gen) * math.sqrt(1.0 / d_model))
        protos = torch.randn(cfg.K, cfg.proj_dim, generator=gen)
        self.prototypes = nn.Parameter(protos / protos.norm(dim=1, keepdim=True))

    @torch.no_grad()
    def renormalize(self) -> None:
        self.prototypes.div_(self.prototypes.norm(dim=1, keepdim=True).clamp_min(1e-12))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"spin/{k}": v.detach().cpu().numpy().copy() for k, v in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        with torch.no_grad():
            for k, v in self.named_parameters():
                v.copy_(torch.as_tensor(arrays[f"spin/{k}"], dtype=v.dtype))


def project(head: SpinHead, embeddings) -> torch.Tensor:
    """Unit-norm projections ``Z``; an all-zero projection maps to ``e_1``."""
    emb = torch.as_tensor(embeddings, dtype=head.proj.dtype)
    if emb.shape[-1] != head.proj.shape[1]:
        raise ShapeError(f"embedding dim {emb.shape[-1]} != projection input {head.proj.shape[1]}")
    z = emb @ head.proj.T
    norm = z.norm(dim=-1, keepdim=True)
    degenerate = norm < 1e-12
    unit = z / torch.where(degenerate, torch.ones_like(norm), norm)
    e1 = torch.zeros_like(unit)
    e1[..., 0] = 1.0
    return torch.where(degenerate, e1, unit)


def scores(head: SpinHead, Z) -> torch.Tensor:
    return torch.as_tensor(Z, dtype=head.prototypes.dtype) @ head.prototypes.T / head.cfg.temp


def assign_codes(S, cfg: SpinConfig) -> np.ndarray:
    """Equal-partition soft codes for score matrix ``S`` [N x K].

    Log-domain Sinkhorn on ``exp(S / eps)``: each iteration rescales columns
    to sum to N/K and then rows to sum to 1, so the returned rows are exact
    distributions and the column sums approach N/K.
    """
    log_q = np.asarray(S, dtype=np.float64) / cfg.sinkhorn_eps
    n, k = log_q.shape
    log_col = math.log(n / k)
    for _ in range(cfg.sinkhorn_iters):
        log_q = log_q - logsumexp(log_q, axis=0, keepdims=True) + log_col
        log_q = log_q - logsumexp(log_q, axis=1, keepdims=True)
    return np.exp(log_q)


def column_residual(q: np.ndarray) -> float:
    """L1 distance of the column sums of ``q`` from the equal partition N/K."""
    n, k = q.shape
    return float(np.abs(q.sum(axis=0) - n / k).sum())


def _check_codes(q: np.ndarray, name: str) -> None:
    bad = np.abs(q.sum(axis=1) - 1.0) > 1e-6
    if bad.any():
        raise InvariantError(f"{name}: {int(bad.sum())} code rows do not sum to 1")


def swapped_loss(S1, S2, q1, q2) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric swapped-prediction cross entropy and its exact gradients.

    ``loss = 0.5 * mean_n [CE(q2_n, softmax(S1_n)) + CE(q1_n, softmax(S2_n))]``
    and ``dloss/dS1 = (softmax(S1) - q2) / (2N)`` (likewise for ``S2``).
    """
    S1, S2, q1, q2 = (np.asarray(a, dtype=np.float64) for a in (S1, S2, q1, q2))
    if not (S1.shape == S2.shape == q1.shape == q2.shape) or S1.ndim != 2:
        raise ShapeError(f"shape mismatch: {S1.shape}, {S2.shape}, {q1.shape}, {q2.shape}")
    _check_codes(q1, "q1")
    _check_codes(q2, "q2")
    n = S1.shape[0]
    lp1, lp2 = log_softmax(S1, axis=1), log_softmax(S2, axis=1)
    loss = 0.5 * float(np.mean(-(q2 * lp1).sum(1) - (q1 * lp2).sum(1)))
    g1 = (np.exp(lp1) - q2) / (2 * n)
    g2 = (np.exp(lp2) - q1) / (2 * n)
    return loss, g1, g2


class SwappedLoss(torch.autograd.Function):
    """Autograd wrapper around :func:`swapped_loss` (codes are constants)."""

    @staticmethod
    def forward(ctx, S1, S2, q1, q2):
        loss, g1, g2 = swapped_loss(S1.detach().numpy(), S2.detach().numpy(), q1, q2)
        ctx.save_for_backward(torch.as_tensor(g1, dtype=S1.dtype), torch.as_tensor(g2, dtype=S2.dtype))
        return S1.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad):
        g1, g2 = ctx.saved_tensors
        return grad * g1, grad * g2, None, None


def view_scores(head: SpinHead, emb1: torch.Tensor, emb2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Prototype scores for two aligned views, centred on their pooled mean.

    Encoder outputs share a large common direction. Without centring every
    projection lands near the same prototype mixture, the codes go uniform
    and the swapped loss settles at log K.
    """
    centre = torch.cat([emb1, emb2]).mean(0, keepdim=True)
    return scores(head, project(head, emb1 - centre)), scores(head, project(head, emb2 - centre))


def spin_loss(head: SpinHead, emb1: torch.Tensor, emb2: torch.Tensor) -> tuple[torch.Tensor, np.ndarray, np.ndarray]:
    """Loss for two aligned sets of frame embeddings [N x d].

    Codes are computed once over both views pooled together, from the
    cosine similarities (scores times temperature).
    """
    s1, s2 = view_scores(head, emb1, emb2)
    n = s1.shape[0]
    pooled = torch.cat([s1, s2]).detach().numpy() * head.cfg.temp
    q = assign_codes(pooled, head.cfg)
    q1, q2 = q[:n], q[n:]
    return SwappedLoss.apply(s1, s2, q1, q2), q1, q2
