"""Projection/prediction heads, InfoNCE proposal loss, Sinkhorn clustering,
and the swapped cluster-consistency loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import BatchNormState, ParamGroup, Tensor, batch_norm, constant, linear

__all__ = [
    "LossWeights",
    "EmbeddingBatch",
    "ClusterBatch",
    "DegenerateEmbeddingError",
    "init_head_params",
    "project_embed",
    "predict_classes",
    "ipd_loss",
    "sinkhorn_assign",
    "ics_loss",
    "total_loss",
    "log_clamp_warnings",
]

LOG_FLOOR = np.log(1e-30)

# proposals whose supported log-probability had to be clamped, for diagnostics
log_clamp_warnings = {"count": 0}


class DegenerateEmbeddingError(RuntimeError):
    """Projection output collapsed to (near) zero norm."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature tau must be positive")


@dataclass(frozen=True)
class EmbeddingBatch:
    """N x C matrix of unit-norm proposal embeddings for one view."""

    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        object.__setattr__(self, "z", z)
        norms = np.linalg.norm(z, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("embedding rows must be unit norm")


@dataclass(frozen=True)
class ClusterBatch:
    """Pseudo-class embeddings and their detached Sinkhorn assignments."""

    q: np.ndarray       # (N, O)
    q_hat: np.ndarray   # (N, O), row-stochastic

    def __post_init__(self):
        q_hat = np.asarray(self.q_hat, dtype=np.float64)
        if (q_hat < 0).any():
            raise ValueError("assignments must be non-negative")
        if not np.allclose(q_hat.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("assignment rows must sum to 1")


def init_head_params(params: ParamGroup, channels: int, embed_dim: int,
                     cluster_count: int, rng: np.random.Generator) -> BatchNormState:
    """Register projection + predictor weights; returns the BN state."""
    # no bias on the first layer: the batch norm that follows absorbs it
    params.add("proj.l1.W", (channels, channels), rng, fan_in=channels)
    params.add_tensor("proj.bn.gamma", Tensor(np.ones(channels), requires_grad=True))
    params.add_tensor("proj.bn.beta", Tensor(np.zeros(channels), requires_grad=True))
    params.add("proj.l2.W", (channels, embed_dim), rng, fan_in=channels)
    params.add("proj.l2.b", (embed_dim,), rng, fan_in=channels)
    params.add("pred.W", (embed_dim, cluster_count), rng, fan_in=embed_dim)
    params.add("pred.b", (cluster_count,), rng, fan_in=embed_dim)
    return BatchNormState(channels)


def project_embed(y: Tensor, params: ParamGroup, bn_state: BatchNormState,
                  mode: str = "train") -> Tensor:
    """Two-layer projection head followed by l2 normalization."""
    single = y.data.ndim == 1
    if single:
        y = y.reshape(1, -1)
    h = linear(y, params["proj.l1.W"])
    h = batch_norm(h, params["proj.bn.gamma"], params["proj.bn.beta"], bn_state, mode)
    h = h.relu()
    out = linear(h, params["proj.l2.W"], params["proj.l2.b"])
    norms = np.linalg.norm(out.data, axis=1)
    if (norms < 1e-12).any():
        raise DegenerateEmbeddingError(
            "projection output has (near) zero norm; initialization collapsed")
    z = out.l2_normalize(axis=-1)
    return z.reshape(-1) if single else z


def predict_classes(z: Tensor, params: ParamGroup) -> Tensor:
    """Linear predictor mapping embeddings to pseudo-class logits."""
    return linear(z, params["pred.W"], params["pred.b"])


def _logsumexp_rows(x: Tensor) -> Tensor:
    m = constant(x.data.max(axis=1, keepdims=True))
    return (x - m).exp().sum(axis=1, keepdims=True).log() + m


def ipd_loss(z1: Tensor, z2: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over paired rows; negatives from the opposite view."""
    if z1.shape != z2.shape:
        raise ValueError(f"embedding shape mismatch: {z1.shape} vs {z2.shape}")
    n = z1.shape[0]
    eye = constant(np.eye(n))
    logits = z1.matmul(z2.transpose()) * (1.0 / tau)    # (N, N)

    def direction(lg: Tensor) -> Tensor:
        pos = (lg * eye).sum(axis=1, keepdims=True)
        return (_logsumexp_rows(lg) - pos).mean()

    return direction(logits) + direction(logits.transpose())


def sinkhorn_assign(q: np.ndarray, eps: float = 0.05, iters: int = 3) -> np.ndarray:
    """Balanced soft cluster assignments via Sinkhorn-Knopp row/col scaling.

    Columns are normalized to mass N/O and rows to mass 1, ending on a row
    normalization, so the output is exactly row-stochastic.
    """
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("sinkhorn_assign requires finite scores")
    n, o = q.shape
    scaled = (q - q.max(axis=1, keepdims=True)) / eps  # max-shift prevents overflow
    mat = np.exp(scaled)
    for _ in range(iters):
        mat *= (n / o) / mat.sum(axis=0, keepdims=True)
        mat /= mat.sum(axis=1, keepdims=True)
    if not np.all(np.isfinite(mat)):
        raise FloatingPointError("sinkhorn iteration diverged")
    return mat


def _log_softmax_rows(x: Tensor) -> Tensor:
    out = x - _logsumexp_rows(x)
    floored = out.data < LOG_FLOOR
    if floored.any():
        log_clamp_warnings["count"] += int(floored.sum())
        keep = constant(1.0 - floored.astype(np.float64))
        out = out * keep + constant(floored * LOG_FLOOR)
    return out


def ics_loss(q1: Tensor, q2: Tensor, q_hat1: np.ndarray,
             q_hat2: np.ndarray) -> Tensor:
    """Swapped prediction: view 1's assignments supervise view 2 and vice versa."""
    if q1.shape != q2.shape:
        raise ValueError(f"class-logit shape mismatch: {q1.shape} vs {q2.shape}")
    t1 = (constant(q_hat1) * _log_softmax_rows(q2)).sum(axis=1)
    t2 = (constant(q_hat2) * _log_softmax_rows(q1)).sum(axis=1)
    return -(t1.mean()) - (t2.mean())


def total_loss(l_ipd: Tensor, l_ics: Tensor, w: LossWeights) -> Tensor:
    return l_ipd * w.alpha + l_ics * w.beta
