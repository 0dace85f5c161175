"""Per-point backbone and cross-attention proposal encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamGroup, Tensor, concat, constant, linear
from .pointcloud import PointCloud
from .proposals import ProposalSet

__all__ = [
    "BackboneConfig",
    "ProposalFeatures",
    "init_encoder_params",
    "backbone_features",
    "gather_proposal_features",
    "encode_proposal",
    "encode_proposals",
    "proposal_attention_weights",
]

DENOM_GUARD = 1e-8


@dataclass(frozen=True)
class BackboneConfig:
    mlp_widths: tuple = (64, 128)   # last width is the channel count C
    neighborhood_k: int = 8
    attention_mode: str = "linear_norm"  # linear_norm | softmax

    def __post_init__(self):
        if not self.mlp_widths or any(w <= 0 for w in self.mlp_widths):
            raise ValueError("mlp_widths must be positive")
        if self.attention_mode not in ("linear_norm", "softmax"):
            raise ValueError(f"unknown attention_mode: {self.attention_mode!r}")

    @property
    def channels(self) -> int:
        return self.mlp_widths[-1]


@dataclass
class ProposalFeatures:
    """One proposal's K feature rows and coordinates; the center is row 0."""

    features: Tensor        # (K, C)
    coords: np.ndarray      # (K, 3)
    center_row: int = 0


def init_encoder_params(params: ParamGroup, cfg: BackboneConfig,
                        rng: np.random.Generator) -> None:
    """Register backbone and attention-head weights on `params`."""
    c = cfg.channels
    in_dim = 3
    for i, width in enumerate(cfg.mlp_widths):
        params.add(f"backbone.mlp{i}.W", (in_dim, width), rng, fan_in=in_dim)
        params.add(f"backbone.mlp{i}.b", (width,), rng, fan_in=in_dim)
        in_dim = width
    params.add("backbone.post.W", (c, c), rng, fan_in=c)
    params.add("backbone.post.b", (c,), rng, fan_in=c)
    params.add("enc.theta.W", (c, c), rng, fan_in=c)
    params.add("enc.theta.b", (c,), rng, fan_in=c)
    params.add("enc.phi.W", (c + 3, c), rng, fan_in=c + 3)
    params.add("enc.phi.b", (c,), rng, fan_in=c + 3)
    # g and h are bias-free: attention weights sum to 1, so their biases
    # would shift every proposal identically and be cancelled by the
    # projection head's batch norm (dead parameters)
    params.add("enc.g.W", (c + 3, c), rng, fan_in=c + 3)
    params.add("enc.h.W", (c, c), rng, fan_in=c)


def _knn_rows(points: np.ndarray, k: int) -> np.ndarray:
    """(L, k) nearest-neighbor row indices (self included, stable ties)."""
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    k = min(k, len(points))
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def backbone_features(view: PointCloud, params: ParamGroup,
                      cfg: BackboneConfig) -> Tensor:
    """Per-point MLP + k-NN max-pool; output rows follow the point order."""
    if len(view) == 0:
        raise ValueError("backbone_features requires a non-empty view")
    h = constant(view.points)
    for i in range(len(cfg.mlp_widths)):
        h = linear(h, params[f"backbone.mlp{i}.W"], params[f"backbone.mlp{i}.b"]).relu()
    groups = _knn_rows(view.points, cfg.neighborhood_k)
    pooled = h.gather(groups).max_along(axis=1)
    return linear(pooled, params["backbone.post.W"], params["backbone.post.b"]).relu()


def _member_rows(proposals: ProposalSet, view: PointCloud) -> np.ndarray:
    rmap = view.id_to_row()
    try:
        return np.array([[rmap[int(pid)] for pid in row] for row in proposals.members],
                        dtype=np.int64)
    except KeyError as exc:
        raise RuntimeError(
            f"proposal member id {exc} not present in view "
            f"(correspondence bug)") from exc


def gather_proposal_features(f: Tensor, proposals: ProposalSet,
                             view: PointCloud) -> list[ProposalFeatures]:
    """Exact row lookup of backbone features per member; center at row 0."""
    rows = _member_rows(proposals, view)
    out = []
    for r in rows:
        out.append(ProposalFeatures(f.gather(r), view.points[r]))
    return out


def _exact_sum_offset(attn: np.ndarray) -> np.ndarray:
    """Ulp-scale per-row offsets making the exact row sums equal 1.

    Division rounding leaves each row's true sum a few ulp away from 1.
    Rewriting the smallest-magnitude entry as the correctly rounded value
    of (1 - sum of the others) puts the exact sum within half an ulp of 1,
    so the correctly rounded row sum (math.fsum) is 1.0 bit-exactly.
    """
    offset = np.zeros_like(attn)
    for i, row in enumerate(attn):
        if math.fsum(row) == 1.0:
            continue
        j = int(np.argmin(np.abs(row)))
        rest = np.delete(row, j)
        offset[i, j] = math.fsum([1.0, *(-rest)]) - row[j]
    return offset


def _attention_pieces(x_q: Tensor, feats: Tensor, coords: np.ndarray,
                      params: ParamGroup, mode: str) -> tuple[Tensor, Tensor]:
    """Attention weights and value vectors for one batch of proposals.

    x_q: (N, C) center features; feats: (N, K, C); coords: (N, K, 3)
    with the center at row 0 of each proposal.
    """
    n, k, c = feats.shape
    rel_feat = feats - x_q.reshape(n, 1, c)
    rel_coord = constant(coords - coords[:, 0:1, :])
    keys_in = concat([rel_feat, rel_coord], axis=2)

    w_q = linear(x_q, params["enc.theta.W"], params["enc.theta.b"])
    w_k = linear(keys_in, params["enc.phi.W"], params["enc.phi.b"])
    w_v = linear(keys_in, params["enc.g.W"])

    dots = (w_q.reshape(n, 1, c) * w_k).sum(axis=2)          # (N, K)
    if mode == "softmax":
        attn = dots.softmax(axis=1)
    else:
        denom = dots.sum(axis=1, keepdims=True)              # (N, 1)
        degenerate = (np.abs(denom.data) < DENOM_GUARD).astype(np.float64)
        safe = denom * constant(1.0 - degenerate) + constant(degenerate)
        attn = (dots / safe) * constant(1.0 - degenerate) \
            + constant(degenerate * (1.0 / k))
    offset = _exact_sum_offset(attn.data)
    if offset.any():
        # ulp-scale constant nudge, no gradient; see _exact_sum_offset
        attn = attn + constant(offset)
    return attn, w_v


def _attention(x_q: Tensor, feats: Tensor, coords: np.ndarray,
               params: ParamGroup, mode: str) -> Tensor:
    n, k, _ = feats.shape
    attn, w_v = _attention_pieces(x_q, feats, coords, params, mode)
    w_o = (attn.reshape(n, k, 1) * w_v).sum(axis=1)          # (N, C)
    return x_q + linear(w_o, params["enc.h.W"])


def proposal_attention_weights(f: Tensor, proposals: ProposalSet,
                               view: PointCloud, params: ParamGroup,
                               mode: str = "linear_norm") -> np.ndarray:
    """The (N, K) attention weight matrix for a view's proposals."""
    rows = _member_rows(proposals, view)
    feats = f.gather(rows)
    x_q = f.gather(rows[:, 0])
    coords = view.points[rows]
    attn, _ = _attention_pieces(x_q, feats, coords, params, mode)
    return attn.data.copy()


def encode_proposals(f: Tensor, proposals: ProposalSet, view: PointCloud,
                     params: ParamGroup, mode: str = "linear_norm") -> Tensor:
    """Encode every proposal of a view at once; returns (N, C)."""
    rows = _member_rows(proposals, view)
    feats = f.gather(rows)              # (N, K, C)
    x_q = f.gather(rows[:, 0])          # (N, C)
    coords = view.points[rows]
    return _attention(x_q, feats, coords, params, mode)


def encode_proposal(pf: ProposalFeatures, params: ParamGroup,
                    mode: str = "linear_norm") -> Tensor:
    """Single-proposal form of the attention encoder; returns (C,)."""
    k, c = pf.features.shape
    feats = pf.features.reshape(1, k, c)
    x_q = pf.features.gather(np.array([pf.center_row]))
    coords = pf.coords.reshape(1, k, 3)
    return _attention(x_q, feats, coords, params, mode).reshape(c)
