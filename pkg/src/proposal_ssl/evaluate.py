"""Representation-quality evaluation: embeddings, clustering, probes."""

from __future__ import annotations

import numpy as np

from .augment import CorrespondenceMap, DropoutConfig, random_augment_params, sample_views
from .model import Model
from .objectives import sinkhorn_assign
from .pointcloud import remove_ground
from .proposals import generate_paired_proposals
from .synth import LabeledScene, cluster_metrics, linear_probe, proposal_labels
from .training import TrainConfig

__all__ = ["embed_scenes", "pair_similarity", "probe_report"]


def _identity_proposals(filtered, cfg: TrainConfig):
    ids = np.sort(filtered.ids)
    m = CorrespondenceMap(np.column_stack([ids, ids]))
    n = min(cfg.num_proposals, len(ids))
    ps, _ = generate_paired_proposals(filtered, filtered, filtered, m, n,
                                      cfg.proposal_radius, cfg.proposal_k)
    return ps


def embed_scenes(model: Model, scenes: list[LabeledScene], cfg: TrainConfig):
    """Unaugmented per-scene proposal embeddings, class logits, and labels."""
    z_rows, q_rows, label_rows = [], [], []
    for scene in scenes:
        filtered = remove_ground(scene.cloud, cfg.ground_filter)
        ps = _identity_proposals(filtered, cfg)
        y = model.encode_view(filtered, ps)
        z = model.project(y, mode="eval")
        q = model.predict(z)
        z_rows.append(z.data)
        q_rows.append(q.data)
        label_rows.append(proposal_labels(scene, ps))
    return (np.concatenate(z_rows), np.concatenate(q_rows),
            np.concatenate(label_rows))


def pair_similarity(model: Model, scenes: list[LabeledScene], cfg: TrainConfig,
                    seed: int = 0) -> tuple[float, float]:
    """Mean positive-pair and negative-pair cosine over augmented dual views."""
    rng = np.random.default_rng(seed)
    drop = DropoutConfig(cfg.total_sample, cfg.shared_sample)
    pos, neg = [], []
    for scene in scenes:
        filtered = remove_ground(scene.cloud, cfg.ground_filter)
        p1 = random_augment_params(rng)
        p2 = random_augment_params(rng)
        x1, x2, m = sample_views(filtered, drop, p1, p2, rng=rng)
        n = min(cfg.num_proposals, len(m))
        ps1, ps2 = generate_paired_proposals(filtered, x1, x2, m, n,
                                             cfg.proposal_radius, cfg.proposal_k)
        z1 = model.project(model.encode_view(x1, ps1), mode="eval").data
        z2 = model.project(model.encode_view(x2, ps2), mode="eval").data
        sims = z1 @ z2.T
        pos.append(np.diag(sims))
        if n > 1:
            neg.append(sims[~np.eye(n, dtype=bool)])
    pos_cos = float(np.concatenate(pos).mean())
    neg_cos = float(np.concatenate(neg).mean()) if neg else 0.0
    return pos_cos, neg_cos


def probe_report(model: Model, scenes: list[LabeledScene], cfg: TrainConfig,
                 split_seed: int = 0) -> dict:
    """Purity, NMI, linear-probe accuracy, and pair cosines for a model."""
    z, q, labels = embed_scenes(model, scenes, cfg)
    q_hat = sinkhorn_assign(q, cfg.sinkhorn_eps, cfg.sinkhorn_iters)
    hard = np.argmax(q_hat, axis=1)
    metrics = cluster_metrics(hard, labels)
    acc = linear_probe(z, labels, split_seed=split_seed)
    pos_cos, neg_cos = pair_similarity(model, scenes, cfg, seed=split_seed)
    return {
        "purity": metrics["purity"],
        "nmi": metrics["nmi"],
        "linear_probe_accuracy": acc,
        "pos_cos": pos_cos,
        "neg_cos": neg_cos,
        "num_proposals": int(len(labels)),
    }
