"""Full-pipeline gradient audit against central differences."""

from __future__ import annotations

import numpy as np

from .augment import DropoutConfig, sample_views, AugmentParams
from .autodiff import concat as t_concat, grad_check
from .model import Model, ModelConfig
from .objectives import ics_loss, ipd_loss, sinkhorn_assign, total_loss
from .pointcloud import PointCloud
from .proposals import generate_paired_proposals
from .training import TrainConfig

__all__ = ["pipeline_grad_audit"]


def _micro_frames(rng: np.random.Generator, n_frames: int = 2,
                  n_points: int = 48) -> list[PointCloud]:
    frames = []
    for _ in range(n_frames):
        pts = rng.uniform(-2.0, 2.0, size=(n_points, 3))
        pts[:, 2] += 2.5  # keep clear of any ground cut
        frames.append(PointCloud(pts, np.arange(n_points)))
    return frames


def pipeline_grad_audit(seed: int = 0, eps: float = 4e-6,
                        n_proposals: int = 8, k: int = 4,
                        channels: int = 16) -> float:
    """Max relative error of reverse-mode vs central-difference gradients.

    Builds a fixed micro-batch (2 frames, small proposals), freezes the
    Sinkhorn assignments at the base point (they are behind stop-gradient,
    so the analytic gradient treats them as constants), and checks every
    trainable tensor of the full loss graph.
    """
    rng = np.random.default_rng(seed)
    frames = _micro_frames(rng)
    cfg = TrainConfig(
        num_proposals=n_proposals, proposal_k=k, proposal_radius=1.5,
        total_sample=40, shared_sample=24,
        backbone_widths=(channels, channels), neighborhood_k=3,
        embed_dim=channels, cluster_count=8, epochs=2, warmup_epochs=1)
    model = Model(cfg.model_config, seed=seed)

    batch = []
    for pc in frames:
        p1 = AugmentParams(rotation_deg=35.0, scale=1.1)
        p2 = AugmentParams(rotation_deg=-80.0, scale=0.9, flip_x=True)
        x1, x2, m = sample_views(pc, DropoutConfig(cfg.total_sample, cfg.shared_sample),
                                 p1, p2, rng=rng)
        ps1, ps2 = generate_paired_proposals(pc, x1, x2, m, n_proposals,
                                             cfg.proposal_radius, cfg.proposal_k)
        batch.append((x1, x2, ps1, ps2))

    w = cfg.loss_weights
    frozen_q_hat: dict = {}

    def forward():
        y1 = t_concat([model.encode_view(x1, p1_) for x1, _, p1_, _ in batch], axis=0)
        y2 = t_concat([model.encode_view(x2, p2_) for _, x2, _, p2_ in batch], axis=0)
        n = y1.shape[0]
        y_all = t_concat([y1, y2], axis=0)
        z_all = model.project(y_all, mode="train")
        z1 = z_all.gather(np.arange(n))
        z2 = z_all.gather(np.arange(n, 2 * n))
        q_all = model.predict(z_all)
        if "q_hat" not in frozen_q_hat:
            frozen_q_hat["q_hat"] = sinkhorn_assign(
                q_all.stop_gradient().data, cfg.sinkhorn_eps, cfg.sinkhorn_iters)
        q_hat = frozen_q_hat["q_hat"]
        q1 = q_all.gather(np.arange(n))
        q2 = q_all.gather(np.arange(n, 2 * n))
        return total_loss(ipd_loss(z1, z2, w.tau),
                          ics_loss(q1, q2, q_hat[:n], q_hat[n:]), w)

    worst = 0.0
    for name, tensor in model.params.trainable_items():
        model.params.zero_grad()
        err = grad_check(lambda _t: forward(), tensor, eps=eps)
        worst = max(worst, err)
    return worst
