"""Whole-network container: parameters, batch-norm state, forward pieces."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import BatchNormState, ParamGroup, Tensor
from .encoder import (BackboneConfig, backbone_features, encode_proposals,
                      init_encoder_params)
from .objectives import init_head_params, predict_classes, project_embed
from .pointcloud import PointCloud
from .proposals import ProposalSet

__all__ = ["ModelConfig", "Model"]


@dataclass(frozen=True)
class ModelConfig:
    backbone_widths: tuple = (64, 128)
    neighborhood_k: int = 8
    attention_mode: str = "linear_norm"
    embed_dim: int = 128
    cluster_count: int = 128

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.backbone_widths, self.neighborhood_k,
                              self.attention_mode)


class Model:
    """Backbone + proposal encoder + projection and prediction heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParamGroup()
        rng = np.random.default_rng(seed)
        init_encoder_params(self.params, cfg.backbone, rng)
        self.bn_state: BatchNormState = init_head_params(
            self.params, cfg.backbone.channels, cfg.embed_dim,
            cfg.cluster_count, rng)

    def encode_view(self, view: PointCloud, proposals: ProposalSet) -> Tensor:
        """Backbone + attention encoding for one view; returns (N, C)."""
        f = backbone_features(view, self.params, self.cfg.backbone)
        return encode_proposals(f, proposals, view, self.params,
                                self.cfg.attention_mode)

    def project(self, y: Tensor, mode: str = "train") -> Tensor:
        return project_embed(y, self.params, self.bn_state, mode)

    def predict(self, z: Tensor) -> Tensor:
        return predict_classes(z, self.params)
