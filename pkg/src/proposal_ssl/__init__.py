"""Proposal-level contrastive pre-training for point clouds, desk scale."""

from .pointcloud import PointCloud, GroundFilterConfig, load_point_cloud, remove_ground
from .augment import AugmentParams, DropoutConfig, CorrespondenceMap, sample_views
from .proposals import ProposalSet, farthest_point_sampling, radius_group
from .autodiff import Tensor, ParamGroup, grad_check
from .model import Model, ModelConfig
from .objectives import LossWeights, ipd_loss, ics_loss, sinkhorn_assign, total_loss
from .training import TrainConfig, cosine_lr, adam_step, pretrain

__version__ = "0.1.0"
