"""Attentive pyramid aggregation of convolutional feature maps for place recognition.

The library works on pre-extracted (H, W, D) activation tensors: overlapping
pyramid max pooling, single or cascaded attention, sum aggregation, triplet
ranking training of the attention head, PCA power whitening and Recall@N
evaluation. ``apanet.cli`` exposes the same steps as a command line tool.
"""

from .aggregate import apanet_forward, global_sum_pool, mac_pool, sum_pool
from .attention import HeadParams, attention_forward, init_head_params
from .core import Descriptor, FeatureMap, GeoImageRecord, RegionalFeatureSet, make_rng
from .evaluate import recall_at_n
from .pyramid import DEFAULT_SCALES, pyramid_pool_forward, region_count
from .train import TrainConfig, train_epochs, triplet_loss
from .whitening import WhiteningModel, apply_power_whitening, fit_pca

__all__ = [
    "DEFAULT_SCALES",
    "Descriptor",
    "FeatureMap",
    "GeoImageRecord",
    "HeadParams",
    "RegionalFeatureSet",
    "TrainConfig",
    "WhiteningModel",
    "apanet_forward",
    "apply_power_whitening",
    "attention_forward",
    "fit_pca",
    "global_sum_pool",
    "init_head_params",
    "mac_pool",
    "make_rng",
    "pyramid_pool_forward",
    "recall_at_n",
    "region_count",
    "sum_pool",
    "train_epochs",
    "triplet_loss",
]
