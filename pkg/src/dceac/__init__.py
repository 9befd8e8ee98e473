"""Deep convolutional embedded attention clustering on image patches."""

from dceac.clustering import ClusterState, kl_loss, kmeans_init, predict_labels, soft_assign, target_distribution
from dceac.network import ArchitectureConfig, ModelParams, build_model, decode, embed, encode
from dceac.training import TrainConfig, pretrain_cae, train_dceac, train_variant

__version__ = "0.1.0"
