"""Gap-estimation network, its losses and training."""
from .losses import LOSS_NAMES, LossWeights, total_loss
from .network import GapModel, LatentBundle, sample_gap
from .pairs import make_corrected_pair, normal_reference
from .training import TrainConfig, TrainedGapModel, estimate_ba, train

__all__ = [
    "LOSS_NAMES", "LossWeights", "total_loss", "GapModel", "LatentBundle", "sample_gap",
    "make_corrected_pair", "normal_reference", "TrainConfig", "TrainedGapModel", "estimate_ba", "train",
]
