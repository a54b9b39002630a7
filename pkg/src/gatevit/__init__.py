"""gatevit: instance-adaptive patch/head/block gating for small ViTs.

A numpy-backed tensor engine with reverse-mode differentiation drives a
configurable ViT backbone whose blocks carry learned decision networks.
Binary Gumbel-Softmax gates select which patches, attention heads and
sublayers each input actually uses, trained jointly against a target
compute budget, with exact analytic FLOPs accounting for every realized
policy. Hot elementwise kernels run in a compiled extension when
available (see ``gatevit.kernels.BACKEND``).
"""

__version__ = "0.1.0"

from .backbone import BackboneParams, ModelConfig
from .data import Dataset, SyntheticTaskSpec, generate_synthetic, load_image_folder
from .objectives import BudgetConfig
from .policy import DecisionParams, adaptive_forward, gumbel_softmax_binary
from .training import ModelBundle, TrainConfig, evaluate, fit, train_step

__all__ = [
    "BackboneParams", "BudgetConfig", "Dataset", "DecisionParams",
    "ModelBundle", "ModelConfig", "SyntheticTaskSpec", "TrainConfig",
    "adaptive_forward", "evaluate", "fit", "generate_synthetic",
    "gumbel_softmax_binary", "load_image_folder", "train_step",
    "__version__",
]
