"""Frozen-embedding representation learning with LCA pooling.

Contrastive teacher training on image pairs, pseudolabel distillation into a
noisy student, LCA pooling of conv feature maps, and a logistic-regression
probe for one-shot classification.
"""

__version__ = "0.1.0"

from .backbone import BackboneConfig, Checkpoint, embed
from .classifier import LogRegModel, evaluate, fit_logreg, predict
from .dataio import AugmentConfig, ImageRecord, SyntheticSpec, augment, gen_synthetic
from .errors import (
    ConfigError,
    DatasetError,
    FormatError,
    InvalidArgumentError,
    LcaRepError,
    MiningError,
    TrainingError,
)
from .lca import LcaConfig, lca_coefficient_map, lca_forward, lca_forward_bruteforce, lca_window_count
from .losses import LossConfig
from .pipeline import PseudolabelStore, TrainConfig, generate_pseudolabels, train_student, train_teacher
