"""White-box property inference attacks on dense networks and the property
unlearning defense, with preprocessing defenses and weight-space diagnostics."""

from .analysis import DistanceAdversary, Embedding2D, fit_distance_adversary, saliency, saliency_similarity, tsne_embed
from .data import ImageDataset, PropertySpec, TabularDataset, make_auxiliary
from .errors import (
    CapacityError,
    ConfigError,
    ExperimentFailed,
    ParseError,
    RejectedInput,
    TrainingDiverged,
    UnlearningFailed,
)
from .meta import MetaClassifier, attack_accuracy, build_meta, infer, train_meta
from .nn import Architecture, DenseNet, TrainConfig, deserialize, serialize, train
from .report import ExperimentConfig, ExperimentReport, boxplot_stats, run_experiment, validate_config
from .shadows import ShadowCollection, train_shadows
from .unlearning import UnlearnConfig, adv_utility, iterative_unlearn, multi_property_unlearn, property_unlearn

__version__ = "0.1.0"
