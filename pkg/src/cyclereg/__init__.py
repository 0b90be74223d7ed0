"""Unsupervised 3D deformable registration via cyclical self-training.

A feature network is trained against pseudo displacement labels produced by
a differentiable coupled-convex optimizer; the labels are cyclically
regenerated and refined as the features improve.
"""

from .convex import CoupledConvexConfig, coupled_convex, soft_argmin
from .correlation import CostVolume, correlate
from .errors import (
    CycleRegError,
    DataError,
    DivergenceError,
    GridError,
    UsageError,
)
from .features import FeatureExtractor, FeatureMap, extract, init_state
from .grid import (
    AffineTransform,
    DisplacementField,
    LabelVolume,
    Volume,
    apply_affine,
    compose_fields,
    jacobian_determinant,
    transform_field_for_affine_pair,
    upsample_field,
    warp_volume,
)
from .metrics import (
    LandmarkSet,
    cumulative_dice_curve,
    dice,
    sd_log_jacobian,
    target_registration_error,
)
from .phantom import PhantomSpec, make_dataset, make_pair
from .refine import (
    RefinementConfig,
    forward_backward_consistency,
    instance_optimize,
    refine,
    register_pair,
    second_warp_pass,
)
from .selftrain import (
    AugmentConfig,
    PseudoLabelStore,
    SelfTrainingConfig,
    TrainingSchedule,
    difficulty_score,
    generate_pseudo_labels,
    run_self_training,
    sampling_weights,
    train_stage,
    tre_loss,
)

__version__ = "0.1.0"
