"""Context-aware domain mixup on a from-scratch numpy substrate.

A labeled procedural "source" domain and an appearance-shifted unlabeled
"target" domain are bridged by pasting selected target classes (and their
context groups) onto source images, training a student network against mixed
pseudo-labels reweighted by a teacher-uncertainty mask, with the teacher
tracking the student as an exponential moving average.
"""

from .context import ContextualMask, generate_contextual_mask, select_classes, spatially_modulated_pseudolabel
from .losses import LossBreakdown, consistency_weight, seg_loss, src_loss, total_loss
from .mixing import MixedBatch, mix_images, mix_labels, mix_significance
from .ops import (
    DataError,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    cross_entropy_map,
    gaussian_noise,
    softmax_channelwise,
)
from .prior import SpatialPrior, build_spatial_prior, modulate, uniform_prior
from .rng import SeededRng
from .scenes import (
    DEFAULT_META_GROUPS,
    IGNORE_ID,
    MetaClassList,
    SceneSpec,
    ShiftParams,
    build_dataset,
    generate_scene,
    load_dataset,
    source_spec,
    target_spec,
)
from .segmenter import SegmenterParams, StudentTeacher, backward, ema_update, forward, init_segmenter
from .significance import (
    ThresholdParams,
    dynamic_threshold,
    predictive_entropy,
    significance_mask,
    stochastic_mean_probs,
)
from .trainer import EvalReport, TrainConfig, TrainingDiverged, evaluate, train, train_step

__version__ = "0.1.0"
