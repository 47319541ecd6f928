"""dermaug: desk-scale skin lesion classification pipeline.

Augmentations (between-class mixing, random erasing, body hair overlay),
a small squeeze/excite CNN with exact gradients, mean-teacher
semi-supervised training, stratified k-fold ensembling with test-time
augmentation, and balanced-accuracy evaluation. Deterministic end to end:
every stochastic choice derives from an explicit seed.
"""

from .augment import (
    AugConfig,
    HairStroke,
    apply_pipeline,
    bc_mix,
    geometric_augment,
    hair_overlay,
    mix_samples,
    random_erase,
    sample_hair_stroke,
    tta_inverse,
    tta_views,
)
from .config import DataPaths, RunConfig, default_config_text, parse_config, serialize_config
from .ensemble import (
    EnsembleMember,
    EnsembleModel,
    FoldPlan,
    load_ensemble,
    predict,
    predict_dataset,
    save_ensemble,
    stratified_kfold,
    train_ensemble,
)
from .errors import (
    ConfigError,
    DataError,
    DecodeError,
    DermaugError,
    LabelCsvError,
    NumericError,
    ShapeError,
    StaleCacheError,
)
from .imagedata import (
    SynthSpec,
    compute_norm_stats,
    denormalize,
    dump_labels_csv,
    load_labels_csv,
    make_synthetic_dataset,
    normalize,
)
from .meanteacher import (
    EpochStats,
    MeanTeacherConfig,
    TrainState,
    consistency_weight,
    dataset_balanced_accuracy,
    ema_update,
    history_to_csv,
    train_fold,
    train_step,
    train_supervised,
)
from .metrics import (
    ConfusionMatrix,
    balanced_accuracy,
    confusion_matrix,
    format_report,
    per_class_recall,
)
from .nn import (
    ModelSpec,
    ParamSet,
    backward,
    forward,
    grad_check,
    init_params,
    load_params,
    mse_consistency,
    save_params,
    se_block_forward,
    sgd_update,
    softmax,
    softmax_backward,
    softmax_cross_entropy,
)
from .rng import RngStream
from .types import CLASS_NAMES, NUM_CLASSES, Dataset, Image, NormStats, Sample, SoftLabel

__version__ = "0.1.0"
