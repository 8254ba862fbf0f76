"""Explanation-driven supervised contrastive learning.

Train image encoders with a supervised contrastive objective whose views
include saliency-masked images, optionally enlarging the negative set with
masked images the model no longer recognizes (background negatives), and
evaluate the result for accuracy, explanation quality, adversarial
robustness, and calibration.
"""

from .augment import (
    BACKGROUND_LABEL,
    AugmentPolicy,
    BatchItem,
    BatchRole,
    MultiviewBatch,
    build_multiview_batch,
    build_supcon_batch,
    identity_policy,
    random_views,
)
from .data import (
    ArrayDataset,
    DatasetBundle,
    DatasetSpec,
    Normalizer,
    compute_normalizer,
    load_dataset,
    make_synthetic_toy,
    prepare_dataset,
    save_toy_dataset,
    split_train_val,
)
from .errors import (
    BatchTooSmallError,
    ConfigurationError,
    ContractViolation,
    DegenerateEmbeddingError,
    ExConError,
    NonFiniteLossError,
    NoPositivesError,
)
from .evaluation import (
    AttackConfig,
    CalibrationReport,
    ExplanationQualityReport,
    drop_increase_stats,
    ece,
    explanation_quality,
    export_embeddings,
    fgsm_attack,
    model_confidences,
    robust_accuracy,
    top1_accuracy,
)
from .experiment import (
    CompareResult,
    EvalConfig,
    ExperimentSpec,
    RunArtifacts,
    compare_report,
    config_text,
    evaluate_model,
    load_config,
    parse_config_text,
    reopen_run,
    run_experiment,
)
from .explain import (
    MaskSpec,
    SaliencyMap,
    apply_mask,
    compute_saliency,
    export_saliency,
    gradcam,
    gradcam_batch,
    mask_below_threshold,
    normalize_upsample,
    normalize_upsample_batch,
    retain_top_percent,
    top_percent_keep_mask,
)
from .losses import (
    ContrastiveBatchView,
    LossConfig,
    contrast_weights,
    exconb_grad_oracle,
    exconb_loss,
    supcon_loss,
)
from .models import (
    CHECKPOINT_FORMAT,
    EmbeddingSet,
    ExConModel,
    ModelConfig,
    build_model,
    load_checkpoint,
    normalize_rows,
    save_checkpoint,
)
from .seeding import SeedStreams, stream_seed
from .training import (
    EpochLog,
    FitResult,
    TrainConfig,
    fit,
    lr_at,
    train_classifier_epoch,
    train_encoder_epoch,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
