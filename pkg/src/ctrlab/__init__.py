"""Desk-scale laboratory for classification + ranking loss combinations in CTR models."""

from .errors import (
    ConfigError,
    CtrlabError,
    DegenerateBatchError,
    InvalidInputError,
    ParseError,
    UndefinedMetricError,
)
from .losses import (
    BETA_KINDS,
    DUAL_LOGIT_KINDS,
    LOSS_KINDS,
    LabeledBatch,
    LossOutput,
    LossSpec,
    evaluate,
    evaluate_with_rank_fallback,
)
from .data import CsvSchema, Dataset, SyntheticConfig, effective_ctr, generate_synthetic, load_csv, negative_sample
from .metrics import BiasReport, BucketStat, auc, bias_buckets, logloss
from .model import (
    EncodedRows,
    ModelConfig,
    ModelParams,
    StepInfo,
    TrainConfig,
    TrainLog,
    backward,
    config_for_dataset,
    encode_dataset,
    encode_rows,
    forward,
    init_model,
    predict_pctr,
    train,
)
from .checkpoint import load_checkpoint, load_dataset_cache, save_checkpoint, save_dataset_cache
from .diagnostics import (
    GradStats,
    GradStatsRecorder,
    LandscapeSlice,
    direction_audit,
    dominance_check,
    finite_diff_check,
    grad_norm_report,
    landscape_slice,
)

__all__ = [name for name in dir() if not name.startswith("_")]
