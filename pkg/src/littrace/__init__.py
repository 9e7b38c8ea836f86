"""Literacy tracing: dual-channel sequence models over student interaction logs."""

from .autodiff import ContractError, DimensionError, MaskError, Tape, Tensor, backward, grad_check
from .data import (
    Batch,
    DatasetStats,
    Interaction,
    LoadError,
    StudentSequence,
    SynthConfig,
    adapt_assist09,
    generate_synthetic_literacy,
    load_canonical,
    split_students,
    split_train_val,
    window_and_pad,
    write_canonical,
)
from .model import (
    DktParams,
    ModelConfig,
    TlsqktParams,
    TraceOutput,
    VariantKind,
    dkt_forward,
    extract_trajectories,
    forward,
    init_dkt,
    init_tlsqkt,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from .training import (
    AdamState,
    EarlyStopper,
    RunReport,
    TrainConfig,
    TrainingDiverged,
    UndefinedMetricError,
    accuracy,
    adam_step,
    auc,
    auc_pairwise,
    bce_loss_masked,
    evaluate,
    run_ablation_suite,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Batch",
    "ContractError",
    "DatasetStats",
    "DimensionError",
    "DktParams",
    "EarlyStopper",
    "Interaction",
    "LoadError",
    "MaskError",
    "ModelConfig",
    "RunReport",
    "StudentSequence",
    "SynthConfig",
    "Tape",
    "Tensor",
    "TlsqktParams",
    "TraceOutput",
    "TrainConfig",
    "TrainingDiverged",
    "UndefinedMetricError",
    "VariantKind",
    "accuracy",
    "adam_step",
    "adapt_assist09",
    "auc",
    "auc_pairwise",
    "backward",
    "bce_loss_masked",
    "dkt_forward",
    "evaluate",
    "extract_trajectories",
    "forward",
    "generate_synthetic_literacy",
    "grad_check",
    "init_dkt",
    "init_tlsqkt",
    "load_canonical",
    "load_checkpoint",
    "model_forward",
    "run_ablation_suite",
    "save_checkpoint",
    "split_students",
    "split_train_val",
    "train",
    "window_and_pad",
    "write_canonical",
]
