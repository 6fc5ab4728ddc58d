"""Adversarial distillation at desk scale.

A numpy library implementing robust teacher-student distillation with
misclassification-aware batch partitioning, error-corrective label swapping,
and predictive-consistency regularization, next to the classic baselines
(KD, ARD, RSLAD, AdaAD), adversarial pre-training (PGD-AT, TRADES), and an
L-inf attack suite (FGSM, PGD, CW2) for evaluation.
"""
from .attacks import AdvBatch, AttackConfig, cw2, fgsm, pgd, project_clip
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    DatasetSpec,
    LabeledBatch,
    blob_templates,
    load_dataset,
    make_blobs,
    read_cifar_file,
    read_idx,
    write_idx,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    InternalConsistencyError,
    NumericError,
)
from .evaluation import (
    CWConfig,
    EvalReport,
    alpha_sweep,
    clean_accuracy,
    evaluate_model,
    render_report,
    robust_accuracy,
    transfer_eval,
)
from .losses import (
    CorrectedTeacherDist,
    DistillConfig,
    LossBreakdown,
    PartitionMask,
    adaad_loss,
    alt_label_correct,
    ard_loss,
    dgad_loss,
    els_swap_at,
    els_swap_st,
    kd_loss,
    kl_div,
    map_partition,
    pcr_loss,
    rslad_loss,
    teacher_margin,
)
from .models import (
    CE_LABELS,
    KL_FIXED_TARGET,
    KL_STUDENT_TEACHER,
    ArchSpec,
    Model,
    forward_probs,
    input_gradient,
    one_hot,
    predict_argmax,
    softmax,
)
from .training import (
    EvalPoint,
    RunResult,
    TrainConfig,
    lr_at_epoch,
    select_best,
    sgd_step,
    train_distill,
    train_teacher,
)

__version__ = "0.1.0"
