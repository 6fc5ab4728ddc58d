"""Distillation losses.

Baselines: classic KD with temperature, ARD, RSLAD, and AdaAD, each a
weighted blend of a clean term and an adversarial term.  Every student-vs-
teacher divergence is computed in the teacher-covering direction
KL(teacher || student) that distillation implementations use in practice:
the reverse direction lets the student zero out a class and never recover
(its gradient scales with the student's own vanishing probability).  On top
of those, the dynamic-guidance stack:

* ``map_partition`` splits each batch by whether the teacher's clean
  prediction matches the label (AT = teacher right, ST = teacher wrong);
* ``els_swap_st`` / ``els_swap_at`` repair wrong teacher rows by transposing
  the probability mass between the predicted and the true class — for the ST
  subset unconditionally, and for teacher outputs on adversarial AT inputs
  only when the margin P(y) - P(argmax) is negative;
* ``pcr_loss`` penalizes the L2 gap between the student's clean and
  adversarial prediction vectors;
* ``dgad_loss`` composes the pipeline and reports a per-batch breakdown.

Teacher outputs (corrected or not) are constants in every loss; gradients
flow through student terms only.  Each loss can also return hand-derived
parameter gradients (``with_grads=True``) for the training loop.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attacks import AttackConfig, pgd
from .data import LabeledBatch
from .errors import ConfigError, InternalConsistencyError
from .models import (
    KL_STUDENT_TEACHER,
    PROB_FLOOR,
    Model,
    ce_objective,
    check_prob_rows,
    forward_probs,
    kl_objective,
    softmax,
    softmax_vjp,
)

DISTILL_METHODS = ("kd", "ard", "rslad", "adaad", "dgad")
LABEL_MODES = ("swap", "smooth", "mix")


@dataclass(frozen=True)
class DistillConfig:
    """Hyper-parameters shared by the distillation losses.

    ``alpha`` weights the adversarial term of the baseline losses; in dgad
    mode it is read only when ``label_mode`` is smooth or mix (their mixing
    coefficient).  ``tau`` is used by the classic KD loss only; every other
    loss reads probabilities at temperature 1.  ``beta`` weights the
    consistency term.  ``pcr_all_pairs`` additionally generates adversarial
    counterparts for teacher-misclassified rows purely for the consistency
    term (the partitioned loss terms are unaffected).
    """

    method: str = "dgad"
    alpha: float = 1.0
    tau: float = 1.0
    beta: float = 5.0
    label_mode: str = "swap"
    pcr_all_pairs: bool = False

    def validate(self) -> "DistillConfig":
        if self.method not in DISTILL_METHODS:
            raise ConfigError(
                f"distill.method: unknown method {self.method!r} (expected one of {DISTILL_METHODS})"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("distill.alpha must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("distill.tau must be positive")
        if self.beta < 0:
            raise ConfigError("distill.beta must be non-negative")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(
                f"distill.label_mode: unknown mode {self.label_mode!r} (expected one of {LABEL_MODES})"
            )
        return self


@dataclass
class PartitionMask:
    """Complementary boolean masks: st = teacher wrong, at = teacher right."""

    st: np.ndarray
    at: np.ndarray

    def __post_init__(self):
        self.st = np.asarray(self.st, dtype=bool)
        self.at = np.asarray(self.at, dtype=bool)
        if self.st.shape != self.at.shape or self.st.ndim != 1:
            raise InternalConsistencyError("partition masks must be 1-D and equal length")
        if not np.array_equal(self.st, ~self.at):
            raise InternalConsistencyError("partition masks must be elementwise complements")

    @property
    def n_st(self) -> int:
        return int(self.st.sum())

    @property
    def n_at(self) -> int:
        return int(self.at.sum())


@dataclass
class CorrectedTeacherDist:
    """Teacher probabilities after per-row correction, with a swap record."""

    probs: np.ndarray
    swapped: np.ndarray

    @property
    def n_swapped(self) -> int:
        return int(self.swapped.sum())


@dataclass
class LossBreakdown:
    """Per-batch components of the partitioned loss, logged every step."""

    l_st: float
    l_at: float
    l_pcr: float
    total: float
    n_st: int
    n_at: int
    n_swapped_st: int
    n_swapped_at: int
    n_pcr_pairs: int


def kl_div(p, q):
    """KL(p || q) per row, with q floored at 1e-12 before the log.

    Accepts single rows (returns a float) or matrices (returns a vector).
    Zero entries of p contribute 0 (the 0*log(0) limit).
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    logq = np.log(np.maximum(q, PROB_FLOOR))
    logp = np.log(np.maximum(p, PROB_FLOOR))
    rows = np.where(p > 0, p * (logp - logq), 0.0).sum(axis=1)
    return float(rows[0]) if rows.shape == (1,) else rows


# ---------------------------------------------------------------------------
# baseline losses


def _merge_grads(*grad_dicts):
    out = {}
    for grads in grad_dicts:
        for k, g in grads.items():
            out[k] = out.get(k, 0.0) + g
    return out


def kd_loss(student: Model, teacher: Model, batch: LabeledBatch, cfg: DistillConfig,
            with_grads: bool = False):
    """(1-alpha) * CE(S(x), y) + alpha * tau^2 * KL(T_tau(x) || S_tau(x))."""
    cfg.validate()
    x, y, n = batch.inputs, batch.labels, batch.n
    logits, caches = student.forward_cache(x)
    ce_per, ce_dz = ce_objective(logits, y)
    t_tau = forward_probs(teacher, x, cfg.tau)
    kl_per, kl_dz = kl_objective(logits / cfg.tau, t_tau)
    value = (1 - cfg.alpha) * ce_per.mean() + cfg.alpha * cfg.tau**2 * kl_per.mean()
    if not with_grads:
        return value
    # d/dlogits of softmax(logits/tau) terms picks up a 1/tau factor
    dlogits = ((1 - cfg.alpha) * ce_dz + cfg.alpha * cfg.tau * kl_dz) / n
    grads, _ = student.backward(dlogits, caches)
    return value, grads


def ard_loss(student: Model, teacher: Model, batch: LabeledBatch, adv_batch,
             cfg: DistillConfig, with_grads: bool = False):
    """(1-alpha) * CE(S(x), y) + alpha * KL(T(x) || S(x')).

    ``adv_batch`` must come from a CE-vs-labels attack on the student.
    """
    cfg.validate()
    if adv_batch is None:
        raise ConfigError("ard_loss requires an adversarial batch")
    x, y, n = batch.inputs, batch.labels, batch.n
    t_clean = forward_probs(teacher, x)
    logits, caches = student.forward_cache(x)
    ce_per, ce_dz = ce_objective(logits, y)
    adv_logits, adv_caches = student.forward_cache(adv_batch.inputs)
    kl_per, kl_dz = kl_objective(adv_logits, t_clean)
    value = (1 - cfg.alpha) * ce_per.mean() + cfg.alpha * kl_per.mean()
    if not with_grads:
        return value
    g_clean, _ = student.backward((1 - cfg.alpha) * ce_dz / n, caches)
    g_adv, _ = student.backward(cfg.alpha * kl_dz / n, adv_caches)
    return value, _merge_grads(g_clean, g_adv)


def rslad_loss(student: Model, teacher: Model, batch: LabeledBatch, adv_batch,
               cfg: DistillConfig, with_grads: bool = False):
    """(1-alpha) * KL(T(x) || S(x)) + alpha * KL(T(x) || S(x')).

    ``adv_batch`` must come from a KL attack against the fixed target T(x).
    """
    cfg.validate()
    if adv_batch is None:
        raise ConfigError("rslad_loss requires an adversarial batch")
    x, n = batch.inputs, batch.n
    t_clean = forward_probs(teacher, x)
    logits, caches = student.forward_cache(x)
    clean_per, clean_dz = kl_objective(logits, t_clean)
    adv_logits, adv_caches = student.forward_cache(adv_batch.inputs)
    adv_per, adv_dz = kl_objective(adv_logits, t_clean)
    value = (1 - cfg.alpha) * clean_per.mean() + cfg.alpha * adv_per.mean()
    if not with_grads:
        return value
    g_clean, _ = student.backward((1 - cfg.alpha) * clean_dz / n, caches)
    g_adv, _ = student.backward(cfg.alpha * adv_dz / n, adv_caches)
    return value, _merge_grads(g_clean, g_adv)


def adaad_loss(student: Model, teacher: Model, batch: LabeledBatch, adv_batch,
               cfg: DistillConfig, with_grads: bool = False):
    """(1-alpha) * KL(T(x) || S(x)) + alpha * KL(T(x') || S(x')).

    The teacher is re-evaluated at the adversarial points; ``adv_batch`` must
    come from the student-vs-teacher KL attack.
    """
    cfg.validate()
    if adv_batch is None:
        raise ConfigError("adaad_loss requires an adversarial batch")
    x, n = batch.inputs, batch.n
    t_clean = forward_probs(teacher, x)
    t_adv = forward_probs(teacher, adv_batch.inputs)
    logits, caches = student.forward_cache(x)
    clean_per, clean_dz = kl_objective(logits, t_clean)
    adv_logits, adv_caches = student.forward_cache(adv_batch.inputs)
    adv_per, adv_dz = kl_objective(adv_logits, t_adv)
    value = (1 - cfg.alpha) * clean_per.mean() + cfg.alpha * adv_per.mean()
    if not with_grads:
        return value
    g_clean, _ = student.backward((1 - cfg.alpha) * clean_dz / n, caches)
    g_adv, _ = student.backward(cfg.alpha * adv_dz / n, adv_caches)
    return value, _merge_grads(g_clean, g_adv)


# ---------------------------------------------------------------------------
# partitioning and label correction


def map_partition(teacher_probs_clean, labels) -> PartitionMask:
    """Split a batch by the teacher's clean predictions: at = argmax == label."""
    probs = check_prob_rows(teacher_probs_clean)
    y = np.asarray(labels, dtype=np.int64)
    at = np.argmax(probs, axis=1) == y
    return PartitionMask(st=~at, at=at)


def _swap_rows(probs: np.ndarray, rows: np.ndarray, labels: np.ndarray) -> None:
    """Transpose the (argmax, label) entries of the selected rows, in place."""
    pred = np.argmax(probs[rows], axis=1)
    a = probs[rows, pred].copy()
    probs[rows, pred] = probs[rows, labels[rows]]
    probs[rows, labels[rows]] = a


def els_swap_st(teacher_probs, labels, st_mask) -> CorrectedTeacherDist:
    """Swap (argmax, label) probability mass for every teacher-wrong clean row.

    Rows outside ``st_mask`` are untouched.  A masked row whose argmax already
    equals its label breaks the partition/swap contract and raises.
    """
    probs = check_prob_rows(teacher_probs).copy()
    y = np.asarray(labels, dtype=np.int64)
    rows = np.flatnonzero(np.asarray(st_mask, dtype=bool))
    swapped = np.zeros(len(probs), dtype=bool)
    if rows.size:
        pred = np.argmax(probs[rows], axis=1)
        clash = pred == y[rows]
        if clash.any():
            raise InternalConsistencyError(
                f"row {int(rows[np.flatnonzero(clash)[0]])}: argmax equals the label inside "
                "the standard-training mask (partition/swap contract breach)"
            )
        _swap_rows(probs, rows, y)
        swapped[rows] = True
    return CorrectedTeacherDist(probs, swapped)


def teacher_margin(teacher_probs_adv, labels):
    """P(y) - P(argmax) per row: 0 when the prediction is right, < 0 when wrong.

    Accepts a single row with an integer label (returns a float) or a matrix
    with a label vector (returns a vector).
    """
    probs = np.asarray(teacher_probs_adv, dtype=np.float64)
    if probs.ndim == 1:
        pred = int(np.argmax(probs))
        return float(probs[int(labels)] - probs[pred])
    probs = check_prob_rows(probs)
    y = np.asarray(labels, dtype=np.int64)
    pred = np.argmax(probs, axis=1)
    rows = np.arange(len(probs))
    return probs[rows, y] - probs[rows, pred]


def els_swap_at(teacher_probs_adv, labels) -> CorrectedTeacherDist:
    """Swap (argmax, label) entries only for rows with a negative margin.

    Rows the teacher already gets right (margin >= 0) are never modified, so
    re-applying the operation is the identity.
    """
    probs = check_prob_rows(teacher_probs_adv).copy()
    y = np.asarray(labels, dtype=np.int64)
    margin = teacher_margin(probs, y)
    rows = np.flatnonzero(margin < 0)
    swapped = np.zeros(len(probs), dtype=bool)
    if rows.size:
        _swap_rows(probs, rows, y)
        swapped[rows] = True
    return CorrectedTeacherDist(probs, swapped)


def alt_label_correct(teacher_probs, labels, mode: str, alpha: float):
    """Alternative corrections to swapping, applied to the given rows.

    smooth: (1-alpha) * onehot(y) + alpha / C  (teacher values ignored)
    mix:    alpha * T(x) + (1-alpha) * onehot(y)
    """
    if mode not in ("smooth", "mix"):
        raise ConfigError(f"unknown label correction mode {mode!r}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("label correction alpha must lie in [0, 1]")
    probs = check_prob_rows(teacher_probs)
    n, c = probs.shape
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), np.asarray(labels, dtype=np.int64)] = 1.0
    if mode == "smooth":
        return (1 - alpha) * onehot + alpha / c
    return alpha * probs + (1 - alpha) * onehot


def pcr_loss(student_probs_clean, student_probs_adv, pair_mask) -> float:
    """Mean L2 norm of the clean-vs-adversarial prediction gap over the pairs.

    ``pair_mask`` marks rows for which an adversarial counterpart exists;
    with no pairs the term is 0.
    """
    mask = np.asarray(pair_mask, dtype=bool)
    if not mask.any():
        return 0.0
    d = np.asarray(student_probs_clean)[mask] - np.asarray(student_probs_adv)[mask]
    return float(np.sqrt((d * d).sum(axis=1)).mean())


# ---------------------------------------------------------------------------
# the composite loss


def _correct_rows(probs: np.ndarray, labels: np.ndarray, rows_mask: np.ndarray,
                  cfg: DistillConfig) -> np.ndarray:
    """Apply the configured label correction to the masked rows of a copy."""
    out = probs.copy()
    rows = np.flatnonzero(rows_mask)
    if rows.size:
        out[rows] = alt_label_correct(probs[rows], labels[rows], cfg.label_mode, cfg.alpha)
    return out


def _subset_kl(logits_rows, target_rows):
    """Mean KL over a subset plus d/dlogits of that mean (teacher constant)."""
    per_ex, dz = kl_objective(logits_rows, target_rows)
    return float(per_ex.mean()), dz / len(per_ex)


def dgad_loss(student: Model, teacher: Model, batch: LabeledBatch, cfg: DistillConfig,
              *, attack: AttackConfig | None = None, rng: np.random.Generator | None = None,
              with_grads: bool = False):
    """Partition-aware distillation loss with label correction and consistency.

    Pipeline: partition on the teacher's clean predictions; run the
    student-vs-teacher KL attack on the teacher-correct (AT) rows only;
    correct the teacher's clean outputs on ST rows and its adversarial
    outputs on negative-margin AT rows; distill each subset against its
    corrected targets; add ``beta`` times the clean/adversarial consistency
    term over the rows that have adversarial counterparts.  Empty subsets
    contribute 0 with their counts logged.
    """
    cfg.validate()
    if cfg.method != "dgad":
        raise ConfigError(f"dgad_loss called with distill.method={cfg.method!r}")
    attack = attack or AttackConfig(objective=KL_STUDENT_TEACHER)
    if attack.objective != KL_STUDENT_TEACHER:
        raise ConfigError(
            "dgad inner maximization must use the kl_student_teacher objective, "
            f"got {attack.objective!r}"
        )
    x, y, n = batch.inputs, batch.labels, batch.n

    t_clean = forward_probs(teacher, x)
    part = map_partition(t_clean, y)
    at_rows = np.flatnonzero(part.at)
    st_rows = np.flatnonzero(part.st)

    # corrected clean-teacher targets for the ST subset
    if cfg.label_mode == "swap":
        corrected_st = els_swap_st(t_clean, y, part.st)
    else:
        corrected_st = CorrectedTeacherDist(_correct_rows(t_clean, y, part.st, cfg), part.st.copy())

    # adversarial counterparts for the AT subset (and optionally ST, for PCR only)
    x_adv_at = t_adv = None
    if at_rows.size:
        adv = pgd(student, batch.subset(at_rows), attack, reference=teacher, rng=rng)
        x_adv_at = adv.inputs
        t_adv = forward_probs(teacher, x_adv_at)
        if cfg.label_mode == "swap":
            corrected_at = els_swap_at(t_adv, y[at_rows])
        else:
            wrong = teacher_margin(t_adv, y[at_rows]) < 0
            corrected_at = CorrectedTeacherDist(
                _correct_rows(t_adv, y[at_rows], wrong, cfg), wrong
            )
    else:
        corrected_at = CorrectedTeacherDist(np.zeros((0, batch.n_classes)), np.zeros(0, dtype=bool))

    x_adv_st = None
    if cfg.pcr_all_pairs and st_rows.size:
        adv_st = pgd(student, batch.subset(st_rows), attack, reference=teacher, rng=rng)
        x_adv_st = adv_st.inputs

    # student passes
    logits_clean, caches_clean = student.forward_cache(x)
    probs_clean = softmax(logits_clean)
    dlog_clean = np.zeros_like(logits_clean)

    l_st = 0.0
    if st_rows.size:
        l_st, dz = _subset_kl(logits_clean[st_rows], corrected_st.probs[st_rows])
        dlog_clean[st_rows] += dz

    l_at = 0.0
    logits_adv = caches_adv = None
    probs_adv_at = None
    if at_rows.size:
        logits_adv, caches_adv = student.forward_cache(x_adv_at)
        probs_adv_at = softmax(logits_adv)
        l_at, dz = _subset_kl(logits_adv, corrected_at.probs)
        dlog_adv = dz
    else:
        dlog_adv = None

    # consistency pairs: AT rows by default, every row with pcr_all_pairs
    pair_rows = at_rows
    probs_adv_full = np.zeros_like(probs_clean)
    if at_rows.size:
        probs_adv_full[at_rows] = probs_adv_at
    logits_adv_st = caches_adv_st = None
    if cfg.pcr_all_pairs and st_rows.size:
        logits_adv_st, caches_adv_st = student.forward_cache(x_adv_st)
        probs_adv_full[st_rows] = softmax(logits_adv_st)
        pair_rows = np.arange(n)

    n_pairs = len(pair_rows)
    l_pcr = 0.0
    if n_pairs:
        diff = probs_clean[pair_rows] - probs_adv_full[pair_rows]
        norms = np.sqrt((diff * diff).sum(axis=1))
        l_pcr = float(norms.mean())

    total = l_st + l_at + cfg.beta * l_pcr
    breakdown = LossBreakdown(
        l_st=l_st,
        l_at=l_at,
        l_pcr=l_pcr,
        total=total,
        n_st=part.n_st,
        n_at=part.n_at,
        n_swapped_st=corrected_st.n_swapped,
        n_swapped_at=corrected_at.n_swapped,
        n_pcr_pairs=n_pairs,
    )
    if not with_grads:
        return breakdown

    if n_pairs and cfg.beta > 0:
        safe = np.maximum(norms, PROB_FLOOR)
        dprobs = diff / (safe[:, None] * n_pairs)
        dlog_clean[pair_rows] += cfg.beta * softmax_vjp(probs_clean[pair_rows], dprobs)
        dz_pairs = -cfg.beta * softmax_vjp(probs_adv_full[pair_rows], dprobs)
        # scatter the adversarial-side gradient back to the per-subset passes
        dz_full = np.zeros_like(probs_clean)
        dz_full[pair_rows] = dz_pairs
        if at_rows.size:
            dlog_adv += dz_full[at_rows]
        if cfg.pcr_all_pairs and st_rows.size:
            dlog_adv_st = dz_full[st_rows]
    grads_list = []
    g_clean, _ = student.backward(dlog_clean, caches_clean)
    grads_list.append(g_clean)
    if at_rows.size:
        g_adv, _ = student.backward(dlog_adv, caches_adv)
        grads_list.append(g_adv)
    if cfg.pcr_all_pairs and st_rows.size and cfg.beta > 0 and n_pairs:
        g_adv_st, _ = student.backward(dlog_adv_st, caches_adv_st)
        grads_list.append(g_adv_st)
    return breakdown, _merge_grads(*grads_list)
