"""Training loops: SGD with momentum, step schedules, teacher pre-training
(PGD-AT and TRADES-style), method-dispatched distillation, and
best-checkpoint selection by PGD-10 accuracy.

Runs are deterministic: the run seed spawns independent streams for data
order, inner-maximization noise, and evaluation attacks, so two runs with
the same config and seed produce identical metrics.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, pgd
from .checkpoint import Checkpoint
from .data import LabeledBatch
from .errors import ConfigError, NumericError
from .losses import (
    DistillConfig,
    adaad_loss,
    ard_loss,
    dgad_loss,
    rslad_loss,
)
from .models import (
    CE_LABELS,
    KL_FIXED_TARGET,
    KL_STUDENT_TEACHER,
    ArchSpec,
    Model,
    ce_objective,
    forward_probs,
    kl_pair_objective,
)

TEACHER_METHODS = ("pgd_at", "trades")
DISTILL_METHODS = ("ard", "rslad", "adaad", "dgad")
TRAIN_METHODS = TEACHER_METHODS + DISTILL_METHODS

# inner-maximization objective implied by each method
INNER_OBJECTIVE = {
    "pgd_at": CE_LABELS,
    "trades": KL_FIXED_TARGET,
    "ard": CE_LABELS,
    "rslad": KL_FIXED_TARGET,
    "adaad": KL_STUDENT_TEACHER,
    "dgad": KL_STUDENT_TEACHER,
}

DEFAULT_EVAL_ATTACK = AttackConfig(
    epsilon=8 / 255, step_size=2 / 255, steps=10, objective=CE_LABELS, random_start=True
)


@dataclass(frozen=True)
class TrainConfig:
    """One training run: optimizer, schedule, method and its knobs."""

    method: str = "dgad"
    epochs: int = 20
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_epochs: tuple = (100, 150)
    lr_drop_factor: float = 0.1
    batch_size: int = 128
    seed: int = 0
    eval_every: int = 1
    augment: bool = False
    trades_lambda: float = 6.0
    attack: AttackConfig = AttackConfig()
    distill: DistillConfig = DistillConfig()
    eval_attack: AttackConfig = DEFAULT_EVAL_ATTACK

    def validate(self) -> "TrainConfig":
        if self.method not in TRAIN_METHODS:
            raise ConfigError(
                f"train.method: unknown method {self.method!r} (expected one of {TRAIN_METHODS})"
            )
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("train.momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        drops = tuple(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigError("train.lr_drop_epochs must be strictly increasing")
        if self.lr_drop_factor <= 0:
            raise ConfigError("train.lr_drop_factor must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")
        if self.eval_every < 1:
            raise ConfigError("train.eval_every must be positive")
        if self.trades_lambda < 0:
            raise ConfigError("train.trades_lambda must be >= 0")
        self.attack.validate()
        self.eval_attack.validate()
        self.distill.validate()
        return self


@dataclass
class EvalPoint:
    """One periodic evaluation, with the checkpoint it measured."""

    epoch: int
    clean_acc: float
    pgd10_acc: float
    checkpoint: Checkpoint


@dataclass
class RunResult:
    best: Checkpoint
    history: list
    step_rows: list
    eval_rows: list
    model: Model


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate after applying every drop whose epoch has been reached."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    n_drops = sum(1 for e in cfg.lr_drop_epochs if e <= epoch)
    return cfg.lr * cfg.lr_drop_factor**n_drops


def sgd_step(model: Model, grads: dict, velocity: dict, lr: float,
             momentum: float = 0.9, weight_decay: float = 5e-4) -> None:
    """Classic momentum SGD update with L2 decay folded into the gradient.

    Mutates the model parameters and the velocity buffers in place.
    """
    params = model.params
    for name, p in params.items():
        g = grads[name] + weight_decay * p
        v = momentum * velocity[name] + g
        if not np.isfinite(v).all():
            raise NumericError(f"non-finite update for parameter {name}")
        velocity[name] = v
        p -= lr * v


def select_best(history) -> Checkpoint:
    """Checkpoint with the highest PGD-10 accuracy; ties go to the earliest epoch."""
    if not history:
        raise ValueError("cannot select a best checkpoint from an empty history")
    accs = np.array([h.pgd10_acc for h in history])
    return history[int(np.argmax(accs))].checkpoint


def _augment_images(x: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random horizontal flip plus pad-and-crop for NHWC image batches."""
    n, h, w, _ = x.shape
    flip = rng.random(n) < 0.5
    out = x.copy()
    out[flip] = out[flip, :, ::-1, :]
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    for i in range(n):
        oi, oj = offs[i]
        out[i] = padded[i, oi : oi + h, oj : oj + w, :]
    return out


def _train_loop(model: Model, cfg: TrainConfig, train: LabeledBatch, test: LabeledBatch,
                step_fn, config_digest: str = "") -> RunResult:
    """Shared engine: batching, SGD, periodic evaluation, best tracking."""
    from .evaluation import clean_accuracy, robust_accuracy  # local to avoid a cycle

    data_seed, attack_seed, eval_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    data_rng = np.random.default_rng(data_seed)
    attack_rng = np.random.default_rng(attack_seed)
    eval_rng = np.random.default_rng(eval_seed)

    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    history, step_rows, eval_rows = [], [], []
    global_step = 0

    def evaluate(epoch: int) -> None:
        clean = clean_accuracy(model, test)
        robust = robust_accuracy(model, test, kind="pgd", pgd_cfg=cfg.eval_attack, rng=eval_rng)
        metrics = {"clean_acc": clean, "pgd10_acc": robust}
        ckpt = Checkpoint.from_model(
            model, epoch=epoch, metrics=metrics, seed=cfg.seed, config_digest=config_digest
        )
        history.append(EvalPoint(epoch, clean, robust, ckpt))
        eval_rows.append(
            {"record": "eval", "epoch": epoch, "clean_acc": clean, "pgd10_acc": robust}
        )

    if cfg.epochs == 0:
        evaluate(0)
        return RunResult(select_best(history), history, step_rows, eval_rows, model)

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        perm = data_rng.permutation(train.n)
        for start in range(0, train.n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb = train.inputs[idx]
            if cfg.augment and xb.ndim == 4:
                xb = _augment_images(xb, data_rng)
            batch = LabeledBatch(xb, train.labels[idx], train.n_classes)
            row, grads = step_fn(model, batch, attack_rng)
            sgd_step(model, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            row.update({"record": "step", "epoch": epoch, "step": global_step,
                        "lr": lr, "batch_n": batch.n})
            step_rows.append(row)
            global_step += 1
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            evaluate(epoch)

    return RunResult(select_best(history), history, step_rows, eval_rows, model)


def _zero_counts() -> dict:
    return {"loss_pcr": 0.0, "n_st": 0, "n_swap_st": 0, "n_swap_at": 0, "n_pcr_pairs": 0}


def train_teacher(cfg: TrainConfig, train: LabeledBatch, test: LabeledBatch,
                  arch: ArchSpec, config_digest: str = "") -> RunResult:
    """Adversarially pre-train a teacher; returns the best-PGD-10 run result.

    pgd_at: cross-entropy on CE-PGD adversarial examples.
    trades: CE(S(x), y) + lambda * KL(S(x') || S(x)) with x' maximizing the
            KL against the model's own clean predictions.
    """
    cfg.validate()
    if cfg.method not in TEACHER_METHODS:
        raise ConfigError(
            f"train.method: teacher training expects one of {TEACHER_METHODS}, got {cfg.method!r}"
        )
    model = Model(arch, role="teacher", init_seed=cfg.seed)
    inner = replace(cfg.attack, objective=INNER_OBJECTIVE[cfg.method])

    def pgd_at_step(model, batch, rng):
        adv = pgd(model, batch, inner, rng=rng)
        logits, caches = model.forward_cache(adv.inputs)
        per_ex, dlogits = ce_objective(logits, batch.labels)
        grads, _ = model.backward(dlogits / batch.n, caches)
        value = float(per_ex.mean())
        row = {"loss_total": value, "loss_st": 0.0, "loss_at": value,
               "n_at": batch.n, **_zero_counts()}
        return row, grads

    # the self-referential KL objective has a zero gradient exactly at the
    # clean point, so the trades inner max must start off it
    trades_inner = replace(inner, random_start=True)

    def trades_step(model, batch, rng):
        logits, caches = model.forward_cache(batch.inputs)
        ce_per, ce_dz = ce_objective(logits, batch.labels)
        ce = float(ce_per.mean())
        if cfg.trades_lambda == 0.0:
            grads, _ = model.backward(ce_dz / batch.n, caches)
            row = {"loss_total": ce, "loss_st": ce, "loss_at": 0.0,
                   "n_at": batch.n, **_zero_counts()}
            return row, grads
        target = forward_probs(model, batch.inputs)
        adv = pgd(model, batch, trades_inner, target_probs=target, rng=rng)
        adv_logits, adv_caches = model.forward_cache(adv.inputs)
        kl_per, dz_adv, dz_clean = kl_pair_objective(adv_logits, logits)
        robust = float(kl_per.mean())
        value = ce + cfg.trades_lambda * robust
        lam = cfg.trades_lambda
        g_clean, _ = model.backward((ce_dz + lam * dz_clean) / batch.n, caches)
        g_adv, _ = model.backward(lam * dz_adv / batch.n, adv_caches)
        grads = {k: g_clean[k] + g_adv[k] for k in g_clean}
        row = {"loss_total": value, "loss_st": ce, "loss_at": lam * robust,
               "n_at": batch.n, **_zero_counts()}
        return row, grads

    step_fn = pgd_at_step if cfg.method == "pgd_at" else trades_step
    return _train_loop(model, cfg, train, test, step_fn, config_digest)


def train_distill(teacher, cfg: TrainConfig, train: LabeledBatch, test: LabeledBatch,
                  student_arch: ArchSpec | None = None, student: Model | None = None,
                  config_digest: str = "") -> RunResult:
    """Distill a frozen teacher into a student with the configured method.

    ``teacher`` may be a Model or a Checkpoint.  The inner-maximization
    objective is derived from the method; cfg.attack supplies the budget.
    """
    cfg.validate()
    if cfg.method not in DISTILL_METHODS:
        raise ConfigError(
            f"train.method: distillation expects one of {DISTILL_METHODS}, got {cfg.method!r}"
        )
    if isinstance(teacher, Checkpoint):
        teacher = teacher.to_model(role="teacher")
    if student is None:
        if student_arch is None:
            raise ConfigError("train_distill needs a student model or architecture")
        student = Model(student_arch, role="student", init_seed=cfg.seed)
    if teacher.n_classes != student.n_classes or teacher.n_classes != train.n_classes:
        raise ConfigError(
            f"class-count mismatch: teacher {teacher.n_classes}, student {student.n_classes}, "
            f"data {train.n_classes}"
        )
    if teacher.input_shape != student.input_shape:
        raise ConfigError(
            f"input-shape mismatch: teacher {teacher.input_shape}, student {student.input_shape}"
        )
    inner = replace(cfg.attack, objective=INNER_OBJECTIVE[cfg.method])
    dcfg = replace(cfg.distill, method=cfg.method)

    def baseline_step(model, batch, rng):
        if cfg.method == "ard":
            adv = pgd(model, batch, inner, rng=rng)
            value, grads = ard_loss(model, teacher, batch, adv, dcfg, with_grads=True)
            clean = value - dcfg.alpha * _adv_kl(model, teacher, batch, adv, fixed=True)
        elif cfg.method == "rslad":
            target = forward_probs(teacher, batch.inputs)
            adv = pgd(model, batch, inner, target_probs=target, rng=rng)
            value, grads = rslad_loss(model, teacher, batch, adv, dcfg, with_grads=True)
            clean = value - dcfg.alpha * _adv_kl(model, teacher, batch, adv, fixed=True)
        else:
            adv = pgd(model, batch, inner, reference=teacher, rng=rng)
            value, grads = adaad_loss(model, teacher, batch, adv, dcfg, with_grads=True)
            clean = value - dcfg.alpha * _adv_kl(model, teacher, batch, adv, fixed=False)
        row = {"loss_total": value, "loss_st": clean, "loss_at": value - clean,
               "n_at": batch.n, **_zero_counts()}
        return row, grads

    def dgad_step(model, batch, rng):
        breakdown, grads = dgad_loss(
            model, teacher, batch, dcfg, attack=inner, rng=rng, with_grads=True
        )
        row = {
            "loss_total": breakdown.total,
            "loss_st": breakdown.l_st,
            "loss_at": breakdown.l_at,
            "loss_pcr": breakdown.l_pcr,
            "n_st": breakdown.n_st,
            "n_at": breakdown.n_at,
            "n_swap_st": breakdown.n_swapped_st,
            "n_swap_at": breakdown.n_swapped_at,
            "n_pcr_pairs": breakdown.n_pcr_pairs,
        }
        return row, grads

    step_fn = dgad_step if cfg.method == "dgad" else baseline_step
    return _train_loop(student, cfg, train, test, step_fn, config_digest)


def _adv_kl(student, teacher, batch, adv, fixed: bool) -> float:
    """Mean adversarial KL term of RSLAD (fixed target) or AdaAD (teacher at x')."""
    from .losses import kl_div

    target = forward_probs(teacher, batch.inputs if fixed else adv.inputs)
    per_ex = kl_div(target, forward_probs(student, adv.inputs))
    return float(np.mean(per_ex))
