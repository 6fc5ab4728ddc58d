"""Accuracy and robustness measurement, transfer attacks, and the
AdaAD-vs-partitioned alpha sweep.

Every reported accuracy is exactly correct_count / n * 100 — no estimation.
Evaluation is read-only over frozen models.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, cw2, fgsm, pgd
from .data import LabeledBatch
from .errors import ConfigError
from .models import CE_LABELS, Model, forward_probs, predict_argmax

DEFAULT_EVAL_PGD = AttackConfig(
    epsilon=8 / 255, step_size=2 / 255, steps=10, objective=CE_LABELS, random_start=True
)

ATTACK_KINDS = ("fgsm", "pgd", "cw2")


@dataclass(frozen=True)
class CWConfig:
    """Evaluation defaults for the CW-style attack (balance constant 0.1)."""

    balance_constant: float = 0.1
    steps: int = 50
    step_size: float = 0.01
    epsilon: float = 8 / 255
    confidence: float = 0.0

    def to_dict(self) -> dict:
        return {
            "balance_constant": self.balance_constant,
            "steps": self.steps,
            "step_size": self.step_size,
            "epsilon": self.epsilon,
            "confidence": self.confidence,
        }


@dataclass
class EvalReport:
    """Clean plus per-attack robust accuracy for one model on one split."""

    clean_acc: float
    robust: dict
    n_examples: int
    attacks: dict
    model_digest: str

    def to_dict(self) -> dict:
        return {
            "clean_acc": self.clean_acc,
            "robust": dict(self.robust),
            "n_examples": self.n_examples,
            "attacks": dict(self.attacks),
            "model_digest": self.model_digest,
            "aa": "n/a (out of scope)",
        }


def _batched(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def clean_accuracy(model: Model, batch: LabeledBatch, batch_size: int = 1024) -> float:
    """Percent of examples whose argmax prediction matches the label."""
    if batch.n == 0:
        raise ValueError("cannot evaluate an empty split")
    correct = 0
    for idx in _batched(batch.n, batch_size):
        preds = predict_argmax(forward_probs(model, batch.inputs[idx]))
        correct += int((preds == batch.labels[idx]).sum())
    return 100.0 * correct / batch.n


def _attacked_inputs(model: Model, sub: LabeledBatch, kind: str, pgd_cfg: AttackConfig,
                     cw_cfg: CWConfig, fgsm_epsilon: float, rng) -> np.ndarray:
    if kind == "fgsm":
        return fgsm(model, sub, fgsm_epsilon).inputs
    if kind == "pgd":
        return pgd(model, sub, pgd_cfg, rng=rng).inputs
    if kind == "cw2":
        return cw2(
            model,
            sub,
            balance_constant=cw_cfg.balance_constant,
            steps=cw_cfg.steps,
            step_size=cw_cfg.step_size,
            epsilon=cw_cfg.epsilon,
            confidence=cw_cfg.confidence,
        ).inputs
    raise ConfigError(f"unknown attack kind {kind!r} (expected one of {ATTACK_KINDS})")


def robust_accuracy(model: Model, batch: LabeledBatch, kind: str = "pgd", *,
                    pgd_cfg: AttackConfig = DEFAULT_EVAL_PGD, cw_cfg: CWConfig = CWConfig(),
                    fgsm_epsilon: float = 8 / 255, seed: int | None = None,
                    rng: np.random.Generator | None = None, batch_size: int = 512) -> float:
    """White-box robust accuracy: the attack runs against the evaluated model."""
    if batch.n == 0:
        raise ValueError("cannot evaluate an empty split")
    if rng is None:
        rng = np.random.default_rng(pgd_cfg.seed if seed is None else seed)
    correct = 0
    for idx in _batched(batch.n, batch_size):
        sub = batch.subset(idx)
        adv = _attacked_inputs(model, sub, kind, pgd_cfg, cw_cfg, fgsm_epsilon, rng)
        preds = predict_argmax(forward_probs(model, adv))
        correct += int((preds == sub.labels).sum())
    return 100.0 * correct / batch.n


def transfer_eval(target: Model, surrogate: Model, batch: LabeledBatch, kind: str = "pgd", *,
                  pgd_cfg: AttackConfig = DEFAULT_EVAL_PGD, cw_cfg: CWConfig = CWConfig(),
                  fgsm_epsilon: float = 8 / 255, seed: int | None = None,
                  batch_size: int = 512) -> float:
    """Accuracy of the target on adversarial examples crafted on the surrogate."""
    if surrogate.input_shape != target.input_shape:
        raise ConfigError(
            f"transfer: input-shape mismatch (surrogate {surrogate.input_shape}, "
            f"target {target.input_shape})"
        )
    if surrogate.n_classes != target.n_classes:
        raise ConfigError(
            f"transfer: class-count mismatch (surrogate {surrogate.n_classes}, "
            f"target {target.n_classes})"
        )
    if batch.n == 0:
        raise ValueError("cannot evaluate an empty split")
    rng = np.random.default_rng(pgd_cfg.seed if seed is None else seed)
    correct = 0
    for idx in _batched(batch.n, batch_size):
        sub = batch.subset(idx)
        adv = _attacked_inputs(surrogate, sub, kind, pgd_cfg, cw_cfg, fgsm_epsilon, rng)
        preds = predict_argmax(forward_probs(target, adv))
        correct += int((preds == sub.labels).sum())
    return 100.0 * correct / batch.n


def evaluate_model(model: Model, batch: LabeledBatch, attacks=ATTACK_KINDS, *,
                   pgd_cfg: AttackConfig = DEFAULT_EVAL_PGD, cw_cfg: CWConfig = CWConfig(),
                   fgsm_epsilon: float = 8 / 255, seed: int = 0) -> EvalReport:
    """Clean accuracy plus robust accuracy under each requested attack."""
    robust = {}
    used = {}
    for kind in attacks:
        robust[kind] = robust_accuracy(
            model, batch, kind, pgd_cfg=pgd_cfg, cw_cfg=cw_cfg,
            fgsm_epsilon=fgsm_epsilon, seed=seed,
        )
        if kind == "fgsm":
            used[kind] = {"epsilon": fgsm_epsilon}
        elif kind == "pgd":
            used[kind] = pgd_cfg.to_dict()
        else:
            used[kind] = cw_cfg.to_dict()
    return EvalReport(
        clean_acc=clean_accuracy(model, batch),
        robust=robust,
        n_examples=batch.n,
        attacks=used,
        model_digest=model.digest(),
    )


_COLUMNS = ("Clean", "FGSM", "PGD", "CW2", "AA")


def render_report(report: EvalReport, title: str = "") -> str:
    """Fixed-width table in the usual column order; AA is out of scope."""
    values = {
        "Clean": f"{report.clean_acc:.2f}",
        "FGSM": _fmt_pct(report.robust.get("fgsm")),
        "PGD": _fmt_pct(report.robust.get("pgd")),
        "CW2": _fmt_pct(report.robust.get("cw2")),
        "AA": "n/a",
    }
    width = 8
    lines = []
    if title:
        lines.append(title)
    lines.append(" | ".join(c.rjust(width) for c in _COLUMNS))
    lines.append("-+-".join("-" * width for _ in _COLUMNS))
    lines.append(" | ".join(values[c].rjust(width) for c in _COLUMNS))
    lines.append(f"(n={report.n_examples}; AA out of scope; model {report.model_digest[:12]})")
    return "\n".join(lines)


def _fmt_pct(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)


def alpha_sweep(teacher, train: LabeledBatch, test: LabeledBatch, base_cfg,
                alphas=(0.25, 0.5, 0.75, 1.0), student_arch=None,
                include_partitioned: bool = True) -> list:
    """Train one AdaAD student per alpha (plus one dgad student) and tabulate.

    Returns rows of {method, alpha, clean_acc, pgd10_acc}, reading each run's
    best-PGD-10 checkpoint metrics.
    """
    from dataclasses import replace

    from .training import train_distill

    alphas = tuple(float(a) for a in alphas)
    if len(alphas) < 3:
        raise ConfigError("alpha sweep needs a grid of at least 3 points")
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ConfigError("alpha sweep grid must lie in [0, 1]")
    rows = []
    for alpha in alphas:
        cfg = replace(base_cfg, method="adaad", distill=replace(base_cfg.distill, alpha=alpha))
        result = train_distill(teacher, cfg, train, test, student_arch=student_arch)
        rows.append(
            {
                "method": "adaad",
                "alpha": alpha,
                "clean_acc": result.best.metrics["clean_acc"],
                "pgd10_acc": result.best.metrics["pgd10_acc"],
            }
        )
    if include_partitioned:
        cfg = replace(base_cfg, method="dgad")
        result = train_distill(teacher, cfg, train, test, student_arch=student_arch)
        rows.append(
            {
                "method": "dgad",
                "alpha": None,
                "clean_acc": result.best.metrics["clean_acc"],
                "pgd10_acc": result.best.metrics["pgd10_acc"],
            }
        )
    return rows
