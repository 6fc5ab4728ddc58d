"""Command-line shell: train, eval, transfer, sweep, report.

Exit codes: 0 success, 2 configuration errors, 1 anything else; failures
print a machine-readable JSON error record to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset
from .errors import CheckpointError, ConfigError, DataFormatError, NumericError
from .evaluation import alpha_sweep, evaluate_model, render_report, report_to_json, transfer_eval
from .metrics import atomic_write_text, write_metrics
from .training import DISTILL_METHODS, TEACHER_METHODS, train_distill, train_teacher


def _add_common(p):
    p.add_argument("--config", help="INI config file (defaults used when omitted)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable; wins over the file)",
    )
    p.add_argument("--out", help="output directory (overrides output.dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advdistill",
        description="Adversarial distillation at desk scale: training, attacks, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a teacher (pgd_at/trades) or distill a student")
    _add_common(p)

    p = sub.add_parser("eval", help="clean/FGSM/PGD/CW2 evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_common(p)

    p = sub.add_parser("transfer", help="attack a surrogate, measure the target")
    p.add_argument("--target", required=True)
    p.add_argument("--surrogate", required=True)
    _add_common(p)

    p = sub.add_parser("sweep", help="AdaAD alpha grid plus one partitioned run")
    _add_common(p)

    p = sub.add_parser("report", help="re-render saved eval report JSON files")
    p.add_argument("paths", nargs="+")
    return parser


def _resolve(args):
    cfg = cfgmod.load_config(args.config, args.overrides)
    if getattr(args, "out", None):
        cfg["output"]["dir"] = args.out
    return cfg


def _prepare_outdir(cfg) -> Path:
    outdir = Path(cfg["output"]["dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(outdir / "config.resolved", cfgmod.resolved_text(cfg))
    return outdir


def cmd_train(args) -> int:
    cfg = _resolve(args)
    train_cfg = cfgmod.build_train_config(cfg)
    outdir = _prepare_outdir(cfg)
    digest = cfgmod.config_digest(cfg)
    train, test = load_dataset(cfgmod.build_dataset_spec(cfg))

    if train_cfg.method in TEACHER_METHODS:
        arch = cfgmod.build_arch(cfg, "teacher", train.inputs.shape[1:], train.n_classes)
        result = train_teacher(train_cfg, train, test, arch, config_digest=digest)
    else:
        path = cfg["model"]["teacher_checkpoint"]
        if not path:
            raise ConfigError(
                f"model.teacher_checkpoint is required for method {train_cfg.method!r}"
            )
        teacher = load_checkpoint(path).to_model(role="teacher")
        arch = cfgmod.build_arch(cfg, "student", train.inputs.shape[1:], train.n_classes)
        result = train_distill(teacher, train_cfg, train, test, student_arch=arch,
                               config_digest=digest)

    write_metrics(outdir, result.step_rows, result.eval_rows)
    best = result.best
    save_checkpoint(
        best.to_model(), outdir / "checkpoints" / "best.npz",
        epoch=best.epoch, metrics=best.metrics, seed=best.seed, config_digest=digest,
    )
    last = result.history[-1]
    save_checkpoint(
        result.model, outdir / "checkpoints" / "last.npz",
        epoch=last.epoch, metrics=last.checkpoint.metrics, seed=train_cfg.seed,
        config_digest=digest,
    )
    print(
        f"[train] method={train_cfg.method} epochs={train_cfg.epochs} seed={train_cfg.seed} "
        f"best_epoch={best.epoch} clean={best.metrics['clean_acc']:.2f} "
        f"pgd10={best.metrics['pgd10_acc']:.2f} -> {outdir}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    outdir = _prepare_outdir(cfg)
    model = load_checkpoint(args.checkpoint).to_model()
    _, test = load_dataset(cfgmod.build_dataset_spec(cfg))
    attacks = tuple(a.strip() for a in cfg["eval"]["attacks"].split(",") if a.strip())
    report = evaluate_model(
        model, test, attacks,
        pgd_cfg=cfgmod.build_eval_attack(cfg),
        cw_cfg=cfgmod.build_cw_config(cfg),
        fgsm_epsilon=cfgmod.parse_float(cfg["eval"]["epsilon"]),
        seed=int(cfg["eval"]["seed"]),
    )
    text = render_report(report, title=f"checkpoint: {args.checkpoint}")
    atomic_write_text(outdir / "report.txt", text + "\n")
    atomic_write_text(outdir / "report.json", report_to_json(report) + "\n")
    print(text)
    return 0


def cmd_transfer(args) -> int:
    cfg = _resolve(args)
    outdir = _prepare_outdir(cfg)
    target = load_checkpoint(args.target).to_model()
    surrogate = load_checkpoint(args.surrogate).to_model(role="surrogate")
    _, test = load_dataset(cfgmod.build_dataset_spec(cfg))
    pgd_cfg = cfgmod.build_eval_attack(cfg)
    acc = transfer_eval(target, surrogate, test, "pgd", pgd_cfg=pgd_cfg,
                        seed=int(cfg["eval"]["seed"]))
    doc = {
        "target": args.target,
        "surrogate": args.surrogate,
        "attack": pgd_cfg.to_dict(),
        "transfer_pgd_acc": acc,
        "n_examples": test.n,
    }
    atomic_write_text(outdir / "transfer.json", json.dumps(doc, indent=2) + "\n")
    print(f"[transfer] pgd acc on target: {acc:.2f} (surrogate-crafted, n={test.n})")
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    train_cfg = cfgmod.build_train_config(cfg)
    if train_cfg.method not in DISTILL_METHODS:
        raise ConfigError("sweep requires a distillation method in train.method")
    outdir = _prepare_outdir(cfg)
    path = cfg["model"]["teacher_checkpoint"]
    if not path:
        raise ConfigError("model.teacher_checkpoint is required for sweep")
    teacher = load_checkpoint(path).to_model(role="teacher")
    train, test = load_dataset(cfgmod.build_dataset_spec(cfg))
    arch = cfgmod.build_arch(cfg, "student", train.inputs.shape[1:], train.n_classes)
    rows = alpha_sweep(teacher, train, test, train_cfg,
                       alphas=cfgmod.sweep_alphas(cfg), student_arch=arch)
    lines = ["method,alpha,clean_acc,pgd10_acc"]
    for r in rows:
        alpha = "" if r["alpha"] is None else repr(r["alpha"])
        lines.append(f"{r['method']},{alpha},{repr(r['clean_acc'])},{repr(r['pgd10_acc'])}")
        print(f"[sweep] {r['method']:<6} alpha={r['alpha']}: clean={r['clean_acc']:.2f} "
              f"pgd10={r['pgd10_acc']:.2f}")
    atomic_write_text(outdir / "sweep.csv", "\n".join(lines) + "\n")
    return 0


def cmd_report(args) -> int:
    from .evaluation import EvalReport

    for path in args.paths:
        doc = json.loads(Path(path).read_text())
        report = EvalReport(
            clean_acc=doc["clean_acc"],
            robust=doc["robust"],
            n_examples=doc["n_examples"],
            attacks=doc["attacks"],
            model_digest=doc["model_digest"],
        )
        print(render_report(report, title=str(path)))
    return 0


_HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return 2
    except (DataFormatError, CheckpointError, NumericError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
