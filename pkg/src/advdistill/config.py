"""Run configuration: a flat, sectioned INI document with full defaults.

Precedence is command-line overrides > file > defaults.  Unknown keys are
rejected by name, and the fully resolved document is echoed into the output
directory before any work starts, so a run is reproducible from its output
alone.  Fractions like ``8/255`` are accepted wherever a float is.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import replace
from pathlib import Path

from .attacks import AttackConfig
from .data import DatasetSpec
from .errors import ConfigError
from .evaluation import DEFAULT_EVAL_PGD, CWConfig
from .losses import DistillConfig
from .models import ArchSpec
from .training import TrainConfig

# Every known key with its default (as written in a config file).
DEFAULTS: dict = {
    "data": {
        "source": "synth_blobs",
        "n_train": "1024",
        "n_test": "256",
        "classes": "3",
        "shape": "12x12x1",
        "separation": "0.5",
        "template_spread": "0.3",
        "noise_uniform": "0.0",
        "noise_gauss": "0.15",
        "seed": "0",
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "root": "",
    },
    "model": {
        "teacher_arch": "cnn",
        "student_arch": "mlp",
        "hidden": "64",
        "channels": "8,16",
        "teacher_checkpoint": "",
    },
    "train": {
        "method": "dgad",
        "epochs": "200",
        "lr": "0.1",
        "momentum": "0.9",
        "weight_decay": "5e-4",
        "lr_drop_epochs": "100,150",
        "lr_drop_factor": "0.1",
        "batch_size": "128",
        "seed": "0",
        "eval_every": "1",
        "augment": "false",
        "trades_lambda": "6.0",
    },
    "distill": {
        "alpha": "1.0",
        "tau": "1.0",
        "beta": "5.0",
        "label_mode": "swap",
        "pcr_all_pairs": "false",
    },
    "attack": {
        "epsilon": "8/255",
        "step_size": "2/255",
        "steps": "10",
        "norm": "linf",
        "objective": "auto",
        "random_start": "false",
    },
    "eval": {
        "attacks": "fgsm,pgd,cw2",
        "epsilon": "8/255",
        "step_size": "2/255",
        "steps": "10",
        "random_start": "true",
        "seed": "0",
        "cw_constant": "0.1",
        "cw_steps": "50",
        "cw_step_size": "0.01",
        "sweep_alphas": "0.25,0.5,0.75,1.0",
    },
    "output": {
        "dir": "runs/out",
    },
}

SECTION_ORDER = tuple(DEFAULTS)


def parse_float(text: str) -> float:
    """Parse a float, accepting simple fractions such as ``8/255``."""
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple:
    text = text.strip()
    return tuple(int(p) for p in text.split(",") if p.strip()) if text else ()


def _parse_floats(text: str) -> tuple:
    return tuple(parse_float(p) for p in text.split(",") if p.strip())


def _parse_shape(text: str) -> tuple:
    return tuple(int(p) for p in text.replace("x", ",").split(",") if p.strip())


def load_config(path=None, overrides=()) -> dict:
    """Merge defaults, an optional INI file, and ``section.key=value`` overrides."""
    cfg = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        text = Path(path).read_text()
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            if section not in cfg:
                raise ConfigError(f"{path}: unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in cfg[section]:
                    raise ConfigError(f"{path}: unknown config key {section}.{key}")
                cfg[section][key] = value
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        cfg[section][key] = value
    return cfg


def resolved_text(cfg: dict) -> str:
    """Canonical INI rendering of a fully resolved config."""
    out = io.StringIO()
    for section in SECTION_ORDER:
        out.write(f"[{section}]\n")
        for key in DEFAULTS[section]:
            out.write(f"{key} = {cfg[section][key]}\n")
        out.write("\n")
    return out.getvalue()


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(resolved_text(cfg).encode()).hexdigest()


# ---------------------------------------------------------------------------
# builders


def build_dataset_spec(cfg: dict) -> DatasetSpec:
    d = cfg["data"]
    return DatasetSpec(
        source=d["source"],
        n_train=int(d["n_train"]),
        n_test=int(d["n_test"]),
        classes=int(d["classes"]),
        shape=_parse_shape(d["shape"]),
        separation=parse_float(d["separation"]),
        template_spread=parse_float(d["template_spread"]),
        noise_uniform=parse_float(d["noise_uniform"]),
        noise_gauss=parse_float(d["noise_gauss"]),
        seed=int(d["seed"]),
        train_images=d["train_images"] or None,
        train_labels=d["train_labels"] or None,
        test_images=d["test_images"] or None,
        test_labels=d["test_labels"] or None,
        root=d["root"] or None,
    )


def build_arch(cfg: dict, which: str, input_shape: tuple, n_classes: int) -> ArchSpec:
    m = cfg["model"]
    name = m[f"{which}_arch"]
    return ArchSpec(
        name=name,
        input_shape=input_shape,
        n_classes=n_classes,
        hidden=int(m["hidden"]),
        channels=tuple(int(c) for c in m["channels"].split(",")),
    )


def build_attack_config(cfg: dict) -> AttackConfig:
    a = cfg["attack"]
    objective = a["objective"]
    return AttackConfig(
        epsilon=parse_float(a["epsilon"]),
        step_size=parse_float(a["step_size"]),
        steps=int(a["steps"]),
        norm=a["norm"],
        # "auto" defers to the training method; stored as ce until replaced
        objective="ce_labels" if objective == "auto" else objective,
        random_start=parse_bool(a["random_start"]),
    )


def build_eval_attack(cfg: dict) -> AttackConfig:
    e = cfg["eval"]
    return AttackConfig(
        epsilon=parse_float(e["epsilon"]),
        step_size=parse_float(e["step_size"]),
        steps=int(e["steps"]),
        objective="ce_labels",
        random_start=parse_bool(e["random_start"]),
        seed=int(e["seed"]),
    )


def build_cw_config(cfg: dict) -> CWConfig:
    e = cfg["eval"]
    return CWConfig(
        balance_constant=parse_float(e["cw_constant"]),
        steps=int(e["cw_steps"]),
        step_size=parse_float(e["cw_step_size"]),
        epsilon=parse_float(e["epsilon"]),
    )


def build_distill_config(cfg: dict) -> DistillConfig:
    d = cfg["distill"]
    return DistillConfig(
        method=cfg["train"]["method"] if cfg["train"]["method"] in
        ("kd", "ard", "rslad", "adaad", "dgad") else "dgad",
        alpha=parse_float(d["alpha"]),
        tau=parse_float(d["tau"]),
        beta=parse_float(d["beta"]),
        label_mode=d["label_mode"],
        pcr_all_pairs=parse_bool(d["pcr_all_pairs"]),
    )


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        method=t["method"],
        epochs=int(t["epochs"]),
        lr=parse_float(t["lr"]),
        momentum=parse_float(t["momentum"]),
        weight_decay=parse_float(t["weight_decay"]),
        lr_drop_epochs=_parse_ints(t["lr_drop_epochs"]),
        lr_drop_factor=parse_float(t["lr_drop_factor"]),
        batch_size=int(t["batch_size"]),
        seed=int(t["seed"]),
        eval_every=int(t["eval_every"]),
        augment=parse_bool(t["augment"]),
        trades_lambda=parse_float(t["trades_lambda"]),
        attack=build_attack_config(cfg),
        distill=build_distill_config(cfg),
        eval_attack=build_eval_attack(cfg),
    ).validate()


def sweep_alphas(cfg: dict) -> tuple:
    return _parse_floats(cfg["eval"]["sweep_alphas"])
