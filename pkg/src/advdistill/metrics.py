"""Metrics persistence: one CSV/JSON pair per run, written atomically.

Schema v1.  Step records carry the loss components and subset/swap counts;
eval records carry per-epoch clean and PGD-10 accuracy.  Both record kinds
share one CSV (the ``record`` column tells them apart; unused cells are
empty).  Floats are serialized with ``repr`` so identical runs produce
byte-identical files.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

SCHEMA_VERSION = 1

CSV_COLUMNS = (
    "record",
    "schema",
    "epoch",
    "step",
    "lr",
    "loss_total",
    "loss_st",
    "loss_at",
    "loss_pcr",
    "n_st",
    "n_at",
    "n_swap_st",
    "n_swap_at",
    "n_pcr_pairs",
    "batch_n",
    "clean_acc",
    "pgd10_acc",
)


def atomic_write_text(path, text: str) -> None:
    """Write-temp-then-rename so interrupted runs never leave partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(step_rows, eval_rows) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for row in list(step_rows) + list(eval_rows):
        filled = dict(row)
        filled.setdefault("schema", SCHEMA_VERSION)
        lines.append(",".join(_cell(filled.get(col)) for col in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def rows_to_json(step_rows, eval_rows) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "steps": list(step_rows),
        "evals": list(eval_rows),
    }
    return json.dumps(doc, indent=2)


def write_metrics(outdir, step_rows, eval_rows) -> None:
    outdir = Path(outdir)
    atomic_write_text(outdir / "metrics.csv", rows_to_csv(step_rows, eval_rows))
    atomic_write_text(outdir / "metrics.json", rows_to_json(step_rows, eval_rows))
