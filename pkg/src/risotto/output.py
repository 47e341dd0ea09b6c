import csv
import io
import json
import math
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import click
import numpy as np


class OutputFormat(Enum):
    csv = "csv"
    json = "json"


def _plain(value: Any) -> Any:
    """Converts numpy values to JSON-compatible Python values. NaN becomes
    None."""
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def render_csv(rows: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(
            {c: "" if row.get(c) is None else _plain(row.get(c)) for c in columns}
        )
    return buffer.getvalue()


def render_json(document: Any) -> str:
    return json.dumps(_plain(document), indent=2) + "\n"


def emit(text: str, out: Optional[Path]) -> None:
    """Writes ``text`` to ``out``, or to stdout when there is no path."""
    if out is None:
        click.echo(text, nl=False)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def sibling(out: Optional[Path], tag: str, suffix: str) -> Optional[Path]:
    """``results.csv`` -> ``results.<tag><suffix>``; None stays None."""
    if out is None:
        return None
    return out.with_name(f"{out.stem}.{tag}{suffix}")


def write_table(
    rows: Sequence[Mapping[str, Any]],
    columns: Sequence[str],
    out: Optional[Path],
    fmt: OutputFormat,
) -> None:
    if fmt == OutputFormat.csv:
        emit(render_csv(rows, columns), out)
    else:
        emit(render_json([{c: row.get(c) for c in columns} for row in rows]), out)


NORM_COLUMNS = ("scheme", "L", "width", "mean", "stderr", "theory")
COV_COLUMNS = (
    "layer",
    "mean_cov",
    "stderr",
    "mean_corr",
    "corr_stderr",
    "effective_corr",
    "bound",
)
LEMMA_COLUMNS = ("rho", "g", "h", "c", "mc_mean", "mc_stderr")
TRAIN_COLUMNS = ("step", "lr", "loss")
SWEEP_COLUMNS = ("alpha", "final_loss", "final_accuracy", "diverged")
DI_COLUMNS = (
    "block",
    "min_effective_sv",
    "max_effective_sv",
    "effective_residual",
    "raw_max_sv",
    "raw_zero_svs",
    "fd_gap",
    "ambiguous",
)
