"""Metrics CSV and plot-series files."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .drivers import Trace

CSV_COLUMNS = ("k", "s", "f", "grad_norm", "vr_grad_norm", "radius", "step_norm", "model_dec", "actual_dec", "evals")
INT_COLUMNS = {"k", "s", "evals"}


def format_float(v: float) -> str:
    # 17 significant digits round-trip every double exactly
    return "%.17g" % v


def metrics_text(trace: Trace) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for r in trace.records:
        lines.append(",".join(
            str(getattr(r, c)) if c in INT_COLUMNS else format_float(getattr(r, c)) for c in CSV_COLUMNS
        ))
    return "\n".join(lines) + "\n"


def write_metrics(trace: Trace, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics_text(trace))
    return path


def read_metrics(path: Union[str, Path]) -> dict[str, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = list(zip(*rows)) if rows else [() for _ in header]
    return {
        name: np.array([int(v) for v in col] if name in INT_COLUMNS else [float(v) for v in col])
        for name, col in zip(header, cols)
    }


SERIES_METRICS = ("f", "grad_norm_sq")


def series_text(trace: Trace, metric: str = "f") -> str:
    """Two whitespace-separated columns: cumulative evaluations and the metric."""
    if metric not in SERIES_METRICS:
        raise ValueError(f"unknown series metric {metric!r}")
    y = trace.column("f") if metric == "f" else trace.column("grad_norm") ** 2
    return "".join(f"{r.evals} {format_float(v)}\n" for r, v in zip(trace.records, y))
