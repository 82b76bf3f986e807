"""Trace CSV emission and parsing.

Columns are fixed: ``k, alpha_k, mean_gap, mean_grad_sq, var_mk, replications``.
Floats are written with ``repr`` (shortest round-trip form), missing values
as empty fields, so ``read_trace_csv(write_trace_csv(t))`` reproduces every
numeric column exactly.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from .sgfd import Trace

COLUMNS = ("k", "alpha_k", "mean_gap", "mean_grad_sq", "var_mk", "replications")


def _fmt(value) -> str:
    if value is None:
        return ""
    value = float(value)
    return "" if math.isnan(value) else repr(value)


def trace_to_csv(trace: Trace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    var = trace.var_mk
    for i in range(len(trace)):
        writer.writerow([
            str(int(trace.k[i])),
            _fmt(trace.alpha[i]),
            _fmt(trace.mean_gap[i]),
            _fmt(trace.mean_grad_sq[i]),
            "" if var is None else _fmt(var[i]),
            str(int(trace.replications)),
        ])
    return buf.getvalue()


def write_trace_csv(trace: Trace, path) -> Path:
    path = Path(path)
    path.write_text(trace_to_csv(trace), encoding="utf-8", newline="")
    return path


def _parse(field: str) -> float:
    return float("nan") if field == "" else float(field)


def read_trace_csv(path) -> Trace:
    """Parse a trace CSV; raises ``ValueError`` on a malformed file."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != COLUMNS:
        raise ValueError(f"{path}: header must be {','.join(COLUMNS)}")
    body = rows[1:]
    for n, row in enumerate(body, start=2):
        if len(row) != len(COLUMNS):
            raise ValueError(f"{path}:{n}: expected {len(COLUMNS)} fields, got {len(row)}")
    try:
        k = np.array([int(r[0]) for r in body], dtype=np.int64)
        cols = [np.array([_parse(r[j]) for r in body]) for j in range(1, 5)]
        reps = {int(r[5]) for r in body}
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    if len(reps) > 1:
        raise ValueError(f"{path}: replication count changes between rows")
    var = cols[3]
    has_var = bool(np.any(~np.isnan(var))) if var.size else False
    return Trace(
        k=k, alpha=cols[0], mean_gap=cols[1], mean_grad_sq=cols[2],
        replications=reps.pop() if reps else 0, var_mk=var if has_var else None,
    )
