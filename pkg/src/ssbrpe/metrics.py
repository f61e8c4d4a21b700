"""Log- and linear-scale evaluation of room parameter estimates."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DataError, DomainError


@dataclass
class MetricsReport:
    log_mse: float
    log_mae: float
    pearson_rho: float
    mean_mult: float
    linear_median_abs_err: float
    linear_mae: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True)

    def format_table(self, unit: str = "") -> str:
        u = f" ({unit})" if unit else ""
        rows = [
            ("MSE (log10)", self.log_mse), ("MAE (log10)", self.log_mae),
            ("Pearson rho", self.pearson_rho), ("MeanMult", self.mean_mult),
            (f"Median |err|{u}", self.linear_median_abs_err), (f"MAE{u}", self.linear_mae),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {value:>12.4f}" for name, value in rows]
        return "\n".join(lines + [f"{'n':<{width}}  {self.n:>12d}"])


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise DataError("pearson needs two equal-length samples with n >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise DataError("correlation undefined for zero-variance input")
    return float(np.clip(np.dot(dx, dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def evaluate(pred_linear: Sequence[float], true_linear: Sequence[float]) -> MetricsReport:
    """Metrics on log10 residuals plus median/mean absolute error in linear units.

    MeanMult is ``10 ** mean|log10(pred / true)|``, the geometric-mean
    multiplicative error.
    """
    pred = np.asarray(pred_linear, dtype=np.float64)
    true = np.asarray(true_linear, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size < 2:
        raise DataError("evaluate needs equal-length 1-D inputs with n >= 2")
    if np.any(pred <= 0) or np.any(true <= 0):
        raise DomainError("log-scale metrics need positive values")
    p, t = np.log10(pred), np.log10(true)
    resid = p - t
    abs_lin = np.abs(pred - true)
    log_mae = float(np.mean(np.abs(resid)))
    return MetricsReport(
        log_mse=float(np.mean(resid * resid)),
        log_mae=log_mae,
        pearson_rho=pearson(p, t),
        mean_mult=float(10.0 ** log_mae),
        linear_median_abs_err=float(np.median(abs_lin)),
        linear_mae=float(np.mean(abs_lin)),
        n=int(pred.size),
    )


def _num(cell: str) -> Optional[float]:
    return float(cell) if cell.strip() else None


def load_reference_table() -> List[Dict]:
    """Published comparison rows; blank cells (unrecoverable in the source) load as ``None``."""
    text = resources.files("ssbrpe.data").joinpath("reference_table.csv").read_text()
    rows = []
    for r in csv.DictReader(text.splitlines()):
        row = {"table": int(r["table"]), "target": r["target"], "method": r["method"], "supervision": r["supervision"]}
        for k, v in r.items():
            if k not in row:
                row[k] = _num(v)
        rows.append(row)
    return rows


def reference_row(method: str, target: str, table: int = 1) -> Dict:
    for r in load_reference_table():
        if r["method"] == method and r["target"] == target and r["table"] == table:
            return r
    raise KeyError(f"no reference row for {method!r}/{target!r} in table {table}")


FIELDS = ("log_mse", "log_mae", "pearson_rho", "mean_mult", "linear_median", "linear_mae")


def compare_to_reference(report: MetricsReport, target: str, reference: Optional[List[Dict]] = None,
                         table: int = 1) -> str:
    """Side-by-side text of this run against the published rows for ``target``."""
    reference = reference if reference is not None else load_reference_table()
    ours = [report.log_mse, report.log_mae, report.pearson_rho, report.mean_mult,
            report.linear_median_abs_err, report.linear_mae]
    head = f"{'method':<26}" + "".join(f"{f:>14}" for f in FIELDS)
    lines = [head, "-" * len(head), f"{'this run':<26}" + "".join(f"{v:>14.4f}" for v in ours)]
    for r in reference:
        if r["target"] != target or r["table"] != table:
            continue
        cells = "".join(f"{r[f]:>14.4f}" if r[f] is not None else f"{'-':>14}" for f in FIELDS)
        lines.append(f"{r['method']:<26}{cells}")
    return "\n".join(lines)
