"""Trace-level evaluation measures: RMSE, MAE, Pearson CC, Lin CCC.

All moments use the population convention (1/N), so Lin's coefficient is
exactly 1 on identical non-constant series.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetric(ValueError):
    """A metric has no defined value on this input (e.g. constant series)."""


def _pair(pred, truth, min_len=1):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(f"series shapes differ: {pred.shape} vs {truth.shape}")
    if pred.size < min_len:
        raise ValueError(f"need at least {min_len} samples, got {pred.size}")
    return pred, truth


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def pearson_cc(pred, truth) -> float:
    pred, truth = _pair(pred, truth, min_len=2)
    p = pred - pred.mean()
    t = truth - truth.mean()
    denom = np.sqrt(np.sum(p * p) * np.sum(t * t))
    if denom == 0.0:
        raise UndefinedMetric("Pearson correlation is undefined on a constant series")
    return float(np.sum(p * t) / denom)


def lin_ccc(pred, truth) -> float:
    """2*cov / (var_p + var_t + (mean_p - mean_t)^2), population moments.

    Equals 1 iff the series are identical; a constant-vs-varying pair scores
    exactly 0 (zero covariance); two equal constants score 1 by convention.
    """
    pred, truth = _pair(pred, truth, min_len=2)
    mp, mt = pred.mean(), truth.mean()
    vp = np.mean((pred - mp) ** 2)
    vt = np.mean((truth - mt) ** 2)
    cov = np.mean((pred - mp) * (truth - mt))
    denom = vp + vt + (mp - mt) ** 2
    if denom == 0.0:
        return 1.0
    return float(2.0 * cov / denom)


@dataclass(frozen=True)
class EvalReport:
    n: int
    rmse: float
    mae: float
    cc: float
    ccc: float

    def csv_row(self) -> str:
        return f"{self.n},{self.rmse:.12g},{self.mae:.12g},{self.cc:.12g},{self.ccc:.12g}"


def evaluate(pred, truth) -> EvalReport:
    pred, truth = _pair(pred, truth, min_len=2)
    return EvalReport(
        n=pred.size,
        rmse=rmse(pred, truth),
        mae=mae(pred, truth),
        cc=pearson_cc(pred, truth),
        ccc=lin_ccc(pred, truth),
    )
