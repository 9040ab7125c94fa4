"""Classification and regression metrics for predicted perturbation effects.

Classification works on per-(cell, gene) up-regulation labels,
``(value - baseline) > threshold``, micro-averaged.  Regression metrics are
computed on effects (value - baseline), flattened over cells and genes.
"""

from __future__ import annotations

import io
import math
from dataclasses import astuple, dataclass, fields
from typing import Dict, List, Sequence, Tuple

import numpy as np

from trpoppo import kernels

COLUMNS = ("Accuracy", "Precision", "Recall", "F1", "AUPRC", "MSE", "RMSE", "MAE", "R²", "PearsonCorr")
DEFAULT_THRESHOLD = 0.1


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auprc: float
    mse: float
    rmse: float
    mae: float
    r2: float
    pearson: float

    def as_row(self) -> Tuple[float, ...]:
        return astuple(self)

    def to_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Dict[str, float]) -> "MetricReport":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})

    @classmethod
    def mean(cls, reports: Sequence["MetricReport"]) -> "MetricReport":
        if not reports:
            raise ValueError("no reports to average")
        rows = np.array([r.as_row() for r in reports], dtype=np.float64)
        return cls(*(float(x) for x in rows.mean(axis=0)))


@dataclass(frozen=True, eq=False)
class PredictionSet:
    predicted: np.ndarray
    observed: np.ndarray
    baseline: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.predicted), np.shape(self.observed), np.shape(self.baseline)}
        if len(shapes) != 1:
            raise ValueError(f"shape mismatch: {sorted(shapes)}")
        for name in ("predicted", "observed", "baseline"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")


def effect_labels(predicted, observed, baseline, threshold: float = DEFAULT_THRESHOLD):
    predicted, observed, baseline = (np.asarray(x, dtype=np.float64) for x in (predicted, observed, baseline))
    if not predicted.shape == observed.shape == baseline.shape:
        raise ValueError("predicted, observed and baseline must share a shape")
    return (
        ((predicted - baseline) > threshold).astype(np.int64),
        ((observed - baseline) > threshold).astype(np.int64),
    )


def classification_metrics(pred_labels, true_labels) -> Tuple[float, float, float, float]:
    """(accuracy, precision, recall, f1); precision is 0 with no positive
    predictions, f1 is 0 when precision + recall is 0."""
    p = np.asarray(pred_labels).reshape(-1).astype(bool)
    t = np.asarray(true_labels).reshape(-1).astype(bool)
    if p.size == 0 or p.size != t.size:
        raise ValueError("need two non-empty label vectors of equal length")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    acc = (tp + tn) / p.size
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return acc, prec, rec, f1


def auprc(scores, labels) -> float:
    """Step-interpolated area under the precision-recall curve.

    Scores are swept in descending order; tied scores share one threshold.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.float64)
    if s.size != y.size:
        raise ValueError("scores and labels differ in length")
    if not np.any(y > 0):
        raise ValueError("AUPRC is undefined without positive labels")
    order = np.argsort(-s, kind="stable")
    return kernels.auprc_sorted(s[order], y[order])


@dataclass(frozen=True)
class RegressionMetrics:
    mse: float
    rmse: float
    mae: float
    r2: float
    pearson: float
    undefined: Tuple[str, ...] = ()


def regression_metrics(predicted, observed) -> RegressionMetrics:
    """MSE, RMSE, MAE, R² and Pearson r over flattened inputs.

    R² and Pearson come back as NaN (and are listed in ``undefined``) when the
    observed values are constant; Pearson also when predictions are constant.
    """
    yhat = np.asarray(predicted, dtype=np.float64).reshape(-1)
    y = np.asarray(observed, dtype=np.float64).reshape(-1)
    if yhat.size != y.size or y.size < 2:
        raise ValueError("need equal-length inputs with at least two values")
    err = yhat - y
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    undefined = []
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = math.nan
        undefined.append("r2")
    else:
        r2 = 1.0 - float(np.sum(err * err)) / ss_tot
    sy = y.std()
    syhat = yhat.std()
    if sy == 0.0 or syhat == 0.0:
        pearson = math.nan
        undefined.append("pearson")
    else:
        cov = float(np.mean((yhat - yhat.mean()) * (y - y.mean())))
        pearson = float(np.clip(cov / (syhat * sy), -1.0, 1.0))
    return RegressionMetrics(mse, math.sqrt(mse), mae, r2, pearson, tuple(undefined))


def build_report(preds: PredictionSet, threshold: float = DEFAULT_THRESHOLD) -> MetricReport:
    pred_lab, true_lab = effect_labels(preds.predicted, preds.observed, preds.baseline, threshold)
    acc, prec, rec, f1 = classification_metrics(pred_lab, true_lab)
    pred_effect = preds.predicted - preds.baseline
    obs_effect = preds.observed - preds.baseline
    area = auprc(pred_effect, true_lab) if np.any(true_lab) else math.nan
    reg = regression_metrics(pred_effect, obs_effect)
    return MetricReport(acc, prec, rec, f1, area, reg.mse, reg.rmse, reg.mae, reg.r2, reg.pearson)


# -- rendering ----------------------------------------------------------------


def report_csv(rows: Sequence[Tuple[str, str, MetricReport]]) -> str:
    """CSV with columns Algorithm, Modality, then the ten metric columns."""
    out = io.StringIO()
    out.write(",".join(("Algorithm", "Modality") + COLUMNS) + "\n")
    for algo, modality, rep in rows:
        out.write(",".join([algo, modality] + [repr(float(x)) for x in rep.as_row()]) + "\n")
    return out.getvalue()


def render_table(rows: Sequence[Tuple[str, str, MetricReport]]) -> str:
    header = ["Algorithm", "Modality", *COLUMNS]
    body: List[List[str]] = [[a, m, *(f"{x:.4f}" for x in r.as_row())] for a, m, r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) if i < 2 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(b, widths))))
    return "\n".join(lines) + "\n"
