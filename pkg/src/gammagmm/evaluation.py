"""Evaluation metrics: MAE, F1 deterioration, error rates, calibration curves.

Predictions from a contamination estimate flag the top round(gamma_hat * N)
scores (half-away-from-zero rounding, stable descending rank). F1 treats the
anomaly class as positive; an undefined F1 (no predicted or no actual
positives) is reported as 0 and marked, and the relative deterioration

    (F1(gamma_true) - F1(gamma_hat)) / F1(gamma_hat)

is undefined whenever F1(gamma_hat) = 0. Undefined rows carry NaN and are
excluded from aggregate means.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)


def mae(gamma_hat: float, gamma_true: float) -> float:
    """Absolute error between a point estimate and the true contamination."""
    for name, v in (("gamma_hat", gamma_hat), ("gamma_true", gamma_true)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {v}")
    return abs(gamma_hat - gamma_true)


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def threshold_predictions(scores: np.ndarray, gamma_hat: float) -> np.ndarray:
    """Flag the top round(gamma_hat * N) scores; ties keep the earlier index."""
    if not 0.0 <= gamma_hat <= 1.0:
        raise ValueError(f"gamma_hat must be in [0, 1], got {gamma_hat}")
    s = np.asarray(scores, dtype=float)
    n_flag = _round_half_away(gamma_hat * s.shape[0])
    preds = np.zeros(s.shape[0], dtype=int)
    if n_flag > 0:
        top = np.argsort(-s, kind="stable")[:n_flag]
        preds[top] = 1
    return preds


def f1_score(predictions: np.ndarray, labels: np.ndarray) -> tuple[float, bool]:
    """(F1 with anomaly as positive, defined flag); undefined is reported as 0."""
    p = np.asarray(predictions, dtype=int)
    y = np.asarray(labels, dtype=int)
    tp = int(((p == 1) & (y == 1)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0, False
    return 2.0 * tp / denom, True


def f1_deterioration(
    detector_scores: np.ndarray,
    labels: np.ndarray,
    gamma_true: float,
    gamma_hat: float,
) -> float:
    """Relative F1 drop from thresholding at gamma_hat instead of gamma_true.

    NaN when F1(gamma_hat) = 0; identical predictions give exactly 0.
    """
    f1_true, _ = f1_score(threshold_predictions(detector_scores, gamma_true), labels)
    f1_hat, _ = f1_score(threshold_predictions(detector_scores, gamma_hat), labels)
    if f1_hat == 0.0:
        logger.warning("F1 at the estimate is 0; deterioration undefined")
        return float("nan")
    return (f1_true - f1_hat) / f1_hat


def fpr_fnr(predictions: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """False positive and false negative rates; NaN when a class is absent."""
    p = np.asarray(predictions, dtype=int)
    y = np.asarray(labels, dtype=int)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan"), float("nan")
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    return fp / n_neg, fn / n_pos


def select_best_detectors(
    score_columns: np.ndarray, labels: np.ndarray, gamma_true: float
) -> list[int]:
    """Indices of the detectors with the greatest F1 at the true contamination.

    All ties are kept; F1 is computed from each column's own ranking.
    """
    y = np.asarray(labels, dtype=int)
    cols = np.asarray(score_columns, dtype=float)
    f1s = [
        f1_score(threshold_predictions(cols[:, j], gamma_true), y)[0]
        for j in range(cols.shape[1])
    ]
    best = max(f1s)
    return [j for j, v in enumerate(f1s) if v == best]


def calibration_curve(
    posteriors: list, gamma_trues: list[float], v_grid: np.ndarray | None = None
) -> list[tuple[float, float]]:
    """Central-interval coverage: expected probability 2v vs empirical frequency.

    For each half-width v, the empirical frequency is the fraction of datasets
    whose true contamination lies inside [q(0.5 - v), q(0.5 + v)] of its
    posterior (closed interval, sample quantiles).
    """
    if len(posteriors) != len(gamma_trues) or not posteriors:
        raise ValueError("need one true gamma per posterior, at least one of each")
    if v_grid is None:
        v_grid = np.linspace(0.0, 0.5, 51)
    points = []
    for v in np.asarray(v_grid, dtype=float):
        hits = 0
        for gp, g_true in zip(posteriors, gamma_trues):
            lo, hi = gp.quantile(0.5 - v), gp.quantile(0.5 + v)
            hits += bool(lo <= g_true <= hi)
        points.append((2.0 * v, hits / len(posteriors)))
    return points


def rank_methods(mae_table: dict[str, list[float]]) -> dict[str, float]:
    """Mean rank per method from a method -> per-dataset MAE table.

    Ranks are per dataset, ascending in MAE, ties sharing the mean rank.
    """
    methods = list(mae_table)
    if not methods:
        return {}
    n_datasets = len(mae_table[methods[0]])
    if any(len(v) != n_datasets for v in mae_table.values()):
        raise ValueError("all methods need the same number of datasets")
    ranks = np.zeros(len(methods))
    for d in range(n_datasets):
        col = np.array([mae_table[m][d] for m in methods])
        ranks += rankdata(col, method="average")
    return {m: float(r / n_datasets) for m, r in zip(methods, ranks)}


@dataclass(frozen=True)
class EvalRow:
    """One (dataset, method) line of the benchmark report."""

    dataset: str
    method: str
    gamma_hat: float
    gamma_true: float
    mae: float
    f1_true: float
    f1_hat: float
    f1_deterioration: float
    fpr: float
    fnr: float
