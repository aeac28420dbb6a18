"""Classical univariate threshold estimators used as contamination baselines.

Each estimator turns one score column into a decision threshold; the implied
contamination estimate is the fraction of scores strictly above it (so a
threshold at the maximum yields exactly 0). Multi-detector matrices are
handled by estimating per column and averaging the per-column fractions.

Quantiles use linear interpolation (numpy's default, type 7) and moments use
population (1/N) variance unless a test statistic requires the sample form.
Constant input is degenerate for every rule and yields gamma_hat = 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

MIN_SCORES = 4


class ThresholdError(ValueError):
    """Bad scores (NaN, too few) handed to a threshold estimator."""


def _check(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=float).ravel()
    if s.shape[0] < MIN_SCORES:
        raise ThresholdError(f"need at least {MIN_SCORES} scores, got {s.shape[0]}")
    if not np.isfinite(s).all():
        raise ThresholdError("scores contain NaN/Inf")
    return s


def _degenerate(s: np.ndarray) -> bool:
    return s.max() == s.min()


def exceedance_fraction(scores: np.ndarray, threshold: float) -> float:
    s = np.asarray(scores, dtype=float)
    return float((s > threshold).sum() / s.shape[0])


def iqr_threshold(scores) -> float:
    """Q3 + 1.5 * (Q3 - Q1)."""
    s = _check(scores)
    q1, q3 = np.quantile(s, [0.25, 0.75])
    return float(q3 + 1.5 * (q3 - q1))


def zscore_threshold(scores) -> float:
    """Flag z-scores above 3: threshold = mean + 3 * std."""
    s = _check(scores)
    return float(s.mean() + 3.0 * s.std())


def chauvenet_threshold(scores) -> float:
    """Chauvenet's criterion on the upper tail.

    A point is rejected when N * P(|Z| > |z|) < 0.5; the smallest such upper
    score is mean + std * Phi^-1(1 - 1/(4N)).
    """
    s = _check(scores)
    z_crit = stats.norm.ppf(1.0 - 0.25 / s.shape[0])
    return float(s.mean() + z_crit * s.std())


def mad_threshold(scores) -> float:
    """Mean plus the median absolute deviation over the standard deviation."""
    s = _check(scores)
    if _degenerate(s):
        return float(s[0])
    mad = np.median(np.abs(s - np.median(s)))
    return float(s.mean() + mad / s.std())


def karcher_threshold(scores) -> float:
    """Karcher mean plus one standard deviation (arithmetic mean on scalars)."""
    s = _check(scores)
    return float(s.mean() + s.std())


def _thompson_tau(n: int, alpha: float = 0.05) -> float:
    t = stats.t.ppf(1.0 - alpha / 2.0, n - 2)
    return float(t * (n - 1) / (np.sqrt(n) * np.sqrt(n - 2 + t * t)))


def mtt_threshold(scores, alpha: float = 0.05) -> float:
    """Modified Thompson Tau: iteratively reject the most extreme point.

    Rejection uses sample (ddof=1) standard deviation and the tau critical
    value from the Student-t quantile; the threshold is the maximum retained
    score, so only upper-tail rejections affect the exceedance count.
    """
    s = np.sort(_check(scores))
    kept = list(s)
    while len(kept) > 2:
        arr = np.array(kept)
        sd = arr.std(ddof=1)
        if sd == 0:
            break
        dev = np.abs(arr - arr.mean())
        i = int(np.argmax(dev))
        if dev[i] > _thompson_tau(len(kept), alpha) * sd:
            kept.pop(i)
        else:
            break
    return float(max(kept))


def gesd_threshold(scores, alpha: float = 0.05, max_fraction: float = 0.25) -> float:
    """Generalized extreme studentized deviate test (Rosner).

    Tests up to ceil(max_fraction * N) candidate outliers; the threshold is
    the maximum score retained after removing the confirmed ones.
    """
    s = _check(scores)
    if _degenerate(s):
        return float(s[0])
    n = s.shape[0]
    r_max = int(np.ceil(max_fraction * n))
    work = list(s)
    removed: list[float] = []
    stats_r = []
    for i in range(1, r_max + 1):
        arr = np.array(work)
        sd = arr.std(ddof=1)
        if sd == 0 or len(work) < 3:
            break
        dev = np.abs(arr - arr.mean())
        j = int(np.argmax(dev))
        r_i = dev[j] / sd
        n_i = len(work)
        p = 1.0 - alpha / (2.0 * n_i)
        t = stats.t.ppf(p, n_i - 2)
        lam = (n_i - 1) * t / np.sqrt((n_i - 2 + t * t) * n_i)
        stats_r.append((r_i, lam))
        removed.append(work.pop(j))
    n_outliers = 0
    for i, (r_i, lam) in enumerate(stats_r, start=1):
        if r_i > lam:
            n_outliers = i
    retained = list(s)
    for v in removed[:n_outliers]:
        retained.remove(v)
    return float(max(retained))


def boot_threshold(scores, rng=None, n_resamples: int = 1000, level: float = 0.95) -> float:
    """Upper end of the two-sided BCa bootstrap confidence interval of the mean."""
    s = _check(scores)
    if _degenerate(s):
        return float(s[0])
    if rng is None:
        rng = np.random.default_rng(0)
    res = stats.bootstrap(
        (s,),
        np.mean,
        n_resamples=n_resamples,
        confidence_level=level,
        method="BCa",
        random_state=rng,
        vectorized=True,
        axis=-1,
    )
    high = float(res.confidence_interval.high)
    if not np.isfinite(high):
        logger.warning("BCa interval undefined, falling back to percentile bootstrap")
        res = stats.bootstrap(
            (s,), np.mean, n_resamples=n_resamples, confidence_level=level,
            method="percentile", random_state=rng, vectorized=True, axis=-1,
        )
        high = float(res.confidence_interval.high)
    return high


def qmcd_threshold(scores) -> float:
    """Quantile at one minus the star discrepancy of the rank-normalized scores.

    Ranks (average on ties) are mapped to (0, 1); the 1-D star discrepancy is
    the sup distance between their empirical CDF and the uniform CDF.
    """
    s = _check(scores)
    n = s.shape[0]
    u = np.sort((stats.rankdata(s, method="average") - 0.5) / n)
    i = np.arange(1, n + 1)
    disc = float(np.max(np.maximum(i / n - u, u - (i - 1) / n)))
    disc = min(max(disc, 0.0), 1.0)
    return float(np.quantile(s, 1.0 - disc))


METHODS = {
    "iqr": iqr_threshold,
    "zscore": zscore_threshold,
    "chauvenet": chauvenet_threshold,
    "mad": mad_threshold,
    "karcher": karcher_threshold,
    "mtt": mtt_threshold,
    "gesd": gesd_threshold,
    "boot": boot_threshold,
    "qmcd": qmcd_threshold,
}


@dataclass(frozen=True)
class ThresholdEstimate:
    """One method's result across the score matrix.

    thresholds/per_detector are per-column; gamma_hat is their mean.
    """

    method: str
    thresholds: list[float]
    per_detector: list[float]

    @property
    def gamma_hat(self) -> float:
        return float(np.mean(self.per_detector))


def estimate_all(
    matrix, methods: list[str] | None = None, seed: int = 0
) -> tuple[list[ThresholdEstimate], dict[str, str]]:
    """Run every requested method over every column of a transformed matrix.

    Returns the successful estimates plus a method -> error-message map for
    the ones that failed; failures never abort the others.
    """
    if not matrix.transformed:
        raise ThresholdError("score matrix must be transformed first")
    names = list(METHODS) if methods is None else list(methods)
    unknown = [m for m in names if m not in METHODS]
    if unknown:
        raise ThresholdError(f"unknown threshold methods: {unknown}")

    estimates: list[ThresholdEstimate] = []
    failures: dict[str, str] = {}
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(len(names))
    for name, child in zip(names, children):
        fn = METHODS[name]
        try:
            thresholds = []
            gammas = []
            for j in range(matrix.m):
                col = matrix.values[:, j]
                if name == "boot":
                    thr = fn(col, rng=np.random.default_rng(child))
                else:
                    thr = fn(col)
                thresholds.append(float(thr))
                gammas.append(exceedance_fraction(col, thr))
            estimates.append(
                ThresholdEstimate(method=name, thresholds=thresholds, per_detector=gammas)
            )
        except Exception as exc:
            failures[name] = str(exc)
            logger.warning("threshold method %s failed: %s", name, exc)
    return estimates, failures
