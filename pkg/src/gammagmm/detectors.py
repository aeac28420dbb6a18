"""Built-in unsupervised anomaly detectors with distinct inductive biases.

Four detectors populate the score space when no external scores are supplied:

    knn      distance to the k-th nearest neighbor (anomalies are far away)
    lof      local outlier factor (anomalies sit in low-density regions)
    iforest  isolation forest (anomalies are easy to isolate)
    hbos     histogram-based outlier score (anomalies fall in sparse bins)

All detectors return one non-negative-leaning score per row, higher = more
anomalous, and are deterministic given their seed. Neighbor searches are
brute force O(N^2), which is fine at desk scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.ensemble import IsolationForest

from .scorespace import RawDataset

BUILTIN_KINDS = ("knn", "lof", "iforest", "hbos")


class DetectorError(ValueError):
    """Bad detector parameters or a detector failing on the given data."""


def _distance_matrix(X: np.ndarray) -> np.ndarray:
    d = cdist(X, X)
    np.fill_diagonal(d, np.inf)
    return d


def knn_scores(dataset: RawDataset, k: int = 10) -> np.ndarray:
    """Euclidean distance to the k-th nearest neighbor."""
    n = dataset.n
    if not 1 <= k <= n - 1:
        raise DetectorError(f"knn: k must be in [1, {n - 1}], got {k}")
    d = _distance_matrix(dataset.X)
    d.sort(axis=1)
    return d[:, k - 1]


def lof_scores(dataset: RawDataset, k: int = 10) -> np.ndarray:
    """Local outlier factor: ratio of neighbors' local reachability density to own.

    Reachability distance is floored at the neighbor's k-distance, the
    standard LOF definition; a small epsilon keeps densities finite on
    duplicate-heavy data, so an all-duplicates dataset scores 1 everywhere.
    """
    n = dataset.n
    if not 2 <= k <= n - 1:
        raise DetectorError(f"lof: k must be in [2, {n - 1}], got {k}")
    d = _distance_matrix(dataset.X)
    order = np.argsort(d, axis=1, kind="stable")
    neighbors = order[:, :k]
    kdist = np.take_along_axis(d, order[:, k - 1 : k], axis=1)[:, 0]

    # reach(i -> j) = max(kdist[j], d[i, j]) over i's k nearest neighbors j
    reach = np.maximum(kdist[neighbors], np.take_along_axis(d, neighbors, axis=1))
    lrd = 1.0 / (reach.mean(axis=1) + 1e-10)
    return lrd[neighbors].mean(axis=1) / lrd


def iforest_scores(
    dataset: RawDataset, trees: int = 100, subsample: int = 256, seed: int = 0
) -> np.ndarray:
    """Isolation-forest anomaly score 2^(-E[h]/c(n)), in (0, 1)."""
    n = dataset.n
    if trees < 1:
        raise DetectorError(f"iforest: trees must be >= 1, got {trees}")
    if subsample < 2:
        raise DetectorError(f"iforest: subsample must be >= 2, got {subsample}")
    model = IsolationForest(
        n_estimators=trees,
        max_samples=min(subsample, n),
        random_state=seed,
        n_jobs=1,
    )
    model.fit(dataset.X)
    # sklearn's score_samples is the negated textbook score
    return -model.score_samples(dataset.X)


def hbos_scores(dataset: RawDataset, bins: int | None = None) -> np.ndarray:
    """Histogram-based outlier score: sum over features of -log(bin probability).

    Per-feature equal-width histograms with Laplace smoothing; a constant
    feature puts every row in one bin and adds the same amount to every score.
    Default bin count is ceil(sqrt(N)).
    """
    n = dataset.n
    if bins is None:
        bins = math.ceil(math.sqrt(n))
    if bins < 2:
        raise DetectorError(f"hbos: bins must be >= 2, got {bins}")
    scores = np.zeros(n)
    for j in range(dataset.dim):
        col = dataset.X[:, j]
        lo, hi = col.min(), col.max()
        if hi == lo:
            counts = np.full(1, n)
            idx = np.zeros(n, dtype=int)
            nbins = 1
        else:
            edges = np.linspace(lo, hi, bins + 1)
            idx = np.clip(np.digitize(col, edges) - 1, 0, bins - 1)
            counts = np.bincount(idx, minlength=bins)
            nbins = bins
        prob = (counts + 1.0) / (n + nbins)
        scores += -np.log(prob[idx])
    return scores


def external_scores(path: str, n_expected: int | None = None) -> np.ndarray:
    """Read one column of raw scores from a single-column CSV."""
    values = []
    with open(path, newline="", encoding="utf-8") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 1:
                raise DetectorError(
                    f"{path}:{line_no}: expected a single score column, got {len(row)} cells"
                )
            try:
                values.append(float(row[0]))
            except ValueError:
                # allow one header line
                if line_no == 1:
                    continue
                raise DetectorError(
                    f"{path}:{line_no}: non-numeric score {row[0]!r}"
                ) from None
    scores = np.array(values)
    if n_expected is not None and scores.shape[0] != n_expected:
        raise DetectorError(
            f"{path}: {scores.shape[0]} scores for a dataset of {n_expected} rows"
        )
    return scores


@dataclass(frozen=True)
class DetectorSpec:
    """One column of the score space: a builtin detector or an external score file.

    params carries kind-specific settings: k (knn/lof), trees/subsample
    (iforest), bins (hbos), path (external). k is clamped to N-1 at scoring
    time so a single default works across dataset sizes.
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BUILTIN_KINDS + ("external",):
            raise DetectorError(f"unknown detector kind {self.kind!r}")
        if self.kind == "external" and "path" not in self.params:
            raise DetectorError("external detector needs a 'path' param")

    def label(self) -> str:
        if self.kind == "external":
            return str(self.params.get("name", self.params["path"]))
        return self.kind

    def score(self, dataset: RawDataset) -> np.ndarray:
        if self.kind == "knn":
            k = min(int(self.params.get("k", 10)), dataset.n - 1)
            return knn_scores(dataset, k=k)
        if self.kind == "lof":
            k = min(int(self.params.get("k", 10)), dataset.n - 1)
            return lof_scores(dataset, k=max(k, 2))
        if self.kind == "iforest":
            return iforest_scores(
                dataset,
                trees=int(self.params.get("trees", 100)),
                subsample=int(self.params.get("subsample", 256)),
                seed=self.seed,
            )
        if self.kind == "hbos":
            bins = self.params.get("bins")
            return hbos_scores(dataset, bins=None if bins is None else int(bins))
        return external_scores(self.params["path"], n_expected=dataset.n)


def parse_detector_list(spec: str, seed: int = 0) -> list[DetectorSpec]:
    """Parse a comma-separated detector list such as 'knn,lof,iforest,hbos'."""
    out = []
    for i, token in enumerate(s.strip() for s in spec.split(",")):
        if not token:
            continue
        out.append(DetectorSpec(kind=token, seed=seed + i))
    if not out:
        raise DetectorError(f"no detectors in spec {spec!r}")
    return out
