"""Score-space construction: raw datasets in, standardized anomaly-score matrices out.

Each anomaly detector maps the d-dimensional covariates to one real score per
row; stacking M detectors gives an N x M score matrix. Columns are made
comparable by a log shift-transform followed by standardization:

    s -> log(s - min(s) + 0.01), then (x - mean) / std

The log shortens heavy right tails; the shift keeps its argument positive.
Standardization uses population (1/N) variance.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

# Columns whose pre-standardization spread falls below this are emitted as
# all-zeros instead of dividing by ~0.
ZERO_VARIANCE_EPS = 1e-12


class ScoreSpaceError(ValueError):
    """Invalid dataset, score matrix, or score file."""


@dataclass(frozen=True)
class RawDataset:
    """A feature matrix with optional binary ground-truth labels.

    Attributes:
        X: (N, d) float array of covariates.
        labels: optional (N,) int array, 1 = anomaly, 0 = normal.
        name: identifier used in reports and error messages.
    """

    X: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise ScoreSpaceError(f"{self.name}: X must be 2-D, got shape {X.shape}")
        if X.shape[0] < 2:
            raise ScoreSpaceError(f"{self.name}: need at least 2 rows, got {X.shape[0]}")
        if X.shape[1] < 1:
            raise ScoreSpaceError(f"{self.name}: need at least 1 feature")
        if not np.isfinite(X).all():
            raise ScoreSpaceError(f"{self.name}: X contains NaN/Inf")
        object.__setattr__(self, "X", X)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=int)
            if y.shape != (X.shape[0],):
                raise ScoreSpaceError(
                    f"{self.name}: labels length {y.shape} does not match N={X.shape[0]}"
                )
            if not np.isin(y, (0, 1)).all():
                raise ScoreSpaceError(f"{self.name}: labels must be 0/1")
            object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def contamination(self) -> float | None:
        """True anomaly proportion, if labels are present."""
        if self.labels is None:
            return None
        return float(self.labels.mean())


@dataclass(frozen=True)
class ScoreMatrix:
    """N x M matrix of anomaly scores, one column per detector.

    `transformed` records whether columns have been through
    :func:`transform_scores` (zero mean, unit variance, or identically zero).
    """

    values: np.ndarray
    detector_names: list[str] = field(default_factory=list)
    transformed: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ScoreSpaceError(f"score matrix must be 2-D, got shape {v.shape}")
        if v.shape[1] < 1:
            raise ScoreSpaceError("score matrix needs at least one column")
        if not np.isfinite(v).all():
            bad = np.argwhere(~np.isfinite(v))
            raise ScoreSpaceError(f"score matrix has NaN/Inf at (row, col) {tuple(bad[0])}")
        object.__setattr__(self, "values", v)
        if not self.detector_names:
            object.__setattr__(
                self, "detector_names", [f"col{i}" for i in range(v.shape[1])]
            )
        if len(self.detector_names) != v.shape[1]:
            raise ScoreSpaceError(
                f"{len(self.detector_names)} detector names for {v.shape[1]} columns"
            )
        if self.transformed:
            self._check_standardized()

    def _check_standardized(self):
        for j in range(self.m):
            col = self.values[:, j]
            if np.all(col == 0.0):
                continue
            if abs(col.mean()) > 1e-9 or abs(col.std() - 1.0) > 1e-9:
                raise ScoreSpaceError(
                    f"column {j} ({self.detector_names[j]}) marked transformed but is "
                    f"not standardized (mean={col.mean():.3g}, std={col.std():.3g})"
                )

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


def transform_scores(raw_column: np.ndarray, column: str | int | None = None) -> np.ndarray:
    """Log shift-transform and standardize one score column.

    Maps s to log(s - min(s) + 0.01), then subtracts the mean and divides by
    the population standard deviation. Rank-preserving (monotone).

    If the log-transformed column has std below ZERO_VARIANCE_EPS the column
    carries no ranking information and the all-zero column is returned with a
    warning instead of an error.
    """
    s = np.asarray(raw_column, dtype=float)
    label = "column" if column is None else f"column {column}"
    if s.ndim != 1:
        raise ScoreSpaceError(f"{label}: expected 1-D score column, got shape {s.shape}")
    if s.shape[0] < 2:
        raise ScoreSpaceError(f"{label}: need at least 2 scores, got {s.shape[0]}")
    if not np.isfinite(s).all():
        raise ScoreSpaceError(f"{label}: scores contain NaN/Inf")

    x = np.log(s - s.min() + 0.01)
    sd = x.std()
    if sd < ZERO_VARIANCE_EPS:
        logger.warning("%s: zero variance after transform, emitting all-zero column", label)
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def transform_matrix(matrix: ScoreMatrix) -> ScoreMatrix:
    """Apply :func:`transform_scores` to every column of an untransformed matrix."""
    if matrix.transformed:
        return matrix
    cols = [
        transform_scores(matrix.values[:, j], column=matrix.detector_names[j])
        for j in range(matrix.m)
    ]
    return ScoreMatrix(
        values=np.column_stack(cols),
        detector_names=list(matrix.detector_names),
        transformed=True,
    )


def build_score_matrix(dataset: RawDataset, detectors: list) -> ScoreMatrix:
    """Score a dataset with each detector spec and transform every column.

    `detectors` is a list of :class:`gammagmm.detectors.DetectorSpec`. Column
    order matches the detector list. A failing detector aborts the build with
    an error naming it.
    """
    if not detectors:
        raise ScoreSpaceError("detector list is empty; need at least one column")
    raw_cols = []
    names = []
    for spec in detectors:
        try:
            raw_cols.append(spec.score(dataset))
        except Exception as exc:
            raise ScoreSpaceError(f"detector '{spec.label()}' failed: {exc}") from exc
        names.append(spec.label())
    transformed = [
        transform_scores(col, column=name) for col, name in zip(raw_cols, names)
    ]
    return ScoreMatrix(
        values=np.column_stack(transformed), detector_names=names, transformed=True
    )


def _parse_float(token: str, path: str, line_no: int, col: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise ScoreSpaceError(
            f"{path}:{line_no}: column {col}: non-numeric value {token!r}"
        ) from None


def _is_numeric_row(row: list[str]) -> bool:
    try:
        for tok in row:
            float(tok)
    except ValueError:
        return False
    return True


def ingest_scores(path: str, has_header: bool = False) -> ScoreMatrix:
    """Read an N x M CSV of raw detector scores.

    With `has_header`, the first row supplies detector names. The returned
    matrix is untransformed; apply :func:`transform_matrix` before fitting.
    """
    rows: list[list[float]] = []
    names: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        width = None
        for line_no, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if line_no == 1 and has_header:
                names = [c.strip() for c in row]
                width = len(names)
                continue
            if width is None:
                width = len(row)
            if len(row) != width:
                raise ScoreSpaceError(
                    f"{path}:{line_no}: ragged row, expected {width} cells, got {len(row)}"
                )
            rows.append(
                [_parse_float(tok.strip(), path, line_no, j) for j, tok in enumerate(row)]
            )
    if len(rows) < 2:
        raise ScoreSpaceError(f"{path}: need at least 2 score rows, got {len(rows)}")
    return ScoreMatrix(values=np.array(rows), detector_names=names, transformed=False)


def load_dataset_csv(path: str, name: str | None = None) -> RawDataset:
    """Read a dataset CSV: feature columns plus an optional final 'label' column.

    A header row is detected automatically (any non-numeric cell in row 1).
    Without a header all columns are treated as features.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        raw = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    if not raw:
        raise ScoreSpaceError(f"{path}: empty file")

    header: list[str] | None = None
    if not _is_numeric_row(raw[0]):
        header = [c.strip() for c in raw[0]]
        raw = raw[1:]

    width = len(header) if header else (len(raw[0]) if raw else 0)
    values = []
    for line_no, row in enumerate(raw, start=2 if header else 1):
        if len(row) != width:
            raise ScoreSpaceError(
                f"{path}:{line_no}: ragged row, expected {width} cells, got {len(row)}"
            )
        values.append(
            [_parse_float(tok.strip(), path, line_no, j) for j, tok in enumerate(row)]
        )
    if len(values) < 2:
        raise ScoreSpaceError(f"{path}: need at least 2 data rows, got {len(values)}")
    arr = np.array(values)

    labels = None
    if header and header[-1].lower() == "label":
        labels = arr[:, -1].astype(int)
        if not np.isin(labels, (0, 1)).all():
            raise ScoreSpaceError(f"{path}: label column must be 0/1")
        arr = arr[:, :-1]
    if name is None:
        name = path
    return RawDataset(X=arr, labels=labels, name=name)
