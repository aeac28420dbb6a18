"""Shared fixtures: synthetic datasets and CSV writers."""

from __future__ import annotations

import numpy as np

from gammagmm.scorespace import RawDataset


def make_contaminated_dataset(
    seed: int, n: int = 2000, dim: int = 4, ambiguity: float = 0.3
) -> RawDataset:
    """Gaussian-cluster dataset with a planted anomaly proportion in [0.01, 0.10].

    One to three tight normal clusters plus two anomaly clouds, one clearly
    separated and one borderline, so chain membership is genuinely uncertain.
    Label ambiguity mimics real benchmarks: up to `ambiguity` of the anomalies
    hide inside normal clusters and a like fraction of normal points stray
    into the far anomaly cloud. Without both ingredients the estimation error
    collapses to ~0 and coverage curves degenerate.
    """
    rng = np.random.default_rng(seed)
    gamma = float(rng.uniform(0.01, 0.10))
    n_anom = int(round(gamma * n))
    n_norm = n - n_anom
    k = int(rng.integers(1, 4))
    centers = rng.uniform(-4, 4, size=(k, dim))

    def place(dist_lo, dist_hi):
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        return centers[rng.integers(k)] + direction * rng.uniform(dist_lo, dist_hi)

    far_c, near_c = place(5, 8), place(2.5, 4.5)
    far_s, near_s = rng.uniform(1.5, 2.5), rng.uniform(0.8, 1.5)
    hidden = int(round(rng.uniform(0.0, ambiguity) * n_anom))
    ghosts = int(round(rng.uniform(0.0, ambiguity) * n_anom))
    n_far = int(round(rng.uniform(0.4, 0.9) * (n_anom - hidden)))
    n_near = n_anom - hidden - n_far

    sizes = rng.multinomial(n_norm - ghosts, np.ones(k) / k)
    parts, labels = [], []
    for c, s in zip(centers, sizes):
        parts.append(rng.normal(c, 0.4, size=(s, dim)))
        labels.append(np.zeros(s))
    parts.append(rng.normal(far_c, far_s, size=(ghosts, dim)))
    labels.append(np.zeros(ghosts))
    parts.append(rng.normal(centers[rng.integers(k, size=hidden)], 0.4))
    labels.append(np.ones(hidden))
    parts.append(rng.normal(far_c, far_s, size=(n_far, dim)))
    labels.append(np.ones(n_far))
    parts.append(rng.normal(near_c, near_s, size=(n_near, dim)))
    labels.append(np.ones(n_near))
    X = np.vstack(parts)
    y = np.concatenate(labels).astype(int)
    return RawDataset(X=X, labels=y, name=f"synth{seed}")


def two_blob_dataset(seed: int = 0, n: int = 400, frac: float = 0.05) -> RawDataset:
    """Tight main blob plus a small far blob of `frac` anomalies."""
    rng = np.random.default_rng(seed)
    n2 = int(round(frac * n))
    X = np.vstack([
        rng.normal(0.0, 0.3, size=(n - n2, 2)),
        rng.normal(5.0, 0.8, size=(n2, 2)),
    ])
    y = np.concatenate([np.zeros(n - n2, dtype=int), np.ones(n2, dtype=int)])
    return RawDataset(X=X, labels=y, name=f"twoblob{seed}")


def random_score_matrix(seed: int, n: int = 250, m: int = 3) -> np.ndarray:
    """Blobby synthetic matrix, standardized like transformed scores."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    parts = [
        rng.normal(rng.uniform(-3, 3, size=m), rng.uniform(0.2, 1.0), size=(n // k, m))
        for _ in range(k)
    ]
    X = np.vstack(parts)
    return (X - X.mean(0)) / X.std(0)


def write_dataset_csv(path, dataset: RawDataset, with_labels: bool = True):
    cols = [f"f{i}" for i in range(dataset.dim)]
    rows = dataset.X
    if with_labels and dataset.labels is not None:
        cols.append("label")
        rows = np.column_stack([dataset.X, dataset.labels])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return path


def write_scores_csv(path, values: np.ndarray, names: list[str] | None = None):
    values = np.asarray(values, dtype=float)
    with open(path, "w", encoding="utf-8") as fh:
        if names:
            fh.write(",".join(names) + "\n")
        for row in values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return path
