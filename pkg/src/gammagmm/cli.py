"""Command-line front end: estimate, thresholds, benchmark, sample-dump.

Every command is deterministic under a fixed --seed, and every output file
starts with a metadata header (tool version plus the full configuration) so a
run can be reproduced exactly. Exit codes: 0 success, 1 computational failure
(calibration exhaustion still writes the degenerate posterior), 2 usage or
I/O errors. GAMMA_CONTAM_THREADS caps worker threads.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import __version__, evaluation, gammapost, thresholds
from .detectors import DetectorSpec, parse_detector_list
from .dpgmm import DpgmmConfig
from .scorespace import (
    RawDataset,
    ScoreMatrix,
    ScoreSpaceError,
    build_score_matrix,
    ingest_scores,
    load_dataset_csv,
    transform_matrix,
)

logger = logging.getLogger(__name__)

GAMMA_METHOD = "gammagmm"


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GAMMA_CONTAM_THREADS", "1")))
    except ValueError:
        return 1


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _all_numeric(tokens) -> bool:
    try:
        for tok in tokens:
            float(tok)
    except ValueError:
        return False
    return True


def _config_echo(**kwargs) -> dict:
    return {k: kwargs[k] for k in sorted(kwargs)}


def _csv_header(fh, command: str, config: dict):
    fh.write(f"# gammagmm {__version__}\n")
    fh.write(f"# command: {command}\n")
    fh.write(
        "# config: " + " ".join(f"{k}={v}" for k, v in sorted(config.items())) + "\n"
    )


def _load_matrix(
    input_path: str | None,
    scores_path: str | None,
    detectors: str,
    external: tuple[str, ...],
    seed: int,
) -> tuple[ScoreMatrix, RawDataset | None]:
    if (input_path is None) == (scores_path is None):
        _fail(2, "exactly one of --input or --scores is required")
    try:
        if scores_path is not None:
            with open(scores_path, encoding="utf-8") as fh:
                first = fh.readline()
            has_header = not _all_numeric(first.split(","))
            matrix = transform_matrix(ingest_scores(scores_path, has_header=has_header))
            return matrix, None
        dataset = load_dataset_csv(input_path)
        specs = parse_detector_list(detectors, seed=seed)
        specs += [
            DetectorSpec(kind="external", params={"path": p}, seed=seed)
            for p in external
        ]
        return build_score_matrix(dataset, specs), dataset
    except FileNotFoundError as exc:
        _fail(2, str(exc))
    except (ScoreSpaceError, ValueError) as exc:
        _fail(2, str(exc))


def _common_options(fn):
    opts = [
        click.option("--input", "input_path", type=str, default=None,
                     help="Dataset CSV (features, optional final 'label' column)."),
        click.option("--scores", "scores_path", type=str, default=None,
                     help="Precomputed N x M score CSV with a header of detector names."),
        click.option("--detectors", default="knn,lof,iforest,hbos",
                     help="Comma-separated builtin detectors."),
        click.option("--external", multiple=True,
                     help="Single-column CSV of raw scores; repeatable."),
        click.option("--seed", default=0, show_default=True, type=int),
        click.option("--out", "out_dir", default=".", show_default=True,
                     help="Output directory."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _estimate_options(fn):
    opts = [
        click.option("--p0", default=gammapost.DEFAULT_P0, show_default=True,
                     help="Belief that the data holds no anomalies."),
        click.option("--phigh", default=gammapost.DEFAULT_P_HIGH, show_default=True,
                     help="Belief that contamination exceeds --t."),
        click.option("--t", "t_large", default=gammapost.DEFAULT_T, show_default=True,
                     help="'Large contamination' level for --phigh."),
        click.option("--cap", default=gammapost.DEFAULT_CAP, show_default=True,
                     help="Hard upper bound on gamma."),
        click.option("--restarts", default=gammapost.DEFAULT_RESTARTS, show_default=True),
        click.option("--samples", default=gammapost.DEFAULT_SAMPLES_PER_RESTART,
                     show_default=True, help="Gamma samples per restart."),
        click.option("--max-components", default=100, show_default=True),
        click.option("--max-retries", default=gammapost.DEFAULT_MAX_RETRIES,
                     show_default=True,
                     help="Refit attempts per restart when calibration is infeasible."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _validate_estimate_params(p0, phigh, t_large, cap, restarts):
    if not 0 < p0 < 1 or not 0 < phigh < 1:
        _fail(2, "--p0 and --phigh must lie in (0, 1)")
    if not 0 < t_large < cap:
        _fail(2, "--t must lie in (0, cap)")
    if restarts < 1:
        _fail(2, "--restarts must be >= 1")


def _run_estimate(matrix, p0, phigh, t_large, cap, restarts, samples,
                  max_components, max_retries, seed) -> gammapost.GammaPosterior:
    config = DpgmmConfig(max_components=max_components)
    return gammapost.estimate_posterior(
        matrix,
        config=config,
        p0=p0,
        p_high=phigh,
        t=t_large,
        cap=cap,
        restarts=restarts,
        samples_per_restart=samples,
        max_retries=max_retries,
        seed=seed,
        threads=_threads(),
    )


def _write_posterior(out_dir: str, gp, config: dict, samples_path: str | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "meta": {"tool": "gammagmm", "version": __version__, "config": config},
        "posterior": gp.to_dict(),
    }
    if samples_path is not None:
        doc["posterior"]["samples_path"] = samples_path
    path = out / "posterior.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@click.group()
@click.version_option(version=__version__, prog_name="gammagmm")
def main():
    """Contamination-factor posterior estimation from anomaly scores."""
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_common_options
@_estimate_options
def estimate(input_path, scores_path, detectors, external, seed, out_dir,
             p0, phigh, t_large, cap, restarts, samples, max_components,
             max_retries):
    """Estimate the contamination factor's posterior; write posterior.json."""
    _validate_estimate_params(p0, phigh, t_large, cap, restarts)
    config = _config_echo(
        command="estimate", input=input_path, scores=scores_path,
        detectors=detectors, external=list(external), seed=seed, p0=p0,
        phigh=phigh, t=t_large, cap=cap, restarts=restarts, samples=samples,
        max_components=max_components, max_retries=max_retries,
    )
    matrix, _ = _load_matrix(input_path, scores_path, detectors, external, seed)
    gp = _run_estimate(matrix, p0, phigh, t_large, cap, restarts, samples,
                       max_components, max_retries, seed)
    path = _write_posterior(out_dir, gp, config)
    click.echo(f"wrote {path}")
    if gp.exhausted:
        _fail(1, "calibration retries exhausted; posterior degenerated to gamma = 0")


@main.command("sample-dump")
@_common_options
@_estimate_options
def sample_dump(input_path, scores_path, detectors, external, seed, out_dir,
                p0, phigh, t_large, cap, restarts, samples, max_components,
                max_retries):
    """Estimate and additionally dump gamma samples as a single-column CSV."""
    _validate_estimate_params(p0, phigh, t_large, cap, restarts)
    config = _config_echo(
        command="sample-dump", input=input_path, scores=scores_path,
        detectors=detectors, external=list(external), seed=seed, p0=p0,
        phigh=phigh, t=t_large, cap=cap, restarts=restarts, samples=samples,
        max_components=max_components, max_retries=max_retries,
    )
    matrix, _ = _load_matrix(input_path, scores_path, detectors, external, seed)
    gp = _run_estimate(matrix, p0, phigh, t_large, cap, restarts, samples,
                       max_components, max_retries, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples_file = out / "samples.csv"
    with open(samples_file, "w", encoding="utf-8") as fh:
        _csv_header(fh, "sample-dump", config)
        fh.write("gamma\n")
        for v in gp.samples:
            fh.write(f"{float(v)!r}\n")
    path = _write_posterior(out_dir, gp, config, samples_path=samples_file.name)
    click.echo(f"wrote {path} and {samples_file}")
    if gp.exhausted:
        _fail(1, "calibration retries exhausted; posterior degenerated to gamma = 0")


@main.command("thresholds")
@_common_options
@click.option("--methods", default=None,
              help="Comma-separated subset of: " + ",".join(thresholds.METHODS))
def thresholds_cmd(input_path, scores_path, detectors, external, seed, out_dir, methods):
    """Run the classical threshold estimators; write thresholds.csv."""
    config = _config_echo(
        command="thresholds", input=input_path, scores=scores_path,
        detectors=detectors, external=list(external), seed=seed,
        methods=methods or "all",
    )
    matrix, _ = _load_matrix(input_path, scores_path, detectors, external, seed)
    method_list = None if methods is None else [m.strip() for m in methods.split(",")]
    try:
        estimates, failures = thresholds.estimate_all(matrix, method_list, seed=seed)
    except thresholds.ThresholdError as exc:
        _fail(2, str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "thresholds.csv"
    with open(path, "w", encoding="utf-8") as fh:
        _csv_header(fh, "thresholds", config)
        fh.write("method,detector,threshold,gamma_detector,gamma_hat\n")
        for est in estimates:
            for j, det in enumerate(matrix.detector_names):
                fh.write(
                    f"{est.method},{det},{est.thresholds[j]!r},"
                    f"{est.per_detector[j]!r},{est.gamma_hat!r}\n"
                )
    for name, msg in sorted(failures.items()):
        click.echo(f"warning: method {name} failed: {msg}", err=True)
    click.echo(f"wrote {path}")
    if failures and not estimates:
        _fail(1, "every threshold method failed")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return ""
    return repr(float(v))


def _benchmark_dataset(path: Path, detectors: str, methods, est_kwargs, seed):
    dataset = load_dataset_csv(str(path), name=path.stem)
    specs = parse_detector_list(detectors, seed=seed)
    matrix = build_score_matrix(dataset, specs)
    estimates, failures = thresholds.estimate_all(matrix, methods, seed=seed)
    gp = gammapost.estimate_posterior(matrix, **est_kwargs)
    return dataset, matrix, estimates, failures, gp


@main.command()
@click.option("--input", "input_dir", required=True,
              help="Directory of dataset CSVs (features [+ 'label' column]).")
@click.option("--detectors", default="knn,lof,iforest,hbos", show_default=True)
@click.option("--methods", default=None,
              help="Comma-separated subset of threshold baselines (gammagmm always runs).")
@_estimate_options
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", default=".", show_default=True)
def benchmark(input_dir, detectors, methods, p0, phigh, t_large, cap,
              restarts, samples, max_components, max_retries, seed, out_dir):
    """Run gammagmm plus the baselines over a directory of labeled datasets."""
    _validate_estimate_params(p0, phigh, t_large, cap, restarts)
    config = _config_echo(
        command="benchmark", input=input_dir, detectors=detectors,
        methods=methods or "all", seed=seed, p0=p0, phigh=phigh, t=t_large,
        cap=cap, restarts=restarts, samples=samples,
        max_components=max_components, max_retries=max_retries,
    )
    in_dir = Path(input_dir)
    if not in_dir.is_dir():
        _fail(2, f"not a directory: {input_dir}")
    paths = sorted(in_dir.glob("*.csv"))
    if not paths:
        _fail(2, f"no CSV datasets found in {input_dir}")
    method_list = None if methods is None else [m.strip() for m in methods.split(",")]
    est_kwargs = dict(
        config=DpgmmConfig(max_components=max_components),
        p0=p0, p_high=phigh, t=t_large, cap=cap, restarts=restarts,
        samples_per_restart=samples, max_retries=max_retries, seed=seed,
        threads=1,
    )

    def job(path):
        try:
            return _benchmark_dataset(path, detectors, method_list, est_kwargs, seed)
        except (ScoreSpaceError, ValueError, RuntimeError) as exc:
            logger.warning("dataset %s skipped: %s", path.name, exc)
            return exc

    n_threads = _threads()
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(job, paths))
    else:
        results = [job(p) for p in paths]

    rows: list[evaluation.EvalRow] = []
    mae_table: dict[str, list[float]] = {}
    posteriors, gamma_trues = [], []
    skipped = 0
    for path, res in zip(paths, results):
        if isinstance(res, Exception):
            skipped += 1
            continue
        dataset, matrix, estimates, failures, gp = res
        for name, msg in sorted(failures.items()):
            click.echo(f"warning: {path.stem}: method {name} failed: {msg}", err=True)
        method_gammas = {GAMMA_METHOD: gp.mean}
        method_gammas.update({e.method: e.gamma_hat for e in estimates})
        gamma_true = dataset.contamination
        if gamma_true is None:
            click.echo(
                f"warning: {path.stem}: no label column, excluded from F1/calibration",
                err=True,
            )
            for m, g in method_gammas.items():
                rows.append(evaluation.EvalRow(
                    dataset=dataset.name, method=m, gamma_hat=g,
                    gamma_true=float("nan"), mae=float("nan"),
                    f1_true=float("nan"), f1_hat=float("nan"),
                    f1_deterioration=float("nan"), fpr=float("nan"),
                    fnr=float("nan"),
                ))
            continue
        posteriors.append(gp)
        gamma_trues.append(gamma_true)
        best = evaluation.select_best_detectors(matrix.values, dataset.labels, gamma_true)
        for m, g in method_gammas.items():
            dets, fprs, fnrs, f1ts, f1hs = [], [], [], [], []
            for j in best:
                col = matrix.values[:, j]
                f1ts.append(evaluation.f1_score(
                    evaluation.threshold_predictions(col, gamma_true), dataset.labels)[0])
                preds = evaluation.threshold_predictions(col, g)
                f1hs.append(evaluation.f1_score(preds, dataset.labels)[0])
                dets.append(evaluation.f1_deterioration(
                    col, dataset.labels, gamma_true, g))
                fpr, fnr = evaluation.fpr_fnr(preds, dataset.labels)
                fprs.append(fpr)
                fnrs.append(fnr)
            det_arr = np.array(dets, dtype=float)
            det_mean = float(np.nanmean(det_arr)) if not np.isnan(det_arr).all() else float("nan")
            rows.append(evaluation.EvalRow(
                dataset=dataset.name, method=m, gamma_hat=g, gamma_true=gamma_true,
                mae=evaluation.mae(min(max(g, 0.0), 1.0), gamma_true),
                f1_true=float(np.mean(f1ts)), f1_hat=float(np.mean(f1hs)),
                f1_deterioration=det_mean,
                fpr=float(np.nanmean(fprs)), fnr=float(np.nanmean(fnrs)),
            ))
            mae_table.setdefault(m, []).append(
                evaluation.mae(min(max(g, 0.0), 1.0), gamma_true))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = out / "report.csv"
    with open(report, "w", encoding="utf-8") as fh:
        _csv_header(fh, "benchmark", config)
        fh.write("dataset,method,gamma_hat,gamma_true,mae,f1_true,f1_hat,"
                 "f1_deterioration,fpr,fnr\n")
        for r in rows:
            fh.write(",".join([
                r.dataset, r.method, _fmt(r.gamma_hat), _fmt(r.gamma_true),
                _fmt(r.mae), _fmt(r.f1_true), _fmt(r.f1_hat),
                _fmt(r.f1_deterioration), _fmt(r.fpr), _fmt(r.fnr),
            ]) + "\n")
    written = [report]

    if posteriors:
        cal = out / "calibration.csv"
        with open(cal, "w", encoding="utf-8") as fh:
            _csv_header(fh, "benchmark", config)
            fh.write("expected_prob,empirical_freq\n")
            for e, f in evaluation.calibration_curve(posteriors, gamma_trues):
                fh.write(f"{e!r},{f!r}\n")
        ranks = out / "ranks.csv"
        with open(ranks, "w", encoding="utf-8") as fh:
            _csv_header(fh, "benchmark", config)
            fh.write("method,mean_rank\n")
            for m, r in sorted(evaluation.rank_methods(mae_table).items(),
                               key=lambda kv: kv[1]):
                fh.write(f"{m},{r!r}\n")
        written += [cal, ranks]

    click.echo("wrote " + ", ".join(str(p) for p in written))
    if skipped == len(paths):
        _fail(1, "every dataset failed")


if __name__ == "__main__":
    main()
