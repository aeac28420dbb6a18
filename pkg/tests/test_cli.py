import json

import numpy as np
import pytest
from click.testing import CliRunner

from gammagmm.cli import main
from helpers import two_blob_dataset, write_dataset_csv, write_scores_csv


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def blob_csv(tmp_path):
    ds = two_blob_dataset(seed=0, n=300, frac=0.05)
    return str(write_dataset_csv(tmp_path / "blobs.csv", ds, with_labels=False))


FAST = [
    "--restarts", "2", "--samples", "300", "--max-components", "15", "--seed", "11",
]


def run_ok(runner, args, **kwargs):
    result = runner.invoke(main, args, catch_exceptions=False, **kwargs)
    assert result.exit_code == 0, result.output
    return result


class TestEstimate:
    def test_two_blob_mean_in_expected_window(self, runner, blob_csv, tmp_path):
        out = tmp_path / "out"
        run_ok(runner, ["estimate", "--input", blob_csv, "--out", str(out), *FAST])
        doc = json.loads((out / "posterior.json").read_text())
        assert 0.02 <= doc["posterior"]["mean"] <= 0.08
        assert doc["meta"]["version"]
        assert doc["meta"]["config"]["seed"] == 11
        assert doc["posterior"]["cap"] == 0.25

    def test_byte_identical_reruns(self, runner, blob_csv, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run_ok(runner, ["estimate", "--input", blob_csv, "--out", str(out1), *FAST])
        run_ok(runner, ["estimate", "--input", blob_csv, "--out", str(out2), *FAST])
        assert (out1 / "posterior.json").read_bytes() == (out2 / "posterior.json").read_bytes()

    def test_missing_input_exits_2(self, runner, tmp_path):
        result = runner.invoke(main, ["estimate", "--input", str(tmp_path / "nope.csv")])
        assert result.exit_code == 2
        assert "error" in result.output or "nope.csv" in result.output

    def test_both_input_and_scores_rejected(self, runner, blob_csv, tmp_path):
        result = runner.invoke(
            main, ["estimate", "--input", blob_csv, "--scores", blob_csv]
        )
        assert result.exit_code == 2

    @pytest.mark.parametrize("with_header", [True, False])
    def test_scores_csv_path(self, runner, tmp_path, with_header):
        rng = np.random.default_rng(1)
        n = 250
        raw = np.column_stack([
            np.concatenate([rng.normal(0, 1, n - 12), rng.normal(8, 1, 12)]),
            np.concatenate([rng.normal(0, 1, n - 12), rng.normal(7, 1, 12)]),
        ])
        names = ["d1", "d2"] if with_header else None
        scores = write_scores_csv(tmp_path / "scores.csv", raw, names=names)
        out = tmp_path / "out"
        run_ok(runner, ["estimate", "--scores", str(scores), "--out", str(out), *FAST])
        doc = json.loads((out / "posterior.json").read_text())
        assert doc["posterior"]["n_samples"] == 2 * 300
        assert 0.0 <= doc["posterior"]["mean"] <= 0.25

    def test_bad_p0_rejected(self, runner, blob_csv):
        result = runner.invoke(main, ["estimate", "--input", blob_csv, "--p0", "1.5"])
        assert result.exit_code == 2

    def test_calibration_exhaustion_exits_1_with_result(self, runner, tmp_path):
        # a single homogeneous blob always collapses to one component, so
        # calibration can never become feasible
        rng = np.random.default_rng(3)
        rows = rng.normal(size=(120, 3))
        path = tmp_path / "blob.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("a,b,c\n")
            for row in rows:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        out = tmp_path / "out"
        result = runner.invoke(main, [
            "estimate", "--input", str(path), "--out", str(out),
            "--restarts", "1", "--samples", "100", "--max-components", "8",
            "--max-retries", "2", "--seed", "0",
        ])
        assert result.exit_code == 1
        doc = json.loads((out / "posterior.json").read_text())
        assert doc["posterior"]["exhausted"] is True
        assert doc["posterior"]["zero_mass"] == 1.0
        assert doc["posterior"]["mean"] == 0.0


class TestSampleDump:
    def test_samples_csv_written(self, runner, blob_csv, tmp_path):
        out = tmp_path / "out"
        run_ok(runner, ["sample-dump", "--input", blob_csv, "--out", str(out), *FAST])
        doc = json.loads((out / "posterior.json").read_text())
        assert doc["posterior"]["samples_path"] == "samples.csv"
        lines = (out / "samples.csv").read_text().splitlines()
        data = [float(v) for v in lines if not v.startswith("#") and v != "gamma"]
        assert len(data) == 2 * 300
        assert max(data) <= 0.25


class TestThresholds:
    def test_csv_with_metadata_header(self, runner, blob_csv, tmp_path):
        out = tmp_path / "out"
        run_ok(runner, [
            "thresholds", "--input", blob_csv, "--out", str(out),
            "--methods", "iqr,zscore", "--seed", "5",
        ])
        text = (out / "thresholds.csv").read_text()
        lines = text.splitlines()
        assert lines[0].startswith("# gammagmm")
        assert "# config:" in lines[2]
        header = lines[3].split(",")
        assert header == ["method", "detector", "threshold", "gamma_detector", "gamma_hat"]
        methods = {row.split(",")[0] for row in lines[4:]}
        assert methods == {"iqr", "zscore"}
        # 2 methods x 4 default detectors
        assert len(lines[4:]) == 8

    def test_unknown_method_exits_2(self, runner, blob_csv):
        result = runner.invoke(main, ["thresholds", "--input", blob_csv, "--methods", "zzz"])
        assert result.exit_code == 2


class TestBenchmark:
    @pytest.fixture()
    def bench_dir(self, tmp_path):
        d = tmp_path / "data"
        d.mkdir()
        for seed in range(2):
            ds = two_blob_dataset(seed=seed, n=220, frac=0.05)
            write_dataset_csv(d / f"ds{seed}.csv", ds, with_labels=True)
        return d

    def test_report_and_calibration_written(self, runner, bench_dir, tmp_path):
        out = tmp_path / "out"
        run_ok(runner, [
            "benchmark", "--input", str(bench_dir), "--out", str(out),
            "--methods", "iqr", *FAST,
        ])
        lines = [
            l for l in (out / "report.csv").read_text().splitlines()
            if not l.startswith("#")
        ]
        header = lines[0].split(",")
        assert header[:4] == ["dataset", "method", "gamma_hat", "gamma_true"]
        rows = [l.split(",") for l in lines[1:]]
        methods = {r[1] for r in rows}
        assert methods == {"gammagmm", "iqr"}
        assert len(rows) == 4  # 2 datasets x 2 methods
        assert (out / "calibration.csv").exists()
        assert (out / "ranks.csv").exists()
        rank_lines = [
            l for l in (out / "ranks.csv").read_text().splitlines()
            if not l.startswith("#")
        ][1:]
        assert {l.split(",")[0] for l in rank_lines} == {"gammagmm", "iqr"}

    def test_unlabeled_dataset_warned_and_gamma_only(self, runner, bench_dir, tmp_path):
        ds = two_blob_dataset(seed=5, n=220, frac=0.05)
        write_dataset_csv(bench_dir / "nolabel.csv", ds, with_labels=False)
        out = tmp_path / "out"
        result = run_ok(runner, [
            "benchmark", "--input", str(bench_dir), "--out", str(out),
            "--methods", "iqr", *FAST,
        ])
        assert "no label column" in result.output
        lines = [
            l for l in (out / "report.csv").read_text().splitlines()
            if not l.startswith("#")
        ][1:]
        nolabel_rows = [l.split(",") for l in lines if l.startswith("nolabel")]
        assert len(nolabel_rows) == 2
        for row in nolabel_rows:
            assert row[2] != ""   # gamma_hat present
            assert row[3] == ""   # gamma_true empty
            assert row[4] == ""   # mae empty

    def test_empty_directory_exits_2(self, runner, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        result = runner.invoke(main, ["benchmark", "--input", str(empty)])
        assert result.exit_code == 2

    def test_deterministic_across_runs_and_threads(self, runner, bench_dir, tmp_path):
        args = ["benchmark", "--input", str(bench_dir), "--methods", "iqr,mtt", *FAST]
        outputs = []
        for name, env in (("r1", {}), ("r2", {}), ("r3", {"GAMMA_CONTAM_THREADS": "2"})):
            out = tmp_path / name
            result = runner.invoke(main, args + ["--out", str(out)], env=env,
                                   catch_exceptions=False)
            assert result.exit_code == 0, result.output
            outputs.append((out / "report.csv").read_bytes())
        assert outputs[0] == outputs[1]
        assert outputs[0] == outputs[2]


class TestVersion:
    def test_version_flag(self, runner):
        result = runner.invoke(main, ["--version"])
        assert result.exit_code == 0
        assert "gammagmm" in result.output
