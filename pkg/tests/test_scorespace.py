import numpy as np
import pytest
from scipy.stats import rankdata

from gammagmm.detectors import DetectorSpec
from gammagmm.scorespace import (
    RawDataset,
    ScoreMatrix,
    ScoreSpaceError,
    build_score_matrix,
    ingest_scores,
    load_dataset_csv,
    transform_matrix,
    transform_scores,
)
from helpers import two_blob_dataset, write_scores_csv


class TestTransformScores:
    def test_constant_column_maps_to_zeros(self):
        out = transform_scores(np.array([1.0, 1.0, 1.0]))
        assert np.array_equal(out, np.zeros(3))

    def test_hand_computed_log_shift(self):
        # pre-standardization values of [1, 2, 11]: log(0.01), log(1.01), log(10.01)
        expected_pre = np.array([-4.605170, 0.00995033, 2.303585])
        out = transform_scores(np.array([1.0, 2.0, 11.0]))
        std = expected_pre.std()
        np.testing.assert_allclose(out, (expected_pre - expected_pre.mean()) / std, atol=1e-5)
        assert out[0] == out.min()
        assert np.all(np.diff(out) > 0)

    def test_strictly_increasing_preserved(self):
        x = np.array([0.1, 0.5, 0.6, 2.0, 9.0])
        assert np.all(np.diff(transform_scores(x)) > 0)

    def test_rank_preserving_under_affine_maps(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = rng.normal(size=30) * rng.uniform(0.1, 50)
            a, b = rng.uniform(0.01, 10), rng.normal() * 5
            out = transform_scores(a * x + b)
            assert np.array_equal(rankdata(out), rankdata(a * x + b))

    def test_output_always_standardized(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            out = transform_scores(rng.exponential(size=40))
            assert abs(out.mean()) < 1e-9
            assert abs(out.std() - 1.0) < 1e-9

    def test_double_transform_still_standardized(self):
        # idempotence is NOT claimed; the invariant is the output contract
        rng = np.random.default_rng(2)
        once = transform_scores(rng.exponential(size=60))
        twice = transform_scores(once)
        assert abs(twice.mean()) < 1e-9
        assert abs(twice.std() - 1.0) < 1e-9

    def test_nan_rejected_with_column_context(self):
        with pytest.raises(ScoreSpaceError, match="column 3"):
            transform_scores(np.array([1.0, np.nan, 2.0]), column=3)

    def test_too_short(self):
        with pytest.raises(ScoreSpaceError):
            transform_scores(np.array([1.0]))


class TestBuildScoreMatrix:
    def test_two_cluster_fixture_two_standardized_columns(self):
        ds = two_blob_dataset(seed=3, n=120)
        mat = build_score_matrix(ds, [DetectorSpec("knn"), DetectorSpec("hbos")])
        assert mat.values.shape == (120, 2)
        assert mat.detector_names == ["knn", "hbos"]
        assert mat.transformed
        for j in range(2):
            assert abs(mat.values[:, j].mean()) < 1e-9
            assert abs(mat.values[:, j].std() - 1.0) < 1e-9

    def test_empty_detector_list_rejected(self):
        with pytest.raises(ScoreSpaceError, match="empty"):
            build_score_matrix(two_blob_dataset(), [])

    def test_external_csv_round_trip(self, tmp_path):
        ds = two_blob_dataset(seed=4, n=50)
        rng = np.random.default_rng(5)
        raw = rng.exponential(size=(50, 1))
        path = write_scores_csv(tmp_path / "ext.csv", raw)
        mat = build_score_matrix(
            ds, [DetectorSpec("external", params={"path": str(path)})]
        )
        np.testing.assert_allclose(
            mat.values[:, 0], transform_scores(raw[:, 0]), atol=1e-12
        )

    def test_failing_detector_named(self, tmp_path):
        ds = two_blob_dataset(seed=6, n=30)
        spec = DetectorSpec("external", params={"path": str(tmp_path / "missing.csv")})
        with pytest.raises(ScoreSpaceError, match="missing.csv"):
            build_score_matrix(ds, [spec])

    def test_deterministic_given_seed(self):
        ds = two_blob_dataset(seed=7, n=80)
        specs = [DetectorSpec("knn"), DetectorSpec("iforest", seed=9)]
        m1 = build_score_matrix(ds, specs)
        m2 = build_score_matrix(ds, specs)
        assert np.array_equal(m1.values, m2.values)


class TestIngestScores:
    def test_identity_parse(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("0.1,0.5\n0.2,0.6\n0.9,0.1\n")
        mat = ingest_scores(str(p))
        np.testing.assert_array_equal(
            mat.values, [[0.1, 0.5], [0.2, 0.6], [0.9, 0.1]]
        )
        assert not mat.transformed

    def test_ragged_row_reports_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("0.1,0.5\n0.2\n0.9,0.1\n")
        with pytest.raises(ScoreSpaceError, match=":2"):
            ingest_scores(str(p))

    def test_header_capture(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("knn,hbos\n0.1,0.5\n0.2,0.6\n")
        mat = ingest_scores(str(p), has_header=True)
        assert mat.detector_names == ["knn", "hbos"]

    def test_non_numeric_cell(self, tmp_path):
        p = tmp_path / "n.csv"
        p.write_text("0.1,0.5\n0.2,oops\n")
        with pytest.raises(ScoreSpaceError, match="oops"):
            ingest_scores(str(p))

    def test_too_few_rows(self, tmp_path):
        p = tmp_path / "one.csv"
        p.write_text("0.1,0.5\n")
        with pytest.raises(ScoreSpaceError, match="at least 2"):
            ingest_scores(str(p))

    def test_scientific_notation_accepted(self, tmp_path):
        p = tmp_path / "sci.csv"
        p.write_text("1e-3,2E4\n-1.5e2,0.0\n")
        mat = ingest_scores(str(p))
        np.testing.assert_array_equal(mat.values, [[1e-3, 2e4], [-1.5e2, 0.0]])


class TestLoadDatasetCsv:
    def test_label_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b,label\n0.0,1.0,0\n2.0,3.0,1\n4.0,5.0,0\n")
        ds = load_dataset_csv(str(p))
        assert ds.X.shape == (3, 2)
        np.testing.assert_array_equal(ds.labels, [0, 1, 0])
        assert ds.contamination == pytest.approx(1 / 3)

    def test_headerless_all_features(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0.0,1.0\n2.0,3.0\n")
        ds = load_dataset_csv(str(p))
        assert ds.X.shape == (2, 2)
        assert ds.labels is None


class TestTypes:
    def test_dataset_invariants(self):
        with pytest.raises(ScoreSpaceError):
            RawDataset(X=np.zeros((1, 3)))
        with pytest.raises(ScoreSpaceError):
            RawDataset(X=np.zeros((4, 2)), labels=np.array([0, 1, 2, 0]))

    def test_matrix_transformed_flag_checked(self):
        with pytest.raises(ScoreSpaceError, match="not standardized"):
            ScoreMatrix(values=np.array([[1.0], [2.0]]), transformed=True)

    def test_transform_matrix(self):
        raw = ScoreMatrix(values=np.array([[1.0, 5.0], [2.0, 5.5], [4.0, 9.0]]))
        out = transform_matrix(raw)
        assert out.transformed
        assert abs(out.values[:, 0].mean()) < 1e-9
