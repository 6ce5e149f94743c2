from contextlib import nullcontext as does_not_raise

import numpy as np
import pytest

from satrestore.errors import ConfigError, DataError, DimensionError
from satrestore.uncertainty import (
    DEFAULT_ALPHAS,
    CalibrationTable,
    _fill_underpopulated,
    apply_calibration,
    calibrate,
    coverage_curve,
    icp,
)


def gaussian_posterior(shape=(64, 64), n_samples=200, seed=0):
    """Ground truth and samples drawn from the same per-pixel Gaussian posterior."""
    g = np.random.default_rng(seed)
    mean = g.random(shape)
    deviation = 0.01 + 0.1 * g.random(shape)

    ground_truth = mean + deviation * g.standard_normal(shape)
    samples = mean + deviation * g.standard_normal((n_samples, *shape))

    return ground_truth, samples


class TestCalibrationTable:
    @pytest.mark.parametrize(
        "edges,quantiles,counts,expectation",
        [
            ([0, 1, 2], [0.1, 0.2], [5, 5], does_not_raise()),
            ([0], [], [], pytest.raises(DataError, match="strictly increasing")),
            ([0, 1, 1], [0.1, 0.2], [5, 5], pytest.raises(DataError, match="strictly increasing")),
            ([0, 1, 2], [0.1], [5, 5], pytest.raises(DimensionError, match="2 bins")),
            ([0, 1, 2], [0.1, 0.2], [5], pytest.raises(DimensionError, match="2 bins")),
        ],
    )
    def test_validation(self, edges, quantiles, counts, expectation):
        with expectation:
            CalibrationTable(0.9, edges, quantiles, counts)

    def test_json_round_trip(self, tmp_path):
        table = CalibrationTable(0.9, [0.0, 0.5, 1.0], [0.1, 0.3], [60, 70], min_count=40)

        table.to_json(tmp_path / "table.json")
        loaded = CalibrationTable.from_json(tmp_path / "table.json")

        assert loaded.alpha == 0.9
        assert loaded.min_count == 40
        assert loaded.bin_edges.tolist() == [0.0, 0.5, 1.0]
        assert loaded.quantiles.tolist() == [0.1, 0.3]
        assert loaded.counts.tolist() == [60, 70]

    def test_invalid_json_raises(self, tmp_path):
        (tmp_path / "table.json").write_text('{"alpha": 0.9}')

        with pytest.raises(DataError, match="not a valid calibration table"):
            CalibrationTable.from_json(tmp_path / "table.json")

    def test_to_frame(self):
        frame = CalibrationTable(0.5, [0.0, 0.5, 1.0], [0.1, 0.3], [60, 70]).to_frame()

        assert frame.columns.tolist() == ["lower", "upper", "count", "quantile"]
        assert frame["upper"].tolist() == [0.5, 1.0]


class TestCalibrate:
    def test_scaled_errors(self):
        deviation = np.random.default_rng(0).uniform(0.01, 1, (100, 100))

        table = calibrate([(deviation, 2 * deviation)], 0.99)

        assert table.n_bins == 16
        assert table.counts.sum() == deviation.size
        assert np.allclose(table.quantiles, 2 * table.bin_edges[1:], atol=0.01)

    def test_gaussian_errors(self):
        g = np.random.default_rng(1)
        deviation = np.repeat([0.01, 0.02, 0.05, 0.1], 25_000).reshape(400, 250)
        error = deviation * g.standard_normal(deviation.shape)

        table = calibrate([(deviation, error)], 0.9, n_bins=4)

        assert table.n_bins == 4
        assert np.allclose(apply_calibration(table, deviation) / deviation, 1.645, rtol=0.05)

    def test_pairs_are_pooled(self):
        deviation = np.random.default_rng(2).uniform(0.01, 1, (50, 50))

        pooled = calibrate([(deviation, deviation), (deviation, deviation)], 0.5, n_bins=4)

        assert pooled.counts.sum() == 2 * deviation.size

    def test_quantiles_are_nondecreasing(self):
        deviation = np.random.default_rng(3).uniform(0.01, 1, (100, 100))

        table = calibrate([(deviation, 1 / deviation)], 0.9)

        assert np.all(np.diff(table.quantiles) >= 0)

    def test_constant_deviation(self):
        deviation = np.full((20, 20), 0.1)
        error = np.linspace(0, 1, 400).reshape(20, 20)

        table = calibrate([(deviation, error)], 0.5)

        assert table.n_bins == 1
        assert apply_calibration(table, deviation) == pytest.approx(np.full((20, 20), 0.5), abs=0.01)

    def test_underpopulated_bins_inherit_nearest(self):
        quantiles = np.array([1.0, 0.0, 0.0, 4.0, 0.0])
        populated = np.array([True, False, False, True, False])

        assert _fill_underpopulated(quantiles, populated).tolist() == [1.0, 1.0, 4.0, 4.0, 4.0]

    @pytest.mark.parametrize(
        "pairs,alpha,n_bins,expectation",
        [
            ([], 0.9, 16, pytest.raises(DataError, match="at least one")),
            ([(np.zeros((2, 2)), np.zeros((2, 3)))], 0.9, 16, pytest.raises(DimensionError, match="shapes differ")),
            ([(np.zeros((2, 2)), np.zeros((2, 2)))], 1.0, 16, pytest.raises(ConfigError, match="alpha")),
            ([(np.zeros((2, 2)), np.zeros((2, 2)))], 0.9, 0, pytest.raises(ConfigError, match="n_bins")),
        ],
    )
    def test_invalid_input_raises(self, pairs, alpha, n_bins, expectation):
        with expectation:
            calibrate(pairs, alpha, n_bins)


def test_apply_calibration_clamps_to_outer_bins():
    table = CalibrationTable(0.9, [0.1, 0.2, 0.3], [1.0, 2.0], [50, 50])

    bound = apply_calibration(table, [[0.0, 0.15, 0.25, 0.5]])

    assert bound.tolist() == [[1.0, 1.0, 2.0, 2.0]]


class TestIcp:
    def test_fraction(self):
        assert icp(np.zeros((2, 2)), [[0.1, 0.2], [0.3, 0.4]], 0.25) == 0.5

    def test_per_pixel_bound(self):
        assert icp(np.zeros((1, 2)), [[0.1, 0.2]], [[0.05, 0.3]]) == 0.5

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError, match="shapes differ"):
            icp(np.zeros((2, 2)), np.zeros((2, 3)), 0.1)


class TestCoverageCurve:
    def test_exact_posterior_is_on_identity(self):
        ground_truth, samples = gaussian_posterior()
        mmse = samples.mean(axis=0)

        curve = coverage_curve(ground_truth, mmse, samples)

        assert curve.columns.tolist() == ["alpha", "icp", "stderr"]
        assert curve["alpha"].tolist() == list(DEFAULT_ALPHAS)
        assert np.all(np.abs(curve["icp"] - curve["alpha"]) < 2 / np.sqrt(ground_truth.size))

    def test_overconfident_samples_undercover(self):
        ground_truth, samples = gaussian_posterior()
        mmse = samples.mean(axis=0)
        narrow = mmse + 0.5 * (samples - mmse)

        curve = coverage_curve(ground_truth, mmse, narrow, alphas=[0.5, 0.9])

        assert np.all(curve["icp"] < curve["alpha"])

    def test_calibrated_overconfident_samples_cover(self):
        ground_truth, samples = gaussian_posterior()
        mmse = samples.mean(axis=0)
        narrow = mmse + 0.5 * (samples - mmse)
        calibration_truth, calibration_samples = gaussian_posterior(seed=1)
        calibration_mmse = calibration_samples.mean(axis=0)
        calibration_pair = (0.5 * calibration_samples.std(axis=0, ddof=1), calibration_truth - calibration_mmse)

        tables = {alpha: calibrate([calibration_pair], alpha) for alpha in (0.5, 0.9)}
        curve = coverage_curve(ground_truth, mmse, narrow, alphas=[0.5, 0.9], tables=tables)

        assert np.allclose(curve["icp"], [0.5, 0.9], atol=0.03)

    def test_missing_table_raises(self):
        ground_truth, samples = gaussian_posterior((8, 8), 10)
        table = CalibrationTable(0.9, [0.0, 1.0], [0.1], [64])

        with pytest.raises(ConfigError, match="No calibration table for level 0.5"):
            coverage_curve(ground_truth, samples.mean(axis=0), samples, alphas=[0.9, 0.5], tables={0.9: table})
