from contextlib import nullcontext as does_not_raise

import numpy as np
import pytest

from satrestore.errors import ConfigError, DataError, DimensionError
from satrestore.imaging import Kernel, Rng
from satrestore.models.cae import AnalyticCae, CaeModel
from satrestore.models.forward import ForwardModel, degrade
from satrestore.solvers.vble import (
    BResolution,
    FitReport,
    VariationalState,
    VbleConfig,
    VbleMode,
    elbo_estimate,
    fit,
    initial_state,
    mmse_and_quantiles,
    posterior_deviation,
    sample_posterior,
)
from satrestore.uncertainty import apply_calibration, calibrate, icp
from tests.conftest import make_cae_networks, make_toy_image


def analytic_state(shape=(8, 8), a=0.5, b=1.0, seed=0, b_resolution=BResolution.PIXEL):
    z_shape = (16, shape[0] // 4, shape[1] // 4)
    b_shape = shape if b_resolution == BResolution.PIXEL else (1, 1)
    return VariationalState(
        z_bar=np.random.default_rng(seed).standard_normal(z_shape),
        log_a=np.full(z_shape, np.log(a)),
        h_bar=np.zeros(0),
        log_a_h=np.zeros(0),
        log_b=np.full(b_shape, np.log(b)),
    )


def directional_derivative_error(state, y, fm, model, mode, g, lam=0.6, eps=1e-6, freeze_b=False) -> float:
    """Relative difference between the bound gradient and central differences, with common random numbers."""
    rng = Rng(7)
    direction = VariationalState(**{name: g.standard_normal(array.shape) for name, array in state.arrays().items()})

    def shifted(sign):
        return VariationalState(
            **{name: array + sign * eps * getattr(direction, name) for name, array in state.arrays().items()}
        )

    plus, _ = elbo_estimate(shifted(1), y, fm, model, lam, rng, mode, freeze_b=freeze_b)
    minus, _ = elbo_estimate(shifted(-1), y, fm, model, lam, rng, mode, freeze_b=freeze_b)
    _, grads = elbo_estimate(state, y, fm, model, lam, rng, mode, freeze_b=freeze_b)

    numerical = (plus - minus) / (2 * eps)
    analytical = sum(np.sum(getattr(grads, name) * array) for name, array in direction.arrays().items())

    return abs(numerical - analytical) / abs(analytical)


class TestVbleConfig:
    def test_defaults(self):
        cfg = VbleConfig()

        assert cfg.mode is VbleMode.VBLE
        assert cfg.lam == 0.6
        assert cfg.n_posterior_samples == 100
        assert cfg.b_resolution is BResolution.PIXEL
        assert cfg.a_init == 1.0
        assert cfg.antithetic

    @pytest.mark.parametrize(
        "kwargs,expectation",
        [
            ({"mode": "vble_xz", "b_resolution": "channel"}, does_not_raise()),
            ({"freeze_b": True, "b_init": 0.0}, does_not_raise()),
            ({"mode": "vae"}, pytest.raises(ConfigError, match="Unknown mode 'vae'")),
            ({"b_resolution": "row"}, pytest.raises(ConfigError, match="Unknown b_resolution 'row'")),
            ({"lam": 0}, pytest.raises(ConfigError, match="lam must be positive")),
            ({"n_opt_iters": 0}, pytest.raises(ConfigError, match="must be positive")),
            ({"n_posterior_samples": 0}, pytest.raises(ConfigError, match="must be positive")),
            ({"step_size": 0}, pytest.raises(ConfigError, match="step_size")),
            ({"beta2": 1.0}, pytest.raises(ConfigError, match="moment decay rates")),
            ({"a_init": 0}, pytest.raises(ConfigError, match="a_init")),
            ({"b_init": 0.0}, pytest.raises(ConfigError, match="b_init must be positive unless b is frozen")),
        ],
    )
    def test_validation(self, kwargs, expectation):
        with expectation:
            VbleConfig(**kwargs)


class TestElboEstimate:
    @pytest.mark.parametrize("mode", ["vble", "vble_xz"])
    @pytest.mark.parametrize("b_resolution", ["pixel", "channel"])
    def test_gradient_on_analytic_model(self, mode, b_resolution):
        g = np.random.default_rng(0)
        model = AnalyticCae(gamma=0.05)
        fm = ForwardModel(Kernel.from_array(g.random((3, 3))), scale=2, sigma0=0.05, k_gain=1e-3)
        state = analytic_state(a=0.3, b=0.8, b_resolution=BResolution(b_resolution))
        state.z_bar *= 0.1
        state.z_bar[0] += 2
        y = degrade(make_toy_image((8, 8)), fm, Rng(0))

        assert directional_derivative_error(state, y, fm, model, mode, g) < 1e-4

    def test_gradient_on_two_by_two_latent(self):
        g = np.random.default_rng(1)
        model = AnalyticCae(block_size=2)
        fm = ForwardModel(sigma0=0.1, k_gain=1e-2)
        state = initial_state(np.full((2, 2), 0.5), fm, model, VbleConfig(a_init=0.2))

        assert state.z_bar.shape == (4, 1, 1)
        assert directional_derivative_error(state, np.full((2, 2), 0.5), fm, model, "vble_xz", g) < 1e-4

    @pytest.mark.parametrize("mode", ["vble", "vble_xz"])
    def test_gradient_on_autoencoder(self, mode):
        g = np.random.default_rng(2)
        model = CaeModel(**make_cae_networks())
        fm = ForwardModel(Kernel(np.ones((3, 3)) / 9), sigma0=0.05, k_gain=1e-3)
        y = degrade(make_toy_image((8, 8)), fm, Rng(1))
        state = initial_state(y, fm, model, VbleConfig(a_init=0.1))

        assert directional_derivative_error(state, y, fm, model, mode, g) < 1e-4

    def test_common_random_numbers(self):
        model = AnalyticCae()
        fm = ForwardModel(sigma0=0.1)
        state = analytic_state()
        y = make_toy_image((8, 8))

        first = elbo_estimate(state, y, fm, model, 0.6, Rng(3), "vble_xz")
        second = elbo_estimate(state, y, fm, model, 0.6, Rng(3), "vble_xz")

        assert first[0] == second[0]
        assert np.array_equal(first[1].z_bar, second[1].z_bar)
        assert first[0] != elbo_estimate(state, y, fm, model, 0.6, Rng(4), "vble_xz")[0]

    @pytest.mark.parametrize("mode", ["vble", "vble_xz"])
    def test_mirrored_draws_give_exact_mean_gradient(self, mode):
        model = AnalyticCae()
        fm = ForwardModel(sigma0=0.05)
        y = make_toy_image((8, 8))
        state = analytic_state()

        _, grads = elbo_estimate(state, y, fm, model, 0.6, Rng(0), mode, antithetic=True)

        expected = (model.encode(y)[0] - state.z_bar) / fm.sigma0**2 - 0.6 * state.z_bar / model.tau**2
        assert np.allclose(grads.z_bar, expected)

    def test_mirrored_draws_share_common_random_numbers(self):
        model = AnalyticCae()
        fm = ForwardModel(sigma0=0.05)
        y = make_toy_image((8, 8))

        plain = elbo_estimate(analytic_state(), y, fm, model, 0.6, Rng(3), "vble_xz")[0]
        mirrored = elbo_estimate(analytic_state(), y, fm, model, 0.6, Rng(3), "vble_xz", antithetic=True)[0]
        mirrored_again = elbo_estimate(analytic_state(), y, fm, model, 0.6, Rng(3), "vble_xz", antithetic=True)[0]

        assert mirrored == mirrored_again
        assert mirrored != plain

    def test_frozen_b_has_no_gradient(self):
        model = AnalyticCae()
        fm = ForwardModel(sigma0=0.1)

        y = make_toy_image((8, 8))

        _, grads = elbo_estimate(analytic_state(), y, fm, model, 0.6, Rng(0), "vble_xz", freeze_b=True)

        assert np.array_equal(grads.log_b, np.zeros((8, 8)))

    def test_width_gradient_balances_entropy_and_prior(self):
        model = AnalyticCae()
        fm = ForwardModel(sigma0=1e3)
        state = analytic_state(a=1.0)
        state.z_bar[...] = 0

        _, grads = elbo_estimate(state, np.zeros((8, 8)), fm, model, 0.5, Rng(0), "vble", mc_samples=20)

        # lam * (1 - a**2 E[u**2] / tau**2) under a flat likelihood
        assert np.mean(grads.log_a) == pytest.approx(0.5 * (1 - 1 / 12), abs=0.01)

    @pytest.mark.slow
    def test_unbiased(self):
        model = AnalyticCae(gamma=0.05)
        fm = ForwardModel(sigma0=0.1, k_gain=1e-2)
        state = analytic_state(a=0.3)
        y = make_toy_image((8, 8))

        estimates = np.array(
            [elbo_estimate(state, y, fm, model, 0.6, Rng(i), "vble_xz")[0] for i in range(10_000)]
        )
        reference, _ = elbo_estimate(state, y, fm, model, 0.6, Rng(10**9), "vble_xz", mc_samples=100_000)

        assert abs(estimates.mean() - reference) < 3 * estimates.std() / np.sqrt(len(estimates))


class TestFit:
    def test_report(self):
        model = AnalyticCae()
        fm = ForwardModel(sigma0=0.05)
        cfg = VbleConfig(n_opt_iters=20)

        state, report = fit(make_toy_image((8, 8)), fm, model, cfg, return_report=True)

        assert isinstance(state, VariationalState)
        assert isinstance(report, FitReport)
        assert report.trace.columns.tolist() == ["iteration", "elbo", "rejected"]
        assert len(report.trace) == 20
        assert report.rejected_steps == 0
        assert not report.quality_warning
        assert report.seconds > 0

    def test_deterministic(self):
        model = AnalyticCae()
        fm = ForwardModel(sigma0=0.05, k_gain=1e-3)
        y = make_toy_image((8, 8))
        cfg = VbleConfig(mode="vble_xz", n_opt_iters=10)

        first = fit(y, fm, model, cfg)
        second = fit(y, fm, model, cfg, rng=Rng(cfg.seed))

        for name, array in first.arrays().items():
            assert np.array_equal(array, getattr(second, name))

        assert not np.array_equal(fit(y, fm, model, cfg, rng=Rng(1)).z_bar, first.z_bar)

    def test_latent_mode_keeps_b(self):
        state = fit(make_toy_image((8, 8)), ForwardModel(sigma0=0.05), AnalyticCae(), VbleConfig(n_opt_iters=5))

        assert np.array_equal(state.log_b, np.zeros((8, 8)))

    def test_channel_b_resolution(self):
        cfg = VbleConfig(mode="vble_xz", b_resolution="channel", n_opt_iters=5)

        state = fit(make_toy_image((8, 8)), ForwardModel(sigma0=0.05), AnalyticCae(), cfg)

        assert state.log_b.shape == (1, 1)

    def test_super_resolution_shapes(self):
        fm = ForwardModel(Kernel(np.ones((3, 3)) / 9), scale=2, sigma0=0.05)

        state = fit(make_toy_image((4, 4)), fm, AnalyticCae(), VbleConfig(n_opt_iters=5))

        assert state.z_bar.shape == (16, 2, 2)

    def test_incompatible_shape_raises(self):
        with pytest.raises(DimensionError, match="downsampling factor 4"):
            fit(np.zeros((6, 6)), ForwardModel(), AnalyticCae(), VbleConfig(n_opt_iters=1))

    def test_frozen_zero_b_matches_latent_mode(self):
        model = AnalyticCae(gamma=0.05)
        fm = ForwardModel(Kernel(np.ones((3, 3)) / 9), sigma0=0.05, k_gain=1e-3)
        y = degrade(make_toy_image((8, 8)), fm, Rng(0))

        latent = fit(y, fm, model, VbleConfig(n_opt_iters=30))
        joint = fit(y, fm, model, VbleConfig(mode="vble_xz", freeze_b=True, b_init=0.0, n_opt_iters=30))

        assert np.array_equal(latent.z_bar, joint.z_bar)
        assert np.array_equal(latent.log_a, joint.log_a)

        latent_samples = sample_posterior(latent, model, 3, Rng(1), "vble")
        joint_samples = sample_posterior(joint, model, 3, Rng(1), "vble_xz")
        for latent_sample, joint_sample in zip(latent_samples, joint_samples):
            assert np.array_equal(latent_sample, joint_sample)

    def test_rejected_steps_are_flagged(self):
        class BrokenPrior(AnalyticCae):
            def latent_prior_logpdf(self, z, h):
                return float("nan")

        y = make_toy_image((8, 8))

        with pytest.warns(UserWarning, match="10 of 10 optimization steps were rejected"):
            state, report = fit(
                y, ForwardModel(sigma0=0.05), BrokenPrior(), VbleConfig(n_opt_iters=10), return_report=True
            )

        assert report.rejected_steps == 10
        assert report.quality_warning
        assert report.trace["rejected"].all()
        # Rejected steps leave the warm start untouched
        assert np.array_equal(state.z_bar, AnalyticCae().encode(y)[0])

    def test_trivial_problem(self):
        y = make_toy_image((8, 8))
        model = AnalyticCae()
        fm = ForwardModel(sigma0=1e-3)

        state = fit(y, fm, model, VbleConfig(n_opt_iters=300, final_step_ratio=1e-2, a_init=0.01))
        mean, _ = model.decode(state.z_bar, state.h_bar)

        assert np.sqrt(np.mean((mean - y) ** 2)) < 1e-2

    @pytest.mark.slow
    @pytest.mark.parametrize("scale", [1, 2])
    def test_matches_exact_posterior(self, scale):
        model = AnalyticCae(tau=1.0)
        fm = ForwardModel(Kernel(np.ones((3, 3)) / 9), scale=scale, sigma0=0.1)
        y = degrade(make_toy_image((8, 8)), fm, Rng(2))
        cfg = VbleConfig(lam=1.0, n_opt_iters=4000, step_size=1e-2, final_step_ratio=1e-2, a_init=0.3)

        state = fit(y, fm, model, cfg)
        exact = model.exact_posterior(y, fm).mean

        assert np.sqrt(np.mean((state.z_bar - exact) ** 2)) < 0.02 * np.sqrt(np.mean(exact**2))


class TestSamplePosterior:
    def test_count_and_shape(self):
        samples = sample_posterior(analytic_state(), AnalyticCae(), 5, Rng(0), "vble_xz")

        assert len(samples) == 5
        assert all(sample.shape == (8, 8) for sample in samples)

    def test_samples_are_independent_of_count(self):
        state = analytic_state()

        few = sample_posterior(state, AnalyticCae(), 2, Rng(0), "vble_xz")
        many = sample_posterior(state, AnalyticCae(), 4, Rng(0), "vble_xz")

        assert np.array_equal(few[1], many[1])
        assert not np.array_equal(many[2], many[3])

    def test_latent_mean_is_pushed_forward(self):
        model = AnalyticCae()
        state = analytic_state(a=0.5)
        n = 2000

        samples = np.stack(sample_posterior(state, model, n, Rng(0), "vble"))
        mean, _ = model.decode(state.z_bar, state.h_bar)

        # Each pixel is an orthogonal combination of uniform latents of width 0.5
        bound = 4 * 0.5 / np.sqrt(12 * n)
        assert np.max(np.abs(samples.mean(axis=0) - mean)) < bound

    @pytest.mark.slow
    def test_joint_variance(self):
        model = AnalyticCae(gamma=0.1)
        state = analytic_state(shape=(4, 4), a=0.5, b=1.0)
        n = 20_000

        samples = np.stack(sample_posterior(state, model, n, Rng(0), "vble_xz"))

        expected = 0.5**2 / 12 + 0.1**2
        assert np.allclose(samples.var(axis=0), expected, rtol=0.05)


class TestMmseAndQuantiles:
    def test_gaussian_quantile(self):
        samples = np.random.default_rng(0).standard_normal((10_000, 2, 3))

        mmse, quantile = mmse_and_quantiles(samples, 0.9)

        assert mmse.shape == quantile.shape == (2, 3)
        assert np.allclose(quantile, 1.645 * samples.std(axis=0), rtol=0.03)

    def test_two_samples(self):
        mmse, quantile = mmse_and_quantiles([np.zeros((1, 1)), np.full((1, 1), 2.0)], 0.5)

        assert mmse.tolist() == [[1.0]]
        assert quantile.tolist() == [[1.0]]

    def test_one_sample_raises(self):
        with pytest.raises(DataError, match="At least 2 samples"):
            mmse_and_quantiles([np.zeros((2, 2))], 0.9)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, 1.5])
    def test_alpha_out_of_range_raises(self, alpha):
        with pytest.raises(ConfigError, match="alpha must lie in"):
            mmse_and_quantiles([np.zeros((2, 2))] * 2, alpha)

    def test_posterior_deviation(self):
        samples = [np.zeros((2, 2)), np.full((2, 2), 2.0), np.full((2, 2), 4.0)]

        assert np.allclose(posterior_deviation(samples), 2.0)


@pytest.mark.slow
def test_calibration_corrects_underdispersed_bounds():
    # With lam < 1 the fitted widths shrink the posterior, so the raw bounds are too narrow
    model = AnalyticCae(gamma=1e-3)
    fm = ForwardModel(sigma0=0.05)
    cfg = VbleConfig(mode="vble_xz", n_opt_iters=500, step_size=2e-2, final_step_ratio=0.1, a_init=0.1)

    def solve(seed):
        clean = make_toy_image((32, 32), seed)
        y = degrade(clean, fm, Rng(seed))
        state = fit(y, fm, model, cfg, rng=Rng(seed))
        samples = sample_posterior(state, model, 100, Rng(seed).substream(1), "vble_xz")
        mmse, raw_bound = mmse_and_quantiles(samples, 0.9)
        return clean, mmse, raw_bound, posterior_deviation(samples)

    held_in = [solve(seed) for seed in range(10)]
    held_out = [solve(seed) for seed in range(10, 20)]

    table = calibrate([(deviation, clean - mmse) for clean, mmse, _, deviation in held_in], 0.9)
    calibrated = np.mean(
        [icp(clean, mmse, apply_calibration(table, deviation)) for clean, mmse, _, deviation in held_out]
    )
    uncalibrated = np.mean([icp(clean, mmse, raw_bound) for clean, mmse, raw_bound, _ in held_out])

    assert calibrated == pytest.approx(0.9, abs=0.03)
    assert uncalibrated < calibrated
