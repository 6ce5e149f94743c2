from contextlib import nullcontext as does_not_raise

import numpy as np
import pytest

from satrestore.errors import ConfigError, DimensionError, ManifestError
from satrestore.imaging import Kernel
from satrestore.models.cae import AnalyticCae, CaeModel, load_cae
from satrestore.models.forward import ForwardModel
from satrestore.models.layers import ConvTranspose2d, Network
from satrestore.models.manifest import save_manifest
from tests.conftest import GOLDEN_NETWORKS, make_cae_networks, make_toy_image


def random_latents(model, image_shape, g):
    z_shape, h_shape = model.latent_shapes(image_shape)
    return g.standard_normal(z_shape), g.standard_normal(h_shape)


class TestCaeModel:
    def test_load(self, cae_manifest):
        model = load_cae(cae_manifest)

        assert isinstance(model, CaeModel)
        assert model.downsampling_factor == 4
        assert model.latent_shapes((16, 12)) == ((2, 8, 6), (1, 4, 3))

    def test_encode_decode_shapes(self, cae_networks):
        model = CaeModel(**cae_networks)

        z, h = model.encode(make_toy_image((16, 16)))
        mean, sigma = model.decode(z, h)

        assert z.shape == (2, 8, 8)
        assert h.shape == (1, 4, 4)
        assert mean.shape == sigma.shape == (16, 16)
        assert np.all(sigma > 0)

    @pytest.mark.parametrize(
        "shape,expectation",
        [
            ((16, 8), does_not_raise()),
            ((18, 16), pytest.raises(DimensionError, match="multiples of the model's downsampling factor 4")),
            ((16, 6), pytest.raises(DimensionError, match="multiples of the model's downsampling factor 4")),
        ],
    )
    def test_image_shape(self, cae_networks, shape, expectation):
        with expectation:
            CaeModel(**cae_networks).latent_shapes(shape)

    def test_missing_network_raises(self, tmp_path, cae_networks):
        del cae_networks["variance_decoder"]
        save_manifest(tmp_path / "cae.json", cae_networks)

        with pytest.raises(ManifestError, match="no network 'variance_decoder'"):
            load_cae(tmp_path / "cae.json")

    def test_mismatched_networks_raise(self, tmp_path, cae_networks):
        cae_networks["decoder"] = Network(
            "decoder", (ConvTranspose2d(np.zeros((2, 2, 2, 2)), stride=2, name="deconv"),)
        )
        save_manifest(tmp_path / "cae.json", cae_networks)

        with pytest.raises(ManifestError, match="Invalid shape chain.*'decoder'"):
            load_cae(tmp_path / "cae.json")

    def test_decoder_vjp_matches_finite_differences(self, cae_networks):
        g = np.random.default_rng(0)
        model = CaeModel(**cae_networks)
        z, h = random_latents(model, (8, 8), g)
        cotangent_mean, cotangent_sigma, direction = (
            g.standard_normal((8, 8)),
            g.standard_normal((8, 8)),
            g.standard_normal(z.shape),
        )

        def objective(z):
            mean, sigma = model.decode(z, h)
            return np.sum(mean * cotangent_mean) + np.sum(sigma * cotangent_sigma)

        eps = 1e-6
        numerical = (objective(z + eps * direction) - objective(z - eps * direction)) / (2 * eps)
        grad_z, grad_h = model.vjp_latent(z, h, cotangent_mean, cotangent_sigma)

        assert np.sum(grad_z * direction) == pytest.approx(numerical, rel=1e-6)
        assert np.array_equal(grad_h, np.zeros_like(h))

    def test_latent_prior_grad_matches_finite_differences(self, cae_networks):
        g = np.random.default_rng(1)
        model = CaeModel(**cae_networks)
        z, h = random_latents(model, (16, 8), g)
        direction_z, direction_h = g.standard_normal(z.shape), g.standard_normal(h.shape)

        eps = 1e-6
        numerical = (
            model.latent_prior_logpdf(z + eps * direction_z, h + eps * direction_h)
            - model.latent_prior_logpdf(z - eps * direction_z, h - eps * direction_h)
        ) / (2 * eps)
        grad_z, grad_h = model.latent_prior_grad(z, h)

        assert np.sum(grad_z * direction_z) + np.sum(grad_h * direction_h) == pytest.approx(numerical, rel=1e-6)

    def test_latent_distribution_deviation_is_positive(self):
        model = CaeModel(**make_cae_networks(seed=3))

        _, std = model.latent_distribution(np.random.default_rng(2).standard_normal((1, 2, 2)) * 10)

        assert np.all(std > 0)


class TestGoldenCae:
    IMAGE = np.array(
        [
            [0.0, 0.5, 1.0, 1.0],
            [0.5, 1.0, 1.0, 0.5],
            [0.0, 0.0, 0.25, 0.75],
            [0.25, 0.25, 0.25, 0.25],
        ]
    )
    # leaky_relu(block mean - 1/2) with a negative slope of 1/4
    LATENT = np.array([[[0.0, 0.375], [-0.09375, -0.03125]]])

    @pytest.fixture
    def model(self):
        return load_cae(GOLDEN_NETWORKS)

    def test_encode(self, model):
        z, h = model.encode(self.IMAGE)

        np.testing.assert_array_equal(z, self.LATENT)
        np.testing.assert_array_equal(h, [[[0.125]]])

    def test_decode(self, model):
        mean, sigma = model.decode(self.LATENT, np.array([[[0.125]]]))

        np.testing.assert_array_equal(
            mean,
            [
                [0.5, 0.5, 0.875, 0.875],
                [0.5, 0.5, 0.875, 0.875],
                [0.40625, 0.40625, 0.46875, 0.46875],
                [0.40625, 0.40625, 0.46875, 0.46875],
            ],
        )
        raw = np.kron(self.LATENT[0] / 2, np.ones((2, 2)))
        np.testing.assert_allclose(sigma, np.log1p(np.exp(raw)), rtol=1e-12)

    def test_latent_distribution(self, model):
        mean, std = model.latent_distribution(np.array([[[0.125]]]))

        np.testing.assert_array_equal(mean, np.full((1, 2, 2), 0.125))
        np.testing.assert_allclose(std, np.full((1, 2, 2), np.log1p(np.e)), rtol=1e-12)


class TestAnalyticCae:
    @pytest.mark.parametrize(
        "kwargs,expectation",
        [
            ({}, does_not_raise()),
            ({"block_size": 0}, pytest.raises(ConfigError, match="block size")),
            ({"tau": 0}, pytest.raises(ConfigError, match="tau and gamma")),
            ({"gamma": -1}, pytest.raises(ConfigError, match="tau and gamma")),
        ],
    )
    def test_validation(self, kwargs, expectation):
        with expectation:
            AnalyticCae(**kwargs)

    def test_latent_shapes(self):
        assert AnalyticCae(block_size=4).latent_shapes((8, 12)) == ((16, 2, 3), (0,))

    def test_decode_inverts_encode(self):
        model = AnalyticCae(gamma=0.05)
        x = make_toy_image((8, 8))

        z, h = model.encode(x)
        mean, sigma = model.decode(z, h)

        assert np.allclose(mean, x)
        assert np.all(sigma == 0.05)

    def test_constant_block_has_one_coefficient(self):
        z, _ = AnalyticCae(block_size=2).encode(np.full((2, 2), 0.5))

        assert z[:, 0, 0] == pytest.approx([1.0, 0, 0, 0])

    def test_decoder_is_orthogonal(self):
        matrix = AnalyticCae().transform_matrix((8, 8))

        assert matrix.shape == (64, 64)
        assert np.allclose(matrix.T @ matrix, np.eye(64))

    def test_vjp_is_transpose(self):
        g = np.random.default_rng(4)
        model = AnalyticCae()
        z, h = random_latents(model, (8, 8), g)
        cotangent = g.standard_normal((8, 8))

        grad_z, _ = model.vjp_latent(z, h, cotangent, np.zeros((8, 8)))

        assert np.sum(model.decode(z, h)[0] * cotangent) == pytest.approx(np.sum(z * grad_z))

    def test_latent_prior(self):
        model = AnalyticCae(tau=2.0)
        z = np.random.default_rng(5).standard_normal((16, 1, 1))

        expected = np.sum(-0.5 * (z / 2) ** 2 - np.log(2) - 0.5 * np.log(2 * np.pi))

        assert model.latent_prior_logpdf(z, np.zeros(0)) == pytest.approx(expected)
        assert np.allclose(model.latent_prior_grad(z, np.zeros(0))[0], -z / 4)

    def test_exact_posterior_identity_operator(self):
        model = AnalyticCae(tau=1.0)
        fm = ForwardModel(sigma0=0.1)
        y = make_toy_image((8, 8))

        posterior = model.exact_posterior(y, fm)

        # Both precisions are multiples of the identity: 1 / 0.1**2 and 1
        assert np.allclose(posterior.mean, model.encode(y)[0] * 100 / 101)
        assert np.allclose(posterior.covariance, np.eye(64) / 101)

    def test_exact_posterior_blurred(self):
        model = AnalyticCae(block_size=2, tau=0.5)
        fm = ForwardModel(Kernel(np.ones((3, 3)) / 9), scale=2, sigma0=0.05)
        y = make_toy_image((4, 4))

        posterior = model.exact_posterior(y, fm)

        assert posterior.mean.shape == (4, 4, 4)
        assert posterior.covariance.shape == (64, 64)
        assert np.allclose(posterior.covariance, posterior.covariance.T)
        assert np.all(np.linalg.eigvalsh(posterior.covariance) > 0)
        # The posterior is never wider than the prior
        assert np.all(np.diag(posterior.covariance) <= 0.25)

    def test_exact_posterior_requires_white_noise(self):
        with pytest.raises(ConfigError, match="k_gain = 0"):
            AnalyticCae().exact_posterior(np.zeros((8, 8)), ForwardModel(k_gain=1e-3))
