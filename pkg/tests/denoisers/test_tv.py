import numpy as np
import pytest

from satrestore.denoisers.tv import TvDenoiser, divergence, gradient, total_variation, tv_prox
from tests.conftest import make_toy_image


def test_divergence_is_negative_adjoint_of_gradient():
    g = np.random.default_rng(0)
    x, p = g.standard_normal((7, 5)), g.standard_normal((2, 7, 5))

    assert np.sum(gradient(x) * p) == pytest.approx(-np.sum(x * divergence(p)))


def test_gradient_neumann_boundary():
    x = np.arange(12.0).reshape(3, 4)

    grad = gradient(x)

    assert np.all(grad[0, :-1] == 4)
    assert np.all(grad[0, -1] == 0)
    assert np.all(grad[1, :, :-1] == 1)
    assert np.all(grad[1, :, -1] == 0)


def test_total_variation_of_step():
    x = np.zeros((4, 4))
    x[:, 2:] = 1

    assert total_variation(x) == pytest.approx(4)


class TestTvProx:
    def test_zero_weight_is_identity(self):
        f = make_toy_image((8, 8))

        assert np.array_equal(tv_prox(f, 0), f)

    def test_preserves_mean(self):
        f = np.random.default_rng(1).random((16, 16))

        assert tv_prox(f, 0.1).mean() == pytest.approx(f.mean())

    def test_decreases_objective(self):
        f = np.random.default_rng(2).random((16, 16))
        weight = 0.1

        x = tv_prox(f, weight, iterations=100)

        assert total_variation(x) < total_variation(f)
        assert 0.5 * np.sum((x - f) ** 2) + weight * total_variation(x) < weight * total_variation(f)

    def test_more_weight_is_smoother(self):
        f = np.random.default_rng(3).random((16, 16))

        assert total_variation(tv_prox(f, 0.2)) < total_variation(tv_prox(f, 0.05))


def test_weight_grows_with_noise_level():
    f = np.random.default_rng(4).random((16, 16))
    denoiser = TvDenoiser()

    assert total_variation(denoiser.denoise(f, 0.1)) < total_variation(denoiser.denoise(f, 0.02))
