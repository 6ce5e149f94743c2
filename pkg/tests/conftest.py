from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy import ndimage

from satrestore.models.layers import AddBias, Conv2d, ConvTranspose2d, LeakyReLU, Network, ReLU
from satrestore.models.manifest import save_manifest

DATA_DIR = Path(__file__).parent / "data"
GOLDEN_NETWORKS = DATA_DIR / "golden_networks.json"
"""Manifest of small networks with dyadic weights, whose outputs are known exactly."""


def pytest_addoption(parser):
    parser.addoption(
        "--skip-slow",
        action="store_true",
        help="Skip the acceptance-scale tests.",
    )
    parser.addoption(
        "--update-golden",
        action="store_true",
        help="Rewrite the stored reference values instead of comparing against them.",
    )


def pytest_collection_modifyitems(config, items):
    for item in items:
        if item.get_closest_marker("slow") and config.getoption("--skip-slow"):
            item.add_marker(pytest.mark.skip(reason="Skipped with --skip-slow."))


def _float32_weights(generator: np.random.Generator, shape: tuple[int, ...], scale: float) -> np.ndarray:
    """Random weights that survive the float32 storage of weights manifests unchanged."""
    return (scale * generator.standard_normal(shape)).astype(np.float32).astype(np.float64)


def make_cae_networks(seed: int = 0) -> dict[str, Network]:
    """A small compressive autoencoder with a downsampling factor of 4 and 2 latent channels."""
    g = np.random.default_rng(seed)

    return {
        "encoder": Network(
            "encoder",
            (
                Conv2d(_float32_weights(g, (4, 1, 3, 3), 0.3), _float32_weights(g, (4,), 0.1), padding=1, name="conv1"),
                LeakyReLU(name="act1"),
                Conv2d(_float32_weights(g, (2, 4, 2, 2), 0.3), stride=2, name="conv2"),
            ),
        ),
        "decoder": Network(
            "decoder",
            (
                ConvTranspose2d(_float32_weights(g, (2, 4, 2, 2), 0.3), stride=2, name="deconv1"),
                LeakyReLU(name="act1"),
                Conv2d(_float32_weights(g, (1, 4, 3, 3), 0.3), np.array([0.5]), padding=1, name="conv2"),
            ),
        ),
        "variance_decoder": Network(
            "variance_decoder",
            (ConvTranspose2d(_float32_weights(g, (2, 1, 2, 2), 0.1), np.array([-4.0]), stride=2, name="deconv"),),
        ),
        "hyper_encoder": Network(
            "hyper_encoder",
            (Conv2d(_float32_weights(g, (1, 2, 2, 2), 0.3), stride=2, name="conv"),),
        ),
        "hyper_decoder": Network(
            "hyper_decoder",
            (
                ConvTranspose2d(_float32_weights(g, (1, 4, 2, 2), 0.3), stride=2, name="deconv"),
                AddBias(np.array([0.0, 0.0, 1.0, 1.0]), name="offset"),
            ),
        ),
    }


def make_denoiser_network(seed: int = 0) -> Network:
    g = np.random.default_rng(seed)

    return Network(
        "denoiser",
        (
            Conv2d(_float32_weights(g, (4, 2, 3, 3), 0.2), padding=1, name="conv1"),
            ReLU(name="act1"),
            Conv2d(_float32_weights(g, (1, 4, 3, 3), 0.2), padding=1, name="conv2"),
        ),
    )


@pytest.fixture
def cae_networks():
    return make_cae_networks()


@pytest.fixture
def cae_manifest(tmp_path, cae_networks):
    path = tmp_path / "cae.json"
    save_manifest(path, cae_networks, metadata={"description": "test autoencoder"})
    return path


@pytest.fixture
def denoiser_manifest(tmp_path):
    path = tmp_path / "denoiser.json"
    save_manifest(path, {"denoiser": make_denoiser_network()})
    return path


def make_toy_image(shape: tuple[int, int] = (32, 32), seed: int = 0, smoothness: float = 2.0) -> np.ndarray:
    """A smooth random image with values in [0.2, 0.8]."""
    noise = np.random.default_rng(seed).standard_normal(shape)
    smooth = ndimage.gaussian_filter(noise, smoothness, mode="wrap")
    smooth = (smooth - smooth.min()) / (smooth.max() - smooth.min())

    return 0.2 + 0.6 * smooth


@pytest.fixture
def toy_image():
    return make_toy_image()


def make_toy_scene(shape: tuple[int, int] = (64, 64), seed: int = 0, n_rectangles: int = 12) -> np.ndarray:
    """A piecewise-constant scene: rectangles of uniform reflectance over a smooth background in [0.3, 0.5].

    Rectangles wrap around the borders, like the circular blur applied to the scenes.
    """
    g = np.random.default_rng(seed)
    height, width = shape

    background = ndimage.gaussian_filter(g.standard_normal(shape), 8.0, mode="wrap")
    scene = 0.3 + 0.2 * (background - background.min()) / (background.max() - background.min())

    for _ in range(n_rectangles):
        top, left = g.integers(height), g.integers(width)
        rows = (top + np.arange(g.integers(4, height // 3 + 1))) % height
        cols = (left + np.arange(g.integers(4, width // 3 + 1))) % width
        scene[np.ix_(rows, cols)] = g.uniform(0.1, 0.9)

    return scene


@pytest.fixture
def golden(request):
    """Compare a data frame with a CSV file under tests/data, within an absolute tolerance.

    The file is written when it does not exist yet or when pytest runs with ``--update-golden``.
    """
    update = request.config.getoption("--update-golden")

    def check(name: str, frame: pd.DataFrame, atol: float = 1e-6) -> None:
        path = DATA_DIR / name

        if update or not path.exists():
            path.parent.mkdir(exist_ok=True)
            frame.to_csv(path, index=False, float_format="%.12g")
            return

        pd.testing.assert_frame_equal(frame, pd.read_csv(path), check_exact=False, rtol=0, atol=atol)

    return check
