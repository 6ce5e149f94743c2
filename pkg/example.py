# %%
import matplotlib.pyplot as plt
import numpy as np
from scipy import ndimage

import satrestore
from satrestore.metrics import psnr, ssim
from satrestore.models import AnalyticCae, simulate_pair
from satrestore.plots import plot_coverage_curve
from satrestore.solvers import DpirMode, mmse_and_quantiles, posterior_deviation
from satrestore.uncertainty import apply_calibration, calibrate, coverage_curve


def make_scene(seed: int, size: int = 256) -> np.ndarray:
    """A synthetic scene with smooth fields and sharp rectangular structures."""
    g = np.random.default_rng(seed)
    scene = ndimage.gaussian_filter(g.random((size, size)), 6, mode="wrap")

    for _ in range(12):
        top, left = g.integers(0, size - 32, 2)
        height, width = g.integers(6, 32, 2)
        scene[top : top + height, left : left + width] += g.uniform(-0.05, 0.05)

    return 0.1 + 0.8 * (scene - scene.min()) / (scene.max() - scene.min())


# %% Forward model: Gaussian PSF with an MTF of 0.15 at Nyquist and signal-dependent noise
fm = satrestore.ForwardModel(satrestore.psf_from_mtf(satrestore.MtfSpec(0.15)), sigma0=3 / 4095, k_gain=2e-5)
target, y = simulate_pair(make_scene(0), fm, 2, satrestore.Rng(0))

# %% Plug-and-play restoration, with and without the fixed-variance phase
restored = {
    mode.value: satrestore.restore(y, fm, satrestore.DenoiserSpec(), satrestore.DpirConfig(mode=mode))
    for mode in DpirMode
}

for name, image in restored.items():
    print(f"{name}: PSNR {psnr(target, image):.2f} dB, SSIM {ssim(target, image):.4f}")

# %% Posterior sampling in the latent space of an analytic block transform model
model = AnalyticCae()
cfg = satrestore.VbleConfig(mode="vble_xz", n_opt_iters=500)

state = satrestore.fit(y, fm, model, cfg)
samples = satrestore.sample_posterior(state, model, 100, satrestore.Rng(1), cfg.mode)
mmse, q90 = mmse_and_quantiles(samples, 0.9)

print(f"vble_xz: PSNR {psnr(target, mmse):.2f} dB")

# %% Calibrate the predicted deviations on a second scene
calibration_target, calibration_y = simulate_pair(make_scene(1), fm, 2, satrestore.Rng(2))
calibration_state = satrestore.fit(calibration_y, fm, model, cfg)
calibration_samples = satrestore.sample_posterior(calibration_state, model, 100, satrestore.Rng(3), cfg.mode)
calibration_mmse = np.mean(calibration_samples, axis=0)

alphas = (0.5, 0.7, 0.9, 0.95)
pairs = [(posterior_deviation(calibration_samples), calibration_target - calibration_mmse)]
tables = {alpha: calibrate(pairs, alpha) for alpha in alphas}

# %% Compare uncalibrated and calibrated coverage
fig, ax = plt.subplots(ncols=3, figsize=(12, 4))

ax[0].imshow(restored["satdpir_two_phase"], cmap="gray")
ax[0].set_title("satdpir")
ax[1].imshow(apply_calibration(tables[0.9], posterior_deviation(samples)), cmap="magma")
ax[1].set_title("Calibrated 90% error bound")

plot_coverage_curve(ax[2], coverage_curve(target, mmse, samples, alphas), label="uncalibrated")
plot_coverage_curve(
    ax[2], coverage_curve(target, mmse, samples, alphas, tables), label="calibrated", show_identity=False
)

fig.savefig("satrestore_example.png", dpi=300, bbox_inches="tight")

plt.show()
