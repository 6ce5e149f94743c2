"""Command-line interface.

Subcommands: ``simulate``, ``restore``, ``calibrate``, ``evaluate``, ``psf`` and ``cae inspect``. The exit code is 0 on
success, 1 for configuration errors, 2 for data errors (including unreadable files) and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from satrestore import __version__
from satrestore.config import load_job_config
from satrestore.denoisers import DenoiserKind, load_cnn_denoiser
from satrestore.errors import ConfigError, DataError, NumericalError
from satrestore.imaging import Rng
from satrestore.io import IMAGE_SUFFIXES, read_image, write_image, write_kernel
from satrestore.metrics import psnr, ssim
from satrestore.models import AnalyticCae, ForwardModel, MtfSpec, load_cae, measure_mtf, psf_from_mtf, simulate_pair
from satrestore.plots import plot_coverage_curve
from satrestore.solvers import fit, mmse_and_quantiles, posterior_deviation, restore, sample_posterior
from satrestore.tiling import process_tiled
from satrestore.uncertainty import DEFAULT_ALPHAS, CalibrationTable, calibrate, coverage_curve, icp

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray

    from satrestore.config import JobConfig
    from satrestore.imaging import ImageGrid
    from satrestore.tiling import Tile

__all__ = ("main",)

logger = logging.getLogger(__name__)

SIMULATION_MANIFEST = "simulate.json"
FORWARD_MODEL_FILE = "forward_model.json"
CALIBRATION_PREFIX = "calibration_"


def _images_by_stem(directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory.")

    return {path.stem: path for path in sorted(directory.iterdir()) if path.suffix.lower() in IMAGE_SUFFIXES}


def _write_json(path: Path, document: dict) -> None:
    path.write_text(json.dumps(document, indent=2, default=float))


# simulate


def _simulate(
    inputs: Sequence[Path], fm: ForwardModel, target_scale: int, seed: int, image_format: str, output_dir: Path
) -> None:
    output_dir.mkdir(parents=True, exist_ok=True)
    fm.to_json(output_dir / FORWARD_MODEL_FILE)

    root = Rng(seed)
    entries = []
    for i, path in enumerate(inputs):
        target, degraded = simulate_pair(read_image(path), fm, target_scale, root.substream(i))

        target_file = f"{path.stem}_target.{image_format}"
        degraded_file = f"{path.stem}_degraded.{image_format}"
        write_image(output_dir / target_file, target)
        write_image(output_dir / degraded_file, degraded)

        entries.append({"clean": str(path.resolve()), "target": target_file, "degraded": degraded_file, "substream": i})
        logger.debug("Simulated %s with substream %d", path, i)

    manifest = {
        "seed": seed,
        "target_scale": target_scale,
        "format": image_format,
        "forward_model": FORWARD_MODEL_FILE,
        "inputs": entries,
    }
    _write_json(output_dir / SIMULATION_MANIFEST, manifest)
    logger.info("Simulated %d image pairs in %s", len(entries), output_dir)


def cmd_simulate(args: argparse.Namespace) -> None:
    """Simulate (target, degraded) pairs, or replay a previous simulation from its manifest."""
    output_dir = Path(args.output_dir)

    if args.replay:
        manifest_path = Path(args.replay)
        try:
            manifest = json.loads(manifest_path.read_text())
            inputs = [Path(entry["clean"]) for entry in manifest["inputs"]]
            fm = ForwardModel.from_json(manifest_path.parent / manifest["forward_model"])
            _simulate(inputs, fm, int(manifest["target_scale"]), int(manifest["seed"]), manifest["format"], output_dir)
        except KeyError as e:
            raise DataError(f"{manifest_path} is not a simulation manifest: missing {e}.") from e
        return

    if not args.input or args.model is None:
        raise ConfigError("simulate needs --input and --model, or --replay.")

    fm = ForwardModel.from_json(args.model)
    _simulate([Path(p) for p in args.input], fm, args.target_scale, args.seed, args.format, output_dir)


# restore


def _restore_overrides(args: argparse.Namespace) -> list[str]:
    flags = {
        "input": args.input,
        "output": args.output,
        "forward_model": args.model,
        "problem": args.problem,
        "method": args.method,
        "seed": args.seed,
        "cae": args.cae,
        "alpha": args.alpha,
        "dpir.n_iters": args.iters,
        "dpir.sigma1": args.sigma1,
        "dpir.mode": args.mode,
        "vble.n_opt_iters": args.opt_iters,
        "vble.n_posterior_samples": args.samples,
        "tiling.tile_size": args.tile,
        "tiling.overlap": args.overlap,
        "tiling.margin": args.margin,
        "tiling.jobs": args.jobs,
    }
    overrides = [f"{key}={json.dumps(value)}" for key, value in flags.items() if value is not None]

    if args.denoiser is not None:
        if args.denoiser in {kind.value for kind in DenoiserKind}:
            overrides.append(f"denoiser.kind={json.dumps(args.denoiser)}")
        else:
            overrides.append(f"denoiser.kind={json.dumps(DenoiserKind.LOADED_CNN.value)}")
            overrides.append(f"denoiser.manifest={json.dumps(args.denoiser)}")

    return overrides


def _restore_pnp(job: JobConfig, fm: ForwardModel, y: ImageGrid) -> tuple[dict[str, NDArray], dict]:
    denoiser = job.denoiser
    if denoiser.kind == DenoiserKind.LOADED_CNN:
        denoiser = load_cnn_denoiser(denoiser.manifest)

    reports = {}

    def process(tile_y: NDArray, tile: Tile) -> dict[str, NDArray]:
        restored, reports[tile.index] = restore(tile_y, fm, denoiser, job.dpir, return_report=True)
        return {"restored": restored}

    outputs = process_tiled(y, job.scale, job.tiling, process)
    tiles = [{"tile": index, **reports[index].to_dict()} for index in sorted(reports)]

    return outputs, {"tiles": tiles}


def _restore_variational(job: JobConfig, fm: ForwardModel, y: ImageGrid) -> tuple[dict[str, NDArray], dict]:
    model = load_cae(job.cae) if job.cae else AnalyticCae()
    job.tiling.validate(job.scale, model.downsampling_factor)
    model.check_image_shape(fm.image_shape(y.shape))

    root = Rng(job.seed)
    n_samples = job.vble.n_posterior_samples
    reports = {}

    def process(tile_y: NDArray, tile: Tile) -> dict[str, NDArray]:
        tile_rng = root.substream(tile.index)
        state, reports[tile.index] = fit(tile_y, fm, model, job.vble, rng=tile_rng, return_report=True)
        samples = sample_posterior(state, model, n_samples, tile_rng.substream(1), job.vble.mode)

        mmse, quantile = mmse_and_quantiles(samples, job.alpha)
        outputs = {"restored": mmse, "quantile": quantile, "deviation": posterior_deviation(samples)}
        outputs.update({f"sample_{i:03d}": sample for i, sample in enumerate(samples)})

        return outputs

    outputs = process_tiled(y, job.scale, job.tiling, process)

    tiles = [
        {
            "tile": index,
            "rejected_steps": reports[index].rejected_steps,
            "quality_warning": reports[index].quality_warning,
            "seconds": reports[index].seconds,
        }
        for index in sorted(reports)
    ]
    trace = pd.concat(
        [reports[index].trace.assign(tile=index) for index in sorted(reports)], ignore_index=True
    )[["tile", "iteration", "elbo", "rejected"]]

    return outputs, {"tiles": tiles, "trace": trace}


def cmd_restore(args: argparse.Namespace) -> None:
    """Restore a measurement with the method of the job."""
    overrides = [*args.set, *_restore_overrides(args)]
    job = load_job_config(args.config, overrides)

    if args.lam is not None:
        block = "vble" if job.method.is_variational else "dpir"
        job = load_job_config(args.config, [*overrides, f"{block}.lam={json.dumps(args.lam)}"])

    for name in ("input", "output", "forward_model"):
        if getattr(job, name) is None:
            raise ConfigError(f"The job has no {name}; set it in the configuration or on the command line.")

    emitted = {
        "--emit-samples": args.emit_samples,
        "--emit-quantiles": args.emit_quantiles,
        "--emit-deviation": args.emit_deviation,
        "--trace": args.trace,
    }
    if not job.method.is_variational and any(emitted.values()):
        options = ", ".join(option for option, value in emitted.items() if value)
        raise ConfigError(f"{options} only apply to the vble and vble_xz methods.")

    fm = ForwardModel.from_json(job.forward_model)
    if fm.scale != job.scale:
        raise ConfigError(
            f"Problem '{job.problem.value}' has scale {job.scale}, but the forward model {job.forward_model} has scale "
            f"{fm.scale}."
        )

    y = read_image(job.input)
    logger.info("Restoring %s (%d x %d) with %s", job.input, y.height, y.width, job.method.value)

    if job.method.is_variational:
        outputs, report = _restore_variational(job, fm, y)
    else:
        outputs, report = _restore_pnp(job, fm, y)

    write_image(job.output, outputs["restored"])

    if args.emit_quantiles:
        write_image(args.emit_quantiles, outputs["quantile"])
    if args.emit_deviation:
        write_image(args.emit_deviation, outputs["deviation"])
    if args.emit_samples:
        samples_dir = Path(args.emit_samples)
        samples_dir.mkdir(parents=True, exist_ok=True)
        for name in sorted(key for key in outputs if key.startswith("sample_")):
            write_image(samples_dir / f"{name}.f32r", outputs[name])

    trace = report.pop("trace", None)
    if args.trace:
        trace.to_csv(args.trace, index=False)
    if args.report:
        _write_json(Path(args.report), {"job": job.to_dict(), **report})

    logger.info("Wrote %s", job.output)


# calibrate


def _calibration_triplets(directory: str | Path) -> list[tuple[Path, Path, Path]]:
    images = _images_by_stem(directory)
    names = sorted(stem.removesuffix("_gt") for stem in images if stem.endswith("_gt"))

    if not names:
        raise DataError(
            f"The calibration set {directory} is empty: expected <name>_gt, <name>_mmse and <name>_deviation images."
        )

    missing = [f"{name}_{role}" for name in names for role in ("mmse", "deviation") if f"{name}_{role}" not in images]
    if missing:
        raise DataError(f"Incomplete calibration triplets in {directory}, missing: {', '.join(missing)}.")

    return [(images[f"{name}_gt"], images[f"{name}_mmse"], images[f"{name}_deviation"]) for name in names]


def cmd_calibrate(args: argparse.Namespace) -> None:
    """Learn calibration tables from (ground truth, MMSE, predicted deviation) triplets."""
    triplets = _calibration_triplets(args.input)

    pairs = []
    for gt_path, mmse_path, deviation_path in triplets:
        gt, mmse = read_image(gt_path), read_image(mmse_path)
        pairs.append((read_image(deviation_path), np.asarray(gt) - np.asarray(mmse)))

    output_dir = Path(args.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    summaries = []
    for alpha in args.alpha or DEFAULT_ALPHAS:
        table = calibrate(pairs, alpha, n_bins=args.bins, min_count=args.min_count)
        table.to_json(output_dir / f"{CALIBRATION_PREFIX}{alpha:g}.json")
        summaries.append(table.to_frame().assign(alpha=alpha))

    summary = pd.concat(summaries, ignore_index=True)[["alpha", "lower", "upper", "count", "quantile"]]
    summary.to_csv(output_dir / "calibration_summary.csv", index=False)
    logger.info("Calibrated %d levels on %d images", len(summaries), len(triplets))


# evaluate


def _load_tables(directory: str | Path) -> dict[float, CalibrationTable]:
    paths = sorted(Path(directory).glob(f"{CALIBRATION_PREFIX}*.json"))
    if not paths:
        raise DataError(f"No calibration tables in {directory}.")

    tables = (CalibrationTable.from_json(path) for path in paths)
    return {table.alpha: table for table in tables}


def _matched_images(ground_truth: dict[str, Path], directory: str | Path, what: str) -> dict[str, Path]:
    images = _images_by_stem(directory)

    missing = [ground_truth[stem].name for stem in ground_truth if stem not in images]
    if missing:
        raise DataError(f"No {what} in {directory} for: {', '.join(missing)}.")

    extra = [images[stem].name for stem in images if stem not in ground_truth]
    if extra:
        raise DataError(f"{what.capitalize()} without ground truth in {directory}: {', '.join(extra)}.")

    return images


def cmd_evaluate(args: argparse.Namespace) -> None:
    """Compute quality metrics and coverage curves of restored images against their ground truth."""
    ground_truth = _images_by_stem(args.ground_truth)
    if not ground_truth:
        raise DataError(f"No images in {args.ground_truth}.")

    restored = _matched_images(ground_truth, args.restored, "restored image")
    bounds = _matched_images(ground_truth, args.bounds, "bound map") if args.bounds else None
    tables = _load_tables(args.calibration) if args.calibration else None
    alphas = sorted(tables) if tables else DEFAULT_ALPHAS

    rows = []
    coverage_sum = None
    n_pixels = 0

    for stem, gt_path in ground_truth.items():
        gt, estimate = read_image(gt_path), read_image(restored[stem])
        row = {"image": stem, "psnr": psnr(gt, estimate), "ssim": ssim(gt, estimate)}

        if bounds is not None:
            row["icp"] = icp(gt, estimate, read_image(bounds[stem]))

        if args.samples:
            sample_dir = Path(args.samples) / stem
            samples = [read_image(path) for path in _images_by_stem(sample_dir).values()]
            curve = coverage_curve(gt, estimate, samples, alphas, tables)
            weighted = curve["icp"].to_numpy() * gt.data.size
            coverage_sum = weighted if coverage_sum is None else coverage_sum + weighted
            n_pixels += gt.data.size

        rows.append(row)
        logger.debug("%s: PSNR %.3f dB, SSIM %.4f", stem, row["psnr"], row["ssim"])

    metrics = pd.DataFrame(rows)
    mean = {"image": "mean", **metrics.drop(columns="image").mean().to_dict()}
    metrics = pd.concat([metrics, pd.DataFrame([mean])], ignore_index=True)

    output_dir = Path(args.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    metrics.to_csv(output_dir / "metrics.csv", index=False)

    if coverage_sum is not None:
        coverage = coverage_sum / n_pixels
        curve = pd.DataFrame(
            {"alpha": list(alphas), "icp": coverage, "stderr": np.sqrt(coverage * (1 - coverage) / n_pixels)}
        )
        curve.to_csv(output_dir / "coverage.csv", index=False)

        figure = Figure(figsize=(4, 4))
        plot_coverage_curve(figure.add_subplot(), curve, label="calibrated" if tables else "uncalibrated")
        figure.savefig(output_dir / "coverage.svg", metadata={"Date": None})

    logger.info("Evaluated %d images: mean PSNR %.3f dB", len(rows), mean["psnr"])


# psf


def cmd_psf(args: argparse.Namespace) -> None:
    """Write a Gaussian kernel with a prescribed MTF at Nyquist and print its measured MTF."""
    kernel = psf_from_mtf(MtfSpec(args.mtf, args.size))
    write_kernel(args.output, kernel)
    print(f"{measure_mtf(kernel):.6f}")


# cae


def cmd_cae_inspect(args: argparse.Namespace) -> None:
    """Print the shape chain of the networks of a compressive autoencoder."""
    model = load_cae(args.manifest)
    size = args.size or 4 * model.downsampling_factor
    z_shape, h_shape = model.latent_shapes((size, size))

    chain = (
        (model.encoder, (1, size, size)),
        (model.hyper_encoder, z_shape),
        (model.hyper_decoder, h_shape),
        (model.decoder, z_shape),
        (model.variance_decoder, z_shape),
    )

    print(f"Downsampling factor: {model.downsampling_factor}")
    for network, input_shape in chain:
        print(f"\n{network.name} ({network.parameter_count()} parameters)")
        print(network.describe(input_shape).to_string(index=False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satrestore", description="Restoration of satellite images.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="Log progress; repeat for debug output.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    simulate = subparsers.add_parser("simulate", help="Simulate (target, degraded) image pairs.")
    simulate.add_argument("--input", nargs="+", help="Clean very high resolution images.")
    simulate.add_argument("--model", help="Forward model JSON document.")
    simulate.add_argument("--target-scale", type=int, default=1, help="Decimation from clean image to target.")
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--format", choices=[suffix.lstrip(".") for suffix in IMAGE_SUFFIXES], default="f32r")
    simulate.add_argument("--replay", metavar="MANIFEST", help="Replay the simulation recorded in a manifest.")
    simulate.add_argument("--output-dir", required=True)
    simulate.set_defaults(func=cmd_simulate)

    restore_parser = subparsers.add_parser("restore", help="Restore a measurement.")
    restore_parser.add_argument("--config", help="Job configuration JSON document.")
    restore_parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="Override a configuration value."
    )
    restore_parser.add_argument("--input")
    restore_parser.add_argument("--output")
    restore_parser.add_argument("--model", help="Forward model JSON document.")
    restore_parser.add_argument("--problem", help="ir or ir_sisr.")
    restore_parser.add_argument("--method", help="satdpir, dpir, vble or vble-xz.")
    restore_parser.add_argument("--denoiser", help="tv_chambolle, dct_shrinkage, or a denoiser weights manifest.")
    restore_parser.add_argument("--lambda", dest="lam", type=float)
    restore_parser.add_argument("--iters", type=int)
    restore_parser.add_argument("--sigma1", type=float)
    restore_parser.add_argument("--mode", help="satdpir_two_phase or dpir_full_gd.")
    restore_parser.add_argument("--cae", help="Compressive autoencoder weights manifest.")
    restore_parser.add_argument("--opt-iters", type=int)
    restore_parser.add_argument("--samples", type=int)
    restore_parser.add_argument("--seed", type=int)
    restore_parser.add_argument("--alpha", type=float, help="Level of the emitted quantile map.")
    restore_parser.add_argument("--tile", type=int, help="Tile size, in pixels of the restored image.")
    restore_parser.add_argument("--overlap", type=int)
    restore_parser.add_argument("--margin", type=int, help="Context restored around each tile and then cropped.")
    restore_parser.add_argument("--jobs", type=int)
    restore_parser.add_argument("--report", metavar="PATH")
    restore_parser.add_argument("--trace", metavar="PATH")
    restore_parser.add_argument("--emit-samples", metavar="DIR")
    restore_parser.add_argument("--emit-quantiles", metavar="PATH")
    restore_parser.add_argument("--emit-deviation", metavar="PATH")
    restore_parser.set_defaults(func=cmd_restore)

    calibrate_parser = subparsers.add_parser("calibrate", help="Learn calibration tables.")
    calibrate_parser.add_argument(
        "--input", required=True, help="Directory of <name>_gt, <name>_mmse and <name>_deviation images."
    )
    calibrate_parser.add_argument("--alpha", type=float, action="append")
    calibrate_parser.add_argument("--bins", type=int, default=16)
    calibrate_parser.add_argument("--min-count", type=int, default=50)
    calibrate_parser.add_argument("--output-dir", required=True)
    calibrate_parser.set_defaults(func=cmd_calibrate)

    evaluate = subparsers.add_parser("evaluate", help="Compute metrics and coverage curves.")
    evaluate.add_argument("--ground-truth", required=True)
    evaluate.add_argument("--restored", required=True)
    evaluate.add_argument("--bounds", help="Directory of error bound maps.")
    evaluate.add_argument("--samples", help="Directory with a subdirectory of posterior samples per image.")
    evaluate.add_argument("--calibration", help="Directory of calibration tables.")
    evaluate.add_argument("--output-dir", required=True)
    evaluate.set_defaults(func=cmd_evaluate)

    psf = subparsers.add_parser("psf", help="Write a Gaussian kernel with a prescribed MTF at Nyquist.")
    psf.add_argument("--mtf", type=float, required=True)
    psf.add_argument("--size", type=int, default=15)
    psf.add_argument("--output", required=True)
    psf.set_defaults(func=cmd_psf)

    cae = subparsers.add_parser("cae", help="Compressive autoencoder tools.")
    cae_subparsers = cae.add_subparsers(dest="cae_command", required=True)
    inspect = cae_subparsers.add_parser("inspect", help="Print the shape chain of the networks.")
    inspect.add_argument("manifest")
    inspect.add_argument("--size", type=int, help="Image size of the printed chain.")
    inspect.set_defaults(func=cmd_cae_inspect)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)

    try:
        args.func(args)
    except (ConfigError, json.JSONDecodeError) as e:
        logger.error("Configuration error: %s", e)
        return 1
    except DataError as e:
        logger.error("Data error: %s", e)
        return 2
    except OSError as e:
        logger.error("Cannot access %s: %s", e.filename, e.strerror)
        return 2
    except NumericalError as e:
        logger.error("Numerical failure: %s", e)
        return 3

    return 0


if __name__ == "__main__":
    sys.exit(main())
