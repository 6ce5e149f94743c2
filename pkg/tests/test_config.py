import json
from contextlib import nullcontext as does_not_raise

import pytest

from satrestore.config import JobConfig, Method, Problem, apply_overrides, load_job_config
from satrestore.denoisers import DenoiserKind
from satrestore.errors import ConfigError
from satrestore.solvers import DpirConfig, DpirMode, VbleMode


class TestJobConfig:
    def test_defaults(self):
        job = JobConfig()

        assert job.problem is Problem.IR
        assert job.method is Method.SATDPIR
        assert job.scale == 1
        assert job.tiling.tile_size is None
        assert job.denoiser.kind == DenoiserKind.TV_CHAMBOLLE
        assert job.alpha == 0.9

    @pytest.mark.parametrize(
        "problem,method,scale,variational",
        [
            ("ir", "satdpir", 1, False),
            ("ir_sisr", "dpir", 2, False),
            ("ir-sisr", "vble", 2, True),
            (Problem.IR, "vble-xz", 1, True),
        ],
    )
    def test_enums(self, problem, method, scale, variational):
        job = JobConfig(problem, method=method)

        assert job.scale == scale
        assert job.method.is_variational == variational

    def test_dpir_uses_full_gradient_descent(self):
        job = JobConfig(method="dpir", dpir=DpirConfig(mode="satdpir_two_phase"))

        assert job.dpir.mode is DpirMode.DPIR_FULL_GD
        assert JobConfig(method="satdpir").dpir.mode is DpirMode.SATDPIR_TWO_PHASE

    def test_variational_mode_and_seed_follow_the_job(self):
        job = JobConfig(method="vble_xz", seed=7)

        assert job.vble.mode is VbleMode.VBLE_XZ
        assert job.vble.seed == 7
        assert JobConfig(method="vble").vble.mode is VbleMode.VBLE

    @pytest.mark.parametrize(
        "kwargs,expectation",
        [
            ({"seed": 3, "alpha": 0.5}, does_not_raise()),
            ({"problem": "deblur"}, pytest.raises(ConfigError, match="Unknown problem 'deblur', expected one of ir")),
            ({"method": "admm"}, pytest.raises(ConfigError, match="Unknown method 'admm'")),
            ({"seed": -1}, pytest.raises(ConfigError, match="seed must be a non-negative integer")),
            ({"seed": 1.5}, pytest.raises(ConfigError, match="seed must be a non-negative integer")),
            ({"alpha": 1.0}, pytest.raises(ConfigError, match="alpha must lie in")),
        ],
    )
    def test_validation(self, kwargs, expectation):
        with expectation:
            JobConfig(**kwargs)


class TestFromDict:
    def test_blocks(self):
        job = JobConfig.from_dict(
            {
                "problem": "ir_sisr",
                "method": "vble",
                "seed": 3,
                "tiling": {"tile_size": 128, "overlap": 16},
                "denoiser": {"kind": "dct_shrinkage"},
                "dpir": {"n_iters": 4},
                "vble": {"lambda": 0.3, "n_opt_iters": 50},
            }
        )

        assert job.scale == 2
        assert job.tiling.tile_size == 128
        assert job.denoiser.kind == DenoiserKind.DCT_SHRINKAGE
        assert job.dpir.n_iters == 4
        assert job.vble.lam == 0.3
        assert job.vble.n_opt_iters == 50
        assert job.vble.seed == 3

    def test_round_trip(self):
        document = JobConfig.from_dict({"method": "vble_xz", "tiling": {"tile_size": 64}, "cae": "cae.json"}).to_dict()

        assert json.loads(json.dumps(document)) == document
        assert JobConfig.from_dict(document).to_dict() == document
        assert document["method"] == "vble_xz"
        assert document["vble"]["mode"] == "vble_xz"

    @pytest.mark.parametrize(
        "document,message",
        [
            ({"solver": "x"}, "Unknown keys in the 'job' block: solver"),
            ({"vble": {"iterations": 5, "lambda": 1}}, "Unknown keys in the 'vble' block: iterations"),
            ({"tiling": 256}, "The 'tiling' block must be an object, got 'int'"),
            ({"dpir": {"n_iters": 1}}, "n_iters must be at least 2"),
            (
                {"problem": "ir_sisr", "tiling": {"tile_size": 64, "overlap": 5}},
                "overlap 5 must be divisible by the scale 2",
            ),
        ],
    )
    def test_invalid_document_raises(self, document, message):
        with pytest.raises(ConfigError, match=message):
            JobConfig.from_dict(document)


class TestOverrides:
    def test_nested_values(self):
        document = apply_overrides(
            {"vble": {"lam": 0.6}}, ["vble.lam=0.2", "tiling.tile_size=64", "method=vble", "cae=weights/cae.json"]
        )

        assert document == {
            "vble": {"lam": 0.2},
            "tiling": {"tile_size": 64},
            "method": "vble",
            "cae": "weights/cae.json",
        }

    def test_json_values(self):
        document = apply_overrides({}, ['input="42"', "vble.freeze_b=true", "tiling.jobs=null"])

        assert document == {"input": "42", "vble": {"freeze_b": True}, "tiling": {"jobs": None}}

    def test_document_is_not_modified(self):
        document = {"vble": {"lam": 0.6}}

        apply_overrides(document, ["vble.lam=0.2"])

        assert document == {"vble": {"lam": 0.6}}

    @pytest.mark.parametrize(
        "override,message",
        [
            ("vble.lam", "must have the form key.path=value"),
            ("=3", "must have the form key.path=value"),
            ("seed.value=3", "'seed' is not an object"),
        ],
    )
    def test_invalid_override_raises(self, override, message):
        with pytest.raises(ConfigError, match=message):
            apply_overrides({"seed": 1}, [override])


class TestLoadJobConfig:
    def test_file_with_overrides(self, tmp_path):
        path = tmp_path / "job.json"
        path.write_text(json.dumps({"method": "vble", "vble": {"lambda": 0.6}}))

        job = load_job_config(path, ["vble.lambda=0.1", "seed=4"])

        assert job.vble.lam == 0.1
        assert job.vble.seed == 4

    def test_defaults_without_file(self):
        assert load_job_config(overrides=["method=dpir"]).method is Method.DPIR

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(ConfigError, match="Cannot read the job configuration"):
            load_job_config(tmp_path / "missing.json")

    def test_invalid_json_raises(self, tmp_path):
        path = tmp_path / "job.json"
        path.write_text("{method: vble}")

        with pytest.raises(ConfigError, match="is not valid JSON"):
            load_job_config(path)

    def test_non_object_raises(self, tmp_path):
        path = tmp_path / "job.json"
        path.write_text("[1, 2]")

        with pytest.raises(ConfigError, match="must be a JSON object"):
            load_job_config(path)
