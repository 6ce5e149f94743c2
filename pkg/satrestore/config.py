"""Job configuration.

A job is described by a JSON document such as::

    {
        "problem": "ir_sisr",
        "forward_model": "pleiades.json",
        "method": "vble_xz",
        "input": "degraded.f32r",
        "output": "restored.f32r",
        "seed": 3,
        "tiling": {"tile_size": 256, "overlap": 32},
        "vble": {"lambda": 0.6, "n_opt_iters": 500}
    }

Overrides of the form ``key.path=value`` are applied to the document before it is validated, so parameter sweeps can be
run from the shell. Values are parsed as JSON and fall back to plain strings.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any

from satrestore.denoisers import DenoiserSpec
from satrestore.errors import ConfigError
from satrestore.solvers import DpirConfig, DpirMode, VbleConfig, VbleMode
from satrestore.tiling import TilingConfig

if TYPE_CHECKING:
    from collections.abc import Iterable
    from os import PathLike

__all__ = ("JobConfig", "Method", "Problem", "apply_overrides", "load_job_config")

_ALIASES = {"lambda": "lam"}


class Problem(str, Enum):
    IR = "ir"
    IR_SISR = "ir_sisr"

    @property
    def scale(self) -> int:
        return 2 if self is Problem.IR_SISR else 1


class Method(str, Enum):
    SATDPIR = "satdpir"
    DPIR = "dpir"
    VBLE = "vble"
    VBLE_XZ = "vble_xz"

    @property
    def is_variational(self) -> bool:
        return self in (Method.VBLE, Method.VBLE_XZ)


def _to_enum(enum: type[Enum], value: Any, name: str) -> Enum:
    try:
        return enum(value.replace("-", "_") if isinstance(value, str) else value)
    except ValueError:
        raise ConfigError(f"Unknown {name} '{value}', expected one of {', '.join(e.value for e in enum)}.") from None


def _build(cls: type, block: Any, name: str) -> Any:
    if isinstance(block, cls):
        return block
    if not isinstance(block, dict):
        raise ConfigError(f"The '{name}' block must be an object, got '{type(block).__name__}'.")

    block = {_ALIASES.get(key, key): value for key, value in block.items()}
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(block) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in the '{name}' block: {', '.join(unknown)}.")

    try:
        return cls(**block)
    except TypeError as e:
        raise ConfigError(f"Invalid '{name}' block: {e}") from e


@dataclass(frozen=True)
class JobConfig:
    """A restoration job.

    Attributes
    ----------
    problem : Problem | str
        `Problem.IR` restores at the measurement scale, `Problem.IR_SISR` also super-resolves by 2.
    forward_model : str, optional
        Path to the forward model JSON document.
    method : Method | str
        The restoration method. Defaults to `Method.SATDPIR`.
    input : str, optional
        Path to the measurement.
    output : str, optional
        Path to the restored image.
    seed : int
        Seed of the job's random stream. Defaults to 0.
    tiling : TilingConfig
        Tiling parameters. Defaults to a single tile.
    denoiser : DenoiserSpec
        Denoiser of the plug-and-play methods.
    dpir : DpirConfig
        Parameters of the plug-and-play methods. `Method.DPIR` always uses `DpirMode.DPIR_FULL_GD`.
    vble : VbleConfig
        Parameters of the variational methods. Its mode and seed follow `method` and `seed`.
    cae : str, optional
        Weights manifest of the compressive autoencoder. Defaults to the analytic block transform model.
    alpha : float
        Level of the emitted error quantile map. Defaults to 0.9.

    Raises
    ------
    ConfigError
        If a value is invalid or the tiles do not fit the problem scale.
    """

    problem: Problem | str = Problem.IR
    forward_model: str | None = None
    method: Method | str = Method.SATDPIR
    input: str | None = None
    output: str | None = None
    seed: int = 0
    tiling: TilingConfig = field(default_factory=TilingConfig)
    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    dpir: DpirConfig = field(default_factory=DpirConfig)
    vble: VbleConfig = field(default_factory=VbleConfig)
    cae: str | None = None
    alpha: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "problem", _to_enum(Problem, self.problem, "problem"))
        object.__setattr__(self, "method", _to_enum(Method, self.method, "method"))

        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"The seed must be a non-negative integer, got {self.seed!r}.")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}.")

        if self.method == Method.DPIR:
            object.__setattr__(self, "dpir", replace(self.dpir, mode=DpirMode.DPIR_FULL_GD))

        vble_mode = VbleMode.VBLE_XZ if self.method == Method.VBLE_XZ else VbleMode.VBLE
        object.__setattr__(self, "vble", replace(self.vble, mode=vble_mode, seed=self.seed))

        self.tiling.validate(self.scale)

    @property
    def scale(self) -> int:
        return self.problem.scale

    @classmethod
    def from_dict(cls, document: dict[str, Any]) -> JobConfig:
        """Build a job from a parsed JSON document.

        Parameter blocks accept ``lambda`` as an alias of ``lam``.

        Raises
        ------
        ConfigError
            If the document has unknown keys or invalid values.
        """
        document = dict(document)
        blocks = {"tiling": TilingConfig, "denoiser": DenoiserSpec, "dpir": DpirConfig, "vble": VbleConfig}

        for name, block_cls in blocks.items():
            if name in document:
                document[name] = _build(block_cls, document[name], name)

        return _build(cls, document, "job")

    def to_dict(self) -> dict[str, Any]:
        """The job as a JSON-serializable document."""

        def plain(value):
            if isinstance(value, Enum):
                return value.value
            if isinstance(value, dict):
                return {key: plain(item) for key, item in value.items()}
            return value

        return plain(asdict(self))


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(document: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``key.path=value`` overrides to a job document.

    Intermediate objects are created as needed. The document is not modified; a new one is returned.

    Raises
    ------
    ConfigError
        If an override has no ``=``, or its path runs through a value that is not an object.
    """
    document = json.loads(json.dumps(document))

    for override in overrides:
        key_path, separator, text = override.partition("=")
        if not separator or not key_path:
            raise ConfigError(f"Overrides must have the form key.path=value, got '{override}'.")

        *parents, key = key_path.split(".")
        target = document
        for parent in parents:
            target = target.setdefault(parent, {})
            if not isinstance(target, dict):
                raise ConfigError(f"Cannot override '{key_path}': '{parent}' is not an object.")

        target[key] = _parse_value(text)

    return document


def load_job_config(
    path: str | PathLike | None = None,
    overrides: Iterable[str] = (),
) -> JobConfig:
    """Load a job from a JSON document and apply overrides.

    Parameters
    ----------
    path : str | PathLike, optional
        The JSON document. Without it, the job starts from the defaults.
    overrides : Iterable[str]
        ``key.path=value`` overrides, applied in order.

    Raises
    ------
    ConfigError
        If the document cannot be read or parsed, or the resulting job is invalid.
    """
    document: dict[str, Any] = {}

    if path is not None:
        try:
            document = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"Cannot read the job configuration {path}: {e.strerror}.") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"The job configuration {path} is not valid JSON: {e}") from e

        if not isinstance(document, dict):
            raise ConfigError(f"The job configuration {path} must be a JSON object.")

    return JobConfig.from_dict(apply_overrides(document, overrides))
