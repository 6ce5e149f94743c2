"""Weights manifests: a JSON description of one or more networks and a binary blob holding their parameters.

The manifest has the following layout::

    {
        "format": "satrestore-weights",
        "version": 1,
        "blob": "weights.bin",
        "sha256": "<hex digest of the blob>",
        "metadata": {...},
        "networks": {
            "decoder": [
                {"name": "deconv1", "kind": "conv_transpose2d", "in_channels": 4, ..., "offset": 0},
                ...
            ],
            ...
        }
    }

Parameters are stored as little-endian float32 values, in row-major order. ``offset`` is the byte offset of the first
parameter of a layer; the parameters of a layer are stored contiguously, in the order given by
`Layer.parameter_shapes`. Loading is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from satrestore.errors import DimensionError, ManifestError
from satrestore.models.layers import LAYER_KINDS, Network

if TYPE_CHECKING:
    from os import PathLike

__all__ = ("WeightsManifest", "load_manifest", "save_manifest")

MANIFEST_FORMAT = "satrestore-weights"
MANIFEST_VERSION = 1

_FLOAT_SIZE = 4


@dataclass(frozen=True)
class WeightsManifest:
    """Networks loaded from a weights manifest.

    Attributes
    ----------
    path : Path
        Location of the manifest.
    networks : dict[str, Network]
        Networks by name.
    metadata : dict[str, Any]
        Free-form metadata stored with the networks.
    """

    path: Path
    networks: dict[str, Network]
    metadata: dict[str, Any] = field(default_factory=dict)

    def network(self, name: str) -> Network:
        """The network called `name`.

        Raises
        ------
        ManifestError
            If the manifest has no such network.
        """
        try:
            return self.networks[name]
        except KeyError:
            raise ManifestError(
                f"Manifest {self.path} has no network '{name}'; it defines {', '.join(self.networks) or 'none'}."
            ) from None


def _parse_layer(path: Path, network: str, index: int, entry: dict[str, Any], blob: bytes):
    name = entry.get("name", f"{network}[{index}]")
    kind = entry.get("kind")

    if kind not in LAYER_KINDS:
        raise ManifestError(
            f"Layer '{name}' of network '{network}' in {path} has unsupported kind '{kind}'; "
            f"supported kinds are {', '.join(LAYER_KINDS)}."
        )

    layer_class = LAYER_KINDS[kind]
    hyperparameters = {key: value for key, value in entry.items() if key not in ("name", "kind", "offset")}

    try:
        shapes = layer_class.parameter_shapes(hyperparameters)
    except KeyError as e:
        raise ManifestError(f"Layer '{name}' of network '{network}' in {path} is missing the entry {e}.") from e

    offset = int(entry.get("offset", 0))
    parameters = {}
    for parameter, shape in shapes.items():
        size = int(np.prod(shape))
        end = offset + size * _FLOAT_SIZE
        if end > len(blob):
            raise ManifestError(
                f"Weight blob of {path} is truncated: parameter '{parameter}' of layer '{name}' needs bytes "
                f"{offset} to {end}, but the blob ends at byte {len(blob)}."
            )
        parameters[parameter] = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset = end

    # Keyword arguments that only describe parameter shapes are not layer fields
    hyperparameters = {
        key: value
        for key, value in hyperparameters.items()
        if key not in ("in_channels", "out_channels", "kernel_size", "bias", "channels")
    }

    try:
        return layer_class.from_manifest(name, hyperparameters, parameters)
    except (DimensionError, TypeError) as e:
        raise ManifestError(f"Layer '{name}' of network '{network}' in {path} is invalid: {e}") from e


def load_manifest(path: str | PathLike, *, verify_checksum: bool = True) -> WeightsManifest:
    """Load the networks of a weights manifest.

    Parameters
    ----------
    path : str | PathLike
        Path to the JSON manifest. The blob path in the manifest is relative to its directory.
    verify_checksum : bool
        If `True`, the SHA-256 digest of the blob is checked against the manifest. Defaults to `True`.

    Returns
    -------
    WeightsManifest
        The loaded networks.

    Raises
    ------
    ManifestError
        If the manifest or blob cannot be read, if the manifest defines no layers, names an unsupported layer kind,
        points past the end of the blob or has a channel chain that does not match, or if the checksum fails.
    """
    path = Path(path)

    try:
        document = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ManifestError(f"Weights manifest {path} does not exist.") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"Weights manifest {path} is not valid JSON: {e}") from e

    if document.get("format", MANIFEST_FORMAT) != MANIFEST_FORMAT:
        raise ManifestError(f"{path} is not a weights manifest: got format '{document.get('format')}'.")

    networks = document.get("networks") or {}
    if not any(networks.values()):
        raise ManifestError(f"Weights manifest {path} defines no layers.")

    if "blob" not in document:
        raise ManifestError(f"Weights manifest {path} does not name a weight blob.")

    blob_path = path.parent / document["blob"]
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError as e:
        raise ManifestError(f"Weight blob {blob_path} of manifest {path} does not exist.") from e

    loaded = {}
    for network, entries in networks.items():
        layers = [_parse_layer(path, network, index, entry, blob) for index, entry in enumerate(entries)]
        try:
            loaded[network] = Network(network, tuple(layers))
        except DimensionError as e:
            raise ManifestError(f"Invalid shape chain in {path}: {e}") from e

    if verify_checksum:
        digest = hashlib.sha256(blob).hexdigest()
        if digest != document.get("sha256"):
            raise ManifestError(
                f"Checksum mismatch for {blob_path}: expected {document.get('sha256')}, got {digest}."
            )

    return WeightsManifest(path, loaded, document.get("metadata", {}))


def save_manifest(
    path: str | PathLike,
    networks: dict[str, Network],
    blob_name: str | None = None,
    metadata: dict[str, Any] | None = None,
) -> None:
    """Save networks as a weights manifest and its blob.

    Parameters
    ----------
    path : str | PathLike
        Destination of the JSON manifest.
    networks : dict[str, Network]
        Networks by name.
    blob_name : str, optional
        File name of the blob, relative to the directory of `path`. Defaults to ``<stem>.bin``.
    metadata : dict[str, Any], optional
        Free-form, JSON-serializable metadata.
    """
    path = Path(path)
    blob_name = blob_name or f"{path.stem}.bin"

    chunks: list[bytes] = []
    offset = 0
    entries: dict[str, list[dict[str, Any]]] = {}

    for network_name, network in networks.items():
        entries[network_name] = []
        for layer in network.layers:
            entry = {"name": layer.name, "kind": layer.kind, **layer.hyperparameters(), "offset": offset}
            entries[network_name].append(entry)
            for array in layer.parameters().values():
                chunk = np.ascontiguousarray(array, dtype="<f4").tobytes()
                chunks.append(chunk)
                offset += len(chunk)

    blob = b"".join(chunks)
    (path.parent / blob_name).write_bytes(blob)

    document = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "blob": blob_name,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "metadata": metadata or {},
        "networks": entries,
    }
    path.write_text(json.dumps(document, indent=2))
