"""Forward and reverse-mode evaluation of small convolutional networks.

Tensors are float64 arrays of shape (channels, height, width). Every layer implements its forward map and the
vector-Jacobian product with respect to its input; weights are constants. Padding is zero padding, and transposed
convolutions follow the usual ``(in - 1) * stride - 2 * padding + kernel_size + output_padding`` size rule.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, ClassVar

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from satrestore.errors import DimensionError

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = (
    "LAYER_KINDS",
    "AddBias",
    "Conv2d",
    "ConvTranspose2d",
    "Layer",
    "LeakyReLU",
    "Network",
    "ReLU",
    "softplus",
    "softplus_grad",
)

Shape = tuple[int, int, int]


def softplus(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Numerically stable ``log(1 + exp(x))``."""
    return np.logaddexp(0.0, x)


def softplus_grad(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Derivative of `softplus`, the logistic function."""
    return expit(x)


class Layer(ABC):
    """Base class for layers.

    Subclasses are frozen dataclasses with a `name` field and a `kind` class variable, the identifier used in
    weights manifests.
    """

    kind: ClassVar[str]
    name: str

    @property
    def in_channels(self) -> int | None:
        """Number of input channels, or `None` if the layer accepts any number."""
        return None

    @property
    def out_channels(self) -> int | None:
        """Number of output channels, or `None` if it equals the number of input channels."""
        return None

    @abstractmethod
    def output_shape(self, input_shape: Shape) -> Shape:
        """Shape of the output for an input of shape `input_shape`.

        Raises
        ------
        DimensionError
            If the layer cannot be applied to an input of that shape.
        """

    @abstractmethod
    def forward(self, x: NDArray[np.float64]) -> NDArray[np.float64]: ...

    @abstractmethod
    def vjp(self, x: NDArray[np.float64], cotangent: NDArray[np.float64]) -> NDArray[np.float64]:
        """Vector-Jacobian product of the layer at `x` with `cotangent`, with respect to the input."""

    def parameters(self) -> dict[str, NDArray[np.float64]]:
        """Named parameter arrays, in storage order."""
        return {}

    def hyperparameters(self) -> dict[str, Any]:
        """Manifest entries describing the layer, besides its kind and name."""
        return {}

    @classmethod
    def parameter_shapes(cls, hyperparameters: dict[str, Any]) -> dict[str, tuple[int, ...]]:
        """Shapes of the parameter arrays of a layer described by `hyperparameters`, in storage order."""
        return {}

    @classmethod
    def from_manifest(
        cls, name: str, hyperparameters: dict[str, Any], parameters: dict[str, NDArray[np.float64]]
    ) -> Layer:
        return cls(name=name, **hyperparameters, **parameters)

    def _check_channels(self, input_shape: Shape) -> None:
        if self.in_channels is not None and input_shape[0] != self.in_channels:
            raise DimensionError(
                f"Layer '{self.name}' ({self.kind}) expects {self.in_channels} input channels, got {input_shape[0]}."
            )


def _validate_square_weight(name: str, weight: NDArray[np.float64], bias: NDArray[np.float64] | None, out_axis: int):
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:  # noqa: PLR2004
        raise DimensionError(f"Layer '{name}' needs a square 4D weight, got shape {weight.shape}.")
    if bias is not None and bias.shape != (weight.shape[out_axis],):
        raise DimensionError(f"Layer '{name}' has a bias of shape {bias.shape} for {weight.shape[out_axis]} outputs.")


def _freeze(array: Any) -> NDArray[np.float64] | None:
    if array is None:
        return None
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Conv2d(Layer):
    """Two-dimensional convolution (cross-correlation) with zero padding.

    Attributes
    ----------
    weight : np.ndarray
        Weights of shape (out_channels, in_channels, kernel_size, kernel_size).
    bias : np.ndarray, optional
        Per-output-channel bias.
    stride : int
        Defaults to 1.
    padding : int
        Zero padding added on each side. Defaults to 0.
    name : str
        Layer name, used in error messages.
    """

    kind: ClassVar[str] = "conv2d"

    weight: NDArray[np.float64]
    bias: NDArray[np.float64] | None = None
    stride: int = 1
    padding: int = 0
    name: str = "conv2d"

    def __post_init__(self):
        object.__setattr__(self, "weight", _freeze(self.weight))
        object.__setattr__(self, "bias", _freeze(self.bias))
        _validate_square_weight(self.name, self.weight, self.bias, out_axis=0)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def output_shape(self, input_shape: Shape) -> Shape:
        self._check_channels(input_shape)

        height, width = (
            (size + 2 * self.padding - self.kernel_size) // self.stride + 1 for size in input_shape[1:]
        )
        if height < 1 or width < 1:
            raise DimensionError(f"Layer '{self.name}' ({self.kind}) cannot be applied to an input of {input_shape}.")

        return self.out_channels, height, width

    def _windows(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        padded = np.pad(x, ((0, 0), (self.padding, self.padding), (self.padding, self.padding)))
        windows = sliding_window_view(padded, (self.kernel_size, self.kernel_size), axis=(1, 2))
        return windows[:, :: self.stride, :: self.stride]

    def forward(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        out = np.einsum("chwij,ocij->ohw", self._windows(x), self.weight)
        if self.bias is not None:
            out += self.bias[:, None, None]
        return out

    def vjp(self, x: NDArray[np.float64], cotangent: NDArray[np.float64]) -> NDArray[np.float64]:
        p, s, k = self.padding, self.stride, self.kernel_size
        out_height, out_width = cotangent.shape[1:]

        grad = np.zeros((x.shape[0], x.shape[1] + 2 * p, x.shape[2] + 2 * p))
        for i in range(k):
            for j in range(k):
                grad[:, i : i + s * out_height : s, j : j + s * out_width : s] += np.einsum(
                    "ohw,oc->chw", cotangent, self.weight[:, :, i, j]
                )

        return grad[:, p : p + x.shape[1], p : p + x.shape[2]]

    def parameters(self) -> dict[str, NDArray[np.float64]]:
        return {"weight": self.weight} if self.bias is None else {"weight": self.weight, "bias": self.bias}

    def hyperparameters(self) -> dict[str, Any]:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "bias": self.bias is not None,
        }

    @classmethod
    def parameter_shapes(cls, hyperparameters: dict[str, Any]) -> dict[str, tuple[int, ...]]:
        k = hyperparameters["kernel_size"]
        shapes = {"weight": (hyperparameters["out_channels"], hyperparameters["in_channels"], k, k)}
        if hyperparameters.get("bias", True):
            shapes["bias"] = (hyperparameters["out_channels"],)
        return shapes

    @classmethod
    def from_manifest(
        cls, name: str, hyperparameters: dict[str, Any], parameters: dict[str, NDArray[np.float64]]
    ) -> Conv2d:
        return cls(
            weight=parameters["weight"],
            bias=parameters.get("bias"),
            stride=hyperparameters.get("stride", 1),
            padding=hyperparameters.get("padding", 0),
            name=name,
        )


@dataclass(frozen=True, eq=False)
class ConvTranspose2d(Layer):
    """Two-dimensional transposed convolution, the adjoint of a strided `Conv2d`.

    Attributes
    ----------
    weight : np.ndarray
        Weights of shape (in_channels, out_channels, kernel_size, kernel_size).
    bias : np.ndarray, optional
        Per-output-channel bias.
    stride : int
        Defaults to 1.
    padding : int
        Rows and columns cropped from each side of the full output. Defaults to 0.
    output_padding : int
        Extra rows and columns added at the bottom and right of the output. Defaults to 0.
    name : str
        Layer name, used in error messages.
    """

    kind: ClassVar[str] = "conv_transpose2d"

    weight: NDArray[np.float64]
    bias: NDArray[np.float64] | None = None
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    name: str = "conv_transpose2d"

    def __post_init__(self):
        object.__setattr__(self, "weight", _freeze(self.weight))
        object.__setattr__(self, "bias", _freeze(self.bias))
        _validate_square_weight(self.name, self.weight, self.bias, out_axis=1)

        if not 0 <= self.output_padding < self.stride:
            raise DimensionError(f"Layer '{self.name}' needs 0 <= output_padding < stride, got {self.output_padding}.")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def _full_size(self, size: int) -> int:
        return (size - 1) * self.stride + self.kernel_size + self.output_padding

    def output_shape(self, input_shape: Shape) -> Shape:
        self._check_channels(input_shape)

        height, width = (self._full_size(size) - 2 * self.padding for size in input_shape[1:])
        if height < 1 or width < 1:
            raise DimensionError(f"Layer '{self.name}' ({self.kind}) cannot be applied to an input of {input_shape}.")

        return self.out_channels, height, width

    def forward(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        p, s, k = self.padding, self.stride, self.kernel_size
        _, out_height, out_width = self.output_shape(x.shape)
        height, width = x.shape[1:]

        full = np.zeros((self.out_channels, self._full_size(height), self._full_size(width)))
        for i in range(k):
            for j in range(k):
                full[:, i : i + s * height : s, j : j + s * width : s] += np.einsum(
                    "chw,co->ohw", x, self.weight[:, :, i, j]
                )

        out = full[:, p : p + out_height, p : p + out_width]
        if self.bias is not None:
            out = out + self.bias[:, None, None]
        return out

    def vjp(self, x: NDArray[np.float64], cotangent: NDArray[np.float64]) -> NDArray[np.float64]:
        p, s, k = self.padding, self.stride, self.kernel_size
        height, width = x.shape[1:]

        full = np.zeros((self.out_channels, self._full_size(height), self._full_size(width)))
        full[:, p : p + cotangent.shape[1], p : p + cotangent.shape[2]] = cotangent

        windows = sliding_window_view(full, (k, k), axis=(1, 2))[:, ::s, ::s][:, :height, :width]
        return np.einsum("ohwij,coij->chw", windows, self.weight)

    def parameters(self) -> dict[str, NDArray[np.float64]]:
        return {"weight": self.weight} if self.bias is None else {"weight": self.weight, "bias": self.bias}

    def hyperparameters(self) -> dict[str, Any]:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "output_padding": self.output_padding,
            "bias": self.bias is not None,
        }

    @classmethod
    def parameter_shapes(cls, hyperparameters: dict[str, Any]) -> dict[str, tuple[int, ...]]:
        k = hyperparameters["kernel_size"]
        shapes = {"weight": (hyperparameters["in_channels"], hyperparameters["out_channels"], k, k)}
        if hyperparameters.get("bias", True):
            shapes["bias"] = (hyperparameters["out_channels"],)
        return shapes

    @classmethod
    def from_manifest(
        cls, name: str, hyperparameters: dict[str, Any], parameters: dict[str, NDArray[np.float64]]
    ) -> ConvTranspose2d:
        return cls(
            weight=parameters["weight"],
            bias=parameters.get("bias"),
            stride=hyperparameters.get("stride", 1),
            padding=hyperparameters.get("padding", 0),
            output_padding=hyperparameters.get("output_padding", 0),
            name=name,
        )


@dataclass(frozen=True, eq=False)
class ReLU(Layer):
    kind: ClassVar[str] = "relu"

    name: str = "relu"

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def forward(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.maximum(x, 0.0)

    def vjp(self, x: NDArray[np.float64], cotangent: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.where(x > 0, cotangent, 0.0)


@dataclass(frozen=True, eq=False)
class LeakyReLU(Layer):
    kind: ClassVar[str] = "leaky_relu"

    negative_slope: float = 0.01
    name: str = "leaky_relu"

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def forward(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.where(x > 0, x, self.negative_slope * x)

    def vjp(self, x: NDArray[np.float64], cotangent: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.where(x > 0, cotangent, self.negative_slope * cotangent)

    def hyperparameters(self) -> dict[str, Any]:
        return {"negative_slope": self.negative_slope}


@dataclass(frozen=True, eq=False)
class AddBias(Layer):
    """Adds a constant to each channel."""

    kind: ClassVar[str] = "add_bias"

    bias: NDArray[np.float64]
    name: str = "add_bias"

    def __post_init__(self):
        object.__setattr__(self, "bias", _freeze(self.bias))

        if self.bias.ndim != 1:
            raise DimensionError(f"Layer '{self.name}' needs a one-dimensional bias, got shape {self.bias.shape}.")

    @property
    def in_channels(self) -> int:
        return self.bias.shape[0]

    def output_shape(self, input_shape: Shape) -> Shape:
        self._check_channels(input_shape)
        return input_shape

    def forward(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        return x + self.bias[:, None, None]

    def vjp(self, x: NDArray[np.float64], cotangent: NDArray[np.float64]) -> NDArray[np.float64]:
        return cotangent

    def parameters(self) -> dict[str, NDArray[np.float64]]:
        return {"bias": self.bias}

    def hyperparameters(self) -> dict[str, Any]:
        return {"channels": self.in_channels}

    @classmethod
    def parameter_shapes(cls, hyperparameters: dict[str, Any]) -> dict[str, tuple[int, ...]]:
        return {"bias": (hyperparameters["channels"],)}

    @classmethod
    def from_manifest(
        cls, name: str, hyperparameters: dict[str, Any], parameters: dict[str, NDArray[np.float64]]
    ) -> AddBias:
        return cls(bias=parameters["bias"], name=name)


LAYER_KINDS: dict[str, type[Layer]] = {
    layer.kind: layer for layer in (Conv2d, ConvTranspose2d, ReLU, LeakyReLU, AddBias)
}
"""Layer classes by manifest identifier."""


@dataclass(frozen=True, eq=False)
class Network:
    """A chain of layers.

    Networks are immutable and reentrant: activations needed by the reverse pass are local to each call.

    Attributes
    ----------
    name : str
        Network name, used in error messages.
    layers : tuple[Layer, ...]
        The layers, in evaluation order.

    Raises
    ------
    DimensionError
        If the channel counts of consecutive layers do not chain. The message names the first inconsistent layer.
    """

    name: str
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

        channels = None
        for index, layer in enumerate(self.layers):
            if channels is not None and layer.in_channels is not None and layer.in_channels != channels:
                raise DimensionError(
                    f"Layer {index} '{layer.name}' ({layer.kind}) of network '{self.name}' expects "
                    f"{layer.in_channels} input channels, but the previous layer produces {channels}."
                )
            channels = layer.out_channels or layer.in_channels or channels

    @property
    def in_channels(self) -> int | None:
        return next((layer.in_channels for layer in self.layers if layer.in_channels is not None), None)

    @property
    def out_channels(self) -> int | None:
        channels = None
        for layer in self.layers:
            channels = layer.out_channels or layer.in_channels or channels
        return channels

    def output_shape(self, input_shape: Shape) -> Shape:
        """Shape of the output for an input of shape `input_shape`.

        Raises
        ------
        DimensionError
            If a layer cannot be applied. The message names the network and the layer.
        """
        shape = tuple(input_shape)
        for layer in self.layers:
            try:
                shape = layer.output_shape(shape)
            except DimensionError as e:
                raise DimensionError(f"In network '{self.name}': {e}") from e
        return shape

    def forward(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        self.output_shape(x.shape)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def forward_with_vjp(self, x: NDArray[np.float64]):
        """Evaluate the network and return its output and a function computing vector-Jacobian products at `x`."""
        self.output_shape(x.shape)

        inputs = []
        for layer in self.layers:
            inputs.append(x)
            x = layer.forward(x)

        def vjp(cotangent: NDArray[np.float64]) -> NDArray[np.float64]:
            for layer, layer_input in zip(reversed(self.layers), reversed(inputs)):
                cotangent = layer.vjp(layer_input, cotangent)
            return cotangent

        return x, vjp

    def vjp(self, x: NDArray[np.float64], cotangent: NDArray[np.float64]) -> NDArray[np.float64]:
        """Vector-Jacobian product of the network at `x` with `cotangent`."""
        _, vjp = self.forward_with_vjp(x)
        return vjp(cotangent)

    def parameter_count(self) -> int:
        return sum(array.size for layer in self.layers for array in layer.parameters().values())

    def describe(self, input_shape: Shape) -> pd.DataFrame:
        """Shape chain of the network for an input of shape `input_shape`.

        Returns
        -------
        pd.DataFrame
            One row per layer, with the columns ``layer``, ``kind``, ``input_shape``, ``output_shape`` and
            ``parameters``.
        """
        rows = []
        shape = tuple(input_shape)
        for layer in self.layers:
            output_shape = layer.output_shape(shape)
            rows.append(
                {
                    "layer": layer.name,
                    "kind": layer.kind,
                    "input_shape": shape,
                    "output_shape": output_shape,
                    "parameters": sum(array.size for array in layer.parameters().values()),
                }
            )
            shape = output_shape

        return pd.DataFrame(rows, columns=["layer", "kind", "input_shape", "output_shape", "parameters"])
