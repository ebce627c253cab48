"""Dense float64 matrix helpers and affine layers with exact backprop.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Samples
are stored as columns, so a batch of ``m`` feature vectors of size ``d`` is a
``d x m`` matrix.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


def as_matrix(a, *, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a 2-D float64 array, checking finiteness."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def _check_finite(m: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"{op} produced non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, name="a")
    b = as_matrix(b, name="b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _check_finite(a @ b, "matmul")


def frobenius_sq(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_grad(z: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return (z > 0.0).astype(np.float64)


@dataclass
class AffineLayer:
    """``activation(weight @ x + bias)`` applied column-wise."""

    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.weight = as_matrix(self.weight, name="weight")
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        self.activation = Activation(self.activation)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} does not match weight rows {self.weight.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "AffineLayer":
        return AffineLayer(self.weight.copy(), self.bias.copy(), self.activation)


def _preactivation(layer: AffineLayer, x: np.ndarray) -> np.ndarray:
    x = as_matrix(x, name="x")
    if x.shape[0] != layer.in_dim:
        raise ShapeError(f"layer expects {layer.in_dim} input rows, got {x.shape[0]}")
    return layer.weight @ x + layer.bias[:, None]


def layer_forward(layer: AffineLayer, x: np.ndarray) -> np.ndarray:
    z = _preactivation(layer, x)
    if layer.activation is Activation.RELU:
        return relu(z)
    return _check_finite(z, "layer_forward")


def layer_backward(
    layer: AffineLayer, x: np.ndarray, upstream_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_weight, grad_bias, grad_x)`` for ``sum(upstream * forward(x))``."""
    x = as_matrix(x, name="x")
    z = _preactivation(layer, x)
    g = as_matrix(upstream_grad, name="upstream_grad")
    if g.shape != z.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {z.shape}")
    if layer.activation is Activation.RELU:
        g = g * relu_grad(z)
    grad_w = g @ x.T
    grad_b = g.sum(axis=1)
    grad_x = layer.weight.T @ g
    return grad_w, grad_b, grad_x
