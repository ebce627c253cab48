"""Per-modality MLP hash networks, SGD and class prototypes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from .fmat import read_fmat, write_fmat
from .numkernel import Activation, AffineLayer, as_matrix, layer_backward, layer_forward

IMAGE = "image"
TEXT = "text"


@dataclass
class ModalityNet:
    layers: list[AffineLayer]
    modality: str = IMAGE
    seed: int | None = None

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a modality net needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        if self.layers[-1].activation is not Activation.IDENTITY:
            raise ShapeError("final layer must use the identity activation")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    def copy(self) -> "ModalityNet":
        return ModalityNet([l.copy() for l in self.layers], self.modality, self.seed)

    def parameters(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(l.weight, l.bias) for l in self.layers]


def init_modality_net(
    input_dim: int,
    output_dim: int,
    hidden: tuple[int, ...] | list[int] = (128, 128),
    seed: int = 0,
    modality: str = IMAGE,
) -> ModalityNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; ReLU hidden layers, identity output."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, output_dim]
    layers = []
    for k, (din, dout) in enumerate(zip(dims, dims[1:])):
        bound = 1.0 / np.sqrt(din)
        w = rng.uniform(-bound, bound, size=(dout, din))
        b = rng.uniform(-bound, bound, size=dout)
        act = Activation.IDENTITY if k == len(dims) - 2 else Activation.RELU
        layers.append(AffineLayer(w, b, act))
    return ModalityNet(layers, modality, seed)


def net_forward(net: ModalityNet, features: np.ndarray) -> np.ndarray:
    h = as_matrix(features, name="features")
    if h.shape[0] != net.input_dim:
        raise ShapeError(f"net expects {net.input_dim} feature rows, got {h.shape[0]}")
    for layer in net.layers:
        h = layer_forward(layer, h)
    return h


def net_forward_cached(net: ModalityNet, features: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass that also returns each layer's input, for :func:`net_backward`."""
    h = as_matrix(features, name="features")
    if h.shape[0] != net.input_dim:
        raise ShapeError(f"net expects {net.input_dim} feature rows, got {h.shape[0]}")
    inputs = []
    for layer in net.layers:
        inputs.append(h)
        h = layer_forward(layer, h)
    return h, inputs


def net_backward(
    net: ModalityNet, inputs: list[np.ndarray], grad_out: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    grads = [None] * net.depth
    g = grad_out
    for k in range(net.depth - 1, -1, -1):
        gw, gb, g = layer_backward(net.layers[k], inputs[k], g)
        grads[k] = (gw, gb)
    return grads


def zero_grads(net: ModalityNet) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.parameters()]


@dataclass
class SgdOptimizer:
    learning_rate: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


def apply_gradients(
    net: ModalityNet, grads: list[tuple[np.ndarray, np.ndarray]], optimizer: SgdOptimizer
) -> ModalityNet:
    if len(grads) != net.depth:
        raise ShapeError(f"expected {net.depth} gradient pairs, got {len(grads)}")
    lr = optimizer.learning_rate
    layers = []
    for layer, (gw, gb) in zip(net.layers, grads):
        gw = np.asarray(gw, dtype=np.float64)
        gb = np.asarray(gb, dtype=np.float64).reshape(-1)
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ShapeError("gradient shapes do not match layer parameters")
        layers.append(AffineLayer(layer.weight - lr * gw, layer.bias - lr * gb, layer.activation))
    return ModalityNet(layers, net.modality, net.seed)


@dataclass
class Prototypes:
    """Per-class prototype columns (r x c) with a presence mask over classes."""

    matrix: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.matrix.shape[1], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        if self.mask.size != self.matrix.shape[1]:
            raise ShapeError("prototype mask length must equal the class count")
        self.matrix = np.where(self.mask[None, :], self.matrix, 0.0)

    @property
    def code_length(self) -> int:
        return self.matrix.shape[0]

    @property
    def class_count(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def empty(cls, code_length: int, class_count: int) -> "Prototypes":
        return cls(np.zeros((code_length, class_count)), np.zeros(class_count, dtype=bool))


def class_means(outputs: np.ndarray, labels, class_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(means r x c, counts c)``; columns of empty classes are zero."""
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if outputs.shape[1] != lab.size:
        raise ShapeError("outputs and labels disagree on sample count")
    counts = np.bincount(lab, minlength=class_count).astype(np.float64)
    sums = np.zeros((outputs.shape[0], class_count))
    np.add.at(sums.T, lab, outputs.T)
    means = np.divide(sums, counts[None, :], out=np.zeros_like(sums), where=counts[None, :] > 0)
    return means, counts


def compute_local_prototypes(
    net: ModalityNet, features: np.ndarray, labels, class_count: int
) -> Prototypes:
    if np.asarray(labels).size == 0:
        raise DataError("cannot compute prototypes of an empty shard")
    means, counts = class_means(net_forward(net, features), labels, class_count)
    return Prototypes(means, counts > 0)


def save_net(path, net: ModalityNet) -> None:
    """Write ``path/`` holding ``manifest.json`` and one FMAT file per weight and bias."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "modality": net.modality,
        "seed": net.seed,
        "depth": net.depth,
        "dims": [net.input_dim] + [l.out_dim for l in net.layers],
        "activations": [l.activation.value for l in net.layers],
        "payloads": [],
    }
    for k, layer in enumerate(net.layers):
        wname, bname = f"layer{k}.weight.fmat", f"layer{k}.bias.fmat"
        write_fmat(root / wname, layer.weight)
        write_fmat(root / bname, layer.bias.reshape(1, -1))
        manifest["payloads"].append({"weight": wname, "bias": bname})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_net(path) -> ModalityNet:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    layers = []
    for entry, act in zip(manifest["payloads"], manifest["activations"]):
        w = read_fmat(root / entry["weight"])
        b = read_fmat(root / entry["bias"]).reshape(-1)
        layers.append(AffineLayer(w, b, Activation(act)))
    net = ModalityNet(layers, manifest["modality"], manifest["seed"])
    if [net.input_dim] + [l.out_dim for l in layers] != manifest["dims"]:
        raise DataError(f"{root}: layer payloads disagree with manifest dims")
    return net
