"""Multilayer perceptron classifier f(x; theta) producing K logits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import Node, ShapeError, Tape, as_tensor, ops
from .seeding import substream

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden: tuple[int, ...] = ()
    num_classes: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per affine layer."""
        widths = [self.input_dim, *self.hidden, self.num_classes]
        return list(zip(widths[:-1], widths[1:]))

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "num_classes": self.num_classes, "activation": self.activation}


@dataclass(frozen=True)
class MlpParams:
    config: MlpConfig
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        ws = tuple(as_tensor(w) for w in self.weights)
        bs = tuple(as_tensor(b) for b in self.biases)
        dims = self.config.layer_dims
        if len(ws) != len(dims) or len(bs) != len(dims):
            raise ShapeError(f"expected {len(dims)} layers, got {len(ws)} weights / {len(bs)} biases")
        for i, ((fan_in, fan_out), w, b) in enumerate(zip(dims, ws, bs)):
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}, "
                                 f"expected ({fan_out}, {fan_in}) / ({fan_out},)")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list, [w0, b0, w1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> MlpParams:
        return MlpParams(self.config, tuple(arrays[0::2]), tuple(arrays[1::2]))

    def equals(self, other: MlpParams) -> bool:
        return self.config == other.config and all(
            np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays))


def init_params(config: MlpConfig, seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = substream(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in config.layer_dims:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(config, tuple(weights), tuple(biases))


def _check_input(params: MlpParams, x: np.ndarray) -> None:
    if x.ndim not in (1, 2) or x.shape[-1] != params.config.input_dim:
        raise ShapeError(f"input of shape {x.shape} does not match input_dim={params.config.input_dim}")


def forward_logits(params: MlpParams, x) -> np.ndarray:
    """Logits for one input (d,) or a batch (n, d)."""
    h = np.asarray(x, dtype=np.float64)
    _check_input(params, h)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ops.affine_value(h, w, b)
        if i < last:
            h = np.where(h > 0, h, 0.0)
    return h


def logits_on_tape(tape: Tape, layers: Sequence[tuple[Node, Node]], x: Node) -> Node:
    """Same computation as ``forward_logits`` but recorded on ``tape``."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = ops.affine(h, w, b)
        if i < len(layers) - 1:
            h = ops.relu(h)
    return h


def param_nodes(tape: Tape, params: MlpParams, differentiable: bool) -> list[tuple[Node, Node]]:
    make = tape.leaf if differentiable else tape.const
    return [(make(w, name=f"w{i}"), make(b, name=f"b{i}"))
            for i, (w, b) in enumerate(zip(params.weights, params.biases))]


def params_to_dict(params: MlpParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(params.weights, params.biases)],
    }


def params_from_dict(doc: dict) -> MlpParams:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format_version {doc.get('format_version')!r}")
    try:
        config = MlpConfig(**doc["config"])
        layers = doc["layers"]
        ws = tuple(np.array(layer["w"], dtype=np.float64) for layer in layers)
        bs = tuple(np.array(layer["b"], dtype=np.float64) for layer in layers)
        return MlpParams(config, ws, bs)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"invalid model document: {exc}") from exc


def save_params(params: MlpParams, path) -> None:
    from .io import atomic_write_text
    # json writes floats with repr(), which round-trips float64 exactly.
    atomic_write_text(path, json.dumps(params_to_dict(params), indent=1) + "\n")


def load_params(path) -> MlpParams:
    with open(Path(path), encoding="utf-8") as fh:
        doc = json.load(fh)
    return params_from_dict(doc)
