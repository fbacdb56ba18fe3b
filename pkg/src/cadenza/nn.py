"""Dense layers, forward/backward passes and the checkpoint container.

All arithmetic is float64. Dropout is inverted (train-time scaling by
1/(1-p)) so eval mode is a plain deterministic pass.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rng_mod
from .dataio import BadMagicError, FormatError, TruncatedError, VersionMismatchError

ACTIVATIONS = ("identity", "relu", "sigmoid")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"
    dropout: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in _ACT_CODE:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must equal weights rows")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Mlp:
    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an Mlp needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer {i} outputs {a.out_dim} but layer {i + 1} expects {b.in_dim}")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [l.out_dim for l in self.layers]

    def copy(self) -> "Mlp":
        return Mlp(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation, l.dropout) for l in self.layers]
        )

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.weights, l.bias]
        return out


@dataclass
class GradientTape:
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)  # post-activation, pre-dropout
    masks: list[np.ndarray | None] = field(default_factory=list)  # already scaled by 1/(1-p)


def init_mlp(
    dims: Sequence[int],
    activations: Sequence[str] | str,
    dropout: Sequence[float] | float = 0.0,
    seed: int = 0,
    key: int = 0,
) -> Mlp:
    """Glorot-uniform weights and zero biases; ``key`` separates heads under one seed."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("need at least an input and an output dim")
    if any(d < 1 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    n = len(dims) - 1
    acts = [activations] * n if isinstance(activations, str) else list(activations)
    drops = [dropout] * n if isinstance(dropout, (int, float)) else list(dropout)
    if len(acts) != n or len(drops) != n:
        raise ValueError(f"{n} layers need {n} activations and dropout rates")
    gen = rng_mod.stream(seed, "init", key)
    layers = []
    for fan_in, fan_out, act, p in zip(dims, dims[1:], acts, drops):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = gen.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(DenseLayer(w, np.zeros(fan_out), act, float(p)))
    return Mlp(layers)


def head_mlp(
    in_dim: int, hidden: int, embed: int, n_layers: int = 2, dropout: float = 0.3, seed: int = 0, key: int = 0,
    output_activation: str = "sigmoid",
) -> Mlp:
    """Projection head: ReLU hidden layers with dropout, sigmoid embedding layer."""
    if n_layers < 1:
        raise ValueError("n_layers must be positive")
    dims = [in_dim] + [hidden] * (n_layers - 1) + [embed]
    acts = ["relu"] * (n_layers - 1) + [output_activation]
    drops = [dropout] * (n_layers - 1) + [0.0]
    return init_mlp(dims, acts, drops, seed=seed, key=key)


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        # split by sign to avoid overflow in exp
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    return z


def forward(
    mlp: Mlp, x: np.ndarray, mode: str = "eval", rng: np.random.Generator | int | None = None
) -> tuple[np.ndarray, GradientTape | None]:
    """Run ``x`` (batch, in_dim) through ``mlp``.

    In train mode, returns a tape for :func:`backward`; ``rng`` (a generator
    or an int seed) drives the dropout masks.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.layers[0].in_dim:
        raise ValueError(f"input shape {x.shape} does not match in_dim {mlp.layers[0].in_dim}")
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    train = mode == "train"
    if train and not isinstance(rng, np.random.Generator):
        rng = rng_mod.stream(0 if rng is None else int(rng), "dropout")
    tape = GradientTape() if train else None

    h = x
    for layer in mlp.layers:
        y = _activate(h @ layer.weights.T + layer.bias, layer.activation)
        mask = None
        if train and layer.dropout > 0:
            keep = rng.random(y.shape) >= layer.dropout
            mask = keep / (1.0 - layer.dropout)
        if train:
            tape.inputs.append(h)
            tape.outputs.append(y)
            tape.masks.append(mask)
        h = y if mask is None else y * mask
    return h, tape


def backward(
    mlp: Mlp, tape: GradientTape, grad_output: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Reverse pass; returns ``[(dW, db), ...]`` per layer and the input gradient."""
    if tape is None or len(tape.inputs) != len(mlp.layers):
        raise ValueError("tape does not come from a train-mode forward of this network")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != tape.outputs[-1].shape:
        raise ValueError(f"grad_output shape {g.shape} != output shape {tape.outputs[-1].shape}")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(mlp.layers)  # type: ignore[list-item]
    for i in reversed(range(len(mlp.layers))):
        layer = mlp.layers[i]
        y = tape.outputs[i]
        if tape.masks[i] is not None:
            g = g * tape.masks[i]
        if layer.activation == "relu":
            g = g * (y > 0)
        elif layer.activation == "sigmoid":
            g = g * y * (1.0 - y)
        grads[i] = (g.T @ tape.inputs[i], g.sum(axis=0))
        g = g @ layer.weights
    return grads, g


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"row {int(zero[0])} has zero norm")
    return x / norms[:, None]


def l2_normalize_backward(x: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``x`` given the gradient w.r.t. ``x / ||x||``."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    u = x / norms
    return (grad_unit - u * np.sum(u * grad_unit, axis=1, keepdims=True)) / norms


# Checkpoint container -------------------------------------------------------

CKPT_MAGIC = b"MVCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIII")  # magic, version, n_sections, meta_len
_LAYER_HEADER = struct.Struct("<IIBf")  # in, out, activation code, dropout


def write_checkpoint(path: str | os.PathLike, sections: dict[str, Mlp | None], meta: dict | None = None) -> None:
    """Write named networks (``None`` = identity path) plus a JSON metadata blob."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(sections), len(meta_bytes)), meta_bytes]
    for name, mlp in sections.items():
        nb = name.encode("utf-8")
        layers = [] if mlp is None else mlp.layers
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<I", len(layers)))
        for l in layers:
            parts.append(_LAYER_HEADER.pack(l.in_dim, l.out_dim, _ACT_CODE[l.activation], l.dropout))
            parts.append(np.ascontiguousarray(l.weights, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedError(f"{self.path}: checkpoint truncated at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Mlp | None], dict]:
    raw = Path(path).read_bytes()
    cur = _Cursor(raw, path)
    magic, version, n_sections, meta_len = _CKPT_HEADER.unpack(cur.take(_CKPT_HEADER.size))
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    meta = json.loads(cur.take(meta_len).decode("utf-8"))
    sections: dict[str, Mlp | None] = {}
    for _ in range(n_sections):
        (name_len,) = struct.unpack("<H", cur.take(2))
        name = cur.take(name_len).decode("utf-8")
        (n_layers,) = struct.unpack("<I", cur.take(4))
        layers = []
        for _ in range(n_layers):
            fan_in, fan_out, code, p = _LAYER_HEADER.unpack(cur.take(_LAYER_HEADER.size))
            if code >= len(ACTIVATIONS):
                raise FormatError(f"{path}: unknown activation code {code}")
            w = np.frombuffer(cur.take(8 * fan_in * fan_out), dtype="<f8").reshape(fan_out, fan_in)
            b = np.frombuffer(cur.take(8 * fan_out), dtype="<f8")
            layers.append(DenseLayer(w.copy(), b.copy(), ACTIVATIONS[code], round(float(p), 6)))
        sections[name] = Mlp(layers) if layers else None
    if cur.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - cur.pos} trailing bytes in checkpoint")
    return sections, meta
