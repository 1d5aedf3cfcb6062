"""Small fully-connected feature extractor with hand-written backprop.

Default architecture: flatten -> affine(64) -> tanh -> affine(32).

Checkpoint layout (little-endian)::

    magic b"S3CB" | version u16 | dtype u8 (4 = f32, 8 = f64) | frozen u8 | layers u16
    per layer: in u32 | out u32 | activation u8 (0 identity, 1 tanh) | W (out*in) | b (out)
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeMismatch, StaleCache
from .numerics import Rng

ACTIVATIONS = ("identity", "tanh")
MAGIC = b"S3CB"
VERSION = 1


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"


@dataclass
class Cache:
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    version: int
    owner: int


class FeatureExtractor:
    def __init__(self, layers: list[Layer], input_shape, frozen: bool = False):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.frozen = frozen
        self.version = 0
        self._check()

    def _check(self):
        width = int(np.prod(self.input_shape))
        for i, layer in enumerate(self.layers):
            if layer.weight.shape[1] != width or layer.bias.shape != (layer.weight.shape[0],):
                raise ShapeMismatch(f"layer {i} does not chain: {layer.weight.shape}, input {width}")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            width = layer.weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> FeatureExtractor:
        layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return FeatureExtractor(layers, self.input_shape, self.frozen)

    def mark_updated(self):
        self.version += 1

    def fingerprint(self) -> int:
        h = hashlib.blake2b(digest_size=8)
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return int.from_bytes(h.digest(), "little")

    def forward(self, images) -> tuple[np.ndarray, Cache]:
        """Features for a batch ``(n, *input_shape)`` (or one image) plus a backward cache."""
        x = np.asarray(images, dtype=np.float64)
        single = x.shape == self.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"expected images of shape {self.input_shape}, got {x.shape[1:]}")
        a = x.reshape(x.shape[0], -1)
        inputs, outputs = [], []
        for layer in self.layers:
            inputs.append(a)
            z = a @ layer.weight.T + layer.bias
            a = np.tanh(z) if layer.activation == "tanh" else z
            outputs.append(a)
        cache = Cache(inputs, outputs, self.version, id(self))
        return (a[0] if single else a), cache

    def features(self, images) -> np.ndarray:
        return self.forward(images)[0]

    def backward(self, cache: Cache, grad_features) -> list[np.ndarray]:
        """Gradients of a scalar loss w.r.t. ``params()`` given dL/dfeatures."""
        if cache.owner != id(self) or cache.version != self.version:
            raise StaleCache("cache was produced by a different parameter state")
        g = np.asarray(grad_features, dtype=np.float64)
        if g.ndim == 1:
            g = g[None]
        grads: list[np.ndarray] = []
        for layer, a_in, a_out in zip(reversed(self.layers), reversed(cache.inputs), reversed(cache.outputs)):
            if layer.activation == "tanh":
                g = g * (1.0 - a_out**2)
            grads = [g.T @ a_in, g.sum(axis=0)] + grads
            g = g @ layer.weight
        return grads


def make_extractor(seed, input_shape, hidden: int = 64, out_dim: int = 32) -> FeatureExtractor:
    """Default trainable extractor, weights ~ N(0, 1/fan_in), zero biases."""
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    d_in = int(np.prod(input_shape))
    layers = []
    for fan_in, fan_out, act in ((d_in, hidden, "tanh"), (hidden, out_dim, "identity")):
        w = rng.normal((fan_out, fan_in)) / np.sqrt(fan_in)
        layers.append(Layer(w, np.zeros(fan_out), act))
    return FeatureExtractor(layers, input_shape)


def make_random_projection(seed, input_shape, d: int) -> FeatureExtractor:
    """Frozen single-layer Gaussian projection."""
    if d < 2:
        raise ValueError("d must be at least 2")
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    d_in = int(np.prod(input_shape))
    w = rng.normal((d, d_in)) / np.sqrt(d_in)
    return FeatureExtractor([Layer(w, np.zeros(d))], input_shape, frozen=True)


# --------------------------------------------------------------------------
# Checkpoints

_HEAD = struct.Struct("<4sHBBH")
_LAYER = struct.Struct("<IIB")


def save_extractor(fe: FeatureExtractor, path, dtype: str = "f8") -> None:
    code = {"f4": 4, "f8": 8}[dtype]
    parts = [_HEAD.pack(MAGIC, VERSION, code, int(fe.frozen), len(fe.layers))]
    parts.append(struct.pack("<H", len(fe.input_shape)))
    parts.append(struct.pack(f"<{len(fe.input_shape)}I", *fe.input_shape))
    for layer in fe.layers:
        out, inp = layer.weight.shape
        parts.append(_LAYER.pack(inp, out, ACTIVATIONS.index(layer.activation)))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<" + dtype).tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<" + dtype).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_extractor(path) -> FeatureExtractor:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEAD.size:
        raise FormatError("truncated header", len(data))
    magic, version, code, frozen, n_layers = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION or code not in (4, 8):
        raise FormatError(f"unsupported version/dtype {version}/{code}", 4)
    dtype = "<f4" if code == 4 else "<f8"
    off = _HEAD.size

    def take(fmt_or_count, what):
        nonlocal off
        if isinstance(fmt_or_count, struct.Struct):
            if len(data) < off + fmt_or_count.size:
                raise FormatError(f"truncated {what}", off)
            vals = fmt_or_count.unpack_from(data, off)
            off += fmt_or_count.size
            return vals
        nbytes = fmt_or_count * code
        if len(data) < off + nbytes:
            raise FormatError(f"truncated {what}", off)
        arr = np.frombuffer(data, dtype=dtype, count=fmt_or_count, offset=off).astype(np.float64)
        off += nbytes
        return arr

    (ndim,) = take(struct.Struct("<H"), "input shape")
    shape = take(struct.Struct(f"<{ndim}I"), "input shape")
    layers = []
    for _ in range(n_layers):
        inp, out, act = take(_LAYER, "layer header")
        if act >= len(ACTIVATIONS):
            raise FormatError(f"bad activation code {act}", off - 1)
        w = take(inp * out, "weights").reshape(out, inp)
        b = take(out, "bias")
        layers.append(Layer(w, b, ACTIVATIONS[act]))
    if off != len(data):
        raise FormatError("trailing bytes", off)
    try:
        return FeatureExtractor(layers, shape, bool(frozen))
    except ShapeMismatch as exc:
        raise FormatError(str(exc), _HEAD.size) from exc
