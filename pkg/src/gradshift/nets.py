"""Toy CNN architectures, training, evaluation, and weight persistence.

Two parameter sets stand in for the deep-vs-wide families under study: a
six-conv narrow net ("deep") and a two-conv wide net ("wide"). Both are plain
sequential chains over the engine's layer vocabulary, trained with
minibatch SGD + momentum on softmax cross-entropy.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tape, softmax_xent, softmax_xent_backward
from .errors import DataFormatError, ShapeError
from .rng import Xoshiro256StarStar

# --------------------------------------------------------------------------
# Layer and network specs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind = "conv"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class MaxPool2:
    kind = "maxpool"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class Dense:
    units: int
    kind = "dense"


LayerSpec = Conv2D | ReLU | MaxPool2 | Flatten | Dense


def infer_shapes(input_shape: tuple[int, int, int],
                 layers: list[LayerSpec]) -> list[tuple]:
    """Output shape after each layer; raises ShapeError on an invalid chain."""
    shape: tuple = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv2D):
            if len(shape) != 3:
                raise ShapeError(f"layer {i}: conv needs a CxHxW input, has {shape}")
            c, h, w = shape
            if layer.out_channels < 1 or layer.kernel < 1 or layer.stride < 1 \
                    or layer.padding < 0:
                raise ShapeError(f"layer {i}: invalid conv parameters {layer}")
            if h + 2 * layer.padding < layer.kernel or w + 2 * layer.padding < layer.kernel:
                raise ShapeError(f"layer {i}: kernel {layer.kernel} larger than "
                                 f"padded input {shape}")
            h2 = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            w2 = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            shape = (layer.out_channels, h2, w2)
        elif isinstance(layer, MaxPool2):
            if len(shape) != 3:
                raise ShapeError(f"layer {i}: maxpool needs a CxHxW input, has {shape}")
            c, h, w = shape
            shape = (c, (h + 1) // 2, (w + 1) // 2)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise ShapeError(f"layer {i}: dense needs a flat input, has {shape}")
            if layer.units < 1:
                raise ShapeError(f"layer {i}: dense units must be positive")
            shape = (layer.units,)
        elif isinstance(layer, ReLU):
            pass
        else:
            raise ShapeError(f"layer {i}: unknown layer {layer!r}")
        shapes.append(shape)
    return shapes


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    num_classes: int

    def __post_init__(self):
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ShapeError(f"input shape must be CxHxW, got {self.input_shape}")
        shapes = infer_shapes(self.input_shape, list(self.layers))
        last = self.layers[-1] if self.layers else None
        if not (isinstance(last, Dense) and last.units == self.num_classes):
            raise ShapeError("final layer must be Dense(num_classes); the class "
                             "score y^c is the pre-softmax logit c")
        object.__setattr__(self, "_shapes", tuple(shapes))

    @property
    def layer_shapes(self) -> tuple[tuple, ...]:
        """Output shape of every layer, in order."""
        return self._shapes  # type: ignore[attr-defined]

    def conv_layer_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Conv2D)]

    def param_count(self) -> int:
        total = 0
        in_shape: tuple = self.input_shape
        for layer, out_shape in zip(self.layers, self.layer_shapes):
            if isinstance(layer, Conv2D):
                total += layer.out_channels * in_shape[0] * layer.kernel ** 2
                total += layer.out_channels
            elif isinstance(layer, Dense):
                total += layer.units * in_shape[0] + layer.units
            in_shape = out_shape
        return total

    def to_json(self) -> str:
        doc = {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [_layer_to_doc(l) for l in self.layers],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        try:
            doc = json.loads(text)
            layers = tuple(_layer_from_doc(d) for d in doc["layers"])
            return cls(doc["name"], tuple(doc["input_shape"]), layers,
                       doc["num_classes"])
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"malformed network spec: {exc}") from exc


def _layer_to_doc(layer: LayerSpec) -> dict:
    if isinstance(layer, Conv2D):
        return {"kind": "conv", "out_channels": layer.out_channels,
                "kernel": layer.kernel, "stride": layer.stride,
                "padding": layer.padding}
    if isinstance(layer, Dense):
        return {"kind": "dense", "units": layer.units}
    return {"kind": layer.kind}


def _layer_from_doc(doc: dict) -> LayerSpec:
    kind = doc["kind"]
    if kind == "conv":
        return Conv2D(doc["out_channels"], doc["kernel"], doc["stride"],
                      doc["padding"])
    if kind == "dense":
        return Dense(doc["units"])
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool2()
    if kind == "flatten":
        return Flatten()
    raise DataFormatError(f"unknown layer kind {kind!r}")


# --------------------------------------------------------------------------
# Reference architectures
# --------------------------------------------------------------------------

def build_deep_toy(input_shape: tuple[int, int, int], num_classes: int) -> NetworkSpec:
    """Six narrow conv layers in three blocks, two pools, then a dense head."""
    _require_poolable(input_shape)
    layers = (
        Conv2D(8, 3, 1, 1), ReLU(), Conv2D(8, 3, 1, 1), ReLU(), MaxPool2(),
        Conv2D(16, 3, 1, 1), ReLU(), Conv2D(16, 3, 1, 1), ReLU(), MaxPool2(),
        Conv2D(16, 3, 1, 1), ReLU(), Conv2D(16, 3, 1, 1), ReLU(),
        Flatten(), Dense(64), ReLU(), Dense(num_classes),
    )
    return NetworkSpec("deep", tuple(input_shape), layers, num_classes)


def build_wide_toy(input_shape: tuple[int, int, int], num_classes: int) -> NetworkSpec:
    """Two wide conv layers with a pool after each, then the same dense head."""
    _require_poolable(input_shape)
    layers = (
        Conv2D(32, 3, 1, 1), ReLU(), MaxPool2(),
        Conv2D(64, 3, 1, 1), ReLU(), MaxPool2(),
        Flatten(), Dense(64), ReLU(), Dense(num_classes),
    )
    return NetworkSpec("wide", tuple(input_shape), layers, num_classes)


def _require_poolable(input_shape) -> None:
    _, h, w = input_shape
    if h < 16 or w < 16:
        raise ShapeError(f"input {h}x{w} too small: need at least 16x16 "
                         f"to survive two pooling stages")


# --------------------------------------------------------------------------
# Network: spec + parameters
# --------------------------------------------------------------------------

@dataclass
class Network:
    spec: NetworkSpec
    weights: list[np.ndarray | None]   # aligned with spec.layers
    biases: list[np.ndarray | None]

    def iter_params(self):
        """Yield (layer_index, (weights, biases)) for parameterized layers."""
        for i, w in enumerate(self.weights):
            if w is not None:
                yield i, (w, self.biases[i])

    def forward_tape(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        if x.shape != self.spec.input_shape:
            raise ShapeError(f"input shape {x.shape} != network input "
                             f"{self.spec.input_shape}")
        tape = Tape(x)
        for i, layer in enumerate(self.spec.layers):
            if isinstance(layer, Conv2D):
                engine.tape_conv(tape, i, self.weights[i], self.biases[i],
                                 layer.stride, layer.padding)
            elif isinstance(layer, ReLU):
                engine.tape_relu(tape, i)
            elif isinstance(layer, MaxPool2):
                engine.tape_maxpool(tape, i)
            elif isinstance(layer, Flatten):
                engine.tape_flatten(tape, i)
            elif isinstance(layer, Dense):
                engine.tape_dense(tape, i, self.weights[i], self.biases[i])
        return tape.logits, tape

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_tape(x)[0]

    def predict(self, x: np.ndarray) -> int:
        return int(np.argmax(self.forward(x)))

    def loss(self, x: np.ndarray, true_class: int) -> float:
        return softmax_xent(self.forward(x), true_class)[0]

    def clone_params(self) -> tuple[list, list]:
        return ([None if w is None else w.copy() for w in self.weights],
                [None if b is None else b.copy() for b in self.biases])


def param_shapes(spec: NetworkSpec) -> list[tuple[int, tuple, tuple]]:
    """(layer_index, weight shape, bias shape) for each parameterized layer."""
    out = []
    in_shape: tuple = spec.input_shape
    for i, (layer, out_shape) in enumerate(zip(spec.layers, spec.layer_shapes)):
        if isinstance(layer, Conv2D):
            out.append((i, (layer.out_channels, in_shape[0], layer.kernel,
                            layer.kernel), (layer.out_channels,)))
        elif isinstance(layer, Dense):
            out.append((i, (layer.units, in_shape[0]), (layer.units,)))
        in_shape = out_shape
    return out


def _alloc_params(spec: NetworkSpec) -> Network:
    weights: list[np.ndarray | None] = [None] * len(spec.layers)
    biases: list[np.ndarray | None] = [None] * len(spec.layers)
    for i, w_shape, b_shape in param_shapes(spec):
        weights[i] = np.zeros(w_shape)
        biases[i] = np.zeros(b_shape)
    return Network(spec, weights, biases)


def init_params(spec: NetworkSpec, seed: int) -> Network:
    """He-style uniform init: weights ~ U(-b, b), b = sqrt(6 / fan_in); zero biases."""
    rng = Xoshiro256StarStar(seed)
    net = _alloc_params(spec)
    for i, w_shape, _ in param_shapes(spec):
        fan_in = int(np.prod(w_shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        net.weights[i] = rng.uniform_array(w_shape, -bound, bound)
    return net


# --------------------------------------------------------------------------
# Training and evaluation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float


def train(net: Network, train_set, val_set,
          config: TrainConfig) -> tuple[Network, list[EpochStats]]:
    """Minibatch SGD with momentum; keeps the epoch snapshot with the best
    validation accuracy (earliest epoch on ties)."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training requires non-empty train and validation sets")
    if int(train_set.labels.max()) >= net.spec.num_classes:
        raise ValueError("label exceeds the network's class count")
    rng = Xoshiro256StarStar(config.seed)
    velocity = {li: (np.zeros_like(w), np.zeros_like(b))
                for li, (w, b) in net.iter_params()}
    history: list[EpochStats] = []
    best_params = None
    best_acc = -1.0
    n = len(train_set)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = {li: (np.zeros_like(w), np.zeros_like(b))
                     for li, (w, b) in net.iter_params()}
            for idx in batch:
                x, y = train_set.images[idx], int(train_set.labels[idx])
                logits, tape = net.forward_tape(x)
                loss, probs = softmax_xent(logits, y)
                epoch_loss += loss
                bundle = engine.backward(tape, softmax_xent_backward(probs, y))
                for li, (gw, gb) in bundle.param_grads.items():
                    grads[li][0][...] += gw
                    grads[li][1][...] += gb
            scale = 1.0 / len(batch)
            for li, (w, b) in net.iter_params():
                vw, vb = velocity[li]
                vw *= config.momentum
                vw += grads[li][0] * scale
                vb *= config.momentum
                vb += grads[li][1] * scale
                w -= config.learning_rate * vw
                b -= config.learning_rate * vb
        val_acc = evaluate(net, val_set)
        history.append(EpochStats(epoch, epoch_loss / n, val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = net.clone_params()
    best = Network(net.spec, *best_params)
    return best, history


def evaluate(net: Network, dataset) -> float:
    """Fraction of samples whose argmax logit equals the label (ties: lowest class)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = sum(1 for i in range(len(dataset))
                  if net.predict(dataset.images[i]) == int(dataset.labels[i]))
    return correct / len(dataset)


# --------------------------------------------------------------------------
# Weight persistence
# --------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   bytes 0..3   magic "ADVL"
#   bytes 4..7   format version, u32 = 1
#   bytes 8..11  spec blob length, u32
#   spec blob    NetworkSpec JSON, UTF-8
#   payload      per parameterized layer in order: weights row-major f64,
#                then biases f64

_MAGIC = b"ADVL"
_VERSION = 1


def save_weights(net: Network, path) -> None:
    blob = net.spec.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, (w, b) in net.iter_params():
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_weights(path) -> Network:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise DataFormatError(f"weight file truncated at offset {len(data)}: "
                              f"header needs 12 bytes")
    if data[:4] != _MAGIC:
        raise DataFormatError(f"bad magic {data[:4]!r} at offset 0, expected {_MAGIC!r}")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != _VERSION:
        raise DataFormatError(f"unsupported version {version} at offset 4")
    blob_len = struct.unpack_from("<I", data, 8)[0]
    header_len = 12 + blob_len
    if len(data) < header_len:
        raise DataFormatError(f"weight file truncated at offset {len(data)}: "
                              f"spec blob ends at {header_len}")
    spec = NetworkSpec.from_json(data[12:header_len].decode("utf-8"))
    expected = header_len + 8 * spec.param_count()
    if len(data) != expected:
        raise DataFormatError(f"weight file length {len(data)} != expected "
                              f"{expected}; payload truncated or trailing bytes "
                              f"at offset {min(len(data), expected)}")
    net = _alloc_params(spec)
    offset = header_len
    for i, (w, b) in net.iter_params():
        wn = np.frombuffer(data, dtype="<f8", count=w.size, offset=offset)
        offset += 8 * w.size
        bn = np.frombuffer(data, dtype="<f8", count=b.size, offset=offset)
        offset += 8 * b.size
        net.weights[i] = wn.reshape(w.shape).astype(np.float64)
        net.biases[i] = bn.astype(np.float64)
    return net
