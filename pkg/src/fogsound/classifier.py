"""The urban-sound MLP: 193 -> 280 -> 300 -> 10, ReLU hidden layers, softmax output.

Training is plain full-batch gradient descent on mean cross-entropy.
Inputs are standardised with per-feature statistics stored alongside the
weights (see :func:`fit_normalizer`); the statistics are not trainable.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    CorruptModel,
    DimensionMismatch,
    DivergenceDetected,
    EmptyDataset,
    IoFailure,
    TooSmall,
    VersionMismatch,
)
from .features import FEATURE_DIM, FeatureVector

LAYER_DIMS = (FEATURE_DIM, 280, 300, 10)
N_CLASSES = 10
MAGIC = b"FMLP"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 5000
    learning_rate: float = 0.1
    seed: int = 0
    full_batch: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(eq=False)
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_mean: np.ndarray = None
    input_scale: np.ndarray = None

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        n_in = self.layer_dims[0]
        if self.input_mean is None:
            self.input_mean = np.zeros(n_in)
        if self.input_scale is None:
            self.input_scale = np.ones(n_in)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i + 1], self.layer_dims[i]) or b.shape != (self.layer_dims[i + 1],):
                raise DimensionMismatch(f"layer {i} has shapes {w.shape}, {b.shape}")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_dims, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases],
                        self.input_mean.copy(), self.input_scale.copy())

    def same_as(self, other: "MlpModel") -> bool:
        """Bit-exact equality of every stored array."""
        mine = self.params() + [self.input_mean, self.input_scale]
        theirs = other.params() + [other.input_mean, other.input_scale]
        return self.layer_dims == other.layer_dims and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(mine, theirs))


@dataclass
class Dataset:
    x: np.ndarray  # (n, dim)
    y: np.ndarray  # (n,) int

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.int64).ravel()
        if len(self.x) != len(self.y):
            raise DimensionMismatch("x and y lengths differ")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= N_CLASSES):
            raise ValueError("labels must lie in [0, 9]")

    @classmethod
    def from_items(cls, items: Sequence[tuple[FeatureVector, int]]) -> "Dataset":
        if not items:
            return cls(np.zeros((0, FEATURE_DIM)), np.zeros(0, dtype=np.int64))
        return cls(np.stack([_as_array(fv) for fv, _ in items]), [c for _, c in items])

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def _as_array(fv) -> np.ndarray:
    return fv.values if isinstance(fv, FeatureVector) else np.asarray(fv, dtype=np.float64)


def init_model(seed: int, layer_dims: Sequence[int] = LAYER_DIMS) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(layer_dims), weights, biases)


def zero_model(layer_dims: Sequence[int] = LAYER_DIMS) -> MlpModel:
    return MlpModel(tuple(layer_dims),
                    [np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])],
                    [np.zeros(o) for o in layer_dims[1:]])


def fit_normalizer(model: MlpModel, dataset: Dataset) -> MlpModel:
    """Return a copy of ``model`` whose input statistics come from ``dataset``."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot fit normaliser on an empty dataset")
    mean = dataset.x.mean(axis=0)
    std = dataset.x.std(axis=0)
    out = model.copy()
    out.input_mean = mean
    out.input_scale = np.where(std > 1e-12, std, 1.0)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    if x.shape[1] != model.layer_dims[0]:
        raise DimensionMismatch(f"model expects {model.layer_dims[0]} inputs, got {x.shape[1]}")
    return x


def _forward(model: MlpModel, x: np.ndarray):
    """Batch forward pass; returns output probabilities and the activations cache."""
    a = (x - model.input_mean) / model.input_scale
    acts, pre = [a], []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = _softmax(z) if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return a, acts, pre


def predict_proba(model: MlpModel, x) -> np.ndarray:
    return _forward(model, _check_input(model, np.asarray(x, dtype=np.float64)))[0]


def forward(model: MlpModel, fv) -> np.ndarray:
    return predict_proba(model, _as_array(fv))[0]


def classify(model: MlpModel, fv) -> int:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class.
    return int(np.argmax(forward(model, fv)))


def _nonempty(dataset: Dataset):
    if len(dataset) == 0:
        raise EmptyDataset("dataset is empty")


def loss(model: MlpModel, dataset: Dataset) -> float:
    _nonempty(dataset)
    p = predict_proba(model, dataset.x)
    picked = p[np.arange(len(dataset)), dataset.y]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(float).tiny))))


def grad(model: MlpModel, dataset: Dataset) -> list[np.ndarray]:
    """Gradients of :func:`loss`, ordered like :meth:`MlpModel.params`."""
    _nonempty(dataset)
    x = _check_input(model, dataset.x)
    n = len(dataset)
    probs, acts, pre = _forward(model, x)
    delta = probs.copy()
    delta[np.arange(n), dataset.y] -= 1.0
    delta /= n
    grads = []
    for i in range(len(model.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))            # bias
        grads.append(delta.T @ acts[i])            # weight
        if i:
            delta = (delta @ model.weights[i]) * (pre[i - 1] > 0)
    grads.reverse()
    return grads


def train(model: MlpModel, dataset: Dataset, spec: TrainSpec = TrainSpec()) -> MlpModel:
    """Full-batch gradient descent for ``spec.epochs`` steps; the input model is not modified."""
    _nonempty(dataset)
    out = model.copy()
    params = out.params()
    for epoch in range(spec.epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            g = grad(out, dataset)
            for p, dp in zip(params, g):
                p -= spec.learning_rate * dp
        if not all(np.isfinite(p).all() for p in params):
            raise DivergenceDetected(f"non-finite parameters at epoch {epoch}")
    if spec.epochs and not np.isfinite(loss(out, dataset)):
        raise DivergenceDetected("loss became non-finite")
    return out


def evaluate(model: MlpModel, dataset: Dataset) -> float:
    _nonempty(dataset)
    pred = np.argmax(predict_proba(model, dataset.x), axis=1)
    return float(np.mean(pred == dataset.y))


def split_dataset(dataset: Dataset, train_fraction: float = 0.7, seed: int = 0):
    """Seeded, per-class stratified split; each class contributes floor(frac * n_c) to train."""
    if len(dataset) < N_CLASSES:
        raise TooSmall(f"need at least {N_CLASSES} items, got {len(dataset)}")
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    train_idx, test_idx = [], []
    for c in range(N_CLASSES):
        idx = np.flatnonzero(dataset.y == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(np.floor(train_fraction * len(idx) + 1e-9))
        train_idx += idx[:k].tolist()
        test_idx += idx[k:].tolist()
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(test_idx))


# ---------------------------------------------------------------- model file
#
# "FMLP" | u16 version | u16 n_layers | u32 dims... | f64 params... |
# f64 input_mean... | f64 input_scale... | u32 crc32 of everything before it

def model_to_bytes(model: MlpModel) -> bytes:
    dims = model.layer_dims
    body = [MAGIC, struct.pack("<HH", FORMAT_VERSION, len(dims)), struct.pack(f"<{len(dims)}I", *dims)]
    for p in model.params() + [model.input_mean, model.input_scale]:
        body.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    blob = b"".join(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def model_from_bytes(data: bytes) -> MlpModel:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptModel("bad magic or truncated header")
    blob, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    version, n_layers = struct.unpack_from("<HH", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version}, expected {FORMAT_VERSION}")
    if zlib.crc32(blob) != crc:
        raise CorruptModel("checksum mismatch")
    weights, biases, pos = [], [], 0
    try:
        dims = struct.unpack_from(f"<{n_layers}I", blob, 8)
        arrays = np.frombuffer(blob, dtype="<f8", offset=8 + 4 * n_layers).astype(np.float64)
        for i, o in zip(dims[:-1], dims[1:]):
            weights.append(arrays[pos:pos + i * o].reshape(o, i))
            pos += i * o
            biases.append(arrays[pos:pos + o].copy())
            pos += o
        mean = arrays[pos:pos + dims[0]].copy()
        scale = arrays[pos + dims[0]:pos + 2 * dims[0]].copy()
        if pos + 2 * dims[0] != len(arrays):
            raise ValueError
    except (ValueError, struct.error) as exc:
        raise CorruptModel("parameter block has the wrong size") from exc
    return MlpModel(dims, [w.copy() for w in weights], biases, mean, scale)


def save_model(model: MlpModel, path) -> int:
    data = model_to_bytes(model)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return len(data)


def load_model(path) -> MlpModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return model_from_bytes(data)
