"""Small convolutional classifier with a penultimate feature tap.

Architecture: a stack of stride-2 conv + ReLU blocks, a dense + ReLU layer
producing the ``feature_dim`` wide feature vector ``z``, and a final dense
layer to class logits. After training the weights are frozen (read-only
arrays) and every query runs without the tape.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, conv2d, cross_entropy, dense, no_grad, relu, reshape
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset
from .errors import ConfigurationError, FormatError, InputError

# inference always runs on chunks of exactly this many images so each
# row's float arithmetic is independent of the batch it arrives in
INFER_CHUNK = 64


@dataclass
class ClassifierConfig:
    width: int = 16
    height: int = 16
    channels: int = 3
    num_classes: int = 4
    conv_blocks: tuple = ((16, 3, 2), (32, 3, 2), (32, 3, 2))
    feature_dim: int = 64
    epochs: int = 10
    batch_size: int = 50
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.conv_blocks = tuple(tuple(int(v) for v in b) for b in self.conv_blocks)
        if self.channels != 3:
            raise ConfigurationError("images must have 3 channels")
        if self.num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.num_classes}")
        if self.feature_dim < 1:
            raise ConfigurationError("feature_dim must be >= 1")
        self.flat_dim()  # validates the spatial chain

    def spatial_sizes(self) -> list[tuple[int, int]]:
        h, w = self.height, self.width
        sizes = []
        for ch, k, s in self.conv_blocks:
            pad = (k - 1) // 2
            h = (h + 2 * pad - k) // s + 1
            w = (w + 2 * pad - k) // s + 1
            if h < 1 or w < 1:
                raise ConfigurationError(f"conv block {(ch, k, s)} shrinks the input below 1 pixel")
            sizes.append((h, w))
        return sizes

    def flat_dim(self) -> int:
        h, w = self.spatial_sizes()[-1] if self.conv_blocks else (self.height, self.width)
        last = self.conv_blocks[-1][0] if self.conv_blocks else self.channels
        return last * h * w


def init_classifier_params(config: ClassifierConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([config.seed, 101])
    params: dict[str, np.ndarray] = {}
    cin = config.channels
    for i, (cout, k, _) in enumerate(config.conv_blocks):
        fan_in = cin * k * k
        params[f"conv{i}.w"] = (rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        params[f"conv{i}.b"] = np.zeros(cout, dtype=np.float32)
        cin = cout
    flat = config.flat_dim()
    params["feat.w"] = (rng.standard_normal((flat, config.feature_dim)) * np.sqrt(2.0 / flat)).astype(np.float32)
    params["feat.b"] = np.zeros(config.feature_dim, dtype=np.float32)
    params["head.w"] = (
        rng.standard_normal((config.feature_dim, config.num_classes)) * np.sqrt(1.0 / config.feature_dim)
    ).astype(np.float32)
    params["head.b"] = np.zeros(config.num_classes, dtype=np.float32)
    return params


def images_to_input(images: np.ndarray) -> np.ndarray:
    """uint8 (N, H, W, 3) to float32 NCHW in [-1, 1]."""
    x = np.asarray(images, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _forward(params: dict[str, Tensor], x: Tensor, config: ClassifierConfig) -> tuple[Tensor, Tensor]:
    h = x
    for i, (_, k, s) in enumerate(config.conv_blocks):
        h = relu(conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=s, padding=(k - 1) // 2))
    h = reshape(h, (h.shape[0], -1))
    z = relu(dense(h, params["feat.w"], params["feat.b"]))
    logits = dense(z, params["head.w"], params["head.b"])
    return logits, z


@dataclass(frozen=True)
class FrozenClassifier:
    config: ClassifierConfig
    weights: dict = field(repr=False)

    def __post_init__(self):
        for arr in self.weights.values():
            arr.setflags(write=False)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(self.weights[name].tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        save_checkpoint(path, dict(self.weights), kind="classifier")

    @classmethod
    def load(cls, path, config: ClassifierConfig) -> "FrozenClassifier":
        layers = load_checkpoint(path, kind="classifier")
        expected = init_classifier_params(config)
        if set(layers) != set(expected) or any(layers[k].shape != expected[k].shape for k in expected):
            raise FormatError(f"{path}: checkpoint layers do not match the classifier config")
        return cls(config, layers)


def _check_labels(ds: Dataset, num_classes: int) -> None:
    if ds.labels is None:
        raise InputError(f"dataset {ds.name!r} has no labels")
    if len(ds.labels) and ds.labels.max() >= num_classes:
        raise InputError(f"dataset {ds.name!r} has label {ds.labels.max()} >= class count {num_classes}")


def _check_images(images: np.ndarray, config: ClassifierConfig) -> None:
    if images.ndim != 4 or images.shape[1:] != (config.height, config.width, config.channels):
        raise InputError(
            f"classifier expects images of shape (N, {config.height}, {config.width}, {config.channels}), "
            f"got {images.shape}"
        )


def train_classifier(train_set: Dataset, config: ClassifierConfig, log=None) -> FrozenClassifier:
    """Cross-entropy + Adam training, then freeze."""
    if len(train_set) == 0:
        raise InputError("cannot train a classifier on an empty dataset")
    _check_labels(train_set, config.num_classes)
    _check_images(train_set.images, config)
    raw = init_classifier_params(config)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
    plist = list(params.values())
    state = AdamState.for_params(plist, lr=config.lr)
    x_all = images_to_input(train_set.images)
    y_all = train_set.labels
    rng = np.random.default_rng([config.seed, 202])
    n = len(train_set)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            for p in plist:
                p.grad = None
            logits, _ = _forward(params, Tensor(x_all[idx]), config)
            loss = cross_entropy(logits, y_all[idx])
            backward(loss)
            adam_step(plist, state)
            total += loss.item() * len(idx)
        if log is not None:
            log(f"classifier epoch {epoch + 1}/{config.epochs} loss {total / n:.4f}")
    return FrozenClassifier(config, {k: p.data.copy() for k, p in params.items()})


def classify(model: FrozenClassifier, images: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (logits, probs, features) for a uint8 image batch."""
    images = np.asarray(images)
    _check_images(images, model.config)
    cfg = model.config
    n = len(images)
    logits = np.empty((n, cfg.num_classes), dtype=np.float32)
    feats = np.empty((n, cfg.feature_dim), dtype=np.float32)
    params = {k: Tensor(v) for k, v in model.weights.items()}
    with no_grad():
        for start in range(0, n, INFER_CHUNK):
            chunk = images[start : start + INFER_CHUNK]
            m = len(chunk)
            if m < INFER_CHUNK:
                pad = np.zeros((INFER_CHUNK - m,) + chunk.shape[1:], dtype=chunk.dtype)
                chunk = np.concatenate([chunk, pad])
            lo, z = _forward(params, Tensor(images_to_input(chunk)), cfg)
            logits[start : start + m] = lo.data[:m]
            feats[start : start + m] = z.data[:m]
    probs = _softmax_rows(logits)
    return logits, probs, feats


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def accuracy(model: FrozenClassifier, ds: Dataset) -> float:
    _, probs, _ = classify(model, ds.images)
    return float(np.mean(np.argmax(probs, axis=1) == ds.labels))


# ----------------------------------------------------------------------
# feature bank

BANK_MAGIC = b"HOODFB01"


@dataclass(frozen=True)
class FeatureBank:
    features: np.ndarray
    labels: np.ndarray
    image_refs: np.ndarray
    num_classes: int
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        n = len(self.features)
        if not (len(self.labels) == len(self.image_refs) == n):
            raise InputError("feature bank columns have different lengths")
        if self.features.ndim != 2 or self.min.shape != (self.dim,) or self.max.shape != (self.dim,):
            raise InputError("feature bank statistics do not match feature dimension")
        for arr in (self.features, self.labels, self.image_refs, self.min, self.max):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_features(cls, features, labels, image_refs, num_classes: int) -> "FeatureBank":
        features = np.ascontiguousarray(features, dtype=np.float32)
        if len(features) == 0:
            raise InputError("feature bank needs at least one row")
        return cls(
            features,
            np.asarray(labels, dtype=np.int64),
            np.asarray(image_refs, dtype=np.int64),
            int(num_classes),
            features.min(axis=0),
            features.max(axis=0),
        )

    def save(self, path) -> None:
        n, d = self.features.shape
        out = bytearray(BANK_MAGIC)
        out += struct.pack("<III", n, d, self.num_classes)
        rec = np.zeros(n, dtype=[("label", "<u4"), ("ref", "<u4"), ("z", "<f4", (d,))])
        rec["label"] = self.labels
        rec["ref"] = self.image_refs
        rec["z"] = self.features
        out += rec.tobytes()
        out += self.min.astype("<f4").tobytes() + self.max.astype("<f4").tobytes()
        Path(path).write_bytes(bytes(out))

    @classmethod
    def load(cls, path) -> "FeatureBank":
        buf = Path(path).read_bytes()
        if buf[:8] != BANK_MAGIC:
            raise FormatError(f"{path}: bad feature-bank magic {buf[:8]!r}", 0)
        if len(buf) < 20:
            raise FormatError(f"{path}: truncated header", len(buf))
        n, d, c = struct.unpack_from("<III", buf, 8)
        dt = np.dtype([("label", "<u4"), ("ref", "<u4"), ("z", "<f4", (d,))])
        expected = 20 + n * dt.itemsize + 8 * d
        if len(buf) != expected:
            raise FormatError(f"{path}: expected {expected} bytes, got {len(buf)}", min(len(buf), expected))
        rec = np.frombuffer(buf, dtype=dt, count=n, offset=20)
        stats = np.frombuffer(buf, dtype="<f4", count=2 * d, offset=20 + n * dt.itemsize)
        return cls(
            np.ascontiguousarray(rec["z"], dtype=np.float32),
            rec["label"].astype(np.int64),
            rec["ref"].astype(np.int64),
            c,
            stats[:d].astype(np.float32),
            stats[d:].astype(np.float32),
        )


def extract_feature_bank(model: FrozenClassifier, d_in: Dataset) -> FeatureBank:
    """One row of penultimate features per in-distribution image, with its true label."""
    if len(d_in) == 0:
        raise InputError("cannot build a feature bank from an empty dataset")
    _check_labels(d_in, model.config.num_classes)
    _, _, z = classify(model, d_in.images)
    return FeatureBank.from_features(z, d_in.labels, np.arange(len(d_in)), model.config.num_classes)
