"""Heatmap decoder.

Input: classifier features squashed to [0, 1] with the bank's per-dimension
min/max, concatenated with the one-hot predicted class. A dense projection
is reshaped to ``proj_channels`` maps of side ``image_side / 8``, upsampled
by three stride-2 transposed convolutions (kernel 4, padding 1) with ReLU,
and mapped to 3 channels by a 3x3 convolution and tanh.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    AdamState,
    Tensor,
    add,
    adam_step,
    backward,
    conv2d,
    conv_transpose2d,
    dense,
    no_grad,
    relu,
    reshape,
    slice_rows,
    tanh,
    weighted_mse,
)
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .classifier import FeatureBank, FrozenClassifier, classify
from .data import Dataset
from .errors import ConfigurationError, FormatError, InputError
from .targets import TargetSet

INFER_CHUNK = 64
UPSAMPLE_BLOCKS = 3


@dataclass
class DecoderConfig:
    alpha: float = 5.0
    epochs: int = 150
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 200
    ood_ratio: float = 0.2
    seed: int = 0
    proj_channels: int = 64
    block_channels: tuple = (32, 16, 8)

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 < self.ood_ratio <= 1:
            raise ConfigurationError(f"ood_ratio must lie in (0, 1], got {self.ood_ratio}")
        if len(self.block_channels) != UPSAMPLE_BLOCKS:
            raise ConfigurationError(f"need {UPSAMPLE_BLOCKS} upsampling blocks, got {self.block_channels}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")

    def batch_split(self) -> tuple[int, int]:
        """(in-distribution, OOD) samples per batch."""
        n_out = max(1, int(math.floor(self.batch_size * self.ood_ratio / (1 + self.ood_ratio) + 0.5)))
        return self.batch_size - n_out, n_out


def assemble_input(z: np.ndarray, predicted_class, stats_min: np.ndarray, stats_max: np.ndarray,
                   num_classes: int) -> np.ndarray:
    """Normalised features followed by a one-hot class; works on a vector or a batch."""
    z = np.asarray(z, dtype=np.float32)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    lo = np.asarray(stats_min, dtype=np.float32)
    hi = np.asarray(stats_max, dtype=np.float32)
    if z2.shape[1] != lo.shape[0] or lo.shape != hi.shape:
        raise InputError(f"features of width {z2.shape[1]} do not match stats of width {lo.shape}")
    cls = np.atleast_1d(np.asarray(predicted_class, dtype=np.int64))
    if cls.shape != (len(z2),):
        raise InputError("need one predicted class per feature row")
    if cls.size and (cls.min() < 0 or cls.max() >= num_classes):
        raise InputError(f"predicted class outside [0, {num_classes})")
    span = hi - lo
    safe = np.where(span > 0, span, np.float32(1.0))
    zn = np.where(span > 0, np.clip((np.clip(z2, lo, hi) - lo) / safe, 0.0, 1.0), np.float32(0.0))
    onehot = np.zeros((len(z2), num_classes), dtype=np.float32)
    onehot[np.arange(len(z2)), cls] = 1.0
    out = np.concatenate([zn.astype(np.float32), onehot], axis=1)
    return out[0] if single else out


def decoder_inputs(classifier: FrozenClassifier, bank: FeatureBank, images: np.ndarray):
    """Run the frozen classifier and build decoder inputs; also returns (logits, probs)."""
    logits, probs, z = classify(classifier, images)
    pred = np.argmax(probs, axis=1)
    return assemble_input(z, pred, bank.min, bank.max, classifier.config.num_classes), logits, probs


def init_decoder_params(config: DecoderConfig, input_dim: int, image_shape) -> dict[str, np.ndarray]:
    h, w, c = image_shape
    side = _start_side(image_shape)
    rng = np.random.default_rng([config.seed, 303])
    params: dict[str, np.ndarray] = {}
    proj = config.proj_channels * side * side
    params["proj.w"] = (rng.standard_normal((input_dim, proj)) * np.sqrt(2.0 / input_dim)).astype(np.float32)
    params["proj.b"] = np.zeros(proj, dtype=np.float32)
    cin = config.proj_channels
    for i, cout in enumerate(config.block_channels):
        # a stride-2 kernel-4 transposed conv sums 4 taps per output pixel
        std = np.sqrt(2.0 / (cin * 4))
        params[f"up{i}.w"] = (rng.standard_normal((cin, cout, 4, 4)) * std).astype(np.float32)
        params[f"up{i}.b"] = np.zeros(cout, dtype=np.float32)
        cin = cout
    params["out.w"] = (rng.standard_normal((c, cin, 3, 3)) * np.sqrt(1.0 / (cin * 9))).astype(np.float32)
    params["out.b"] = np.zeros(c, dtype=np.float32)
    return params


def _start_side(image_shape) -> int:
    h, w, c = image_shape
    factor = 2**UPSAMPLE_BLOCKS
    if h != w or h % factor or c != 3:
        raise ConfigurationError(f"decoder needs square 3-channel images with side divisible by {factor}, got {image_shape}")
    return h // factor


def _forward(params: dict[str, Tensor], x: Tensor, config: DecoderConfig, side: int) -> Tensor:
    """NCHW heatmap tensor from (N, input_dim) inputs."""
    h = relu(dense(x, params["proj.w"], params["proj.b"]))
    h = reshape(h, (x.shape[0], config.proj_channels, side, side))
    for i in range(UPSAMPLE_BLOCKS):
        h = relu(conv_transpose2d(h, params[f"up{i}.w"], params[f"up{i}.b"], stride=2, padding=1))
    return tanh(conv2d(h, params["out.w"], params["out.b"], stride=1, padding=1))


@dataclass
class DecoderModel:
    config: DecoderConfig
    input_dim: int
    image_shape: tuple
    weights: dict = field(repr=False)
    epoch_losses: tuple = ()

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        for arr in self.weights.values():
            arr.setflags(write=False)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(self.weights[name].tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        save_checkpoint(path, dict(self.weights), kind="decoder")

    @classmethod
    def load(cls, path, config: DecoderConfig, input_dim: int, image_shape) -> "DecoderModel":
        layers = load_checkpoint(path, kind="decoder")
        expected = init_decoder_params(config, input_dim, image_shape)
        if set(layers) != set(expected) or any(layers[k].shape != expected[k].shape for k in expected):
            raise FormatError(f"{path}: checkpoint layers do not match the decoder config")
        return cls(config, input_dim, image_shape, layers)


def decoder_forward(model: DecoderModel, inputs: np.ndarray) -> np.ndarray:
    """Heatmaps (N, H, W, 3), or a single (H, W, 3) map for a 1-d input."""
    inputs = np.asarray(inputs, dtype=np.float32)
    single = inputs.ndim == 1
    x = inputs[None, :] if single else inputs
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise InputError(f"decoder expects inputs of length {model.input_dim}, got shape {inputs.shape}")
    side = _start_side(model.image_shape)
    params = {k: Tensor(v) for k, v in model.weights.items()}
    n = len(x)
    out = np.empty((n,) + model.image_shape, dtype=np.float32)
    with no_grad():
        for s in range(0, n, INFER_CHUNK):
            chunk = x[s : s + INFER_CHUNK]
            m = len(chunk)
            if m < INFER_CHUNK:
                chunk = np.concatenate([chunk, np.zeros((INFER_CHUNK - m, x.shape[1]), np.float32)])
            y = _forward(params, Tensor(chunk), model.config, side).data[:m]
            out[s : s + m] = y.transpose(0, 2, 3, 1)
    return out[0] if single else out


def decoder_loss(pred_in: Tensor | None, pred_out: Tensor, targets_out, alpha: float) -> Tensor:
    """OOD term weighted per entry by ``1 + alpha*|target|`` plus the in-distribution energy."""
    if alpha < 0:
        raise ConfigurationError("alpha must be >= 0")
    t = targets_out.data if isinstance(targets_out, Tensor) else np.asarray(targets_out, dtype=pred_out.dtype)
    if t.shape != pred_out.shape:
        raise InputError(f"OOD predictions {pred_out.shape} do not match targets {t.shape}")
    weight = (1.0 + alpha * np.abs(t)).astype(pred_out.dtype)
    loss = weighted_mse(pred_out, Tensor(t, dtype=pred_out.dtype), weight)
    if pred_in is not None and pred_in.size:
        loss = add(loss, weighted_mse(pred_in, Tensor(np.zeros(pred_in.shape, dtype=pred_in.dtype))))
    return loss


def train_decoder(targets: TargetSet, classifier: FrozenClassifier, bank: FeatureBank, d_in: Dataset,
                  d_out: Dataset, config: DecoderConfig, log=None) -> DecoderModel:
    """Fit the decoder with Adam on batches mixing both target sets at ``ood_ratio``.

    An epoch is one pass over the in-distribution targets. OOD targets are
    drawn from a shuffled cycle that is reshuffled once exhausted.
    """
    if len(targets.out_refs) == 0:
        raise InputError("no OOD targets to train on")
    if len(targets.in_refs) == 0:
        raise InputError("no in-distribution targets to train on")
    x_in, _, _ = decoder_inputs(classifier, bank, d_in.images[targets.in_refs])
    x_out, _, _ = decoder_inputs(classifier, bank, d_out.images[targets.out_refs])
    t_out = np.ascontiguousarray(targets.out_heatmaps.transpose(0, 3, 1, 2))
    image_shape = targets.image_shape
    side = _start_side(image_shape)
    input_dim = x_in.shape[1]

    raw = init_decoder_params(config, input_dim, image_shape)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
    plist = list(params.values())
    state = AdamState.for_params(plist, lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    rng = np.random.default_rng([config.seed, 404])
    n_in_b, n_out_b = config.batch_split()
    n_in, n_out = len(x_in), len(x_out)
    ood_order = rng.permutation(n_out)
    ood_pos = 0

    def next_ood(k: int) -> np.ndarray:
        nonlocal ood_order, ood_pos
        picked = []
        while k > 0:
            if ood_pos == n_out:
                ood_order = rng.permutation(n_out)
                ood_pos = 0
            take = min(k, n_out - ood_pos)
            picked.append(ood_order[ood_pos : ood_pos + take])
            ood_pos += take
            k -= take
        return np.concatenate(picked)

    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n_in)
        total, steps = 0.0, 0
        for s in range(0, n_in, n_in_b):
            idx_in = order[s : s + n_in_b]
            idx_out = next_ood(n_out_b)
            batch = np.concatenate([x_in[idx_in], x_out[idx_out]])
            for p in plist:
                p.grad = None
            pred = _forward(params, Tensor(batch), config, side)
            k = len(idx_in)
            pred_in = slice_rows(pred, 0, k)
            pred_out = slice_rows(pred, k, len(batch))
            loss = decoder_loss(pred_in, pred_out, t_out[idx_out], config.alpha)
            backward(loss)
            adam_step(plist, state)
            total += loss.item()
            steps += 1
        losses.append(total / steps)
        if log is not None and (epoch == 0 or (epoch + 1) % 10 == 0 or epoch + 1 == config.epochs):
            log(f"decoder epoch {epoch + 1}/{config.epochs} loss {losses[-1]:.5f}")
    return DecoderModel(config, input_dim, image_shape, {k: p.data.copy() for k, p in params.items()},
                        tuple(losses))

