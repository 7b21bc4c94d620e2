"""Training targets for the heatmap decoder.

In-distribution images get an all-zero heatmap. Each OOD training image is
paired with its nearest in-distribution bank entry of the *predicted* class
(squared Euclidean distance in raw feature space) and its target is half the
difference of the two images after mapping bytes to [-1, 1]. Halving keeps
targets inside the decoder's tanh range.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import FeatureBank, FrozenClassifier, classify
from .data import Dataset
from .errors import ClassLookupError, FormatError, InputError

TARGET_SCALE = 0.5
TARGETS_MAGIC = b"HOODTS01"


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Bytes to float32 in [-1, 1] via ``v / 127.5 - 1``."""
    return (np.asarray(img, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def squared_distances(bank_rows: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """(Q, N) squared distances, accumulated in float64."""
    q = np.asarray(queries, dtype=np.float64)
    b = np.asarray(bank_rows, dtype=np.float64)
    diff = q[:, None, :] - b[None, :, :]
    return np.einsum("qnd,qnd->qn", diff, diff)


def nearest_in_distribution(z_o: np.ndarray, predicted_class: int, bank: FeatureBank) -> int:
    """Bank index of the closest entry labelled ``predicted_class``; ties go to the lowest index."""
    return int(nearest_batch(np.asarray(z_o)[None, :], np.array([predicted_class]), bank)[0])


def nearest_batch(queries: np.ndarray, classes: np.ndarray, bank: FeatureBank, chunk: int = 64) -> np.ndarray:
    """Vectorised :func:`nearest_in_distribution` over many queries."""
    queries = np.asarray(queries)
    classes = np.asarray(classes, dtype=np.int64)
    if queries.ndim != 2 or queries.shape[1] != bank.dim:
        raise InputError(f"queries must have shape (Q, {bank.dim}), got {queries.shape}")
    out = np.empty(len(queries), dtype=np.int64)
    for c in np.unique(classes):
        members = np.flatnonzero(bank.labels == c)
        if members.size == 0:
            raise ClassLookupError(f"feature bank has no entry of class {int(c)}")
        rows = bank.features[members]
        qidx = np.flatnonzero(classes == c)
        for s in range(0, qidx.size, chunk):
            part = qidx[s : s + chunk]
            d = squared_distances(rows, queries[part])
            # argmin returns the first minimum; members is ascending
            out[part] = members[np.argmin(d, axis=1)]
    return out


def make_ood_heatmap(x_o: np.ndarray, x_nn: np.ndarray, scale: float = TARGET_SCALE) -> np.ndarray:
    x_o = np.asarray(x_o)
    x_nn = np.asarray(x_nn)
    if x_o.shape != x_nn.shape:
        raise InputError(f"image shapes differ: {x_o.shape} vs {x_nn.shape}")
    return (np.float32(scale) * (normalize_image(x_nn) - normalize_image(x_o))).astype(np.float32)


@dataclass
class TargetSet:
    """Decoder training corpus.

    ``in_refs`` index into the in-distribution dataset (their targets are
    implicitly zero); ``out_refs`` index into the OOD training set with
    matching ``out_nn_refs`` and ``out_heatmaps`` (Q, H, W, 3).
    """

    in_refs: np.ndarray
    out_refs: np.ndarray
    out_nn_refs: np.ndarray
    out_heatmaps: np.ndarray
    image_shape: tuple

    def __post_init__(self):
        self.in_refs = np.asarray(self.in_refs, dtype=np.int64)
        self.out_refs = np.asarray(self.out_refs, dtype=np.int64)
        self.out_nn_refs = np.asarray(self.out_nn_refs, dtype=np.int64)
        self.out_heatmaps = np.asarray(self.out_heatmaps, dtype=np.float32)
        self.image_shape = tuple(int(v) for v in self.image_shape)
        if self.out_heatmaps.shape != (len(self.out_refs),) + self.image_shape:
            raise InputError("heatmap array does not match OOD record count and image shape")
        if len(self.out_nn_refs) != len(self.out_refs):
            raise InputError("every OOD record needs a neighbour reference")

    @property
    def h_in(self) -> list[tuple[int, np.ndarray]]:
        zero = np.zeros(self.image_shape, dtype=np.float32)
        return [(int(r), zero) for r in self.in_refs]

    @property
    def h_out(self) -> list[tuple[int, np.ndarray, int]]:
        return [(int(r), h, int(nn)) for r, h, nn in zip(self.out_refs, self.out_heatmaps, self.out_nn_refs)]

    def restrict_out(self, count: int) -> "TargetSet":
        return TargetSet(self.in_refs, self.out_refs[:count], self.out_nn_refs[:count],
                         self.out_heatmaps[:count], self.image_shape)

    def save(self, path) -> None:
        h, w, c = self.image_shape
        n_in, n_out = len(self.in_refs), len(self.out_refs)
        out = bytearray(TARGETS_MAGIC)
        out += struct.pack("<IIIII", n_in, n_out, w, h, c)
        for r in self.in_refs:
            out += struct.pack("<IB", int(r), 0)
        for r, nn, hm in zip(self.out_refs, self.out_nn_refs, self.out_heatmaps):
            out += struct.pack("<IBI", int(r), 1, int(nn))
            out += hm.astype("<f4").tobytes()
        Path(path).write_bytes(bytes(out))

    @classmethod
    def load(cls, path) -> "TargetSet":
        buf = Path(path).read_bytes()
        if buf[:8] != TARGETS_MAGIC:
            raise FormatError(f"{path}: bad target-set magic {buf[:8]!r}", 0)
        if len(buf) < 28:
            raise FormatError(f"{path}: truncated header", len(buf))
        n_in, n_out, w, h, c = struct.unpack_from("<IIIII", buf, 8)
        vals = w * h * c
        pos = 28
        in_refs, out_refs, nn_refs, maps = [], [], [], []
        for _ in range(n_in + n_out):
            if pos + 5 > len(buf):
                raise FormatError(f"{path}: truncated record", pos)
            ref, kind = struct.unpack_from("<IB", buf, pos)
            pos += 5
            if kind == 0:
                in_refs.append(ref)
            elif kind == 1:
                end = pos + 4 + 4 * vals
                if end > len(buf):
                    raise FormatError(f"{path}: truncated heatmap record", pos)
                (nn,) = struct.unpack_from("<I", buf, pos)
                maps.append(np.frombuffer(buf, dtype="<f4", count=vals, offset=pos + 4).reshape(h, w, c))
                out_refs.append(ref)
                nn_refs.append(nn)
                pos = end
            else:
                raise FormatError(f"{path}: unknown record kind {kind}", pos - 1)
        if pos != len(buf):
            raise FormatError(f"{path}: {len(buf) - pos} trailing bytes", pos)
        heatmaps = np.stack(maps).astype(np.float32) if maps else np.zeros((0, h, w, c), np.float32)
        return cls(np.array(in_refs), np.array(out_refs), np.array(nn_refs), heatmaps, (h, w, c))


def build_target_sets(model: FrozenClassifier, bank: FeatureBank, d_in: Dataset, d_out: Dataset,
                      scale: float = TARGET_SCALE) -> TargetSet:
    """Zero targets for ``d_in``; nearest-neighbour difference targets for ``d_out``.

    ``d_out`` labels are never read: the neighbour search uses the
    classifier's prediction, right or wrong.
    """
    if len(d_out) == 0:
        raise InputError("OOD training set is empty")
    if d_in.image_shape != d_out.image_shape:
        raise InputError(f"in/out image shapes differ: {d_in.image_shape} vs {d_out.image_shape}")
    _, probs, z = classify(model, d_out.images)
    pred = np.argmax(probs, axis=1)
    present = set(np.unique(bank.labels).tolist())
    missing = sorted(set(pred.tolist()) - present)
    if missing:
        counts = {c: int(np.sum(pred == c)) for c in missing}
        summary = ", ".join(f"class {c}: {k} samples" for c, k in counts.items())
        raise ClassLookupError(f"feature bank has no entries for predicted classes ({summary})")
    nn = nearest_batch(z, pred, bank)
    nn_images = d_in.images[bank.image_refs[nn]]
    scale32 = np.float32(scale)
    heatmaps = (scale32 * (normalize_image(nn_images) - normalize_image(d_out.images))).astype(np.float32)
    return TargetSet(np.arange(len(d_in)), np.arange(len(d_out)), bank.image_refs[nn], heatmaps, d_in.image_shape)
