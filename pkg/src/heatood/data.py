"""Datasets, binary image formats, synthetic splits, lighting augmentations
and heatmap export.

Images are uint8 arrays of shape (H, W, 3); a dataset stacks them to
(N, H, W, 3). All multi-byte integers on disk are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, InputError

HOOD_MAGIC = b"HOODDS01"
CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.dtype != np.uint8 or self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise InputError(f"dataset {self.name!r}: images must be uint8 (N, H, W, 3), got "
                             f"{self.images.dtype} {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise InputError(f"dataset {self.name!r}: {len(self.labels)} labels for {len(self.images)} images")
            if self.labels.size and self.labels.min() < 0:
                raise InputError(f"dataset {self.name!r}: negative label")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, name or self.name)

    def map_images(self, fn, name: str | None = None) -> "Dataset":
        imgs = np.stack([fn(im) for im in self.images]) if len(self) else self.images.copy()
        return Dataset(imgs, None if self.labels is None else self.labels.copy(), name or self.name)


# ----------------------------------------------------------------------
# file formats


def save_dataset(path, ds: Dataset) -> None:
    n, h, w, c = ds.images.shape
    has = ds.labels is not None
    out = bytearray(HOOD_MAGIC)
    out += struct.pack("<IIIIB", n, w, h, c, int(has))
    for i in range(n):
        if has:
            out += struct.pack("<I", int(ds.labels[i]))
        out += ds.images[i].tobytes()
    Path(path).write_bytes(bytes(out))


def load_dataset(path, format: str = "hood_native", num_classes: int | None = None, name: str | None = None) -> Dataset:
    """Read ``cifar_binary`` or ``hood_native`` files into a :class:`Dataset`."""
    path = Path(path)
    buf = path.read_bytes()
    name = name or path.stem
    if format == "cifar_binary":
        ds = _load_cifar(buf, path, name)
    elif format == "hood_native":
        ds = _load_hood(buf, path, name)
    else:
        raise ConfigurationError(f"unknown dataset format {format!r}")
    if num_classes is not None and ds.labels is not None and len(ds):
        bad = np.nonzero(ds.labels >= num_classes)[0]
        if bad.size:
            i = int(bad[0])
            offset = i * CIFAR_RECORD if format == "cifar_binary" else None
            raise FormatError(f"{path}: label {ds.labels[i]} of record {i} exceeds {num_classes - 1}", offset)
    return ds


def _load_cifar(buf: bytes, path: Path, name: str) -> Dataset:
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        n_full = len(buf) // CIFAR_RECORD
        raise FormatError(
            f"{path}: truncated cifar_binary file, expected {(n_full + 1) * CIFAR_RECORD} bytes "
            f"(multiple of {CIFAR_RECORD}), got {len(buf)}",
            n_full * CIFAR_RECORD,
        )
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    planes = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return Dataset(np.ascontiguousarray(planes.transpose(0, 2, 3, 1)), labels, name)


def _load_hood(buf: bytes, path: Path, name: str) -> Dataset:
    if buf[:8] != HOOD_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:8]!r}, expected {HOOD_MAGIC!r}", 0)
    head = struct.calcsize("<IIIIB")
    if len(buf) < 8 + head:
        raise FormatError(f"{path}: truncated header, expected {8 + head} bytes, got {len(buf)}", len(buf))
    n, w, h, c, has = struct.unpack_from("<IIIIB", buf, 8)
    if c != 3:
        raise FormatError(f"{path}: expected 3 channels, header says {c}", 20)
    rec = (4 if has else 0) + w * h * c
    expected = 8 + head + n * rec
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n} records, got {len(buf)}", min(len(buf), expected))
    body = np.frombuffer(buf, dtype=np.uint8, offset=8 + head).reshape(n, rec)
    labels = None
    if has:
        labels = body[:, :4].copy().view("<u4").reshape(n).astype(np.int64)
        body = body[:, 4:]
    images = np.ascontiguousarray(body.reshape(n, h, w, c))
    return Dataset(images, labels, name)


# ----------------------------------------------------------------------
# synthetic data

FAMILIES = ("patch", "stripes", "checker")
SPLITS = ("in_train", "in_test", "out_train", "out_test")

DEFAULT_COLORS = (
    (210, 50, 45),
    (45, 170, 70),
    (50, 70, 210),
    (215, 190, 40),
    (160, 60, 190),
    (40, 180, 190),
    (230, 120, 30),
    (120, 120, 120),
)


@dataclass
class SynthSpec:
    """Recipe for the four synthetic splits.

    In-distribution images are uniform fields of their class colour with a
    per-image brightness jitter and pixel noise. The OOD families interleave a
    class colour with a darker shade of itself, as stripes (OOD training) or
    a checkerboard (OOD test), so the hue still points at one class.
    """

    num_classes: int = 4
    image_size: int = 16
    base_colors: tuple | None = None
    families: dict = field(default_factory=lambda: {"in": "patch", "out_train": "stripes", "out_test": "checker"})
    noise: float = 12.0
    brightness_jitter: float = 0.2
    shade: float = 0.5
    counts: dict = field(default_factory=lambda: {"in_train": 2000, "in_test": 400, "out_train": 400, "out_test": 400})

    def __post_init__(self):
        if self.num_classes < 2:
            raise InputError("need at least 2 classes")
        if self.base_colors is None:
            self.base_colors = DEFAULT_COLORS[: self.num_classes]
        if len(self.base_colors) < self.num_classes:
            raise InputError(f"{self.num_classes} classes but only {len(self.base_colors)} base colours")
        fams = [self.families[k] for k in ("in", "out_train", "out_test")]
        if len(set(fams)) != 3 or any(f not in FAMILIES for f in fams):
            raise InputError(f"families must be pairwise distinct members of {FAMILIES}, got {fams}")
        if self.image_size < 4:
            raise InputError("image_size must be at least 4")

    def family_of(self, split: str) -> str:
        return self.families["in" if split.startswith("in") else split]


def synth_dataset(spec: SynthSpec, seed: int, split: str = "in_train", count: int | None = None) -> Dataset:
    """Generate one split. Deterministic in (spec, seed, split, count)."""
    if split not in SPLITS:
        raise InputError(f"unknown split {split!r}; expected one of {SPLITS}")
    n = spec.counts.get(split, 0) if count is None else count
    if n <= 0:
        raise InputError(f"split {split!r} has no samples")
    rng = np.random.default_rng([int(seed), SPLITS.index(split)])
    s = spec.image_size
    colors = np.asarray(spec.base_colors[: spec.num_classes], dtype=np.float64)
    family = spec.family_of(split)
    labels = rng.integers(0, spec.num_classes, size=n)
    images = np.empty((n, s, s, 3), dtype=np.uint8)
    yy, xx = np.mgrid[0:s, 0:s]
    for i in range(n):
        base = colors[labels[i]] * (1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter))
        if family == "patch":
            img = np.broadcast_to(base, (s, s, 3))
        else:
            period = int(rng.integers(2, 4))
            if family == "stripes":
                coord = yy if rng.random() < 0.5 else xx
                mask = (coord // period) % 2 == 0
            else:
                mask = ((yy // period) + (xx // period)) % 2 == 0
            img = np.where(mask[..., None], base, base * spec.shade)
        img = img + rng.uniform(-spec.noise, spec.noise, size=(s, s, 3))
        images[i] = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    kept = labels if split.startswith("in") else None
    return Dataset(images, kept, split)


def synth_splits(spec: SynthSpec, seed: int) -> dict[str, Dataset]:
    return {split: synth_dataset(spec, seed, split) for split in SPLITS if spec.counts.get(split, 0) > 0}


# ----------------------------------------------------------------------
# lighting augmentations


def _round_clamp(v: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def augment_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    """Scale every pixel by ``factor``, rounding and clamping to [0, 255]."""
    if factor < 0:
        raise InputError("brightness factor must be >= 0")
    return _round_clamp(np.asarray(img, dtype=np.float64) * factor)


def augment_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    """Pull pixels toward the image's grey mean: ``m + factor * (v - m)``."""
    if factor < 0:
        raise InputError("contrast factor must be >= 0")
    v = np.asarray(img, dtype=np.float64)
    m = v.mean()
    return _round_clamp(m + factor * (v - m))


# ----------------------------------------------------------------------
# export

BLUE = np.array([0.0, 0.0, 255.0])
RED = np.array([255.0, 0.0, 0.0])


def heatmap_colors(heatmap: np.ndarray) -> np.ndarray:
    """Blend blue (no response) to red (full response) by channel-max |h|."""
    t = np.clip(np.max(np.abs(np.asarray(heatmap, dtype=np.float64)), axis=-1), 0.0, 1.0)
    rgb = (1.0 - t)[..., None] * BLUE + t[..., None] * RED
    return _round_clamp(rgb)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6 {w} {h} 255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(rgb).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header", pos)
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise FormatError(f"{path}: not an 8-bit binary PPM", 0)
    w, h = int(fields[1]), int(fields[2])
    pixels = raw[pos + 1 :]
    if len(pixels) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, got {len(pixels)}", pos + 1)
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def export_heatmap_image(heatmap: np.ndarray, path) -> None:
    write_ppm(path, heatmap_colors(heatmap))
