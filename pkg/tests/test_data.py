import struct

import numpy as np
import pytest

from heatood.data import (
    CIFAR_RECORD,
    Dataset,
    SynthSpec,
    augment_brightness,
    augment_contrast,
    export_heatmap_image,
    heatmap_colors,
    load_dataset,
    read_ppm,
    save_dataset,
    synth_dataset,
    synth_splits,
)
from heatood.errors import ConfigurationError, FormatError, InputError


def test_hood_native_hand_written_round_trip(tmp_path):
    imgs = np.arange(2 * 2 * 2 * 3, dtype=np.uint8).reshape(2, 2, 2, 3)
    raw = b"HOODDS01" + struct.pack("<IIIIB", 2, 2, 2, 3, 1)
    raw += struct.pack("<I", 3) + imgs[0].tobytes() + struct.pack("<I", 1) + imgs[1].tobytes()
    p = tmp_path / "two.hds"
    p.write_bytes(raw)
    ds = load_dataset(p)
    assert np.array_equal(ds.images, imgs)
    assert ds.labels.tolist() == [3, 1]
    out = tmp_path / "again.hds"
    save_dataset(out, ds)
    assert out.read_bytes() == raw


def test_hood_native_without_labels(tmp_path):
    ds = Dataset(np.random.default_rng(0).integers(0, 256, (5, 4, 3, 3), dtype=np.uint8))
    p = tmp_path / "x.hds"
    save_dataset(p, ds)
    back = load_dataset(p)
    assert back.labels is None
    assert np.array_equal(back.images, ds.images)


def test_cifar_layout(tmp_path):
    rec = np.zeros(CIFAR_RECORD, dtype=np.uint8)
    rec[0] = 7
    rec[1] = 11  # R plane, pixel (0, 0)
    rec[1 + 1024] = 22  # G plane
    rec[1 + 2048] = 33  # B plane
    rec[1 + 1024 + 32 + 1] = 44  # G at row 1, col 1
    p = tmp_path / "c.bin"
    p.write_bytes(rec.tobytes() * 2)
    ds = load_dataset(p, "cifar_binary", num_classes=10)
    assert ds.images.shape == (2, 32, 32, 3)
    assert ds.images[0, 0, 0].tolist() == [11, 22, 33]
    assert ds.images[1, 1, 1, 1] == 44
    assert ds.labels.tolist() == [7, 7]


def test_cifar_truncated_names_lengths(tmp_path):
    p = tmp_path / "c.bin"
    p.write_bytes(bytes(CIFAR_RECORD + 10))
    with pytest.raises(FormatError) as err:
        load_dataset(p, "cifar_binary")
    msg = str(err.value)
    assert str(2 * CIFAR_RECORD) in msg and str(CIFAR_RECORD + 10) in msg
    assert "offset" in msg


def test_cifar_oversized_label(tmp_path):
    rec = np.zeros(CIFAR_RECORD, dtype=np.uint8)
    p = tmp_path / "c.bin"
    rec2 = rec.copy()
    rec2[0] = 12
    p.write_bytes(rec.tobytes() + rec2.tobytes())
    with pytest.raises(FormatError, match=f"offset {CIFAR_RECORD}"):
        load_dataset(p, "cifar_binary", num_classes=10)


def test_hood_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.hds"
    p.write_bytes(b"NOTMAGIC" + bytes(20))
    with pytest.raises(FormatError, match="magic"):
        load_dataset(p)
    ds = Dataset(np.zeros((3, 2, 2, 3), np.uint8), np.array([0, 1, 2]))
    save_dataset(p, ds)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(FormatError, match="expected"):
        load_dataset(p)
    with pytest.raises(ConfigurationError):
        load_dataset(p, "jpeg")


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 4, 4, 3), np.float32))
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 4, 4, 3), np.uint8), np.array([0]))


def test_synth_determinism_and_counts():
    spec = SynthSpec(counts={"in_train": 40, "in_test": 8, "out_train": 8, "out_test": 8})
    a = synth_splits(spec, 3)
    b = synth_splits(spec, 3)
    for k in a:
        assert np.array_equal(a[k].images, b[k].images)
    assert len(a["in_train"]) == 40
    assert a["out_test"].labels is None
    c = synth_dataset(spec, 4, "in_train")
    assert not np.array_equal(c.images, a["in_train"].images)


def test_synth_class_means_match_base_colors():
    spec = SynthSpec()
    ds = synth_dataset(spec, 0, "in_train", count=400)
    for c in range(spec.num_classes):
        mean = ds.images[ds.labels == c].reshape(-1, 3).mean(axis=0)
        # brightness jitter averages out; its spread plus noise bounds the error
        assert np.all(np.abs(mean - np.array(spec.base_colors[c])) < spec.noise)


def _gradient_magnitude(ds: Dataset) -> float:
    x = ds.images.astype(np.float64)
    return float(np.abs(np.diff(x, axis=1)).mean() + np.abs(np.diff(x, axis=2)).mean())


def test_families_are_distinct():
    spec = SynthSpec()
    patch = synth_dataset(spec, 0, "in_train", count=100)
    stripes = synth_dataset(spec, 0, "out_train", count=100)
    checker = synth_dataset(spec, 0, "out_test", count=100)
    assert _gradient_magnitude(stripes) > _gradient_magnitude(patch)
    assert _gradient_magnitude(checker) > _gradient_magnitude(patch)


def test_synth_spec_validation():
    with pytest.raises(InputError):
        SynthSpec(families={"in": "patch", "out_train": "patch", "out_test": "checker"})
    with pytest.raises(InputError):
        synth_dataset(SynthSpec(), 0, "in_train", count=0)


def test_brightness_examples():
    img = np.array([[[100, 200, 0]]], dtype=np.uint8)
    assert np.array_equal(augment_brightness(img, 1.0), img)
    assert augment_brightness(img, 2.0)[0, 0, 0] == 200
    assert augment_brightness(img, 2.5)[0, 0, 1] == 255
    with pytest.raises(InputError):
        augment_brightness(img, -1)


def test_contrast_examples():
    # two pixels averaging to 128 in every channel
    img = np.array([[[100, 100, 100], [156, 156, 156]]], dtype=np.uint8)
    assert augment_contrast(img, 0.5)[0, 0, 0] == 114
    assert np.array_equal(augment_contrast(img, 1.0), img)
    rng = np.random.default_rng(1)
    r = rng.integers(0, 256, (5, 5, 3), dtype=np.uint8)
    flat = augment_contrast(r, 0.0)
    assert np.all(flat == np.floor(r.astype(np.float64).mean() + 0.5))


def test_augmentations_clamp_and_stay_bytes():
    rng = np.random.default_rng(2)
    for _ in range(20):
        img = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
        for out in (augment_brightness(img, rng.uniform(0, 4)), augment_contrast(img, rng.uniform(0, 3))):
            assert out.dtype == np.uint8 and out.shape == img.shape


def test_heatmap_export(tmp_path):
    z = np.zeros((32, 32, 3), np.float32)
    p = tmp_path / "z.ppm"
    export_heatmap_image(z, p)
    assert p.read_bytes().startswith(b"P6 32 32 255\n")
    img = read_ppm(p)
    assert np.all(img == [0, 0, 255])
    export_heatmap_image(-np.ones((4, 6, 3)), p)
    img = read_ppm(p)
    assert img.shape == (4, 6, 3) and np.all(img == [255, 0, 0])


def test_colormap_monotone():
    t = np.linspace(0, 1, 101)
    hm = np.stack([t, -t, 0 * t], axis=-1)[None]
    red = heatmap_colors(hm)[0, :, 0].astype(int)
    assert np.all(np.diff(red) >= 0)


def test_export_unwritable(tmp_path):
    with pytest.raises(OSError):
        export_heatmap_image(np.zeros((2, 2, 3)), tmp_path / "missing" / "x.ppm")
