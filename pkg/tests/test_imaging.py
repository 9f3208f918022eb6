import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from datxai import imaging
from datxai.imaging import (AugmentSpec, VolumeFormatError, augment, contour_box, contour_crop,
                            extract_slice, normalize_intensity, resize_bilinear, split_dataset)
from datxai.phantomgen import PhantomSpec, generate_phantom

finite_images = hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12),
                           elements=st.floats(-100, 100, width=32))


# ---- volume io

def test_volume_round_trip(tmp_path):
    vol, _ = generate_phantom(PhantomSpec("HC", rng_seed=5))
    imaging.volume_io(tmp_path / "a.svol", "write", vol)
    back = imaging.volume_io(tmp_path / "a.svol", "read")
    assert back.shape == (91, 109, 91)
    assert np.array_equal(back, vol)


def test_volume_header_layout(tmp_path):
    vol = np.zeros((91, 109, 91), np.float32)
    imaging.write_volume(tmp_path / "v.svol", vol)
    raw = (tmp_path / "v.svol").read_bytes()
    assert raw[:4] == b"SVOL"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [91, 109, 91]
    assert len(raw) == 16 + 91 * 109 * 91 * 4


def test_truncated_payload_rejected(tmp_path):
    imaging.write_volume(tmp_path / "v.svol", np.ones((3, 4, 5), np.float32))
    raw = (tmp_path / "v.svol").read_bytes()
    (tmp_path / "v.svol").write_bytes(raw[:-4])
    with pytest.raises(VolumeFormatError, match="payload length"):
        imaging.read_volume(tmp_path / "v.svol")


def test_bad_magic_and_nonfinite(tmp_path):
    (tmp_path / "x.svol").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(VolumeFormatError, match="magic"):
        imaging.read_volume(tmp_path / "x.svol")
    bad = np.ones((2, 2, 2), np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(VolumeFormatError):
        imaging.write_volume(tmp_path / "y.svol", bad)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_volume_round_trip_property(tmp_path_factory, vol):
    path = tmp_path_factory.mktemp("v") / "p.svol"
    imaging.write_volume(path, vol)
    assert np.array_equal(imaging.read_volume(path), vol)


# ---- slices and crop

def test_extract_slice_shape_and_range():
    vol = np.zeros((91, 109, 91), np.float32)
    assert extract_slice(vol, 41).shape == (109, 91)
    with pytest.raises(IndexError):
        extract_slice(vol, 91)
    assert np.all(extract_slice(np.full((91, 109, 91), 0.3, np.float32)) == np.float32(0.3))


def test_crop_square():
    img = np.zeros((50, 40), np.float32)
    img[12:22, 7:17] = 1.0
    out = contour_crop(img, 0.02)
    assert out.shape == (10, 10) and np.all(out == 1.0)
    assert contour_box(img, 0.02) == (12, 22, 7, 17)


def test_crop_degenerate_cases():
    z = np.zeros((8, 9), np.float32)
    assert np.array_equal(contour_crop(z), z)
    tight = np.ones((5, 6), np.float32)
    assert np.array_equal(contour_crop(tight), tight)


def test_crop_keeps_largest_component():
    img = np.zeros((30, 30), np.float32)
    img[2:4, 2:4] = 1.0  # small blob
    img[10:20, 12:25] = 0.5  # large blob
    assert contour_box(img, 0.02) == (10, 20, 12, 25)


@settings(max_examples=60, deadline=None)
@given(finite_images, st.floats(0.01, 0.99))
def test_crop_is_subrectangle_containing_component(img, thr):
    box = contour_box(img, thr)
    out = contour_crop(img, thr)
    if box is None:
        assert np.array_equal(out, img)
        return
    r0, r1, c0, c1 = box
    assert np.array_equal(out, img[r0:r1, c0:c1])
    from scipy import ndimage
    lab, _ = ndimage.label(img >= thr * img.max())
    sizes = np.bincount(lab.ravel())[1:]
    rows, cols = np.nonzero(lab == np.argmax(sizes) + 1)
    assert rows.min() >= r0 and rows.max() < r1 and cols.min() >= c0 and cols.max() < c1


# ---- resize / normalize

def test_resize_examples():
    img = np.array([[0, 1], [0, 1]], np.float32)
    out = resize_bilinear(img, 3, 3)
    assert np.allclose(out[:, 1], 0.5)
    assert np.array_equal(resize_bilinear(img, 2, 2), img)
    c = np.full((7, 5), 0.25, np.float32)
    assert np.all(resize_bilinear(c, 11, 3) == np.float32(0.25))
    assert resize_bilinear(np.ones((109, 91), np.float32)).shape == (224, 224)


@settings(max_examples=60, deadline=None)
@given(finite_images, st.integers(1, 20), st.integers(1, 20))
def test_resize_range_property(img, w, h):
    out = resize_bilinear(img, w, h)
    assert out.shape == (h, w)
    assert out.min() >= img.min() and out.max() <= img.max()


def test_normalize_examples():
    assert np.allclose(normalize_intensity(np.array([2.0, 4.0, 6.0])), [0, 0.5, 1])
    assert np.all(normalize_intensity(np.full(4, 7.0)) == 0)
    x = np.array([0.0, 0.3, 1.0], np.float32)
    assert np.array_equal(normalize_intensity(x), x)


@settings(max_examples=60, deadline=None)
@given(finite_images)
def test_normalize_range_property(img):
    out = normalize_intensity(img)
    assert out.min() >= 0 and out.max() <= 1


# ---- augmentation

def test_augment_identity_and_flip():
    rng = np.random.default_rng(0)
    img = rng.random((16, 20)).astype(np.float32)
    assert np.array_equal(augment(img, AugmentSpec.identity(3), 17), img)
    flip = AugmentSpec(0.0, 1.0, (1.0, 1.0))
    once = augment(img, flip, 0)
    assert np.array_equal(once, img[:, ::-1])
    assert np.array_equal(augment(once, flip, 1), img)


def test_shift_impulse():
    img = np.zeros((9, 9), np.float32)
    img[4, 2] = 1.0
    out = imaging.shift_image(img, 3, 0)
    assert out[4, 5] == 1.0 and out.sum() == 1.0


def test_augment_deterministic_per_draw():
    img = np.random.default_rng(1).random((32, 32)).astype(np.float32)
    spec = AugmentSpec(rng_seed=9)
    a, b = augment(img, spec, 5), augment(img, spec, 5)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_augment_spec_validation():
    with pytest.raises(ValueError):
        AugmentSpec(max_shift_frac=1.0)
    with pytest.raises(ValueError):
        AugmentSpec(hflip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentSpec(brightness_range=(1.2, 0.8))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, (6, 7), elements=st.floats(0, 1, width=32)), st.integers(0, 2**31))
def test_identity_augment_property(img, draw):
    assert np.array_equal(augment(img, AugmentSpec.identity(), draw), img)


# ---- split

def _items(n_pd, n_hc):
    return [(f"PD{i:04d}", 1) for i in range(n_pd)] + [(f"HC{i:04d}", 0) for i in range(n_hc)]


def test_split_matches_reference_counts():
    s = split_dataset(_items(430, 212), (0.8, 0.1, 0.1), seed=0)
    assert s.class_counts() == {"train": (346, 170), "val": (42, 21), "test": (42, 21)}


def test_split_all_train_and_determinism():
    items = _items(7, 5)
    s = split_dataset(items, (1, 0, 0))
    assert len(s.train) == 12 and not s.validation and not s.test
    assert split_dataset(items, seed=3) == split_dataset(items, seed=3)


def test_split_errors():
    with pytest.raises(imaging.StratificationError):
        split_dataset(_items(5, 0))
    with pytest.raises(ValueError):
        split_dataset(_items(5, 5), (0.5, 0.5, 0.5))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_split_partition_property(n_pd, n_hc, seed):
    items = _items(n_pd, n_hc)
    s = split_dataset(items, seed=seed)
    parts = [set(s.train), set(s.validation), set(s.test)]
    assert sum(map(len, parts)) == len(items)
    assert set().union(*parts) == {i for i, _ in items}
    counts = s.class_counts()
    for idx, n in ((0, n_pd), (1, n_hc)):
        assert counts["val"][idx] == counts["test"][idx] == imaging.holdout_size(n, 0.1)
