"""Volume I/O and 2D preprocessing for DaTscan-style data.

Arrays follow numpy conventions throughout: a volume is a float32 array of
shape ``(nz, ny, nx)`` (so the flat C-order layout is x-fastest) and an image
is a float32 array of shape ``(height, width)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

VOLUME_DIMS = (91, 109, 91)  # (nx, ny, nz)
DEFAULT_SLICE = 41
DEFAULT_SIZE = 224
DEFAULT_CROP_THRESHOLD = 0.02

_MAGIC = b"SVOL"
_HEADER = struct.Struct("<4s3I")


class VolumeFormatError(ValueError):
    """Raised for malformed raw volume files."""


class StratificationError(ValueError):
    pass


# --------------------------------------------------------------------- volumes


def check_volume(volume: np.ndarray) -> np.ndarray:
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise VolumeFormatError(f"volume must be 3D, got shape {volume.shape}")
    if not np.all(np.isfinite(volume)):
        raise VolumeFormatError("volume contains non-finite values")
    return volume.astype(np.float32, copy=False)


def write_volume(path: str | Path, volume: np.ndarray) -> None:
    """Write ``volume`` (shape ``(nz, ny, nx)``) as a raw ``SVOL`` file."""
    volume = check_volume(volume)
    nz, ny, nx = volume.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, nx, ny, nz))
        fh.write(np.ascontiguousarray(volume, dtype="<f4").tobytes())


def read_volume(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise VolumeFormatError("file shorter than the 16-byte header")
    magic, nx, ny, nz = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}")
    expected = nx * ny * nz * 4
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload length {len(payload)} does not match dims "
            f"({nx}, {ny}, {nz}) -> {expected} bytes"
        )
    volume = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx)
    if not np.all(np.isfinite(volume)):
        raise VolumeFormatError("volume contains non-finite values")
    return volume.astype(np.float32)


def volume_io(path, mode, volume=None):
    """Read or write a raw volume; ``mode`` is ``"read"`` or ``"write"``."""
    if mode == "read":
        return read_volume(path)
    if mode == "write":
        if volume is None:
            raise ValueError("write mode needs a volume")
        write_volume(path, volume)
        return None
    raise ValueError(f"unknown mode {mode!r}")


def extract_slice(volume: np.ndarray, z_index: int = DEFAULT_SLICE) -> np.ndarray:
    """Axial plane ``z_index`` (0-based) as an image of shape ``(ny, nx)``."""
    nz = volume.shape[0]
    if not 0 <= z_index < nz:
        raise IndexError(f"slice index {z_index} outside [0, {nz})")
    return np.array(volume[z_index], dtype=np.float32)


# ---------------------------------------------------------------------- images


def contour_box(image: np.ndarray, threshold_frac: float = DEFAULT_CROP_THRESHOLD):
    """Bounding box ``(row0, row1, col0, col1)`` (half-open) of the largest
    4-connected component at or above ``threshold_frac * max(image)``.

    Returns None when nothing reaches the threshold.
    """
    if not 0 < threshold_frac < 1:
        raise ValueError("threshold_frac must lie in (0, 1)")
    peak = float(image.max()) if image.size else 0.0
    if peak <= 0:
        return None
    fg = image >= threshold_frac * peak
    labels, n = ndimage.label(fg)  # default structure is 4-connected in 2D
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    biggest = int(np.argmax(sizes)) + 1
    rows, cols = np.nonzero(labels == biggest)
    return int(rows.min()), int(rows.max()) + 1, int(cols.min()), int(cols.max()) + 1


def contour_crop(image: np.ndarray, threshold_frac: float = DEFAULT_CROP_THRESHOLD) -> np.ndarray:
    box = contour_box(image, threshold_frac)
    if box is None:
        return np.array(image, dtype=np.float32)
    r0, r1, c0, c1 = box
    return np.array(image[r0:r1, c0:c1], dtype=np.float32)


def resize_bilinear(image: np.ndarray, out_w: int = DEFAULT_SIZE, out_h: int = DEFAULT_SIZE) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    Output pixel ``i`` samples input coordinate ``i * (n_in - 1) / (n_out - 1)``,
    so the four corner pixels are reproduced exactly.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be at least 1x1")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape

    def axis_weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        return lo, hi, frac

    r0, r1, fr = axis_weights(h, out_h)
    c0, c1, fc = axis_weights(w, out_w)
    rows = img[r0] * (1 - fr)[:, None] + img[r1] * fr[:, None]
    out = rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]
    # rounding can step a hair outside the input range
    out = np.clip(out, img.min(), img.max())
    return out.astype(np.float32)


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant image maps to zeros."""
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros(img.shape, dtype=np.float32)
    return ((img - lo) / (hi - lo)).astype(np.float32)


def preprocess_slice(image: np.ndarray, size: int = DEFAULT_SIZE,
                     threshold_frac: float = DEFAULT_CROP_THRESHOLD,
                     mask: np.ndarray | None = None):
    """Crop, resize and normalize a slice.

    When ``mask`` is given it receives the same crop and resize (binarized at
    0.5 afterwards) and ``(image, mask)`` is returned.
    """
    box = contour_box(image, threshold_frac)
    if box is not None:
        r0, r1, c0, c1 = box
        image = image[r0:r1, c0:c1]
        if mask is not None:
            mask = mask[r0:r1, c0:c1]
    out = normalize_intensity(resize_bilinear(image, size, size))
    if mask is None:
        return out
    m = resize_bilinear(np.asarray(mask, dtype=np.float32), size, size) >= 0.5
    return out, m


def save_png(path: str | Path, image: np.ndarray) -> None:
    """Export as 8-bit PNG; grayscale for 2D input, RGB for ``(h, w, 3)``."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(arr).save(path, format="PNG", optimize=False)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentSpec:
    max_shift_frac: float = 0.10
    hflip_prob: float = 0.5
    brightness_range: tuple[float, float] = (0.8, 1.2)
    rng_seed: int = 0

    def __post_init__(self):
        low, high = self.brightness_range
        if not 0 <= self.max_shift_frac < 1:
            raise ValueError("max_shift_frac must lie in [0, 1)")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must lie in [0, 1]")
        if not 0 < low <= high:
            raise ValueError("brightness_range needs 0 < low <= high")

    @classmethod
    def identity(cls, rng_seed: int = 0) -> "AugmentSpec":
        return cls(0.0, 0.0, (1.0, 1.0), rng_seed)


def shift_image(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate by ``dx`` columns (positive = right) and ``dy`` rows
    (positive = down), filling vacated pixels with zero."""
    h, w = image.shape
    out = np.zeros_like(image)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_r = slice(max(0, -dy), h - max(0, dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[dst_r, dst_c] = image[src_r, src_c]
    return out


def augment(image: np.ndarray, spec: AugmentSpec, draw_index: int) -> np.ndarray:
    """Random shift, horizontal flip and brightness scaling.

    The four random draws are taken from a generator keyed on
    ``(spec.rng_seed, draw_index)`` and are always consumed, so any given
    draw is reproducible on its own.
    """
    rng = np.random.default_rng([spec.rng_seed, draw_index])
    fx, fy = rng.uniform(-1.0, 1.0, size=2) * spec.max_shift_frac
    flip = rng.random() < spec.hflip_prob
    gain = rng.uniform(*spec.brightness_range)

    h, w = image.shape
    out = shift_image(np.asarray(image, dtype=np.float32),
                      int(round(fx * w)), int(round(fy * h)))
    if flip:
        out = out[:, ::-1]
    if gain != 1.0:
        out = np.clip(out * gain, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


# ------------------------------------------------------------------- splitting


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]
    labels: dict[str, int] = field(default_factory=dict)

    def partition(self, name: str) -> list[str]:
        return {"train": self.train, "val": self.validation,
                "validation": self.validation, "test": self.test}[name]

    def class_counts(self) -> dict[str, tuple[int, int]]:
        """``{partition: (n_pd, n_hc)}``."""
        out = {}
        for name, ids in (("train", self.train), ("val", self.validation), ("test", self.test)):
            n_pd = sum(self.labels[i] for i in ids)
            out[name] = (n_pd, len(ids) - n_pd)
        return out


def holdout_size(n: int, ratio: float) -> int:
    # floor(r * (n - 1)): 430 -> 42 and 212 -> 21 at 10%
    if n == 0 or ratio <= 0:
        return 0
    return int(np.floor(ratio * (n - 1) + 1e-9))


def split_dataset(items, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Stratified train/validation/test split.

    ``items`` is an iterable of ``(volume_id, label)`` pairs or an object with
    an ``entries`` attribute whose elements carry ``volume_id`` and ``label``.
    Validation and test sizes per class are ``floor(r * (n - 1))``; the
    remainder goes to training.
    """
    if hasattr(items, "entries"):
        pairs = [(e.volume_id, int(e.label)) for e in items.entries]
    else:
        pairs = [(str(i), int(lbl)) for i, lbl in items]
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = [p[0] for p in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError("volume ids must be unique")

    labels = dict(pairs)
    train, val, test = [], [], []
    for cls in (1, 0):
        members = sorted(i for i, lbl in pairs if lbl == cls)
        if not members:
            raise StratificationError(f"class {cls} has no entries")
        # seed per class keeps each class's draw independent of the other's size
        order = np.random.default_rng([seed, cls]).permutation(len(members))
        members = [members[j] for j in order]
        n_val = holdout_size(len(members), ratios[1])
        n_test = holdout_size(len(members), ratios[2])
        val += members[:n_val]
        test += members[n_val:n_val + n_test]
        train += members[n_val + n_test:]
    return DatasetSplit(sorted(train), sorted(val), sorted(test), labels)
