"""Synthetic DaTscan-like phantoms with known striatal geometry.

Each hemisphere carries a comma-shaped striatum built from two ellipsoids:
a rounded caudate head and an elongated putamen tilted toward the midline.
Parkinsonian phantoms lose putamen length from the posterior end and have
reduced putamen uptake; healthy controls keep the full shape.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .imaging import VOLUME_DIMS

NX, NY, NZ = VOLUME_DIMS
BACKGROUND_LEVEL = 0.2
STRIATAL_PEAK = 1.0
BRAIN_CENTER = (45.0, 54.0, 45.0)
BRAIN_AXES = (36.0, 46.0, 38.0)
CAUDATE_AXES = (6.0, 8.0, 7.0)
PUTAMEN_AXES = (5.0, 14.0, 6.5)
PUTAMEN_TILT = np.deg2rad(20.0)  # anterior end leans toward the midline

DEFAULT_CAUDATE = ((34.0, 66.0, 41.0), (56.0, 66.0, 41.0))
DEFAULT_PUTAMEN = ((25.0, 55.0, 41.0), (65.0, 55.0, 41.0))

PD_SHRINK_RANGE = (0.3, 0.7)
PD_INTENSITY_RANGE = (0.55, 0.85)
CENTER_JITTER = (2.0, 2.0, 1.0)
DEFAULT_NOISE = 0.03

LABELS = {"PD": 1, "HC": 0}


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    class_label: str
    caudate_centers: tuple = DEFAULT_CAUDATE
    putamen_centers: tuple = DEFAULT_PUTAMEN
    intensity_scale: float = 1.0
    putamen_shrink: float = 0.0
    noise_sigma: float = DEFAULT_NOISE
    rng_seed: int = 0

    def validate(self) -> None:
        if self.class_label not in LABELS:
            raise ValueError(f"class_label must be 'PD' or 'HC', got {self.class_label!r}")
        if not 0 < self.intensity_scale <= 1:
            raise ValueError("intensity_scale must lie in (0, 1]")
        if not 0 <= self.putamen_shrink < 1:
            raise ValueError("putamen_shrink must lie in [0, 1)")
        if self.class_label == "HC" and self.putamen_shrink != 0:
            raise ValueError("HC phantoms must have putamen_shrink = 0")
        if self.class_label == "PD" and self.putamen_shrink <= 0:
            raise ValueError("PD phantoms must have putamen_shrink > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        centers = list(self.caudate_centers) + list(self.putamen_centers)
        if len(centers) != 4:
            raise GeometryError("need two caudate and two putamen centers")
        for c in centers:
            x, y, z = c
            if not (0 < x < NX - 1 and 0 < y < NY - 1 and 0 < z < NZ - 1):
                raise GeometryError(f"center {c} is not strictly inside the {NX}x{NY}x{NZ} grid")

    @property
    def label(self) -> int:
        return LABELS[self.class_label]

    def to_dict(self) -> dict:
        return {
            "class_label": self.class_label,
            "caudate_centers": [list(map(float, c)) for c in self.caudate_centers],
            "putamen_centers": [list(map(float, c)) for c in self.putamen_centers],
            "intensity_scale": float(self.intensity_scale),
            "putamen_shrink": float(self.putamen_shrink),
            "noise_sigma": float(self.noise_sigma),
            "rng_seed": int(self.rng_seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(
            class_label=d["class_label"],
            caudate_centers=tuple(tuple(c) for c in d["caudate_centers"]),
            putamen_centers=tuple(tuple(c) for c in d["putamen_centers"]),
            intensity_scale=d["intensity_scale"],
            putamen_shrink=d["putamen_shrink"],
            noise_sigma=d["noise_sigma"],
            rng_seed=d["rng_seed"],
        )


def _ellipsoid(shape, center, axes, tilt=0.0):
    """Boolean mask of a (possibly xy-rotated) ellipsoid, grid order (z, y, x)."""
    cx, cy, cz = center
    reach = max(axes) + 1
    lo = [max(0, int(np.floor(c - reach))) for c in (cz, cy, cx)]
    hi = [min(n, int(np.ceil(c + reach)) + 1) for c, n in zip((cz, cy, cx), shape)]
    mask = np.zeros(shape, dtype=bool)
    if any(h <= l for l, h in zip(lo, hi)):
        return mask
    z, y, x = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    dx, dy, dz = x - cx, y - cy, z - cz
    c, s = np.cos(tilt), np.sin(tilt)
    u = c * dx + s * dy  # short in-plane axis
    v = -s * dx + c * dy  # long in-plane axis
    ax, ay, az = axes
    inside = (u / ax) ** 2 + (v / ay) ** 2 + (dz / az) ** 2 <= 1.0
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = inside
    return mask


def _putamen(shape, center, side, shrink):
    # side: -1 for the left hemisphere (low x), +1 for the right
    tilt = side * PUTAMEN_TILT
    ax, ay, az = PUTAMEN_AXES
    if shrink > 0:
        # anterior tip stays put; the posterior end retracts toward it
        axis = np.array([-np.sin(tilt), np.cos(tilt)])
        cx, cy = np.array(center[:2], dtype=float) + axis * (ay * shrink)
        center = (cx, cy, center[2])
        ay = ay * (1.0 - shrink)
    return _ellipsoid(shape, center, (ax, ay, az), tilt)


def _striatum_masks(spec: PhantomSpec, shrink: float):
    shape = (NZ, NY, NX)
    caudate = np.zeros(shape, dtype=bool)
    putamen = np.zeros(shape, dtype=bool)
    for c in spec.caudate_centers:
        caudate |= _ellipsoid(shape, c, CAUDATE_AXES)
    for c in spec.putamen_centers:
        side = -1 if c[0] < NX / 2 else 1
        putamen |= _putamen(shape, c, side, shrink)
    return caudate, putamen


def roi_mask(spec: PhantomSpec) -> np.ndarray:
    """All striatal voxels of the unshrunk geometry."""
    spec.validate()
    caudate, putamen = _striatum_masks(spec, 0.0)
    return caudate | putamen


def generate_phantom(spec: PhantomSpec):
    """Return ``(volume, roi_mask)`` for one phantom.

    The volume is float32 in [0, 1], shape ``(nz, ny, nx) = (91, 109, 91)``.
    Gaussian noise is added inside the brain only, so the skull-free
    surround stays at exactly zero.
    """
    spec.validate()
    shape = (NZ, NY, NX)
    brain = _ellipsoid(shape, BRAIN_CENTER, BRAIN_AXES)
    caudate, putamen = _striatum_masks(spec, spec.putamen_shrink)

    vol = np.zeros(shape, dtype=np.float32)
    vol[brain] = BACKGROUND_LEVEL
    vol[putamen] = STRIATAL_PEAK * spec.intensity_scale
    vol[caudate] = STRIATAL_PEAK  # caudate wins where the bodies overlap

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.rng_seed)
        noise = rng.standard_normal(int(brain.sum())).astype(np.float32)
        vol[brain] += np.float32(spec.noise_sigma) * noise
        np.clip(vol, 0.0, 1.0, out=vol)
    return vol, roi_mask(spec)


def entry_seed(master_seed: int, label: int, index: int) -> int:
    """64-bit seed for dataset entry ``index`` of class ``label``."""
    ss = np.random.SeedSequence([int(master_seed), int(label), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def jittered_spec(class_label: str, seed: int, noise_sigma: float = DEFAULT_NOISE,
                  shrink_range=PD_SHRINK_RANGE,
                  intensity_range=PD_INTENSITY_RANGE) -> PhantomSpec:
    """Phantom spec with per-entry geometry jitter drawn from ``seed``."""
    rng = np.random.default_rng([seed, 1])
    jitter = np.asarray(CENTER_JITTER)

    def move(centers):
        return tuple(tuple(float(v) for v in np.asarray(c) + rng.uniform(-jitter, jitter))
                     for c in centers)

    caudate = move(DEFAULT_CAUDATE)
    putamen = move(DEFAULT_PUTAMEN)
    if class_label == "PD":
        shrink = float(rng.uniform(*shrink_range))
        scale = float(rng.uniform(*intensity_range))
    else:
        rng.uniform(size=2)  # keep the stream aligned across classes
        shrink, scale = 0.0, 1.0
    return PhantomSpec(class_label, caudate, putamen, scale, shrink, noise_sigma, seed)


@dataclass(frozen=True)
class PhantomEntry:
    volume_id: str
    spec: PhantomSpec

    @property
    def label(self) -> int:
        return self.spec.label

    @property
    def class_label(self) -> str:
        return self.spec.class_label

    def volume(self) -> np.ndarray:
        return generate_phantom(self.spec)[0]

    def roi_mask(self) -> np.ndarray:
        return roi_mask(self.spec)


@dataclass
class LabeledVolumeSet:
    """Labeled phantom collection.

    Volumes are regenerated on access from each entry's spec (generation is
    deterministic), which keeps a 642-entry set to a few kilobytes.
    """

    entries: list[PhantomEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.volume_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("volume ids must be unique")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def class_counts(self) -> dict[str, int]:
        n_pd = sum(e.label for e in self.entries)
        return {"PD": n_pd, "HC": len(self.entries) - n_pd}

    def by_id(self) -> dict[str, PhantomEntry]:
        return {e.volume_id: e for e in self.entries}

    def checksums(self) -> dict[str, str]:
        return {e.volume_id: hashlib.sha256(e.volume().tobytes()).hexdigest()
                for e in self.entries}


def generate_dataset(n_pd: int = 430, n_hc: int = 212, master_seed: int = 0,
                     noise_sigma: float = DEFAULT_NOISE,
                     shrink_range=PD_SHRINK_RANGE,
                     intensity_range=PD_INTENSITY_RANGE) -> LabeledVolumeSet:
    if n_pd < 0 or n_hc < 0:
        raise ValueError("class counts must be non-negative")
    entries = []
    for class_label, n in (("PD", n_pd), ("HC", n_hc)):
        for i in range(n):
            seed = entry_seed(master_seed, LABELS[class_label], i)
            spec = jittered_spec(class_label, seed, noise_sigma, shrink_range, intensity_range)
            spec.validate()
            entries.append(PhantomEntry(f"{class_label}{i:04d}", spec))
    return LabeledVolumeSet(entries)


MANIFEST_FIELDS = ("volume_id", "label", "path", "shrink", "seed")


def write_manifest(path, dataset: LabeledVolumeSet, paths: dict[str, str],
                   preamble: str | None = None) -> None:
    """Dataset manifest CSV: ``volume_id,label,path,shrink,seed``.

    ``preamble`` is written as a leading ``#`` comment line when given.
    """
    with open(path, "w", newline="") as fh:
        if preamble:
            fh.write(f"# {preamble}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for e in dataset.entries:
            writer.writerow([e.volume_id, e.class_label, paths[e.volume_id],
                             repr(float(e.spec.putamen_shrink)), e.spec.rng_seed])


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        r["shrink"] = float(r["shrink"])
        r["seed"] = int(r["seed"])
    return rows
