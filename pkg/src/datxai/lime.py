"""LIME for grayscale images: superpixels, perturbations, weighted ridge fit.

The explainer toggles superpixels off (filling them with a constant),
scores every perturbed image with the black-box classifier, and fits a
linear model of the score on the on/off indicators. Samples are weighted by
an exponential kernel over the cosine distance between their mask and the
all-on mask, so perturbations close to the original image dominate the fit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg, ndimage


class SingularSystemError(np.linalg.LinAlgError):
    pass


# --------------------------------------------------------------- superpixels


@dataclass(frozen=True)
class SuperpixelMap:
    labels: np.ndarray  # (h, w) int, ids 0..k-1

    @property
    def k(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def segment(self, sid: int) -> np.ndarray:
        return self.labels == sid


def _grid(h, w, k):
    nx = min(w, max(1, math.ceil(math.sqrt(k * w / h))))
    ny = min(h, max(1, math.ceil(k / nx)))
    return nx, ny


def segment_slic(image, target_k: int = 40, compactness: float = 10.0,
                 n_iter: int = 10) -> SuperpixelMap:
    """SLIC superpixels on (intensity, x, y).

    Intensity is rescaled to [0, 100] so ``compactness`` has the same
    meaning as for CIELAB lightness. Clusters start on a regular grid with
    at least ``target_k`` cells, are refined by local k-means inside a
    2S window, and a final pass keeps each cluster's largest 4-connected
    piece and folds stray fragments into the adjacent segment of closest
    mean intensity. The realized count can differ from ``target_k``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("expected a non-empty 2D image")
    h, w = img.shape
    if target_k < 1:
        raise ValueError("target_k must be >= 1")
    if target_k > h * w:
        raise ValueError(f"target_k={target_k} exceeds the pixel count {h * w}")
    lo, hi = img.min(), img.max()
    feat = (img - lo) * (100.0 / (hi - lo)) if hi > lo else np.zeros_like(img)

    nx, ny = _grid(h, w, target_k)
    step = math.sqrt(h * w / (nx * ny))
    cy, cx = np.meshgrid((np.arange(ny) + 0.5) * h / ny, (np.arange(nx) + 0.5) * w / nx, indexing="ij")
    centers = np.stack([cy.ravel(), cx.ravel(), np.zeros(nx * ny)], axis=1)
    centers[:, 2] = feat[centers[:, 0].astype(int), centers[:, 1].astype(int)]

    rows, cols = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.int64)
    spatial = (compactness / step) ** 2
    reach = int(math.ceil(2 * step))
    for _ in range(n_iter):
        best = np.full((h, w), np.inf)
        for c, (y0, x0, f0) in enumerate(centers):
            r0, r1 = max(0, int(y0) - reach), min(h, int(y0) + reach + 1)
            c0, c1 = max(0, int(x0) - reach), min(w, int(x0) + reach + 1)
            d = (feat[r0:r1, c0:c1] - f0) ** 2 + spatial * (
                (rows[r0:r1, c0:c1] - y0) ** 2 + (cols[r0:r1, c0:c1] - x0) ** 2)
            better = d < best[r0:r1, c0:c1]
            best[r0:r1, c0:c1][better] = d[better]
            labels[r0:r1, c0:c1][better] = c
        # pixels out of every window (only possible on degenerate grids)
        if np.isinf(best).any():
            miss = np.isinf(best)
            d = ((feat[miss][:, None] - centers[None, :, 2]) ** 2
                 + spatial * ((rows[miss][:, None] - centers[None, :, 0]) ** 2
                              + (cols[miss][:, None] - centers[None, :, 1]) ** 2))
            labels[miss] = d.argmin(axis=1)
        counts = np.bincount(labels.ravel(), minlength=len(centers))
        nz = counts > 0
        for j, arr in enumerate((rows, cols, feat)):
            sums = np.bincount(labels.ravel(), weights=arr.ravel(), minlength=len(centers))
            centers[nz, j] = sums[nz] / counts[nz]
    return SuperpixelMap(_enforce_connectivity(labels, feat))


def _enforce_connectivity(labels, feat):
    h, w = labels.shape
    final = np.full((h, w), -1, dtype=np.int64)
    orphans = []
    for c in np.unique(labels):
        comps, n = ndimage.label(labels == c)
        if n == 0:
            continue
        sizes = np.bincount(comps.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        final[comps == keep] = c
        orphans += [comps == j for j in range(1, n + 1) if j != keep]

    cross = ndimage.generate_binary_structure(2, 1)
    while orphans:
        means = {c: feat[final == c].mean() for c in np.unique(final[final >= 0])}
        pending = []
        for frag in orphans:
            ring = ndimage.binary_dilation(frag, cross) & ~frag
            near = np.unique(final[ring])
            near = near[near >= 0]
            if near.size == 0:
                pending.append(frag)
                continue
            level = feat[frag].mean()
            target = min(near, key=lambda c: (abs(means[c] - level), c))
            final[frag] = target
        if len(pending) == len(orphans):
            raise RuntimeError("could not attach superpixel fragments")
        orphans = pending

    # contiguous ids in raster order of first appearance
    uniq, first = np.unique(final.ravel(), return_index=True)
    order = uniq[np.argsort(first)]
    remap = np.empty(order.max() + 1, dtype=np.int64)
    remap[order] = np.arange(order.size)
    return remap[final]


# ------------------------------------------------------------- perturbations


def perturb(image, segments: SuperpixelMap, mask, replacement_value: float = 0.0) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (segments.k,):
        raise ValueError(f"mask has {mask.size} entries for {segments.k} superpixels")
    out = np.array(image, dtype=np.float32, copy=True)
    out[~mask[segments.labels]] = replacement_value
    return out


@dataclass
class ExplainConfig:
    target_k_superpixels: int = 40
    n_samples: int = 1000
    p_off: float = 0.5
    ridge_lambda: float = 1.0
    top_k_display: int = 5
    replacement_value: float = 0.0
    kernel_width: float = 0.25
    compactness: float = 10.0
    slic_iterations: int = 10
    exhaustive: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.p_off < 1:
            raise ValueError("p_off must lie in (0, 1)")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.ridge_lambda < 0 or self.kernel_width <= 0:
            raise ValueError("ridge_lambda must be >= 0 and kernel_width > 0")
        if self.top_k_display < 0:
            raise ValueError("top_k_display must be >= 0")


@dataclass(frozen=True)
class PerturbationSample:
    mask: np.ndarray
    predicted_prob: float


@dataclass
class PerturbationSet:
    masks: np.ndarray  # (n, k) bool
    probs: np.ndarray  # (n,)

    def __len__(self):
        return len(self.probs)

    def __iter__(self):
        for m, p in zip(self.masks, self.probs):
            yield PerturbationSample(m, float(p))

    def __getitem__(self, i):
        return PerturbationSample(self.masks[i], float(self.probs[i]))


def all_masks(k: int) -> np.ndarray:
    """Every on/off mask of ``k`` bits, all-on first."""
    if k > 16:
        raise ValueError("exhaustive enumeration is limited to k <= 16")
    codes = np.arange(2 ** k - 1, -1, -1)
    return ((codes[:, None] >> np.arange(k - 1, -1, -1)) & 1).astype(bool)


def draw_masks(k: int, cfg: ExplainConfig) -> np.ndarray:
    if cfg.exhaustive:
        return all_masks(k)
    rng = np.random.default_rng(cfg.rng_seed)
    masks = rng.random((cfg.n_samples, k)) >= cfg.p_off
    masks[0] = True
    return masks


def _score(clf, images, batch=256):
    predict = getattr(clf, "predict", clf)
    out = [np.asarray(predict(images[i:i + batch]), dtype=np.float64).reshape(-1)
           for i in range(0, len(images), batch)]
    return np.concatenate(out)


def sample_perturbations(image, segments: SuperpixelMap, clf, cfg: ExplainConfig,
                         masks: np.ndarray | None = None) -> PerturbationSet:
    """Score perturbed copies of ``image``; row 0 is always the all-on mask."""
    masks = draw_masks(segments.k, cfg) if masks is None else np.asarray(masks, dtype=bool)
    base = np.asarray(image, dtype=np.float32)
    off_pixels = ~masks[:, segments.labels]  # (n, h, w)
    stack = np.where(off_pixels, np.float32(cfg.replacement_value), base[None])
    probs = _score(clf, stack)
    if probs.shape != (len(masks),):
        raise ValueError("classifier returned the wrong number of probabilities")
    return PerturbationSet(masks, probs)


# ------------------------------------------------------------------ surrogate


@dataclass(frozen=True)
class ProximityKernel:
    width: float = 0.25

    def distance(self, masks) -> np.ndarray:
        """Cosine distance to the all-on mask (1 for an all-off mask)."""
        m = np.atleast_2d(np.asarray(masks, dtype=np.float64))
        k = m.shape[1]
        on = m.sum(axis=1)
        norm = np.sqrt((m * m).sum(axis=1)) * math.sqrt(k)
        with np.errstate(invalid="ignore", divide="ignore"):
            d = 1.0 - np.where(norm > 0, on / norm, 0.0)
        return np.clip(d, 0.0, 1.0)

    def weights(self, masks) -> np.ndarray:
        d = self.distance(masks)
        return np.exp(-(d ** 2) / self.width ** 2)


def kernel_weight(mask, kernel: ProximityKernel = ProximityKernel()) -> float:
    return float(kernel.weights(np.asarray(mask)[None])[0])


@dataclass
class Surrogate:
    intercept: float
    weights: np.ndarray
    residual_norm: float
    ridge_lambda: float = 1.0

    def predict(self, masks) -> np.ndarray:
        return self.intercept + np.asarray(masks, dtype=np.float64) @ self.weights


def weighted_ridge(X, y, sample_weight, lam):
    """Solve ``(A^T W A + lam D) beta = A^T W y`` with ``A = [1, X]`` and
    ``D`` the identity with the intercept entry zeroed.

    Returns ``beta`` (intercept first). Raises SingularSystemError when the
    system is not positive definite.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sw = np.asarray(sample_weight, dtype=np.float64)
    A = np.hstack([np.ones((X.shape[0], 1)), X])
    Aw = A * sw[:, None]
    G = A.T @ Aw
    G[np.arange(1, G.shape[0]), np.arange(1, G.shape[0])] += lam
    rhs = Aw.T @ y
    if lam == 0 and np.linalg.matrix_rank(G) < G.shape[0]:
        raise SingularSystemError("rank-deficient design with ridge_lambda = 0")
    try:
        factor = linalg.cho_factor(G, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    return linalg.cho_solve(factor, rhs)


def fit_surrogate(samples, kernel: ProximityKernel = ProximityKernel(),
                  ridge_lambda: float = 1.0, sample_weight=None) -> Surrogate:
    """Kernel-weighted ridge regression of the black-box score on the mask bits.

    ``samples`` is a PerturbationSet or a sequence of PerturbationSample.
    The intercept is not penalized. Runs in float64 whatever the input.
    """
    if isinstance(samples, PerturbationSet):
        masks, probs = samples.masks, samples.probs
    else:
        samples = list(samples)
        masks = np.array([s.mask for s in samples], dtype=bool)
        probs = np.array([s.predicted_prob for s in samples], dtype=np.float64)
    k = masks.shape[1]
    if ridge_lambda == 0 and len(probs) < k + 1:
        raise SingularSystemError(f"{len(probs)} samples cannot determine {k + 1} coefficients")
    pi = kernel.weights(masks) if sample_weight is None else np.asarray(sample_weight, np.float64)
    beta = weighted_ridge(masks, probs, pi, ridge_lambda)
    resid = probs - (beta[0] + masks.astype(np.float64) @ beta[1:])
    return Surrogate(float(beta[0]), beta[1:], float(np.sqrt(np.sum(pi * resid ** 2))), ridge_lambda)


# ---------------------------------------------------------------- explanation


@dataclass
class Explanation:
    ranked: list[tuple[int, float, int]]  # (superpixel id, weight, sign)
    surrogate: Surrogate
    config: ExplainConfig
    segments: SuperpixelMap
    original_prob: float = float("nan")

    @property
    def k(self) -> int:
        return self.segments.k

    def top_positive(self, n: int) -> list[int]:
        w = self.surrogate.weights
        order = sorted(np.nonzero(w > 0)[0], key=lambda i: (-w[i], i))
        return [int(i) for i in order[:n]]

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "realized_k": self.k,
            "ranked": [{"superpixel_id": i, "weight": w} for i, w, _ in self.ranked],
            "intercept": self.surrogate.intercept,
            "residual_norm": self.surrogate.residual_norm,
            "original_prob": self.original_prob,
        }

    def to_json(self, path=None, extra: dict | None = None) -> str:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        text = json.dumps(doc, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def rank_superpixels(weights, top_k: int) -> list[tuple[int, float, int]]:
    w = np.asarray(weights, dtype=np.float64)
    order = sorted(range(w.size), key=lambda i: (-abs(w[i]), i))[:top_k]
    return [(int(i), float(w[i]), 1 if w[i] >= 0 else -1) for i in order]


def explain(image, clf, cfg: ExplainConfig | None = None,
            segments: SuperpixelMap | None = None) -> Explanation:
    """Segment, perturb, weight and fit; keep the ``top_k_display`` strongest
    superpixels. Positive weights support the positive (PD) class."""
    cfg = cfg or ExplainConfig()
    if segments is None:
        segments = segment_slic(image, cfg.target_k_superpixels, cfg.compactness, cfg.slic_iterations)
    samples = sample_perturbations(image, segments, clf, cfg)
    surrogate = fit_surrogate(samples, ProximityKernel(cfg.kernel_width), cfg.ridge_lambda)
    ranked = rank_superpixels(surrogate.weights, cfg.top_k_display)
    return Explanation(ranked, surrogate, cfg, segments, float(samples.probs[0]))


# ------------------------------------------------------------------ rendering

POSITIVE_TINT = np.array([0, 200, 0], dtype=np.float64)
NEGATIVE_TINT = np.array([220, 0, 0], dtype=np.float64)
BOUNDARY_COLOR = np.array([255, 255, 0], dtype=np.uint8)


def boundaries(segments: SuperpixelMap) -> np.ndarray:
    """Pixels whose right or lower neighbour lies in another segment."""
    lab = segments.labels
    edge = np.zeros(lab.shape, dtype=bool)
    edge[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    edge[:-1, :] |= lab[:-1, :] != lab[1:, :]
    return edge


def render_overlay(image, explanation: Explanation, segments: SuperpixelMap | None = None,
                   alpha: float = 0.5, draw_boundaries: bool = True) -> np.ndarray:
    """RGB uint8 overlay: grayscale base, ranked superpixels tinted green
    (positive weight) or red (negative), 1 px segment boundaries in yellow."""
    segments = segments or explanation.segments
    base = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    rgb = np.repeat(base[..., None], 3, axis=2)
    for sid, _, sign in explanation.ranked:
        if not 0 <= sid < segments.k:
            raise ValueError(f"superpixel id {sid} outside [0, {segments.k})")
        sel = segments.labels == sid
        tint = POSITIVE_TINT if sign > 0 else NEGATIVE_TINT
        rgb[sel] = (1 - alpha) * rgb[sel] + alpha * tint
    out = np.round(rgb).astype(np.uint8)
    if draw_boundaries:
        out[boundaries(segments)] = BOUNDARY_COLOR
    return out
