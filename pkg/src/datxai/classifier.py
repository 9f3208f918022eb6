"""Black-box classifier wrappers consumed by the explainer and the metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .smallnet import TrainedModel


class MissingIdError(KeyError):
    pass


class BlackBoxClassifier(Protocol):
    def predict(self, inputs: Sequence) -> np.ndarray:
        """Probability of the positive (PD) class for each input, in order."""


class ModelClassifier:
    """Wrap a trained network; inputs are 2D images at the network's size."""

    def __init__(self, model: TrainedModel, batch_size: int = 256):
        self.model = model
        self.batch_size = batch_size
        self.input_hw = model.network.input_shape[1:]

    def predict(self, images) -> np.ndarray:
        if len(images) == 0:
            return np.zeros(0)
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 2:
            x = x[None]
        if x.shape[-2:] != self.input_hw:
            raise ValueError(f"classifier expects {self.input_hw} images, got {x.shape[-2:]}")
        p = self.model.predict_proba(x.reshape(-1, 1, *self.input_hw), self.batch_size)
        return np.clip(p.astype(np.float64), 0.0, 1.0)

    __call__ = predict


class FunctionClassifier:
    """Adapter for a plain ``images -> probabilities`` callable."""

    def __init__(self, fn):
        self.fn = fn

    def predict(self, images) -> np.ndarray:
        if len(images) == 0:
            return np.zeros(0)
        p = np.asarray(self.fn(np.asarray(images)), dtype=np.float64).reshape(-1)
        if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
            raise ValueError("classifier returned values outside [0, 1]")
        return p

    __call__ = predict


@dataclass
class PredictionManifest:
    probabilities: dict[str, float]
    source: str = ""

    def __post_init__(self):
        for k, p in self.probabilities.items():
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"probability {p} for {k!r} outside [0, 1]")

    @classmethod
    def from_csv(cls, path, source: str | None = None) -> "PredictionManifest":
        probs: dict[str, float] = {}
        with open(path, newline="") as fh:
            rows = csv.DictReader(ln for ln in fh if not ln.startswith("#"))
            if rows.fieldnames != ["id", "probability"]:
                raise ValueError(f"manifest header must be 'id,probability', got {rows.fieldnames}")
            for row in rows:
                if row["id"] in probs:
                    raise ValueError(f"duplicate id {row['id']!r}")
                probs[row["id"]] = float(row["probability"])
        return cls(probs, source if source is not None else str(path))

    def to_csv(self, path, preamble: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if preamble:
                fh.write(f"# {preamble}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "probability"])
            for k, p in self.probabilities.items():
                w.writerow([k, repr(float(p))])


class ManifestClassifier:
    """Lookup-backed classifier: inputs are ids, outputs recorded probabilities."""

    def __init__(self, manifest: PredictionManifest):
        self.manifest = manifest

    def predict(self, ids) -> np.ndarray:
        probs = self.manifest.probabilities
        missing = [i for i in ids if i not in probs]
        if missing:
            raise MissingIdError(f"no recorded probability for {missing[:3]}")
        return np.array([probs[i] for i in ids], dtype=np.float64)

    __call__ = predict


def manifest_classifier(manifest: PredictionManifest) -> ManifestClassifier:
    return ManifestClassifier(manifest)


def predict_batch(clf, inputs) -> list[float]:
    if len(inputs) == 0:
        return []
    return [float(p) for p in clf.predict(inputs)]
