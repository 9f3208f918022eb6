"""End-to-end stages over a run directory.

Every stage reads the files written by the stages before it and writes its
own. All CSV outputs start with a ``# config_hash=... seed=...`` comment line
and every JSON output carries a ``provenance`` block, so any artifact can be
traced back to the settings that produced it.
"""

from __future__ import annotations

import configparser
import copy
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import PngImagePlugin
from PIL import Image as PILImage

from . import golden, imaging, lime, metrics, phantomgen, smallnet
from .classifier import ModelClassifier, PredictionManifest

log = logging.getLogger(__name__)


class ValidationError(ValueError):
    """Bad configuration or missing prerequisite artifacts."""


DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0"},
    "gen": {"n_pd": "430", "n_hc": "212", "noise_sigma": "0.03", "write_volumes": "true"},
    "prep": {"slice": "41", "size": "64", "crop_threshold": "0.02", "ratios": "0.8,0.1,0.1"},
    "augment": {"max_shift_frac": "0.1", "hflip_prob": "0.5",
                "brightness_low": "0.8", "brightness_high": "1.2"},
    "train": {"epochs": "300", "learning_rate": "0.001", "beta1": "0.9", "beta2": "0.999",
              "epsilon": "1e-8", "batch_size_train": "32", "batch_size_val": "16",
              "steps_train": "32", "steps_val": "4", "conv_channels": "8,16,16",
              "dense_units": "32", "dropout": "0.5"},
    "calibrate": {"criterion": "g_mean", "calibrate_on": "val"},
    "lime": {"target_k": "40", "n_samples": "1000", "p_off": "0.5", "ridge_lambda": "1.0",
             "top_k_display": "5", "replacement_value": "0.0", "kernel_width": "0.25",
             "compactness": "10.0", "exhaustive": "false", "n_explain": "3"},
}


@dataclass
class RunConfig:
    run_dir: Path
    values: dict[str, dict[str, str]]

    @classmethod
    def load(cls, path=None, run_dir="run", overrides=()) -> "RunConfig":
        values = copy.deepcopy(DEFAULTS)
        if path is not None:
            parser = configparser.ConfigParser()
            if not Path(path).is_file():
                raise ValidationError(f"config file not found: {path}")
            parser.read(path)
            for section in parser.sections():
                if section not in values:
                    raise ValidationError(f"unknown config section [{section}]")
                for key, val in parser.items(section):
                    if key not in values[section]:
                        raise ValidationError(f"unknown config key {section}.{key}")
                    values[section][key] = val
        for item in overrides:
            dotted, _, val = item.partition("=")
            section, _, key = dotted.partition(".")
            if section not in values or key not in values[section]:
                raise ValidationError(f"unknown setting {dotted!r}")
            values[section][key] = val
        return cls(Path(run_dir), values)

    def get(self, section, key, kind=str):
        raw = self.values[section][key]
        try:
            if kind is bool:
                low = raw.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                return low in ("true", "1", "yes")
            if kind == "floats":
                return tuple(float(v) for v in raw.split(","))
            if kind == "ints":
                return tuple(int(v) for v in raw.split(","))
            return kind(raw)
        except ValueError as exc:
            raise ValidationError(f"bad value for {section}.{key}: {raw!r}") from exc

    @property
    def seed(self) -> int:
        return self.get("run", "seed", int)

    def config_hash(self) -> str:
        blob = json.dumps(self.values, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed}

    def preamble(self) -> str:
        return f"config_hash={self.config_hash()} seed={self.seed}"

    def optimizer(self) -> smallnet.OptimizerConfig:
        g = lambda k, t=float: self.get("train", k, t)  # noqa: E731
        try:
            return smallnet.OptimizerConfig(
                learning_rate=g("learning_rate"), beta1=g("beta1"), beta2=g("beta2"),
                epsilon=g("epsilon"), epochs=g("epochs", int),
                batch_size_train=g("batch_size_train", int), batch_size_val=g("batch_size_val", int),
                steps_train=g("steps_train", int), steps_val=g("steps_val", int))
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc

    def augment_spec(self) -> imaging.AugmentSpec:
        g = lambda k: self.get("augment", k, float)  # noqa: E731
        try:
            return imaging.AugmentSpec(g("max_shift_frac"), g("hflip_prob"),
                                       (g("brightness_low"), g("brightness_high")), self.seed)
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc

    def explain_config(self) -> lime.ExplainConfig:
        g = lambda k, t=float: self.get("lime", k, t)  # noqa: E731
        try:
            return lime.ExplainConfig(
                target_k_superpixels=g("target_k", int), n_samples=g("n_samples", int),
                p_off=g("p_off"), ridge_lambda=g("ridge_lambda"), top_k_display=g("top_k_display", int),
                replacement_value=g("replacement_value"), kernel_width=g("kernel_width"),
                compactness=g("compactness"), exhaustive=g("exhaustive", bool), rng_seed=self.seed)
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc


def _dump_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_json(path) -> dict:
    if not Path(path).is_file():
        raise ValidationError(f"missing artifact {path}; run the earlier stage first")
    return json.loads(Path(path).read_text())


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"missing artifact {path}; run the earlier stage first")
    return path


# ------------------------------------------------------------------- stages


def prepare_images(entries, size=64, z_index=imaging.DEFAULT_SLICE,
                   threshold=imaging.DEFAULT_CROP_THRESHOLD, volumes=None):
    """Slice, crop, resize and normalize each phantom; the ROI mask gets the
    same geometric treatment. Returns ``(images, masks)`` keyed by id."""
    images, masks = {}, {}
    for e in entries:
        vol = volumes[e.volume_id] if volumes is not None else e.volume()
        roi = e.roi_mask()
        img, m = imaging.preprocess_slice(
            imaging.extract_slice(vol, z_index), size, threshold,
            mask=imaging.extract_slice(roi.astype(np.float32), z_index))
        images[e.volume_id] = img
        masks[e.volume_id] = m
    return images, masks


def stage_gen(cfg: RunConfig) -> dict:
    run = cfg.run_dir
    run.mkdir(parents=True, exist_ok=True)
    n_pd, n_hc = cfg.get("gen", "n_pd", int), cfg.get("gen", "n_hc", int)
    if n_pd < 0 or n_hc < 0:
        raise ValidationError("gen.n_pd and gen.n_hc must be non-negative")
    dataset = phantomgen.generate_dataset(n_pd, n_hc, cfg.seed, cfg.get("gen", "noise_sigma", float))
    paths = {}
    write = cfg.get("gen", "write_volumes", bool)
    if write:
        (run / "volumes").mkdir(exist_ok=True)
    for e in dataset:
        rel = f"volumes/{e.volume_id}.svol"
        paths[e.volume_id] = rel if write else ""
        if write:
            imaging.write_volume(run / rel, e.volume())
    phantomgen.write_manifest(run / "manifest.csv", dataset, paths, cfg.preamble())
    _dump_json(run / "phantoms.json", {
        "provenance": cfg.provenance(),
        "entries": [{"volume_id": e.volume_id, "spec": e.spec.to_dict()} for e in dataset],
    })
    log.info("generated %d phantoms (%d PD, %d HC)", len(dataset), n_pd, n_hc)
    return {"n": len(dataset), **dataset.class_counts()}


def _load_entries(run: Path) -> list[phantomgen.PhantomEntry]:
    doc = _load_json(run / "phantoms.json")
    return [phantomgen.PhantomEntry(d["volume_id"], phantomgen.PhantomSpec.from_dict(d["spec"]))
            for d in doc["entries"]]


def stage_prep(cfg: RunConfig) -> dict:
    run = cfg.run_dir
    entries = _load_entries(run)
    rows = {r["volume_id"]: r for r in phantomgen.read_manifest(_require(run / "manifest.csv"))}
    volumes = {}
    for e in entries:
        rel = rows[e.volume_id]["path"]
        volumes[e.volume_id] = imaging.read_volume(run / rel) if rel else e.volume()
    images, masks = prepare_images(entries, cfg.get("prep", "size", int), cfg.get("prep", "slice", int),
                                   cfg.get("prep", "crop_threshold", float), volumes)
    ids = [e.volume_id for e in entries]
    np.savez(run / "images.npz", ids=np.array(ids), images=np.stack([images[i] for i in ids]),
             masks=np.stack([masks[i] for i in ids]), provenance=np.array(json.dumps(cfg.provenance())))
    try:
        split = imaging.split_dataset([(e.volume_id, e.label) for e in entries],
                                      cfg.get("prep", "ratios", "floats"), cfg.seed)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    with open(run / "split.csv", "w", newline="") as fh:
        fh.write(f"# {cfg.preamble()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["volume_id", "label", "partition"])
        for part, members in (("train", split.train), ("val", split.validation), ("test", split.test)):
            for i in members:
                w.writerow([i, split.labels[i], part])
    return {"counts": split.class_counts()}


def load_images(run: Path):
    with np.load(_require(run / "images.npz")) as z:
        ids = [str(i) for i in z["ids"]]
        return dict(zip(ids, z["images"])), dict(zip(ids, z["masks"]))


def load_split(run: Path) -> imaging.DatasetSplit:
    parts = {"train": [], "val": [], "test": []}
    labels = {}
    with open(_require(run / "split.csv"), newline="") as fh:
        for r in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
            parts[r["partition"]].append(r["volume_id"])
            labels[r["volume_id"]] = int(r["label"])
    return imaging.DatasetSplit(parts["train"], parts["val"], parts["test"], labels)


def stage_train(cfg: RunConfig) -> dict:
    run = cfg.run_dir
    images, _ = load_images(run)
    split = load_split(run)
    size = next(iter(images.values())).shape[0]
    net = smallnet.compact_net(size, cfg.get("train", "conv_channels", "ints"),
                               cfg.get("train", "dense_units", int), cfg.get("train", "dropout", float),
                               seed=cfg.seed)

    def progress(epoch, hist):
        log.info("epoch %d: loss %.4f acc %.3f val_loss %.4f val_acc %.3f", epoch,
                 hist.train_loss[-1], hist.train_acc[-1], hist.val_loss[-1], hist.val_acc[-1])

    try:
        model, history = smallnet.train(net, split, images, cfg.augment_spec(), cfg.optimizer(),
                                        seed=cfg.seed, progress=progress)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    smallnet.save_checkpoint(run / "model.snet", model, extra=cfg.provenance())
    history.to_csv(run / "history.csv", cfg.preamble())
    return {"epochs": len(history), "final_val_acc": history.val_acc[-1] if len(history) else None}


def stage_predict(cfg: RunConfig) -> dict:
    run = cfg.run_dir
    model = smallnet.load_checkpoint(_require(run / "model.snet"))
    clf = ModelClassifier(model)
    images, _ = load_images(run)
    split = load_split(run)
    out = {}
    for part in ("val", "test"):
        ids = split.partition(part)
        probs = clf.predict([images[i] for i in ids]) if ids else []
        PredictionManifest(dict(zip(ids, map(float, probs))), f"model.snet/{part}") \
            .to_csv(run / f"predictions_{part}.csv", cfg.preamble())
        out[part] = len(ids)
    return out


def _labels_csv(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        return {r["id"]: int(r["label"]) for r in csv.DictReader(fh)}


def stage_calibrate(cfg: RunConfig, fixture: str | None = None) -> dict:
    run = cfg.run_dir
    run.mkdir(parents=True, exist_ok=True)
    criterion = metrics.CRITERIA.get(cfg.get("calibrate", "criterion"))
    if criterion is None:
        raise ValidationError(f"unknown threshold criterion {cfg.get('calibrate', 'criterion')!r}")
    source = cfg.get("calibrate", "calibrate_on")
    if fixture is not None:
        if fixture != "reference":
            raise ValidationError(f"unknown fixture {fixture!r}")
        _, cal_p, cal_y = golden.probability_fixture()
        eval_p, eval_y = cal_p, cal_y
        prefix, source = "fixture_", "fixture:reference"
    else:
        if source not in ("val", "test"):
            raise ValidationError("calibrate_on must be 'val' or 'test'")
        split = load_split(run)

        def load(part):
            man = PredictionManifest.from_csv(_require(run / f"predictions_{part}.csv"))
            ids = list(man.probabilities)
            return [man.probabilities[i] for i in ids], [split.labels[i] for i in ids]

        cal_p, cal_y = load(source)
        eval_p, eval_y = load("test")
        prefix = ""
    try:
        roc = metrics.roc_table(cal_p, cal_y)
        pr = metrics.pr_table(cal_p, cal_y)
    except ValueError as exc:
        raise ValidationError(f"cannot calibrate on {source}: {exc}") from exc
    metrics.write_roc_csv(run / f"{prefix}roc.csv", roc, cfg.preamble())
    metrics.write_pr_csv(run / f"{prefix}pr.csv", pr, cfg.preamble())
    chosen = metrics.select_threshold(roc if criterion == "g_mean" else pr, criterion)
    before = metrics.summary_metrics(metrics.confusion_at_threshold(eval_p, eval_y, 0.5))
    after = metrics.summary_metrics(metrics.confusion_at_threshold(eval_p, eval_y, chosen.optimal_threshold))
    doc = {
        "provenance": cfg.provenance(),
        "calibrated_on": source,
        "criterion": criterion,
        "default_threshold": 0.5,
        "optimal_threshold": chosen.optimal_threshold,
        "optimal_value": chosen.optimal_value,
        "auc_calibration_set": metrics.auc_trapezoid(roc),
        "auc_test": metrics.roc_auc(eval_p, eval_y) if len(set(eval_y)) == 2 else None,
        "test_before": before.as_dict(),
        "test_after": after.as_dict(),
        "test_confusion_before": asdict(metrics.confusion_at_threshold(eval_p, eval_y, 0.5)),
        "test_confusion_after": asdict(metrics.confusion_at_threshold(eval_p, eval_y, chosen.optimal_threshold)),
    }
    _dump_json(run / f"{prefix}calibration.json", doc)
    return doc


def save_overlay_png(path, rgb, provenance: dict) -> None:
    info = PngImagePlugin.PngInfo()
    info.add_text("provenance", json.dumps(provenance, sort_keys=True))
    PILImage.fromarray(rgb).save(path, format="PNG", pnginfo=info)


def localization_hit(explanation: lime.Explanation, roi: np.ndarray, top: int = 3) -> bool:
    """True when any of the ``top`` strongest positive superpixels touches ``roi``."""
    return any(bool(roi[explanation.segments.labels == s].any())
               for s in explanation.top_positive(top))


def stage_explain(cfg: RunConfig) -> dict:
    run = cfg.run_dir
    model = smallnet.load_checkpoint(_require(run / "model.snet"))
    clf = ModelClassifier(model)
    images, masks = load_images(run)
    split = load_split(run)
    ecfg = cfg.explain_config()
    if ecfg.exhaustive and ecfg.target_k_superpixels > 16:
        raise ValidationError("exhaustive LIME needs lime.target_k <= 16")
    n = cfg.get("lime", "n_explain", int)
    chosen = [i for i in split.test if split.labels[i] == 1][:n] + \
             [i for i in split.test if split.labels[i] == 0][:n]
    out_dir = run / "explanations"
    out_dir.mkdir(exist_ok=True)
    items = []
    for vid in chosen:
        ex = lime.explain(images[vid], clf, ecfg)
        hit = localization_hit(ex, masks[vid])
        ex.to_json(out_dir / f"{vid}.json", {"provenance": cfg.provenance(), "volume_id": vid,
                                             "label": split.labels[vid], "roi_hit_top3": hit})
        save_overlay_png(out_dir / f"{vid}.png", lime.render_overlay(images[vid], ex),
                         cfg.provenance())
        items.append({"volume_id": vid, "label": split.labels[vid], "prob": ex.original_prob,
                      "roi_hit_top3": hit, "overlay": f"explanations/{vid}.png"})
    doc = {"provenance": cfg.provenance(), "explanations": items}
    _dump_json(run / "explain_summary.json", doc)
    return doc


def stage_report(cfg: RunConfig) -> tuple[dict, str]:
    run = cfg.run_dir
    cal = _load_json(run / "calibration.json")
    expl = _load_json(run / "explain_summary.json") if (run / "explain_summary.json").exists() else None
    with open(_require(run / "history.csv"), newline="") as fh:
        hist = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    split = load_split(run)
    doc = {
        "provenance": cfg.provenance(),
        "split_counts": split.class_counts(),
        "history_last": hist[-1] if hist else None,
        "epochs": len(hist),
        "calibration": {k: cal[k] for k in ("calibrated_on", "criterion", "optimal_threshold",
                                             "optimal_value", "auc_test")},
        "test_metrics_default": cal["test_before"],
        "test_metrics_optimal": cal["test_after"],
        "explanations": expl["explanations"] if expl else [],
    }
    _dump_json(run / "report.json", doc)
    b, a = cal["test_before"], cal["test_after"]
    lines = [
        f"run summary ({cfg.preamble()})",
        f"epochs trained: {len(hist)}",
        f"test AUC: {cal['auc_test']:.4f}" if cal["auc_test"] is not None else "test AUC: n/a",
        f"threshold 0.5   -> acc {b['accuracy']:.3f} sens {b['sensitivity']:.3f} "
        f"spec {b['specificity']:.3f} prec {b['precision']:.3f} kappa {b['cohen_kappa']:.3f}",
        f"threshold {cal['optimal_threshold']:.4g} ({cal['criterion']} on {cal['calibrated_on']}) -> "
        f"acc {a['accuracy']:.3f} sens {a['sensitivity']:.3f} spec {a['specificity']:.3f} "
        f"prec {a['precision']:.3f} kappa {a['cohen_kappa']:.3f}",
    ]
    if expl:
        hits = sum(e["roi_hit_top3"] for e in expl["explanations"] if e["label"] == 1)
        n_pd = sum(e["label"] == 1 for e in expl["explanations"])
        lines.append(f"LIME: {hits}/{n_pd} PD explanations put a top-3 positive superpixel on the striatum")
        lines += [f"  overlay {e['overlay']}" for e in expl["explanations"]]
    text = "\n".join(lines)
    (run / "report.txt").write_text(text + "\n")
    return doc, text
