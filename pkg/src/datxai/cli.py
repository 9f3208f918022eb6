"""Command-line entry point: ``datxai <stage> [options]``.

Exit codes: 0 success, 1 usage error, 2 invalid configuration or missing
inputs, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import golden, pipeline

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

STAGES = ("gen", "prep", "train", "predict", "calibrate", "explain", "report", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with [run], [gen], [prep], [augment], "
                                         "[train], [calibrate] and [lime] sections")
    common.add_argument("--run-dir", default="run", help="directory holding all artifacts (default: run)")
    common.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value; repeatable")
    common.add_argument("--threshold-criterion", choices=("gmean", "fmeasure"))
    common.add_argument("--calibrate-on", choices=("val", "test"))
    common.add_argument("--exhaustive-lime", action="store_true",
                        help="enumerate all 2^k masks instead of sampling (k <= 16)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="datxai", description="Synthetic DaT-scan classification and LIME explanations.")
    sub = parser.add_subparsers(dest="stage", metavar="STAGE")
    sub.required = True
    helps = {
        "gen": "generate labelled phantom volumes",
        "prep": "slice, crop, resize and split",
        "train": "train the compact CNN",
        "predict": "write validation and test probabilities",
        "calibrate": "ROC/PR tables and threshold selection",
        "explain": "LIME explanations and overlays for test images",
        "report": "summarize a finished run",
        "selftest": "check the embedded reference tables",
    }
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        if name == "calibrate":
            p.add_argument("--fixture", choices=("reference",),
                           help="calibrate on the embedded probability fixture instead of predictions")
    return parser


def _config(args) -> pipeline.RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.threshold_criterion:
        overrides.append(f"calibrate.criterion={args.threshold_criterion}")
    if args.calibrate_on:
        overrides.append(f"calibrate.calibrate_on={args.calibrate_on}")
    if args.exhaustive_lime:
        overrides.append("lime.exhaustive=true")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
    cfg = pipeline.RunConfig.load(args.config, args.run_dir, overrides)
    cfg.seed  # validate early
    return cfg


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"datxai: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.stage == "selftest":
            matched, total, problems = golden.selftest()
            print(f"tables: {matched}/{total} matched")
            for p in problems:
                print(f"  {p}")
            return EXIT_OK if matched == total else EXIT_RUNTIME
        cfg = _config(args)
        if args.stage == "gen":
            r = pipeline.stage_gen(cfg)
            print(f"gen: {r['n']} phantoms ({r['PD']} PD, {r['HC']} HC) -> {cfg.run_dir}")
        elif args.stage == "prep":
            r = pipeline.stage_prep(cfg)
            print("prep: " + ", ".join(f"{k} {pd} PD / {hc} HC" for k, (pd, hc) in r["counts"].items()))
        elif args.stage == "train":
            r = pipeline.stage_train(cfg)
            acc = r["final_val_acc"]
            print(f"train: {r['epochs']} epochs, final val acc "
                  f"{'n/a' if acc is None else format(acc, '.3f')} -> {cfg.run_dir / 'model.snet'}")
        elif args.stage == "predict":
            r = pipeline.stage_predict(cfg)
            print(f"predict: {r['val']} val, {r['test']} test probabilities")
        elif args.stage == "calibrate":
            r = pipeline.stage_calibrate(cfg, args.fixture)
            print(f"calibrate: {r['criterion']} on {r['calibrated_on']} -> optimal threshold "
                  f"{r['optimal_threshold']:.4f} (value {r['optimal_value']:.4f})")
        elif args.stage == "explain":
            r = pipeline.stage_explain(cfg)
            print(f"explain: {len(r['explanations'])} explanations -> {cfg.run_dir / 'explanations'}")
        elif args.stage == "report":
            _, text = pipeline.stage_report(cfg)
            print(text)
    except UsageError as exc:
        print(f"datxai: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.ValidationError as exc:
        print(f"datxai: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"datxai: {args.stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
