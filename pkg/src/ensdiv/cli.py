"""Command-line entry point (``ensdiv``).

Every subcommand prints a JSON summary on stdout and exits 0.  On failure
it prints ``{"error": <category>, "message": ...}`` on stderr and exits
with the code mapped from the category (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness, lm
from .corruptions import CorruptionSpec, corrupt
from .exceptions import EnsDivError

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "format": 4,
    "checkpoint": 5,
    "version-mismatch": 5,
    "divergence": 6,
    "non-finite": 6,
    "io": 7,
}
DEFAULT_EXIT = 1


def _config(args):
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if getattr(args, "corrupt", None):
        cfg.corruptions = [CorruptionSpec.parse(c).to_text() for c in args.corrupt]
    return cfg


def cmd_gen_data(args):
    cfg = _config(args)
    cfg.out.mkdir(parents=True, exist_ok=True)
    cfg.save(cfg.out / "config.json")
    sets = harness.generate_data(cfg)
    return {"output_dir": str(cfg.out), "datasets": {k: len(v) for k, v in sorted(sets.items())}}


def cmd_train(args):
    cfg = _config(args)
    clf = harness.train(cfg)
    return {"output_dir": str(cfg.out), "epochs": len(clf.history_), "best_epoch": clf.best_epoch_, "members": len(clf.models_)}


def cmd_eval(args):
    cfg = _config(args)
    if args.checkpoint:
        cfg.checkpoint = args.checkpoint
    if args.ensemble_size:
        cfg.ensemble_size = args.ensemble_size
    sets = None
    if args.corrupt:
        clean = harness.load_sets(cfg, {"clean"})["clean"]
        sets = {"clean": clean}
        for text in cfg.corruptions:
            spec = CorruptionSpec.parse(text)
            sets[spec.kind] = corrupt(clean, spec)
    rows = harness.evaluate(cfg, sets=sets)
    return {"rows": len(rows), "rows_csv": str(cfg.out / "rows.csv")}


def cmd_enumerate(args):
    combos = harness.enumerate_ensembles(args.n, args.k)
    out = {"n": args.n, "k": args.k, "count": len(combos)}
    if args.list:
        out["ensembles"] = [list(c) for c in combos]
    return out


def cmd_attrib_compare(args):
    cfg = _config(args)
    models = harness.load_pool(cfg, args.checkpoint or cfg.checkpoint)
    ds = harness.load_sets(cfg, {args.dataset})
    if args.dataset not in ds:
        raise harness.ConfigError(f"dataset {args.dataset!r} not found under {cfg.out / 'data'}")
    X = ds[args.dataset].images[: args.samples]
    methods = tuple(args.methods.split(",")) if args.methods else harness.ATTRIB_METHODS
    rows, corr, mean_corr = harness.attrib_compare(models, X, methods)
    harness.write_attrib_compare(cfg.out, methods, rows, corr, mean_corr)
    return {"pairs": len(rows), "methods": list(methods), "mean_correlation": mean_corr}


def cmd_lm_sim(args):
    world = lm.reference_world(args.reference) if args.reference else lm.load_world(args.world)
    out = {}
    if args.exact or not args.mc:
        out["exact"] = lm.joint_failure_exact(world, args.a, args.b)
    if args.mc:
        out["mc"] = lm.joint_failure_mc(world, args.a, args.b, args.mc, 0 if args.seed is None else args.seed)
    return out


def cmd_report(args):
    if args.predictions:
        pairs, split = harness.offline_prediction_metrics(args.predictions)
        out_dir = Path(args.out or Path(args.predictions).parent)
        out_dir.mkdir(parents=True, exist_ok=True)
        harness.write_csv(out_dir / "pairwise_metrics.csv", ("a", "b", "disagreement", "q_statistic", "rho"), pairs)
        return {"pairs": len(pairs), "shannon": split}
    if args.rows:
        rows_path = Path(args.rows)
        out_dir = Path(args.out) if args.out else rows_path.parent
    else:
        cfg = _config(args)
        rows_path = cfg.out / "rows.csv"
        out_dir = cfg.out
    if not rows_path.exists():
        raise FileNotFoundError(f"{rows_path} not found; run eval first")
    trends = harness.report(harness.read_csv(rows_path), out_dir)
    return {"trends": len(trends), "trends_csv": str(out_dir / "trends.csv")}


def cmd_run(args):
    cfg = _config(args)
    trends = harness.run_pipeline(cfg)
    return {"output_dir": str(cfg.out), "trends": len(trends)}


def build_parser():
    p = argparse.ArgumentParser(prog="ensdiv", description="Ensemble diversity experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corrupt=False):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        if corrupt:
            sp.add_argument(
                "--corrupt", action="append", metavar="SPEC",
                help="corruption spec such as kind=lines,strength=1.6,seed=3 (repeatable)",
            )

    sp = sub.add_parser("gen-data", help="generate train/val/test and corrupted datasets")
    common(sp, corrupt=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the ensemble members jointly")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate every size-k ensemble of the pool")
    common(sp, corrupt=True)
    sp.add_argument("--checkpoint", choices=("final", "best"))
    sp.add_argument("--ensemble-size", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("enumerate", help="count (or list) size-k ensembles from n models")
    sp.add_argument("n", type=int)
    sp.add_argument("k", type=int)
    sp.add_argument("--list", action="store_true")
    sp.set_defaults(func=cmd_enumerate)

    sp = sub.add_parser("attrib-compare", help="compare attribution methods on the model pool")
    common(sp)
    sp.add_argument("--checkpoint", choices=("final", "best"))
    sp.add_argument("--dataset", default="clean")
    sp.add_argument("--samples", type=int, default=100)
    sp.add_argument("--methods", help="comma-separated subset of saliency,ig-2,ig-10,ig-50")
    sp.set_defaults(func=cmd_attrib_compare)

    sp = sub.add_parser("lm-sim", help="joint failure probability in a design-diversity world")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--world", help="world JSON file")
    src.add_argument("--reference", choices=("anticorrelated", "same-methodology"))
    sp.add_argument("--a", default="A", help="first methodology")
    sp.add_argument("--b", default="B", help="second methodology")
    sp.add_argument("--exact", action="store_true")
    sp.add_argument("--mc", type=int, metavar="TRIALS")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_lm_sim)

    sp = sub.add_parser("report", help="trend summary and plot data from rows.csv")
    common(sp)
    sp.add_argument("--rows", help="rows.csv to summarise (default: <output_dir>/rows.csv)")
    sp.add_argument("--predictions", help="prediction log CSV; writes pairwise metrics instead")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("run", help="gen-data, train, eval and report in one go")
    common(sp, corrupt=True)
    sp.set_defaults(func=cmd_run)
    return p


def _category(exc):
    if isinstance(exc, EnsDivError):
        return exc.category
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError)):
        return "io"
    if isinstance(exc, (KeyError, ValueError)):
        return "config"
    return "internal"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CODES["usage"] if exc.code else 0
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a category
        cat = _category(exc)
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"error": cat, "message": msg}), file=sys.stderr)
        return EXIT_CODES.get(cat, DEFAULT_EXIT)
    print(json.dumps(_jsonable(result), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
