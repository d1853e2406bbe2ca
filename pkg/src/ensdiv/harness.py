"""Experiment orchestration: data, training, evaluation and reporting.

Every output is a pure function of the config (and its seeds).  CSV files
use a fixed column order, ``.17g`` float formatting and no timestamps, so
two runs of the same config produce byte-identical files.

Output directory layout::

    data/<name>.bin                 datasets (named-tensor format)
    checkpoints/member<i>.final.ckpt, member<i>.best.ckpt, optim<i>.final.bin
    train_log.csv
    eval/logits_<dataset>.bin       pool logits (M, n, S) and labels
    eval/predictions_<dataset>.csv  prediction log
    rows.csv                        one row per (ensemble, dataset, consensus)
    trends.csv, trend_<metric>_<dataset>_<consensus>.dat
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import metrics, nn, tensorio
from .attribution import attribution_batch
from .consensus import combine
from .corruptions import REFERENCE_STRENGTHS, CorruptionSpec, corrupt
from .data import gen_shapes, load_dataset, save_dataset, train_val_split
from .estimator import EnsembleClassifier
from .exceptions import CheckpointError, ConfigError, DivergenceError
from .losses import LossConfig
from .nn import ModelSpec
from .optim import OptimConfig

DATASET_ORDER = ("clean", "v2", "lines", "checkerboard", "plasma", "waterdrop")

ROW_COLUMNS = (
    "ensemble",
    "members",
    "dataset",
    "consensus",
    "n_params",
    "acc_ensemble",
    "acc_top",
    "improvement",
    "acc_member_mean",
    "disagreement",
    "attribution_diversity",
    "shannon_h_corr",
    "shannon_h_inco",
    "disagreement_norm",
    "attribution_diversity_norm",
)

TREND_METRICS = ("attribution_diversity", "disagreement", "acc_member_mean")


def default_corruptions(seed=0):
    return [CorruptionSpec(k, s, seed).to_text() for k, s in REFERENCE_STRENGTHS.items()]


@dataclass
class DatasetConfig:
    n_train: int = 4000
    n_test: int = 1000
    n_classes: int = 8
    image_size: int = 32
    channels: int = 3
    val_fraction: float = 0.2


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    members: list = field(
        default_factory=lambda: [{"kind": "mlp", "hidden": [128]} for _ in range(3)]
    )
    loss: dict = field(default_factory=lambda: LossConfig().to_dict())
    optimizer: dict = field(default_factory=lambda: {**OptimConfig().to_dict(), "lr": 2e-3})
    epochs: int = 20
    batch_size: int = 64
    corruptions: list = field(default_factory=default_corruptions)
    consensus: list = field(default_factory=lambda: ["average", "vote"])
    ensemble_size: int = 3
    attribution_samples: int = 200
    checkpoint: str = "final"
    output_dir: str = "runs/demo"

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetConfig(**self.dataset)
        LossConfig(**self.loss)
        OptimConfig(**self.optimizer)
        for c in self.corruptions:
            CorruptionSpec.parse(c)
        if self.checkpoint not in ("final", "best"):
            raise ConfigError("checkpoint must be 'final' or 'best'")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be >= 1")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @property
    def out(self):
        return Path(self.output_dir)


# -- CSV helpers ------------------------------------------------------------


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else format(float(v), ".17g")
    return str(v)


def write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _float(s):
    return float("nan") if s in ("", None) else float(s)


# -- gen-data ---------------------------------------------------------------


def generate_data(config):
    """Write train/val/clean/v2 and corrupted test splits; return them by name."""
    d = config.dataset
    data_dir = config.out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    full = gen_shapes(d.n_train, d.n_classes, d.image_size, config.seed, d.channels, "train")
    train, val = train_val_split(full, d.val_fraction, config.seed)
    clean = gen_shapes(d.n_test, d.n_classes, d.image_size, config.seed + 1, d.channels, "clean")
    v2 = gen_shapes(d.n_test, d.n_classes, d.image_size, config.seed + 2, d.channels, "v2")
    sets = {"train": train, "val": val, "clean": clean, "v2": v2}
    for text in config.corruptions:
        spec = CorruptionSpec.parse(text)
        sets[spec.kind] = corrupt(clean, spec)
    for name, ds in sets.items():
        save_dataset(ds, data_dir / f"{name}.bin")
    return sets


def load_sets(config, names=None):
    data_dir = config.out / "data"
    if not data_dir.exists():
        raise ConfigError(f"no datasets in {data_dir}; run gen-data first")
    out = {}
    for path in sorted(data_dir.glob("*.bin")):
        if names is None or path.stem in names:
            out[path.stem] = load_dataset(path)
    return out


def eval_names(sets):
    ordered = [n for n in DATASET_ORDER if n in sets]
    return ordered + sorted(n for n in sets if n not in ordered and n not in ("train", "val"))


# -- train ------------------------------------------------------------------

TRAIN_LOG_COLUMNS = ("epoch", "lr", "loss", "penalty", "val_ensemble_acc", "val_member_acc", "train_member_acc")


def make_estimator(config):
    opt = config.optimizer
    loss = config.loss
    return EnsembleClassifier(
        members=[dict(m) for m in config.members],
        loss=loss["kind"],
        lam=loss["lam"],
        loss_consensus=loss["consensus"],
        curvature=loss["curvature"],
        consensus="average",
        optimizer=opt["kind"],
        lr=opt["lr"],
        betas=tuple(opt["betas"]),
        eps=opt["eps"],
        momentum=opt["momentum"],
        decay_factor=opt["decay_factor"],
        decay_every=opt["decay_every"],
        epochs=config.epochs,
        batch_size=config.batch_size,
        n_classes=config.dataset.n_classes,
        random_state=config.seed,
    )


def train(config, sets=None):
    """Train all members jointly; write checkpoints and the training log.

    Raises :class:`DivergenceError` (after writing the log) when the loss
    becomes non-finite.
    """
    sets = sets or load_sets(config, {"train", "val"})
    tr, va = sets["train"], sets["val"]
    clf = make_estimator(config).fit(tr.images, tr.labels, va.images, va.labels)
    ck = config.out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    for i, (m, opt) in enumerate(zip(clf.models_, clf.optimizers_)):
        nn.save(m, ck / f"member{i}.final.ckpt", {"member": i, "which": "final"})
        tensorio.write_tensors(ck / f"optim{i}.final.bin", opt.state_tensors(), kind="optimizer",
                               meta={"config": opt.config.to_dict()})
        best = m if clf.best_params_ is None else nn.Model(m.spec, clf.best_params_[i])
        nn.save(best, ck / f"member{i}.best.ckpt", {"member": i, "which": "best", "epoch": clf.best_epoch_})
    rows = [
        {**h, "val_member_acc": json.dumps(h.get("val_member_acc")), "train_member_acc": json.dumps(h["train_member_acc"])}
        for h in clf.history_
    ]
    write_csv(config.out / "train_log.csv", TRAIN_LOG_COLUMNS, rows)
    summary = {
        "epochs_completed": len(clf.history_),
        "diverged_epoch": clf.diverged_epoch_,
        "best_epoch": clf.best_epoch_,
    }
    (config.out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if clf.diverged_epoch_ is not None:
        raise DivergenceError(f"training diverged in epoch {clf.diverged_epoch_}", clf.diverged_epoch_)
    return clf


def load_pool(config, which=None):
    which = which or config.checkpoint
    ck = config.out / "checkpoints"
    paths = sorted(ck.glob(f"member*.{which}.ckpt"), key=lambda p: int(p.name[6:].split(".")[0]))
    if not paths:
        raise CheckpointError(f"no {which} checkpoints found in {ck}")
    return [nn.load(p) for p in paths]


# -- enumerate --------------------------------------------------------------


def enumerate_ensembles(n, k):
    """All size-``k`` index subsets of ``range(n)`` in lexicographic order."""
    if k < 0 or n < 0:
        raise ValueError("n and k must be nonnegative")
    if k > n:
        raise ValueError(f"cannot choose {k} members from a pool of {n}")
    return list(combinations(range(n), k))


# -- evaluate ---------------------------------------------------------------


def _accuracy(pred, labels):
    return float(np.mean(pred == labels))


def evaluate_pool(models, sets, consensus_kinds, k, seed=0, attribution_samples=200):
    """Report rows for every size-``k`` ensemble of ``models`` on every dataset.

    Returns ``(rows, logs)`` where ``logs[name]`` holds the pool logits.
    """
    names = eval_names(sets)
    combos = enumerate_ensembles(len(models), k)
    n_params = [m.n_params for m in models]
    rows, logs = [], {}
    for name in names:
        ds = sets[name]
        logits = np.stack([m.logits(ds.images) for m in models])
        preds = logits.argmax(axis=-1)
        correct = preds == ds.labels[None]
        member_acc = correct.mean(axis=1)
        n_attr = min(attribution_samples, len(ds))
        maps = attribution_batch(models, ds.images[:n_attr]) if k >= 2 and n_attr else None
        logs[name] = {"logits": logits, "labels": ds.labels}
        for combo in combos:
            idx = list(combo)
            sub = logits[idx]
            _, avg_pred = combine(sub, "average", seed)
            if k >= 2:
                dis = metrics.mean_pairwise(metrics.disagreement, correct[idx])
                _, attr = metrics.attribution_diversity(maps[idx])
                h = metrics.shannon_split(preds[idx], avg_pred == ds.labels)
            else:
                dis, attr, h = None, None, {"H_corr": None, "H_inco": None}
            for kind in consensus_kinds:
                _, pred = combine(sub, kind, seed)
                acc = _accuracy(pred, ds.labels)
                top = float(max(member_acc[idx]))
                rows.append(
                    {
                        "ensemble": "-".join(map(str, idx)),
                        "members": len(idx),
                        "dataset": name,
                        "consensus": kind,
                        "n_params": int(sum(n_params[i] for i in idx)),
                        "acc_ensemble": acc,
                        "acc_top": top,
                        "improvement": metrics.improvement(acc, member_acc[idx]),
                        "acc_member_mean": float(np.mean(member_acc[idx])),
                        "disagreement": dis,
                        "attribution_diversity": attr,
                        "shannon_h_corr": h["H_corr"],
                        "shannon_h_inco": h["H_inco"],
                    }
                )
    _normalize_rows(rows)
    return rows, logs


def _normalize_rows(rows):
    groups = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["consensus"]), []).append(r)
    for group in groups.values():
        for key in ("disagreement", "attribution_diversity"):
            vals = [r[key] for r in group]
            if any(v is None for v in vals) or len(vals) < 2 or len(set(vals)) < 2:
                normed = [None if v is None else 0.5 for v in vals]
            else:
                normed = metrics.minmax_normalize(vals)
            for r, v in zip(group, normed):
                r[f"{key}_norm"] = None if v is None else float(v)


PREDICTION_COLUMNS_FIXED = ("sample_id", "label")


def write_prediction_log(path, logits, labels, consensus_kinds, seed=0):
    m = logits.shape[0]
    preds = logits.argmax(axis=-1)
    cons = {k: combine(logits, k, seed)[1] for k in consensus_kinds}
    columns = list(PREDICTION_COLUMNS_FIXED) + [f"member{i}" for i in range(m)] + [f"consensus_{k}" for k in consensus_kinds]
    rows = []
    for j in range(len(labels)):
        r = {"sample_id": j, "label": int(labels[j])}
        r.update({f"member{i}": int(preds[i, j]) for i in range(m)})
        r.update({f"consensus_{k}": int(cons[k][j]) for k in consensus_kinds})
        rows.append(r)
    write_csv(path, columns, rows)


def evaluate(config, models=None, sets=None):
    models = models or load_pool(config)
    sets = sets or load_sets(config)
    sets = {k: v for k, v in sets.items() if k not in ("train", "val")}
    k = min(config.ensemble_size, len(models))
    rows, logs = evaluate_pool(models, sets, config.consensus, k, config.seed, config.attribution_samples)
    ev = config.out / "eval"
    ev.mkdir(parents=True, exist_ok=True)
    for name, log in logs.items():
        tensorio.write_tensors(
            ev / f"logits_{name}.bin",
            {"logits": log["logits"], "labels": log["labels"].astype(np.float64)},
            kind="logits",
            meta={"dataset": name},
        )
        write_prediction_log(ev / f"predictions_{name}.csv", log["logits"], log["labels"], config.consensus, config.seed)
    write_csv(config.out / "rows.csv", ROW_COLUMNS, rows)
    return rows


# -- report -----------------------------------------------------------------

TREND_COLUMNS = ("metric", "dataset", "consensus", "n", "pearson_r", "slope", "intercept")


def trend_table(rows):
    """Pearson r / least-squares fit of improvement against each metric."""
    groups = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["consensus"]), []).append(r)
    out = []
    for (dataset, consensus), group in groups.items():
        y = np.array([_float(r["improvement"]) for r in group])
        for metric in TREND_METRICS:
            x = np.array([_float(r[metric]) for r in group])
            entry = {"metric": metric, "dataset": dataset, "consensus": consensus, "n": len(group)}
            ok = np.isfinite(x) & np.isfinite(y)
            try:
                t = metrics.pearson_and_trend(x[ok], y[ok])
                entry.update(pearson_r=t.r, slope=t.slope, intercept=t.intercept)
            except (ValueError, metrics.UndefinedMetricError):
                entry.update(pearson_r=None, slope=None, intercept=None)
            out.append(entry)
    return out


def report(rows, out_dir):
    """Write rows.csv (if needed), trends.csv and gnuplot data files."""
    if len(rows) < 3:
        raise ValueError(f"need at least 3 rows to fit trends, got {len(rows)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trends = trend_table(rows)
    write_csv(out_dir / "trends.csv", TREND_COLUMNS, trends)
    groups = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["consensus"]), []).append(r)
    for (dataset, consensus), group in groups.items():
        for metric in TREND_METRICS:
            lines = [f"# {metric} improvement acc_ensemble n_params ensemble"]
            for r in group:
                lines.append(
                    " ".join(_fmt(v) or "nan" for v in (r[metric], r["improvement"], r["acc_ensemble"], r["n_params"], r["ensemble"]))
                )
            (out_dir / f"trend_{metric}_{dataset}_{consensus}.dat").write_text("\n".join(lines) + "\n")
    return trends


def rows_from_csv(path):
    return read_csv(path)


def offline_prediction_metrics(prediction_csv):
    """Pairwise and Shannon metrics recomputed from a prediction log CSV."""
    rows = read_csv(prediction_csv)
    if not rows:
        raise ValueError("empty prediction log")
    members = [c for c in rows[0] if c.startswith("member")]
    labels = np.array([int(r["label"]) for r in rows])
    preds = np.array([[int(r[m]) for r in rows] for m in members])
    correct = preds == labels[None]
    out = []
    for i, j in combinations(range(len(members)), 2):
        entry = {"a": members[i], "b": members[j], "disagreement": metrics.disagreement(correct[i], correct[j])}
        for name, fn in (("q_statistic", metrics.q_statistic), ("rho", metrics.rho)):
            try:
                entry[name] = fn(correct[i], correct[j])
            except metrics.UndefinedMetricError:
                entry[name] = None
        out.append(entry)
    split = {}
    if "consensus_average" in rows[0] and len(members) >= 2:
        ens = np.array([int(r["consensus_average"]) for r in rows])
        split = metrics.shannon_split(preds, ens == labels)
    return out, split


# -- attribution method comparison ------------------------------------------

ATTRIB_METHODS = ("saliency", "ig-2", "ig-10", "ig-50")


def _method_maps(models, X, method):
    if method == "saliency":
        return attribution_batch(models, X, "saliency")
    if method.startswith("ig-"):
        return attribution_batch(models, X, "ig", steps=int(method[3:]))
    raise ConfigError(f"unknown attribution method {method!r}")


def attrib_compare(models, X, methods=ATTRIB_METHODS):
    """Normalised pairwise attribution diversity per method and their correlations.

    Returns ``(pair_rows, corr, mean_corr)``; ``corr`` is the Pearson
    correlation matrix between methods over model pairs and ``mean_corr``
    the mean of its off-diagonal entries (1.0 for a single method).
    """
    if len(models) < 2:
        raise ConfigError("attribution comparison needs at least 2 models")
    pairs = list(combinations(range(len(models)), 2))
    raw = {}
    for method in methods:
        maps = _method_maps(models, X, method)
        raw[method] = np.array([metrics.attribution_diversity(maps[[i, j]])[1] for i, j in pairs])
    normed = {}
    for method, vals in raw.items():
        normed[method] = np.zeros_like(vals) if np.all(vals == 0) else metrics.minmax_normalize(vals)
    q = len(methods)
    corr = np.eye(q)
    for a in range(q):
        for b in range(a + 1, q):
            va, vb = normed[methods[a]], normed[methods[b]]
            if np.std(va) == 0 or np.std(vb) == 0:
                c = float("nan")
            else:
                c = metrics.pearson_and_trend(va, vb).r
            corr[a, b] = corr[b, a] = c
    off = corr[~np.eye(q, dtype=bool)]
    mean_corr = 1.0 if q == 1 else float(np.mean(off))
    rows = []
    for p, (i, j) in enumerate(pairs):
        r = {"a": i, "b": j}
        for method in methods:
            r[method] = raw[method][p]
            r[f"{method}_norm"] = normed[method][p]
        rows.append(r)
    return rows, corr, mean_corr


def write_attrib_compare(out_dir, methods, rows, corr, mean_corr):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["a", "b"] + [c for m in methods for c in (m, f"{m}_norm")]
    write_csv(out_dir / "attrib_pairs.csv", cols, rows)
    crow = [{"method": m, **{n: corr[i, j] for j, n in enumerate(methods)}} for i, m in enumerate(methods)]
    write_csv(out_dir / "attrib_correlation.csv", ["method", *methods], crow)
    (out_dir / "attrib_summary.json").write_text(json.dumps({"mean_correlation": mean_corr}, sort_keys=True) + "\n")


# -- full pipeline ----------------------------------------------------------


def run_pipeline(config):
    """gen-data, train, eval and report in one go; returns the trend rows."""
    config.out.mkdir(parents=True, exist_ok=True)
    config.save(config.out / "config.json")
    sets = generate_data(config)
    clf = train(config, sets)
    models = clf.models_ if config.checkpoint == "final" else load_pool(config)
    rows = evaluate(config, models, {k: v for k, v in sets.items() if k not in ("train", "val")})
    return report(rows, config.out)
