"""Experiment harness: configuration, the experiment protocols, and the run
directory with report.json, CSV series and unlearning traces."""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml

from .analysis import fit_distance_adversary, saliency, saliency_similarity, tsne_embed
from .data import (
    CENSUS_QUASI_IDENTIFIERS,
    ImageDataset,
    PropertySpec,
    TabularDataset,
    area_resize,
    censor_attribute,
    desk_mnist,
    joint_ratio,
    load_csv,
    load_idx,
    mondrian_anonymize,
    synth_census,
    synthesize_marginals,
    transform_gamma,
    transform_gaussian_noise,
    transform_mirror,
    transform_snp,
)
from .errors import ConfigError, ExperimentFailed, RejectedInput
from .meta import (
    attack_accuracy,
    build_flat_baseline,
    build_meta,
    infer,
    infer_batch,
    infer_flat_baseline,
    train_flat_baseline,
    train_meta,
)
from .nn import Architecture, TrainConfig, evaluate, save_model, unflatten
from .seeding import derive_seed
from .shadows import ShadowCollection, ShadowJob, load_collection, train_shadows
from .unlearning import (
    IterativeConfig,
    UnlearnConfig,
    adv_utility,
    iterative_unlearn,
    multi_property_unlearn,
    unlearn_params,
)

log = logging.getLogger(__name__)

EXPERIMENTS = ("attack_baseline", "unlearn_single", "unlearn_iterative", "unlearn_multi",
               "preprocess_defense", "tsne", "saliency")
SOURCES = ("desk_mnist", "idx", "synth_census", "csv")
DEFENSE_KINDS = ("gaussian", "snp", "gamma", "mirror", "censor", "mondrian", "marginal")

DEFAULTS = {
    "name": "",
    "dataset": {"source": "desk_mnist", "seed": 0, "test_size": 1000, "rows": 40000, "test_rows": 4000,
                "ratio": [2, 1], "resize": None, "images": None, "labels": None, "path": None,
                "schema": None, "label": None},
    "properties": [],
    "architecture": {"widths": [16, 10], "activations": ["relu", "softmax"]},
    "training": {"learning_rate": 0.1, "batch_size": 32, "epochs": 6, "optimizer": "sgd_momentum",
                 "momentum": 0.9},
    "aux_size": 3000,
    "counts": {"shadows": 200, "targets": 40},
    "meta": {"pooling": "mean", "row_features": "quadratic", "learning_rate": 1e-3, "batch_size": 16,
             "epochs": 150, "split": 0.8, "flat_baseline": False},
    "unlearn": {"initial_lr": 1.0, "tolerance": 0.01, "max_rounds": 200, "min_lr": None,
                "jitter_scale": 1e-3, "loss": "mse"},
    "iterative": {"unlearn_adversaries": 6, "test_adversaries": 2},
    "multi": {"categories": [], "orders": "all"},
    "defenses": [],
    "adaptive": False,
    "tsne": {"perplexity": 30.0, "iterations": 1000, "views": ["all"]},
    "saliency": {"metas": 2},
    "shadows_path": None,
    "workers": 1,
}


# ---------------------------------------------------------------------------
# box plots

@dataclass
class BoxplotStats:
    q1: float
    median: float
    q3: float
    mean: float
    whisker_low: float
    whisker_high: float
    outliers: list = field(default_factory=list)


def boxplot_stats(values) -> BoxplotStats:
    """Quartiles by inclusive linear interpolation; whiskers at the farthest
    points inside the 1.5 IQR fences, everything beyond is an outlier."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise RejectedInput("boxplot of an empty series")
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = v[(v < lo_fence) | (v > hi_fence)]
    return BoxplotStats(float(q1), float(med), float(q3), float(v.mean()), float(inside.min()),
                        float(inside.max()), [float(x) for x in outliers])


# ---------------------------------------------------------------------------
# configuration

def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    raw: dict
    base_dir: Path = Path(".")

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def properties(self) -> list[PropertySpec]:
        return [PropertySpec.from_dict(p) for p in self.raw["properties"]]

    def train_config(self) -> TrainConfig:
        t = self.raw["training"]
        return TrainConfig(float(t["learning_rate"]), int(t["batch_size"]), int(t["epochs"]), 0,
                           t["optimizer"], float(t["momentum"]))

    def meta_train_config(self) -> TrainConfig:
        m = self.raw["meta"]
        return TrainConfig(float(m["learning_rate"]), int(m["batch_size"]), int(m["epochs"]),
                           derive_seed(self.seed, 7), "sgd_momentum", 0.9)

    def unlearn_config(self) -> UnlearnConfig:
        u = self.raw["unlearn"]
        return UnlearnConfig(float(u["initial_lr"]), float(u["tolerance"]), int(u["max_rounds"]),
                             None if u["min_lr"] is None else float(u["min_lr"]), float(u["jitter_scale"]),
                             u["loss"], derive_seed(self.seed, 9))

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "seed": self.seed, **self.raw}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _positive_int(errors, value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        errors.append(f"{name}: expected an integer >= {minimum}, got {value!r}")


def parse_config(data: Mapping, base_dir=".") -> ExperimentConfig:
    """Merge ``data`` over the defaults and check it; raises ConfigError listing every problem."""
    errors = []
    if not isinstance(data, Mapping):
        raise ConfigError(["config: expected a mapping at the top level"])
    experiment = data.get("experiment")
    if experiment not in EXPERIMENTS:
        errors.append(f"experiment: expected one of {list(EXPERIMENTS)}, got {experiment!r}")
    seed = data.get("seed")
    if seed is None:
        errors.append("seed: required")
    else:
        _positive_int(errors, seed, "seed", minimum=0)
    unknown = set(data) - set(DEFAULTS) - {"experiment", "seed"}
    for k in sorted(unknown):
        errors.append(f"{k}: unknown field")
    raw = _merge(DEFAULTS, {k: v for k, v in data.items() if k in DEFAULTS})
    base = Path(base_dir)

    ds = raw["dataset"]
    if ds["source"] not in SOURCES:
        errors.append(f"dataset.source: expected one of {list(SOURCES)}, got {ds['source']!r}")
    required = {"idx": ("images", "labels"), "csv": ("path", "schema", "label")}.get(ds["source"], ())
    for key in required:
        if ds.get(key) in (None, ""):
            errors.append(f"dataset.{key}: required for source {ds['source']!r}")
        elif key in ("images", "labels", "path"):
            p = Path(ds[key]) if Path(ds[key]).is_absolute() else base / ds[key]
            if not p.exists():
                errors.append(f"dataset.{key}: file {str(p)!r} does not exist")
    for key in ("test_size", "rows", "test_rows"):
        _positive_int(errors, ds[key], f"dataset.{key}")

    counts = raw["counts"]
    _positive_int(errors, counts.get("shadows"), "counts.shadows")
    _positive_int(errors, counts.get("targets"), "counts.targets")
    _positive_int(errors, raw["aux_size"], "aux_size")
    _positive_int(errors, raw["workers"], "workers")

    arch = raw["architecture"]
    if len(arch["widths"]) != len(arch["activations"]) or not arch["widths"]:
        errors.append("architecture: widths and activations must be non-empty and equally long")

    try:
        TrainConfig(**{**raw["training"], "seed": 0})
    except (TypeError, ValueError) as exc:
        errors.append(f"training: {exc}")
    m = raw["meta"]
    if m["pooling"] not in ("sum", "mean"):
        errors.append(f"meta.pooling: expected 'sum' or 'mean', got {m['pooling']!r}")
    if not 0 < float(m["split"]) <= 1:
        errors.append("meta.split: expected a fraction in (0, 1]")
    try:
        UnlearnConfig(**raw["unlearn"])
    except (TypeError, ValueError) as exc:
        errors.append(f"unlearn: {exc}")

    if experiment == "unlearn_multi":
        cats = raw["multi"]["categories"]
        if len(cats) < 2:
            errors.append("multi.categories: need at least two property categories")
        for i, c in enumerate(cats):
            try:
                specs = [PropertySpec.from_dict(p) for p in c.get("properties", [])]
            except (TypeError, ValueError) as exc:
                errors.append(f"multi.categories[{i}]: {exc}")
                continue
            if len(specs) < 2 or any(s.kind != "class_ratio" for s in specs):
                errors.append(f"multi.categories[{i}]: need two or more class_ratio properties")
    else:
        props = raw["properties"]
        if len(props) < 2:
            errors.append("properties: need at least two property specs")
        for i, p in enumerate(props):
            try:
                PropertySpec.from_dict(p)
            except (TypeError, ValueError) as exc:
                errors.append(f"properties[{i}]: {exc}")

    if experiment == "unlearn_iterative":
        it = raw["iterative"]
        _positive_int(errors, it["unlearn_adversaries"], "iterative.unlearn_adversaries")
        _positive_int(errors, it["test_adversaries"], "iterative.test_adversaries")
    if experiment == "preprocess_defense":
        if not raw["defenses"]:
            errors.append("defenses: need at least one defense")
        for i, d in enumerate(raw["defenses"]):
            if not isinstance(d, Mapping) or d.get("kind") not in DEFENSE_KINDS:
                errors.append(f"defenses[{i}].kind: expected one of {list(DEFENSE_KINDS)}")
    if experiment == "tsne" and not float(raw["tsne"]["perplexity"]) > 0:
        errors.append("tsne.perplexity: must be > 0")
    if experiment == "saliency":
        _positive_int(errors, raw["saliency"]["metas"], "saliency.metas", minimum=2)
    if raw["shadows_path"] is not None and not (base / raw["shadows_path"]).exists():
        errors.append(f"shadows_path: {raw['shadows_path']!r} does not exist")

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(experiment, int(seed), raw, base)


def validate_config(path) -> ExperimentConfig:
    """Load a YAML experiment file and validate it (ConfigError on failure)."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config: file {str(path)!r} not found"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"config: not valid YAML ({exc})"]) from None
    return parse_config(data or {}, path.parent)


# ---------------------------------------------------------------------------
# data and defenses

@dataclass
class LoadedData:
    pool: object  # ImageDataset or TabularDataset
    test: object  # LabeledDataset

    @property
    def is_image(self) -> bool:
        return isinstance(self.pool, ImageDataset)


def load_data(cfg: ExperimentConfig) -> LoadedData:
    ds = cfg["dataset"]
    src = ds["source"]
    if src in ("desk_mnist", "idx"):
        img = desk_mnist(ds["seed"]) if src == "desk_mnist" else load_idx(cfg.path(ds["images"]), cfg.path(ds["labels"]))
        if ds["resize"]:
            img = area_resize(img, *ds["resize"])
        n_test = ds["test_size"]
        if n_test >= len(img):
            raise RejectedInput(f"dataset.test_size {n_test} leaves no training pool")
        return LoadedData(img.subset(np.arange(n_test, len(img))), img.subset(np.arange(n_test)).to_labeled())
    if src == "synth_census":
        ratio = tuple(ds["ratio"])
        pool = synth_census(ds["rows"], ratio, derive_seed(ds["seed"], 0))
        test = synth_census(ds["test_rows"], ratio, derive_seed(ds["seed"], 1))
        return LoadedData(pool, test.to_labeled())
    table = load_csv(cfg.path(ds["path"]), ds["schema"], ds["label"])
    n_test = ds["test_size"]
    if n_test >= len(table):
        raise RejectedInput(f"dataset.test_size {n_test} leaves no training pool")
    order = np.random.default_rng(derive_seed(ds["seed"], 2)).permutation(len(table))
    return LoadedData(table.subset(order[n_test:]), table.subset(order[:n_test]).to_labeled())


@dataclass(frozen=True)
class Defense:
    """Training-data preprocessing applied to every draw of an auxiliary set (picklable)."""

    name: str
    kind: str
    params: tuple = ()

    def __call__(self, data, seed):
        p = dict(self.params)
        if self.kind == "gaussian":
            sd = np.sqrt(p["variance"]) if "variance" in p else p["sd"]
            return transform_gaussian_noise(data, p.get("mean", 0.0), sd, seed)
        if self.kind == "snp":
            return transform_snp(data, p["fraction"], seed)
        if self.kind == "gamma":
            return transform_gamma(data, p["gamma"])
        if self.kind == "mirror":
            return transform_mirror(data)
        if self.kind == "censor":
            return censor_attribute(data, p.get("column", "sex"), p.get("replacement", 0.5))
        if self.kind == "mondrian":
            return mondrian_anonymize(data, p.get("quasi_identifiers", CENSUS_QUASI_IDENTIFIERS), p.get("k", 10), seed)
        if self.kind == "marginal":
            return synthesize_marginals(data, len(data), seed)
        raise RejectedInput(f"unknown defense {self.kind!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "Defense":
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k not in ("name", "kind")}
        return cls(d.get("name", d["kind"]), d["kind"], tuple(sorted(params.items())))


# ---------------------------------------------------------------------------
# shadow corpora

class ShadowCache:
    """In-memory memo of trained collections keyed by everything that determines them."""

    def __init__(self):
        self._store: dict[str, ShadowCollection] = {}

    def get_or_train(self, key: dict, fn):
        k = hashlib.sha256(json.dumps(key, sort_keys=True, default=str).encode()).hexdigest()
        if k not in self._store:
            self._store[k] = fn()
        return self._store[k]


class _Runner:
    def __init__(self, cfg: ExperimentConfig, cache: ShadowCache | None, out: Path | None):
        self.cfg = cfg
        self.cache = cache or ShadowCache()
        self.out = out
        self.timings: dict[str, float] = {}
        self._data = None

    def timed(self, label, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        finally:
            self.timings[label] = self.timings.get(label, 0.0) + time.perf_counter() - t0

    @property
    def data(self) -> LoadedData:
        if self._data is None:
            self._data = self.timed("load_data", lambda: load_data(self.cfg))
        return self._data

    def architecture(self) -> Architecture:
        a = self.cfg["architecture"]
        arch = Architecture(self.data.test.features.shape[1], tuple(a["widths"]), tuple(a["activations"]))
        if arch.widths[-1] != self.data.test.class_count:
            raise RejectedInput(f"output width {arch.widths[-1]} differs from the task's "
                                f"{self.data.test.class_count} classes")
        return arch

    def collection(self, role: str, specs, count: int, defense: Defense | None = None) -> ShadowCollection:
        """Train (or reuse) a collection; ``role`` picks a disjoint seed stream."""
        cfg = self.cfg
        if role == "shadows" and cfg["shadows_path"] is not None and defense is None:
            return load_collection(cfg.path(cfg["shadows_path"]))
        base = derive_seed(cfg.seed, {"shadows": 1, "targets": 2}[role])
        key = {"dataset": cfg["dataset"], "specs": [s.to_dict() for s in specs], "arch": cfg["architecture"],
               "training": cfg["training"], "aux": cfg["aux_size"], "count": count, "base": base,
               "defense": None if defense is None else [defense.kind, list(defense.params)]}
        arch = self.architecture()
        job = ShadowJob(self.data.pool, list(specs), arch, cfg.train_config(), cfg["aux_size"], self.data.test, defense)
        label = role if defense is None else f"{role}:{defense.name}"
        return self.timed(label, lambda: self.cache.get_or_train(
            key, lambda: train_shadows(job, count, base, workers=cfg["workers"])))

    def train_meta_on(self, shadows: ShadowCollection, index: int = 0, split=None):
        cfg = self.cfg
        m = cfg["meta"]
        meta = build_meta(shadows.architecture, shadows.property_count, seed=derive_seed(cfg.seed, 5, index),
                          pooling=m["pooling"], row_features=m["row_features"])
        tcfg = replace(cfg.meta_train_config(), seed=derive_seed(cfg.seed, 7, index))
        split = float(m["split"]) if split is None else split
        return self.timed("meta", lambda: train_meta(meta, shadows, tcfg, split, derive_seed(cfg.seed, 6, index)))


def _chunks(coll: ShadowCollection, n: int) -> list[ShadowCollection]:
    """Split into ``n`` disjoint, label-balanced sub-collections."""
    labels = coll.labels
    parts = [[] for _ in range(n)]
    for lab in range(coll.property_count):
        for pos, i in enumerate(np.flatnonzero(labels == lab)):
            parts[pos % n].append(int(i))
    return [coll.subset(sorted(p)) for p in parts]


def _relabel(coll: ShadowCollection, mapping, names) -> ShadowCollection:
    entries = [replace(e, property_label=int(mapping[e.property_label])) for e in coll.entries]
    return ShadowCollection(coll.architecture, entries, len(names), list(names))


def _task_acc(arch, params, test) -> float:
    return evaluate(unflatten(arch, params), test)


def _pct_drop(before, after) -> float:
    return float(100.0 * (np.mean(before) - np.mean(after)))


# ---------------------------------------------------------------------------
# report

@dataclass
class ExperimentReport:
    experiment: str
    config_digest: str
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    boxplots: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)  # csv name -> list of row dicts
    traces: dict = field(default_factory=dict)  # trace file name -> jsonl text
    models: dict = field(default_factory=dict)  # model file name -> DenseNet
    timings: dict = field(default_factory=dict)
    run_dir: Path | None = None

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "config_digest": self.config_digest,
            "records": self.records,
            "aggregates": self.aggregates,
            "boxplots": {k: v.__dict__ for k, v in self.boxplots.items()},
            "timings": self.timings,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    keys = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _jsonable(r.get(k)) for k in keys})


def write_run(report: ExperimentReport, cfg: ExperimentConfig, out_dir) -> Path:
    """Lay out runs/<timestamp>-<digest>/ under ``out_dir`` and return that directory."""
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    run = Path(out_dir) / "runs" / f"{stamp}-{report.config_digest[:12]}"
    (run / "models").mkdir(parents=True, exist_ok=True)
    (run / "traces").mkdir(exist_ok=True)
    (run / "config.yaml").write_text(yaml.safe_dump(_jsonable(cfg.to_dict()), sort_keys=True), encoding="utf-8")
    (run / "report.json").write_text(report.to_json(), encoding="utf-8")
    for name, rows in report.series.items():
        _write_csv(run / f"{name}.csv", rows)
    box_rows = [{"series": k, **{f: getattr(v, f) for f in ("q1", "median", "q3", "mean", "whisker_low", "whisker_high")},
                 "outliers": len(v.outliers)} for k, v in report.boxplots.items()]
    _write_csv(run / "boxplots.csv", box_rows)
    for name, text in report.traces.items():
        (run / "traces" / name).write_text(text, encoding="utf-8")
    for name, net in report.models.items():
        save_model(net, run / "models" / name)
    return run


# ---------------------------------------------------------------------------
# protocols

def _target_records(targets: ShadowCollection) -> list[dict]:
    return [{"model_id": i, "seed": str(e.seed), "property": int(e.property_label),
             "task_accuracy_before": e.task_accuracy} for i, e in enumerate(targets.entries)]


def _attack(r: _Runner, rep: ExperimentReport):
    specs = r.cfg.properties
    shadows = r.collection("shadows", specs, r.cfg["counts"]["shadows"])
    meta, held_out = r.train_meta_on(shadows)
    targets = r.collection("targets", specs, r.cfg["counts"]["targets"])
    out = infer_batch(meta, targets.params)
    rep.records = _target_records(targets)
    for rec, y in zip(rep.records, out):
        rec["adversary_before"] = y.tolist()
    acc = np.array([e.task_accuracy for e in targets.entries])
    rep.aggregates.update({
        "meta_heldout_accuracy": held_out,
        "attack_accuracy": attack_accuracy(meta, targets),
        "shadow_task_accuracy": {n: float(np.mean([e.task_accuracy for e in shadows.entries if e.property_label == p]))
                                 for p, n in enumerate(shadows.property_names)},
        "target_task_accuracy": {n: float(acc[targets.labels == p].mean()) for p, n in enumerate(targets.property_names)},
        "shadow_digest": shadows.digest(),
    })
    if r.cfg["meta"]["flat_baseline"]:
        net = build_flat_baseline(shadows.architecture, shadows.property_count, seed=derive_seed(r.cfg.seed, 8))
        net, flat_acc, _ = r.timed("flat_baseline", lambda: train_flat_baseline(
            net, shadows, r.cfg.meta_train_config(), float(r.cfg["meta"]["split"]), derive_seed(r.cfg.seed, 6, 0)))
        pred = np.argmax(infer_flat_baseline(net, targets.params), axis=1)
        rep.aggregates["flat_baseline_heldout_accuracy"] = flat_acc
        rep.aggregates["flat_baseline_attack_accuracy"] = float(np.mean(pred == targets.labels))
    return shadows, meta, targets


def run_attack_baseline(r: _Runner, rep: ExperimentReport):
    _attack(r, rep)


def run_unlearn_single(r: _Runner, rep: ExperimentReport):
    _, meta, targets = _attack(r, rep)
    ucfg = r.cfg.unlearn_config()
    arch, test = targets.architecture, r.data.test
    after_acc, after_out = [], []
    for rec, e in zip(rep.records, targets.entries):
        step = replace(ucfg, seed=derive_seed(ucfg.seed, rec["model_id"]))
        p, trace = r.timed("unlearn", lambda: unlearn_params(e.params, meta, step))
        y = infer(meta, p)
        a = r.timed("evaluate", lambda: _task_acc(arch, p, test))
        rec.update(task_accuracy_after=a, adversary_after=y.tolist(), trace=trace.summary(),
                   task_drop_pp=100.0 * (rec["task_accuracy_before"] - a))
        rep.traces[f"target_{rec['model_id']:04d}.jsonl"] = trace.jsonl()
        rep.models[f"target_{rec['model_id']:04d}_unlearned.piam"] = unflatten(arch, p)
        after_acc.append(a)
        after_out.append(y)
    before = [rec["task_accuracy_before"] for rec in rep.records]
    conv = [rec["trace"]["terminated_by"] == "converged" and rec["trace"]["final_utility"] <= ucfg.tolerance
            for rec in rep.records]
    rounds = [rec["trace"]["rounds"] for rec in rep.records]
    rep.aggregates.update({
        "converged_fraction": float(np.mean(conv)),
        "mean_task_drop_pp": _pct_drop(before, after_acc),
        "attack_accuracy_after": float(np.mean(np.argmax(after_out, axis=1) == targets.labels)),
        "rounds_within_2_20_fraction": float(np.mean([(2 <= n <= 20) for n in rounds])),
    })
    rep.boxplots["rounds"] = boxplot_stats(rounds)
    rep.boxplots["task_drop_pp"] = boxplot_stats([rec["task_drop_pp"] for rec in rep.records])
    rep.boxplots["final_utility"] = boxplot_stats([rec["trace"]["final_utility"] for rec in rep.records])
    rep.series["unlearn_single"] = [
        {"model_id": rec["model_id"], "property": rec["property"], "task_accuracy_before": rec["task_accuracy_before"],
         "task_accuracy_after": rec["task_accuracy_after"], "rounds": rec["trace"]["rounds"],
         "initial_utility": rec["trace"]["initial_utility"], "final_utility": rec["trace"]["final_utility"],
         "terminated_by": rec["trace"]["terminated_by"]} for rec in rep.records]


def _true_prob(outputs, labels):
    """outputs[adversary, target, k] -> probability of each target's true property."""
    return outputs[:, np.arange(len(labels)), labels]


def run_unlearn_iterative(r: _Runner, rep: ExperimentReport):
    cfg = r.cfg
    specs = cfg.properties
    it = cfg["iterative"]
    n, m = it["unlearn_adversaries"], it["test_adversaries"]
    shadows = r.collection("shadows", specs, cfg["counts"]["shadows"])
    parts = _chunks(shadows, n + m)
    metas, held = [], []
    for i, part in enumerate(parts):
        meta, acc = r.train_meta_on(part, index=i)
        metas.append(meta)
        held.append(acc)
    unl, tst = metas[:n], metas[n:]
    it_cfg = IterativeConfig(unl, tst, seed=derive_seed(cfg.seed, 11))
    it_cfg.validate()
    targets = r.collection("targets", specs, cfg["counts"]["targets"])
    labels = targets.labels
    ucfg = cfg.unlearn_config()
    arch, test = targets.architecture, r.data.test
    rep.records = _target_records(targets)

    # stage 1: every target unlearned against the first unlearning adversary only
    first = []
    for rec, e in zip(rep.records, targets.entries):
        p, _ = r.timed("unlearn", lambda: unlearn_params(e.params, unl[0], replace(ucfg, seed=derive_seed(ucfg.seed, 1, rec["model_id"]))))
        first.append(p)
    first = np.array(first)
    test_acc_first = [float(np.mean(np.argmax(infer_batch(t, first), axis=1) == labels)) for t in tst]
    test_acc_before = [attack_accuracy(t, targets) for t in tst]

    # full pass in a seeded random order per target
    outs = []
    for rec, e in zip(rep.records, targets.entries):
        res = r.timed("unlearn", lambda: iterative_unlearn(unflatten(arch, e.params), it_cfg, ucfg, rec["model_id"]))
        a = r.timed("evaluate", lambda: evaluate(res.model, test))
        rec.update(order=res.order, task_accuracy_after=a, task_drop_pp=100.0 * (rec["task_accuracy_before"] - a),
                   test_outputs=res.test_outputs.tolist(), traces=[t.summary() for t in res.traces])
        rep.traces[f"target_{rec['model_id']:04d}.jsonl"] = "".join(
            json.dumps({"iteration": s, "adversary": res.order[s], **t.summary()}, sort_keys=True) + "\n"
            for s, t in enumerate(res.traces))
        outs.append(res.test_outputs)
    outs = np.array(outs)  # target x (n+1) x m x k
    final_true = _true_prob(outs[:, -1].transpose(1, 0, 2), labels)  # m x targets
    medians = np.median(final_true, axis=1)
    per_property = {}
    for p, name in enumerate(targets.property_names):
        sel = labels == p
        per_property[name] = {"pooled_mean": float(final_true[:, sel].mean()),
                              "adversary_medians": np.median(final_true[:, sel], axis=1).tolist()}
    rep.aggregates.update({
        "meta_heldout_accuracy": held,
        "test_attack_accuracy_before": test_acc_before,
        "test_attack_accuracy_after_first": test_acc_first,
        "pooled_test_mean_true_output": float(final_true.mean()),
        "test_adversary_median_true_output": medians.tolist(),
        "max_median_deviation": float(np.max(np.abs(medians - 0.5))),
        "per_property": per_property,
        "mean_task_drop_pp": _pct_drop([x["task_accuracy_before"] for x in rep.records],
                                       [x["task_accuracy_after"] for x in rep.records]),
    })
    # outputs of the test adversaries after each iteration, for line plots
    rows = []
    for t in range(n + 1):
        tp = _true_prob(outs[:, t].transpose(1, 0, 2), labels)
        for a in range(m):
            rows.append({"iteration": t, "test_adversary": a, "mean_true_output": float(tp[a].mean()),
                         "median_true_output": float(np.median(tp[a]))})
            rep.boxplots[f"iter{t}_test{a}"] = boxplot_stats(tp[a])
    rep.series["iterative_outputs"] = rows


def run_unlearn_multi(r: _Runner, rep: ExperimentReport):
    cfg = r.cfg
    cats = cfg["multi"]["categories"]
    cat_specs = [[PropertySpec.from_dict(p) for p in c["properties"]] for c in cats]
    combos = list(itertools.product(*[range(len(s)) for s in cat_specs]))
    joint = [joint_ratio("+".join(cat_specs[c][i].name for c, i in enumerate(combo)),
                         *[cat_specs[c][i] for c, i in enumerate(combo)]) for combo in combos]
    shadows = r.collection("shadows", joint, cfg["counts"]["shadows"])
    parts = _chunks(shadows, len(cats))
    metas, held = [], []
    for c, cat in enumerate(cats):
        mapping = {j: combo[c] for j, combo in enumerate(combos)}
        sub = _relabel(parts[c], mapping, [s.name for s in cat_specs[c]])
        meta, acc = r.train_meta_on(sub, index=c)
        metas.append((cat["name"], meta))
        held.append(acc)
    targets = r.collection("targets", joint, cfg["counts"]["targets"])
    orders = list(itertools.permutations(range(len(cats)))) if cfg["multi"]["orders"] == "all" else \
        [tuple(o) for o in cfg["multi"]["orders"]]
    ucfg = cfg.unlearn_config()
    arch, test = targets.architecture, r.data.test
    base_records = _target_records(targets)
    summary = {}
    rows = []
    for order in orders:
        oname = ">".join(cats[c]["name"] for c in order)
        drops, finals, stage_finals, conv = [], [], [], []
        for rec0, e in zip(base_records, targets.entries):
            rec = dict(rec0)
            rec["combo"] = list(combos[e.property_label])
            rec["order"] = oname
            res = r.timed("unlearn", lambda: multi_property_unlearn(
                unflatten(arch, e.params), [metas[c] for c in order], replace(ucfg, seed=derive_seed(ucfg.seed, rec["model_id"]))))
            a = r.timed("evaluate", lambda: evaluate(res.model, test))
            final = {res.categories[j]: float(res.utilities[-1, j]) for j in range(len(order))}
            rec.update(task_accuracy_after=a, task_drop_pp=100.0 * (rec["task_accuracy_before"] - a),
                       utilities=res.utilities.tolist(), final_utilities=final,
                       traces=[t.summary() for t in res.traces])
            rep.records.append(rec)
            rep.traces[f"{oname.replace('>', '_')}_target_{rec['model_id']:04d}.jsonl"] = "".join(
                json.dumps({"stage": s, "category": res.categories[s], **t.summary()}, sort_keys=True) + "\n"
                for s, t in enumerate(res.traces))
            drops.append(rec["task_drop_pp"])
            finals.append(max(final.values()))
            stage_finals.append(max(t.final_utility for t in res.traces))
            conv.append(all(t.terminated_by == "converged" for t in res.traces))
            rows.append({"order": oname, "model_id": rec["model_id"], "task_drop_pp": rec["task_drop_pp"],
                         **{f"final_{k}": v for k, v in final.items()}})
        # stage_* looks at each category right after its own stage; end_of_pass_* after the last stage
        summary[oname] = {"mean_task_drop_pp": float(np.mean(drops)),
                          "stages_converged_fraction": float(np.mean(conv)),
                          "stage_finals_within_tolerance": bool(np.all(np.array(stage_finals) <= ucfg.tolerance)),
                          "max_stage_final_utility": float(np.max(stage_finals)),
                          "end_of_pass_within_tolerance": bool(np.all(np.array(finals) <= ucfg.tolerance)),
                          "max_end_of_pass_utility": float(np.max(finals)),
                          "end_of_pass_within_tolerance_fraction": float(np.mean(np.array(finals) <= ucfg.tolerance))}
        rep.boxplots[f"{oname}_task_drop_pp"] = boxplot_stats(drops)
    rep.aggregates.update({"meta_heldout_accuracy": dict(zip([c["name"] for c in cats], held)),
                           "orders": summary})
    rep.series["unlearn_multi"] = rows


def run_preprocess_defense(r: _Runner, rep: ExperimentReport):
    cfg = r.cfg
    specs = cfg.properties
    shadows, meta, targets = _attack(r, rep)
    base_acc = rep.aggregates["attack_accuracy"]
    base_task = [e.task_accuracy for e in targets.entries]
    results = {}
    rows = []
    for d in cfg["defenses"]:
        defense = Defense.from_dict(d)
        dt = r.collection("targets", specs, cfg["counts"]["targets"], defense)
        m = meta
        if cfg["adaptive"]:
            ds = r.collection("shadows", specs, cfg["counts"]["shadows"], defense)
            m, _ = r.train_meta_on(ds, index=1)
        acc = attack_accuracy(m, dt)
        task = [e.task_accuracy for e in dt.entries]
        results[defense.name] = {"kind": defense.kind, "attack_accuracy": acc,
                                 "attack_drop_pp": 100.0 * (base_acc - acc),
                                 "mean_task_drop_pp": _pct_drop(base_task, task),
                                 "mean_task_accuracy": float(np.mean(task))}
        rows.append({"defense": defense.name, **{k: v for k, v in results[defense.name].items() if k != "kind"}})
        for rec, e, y in zip(rep.records, dt.entries, infer_batch(m, dt.params)):
            rec.setdefault("defended", {})[defense.name] = {"task_accuracy": e.task_accuracy, "adversary": y.tolist()}
    rep.aggregates["defenses"] = results
    rep.series["defenses"] = [{"defense": "none", "attack_accuracy": base_acc, "attack_drop_pp": 0.0,
                               "mean_task_drop_pp": 0.0, "mean_task_accuracy": float(np.mean(base_task))}] + rows


def _view(P: np.ndarray, arch: Architecture, layers) -> np.ndarray:
    if layers == "all":
        return P
    bounds = np.cumsum([0] + [o * (i + 1) for o, i in arch.layer_shapes])
    return np.hstack([P[:, bounds[i]:bounds[i + 1]] for i in layers])


def run_tsne(r: _Runner, rep: ExperimentReport):
    cfg = r.cfg
    t = cfg["tsne"]
    shadows = r.collection("shadows", cfg.properties, cfg["counts"]["shadows"])
    labels = shadows.labels
    views = {}
    for layers in t["views"]:
        name = "all" if layers == "all" else "layers_" + "_".join(str(i) for i in layers)
        X = _view(shadows.params, shadows.architecture, layers)
        emb = r.timed(f"tsne:{name}", lambda: tsne_embed(X, float(t["perplexity"]), int(t["iterations"]), derive_seed(cfg.seed, 12)))
        adv, acc = fit_distance_adversary(emb, labels)
        views[name] = {"accuracy": acc, "threshold": adv.threshold, "orientation": adv.orientation,
                       "center": adv.center.tolist(), "final_kl": emb.final_kl, "initial_kl": emb.initial_kl,
                       "kl_after_exaggeration": emb.kl_after_exaggeration}
        rep.series[f"tsne_{name}"] = [{"model_id": i, "property": int(lab), "x": float(x), "y": float(y)}
                                      for i, (lab, (x, y)) in enumerate(zip(labels, emb.points))]
    rep.records = [{"model_id": i, "seed": str(e.seed), "property": int(e.property_label),
                    "task_accuracy_before": e.task_accuracy} for i, e in enumerate(shadows.entries)]
    rep.aggregates.update({"views": views, "perplexity": float(t["perplexity"])})


def run_saliency(r: _Runner, rep: ExperimentReport):
    cfg = r.cfg
    specs = cfg.properties
    shadows = r.collection("shadows", specs, cfg["counts"]["shadows"])
    k = cfg["saliency"]["metas"]
    metas = []
    held = []
    for i, part in enumerate(_chunks(shadows, k)):
        meta, acc = r.train_meta_on(part, index=i)
        metas.append(meta)
        held.append(acc)
    targets = r.collection("targets", specs, cfg["counts"]["targets"])
    arch = targets.architecture
    bounds = np.cumsum([0] + [o * (i + 1) for o, i in arch.layer_shapes])
    rep.records = _target_records(targets)
    rhos = []
    for rec, e in zip(rep.records, targets.entries):
        sal = [saliency(m, e.params) for m in metas]
        pairs = {f"{a}-{b}": saliency_similarity(sal[a], sal[b]) for a, b in itertools.combinations(range(k), 2)}
        rec["spearman"] = pairs
        rec["layer_share"] = [[float(s[bounds[j]:bounds[j + 1]].sum() / s.sum()) for j in range(len(bounds) - 1)]
                              for s in sal]
        rhos.append(pairs["0-1"])
    rep.aggregates.update({"meta_heldout_accuracy": held, "median_spearman": float(np.median(rhos)),
                           "spearman": rhos})
    rep.boxplots["spearman"] = boxplot_stats(rhos)
    rep.series["saliency"] = [{"model_id": rec["model_id"], "property": rec["property"], **rec["spearman"]}
                              for rec in rep.records]


PROTOCOLS = {
    "attack_baseline": run_attack_baseline,
    "unlearn_single": run_unlearn_single,
    "unlearn_iterative": run_unlearn_iterative,
    "unlearn_multi": run_unlearn_multi,
    "preprocess_defense": run_preprocess_defense,
    "tsne": run_tsne,
    "saliency": run_saliency,
}


def run_experiment(cfg: ExperimentConfig, out_dir=None, cache: ShadowCache | None = None) -> ExperimentReport:
    """Run the configured protocol; with ``out_dir`` the run directory is written too.

    Runtime failures raise ExperimentFailed carrying the partially filled report.
    """
    rep = ExperimentReport(cfg.experiment, cfg.digest())
    r = _Runner(cfg, cache, Path(out_dir) if out_dir else None)
    t0 = time.perf_counter()
    try:
        PROTOCOLS[cfg.experiment](r, rep)
    except Exception as exc:
        rep.timings = dict(r.timings)
        raise ExperimentFailed(f"{cfg.experiment} failed: {exc}", rep) from exc
    r.timings["total"] = time.perf_counter() - t0
    rep.timings = {k: round(v, 3) for k, v in sorted(r.timings.items())}
    if out_dir is not None:
        rep.run_dir = write_run(rep, cfg, out_dir)
    return rep


# ---------------------------------------------------------------------------
# building blocks used by the CLI's single-step commands

def train_shadow_corpus(cfg: ExperimentConfig, cache: ShadowCache | None = None) -> ShadowCollection:
    return _Runner(cfg, cache, None).collection("shadows", cfg.properties, cfg["counts"]["shadows"])


def train_meta_from_config(cfg: ExperimentConfig, cache: ShadowCache | None = None):
    """Shadows (trained, cached or loaded from ``shadows_path``) plus one meta-classifier.

    Returns (meta, held-out accuracy, shadows).
    """
    r = _Runner(cfg, cache, None)
    shadows = r.collection("shadows", cfg.properties, cfg["counts"]["shadows"])
    meta, acc = r.train_meta_on(shadows)
    return meta, acc, shadows


def summarize_runs(run_dirs) -> list[dict]:
    """One row of headline numbers per existing run directory."""
    rows = []
    for d in run_dirs:
        rep = json.loads((Path(d) / "report.json").read_text(encoding="utf-8"))
        row = {"run": Path(d).name, "experiment": rep["experiment"], "config_digest": rep["config_digest"],
               "records": len(rep["records"])}
        for k, v in sorted(rep["aggregates"].items()):
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                row[k] = v
        rows.append(row)
    return rows
