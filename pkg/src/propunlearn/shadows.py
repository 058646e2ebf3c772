"""Shadow-model factory and the layer-wise neuron-set view of parameters."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import PropertySpec, make_auxiliary
from .errors import ParseError, RejectedInput, TrainingDiverged
from .nn import Architecture, LabeledDataset, TrainConfig, evaluate, load_model, save_model, train, unflatten
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class ShadowEntry:
    params: np.ndarray
    property_label: int
    seed: int
    task_accuracy: float | None = None


@dataclass
class ShadowCollection:
    architecture: Architecture
    entries: list[ShadowEntry]
    property_count: int
    property_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = self.architecture.n_params
        for e in self.entries:
            if e.params.shape != (n,):
                raise RejectedInput(f"entry with seed {e.seed} has {e.params.size} params, architecture needs {n}")
            if not 0 <= e.property_label < self.property_count:
                raise RejectedInput(f"label {e.property_label} outside [0, {self.property_count})")
        seeds = [e.seed for e in self.entries]
        if len(set(seeds)) != len(seeds):
            raise RejectedInput("seeds must be unique within a collection")

    def __len__(self):
        return len(self.entries)

    @property
    def params(self) -> np.ndarray:
        return np.stack([e.params for e in self.entries]) if self.entries else np.zeros((0, self.architecture.n_params))

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.property_label for e in self.entries], dtype=np.int64)

    @property
    def seeds(self) -> list[int]:
        return [e.seed for e in self.entries]

    def subset(self, idx) -> "ShadowCollection":
        return replace(self, entries=[self.entries[i] for i in idx])

    def merge(self, other: "ShadowCollection") -> "ShadowCollection":
        if other.architecture != self.architecture:
            raise RejectedInput("cannot merge collections with different architectures")
        return replace(self, entries=self.entries + other.entries,
                       property_count=max(self.property_count, other.property_count))

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(np.int64(e.property_label).tobytes())
            h.update(np.asarray(e.params, dtype="<f8").tobytes())
        return h.hexdigest()

    def nets(self):
        return [unflatten(self.architecture, e.params) for e in self.entries]


# ---------------------------------------------------------------------------
# neuron-set view

def to_neuron_sets(params, arch: Architecture) -> list[np.ndarray]:
    """Per layer, an ``out x (in + 1)`` matrix: each row is one neuron's weights then bias."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != arch.n_params:
        raise RejectedInput(f"expected {arch.n_params} parameters, got {params.size}")
    return [v[0] for v in neuron_sets_batch(params[None, :], arch)]


def neuron_sets_batch(P: np.ndarray, arch: Architecture) -> list[np.ndarray]:
    """Batched :func:`to_neuron_sets`: ``B x n_params`` -> list of ``B x out x (in+1)``."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != arch.n_params:
        raise RejectedInput(f"expected rows of {arch.n_params} parameters, got shape {P.shape}")
    views, pos = [], 0
    for out, inp in arch.layer_shapes:
        w = P[:, pos:pos + out * inp].reshape(-1, out, inp)
        pos += out * inp
        b = P[:, pos:pos + out]
        pos += out
        views.append(np.concatenate([w, b[:, :, None]], axis=2))
    return views


def flatten_neuron_sets(view: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.concatenate([v[:, :-1].ravel(), v[:, -1]]) for v in view])


def flatten_neuron_sets_batch(views: Sequence[np.ndarray]) -> np.ndarray:
    """Inverse of :func:`neuron_sets_batch` (also maps gradients back to flat layout)."""
    parts = []
    for v in views:
        parts.append(v[:, :, :-1].reshape(len(v), v.shape[1] * (v.shape[2] - 1)))
        parts.append(v[:, :, -1])
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# factory

@dataclass
class ShadowJob:
    """Everything needed to train one collection, minus the per-model seeds."""

    source: object  # ImageDataset or TabularDataset
    specs: list[PropertySpec]
    arch: Architecture
    train_cfg: TrainConfig
    aux_size: int
    eval_data: LabeledDataset | None = None
    preprocess: Callable | None = None
    pin_draw: bool = False


def _train_one(job: ShadowJob, base_seed: int, p: int, j: int) -> ShadowEntry:
    seed = derive_seed(base_seed, p, j)
    draw_seed = derive_seed(base_seed, p) if job.pin_draw else derive_seed(seed, 1)
    aux = make_auxiliary(job.source, job.specs[p], job.aux_size, draw_seed)
    if job.preprocess is not None:
        aux = job.preprocess(aux, derive_seed(seed, 3))
    net = job.arch.build(derive_seed(seed, 0))
    cfg = replace(job.train_cfg, seed=derive_seed(seed, 2))
    try:
        net, _ = train(net, aux.to_labeled(), cfg)
    except TrainingDiverged as exc:
        raise TrainingDiverged(exc.epoch, f"property {p}, shadow {j}") from exc
    acc = evaluate(net, job.eval_data) if job.eval_data is not None else None
    return ShadowEntry(net.params(), p, seed, acc)


def _train_star(args):
    return _train_one(*args)


def train_shadows(job: ShadowJob, count_per_property: int, base_seed: int, workers: int = 1) -> ShadowCollection:
    """Train ``count_per_property`` models per property spec.

    Model ``j`` of property ``p`` is seeded from ``(base_seed, p, j)``; the result
    does not depend on ``workers``.
    """
    if count_per_property < 1:
        raise RejectedInput("count_per_property must be >= 1")
    if len(job.specs) < 1:
        raise RejectedInput("need at least one property spec")
    tasks = [(job, base_seed, p, j) for p in range(len(job.specs)) for j in range(count_per_property)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_train_star, tasks, chunksize=4))
    else:
        entries = [_train_one(*t) for t in tasks]
    log.info("trained %d shadow models", len(entries))
    return ShadowCollection(job.arch, entries, len(job.specs), [s.name for s in job.specs])


# ---------------------------------------------------------------------------
# persistence: manifest.json + one MODEL file per entry

def save_collection(coll: ShadowCollection, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    records = []
    for i, e in enumerate(coll.entries):
        name = f"model_{i:05d}.piam"
        save_model(unflatten(coll.architecture, e.params), d / name)
        records.append({
            "file": name,
            "property_label": e.property_label,
            "seed": str(e.seed),
            "task_accuracy": e.task_accuracy,
            "digest": hashlib.sha256(e.params.astype("<f8").tobytes()).hexdigest(),
        })
    manifest = {
        "architecture": coll.architecture.to_dict(),
        "property_count": coll.property_count,
        "property_names": coll.property_names,
        "digest": coll.digest(),
        "entries": records,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def load_collection(directory) -> ShadowCollection:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    arch = Architecture.from_dict(manifest["architecture"])
    entries = []
    for r in manifest["entries"]:
        net = load_model(d / r["file"])
        if net.architecture != arch:
            raise ParseError(f"{r['file']}: architecture differs from manifest")
        params = net.params()
        if hashlib.sha256(params.astype("<f8").tobytes()).hexdigest() != r["digest"]:
            raise ParseError(f"{r['file']}: digest mismatch")
        entries.append(ShadowEntry(params, int(r["property_label"]), int(r["seed"]), r.get("task_accuracy")))
    return ShadowCollection(arch, entries, int(manifest["property_count"]), list(manifest.get("property_names", [])))
