"""Permutation-invariant property-inference meta-classifier.

Each target layer ``i`` is viewed as a set of neuron rows (incoming weights
plus bias). A small network ``phi_i`` maps every row to a feature vector, the
vectors are pooled (sum or mean) over the set, and the pooled features of all
layers are concatenated and fed to the combiner ``rho`` with a softmax head.
Rows are standardised column-wise with statistics fitted on the training
shadows. With ``row_features="quadratic"`` each standardised row ``z`` is
expanded to ``[z, z**2]`` before ``phi``; the squares let a small ``phi`` see
per-column weight magnitudes. Both maps act per row, so pooling symmetry is
preserved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RejectedInput
from .nn import (
    Architecture,
    DenseLayer,
    DenseNet,
    LabeledDataset,
    TrainConfig,
    backward,
    forward,
    forward_all,
    load_model,
    save_model,
    train,
)
from .seeding import derive_seed, rng as make_rng
from .shadows import ShadowCollection, flatten_neuron_sets_batch, neuron_sets_batch


def _pow2_floor(x: int) -> int:
    return 1 << (max(int(x), 1).bit_length() - 1)


def default_sizing(target_arch: Architecture, k: int) -> dict:
    """phi_i widths scale with the neuron-row length; rho is fixed (16, 8, k).

    A row of length r gets ``(w, w/2)`` with ``w = clamp(pow2_floor(r) / 2, 8, 128)``;
    e.g. rows of 101 -> (32, 16), rows of 17 -> (8, 4).
    """
    phi = []
    for _, inp in target_arch.layer_shapes:
        w = min(max(_pow2_floor(inp + 1) // 2, 8), 128)
        phi.append((w, max(w // 2, 4)))
    return {"phi": phi, "rho": (16, 8)}


@dataclass
class MetaClassifier:
    phi: list[DenseNet]
    rho: DenseNet
    target_arch: Architecture
    property_count: int
    pooling: str = "sum"
    row_mean: list[np.ndarray] = field(default_factory=list)
    row_scale: list[np.ndarray] = field(default_factory=list)
    trained_on: frozenset = frozenset()
    row_features: str = "quadratic"

    def __post_init__(self):
        if len(self.phi) != self.target_arch.n_layers:
            raise RejectedInput("need one phi network per target layer")
        if self.rho.input_dim != sum(p.output_dim for p in self.phi):
            raise RejectedInput("rho input width must equal the summed phi output widths")
        if self.rho.output_dim != self.property_count or self.rho.layers[-1].activation != "softmax":
            raise RejectedInput("rho needs a softmax head of width k")
        if self.pooling not in ("sum", "mean"):
            raise RejectedInput(f"unknown pooling {self.pooling!r}")
        if self.row_features not in ROW_FEATURES:
            raise RejectedInput(f"unknown row feature map {self.row_features!r}")
        for p, (_, inp) in zip(self.phi, self.target_arch.layer_shapes):
            if p.input_dim != ROW_FEATURES[self.row_features] * (inp + 1):
                raise RejectedInput("phi input width does not match the neuron-row feature width")
        if not self.row_mean:
            self.row_mean = [np.zeros(inp + 1) for _, inp in self.target_arch.layer_shapes]
            self.row_scale = [np.ones(inp + 1) for _, inp in self.target_arch.layer_shapes]

    @property
    def nets(self) -> list[DenseNet]:
        return self.phi + [self.rho]

    def copy(self) -> "MetaClassifier":
        return MetaClassifier([p.copy() for p in self.phi], self.rho.copy(), self.target_arch,
                              self.property_count, self.pooling, [m.copy() for m in self.row_mean],
                              [s.copy() for s in self.row_scale], self.trained_on, self.row_features)


ROW_FEATURES = {"linear": 1, "quadratic": 2}


def build_meta(target_arch: Architecture, k: int, sizing: dict | None = None, seed: int = 0,
               pooling: str = "sum", zero_head: bool = False, row_features: str = "quadratic") -> MetaClassifier:
    if k < 2:
        raise RejectedInput("a meta-classifier needs k >= 2 properties")
    sizing = sizing or default_sizing(target_arch, k)
    phi = []
    for i, ((_, inp), widths) in enumerate(zip(target_arch.layer_shapes, sizing["phi"])):
        widths = tuple(widths)
        a = Architecture(ROW_FEATURES[row_features] * (inp + 1), widths, ("relu",) * len(widths))
        phi.append(a.build(derive_seed(seed, i)))
    rho_widths = tuple(sizing["rho"]) + (k,)
    rho_arch = Architecture(sum(p.output_dim for p in phi), rho_widths,
                            ("relu",) * (len(rho_widths) - 1) + ("softmax",))
    rho = rho_arch.build(derive_seed(seed, len(phi)))
    if zero_head:
        rho.layers[-1].weights[:] = 0.0
        rho.layers[-1].biases[:] = 0.0
    return MetaClassifier(phi, rho, target_arch, k, pooling, row_features=row_features)


# ---------------------------------------------------------------------------
# batched forward / backward through the set structure

def _check_params(meta: MetaClassifier, P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim == 1:
        P = P[None, :]
    if P.shape[1] != meta.target_arch.n_params:
        raise RejectedInput(f"target has {P.shape[1]} parameters, meta expects {meta.target_arch.n_params}")
    return P


def _forward_views(meta: MetaClassifier, views: list[np.ndarray]):
    B = len(views[0])
    cache, pooled = [], []
    for phi, v, mu, sc in zip(meta.phi, views, meta.row_mean, meta.row_scale):
        n_rows = v.shape[1]
        z = ((v - mu) / sc).reshape(B * n_rows, -1)
        rows = np.concatenate([z, z * z], axis=1) if meta.row_features == "quadratic" else z
        acts = forward_all(phi, rows)
        h = acts[-1].reshape(B, n_rows, -1).sum(axis=1)
        if meta.pooling == "mean":
            h = h / n_rows
        cache.append((acts, n_rows))
        pooled.append(h)
    rho_acts = forward_all(meta.rho, np.concatenate(pooled, axis=1))
    return rho_acts[-1], (cache, rho_acts)


def _backward(meta: MetaClassifier, state, grad_out, *, logits_grad=False, need_params=True, need_input=False):
    cache, rho_acts = state
    rho_grads, dz = backward(meta.rho, rho_acts, grad_out, logits_grad=logits_grad, need_params=need_params)
    B = len(dz)
    phi_grads, view_grads, pos = [], [], 0
    for phi, (acts, n_rows), sc in zip(meta.phi, cache, meta.row_scale):
        w = phi.output_dim
        dh = dz[:, pos:pos + w]
        pos += w
        if meta.pooling == "mean":
            dh = dh / n_rows
        drows = np.broadcast_to(dh[:, None, :], (B, n_rows, w)).reshape(B * n_rows, w)
        g, dx = backward(phi, acts, drows, need_params=need_params)
        phi_grads.append(g)
        if need_input:
            if meta.row_features == "quadratic":
                r = dx.shape[1] // 2
                z = acts[0][:, :r]
                dx = dx[:, :r] + 2.0 * z * dx[:, r:]
            view_grads.append(dx.reshape(B, n_rows, -1) / sc)
    return phi_grads, rho_grads, view_grads


def infer_batch(meta: MetaClassifier, P) -> np.ndarray:
    P = _check_params(meta, P)
    y, _ = _forward_views(meta, neuron_sets_batch(P, meta.target_arch))
    return y


def infer(meta: MetaClassifier, target_params) -> np.ndarray:
    """Adversary output: probability vector over the k properties."""
    return infer_batch(meta, target_params)[0]


def infer_views(meta: MetaClassifier, views: list[np.ndarray]) -> np.ndarray:
    """Inference on an explicit (possibly row-permuted) neuron-set view of one target."""
    y, _ = _forward_views(meta, [np.asarray(v, dtype=np.float64)[None] for v in views])
    return y[0]


def output_grad(meta: MetaClassifier, P, dy, logits: bool = False) -> np.ndarray:
    """Vector-Jacobian product: d(sum(dy * y)) / d(target params), batched.

    With ``logits=True`` ``dy`` is taken as the gradient with respect to rho's
    pre-softmax logits instead of its output probabilities.
    """
    P = _check_params(meta, P)
    _, state = _forward_views(meta, neuron_sets_batch(P, meta.target_arch))
    _, _, vg = _backward(meta, state, np.atleast_2d(dy), logits_grad=logits, need_params=False, need_input=True)
    return flatten_neuron_sets_batch(vg)


def _finite(p):
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise RejectedInput("target parameters contain non-finite values")
    return p


def grad_mse_to_target(meta: MetaClassifier, target_params, target) -> np.ndarray:
    """Gradient of mean((infer(meta, p) - target)**2) with respect to the target parameters."""
    p = _finite(target_params)
    y = infer(meta, p)
    dy = 2.0 * (y - np.asarray(target, dtype=np.float64)) / y.size
    return output_grad(meta, p, dy[None, :])[0]


def grad_mse_to_uniform(meta: MetaClassifier, target_params) -> np.ndarray:
    k = meta.property_count
    return grad_mse_to_target(meta, target_params, np.full(k, 1.0 / k))


def grad_kl_to_uniform(meta: MetaClassifier, target_params) -> np.ndarray:
    """Gradient of KL(uniform || y); at the logits this is simply y - 1/k."""
    p = _finite(target_params)
    y = infer(meta, p)
    return output_grad(meta, p, (y - 1.0 / y.size)[None, :], logits=True)[0]


# ---------------------------------------------------------------------------
# training

def _flat_meta_params(meta):
    return [(l.weights, l.biases) for net in meta.nets for l in net.layers]


def fit_row_scaling(meta: MetaClassifier, P: np.ndarray) -> None:
    for i, v in enumerate(neuron_sets_batch(P, meta.target_arch)):
        rows = v.reshape(-1, v.shape[-1])
        meta.row_mean[i] = rows.mean(axis=0)
        meta.row_scale[i] = rows.std(axis=0) + 1e-8


def split_indices(n: int, labels: np.ndarray, train_fraction: float, seed: int):
    """Stratified shuffle split; returns (train_idx, test_idx)."""
    gen = make_rng(seed)
    tr, te = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[gen.permutation(len(idx))]
        cut = int(round(train_fraction * len(idx)))
        tr.append(idx[:cut])
        te.append(idx[cut:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))


def train_meta(meta: MetaClassifier, shadows: ShadowCollection, cfg: TrainConfig,
               split: float = 0.8, split_seed: int = 0) -> tuple[MetaClassifier, float]:
    """Train phi and rho jointly on the shadows' neuron-set views.

    ``split`` is the training fraction (stratified); the returned accuracy is
    measured on the held-out remainder (NaN if nothing is held out).
    """
    if shadows.architecture != meta.target_arch:
        raise RejectedInput("shadow architecture differs from the meta-classifier's target architecture")
    labels = shadows.labels
    if len(np.unique(labels)) < 2:
        raise RejectedInput("need shadows of at least two properties")
    if labels.max() >= meta.property_count:
        raise RejectedInput("shadow labels exceed the meta-classifier's property count")
    tr, te = split_indices(len(labels), labels, split, split_seed)
    P = shadows.params
    meta = meta.copy()
    fit_row_scaling(meta, P[tr])
    views_all = neuron_sets_batch(P, meta.target_arch)
    beta, lr = cfg.beta, cfg.learning_rate
    slots = _flat_meta_params(meta)
    vel = [(np.zeros_like(w), np.zeros_like(b)) for w, b in slots]
    for epoch in range(cfg.epochs):
        order = tr[make_rng(cfg.seed, epoch).permutation(len(tr))]
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            yb = labels[idx]
            probs, state = _forward_views(meta, [v[idx] for v in views_all])
            dlogits = probs.copy()
            dlogits[np.arange(len(yb)), yb] -= 1.0
            dlogits /= len(yb)
            phi_g, rho_g, _ = _backward(meta, state, dlogits, logits_grad=True)
            grads = [g for net_g in phi_g + [rho_g] for g in net_g]
            for (w, b), (vw, vb), (dw, db) in zip(slots, vel, grads):
                vw *= beta
                vw -= lr * dw
                vb *= beta
                vb -= lr * db
                w += vw
                b += vb
    meta.trained_on = frozenset(shadows.entries[i].seed for i in tr)
    if len(te) == 0:
        return meta, float("nan")
    pred = np.argmax(infer_batch(meta, P[te]), axis=1)
    return meta, float(np.mean(pred == labels[te]))


def attack_accuracy(meta: MetaClassifier, targets: ShadowCollection) -> float:
    """Fraction of targets whose inferred property (argmax) is the true one."""
    leaked = meta.trained_on.intersection(targets.seeds)
    if leaked:
        raise RejectedInput(f"{len(leaked)} targets were used to train this meta-classifier")
    if len(targets) == 0:
        raise RejectedInput("no targets")
    pred = np.argmax(infer_batch(meta, targets.params), axis=1)
    return float(np.mean(pred == targets.labels))


# ---------------------------------------------------------------------------
# non-invariant baseline

def build_flat_baseline(target_arch: Architecture, k: int, seed: int = 0, widths=(32, 16),
                        zero_head: bool = False) -> DenseNet:
    a = Architecture(target_arch.n_params, tuple(widths) + (k,), ("relu",) * len(widths) + ("softmax",))
    net = a.build(seed)
    if zero_head:
        net.layers[-1].weights[:] = 0.0
        net.layers[-1].biases[:] = 0.0
    return net


def train_flat_baseline(net: DenseNet, shadows: ShadowCollection, cfg: TrainConfig,
                        split: float = 0.8, split_seed: int = 0) -> tuple[DenseNet, float, np.ndarray]:
    """Train the flat baseline; inputs are standardised per coordinate on the training part.

    Returns the network with the standardisation folded into its first layer,
    the held-out accuracy, and the test indices.
    """
    labels, P = shadows.labels, shadows.params
    tr, te = split_indices(len(labels), labels, split, split_seed)
    mu, sd = P[tr].mean(axis=0), P[tr].std(axis=0) + 1e-8
    trained, _ = train(net, LabeledDataset((P[tr] - mu) / sd, labels[tr], shadows.property_count), cfg)
    first = trained.layers[0]
    w = first.weights / sd
    trained.layers[0] = DenseLayer(w, first.biases - w @ mu, first.activation)
    pred = np.argmax(forward(trained, P[te]), axis=1) if len(te) else np.zeros(0)
    acc = float(np.mean(pred == labels[te])) if len(te) else float("nan")
    return trained, acc, te


def infer_flat_baseline(flat_meta: DenseNet, target_params) -> np.ndarray:
    return forward(flat_meta, np.asarray(target_params, dtype=np.float64))


# ---------------------------------------------------------------------------
# persistence

def save_meta(meta: MetaClassifier, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(meta.phi):
        save_model(p, d / f"phi_{i}.piam")
    save_model(meta.rho, d / "rho.piam")
    manifest = {
        "target_arch": meta.target_arch.to_dict(),
        "pooling": meta.pooling,
        "row_features": meta.row_features,
        "k": meta.property_count,
        "row_mean": [m.tolist() for m in meta.row_mean],
        "row_scale": [s.tolist() for s in meta.row_scale],
        "trained_on": sorted(str(s) for s in meta.trained_on),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True), encoding="utf-8")


def load_meta(directory) -> MetaClassifier:
    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    arch = Architecture.from_dict(m["target_arch"])
    phi = [load_model(d / f"phi_{i}.piam") for i in range(arch.n_layers)]
    return MetaClassifier(phi, load_model(d / "rho.piam"), arch, int(m["k"]), m["pooling"],
                          [np.array(x) for x in m["row_mean"]], [np.array(x) for x in m["row_scale"]],
                          frozenset(int(s) for s in m.get("trained_on", [])), m.get("row_features", "linear"))
