"""Dense feed-forward networks: forward pass, backpropagation, SGD training and
the binary MODEL format.

Everything is float64 numpy. A network is a list of :class:`DenseLayer`; the flat
parameter layout is, layer by layer, the weight matrix row-major (one row per
neuron) followed by the bias vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParseError, RejectedInput, TrainingDiverged
from .seeding import rng as make_rng

ACTIVATIONS = ("relu", "sigmoid", "softmax", "identity")
ACT_CODES = {name: code for code, name in enumerate(ACTIVATIONS)}
MAGIC = b"PIAM1"


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if activation == "softmax":
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    return z


def _activation_backward(a: np.ndarray, da: np.ndarray, activation: str) -> np.ndarray:
    # a is the activation output; returns dL/dz
    if activation == "relu":
        return da * (a > 0)
    if activation == "sigmoid":
        return da * a * (1.0 - a)
    if activation == "softmax":
        return a * (da - (da * a).sum(axis=-1, keepdims=True))
    return da


@dataclass
class DenseLayer:
    weights: np.ndarray
    biases: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.ndim != 1:
            raise RejectedInput("weights must be 2-D and biases 1-D")
        if self.weights.shape[0] != self.biases.shape[0]:
            raise RejectedInput(
                f"weights have {self.weights.shape[0]} rows but biases length {self.biases.shape[0]}"
            )
        if self.activation not in ACT_CODES:
            raise RejectedInput(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor of a :class:`DenseNet` (no parameter values)."""

    input_dim: int
    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if self.input_dim < 1 or any(w < 1 for w in self.widths):
            raise RejectedInput("layer widths must be positive")
        if len(self.widths) != len(self.activations) or not self.widths:
            raise RejectedInput("need one activation per layer")
        if any(a not in ACT_CODES for a in self.activations):
            raise RejectedInput(f"unknown activation in {self.activations}")
        if "softmax" in self.activations[:-1]:
            raise RejectedInput("softmax is only allowed on the final layer")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) per layer."""
        ins = (self.input_dim,) + self.widths[:-1]
        return list(zip(self.widths, ins))

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    @property
    def n_layers(self) -> int:
        return len(self.widths)

    def build(self, seed: int) -> "DenseNet":
        """Glorot-uniform weights, zero biases."""
        gen = make_rng(seed)
        layers = []
        for (out, inp), act in zip(self.layer_shapes, self.activations):
            limit = np.sqrt(6.0 / (inp + out))
            w = gen.uniform(-limit, limit, size=(out, inp))
            layers.append(DenseLayer(w, np.zeros(out), act))
        return DenseNet(layers)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "widths": list(self.widths),
            "activations": list(self.activations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(int(d["input_dim"]), tuple(d["widths"]), tuple(d["activations"]))


@dataclass
class DenseNet:
    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise RejectedInput("a network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise RejectedInput(f"layer {i} outputs {a.out_dim} but layer {i + 1} expects {b.in_dim}")
        if any(l.activation == "softmax" for l in self.layers[:-1]):
            raise RejectedInput("softmax is only allowed on the final layer")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def architecture(self) -> Architecture:
        return Architecture(
            self.input_dim,
            tuple(l.out_dim for l in self.layers),
            tuple(l.activation for l in self.layers),
        )

    @property
    def n_params(self) -> int:
        return self.architecture.n_params

    def params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weights.ravel(), l.biases]) for l in self.layers])

    def with_params(self, vec) -> "DenseNet":
        return unflatten(self.architecture, vec)

    def copy(self) -> "DenseNet":
        return DenseNet([DenseLayer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers])


def unflatten(arch: Architecture, vec) -> DenseNet:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != arch.n_params:
        raise RejectedInput(f"expected {arch.n_params} parameters, got {vec.size}")
    layers, pos = [], 0
    for (out, inp), act in zip(arch.layer_shapes, arch.activations):
        w = vec[pos:pos + out * inp].reshape(out, inp).copy()
        pos += out * inp
        b = vec[pos:pos + out].copy()
        pos += out
        layers.append(DenseLayer(w, b, act))
    return DenseNet(layers)


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise RejectedInput("learning_rate must be > 0")
        if self.batch_size < 1:
            raise RejectedInput("batch_size must be >= 1")
        if self.epochs < 0:
            raise RejectedInput("epochs must be >= 0")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise RejectedInput(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise RejectedInput("momentum must be in [0, 1)")

    @property
    def beta(self) -> float:
        return self.momentum if self.optimizer == "sgd_momentum" else 0.0


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1 or len(self.features) != len(self.labels):
            raise RejectedInput("features must be N x d and labels length N")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise RejectedInput(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.features)):
            raise RejectedInput("features contain non-finite values")

    def __len__(self):
        return len(self.labels)


# --------------------------------------------------------------------------
# forward / backward

def forward_all(net: DenseNet, X: np.ndarray) -> list[np.ndarray]:
    """Return the activation of every layer, input included."""
    acts = [X]
    for layer in net.layers:
        acts.append(_activate(acts[-1] @ layer.weights.T + layer.biases, layer.activation))
    return acts


def forward(net: DenseNet, x) -> np.ndarray:
    """Network output for one input vector (or a batch, row per sample)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim or x.ndim not in (1, 2):
        raise RejectedInput(f"input has shape {x.shape}, network expects width {net.input_dim}")
    return forward_all(net, x)[-1]


def backward(net: DenseNet, acts: list[np.ndarray], grad_out: np.ndarray, *,
             logits_grad: bool = False, need_params: bool = True):
    """Backpropagate ``grad_out`` (dL/d output, or dL/d logits if ``logits_grad``).

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is a list of
    ``(dW, db)`` per layer, or None when ``need_params`` is false.
    """
    grads = [None] * len(net.layers)
    delta = grad_out
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if not (logits_grad and i == len(net.layers) - 1):
            delta = _activation_backward(acts[i + 1], delta, layer.activation)
        if need_params:
            grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        delta = delta @ layer.weights
    return (grads if need_params else None), delta


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(p, 1e-300)).mean())


def loss_and_grads(net: DenseNet, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its flat parameter gradient."""
    acts = forward_all(net, X)
    probs = acts[-1]
    dlogits = probs.copy()
    dlogits[np.arange(len(y)), y] -= 1.0
    dlogits /= len(y)
    grads, _ = backward(net, acts, dlogits, logits_grad=True)
    return cross_entropy(probs, y), flatten_grads(grads)


def train(net: DenseNet, data: LabeledDataset, cfg: TrainConfig) -> tuple[DenseNet, list[float]]:
    """Minibatch SGD (optionally with momentum) on softmax cross-entropy.

    The input network is left untouched; returns the trained copy and the mean
    loss of every epoch.
    """
    if data.features.shape[1] != net.input_dim:
        raise RejectedInput(f"data has {data.features.shape[1]} features, net expects {net.input_dim}")
    if data.class_count != net.output_dim or net.layers[-1].activation != "softmax":
        raise RejectedInput("training needs a softmax head with one unit per class")
    net = net.copy()
    if cfg.epochs == 0:
        return net, []
    X, y = data.features, data.labels
    n = len(y)
    if n == 0:
        raise RejectedInput("empty training set")
    beta, lr = cfg.beta, cfg.learning_rate
    vel = [(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in net.layers]
    history = []
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            acts = forward_all(net, xb)
            probs = acts[-1]
            total += -np.log(np.maximum(probs[np.arange(len(yb)), yb], 1e-300)).sum()
            dlogits = probs.copy()
            dlogits[np.arange(len(yb)), yb] -= 1.0
            dlogits /= len(yb)
            grads, _ = backward(net, acts, dlogits, logits_grad=True)
            for layer, (vw, vb), (dw, db) in zip(net.layers, vel, grads):
                if beta:
                    vw *= beta
                    vw -= lr * dw
                    vb *= beta
                    vb -= lr * db
                    layer.weights += vw
                    layer.biases += vb
                else:
                    layer.weights -= lr * dw
                    layer.biases -= lr * db
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(epoch)
        history.append(float(mean_loss))
    return net, history


def predict(net: DenseNet, X: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(forward(net, X), axis=1)


def evaluate(net: DenseNet, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise RejectedInput("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, data.features) == data.labels))


def grad_wrt_input(net: DenseNet, x, target) -> np.ndarray:
    """Gradient of mean((forward(net, x) - target)**2) with respect to ``x``."""
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise RejectedInput("input contains non-finite values")
    if x.shape != (net.input_dim,):
        raise RejectedInput(f"input length {x.size} != {net.input_dim}")
    if target.shape != (net.output_dim,):
        raise RejectedInput(f"target length {target.size} != {net.output_dim}")
    acts = forward_all(net, x[None, :])
    dy = 2.0 * (acts[-1] - target) / target.size
    _, dx = backward(net, acts, dy, need_params=False)
    return dx[0]


# --------------------------------------------------------------------------
# MODEL binary format

def serialize(net: DenseNet) -> bytes:
    parts = [MAGIC, struct.pack("<B", len(net.layers))]
    for l in net.layers:
        parts.append(struct.pack("<IIB", l.in_dim, l.out_dim, ACT_CODES[l.activation]))
    parts.append(net.params().astype("<f8").tobytes())
    return b"".join(parts)


def deserialize(blob: bytes) -> DenseNet:
    if len(blob) < 6 or blob[:5] != MAGIC:
        raise ParseError("bad magic")
    n_layers = blob[5]
    pos = 6
    shapes = []
    for _ in range(n_layers):
        if pos + 9 > len(blob):
            raise ParseError("truncated header")
        inp, out, code = struct.unpack_from("<IIB", blob, pos)
        pos += 9
        if code >= len(ACTIVATIONS):
            raise ParseError(f"unknown activation code {code}")
        shapes.append((inp, out, ACTIVATIONS[code]))
    if n_layers == 0:
        raise ParseError("model has no layers")
    for (_, out, _), (nxt_in, _, _) in zip(shapes, shapes[1:]):
        if out != nxt_in:
            raise ParseError("dimension inconsistency between layers")
    try:
        arch = Architecture(shapes[0][0], tuple(s[1] for s in shapes), tuple(s[2] for s in shapes))
    except RejectedInput as exc:
        raise ParseError(f"dimension inconsistency: {exc}") from exc
    need = arch.n_params * 8
    payload = blob[pos:]
    if len(payload) < need:
        raise ParseError("truncated payload")
    if len(payload) > need:
        raise ParseError("trailing bytes after payload")
    return unflatten(arch, np.frombuffer(payload, dtype="<f8").astype(np.float64))


def save_model(net: DenseNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(net))


def load_model(path) -> DenseNet:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def make_net(input_dim: int, widths: Sequence[int], activations: Sequence[str], seed: int) -> DenseNet:
    return Architecture(input_dim, tuple(widths), tuple(activations)).build(seed)
