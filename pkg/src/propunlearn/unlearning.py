"""Property unlearning: nudge a trained model's parameters until a given
meta-classifier's output is (close to) uniform over the properties.

A round computes the gradient of the adversary's loss-to-uniform with respect
to the target parameters, takes one step, and keeps the step only if the
adversarial utility strictly drops; otherwise the learning rate is halved and
the round is retried from the old parameters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import RejectedInput, UnlearningFailed
from .meta import MetaClassifier, grad_kl_to_uniform, grad_mse_to_uniform, infer
from .nn import DenseNet, unflatten
from .seeding import derive_seed, rng as make_rng


def adv_utility(y) -> float:
    """Largest distance of any output entry from 1/k."""
    y = np.asarray(y, dtype=np.float64)
    return float(np.max(np.abs(y - 1.0 / y.size)))


@dataclass
class UnlearnConfig:
    initial_lr: float = 1.0
    tolerance: float = 0.01
    max_rounds: int = 200
    min_lr: float | None = None  # defaults to initial_lr / 2**20
    jitter_scale: float = 1e-3
    loss: str = "mse"  # "kl" keeps a usable gradient when the adversary is saturated
    seed: int = 0

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise RejectedInput("initial_lr must be > 0")
        if self.min_lr is None:
            self.min_lr = self.initial_lr / 2**20
        if not 0 < self.min_lr < self.initial_lr:
            raise RejectedInput("need 0 < min_lr < initial_lr")
        if not self.tolerance > 0:
            raise RejectedInput("tolerance must be > 0")
        if self.max_rounds < 1:
            raise RejectedInput("max_rounds must be >= 1")
        if self.jitter_scale < 0:
            raise RejectedInput("jitter_scale must be >= 0")
        if self.loss not in ("mse", "kl"):
            raise RejectedInput(f"unknown unlearning loss {self.loss!r}")


@dataclass
class RoundRecord:
    utility_before: float
    utility_after: float
    lr: float
    accepted: bool


@dataclass
class UnlearnTrace:
    initial_utility: float
    rounds: list[RoundRecord] = field(default_factory=list)
    final_utility: float = 0.0
    terminated_by: str = "converged"  # converged | round_cap | lr_floor
    jittered: bool = False

    @property
    def accepted_utilities(self) -> list[float]:
        return [r.utility_after for r in self.rounds if r.accepted]

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    @property
    def n_accepted(self) -> int:
        return sum(r.accepted for r in self.rounds)

    def jsonl(self) -> str:
        return "".join(json.dumps({"round": i, **asdict(r)}, sort_keys=True) + "\n" for i, r in enumerate(self.rounds))

    def summary(self) -> dict:
        return {
            "initial_utility": self.initial_utility,
            "final_utility": self.final_utility,
            "rounds": self.n_rounds,
            "accepted": self.n_accepted,
            "terminated_by": self.terminated_by,
            "jittered": self.jittered,
        }


def _grad(meta, params, loss):
    return grad_mse_to_uniform(meta, params) if loss == "mse" else grad_kl_to_uniform(meta, params)


def unlearn_params(params: np.ndarray, meta: MetaClassifier, cfg: UnlearnConfig) -> tuple[np.ndarray, UnlearnTrace]:
    """Parameter-vector version of :func:`property_unlearn`."""
    p = np.array(params, dtype=np.float64)
    y = infer(meta, p)
    u = adv_utility(y)
    trace = UnlearnTrace(initial_utility=u, final_utility=u)
    lr = cfg.initial_lr
    while u > cfg.tolerance:
        if trace.n_rounds >= cfg.max_rounds:
            trace.terminated_by = "round_cap"
            break
        if lr < cfg.min_lr:
            trace.terminated_by = "lr_floor"
            break
        g = _grad(meta, p, cfg.loss)
        if not np.all(np.isfinite(g)):
            raise UnlearningFailed("non-finite unlearning gradient", trace)
        if not np.any(g) and not trace.jittered and cfg.jitter_scale > 0:
            # saturated adversary: no gradient signal, perturb once to get off the plateau
            rms = float(np.sqrt(np.mean(p**2))) or 1.0
            p = p + make_rng(derive_seed(cfg.seed, 0x717)).normal(0.0, cfg.jitter_scale * rms, p.shape)
            trace.jittered = True
            y = infer(meta, p)
            u = adv_utility(y)
            continue
        cand = p - lr * g
        u_new = adv_utility(infer(meta, cand))
        accepted = u_new < u
        trace.rounds.append(RoundRecord(u, u_new, lr, accepted))
        if accepted:
            p, u = cand, u_new
        else:
            lr /= 2.0
    else:
        trace.terminated_by = "converged"
    trace.final_utility = u
    return p, trace


def property_unlearn(m: DenseNet, meta: MetaClassifier, cfg: UnlearnConfig) -> tuple[DenseNet, UnlearnTrace]:
    if m.architecture != meta.target_arch:
        raise RejectedInput("target architecture differs from the meta-classifier's")
    p, trace = unlearn_params(m.params(), meta, cfg)
    return unflatten(m.architecture, p), trace


# ---------------------------------------------------------------------------
# iterative unlearning against a sequence of adversaries

@dataclass
class IterativeConfig:
    unlearn_adversaries: list[MetaClassifier]
    test_adversaries: list[MetaClassifier]
    folds: int = 1
    seed: int = 0

    def validate(self) -> None:
        used = frozenset().union(*[a.trained_on for a in self.unlearn_adversaries]) if self.unlearn_adversaries else frozenset()
        for i, t in enumerate(self.test_adversaries):
            if t.trained_on & used:
                raise RejectedInput(f"test adversary {i} shares training shadows with the unlearning adversaries")


@dataclass
class IterativeResult:
    model: DenseNet
    traces: list[UnlearnTrace]
    order: list[int]
    # test_outputs[t, a] is test adversary a's output vector after t unlearning iterations
    test_outputs: np.ndarray


def iterative_unlearn(m: DenseNet, it_cfg: IterativeConfig, cfg: UnlearnConfig, target_id: int = 0) -> IterativeResult:
    """Unlearn against every unlearning adversary in a seeded random order,
    recording the test adversaries' outputs before and after each iteration."""
    it_cfg.validate()
    n = len(it_cfg.unlearn_adversaries)
    order = make_rng(it_cfg.seed, target_id).permutation(n).tolist()
    p = m.params()

    def snapshot(params):
        if not it_cfg.test_adversaries:
            return np.zeros((0, 0))
        return np.stack([infer(t, params) for t in it_cfg.test_adversaries])

    outputs = [snapshot(p)]
    traces = []
    for step, idx in enumerate(order):
        step_cfg = UnlearnConfig(cfg.initial_lr, cfg.tolerance, cfg.max_rounds, cfg.min_lr, cfg.jitter_scale,
                                 cfg.loss, derive_seed(cfg.seed, target_id, step))
        p, trace = unlearn_params(p, it_cfg.unlearn_adversaries[idx], step_cfg)
        traces.append(trace)
        outputs.append(snapshot(p))
    return IterativeResult(unflatten(m.architecture, p), traces, order, np.stack(outputs))


# ---------------------------------------------------------------------------
# consecutive multi-property unlearning

@dataclass
class MultiResult:
    model: DenseNet
    traces: list[UnlearnTrace]
    categories: list[str]
    # utilities[s, c]: adversarial utility of category c's adversary after s stages (row 0 = before)
    utilities: np.ndarray


def multi_property_unlearn(m: DenseNet, metas: list[tuple[str, MetaClassifier]], cfg: UnlearnConfig) -> MultiResult:
    """Unlearn one property category after the other, in the given order."""
    names = [n for n, _ in metas]
    p = m.params()

    def utilities(params):
        return [adv_utility(infer(meta, params)) for _, meta in metas]

    rows = [utilities(p)]
    traces = []
    for stage, (_, meta) in enumerate(metas):
        if meta.target_arch != m.architecture:
            raise RejectedInput("target architecture differs from a meta-classifier's")
        step_cfg = UnlearnConfig(cfg.initial_lr, cfg.tolerance, cfg.max_rounds, cfg.min_lr, cfg.jitter_scale,
                                 cfg.loss, derive_seed(cfg.seed, stage))
        p, trace = unlearn_params(p, meta, step_cfg)
        traces.append(trace)
        rows.append(utilities(p))
    return MultiResult(unflatten(m.architecture, p), traces, names, np.array(rows).reshape(len(rows), len(metas)))
