"""Weight-space diagnostics: exact t-SNE, the distance-to-centre adversary and
gradient saliency of meta-classifiers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import RejectedInput
from .meta import MetaClassifier, grad_mse_to_uniform
from .seeding import rng as make_rng

PERPLEXITY_TOL = 1e-5
EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250


@dataclass
class Embedding2D:
    points: np.ndarray
    perplexity: float
    final_kl: float
    seed: int
    initial_kl: float = float("nan")
    kl_after_exaggeration: float = float("nan")
    realized_perplexity: np.ndarray | None = None


def _sq_distances(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def conditional_affinities(D: np.ndarray, perplexity: float, max_steps: int = 200):
    """Row-wise Gaussian affinities whose entropy matches log(perplexity).

    Bisection on the precision beta, all rows at once. Returns (P, realised
    perplexity per row).
    """
    n = len(D)
    target = np.log(perplexity)
    beta = np.ones(n)
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    off = ~np.eye(n, dtype=bool)
    # shift by the row minimum for numerical stability (does not change P)
    Dm = np.where(off, D, np.inf)
    Ds = Dm - Dm.min(axis=1, keepdims=True)
    for _ in range(max_steps):
        E = np.exp(-Ds * beta[:, None])
        S = E.sum(axis=1)
        P = E / S[:, None]
        H = np.log(S) + beta * (np.where(off, Ds, 0.0) * P).sum(axis=1)
        diff = H - target
        done = np.abs(diff) <= PERPLEXITY_TOL
        if done.all():
            break
        up = diff > 0  # entropy too high -> increase precision
        lo = np.where(up & ~done, beta, lo)
        hi = np.where(~up & ~done, beta, hi)
        new = np.where(np.isinf(hi), beta * 2.0, np.where(np.isinf(lo), beta / 2.0, (lo + hi) / 2.0))
        beta = np.where(done, beta, new)
    return P, np.exp(H)


def _kl(P, Q):
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def tsne_embed(vectors, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
               learning_rate: float = 200.0) -> Embedding2D:
    """Exact O(N^2) t-SNE to two dimensions.

    Momentum 0.5 then 0.8, early exaggeration x12, both switched at iteration
    250; per-coordinate adaptive gains as in the reference implementation.
    Exact duplicate inputs share one embedded position.
    """
    X = np.asarray(vectors, dtype=np.float64)
    n = len(X)
    if X.ndim != 2 or n < 2:
        raise RejectedInput("need an N x d matrix with N >= 2")
    if not 0 < perplexity or n < 3 * perplexity:
        raise RejectedInput(f"perplexity {perplexity} too large for {n} points (need N >= 3*perplexity)")
    Pc, realized = conditional_affinities(_sq_distances(X), perplexity)
    P = (Pc + Pc.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)

    gen = make_rng(seed)
    Y = gen.normal(0.0, 1e-4, size=(n, 2))
    # identical inputs have identical gradients in exact arithmetic; tie them to
    # their first occurrence so rounding noise cannot pull them apart
    _, first, inverse = np.unique(X, axis=0, return_index=True, return_inverse=True)
    rep = first[inverse.ravel()]
    tied = len(first) < n
    Y = Y[rep]
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    initial_kl = kl_exag = float("nan")
    for it in range(iterations):
        exag = EXAGGERATION if it < EXAGGERATION_ITERS else 1.0
        momentum = 0.5 if it < EXAGGERATION_ITERS else 0.8
        num = 1.0 / (1.0 + _sq_distances(Y))
        np.fill_diagonal(num, 0.0)
        Q = num / num.sum()
        if it == 0:
            initial_kl = _kl(P, Q)
        if it == EXAGGERATION_ITERS:
            kl_exag = _kl(P, Q)
        W = (exag * P - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
        same = (grad > 0) == (update > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        if tied:
            Y, update, gains = Y[rep], update[rep], gains[rep]
        Y -= Y.mean(axis=0)
    num = 1.0 / (1.0 + _sq_distances(Y))
    np.fill_diagonal(num, 0.0)
    final_kl = _kl(P, num / num.sum())
    return Embedding2D(Y, float(perplexity), final_kl, seed, initial_kl, kl_exag, realized)


# ---------------------------------------------------------------------------
# distance-threshold adversary

@dataclass
class DistanceAdversary:
    center: np.ndarray
    threshold: float
    orientation: str  # "A-inside" or "B-inside"

    def predict(self, points) -> np.ndarray:
        d = np.linalg.norm(np.atleast_2d(points) - self.center, axis=1)
        inside = d < self.threshold
        return np.where(inside, 0, 1) if self.orientation == "A-inside" else np.where(inside, 1, 0)


def _threshold_candidates(d_sorted: np.ndarray) -> np.ndarray:
    lo_d, hi_d = d_sorted[:-1], d_sorted[1:]
    mids = (lo_d + hi_d) / 2.0
    # one ulp apart the midpoint rounds onto an endpoint; "< hi" still splits them
    mids = np.where(mids > lo_d, mids, hi_d)
    lo = d_sorted[0] / 2.0 if d_sorted[0] > 0 else 1e-12
    return np.concatenate([[lo], mids, [d_sorted[-1] + 1.0]])


def fit_distance_adversary(embedding, labels) -> tuple[DistanceAdversary, float]:
    """Choose centre (centroid), threshold and orientation maximising training accuracy.

    Label 0 is property A. Every threshold between consecutive sorted
    distances is tried, for both orientations.
    """
    pts = embedding.points if isinstance(embedding, Embedding2D) else np.asarray(embedding, dtype=np.float64)
    y = np.asarray(labels)
    center = pts.mean(axis=0)
    d = np.linalg.norm(pts - center, axis=1)
    order = np.argsort(d, kind="stable")
    ds, ys = d[order], y[order]
    cands = _threshold_candidates(ds)
    n = len(y)
    # inside count of label 0 / 1 for threshold t = number of sorted distances < t
    cuts = np.searchsorted(ds, cands, side="left")
    a_cum = np.concatenate([[0], np.cumsum(ys == 0)])
    b_cum = np.concatenate([[0], np.cumsum(ys != 0)])
    a_in, b_in = a_cum[cuts], b_cum[cuts]
    a_tot, b_tot = a_cum[-1], b_cum[-1]
    acc_a_inside = (a_in + (b_tot - b_in)) / n
    acc_b_inside = (b_in + (a_tot - a_in)) / n
    ia, ib = int(np.argmax(acc_a_inside)), int(np.argmax(acc_b_inside))
    if acc_a_inside[ia] >= acc_b_inside[ib]:
        adv, acc = DistanceAdversary(center, float(cands[ia]), "A-inside"), acc_a_inside[ia]
    else:
        adv, acc = DistanceAdversary(center, float(cands[ib]), "B-inside"), acc_b_inside[ib]
    return adv, float(acc)


# ---------------------------------------------------------------------------
# saliency

def saliency(meta: MetaClassifier, target_params) -> np.ndarray:
    """Absolute gradient of the adversary's squared distance-to-uniform per target parameter."""
    return np.abs(grad_mse_to_uniform(meta, target_params))


def saliency_similarity(s1, s2) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    r1, r2 = rankdata(s1), rankdata(s2)
    if len(r1) != len(r2):
        raise RejectedInput("saliency vectors differ in length")
    r1 = r1 - r1.mean()
    r2 = r2 - r2.mean()
    denom = np.sqrt((r1 * r1).sum() * (r2 * r2).sum())
    if denom == 0:
        return float("nan")
    return float((r1 * r2).sum() / denom)
