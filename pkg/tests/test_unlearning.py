import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from propunlearn.errors import RejectedInput
from propunlearn.meta import build_meta, infer, train_meta
from propunlearn.nn import Architecture, TrainConfig, unflatten
from propunlearn.shadows import ShadowCollection, ShadowEntry
from propunlearn.unlearning import (
    IterativeConfig,
    UnlearnConfig,
    adv_utility,
    iterative_unlearn,
    multi_property_unlearn,
    property_unlearn,
    unlearn_params,
)

ARCH = Architecture(5, (6, 2), ("relu", "softmax"))


def collection(n_per, seed, offset=0, scale=3.0):
    gen = np.random.default_rng(seed)
    entries = [ShadowEntry(gen.normal(0, 0.3, ARCH.n_params) * (scale if label else 1.0), label, offset + label * n_per + j)
               for label in (0, 1) for j in range(n_per)]
    return ShadowCollection(ARCH, entries, 2)


def make_meta(seed, offset):
    meta, acc = train_meta(build_meta(ARCH, 2, seed=seed), collection(40, seed, offset), TrainConfig(0.01, 16, 20, seed=seed))
    return meta


@pytest.fixture(scope="module")
def metas():
    # seed 1 first: on this target both losses converge (other seeds can stall in a relu kink)
    return [make_meta(s, 1000 * s) for s in (1, 0, 2, 3)]


@pytest.fixture(scope="module")
def target():
    # a property-B style target the metas are confident about
    return unflatten(ARCH, collection(1, 123, offset=10**6).entries[1].params)


def dead_meta():
    """rho's hidden units are all dead, so the output is a saturated constant with zero gradient."""
    meta = build_meta(ARCH, 2, seed=0)
    for layer in meta.rho.layers[:-1]:
        layer.weights[:] = 0.0
        layer.biases[:] = -1.0
    meta.rho.layers[-1].biases[:] = [6.0, -6.0]
    return meta


# ---------------------------------------------------------------------------
# adv_utility

def test_adv_utility_examples():
    assert adv_utility([0.5, 0.5]) == 0.0
    assert adv_utility([0.923, 0.077]) == pytest.approx(0.423)
    assert adv_utility([1.0, 0.0, 0.0]) == pytest.approx(2 / 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=6))
def test_adv_utility_range(w):
    y = np.array(w) / np.sum(w)
    k = len(y)
    assert 0.0 <= adv_utility(y) <= (k - 1) / k + 1e-12


# ---------------------------------------------------------------------------
# single-adversary unlearning

def test_already_uniform_target_is_unchanged(target):
    meta = build_meta(ARCH, 2, seed=0, zero_head=True)
    out, trace = property_unlearn(target, meta, UnlearnConfig())
    assert trace.n_rounds == 0 and trace.terminated_by == "converged"
    assert np.array_equal(out.params(), target.params())


@pytest.mark.parametrize("loss", ["mse", "kl"])
def test_converges_with_strictly_decreasing_accepted_utilities(metas, target, loss):
    meta = metas[0]
    assert adv_utility(infer(meta, target.params())) > 0.1
    out, trace = property_unlearn(target, meta, UnlearnConfig(initial_lr=1.0, loss=loss, max_rounds=500))
    assert trace.terminated_by == "converged"
    assert trace.final_utility <= 0.01
    assert adv_utility(infer(meta, out.params())) == trace.final_utility
    acc = [trace.initial_utility] + trace.accepted_utilities
    assert all(b < a for a, b in zip(acc, acc[1:]))
    assert all(not r.accepted for r in trace.rounds if r.utility_after >= r.utility_before)


def test_round_cap(metas, target):
    _, trace = property_unlearn(target, metas[0], UnlearnConfig(initial_lr=1e-6, max_rounds=1))
    assert trace.terminated_by == "round_cap" and trace.n_rounds == 1


def test_lr_floor_bounds_rejections():
    cfg = UnlearnConfig(initial_lr=1.0, jitter_scale=0.0, max_rounds=10**6)
    _, trace = unlearn_params(np.ones(ARCH.n_params), dead_meta(), cfg)
    assert trace.terminated_by == "lr_floor"
    assert trace.n_rounds == 21  # lr 1, 1/2, ..., 2**-20 all rejected, then below the floor
    assert trace.final_utility == trace.initial_utility


def test_jitter_applied_once_on_saturated_start():
    p0 = np.ones(ARCH.n_params)
    p, trace = unlearn_params(p0, dead_meta(), UnlearnConfig(jitter_scale=1e-3, seed=5))
    assert trace.jittered
    assert 0 < np.max(np.abs(p - p0)) < 0.01
    p2, _ = unlearn_params(p0, dead_meta(), UnlearnConfig(jitter_scale=1e-3, seed=5))
    assert np.array_equal(p, p2)


def test_trace_jsonl_records_every_round(metas, target):
    _, trace = property_unlearn(target, metas[0], UnlearnConfig(loss="kl"))
    lines = [json.loads(l) for l in trace.jsonl().splitlines()]
    assert len(lines) == trace.n_rounds
    assert set(lines[0]) == {"round", "utility_before", "utility_after", "lr", "accepted"}


def test_architecture_mismatch(metas):
    other = Architecture(5, (4, 2), ("relu", "softmax")).build(0)
    with pytest.raises(RejectedInput):
        property_unlearn(other, metas[0], UnlearnConfig())


def test_config_validation():
    with pytest.raises(RejectedInput):
        UnlearnConfig(initial_lr=0.0)
    with pytest.raises(RejectedInput):
        UnlearnConfig(min_lr=2.0)
    with pytest.raises(RejectedInput):
        UnlearnConfig(loss="hinge")
    assert UnlearnConfig(initial_lr=2.0).min_lr == 2.0 / 2**20


# ---------------------------------------------------------------------------
# iterative

def test_iterative_n0_records_initial_outputs(metas, target):
    res = iterative_unlearn(target, IterativeConfig([], metas[2:]), UnlearnConfig(loss="kl"))
    assert res.test_outputs.shape == (1, 2, 2)
    assert np.array_equal(res.test_outputs[0, 0], infer(metas[2], target.params()))
    assert np.array_equal(res.model.params(), target.params())


def test_iterative_n1_equals_single_unlearning(metas, target):
    cfg = UnlearnConfig(loss="kl")
    res = iterative_unlearn(target, IterativeConfig([metas[0]], metas[2:]), cfg)
    single, trace = property_unlearn(target, metas[0], cfg)
    assert np.array_equal(res.model.params(), single.params())
    assert res.traces[0].accepted_utilities == trace.accepted_utilities
    assert res.test_outputs.shape == (2, 2, 2)


def test_iterative_order_is_seeded_permutation(metas, target):
    it = IterativeConfig(metas[:2], metas[2:], seed=3)
    a = iterative_unlearn(target, it, UnlearnConfig(loss="kl"), target_id=4)
    b = iterative_unlearn(target, it, UnlearnConfig(loss="kl"), target_id=4)
    assert sorted(a.order) == [0, 1] and a.order == b.order
    assert np.array_equal(a.model.params(), b.model.params())


def test_iterative_rejects_shared_training_shadows(metas, target):
    with pytest.raises(RejectedInput, match="shares training shadows"):
        iterative_unlearn(target, IterativeConfig([metas[0]], [metas[0]]), UnlearnConfig())


# ---------------------------------------------------------------------------
# multi-property

def test_multi_empty_list_is_identity(target):
    res = multi_property_unlearn(target, [], UnlearnConfig())
    assert np.array_equal(res.model.params(), target.params()) and res.traces == []


def test_multi_single_category_equals_single_unlearning(metas, target):
    cfg = UnlearnConfig(loss="kl")
    res = multi_property_unlearn(target, [("a", metas[0])], cfg)
    single, _ = property_unlearn(target, metas[0], cfg)
    assert np.array_equal(res.model.params(), single.params())
    assert res.utilities.shape == (2, 1) and res.utilities[-1, 0] <= 0.01


def test_multi_records_cross_utilities(metas, target):
    res = multi_property_unlearn(target, [("a", metas[0]), ("b", metas[1])], UnlearnConfig(loss="kl"))
    assert res.categories == ["a", "b"] and res.utilities.shape == (3, 2)
    assert res.utilities[1, 0] == res.traces[0].final_utility
    assert res.utilities[2, 1] == res.traces[1].final_utility


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), loss=st.sampled_from(["mse", "kl"]), max_rounds=st.integers(1, 60))
def test_acceptance_is_monotone_and_loop_terminates(metas, seed, loss, max_rounds):
    p = np.random.default_rng(seed).normal(0, 0.5, ARCH.n_params)
    _, trace = unlearn_params(p, metas[1], UnlearnConfig(loss=loss, max_rounds=max_rounds))
    acc = [trace.initial_utility] + trace.accepted_utilities
    assert all(b < a for a, b in zip(acc, acc[1:]))
    assert trace.n_rounds <= max_rounds
    assert trace.final_utility == acc[-1]
    if trace.terminated_by == "converged":
        assert trace.final_utility <= 0.01
