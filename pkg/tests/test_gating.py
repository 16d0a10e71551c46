"""Routing policies, renormalization, placeholder handling, and the
single-site forward against a dense-mixture oracle."""

import numpy as np
import pytest

from moax.adapters import init_adapter, placeholder_adapter
from moax.errors import ConfigError, ContractError, ShapeError
from moax.gating import (ExpertLayerSite, GateNetwork, TopK, TopP, gate_probs,
                         moe_forward, renormalize, select_experts, select_topk,
                         select_topk_batch, select_topp, true_selected_count)


def test_topk_basic_and_ascending_order():
    probs = np.array([0.1, 0.5, 0.15, 0.25])
    assert select_topk(probs, 1) == [1]
    assert select_topk(probs, 2) == [1, 3]
    assert select_topk(probs, 4) == [0, 1, 2, 3]


def test_topk_ties_go_to_lowest_index():
    probs = np.array([0.25, 0.25, 0.25, 0.25])
    assert select_topk(probs, 2) == [0, 1]
    probs = np.array([0.2, 0.3, 0.3, 0.2])
    assert select_topk(probs, 1) == [1]
    assert select_topk(probs, 3) == [0, 1, 2]


def test_topk_bounds():
    with pytest.raises(ConfigError):
        select_topk(np.array([0.5, 0.5]), 0)
    with pytest.raises(ConfigError):
        select_topk(np.array([0.5, 0.5]), 3)
    with pytest.raises(ConfigError):
        TopK(0)


def test_topp_inclusive_boundary():
    probs = np.array([0.5, 0.25, 0.25])  # dyadic: cumulative sums are exact
    # 0.5 already reaches a 0.5 threshold: the boundary is inclusive
    assert select_topp(probs, 0.5) == [0]
    assert select_topp(probs, 0.6) == [0, 1]
    assert select_topp(probs, 0.75) == [0, 1]
    assert select_topp(probs, 0.8) == [0, 1, 2]


def test_topp_threshold_range():
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ConfigError):
            TopP(bad)
        with pytest.raises(ConfigError):
            select_topp(np.array([1.0]), bad)


def test_select_experts_dispatches_by_policy():
    probs = np.array([0.1, 0.7, 0.2])
    assert select_experts(probs, TopK(2)) == [1, 2]
    assert select_experts(probs, TopP(0.5)) == [1]


def test_topk_batch_equals_rowwise(seed_trials=50):
    rng = np.random.default_rng(21)
    for trial in range(seed_trials):
        n_exp = int(rng.integers(2, 9))
        rows = int(rng.integers(1, 6))
        probs = rng.dirichlet(np.ones(n_exp), size=rows)
        if trial % 3 == 0:
            probs[0, :] = 1.0 / n_exp  # exercise exact ties
        k = int(rng.integers(1, n_exp + 1))
        batch = select_topk_batch(probs, k)
        assert batch.shape == (rows, k)
        for t in range(rows):
            assert list(batch[t]) == select_topk(probs[t], k)


def test_topk_batch_validates_shape():
    with pytest.raises(ShapeError):
        select_topk_batch(np.ones(4), 1)
    with pytest.raises(ConfigError):
        select_topk_batch(np.ones((2, 3)) / 3, 4)


def test_renormalize_sums_to_one_and_is_proportional():
    probs = np.array([0.1, 0.2, 0.3, 0.4])
    w = renormalize(probs, [1, 3])
    assert abs(sum(w.values()) - 1.0) < 1e-12
    assert abs(w[3] / w[1] - 2.0) < 1e-12
    with pytest.raises(ContractError):
        renormalize(probs, [])


def make_site(n=4, m=3, experts=3, rank=2, policy=None, placeholders=0,
              seed=0, renorm_true_only=False):
    rng = np.random.default_rng(seed)
    exp = [init_adapter(n, m, rank, seed=100 + j) for j in range(experts)]
    for e in exp:
        e.b[...] = rng.normal(size=e.b.shape)  # give deltas real mass
    exp += [placeholder_adapter(n, m) for _ in range(placeholders)]
    gate = GateNetwork(weight=rng.normal(size=(len(exp), m)))
    return ExpertLayerSite(base_weight=rng.normal(size=(n, m)), experts=exp,
                           gate=gate, policy=policy or TopK(2),
                           renorm_true_only=renorm_true_only)


def dense_oracle(site, x):
    """(W + sum_k w_k A_k B_k) x with renormalized selected weights;
    placeholder terms are zero but keep their denominator mass."""
    probs = gate_probs(site.gate, x)
    selected = select_experts(probs, site.policy)
    if site.renorm_true_only:
        denom = [i for i in selected if not site.experts[i].is_placeholder]
    else:
        denom = selected
    w = site.base_weight.copy()
    if denom:
        weights = renormalize(probs, denom)
        for i in selected:
            e = site.experts[i]
            if not e.is_placeholder:
                w = w + weights[i] * (e.a @ e.b)
    return w @ x


def test_moe_forward_matches_dense_mixture():
    rng = np.random.default_rng(31)
    for trial in range(40):
        site = make_site(n=int(rng.integers(2, 9)), m=int(rng.integers(2, 9)),
                         experts=int(rng.integers(2, 5)), rank=1, seed=trial,
                         policy=TopK(int(rng.integers(1, 3))))
        x = rng.normal(size=site.base_weight.shape[1])
        assert np.allclose(moe_forward(site, x), dense_oracle(site, x), atol=1e-12, rtol=0)


def test_moe_forward_with_topp_matches_dense_mixture():
    rng = np.random.default_rng(32)
    for trial in range(20):
        site = make_site(experts=4, seed=trial, policy=TopP(0.7))
        x = rng.normal(size=3)
        assert np.allclose(moe_forward(site, x), dense_oracle(site, x), atol=1e-12, rtol=0)


def test_placeholders_zero_output_but_keep_denominator():
    site = make_site(experts=2, placeholders=2, seed=5, policy=TopK(2))
    x = np.ones(3)
    probs = gate_probs(site.gate, x)
    selected = select_experts(probs, site.policy)
    got = moe_forward(site, x)
    assert np.allclose(got, dense_oracle(site, x), atol=1e-12, rtol=0)
    if any(site.experts[i].is_placeholder for i in selected):
        # placeholder mass dilutes the true expert relative to a renormalized run
        true_site = make_site(experts=2, placeholders=2, seed=5, policy=TopK(2),
                              renorm_true_only=True)
        alt = moe_forward(true_site, x)
        base = site.base_weight @ x
        assert np.linalg.norm(got - base) <= np.linalg.norm(alt - base) + 1e-12


def test_all_placeholder_selection_returns_base_output():
    # gate rigged so both placeholders win the top-2 selection
    rng = np.random.default_rng(6)
    exp = [init_adapter(3, 3, 1, seed=j) for j in range(2)]
    for e in exp:
        e.b[...] = 1.0
    exp += [placeholder_adapter(3, 3), placeholder_adapter(3, 3)]
    gw = np.zeros((4, 3))
    gw[2:] = 5.0
    site = ExpertLayerSite(base_weight=rng.normal(size=(3, 3)), experts=exp,
                           gate=GateNetwork(weight=gw), policy=TopK(2))
    x = np.ones(3)
    assert select_experts(gate_probs(site.gate, x), site.policy) == [2, 3]
    assert np.array_equal(moe_forward(site, x), site.base_weight @ x)
    assert true_selected_count(site, [2, 3]) == 0
    assert true_selected_count(site, [0, 2]) == 1


def test_site_validation():
    exp = [init_adapter(3, 3, 1, seed=0)]
    gate = GateNetwork(weight=np.zeros((1, 3)))
    with pytest.raises(ConfigError):
        ExpertLayerSite(base_weight=np.zeros((3, 3)), experts=exp, gate=gate,
                        policy=TopK(2))  # k exceeds expert count
    with pytest.raises(ConfigError):
        ExpertLayerSite(base_weight=np.zeros((3, 3)),
                        experts=[placeholder_adapter(3, 3)],
                        gate=GateNetwork(weight=np.zeros((1, 3))), policy=TopK(1))
    with pytest.raises(ConfigError):
        ExpertLayerSite(base_weight=np.zeros((3, 3)), experts=exp,
                        gate=GateNetwork(weight=np.zeros((2, 3))), policy=TopK(1))


def test_gate_probs_are_a_distribution():
    rng = np.random.default_rng(8)
    gate = GateNetwork(weight=rng.normal(size=(5, 4)))
    p = gate_probs(gate, rng.normal(size=4))
    assert p.shape == (5,)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_zero_gate_routes_uniformly():
    gate = GateNetwork(weight=np.zeros((4, 3)))
    p = gate_probs(gate, np.array([1.0, -2.0, 0.5]))
    assert np.allclose(p, 0.25, atol=1e-15)
