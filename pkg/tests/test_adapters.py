"""Adapter construction, counting, and the factored-product contract."""

import numpy as np
import pytest

from moax.adapters import (DEFAULT_INIT_STD, LoraAdapter, adapter_delta,
                           init_adapter, placeholder_adapter)
from moax.errors import ConfigError, ContractError, ShapeError


def test_init_shapes_and_zero_b():
    ad = init_adapter(6, 4, 3, seed=0)
    assert ad.a.shape == (6, 3)
    assert ad.b.shape == (3, 4)
    assert np.all(ad.b == 0.0)
    assert not ad.is_placeholder


def test_init_is_seed_deterministic():
    a1 = init_adapter(5, 5, 2, seed=42)
    a2 = init_adapter(5, 5, 2, seed=42)
    a3 = init_adapter(5, 5, 2, seed=43)
    assert np.array_equal(a1.a, a2.a)
    assert not np.array_equal(a1.a, a3.a)


def test_init_statistics_match_requested_std():
    # one big adapter gives enough samples for tight moment estimates
    ad = init_adapter(200, 100, 50, seed=7, std=0.02)
    vals = ad.a.ravel()
    assert abs(vals.mean()) < 3 * 0.02 / np.sqrt(vals.size)
    assert abs(vals.std() - 0.02) < 0.001
    assert DEFAULT_INIT_STD == 0.02


def test_fresh_adapter_delta_is_zero():
    ad = init_adapter(4, 3, 2, seed=1)
    assert np.array_equal(adapter_delta(ad, np.ones(3)), np.zeros(4))


def test_factored_delta_equals_dense_product():
    rng = np.random.default_rng(11)
    for trial in range(20):
        n, m = rng.integers(2, 9, size=2)
        r = int(rng.integers(1, min(n, m) + 1))
        ad = init_adapter(int(n), int(m), r, seed=trial)
        ad.b[...] = rng.normal(size=ad.b.shape)
        x = rng.normal(size=int(m))
        dense = (ad.a @ ad.b) @ x
        assert np.allclose(adapter_delta(ad, x), dense, atol=1e-12, rtol=0)


def test_param_count_formula():
    assert init_adapter(16, 32, 4, seed=0).param_count() == 4 * (16 + 32)
    assert placeholder_adapter(16, 32).param_count() == 0


def test_rank_bounds_enforced():
    with pytest.raises(ConfigError):
        init_adapter(4, 4, 0, seed=0)
    with pytest.raises(ConfigError):
        init_adapter(4, 4, 5, seed=0)
    with pytest.raises(ConfigError):
        init_adapter(4, 4, 2, seed=0, std=0.0)


def test_placeholder_invariants():
    ph = placeholder_adapter(3, 3)
    assert ph.is_placeholder and ph.rank == 0 and ph.a is None and ph.b is None
    with pytest.raises(ContractError):
        adapter_delta(ph, np.zeros(3))
    with pytest.raises(ConfigError):
        LoraAdapter(n=3, m=3, rank=1, a=np.zeros((3, 1)), b=np.zeros((1, 3)),
                    is_placeholder=True)


def test_shape_validation():
    with pytest.raises(ShapeError):
        LoraAdapter(n=3, m=3, rank=1, a=np.zeros((3, 2)), b=np.zeros((1, 3)))
    ad = init_adapter(3, 4, 2, seed=0)
    with pytest.raises(ShapeError):
        adapter_delta(ad, np.zeros(3))  # expects length m = 4
