"""Shared builders for small test fixtures."""

import numpy as np
import pytest

from moax.allocation import AllocationPlan, SiteSpec
from moax.gating import TopK
from moax.model import ToyModelConfig, build_model, toy_sites


def make_plan(n_layers=2, experts=2, rank=2, k=1, placeholders=0,
              sites=(SiteSpec("w", 8, 8),), name="test", policy=None, ranks=None):
    return AllocationPlan(
        name=name,
        n_layers=n_layers,
        expert_counts=(experts,) * n_layers,
        ranks=tuple(ranks) if ranks is not None else (rank,) * n_layers,
        placeholder_counts=(placeholders,) * n_layers,
        policy=policy or TopK(k),
        sites=tuple(sites),
    )


def make_model_config(n_layers=2, experts=2, rank=2, k=1, placeholders=0, *,
                      d_model=8, d_ff=16, vocab_size=16, seq_len=4, n_heads=2,
                      adapter_sites="ffn", nonlinearity="tanh",
                      renorm_true_only=False, policy=None, ranks=None):
    shell = ToyModelConfig(n_layers=n_layers, d_model=d_model, d_ff=d_ff,
                           n_heads=n_heads, vocab_size=vocab_size, seq_len=seq_len,
                           adapter_sites=adapter_sites)
    plan = make_plan(n_layers=n_layers, experts=experts, rank=rank, k=k,
                     placeholders=placeholders, sites=toy_sites(shell), policy=policy,
                     ranks=ranks)
    return ToyModelConfig(n_layers=n_layers, d_model=d_model, d_ff=d_ff,
                          n_heads=n_heads, vocab_size=vocab_size, seq_len=seq_len,
                          adapter_sites=adapter_sites, nonlinearity=nonlinearity,
                          renorm_true_only=renorm_true_only, plan=plan)


@pytest.fixture
def tiny_model():
    return build_model(make_model_config(), seed=5)


def random_tokens(cfg, batch, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, cfg.vocab_size, size=(batch, cfg.seq_len))
