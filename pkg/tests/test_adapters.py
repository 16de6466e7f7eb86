import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subexperts import numeric as nx
from subexperts.adapters import (AdapterConfig, LoRAAdapter, MoSELayerState, ScoreMask, SparseRouter,
                                 count_trainable, lora_forward, mask_size, masked_linear, moe_forward,
                                 mose_forward, param_breakdown, route, snapshot_masks)
from subexperts.errors import ConfigError, ContractError
from subexperts.numeric import DTensor


def sort_oracle_mask(scores, c):
    n = scores.size
    k = max(1, math.floor(c * n + 0.5))
    order = sorted(range(n), key=lambda i: (-scores.flat[i], i))[:k]
    m = np.zeros(n, dtype=bool)
    m[order] = True
    return m.reshape(scores.shape)


def brute_mose(state, x, masks):
    """Row-by-row evaluation of the masked mixture with explicit loops."""
    out = np.zeros((x.shape[0], state.d_out))
    w = state.router.W.data * masks["router"]
    for i, row in enumerate(x):
        logits = w @ row
        chosen = sorted(range(len(logits)), key=lambda j: (-logits[j], j))[:state.top_k]
        z = np.exp(logits[chosen] - logits[chosen].max())
        gates = z / z.sum()
        for g, j in zip(gates, chosen):
            e = state.experts[j]
            a = e.A.data * masks[f"e{j}.A"]
            b = e.B.data * masks[f"e{j}.B"]
            out[i] += g * (b @ (a @ row))
    return state.beta * out


@pytest.mark.parametrize("c,n,k", [(1.0, 10, 10), (0.29, 10, 3), (0.30, 7, 2), (0.01, 5, 1), (0.5, 8192, 4096)])
def test_mask_size(c, n, k):
    assert mask_size(c, n) == k


def test_mask_size_rejects_bad_density():
    with pytest.raises(ConfigError):
        mask_size(1.5, 10)
    with pytest.raises(ConfigError):
        mask_size(0.0, 10)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=40), st.sampled_from([0.29, 0.3, 0.4, 0.5, 1.0]))
def test_score_mask_matches_sort_oracle_with_ties(values, c):
    scores = np.array(values, dtype=float)
    sm = ScoreMask(DTensor(scores.copy()), c)
    np.testing.assert_array_equal(sm.derive(), sort_oracle_mask(scores, c))


def test_per_row_mask_ranks_each_row(rng):
    s = rng.random((3, 10))
    sm = ScoreMask(DTensor(s), 0.3, per_row=True)
    m = sm.derive()
    for r in range(3):
        np.testing.assert_array_equal(m[r], sort_oracle_mask(s[r], 0.3))
    assert m.sum() == sm.expected_popcount == 9


def test_stale_mask_is_a_contract_error(rng):
    w = DTensor(rng.normal(size=(3, 4)))
    sm = ScoreMask(DTensor(rng.random((3, 4))), 0.5)
    sm.derive()
    masked_linear(DTensor(rng.normal(size=(2, 4))), w, sm)
    sm.scores.data[0, 0] += 1.0
    with pytest.raises(ContractError):
        masked_linear(DTensor(rng.normal(size=(2, 4))), w, sm)


def test_route_example():
    w = np.zeros((4, 3))
    w[:, 0] = [3.0, 1.0, 2.0, 0.0]
    idx, gates = route(SparseRouter(DTensor(w), 2), DTensor(np.array([1.0, 0.0, 0.0])))
    assert sorted(idx) == [0, 2]
    assert gates == pytest.approx([math.exp(1) / (1 + math.exp(1)), 1 / (1 + math.exp(1))])


def _state(rng, n=3, k=2, c=0.4, d=8):
    st_ = MoSELayerState(d, 6, n, k, 2, 4.0, c, rng)
    for e in st_.experts:
        e.B.data[...] = rng.normal(size=e.B.shape)
    st_.derive_masks()
    return st_


def test_mose_forward_matches_brute_force(rng):
    state = _state(rng)
    x = rng.normal(size=(20, 8))
    out = mose_forward(state, DTensor(x)).data
    np.testing.assert_allclose(out, brute_mose(state, x, state.live_masks()), atol=1e-12)


def test_mose_frozen_masks_used_for_finished_tasks(rng):
    state = _state(rng)
    x = rng.normal(size=(5, 8))
    snap = snapshot_masks(state, 1)
    before = mose_forward(state, DTensor(x), task=1).data
    state.reinit_scores(rng)
    np.testing.assert_array_equal(mose_forward(state, DTensor(x), task=1).data, before)
    np.testing.assert_allclose(before, brute_mose(state, x, snap), atol=1e-12)
    with pytest.raises(ValueError):
        snap["router"][0, 0] = False
    with pytest.raises(ContractError):
        snapshot_masks(state, 1)
    with pytest.raises(ContractError):
        mose_forward(state, DTensor(x), task=2)


def test_mose_backward_follows_mask_rules(rng):
    state = _state(rng)
    x = DTensor(rng.normal(size=(4, 8)))
    nx.sum_all(mose_forward(state, x)).backward()
    for name, sm in state.score_masks().items():
        p = state.params()[name]
        assert np.all(p.grad[~sm.mask] == 0.0)
        assert sm.scores.grad is not None and np.any(sm.scores.grad[~sm.mask] != 0.0)


def test_moe_equals_mose_at_full_density(rng):
    state = _state(rng, c=1.0)
    x = rng.normal(size=(10, 8))
    experts = [(e.A, e.B) for e in state.experts]
    moe = moe_forward(experts, state.router.W, state.top_k, DTensor(x)).data
    np.testing.assert_allclose(state.beta * moe, mose_forward(state, DTensor(x)).data, atol=1e-10)


def test_lora_forward_formula(rng):
    a, b = DTensor(rng.normal(size=(2, 5))), DTensor(rng.normal(size=(3, 2)))
    x = rng.normal(size=(4, 5))
    np.testing.assert_allclose(lora_forward(a, b, 4.0, DTensor(x)).data, 4.0 * x @ a.data.T @ b.data.T,
                               atol=1e-12)
    lora = LoRAAdapter(5, 3, 2, 8.0, rng)
    assert lora.beta == 4.0 and np.all(lora.B.data == 0.0)


def test_lora_count_matches_published_size():
    cfg = AdapterConfig(kind="lora", r=8, alpha=32.0)
    assert count_trainable(cfg, 4096, 32) == 4_194_304


def test_desk_counts_by_hand():
    # one adapted layer (layer 0 excluded), q and v, two experts of rank 2 at width 64:
    # A and B have 128 entries each -> round(0.3 * 128) = 38 selected; router rows 64 -> 19
    mose = AdapterConfig(exclude=(0, 0))
    pc = param_breakdown(mose, 64, 2, prompt_len=1, prompt_layers=1, with_key=True)
    assert (pc.adapter, pc.router, pc.prompt, pc.key) == (2 * 2 * (38 + 38), 2 * 2 * 19, 64, 64)
    assert pc.total == 304 + 76 + 128
    assert count_trainable(AdapterConfig(kind="lora", r=8, alpha=32.0), 64, 2) == 2 * 2 * 8 * 128
    assert count_trainable(AdapterConfig(kind="moe", exclude=(0, 0)), 64, 2) == 2 * (2 * 2 * 128 + 2 * 64)
    # full density with one expert is LoRA plus one router row per site
    one = AdapterConfig(n_experts=1, top_k=1, c=1.0, r=2)
    assert count_trainable(one, 64, 2) == count_trainable(AdapterConfig(kind="lora", r=2), 64, 2) + 4 * 64


def test_adapter_config_validation():
    with pytest.raises(ConfigError, match="adapter.top_k"):
        AdapterConfig(n_experts=2, top_k=3).validate(2)
    with pytest.raises(ConfigError, match="adapter.exclude"):
        AdapterConfig(exclude=(0, 1)).validate(2)
    with pytest.raises(ConfigError, match="adapter.kind"):
        AdapterConfig(kind="dense").validate(2)
    cfg = AdapterConfig(exclude=(0, 0))
    assert cfg.layers(2) == [1] and cfg.skipped(2) == [0] and cfg.beta == 4.0
