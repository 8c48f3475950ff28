"""Model structure tests: shapes, causality, deterministic init, and group
hashing."""

import numpy as np
import pytest

from actlm.config import ArchConfig
from actlm.model import GROUP_NAMES, base_forward, init_model


CFG = ArchConfig(vocab_size=11, d_model=8, n_heads=2, max_seq_len=12,
                 intermediate_dim=16, codebook_size=4)


def test_base_forward_shapes():
    state = init_model(CFG, 0)
    tokens = np.random.default_rng(0).integers(0, 11, size=(3, 7))
    e_l, logits = base_forward(state.groups["base"], CFG, tokens)
    assert e_l.shape == (3, 7, 8)
    assert logits.shape == (3, 7, 11)


def test_base_forward_is_causal():
    state = init_model(CFG, 0)
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, 11, size=(1, 8))
    _, logits = base_forward(state.groups["base"], CFG, tokens)
    for t in range(1, 8):
        mutated = tokens.copy()
        mutated[0, t] = (mutated[0, t] + 1 + rng.integers(0, 9)) % 11
        _, logits2 = base_forward(state.groups["base"], CFG, mutated)
        np.testing.assert_array_equal(logits.data[:, :t], logits2.data[:, :t])
        assert not np.array_equal(logits.data[:, t], logits2.data[:, t])


def test_init_is_deterministic():
    a, b = init_model(CFG, 3), init_model(CFG, 3)
    assert a.hashes() == b.hashes()
    c = init_model(CFG, 4)
    assert a.hashes() != c.hashes()


def test_all_groups_present():
    state = init_model(CFG, 0)
    assert set(state.groups) == set(GROUP_NAMES)
    assert state.groups["q_target"].keys() == state.groups["q_online"].keys()
    for k in state.groups["q_online"]:
        np.testing.assert_array_equal(state.groups["q_online"][k].data,
                                      state.groups["q_target"][k].data)


def test_group_hash_tracks_content():
    state = init_model(CFG, 0)
    before = state.group_hash("policy")
    first = next(iter(state.groups["policy"].values()))
    first.data[...] += 1.0
    assert state.group_hash("policy") != before


def test_params_flattening_and_group_selection():
    state = init_model(CFG, 0)
    sub = state.params("policy", "codebook")
    assert all(k.startswith(("policy/", "codebook/")) for k in sub)
    assert "codebook/codes" in sub


def test_rejects_bad_inputs():
    state = init_model(CFG, 0)
    with pytest.raises(ValueError):
        base_forward(state.groups["base"], CFG, np.zeros(5, dtype=int))
    with pytest.raises(ValueError):
        base_forward(state.groups["base"], CFG,
                     np.zeros((1, CFG.max_seq_len + 1), dtype=int))
    with pytest.raises(ValueError):
        base_forward(state.groups["base"], CFG, np.full((1, 3), 11))


def test_arch_config_validation():
    with pytest.raises(ValueError):
        ArchConfig(d_model=9, n_heads=2)
    with pytest.raises(ValueError):
        ArchConfig(codebook_size=1)
    with pytest.raises(ValueError):
        ArchConfig(eos_token_id=99)
