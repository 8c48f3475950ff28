"""Training mechanics: optimizer arithmetic, stage freezing, loss wiring,
leave-one-out policy gradients, and the Double-DQN update."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actlm import autodiff as ad
from actlm.autodiff import Tape, Tensor
from actlm.config import ArchConfig, TrainConfig
from actlm.model import base_forward, init_model
from actlm.training import (AdamW, Transition, collect_grads, dqn_step,
                            dqn_target, eval_base_ce, fta_actions,
                            inverse_action_labels, loss_base_ar, loss_fta,
                            loss_pre1, loss_pre2, q_values_fn, rl_update,
                            rollout_batch, sync_target, train_bc, train_rl,
                            train_stage1)


CFG = ArchConfig(vocab_size=9, d_model=8, n_heads=2, max_seq_len=16,
                 intermediate_dim=16, codebook_size=4)


def small_state(seed=0):
    return init_model(CFG, seed)


def small_tokens(seed=0, b=3, t=7):
    return np.random.default_rng(seed).integers(0, 9, size=(b, t))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def test_adamw_first_step_matches_manual_update():
    p = Tensor(np.array([1.0, -2.0]))
    cfg = TrainConfig(learning_rate=0.1, grad_clip_norm=1e9)
    opt = AdamW({"p": p}, cfg)
    g = np.array([0.5, -0.25])
    opt.step({"p": g.copy()})
    # bias-corrected first Adam step: update = g / (|g| + eps)
    expected = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + cfg.adam_eps)
    np.testing.assert_allclose(p.data, expected, rtol=1e-5)


def test_adamw_clips_by_global_norm():
    p = Tensor(np.zeros(4))
    cfg = TrainConfig(learning_rate=1.0, grad_clip_norm=1.0)
    opt = AdamW({"p": p}, cfg)
    g = np.full(4, 5.0)  # norm 10 -> scaled by 0.1
    report = opt.step({"p": g.copy()})
    np.testing.assert_allclose(report["grad_norm"], 10.0, rtol=1e-6)
    # effective gradient 0.5 per coordinate; direction must be preserved
    assert (p.data < 0).all()


def test_adamw_skips_nonfinite_gradients():
    p = Tensor(np.ones(2))
    opt = AdamW({"p": p}, TrainConfig())
    report = opt.step({"p": np.array([1.0, np.nan])})
    assert report == {"skipped_nonfinite": 1.0}
    np.testing.assert_array_equal(p.data, np.ones(2))
    assert opt.t == 0


def test_adamw_decoupled_weight_decay():
    p = Tensor(np.array([2.0]))
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5, grad_clip_norm=1e9)
    opt = AdamW({"p": p}, cfg)
    opt.step({"p": np.zeros(1)})
    # zero gradient: only the decay term moves the weight
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.1 * 0.5)], rtol=1e-6)


# ---------------------------------------------------------------------------
# Losses and freezing
# ---------------------------------------------------------------------------

def test_transition_rejects_nonterminal_reward():
    with pytest.raises(ValueError):
        Transition(np.array([1]), 0, np.array([1, 2]), 1.0, False)


def test_loss_pre1_freezes_base():
    state = small_state()
    tokens = small_tokens()
    with Tape() as tape:
        total, _, _ = loss_pre1(state, tokens, TrainConfig(),
                                rng=np.random.default_rng(0), mode="train")
        grads = tape.gradients(total)
    for name, p in state.params("base").items():
        np.testing.assert_array_equal(tape.grad(grads, p), np.zeros_like(p.data))
    moving = collect_grads(tape, grads, state.params("inverse", "merge", "codebook"))
    assert any(np.abs(g).sum() > 0 for g in moving.values())


def test_loss_pre1_regularizer_bounds():
    """mean sum g log g lies in [-ln N, 0]."""
    for seed in range(5):
        state = small_state(seed)
        with Tape():
            _, parts, _ = loss_pre1(state, small_tokens(seed), TrainConfig(),
                                    rng=np.random.default_rng(seed), mode="train")
        assert -np.log(CFG.codebook_size) - 1e-5 <= parts["L_reg"] <= 1e-6


def test_loss_pre1_vq_parts():
    state = small_state()
    with Tape():
        total, parts, index = loss_pre1(state, small_tokens(), TrainConfig(),
                                        assignment="vq")
    assert set(parts) == {"L_predict", "L_commit", "L_codebook", "total"}
    assert index.shape == (3, 6)
    np.testing.assert_allclose(
        parts["total"],
        parts["L_predict"] + parts["L_codebook"] + 0.25 * parts["L_commit"],
        rtol=1e-5)


def test_inverse_action_labels_shape_and_range():
    state = small_state()
    labels = inverse_action_labels(state, small_tokens(), 1.0)
    assert labels.shape == (3, 6)
    assert labels.min() >= 0 and labels.max() < CFG.codebook_size


def test_loss_pre2_only_moves_policy():
    state = small_state()
    with Tape() as tape:
        loss, _, _ = loss_pre2(state, small_tokens())
        grads = tape.gradients(loss)
    for p in state.params("base", "inverse", "merge", "codebook").values():
        np.testing.assert_array_equal(tape.grad(grads, p), np.zeros_like(p.data))
    assert any(np.abs(g).sum() > 0
               for g in collect_grads(tape, grads, state.params("policy")).values())


def test_loss_fta_only_moves_base():
    state = small_state()
    tokens = small_tokens()
    aidx = fta_actions(state, tokens, "FTA-I", 1.0)
    with Tape() as tape:
        loss, _ = loss_fta(state, tokens, 3, aidx)
        grads = tape.gradients(loss)
    # actions are held fixed: no gradient into the selector or the codes
    # (the merge still receives gradients; its freeze is optimizer exclusion)
    for p in state.params("inverse", "codebook", "policy").values():
        np.testing.assert_array_equal(tape.grad(grads, p), np.zeros_like(p.data))
    assert any(np.abs(g).sum() > 0
               for g in collect_grads(tape, grads, state.params("base")).values())


def test_loss_fta_rejects_empty_response():
    state = small_state()
    tokens = small_tokens(t=4)
    aidx = fta_actions(state, tokens, "FTA-I", 1.0)
    with pytest.raises(ValueError):
        loss_fta(state, tokens, 4, aidx)


def test_fta_actions_modes_differ():
    state = small_state()
    tokens = small_tokens()
    i = fta_actions(state, tokens, "FTA-I", 1.0)
    p = fta_actions(state, tokens, "FTA-P", 1.0)
    assert i.shape == p.shape == (3, 6)
    with pytest.raises(ValueError):
        fta_actions(state, tokens, "FTA-X", 1.0)


def test_stage_drivers_enforce_freezing():
    state = small_state()
    corpus = small_tokens(b=8)
    calls = {"n": 0}

    def sabotage(record):
        if calls["n"] == 0:
            state.groups["base"]["tok_emb"].data[0, 0] += 1.0
        calls["n"] += 1

    with pytest.raises(RuntimeError, match="frozen groups drifted"):
        train_bc(state, corpus, TrainConfig(steps=2, batch_size=4),
                 metrics_cb=sabotage)


def test_train_stage1_returns_usage_counts():
    state = small_state()
    corpus = small_tokens(b=8)
    cfg = TrainConfig(steps=3, batch_size=4)
    usage = train_stage1(state, corpus, cfg)
    assert usage.sum() == 3 * 4 * (corpus.shape[1] - 1)


# ---------------------------------------------------------------------------
# Rollouts and RL
# ---------------------------------------------------------------------------

def test_rollout_batch_stops_at_eos_and_pads():
    state = small_state()
    # force the world head to always emit eos: zero merge -> uniform? instead
    # bias the lm_head column of the eos token hugely via tok route is
    # indirect; just check invariants on a plain run
    prompts = small_tokens(b=4, t=3)
    tokens, actions = rollout_batch(state, prompts, "greedy", 8)
    assert tokens.shape[1] <= 8
    assert actions.shape == (4, tokens.shape[1] - 3)
    # after a generated eos, every later token must be eos
    for row in tokens:
        gen = row[3:]
        hits = np.where(gen == CFG.eos_token_id)[0]
        if hits.size:
            assert (gen[hits[0]:] == CFG.eos_token_id).all()


def test_rollout_batch_sample_requires_rng():
    state = small_state()
    with pytest.raises(ValueError):
        rollout_batch(state, small_tokens(b=2, t=3), "sample", 8)


def test_rl_update_constant_reward_has_vanishing_gradient():
    """With identical rewards the leave-one-out advantages vanish, and the KL
    against an identical reference sits at its minimum: both loss terms and
    the gradient norm are (numerically) zero."""
    state = small_state()
    cfg = TrainConfig(rl_group_size=4, kl_coef=0.01, learning_rate=0.1)
    opt = AdamW(state.params("policy"), cfg)
    ref = {k: Tensor(t.data.copy()) for k, t in state.groups["policy"].items()}
    report = rl_update(state, small_tokens(b=2, t=3), lambda r: 0.7, ref, cfg,
                       opt, np.random.default_rng(0), max_len=8)
    assert report.scalars["rl_reward_mean"] == pytest.approx(0.7)
    assert abs(report.scalars["pg_loss"]) < 1e-6
    assert abs(report.scalars["rl_kl"]) < 1e-6
    assert report.grad_norms["grad_norm"] < 1e-4


def test_rl_update_rejects_tiny_groups():
    state = small_state()
    cfg = TrainConfig(rl_group_size=1)
    with pytest.raises(ValueError):
        rl_update(state, small_tokens(b=2, t=3), lambda r: 0.0, {}, cfg,
                  AdamW(state.params("policy"), cfg), np.random.default_rng(0), 8)


def test_train_rl_freezes_everything_but_policy():
    state = small_state()
    hashes = state.hashes(("base", "merge", "inverse", "codebook"))
    train_rl(state, small_tokens(b=2, t=3), lambda r: float(len(r) % 2),
             TrainConfig(steps=0, rl_group_size=4, batch_size=4), max_len=8,
             updates=2)
    assert state.hashes(("base", "merge", "inverse", "codebook")) == hashes


# ---------------------------------------------------------------------------
# Double-DQN
# ---------------------------------------------------------------------------

def test_dqn_target_oracle():
    q_online = lambda ctx: np.array([0.1, 0.9, 0.3])
    q_target = lambda ctx: np.array([10.0, 20.0, 30.0])
    terminal = Transition(np.array([1]), 0, np.array([1, 2]), 0.5, True)
    assert dqn_target(terminal, q_online, q_target, 0.9) == 0.5
    step = Transition(np.array([1]), 0, np.array([1, 2]), 0.0, False)
    # online argmax is action 1; target evaluates it: 0.9 * 20
    assert dqn_target(step, q_online, q_target, 0.9) == pytest.approx(18.0)


def test_sync_target_mixes_with_tau():
    state = small_state()
    for t in state.groups["q_online"].values():
        t.data[...] = 1.0
    for t in state.groups["q_target"].values():
        t.data[...] = 0.0
    sync_target(state, 0.25)
    for t in state.groups["q_target"].values():
        np.testing.assert_allclose(t.data, 0.25)
    sync_target(state, 1.0)  # hard copy
    for k, t in state.groups["q_target"].items():
        np.testing.assert_array_equal(t.data, state.groups["q_online"][k].data)


def test_dqn_step_reduces_error_on_single_transition():
    state = small_state()
    cfg = TrainConfig(learning_rate=3e-3, sync_interval=10**9, gamma=0.9)
    opt = AdamW(state.params("q_online"), cfg)
    tr = Transition(np.array([1, 2]), 2, np.array([1, 2, 3]), 1.0, True)
    first = dqn_step(state, [tr], cfg, opt, 1).scalars["q_loss"]
    for step in range(2, 80):
        last = dqn_step(state, [tr], cfg, opt, step).scalars["q_loss"]
    assert last < first * 0.1


def test_dqn_step_rejects_empty_batch():
    state = small_state()
    cfg = TrainConfig()
    with pytest.raises(ValueError):
        dqn_step(state, [], cfg, AdamW(state.params("q_online"), cfg), 1)


def test_q_values_fn_shape():
    state = small_state()
    q = q_values_fn(state, "q_online")
    assert q([1, 2, 3]).shape == (CFG.codebook_size,)


# ---------------------------------------------------------------------------
# Base pretraining utilities
# ---------------------------------------------------------------------------

def test_eval_base_ce_matches_manual():
    state = small_state()
    corpus = small_tokens(b=4)
    ce = eval_base_ce(state, corpus)
    _, logits = base_forward(state.groups["base"], CFG, corpus)
    z = logits.data[:, :-1] - logits.data[:, :-1].max(axis=-1, keepdims=True)
    lsm = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    manual = -np.take_along_axis(lsm, corpus[:, 1:, None], axis=-1).mean()
    assert ce == pytest.approx(manual, rel=1e-5)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_loss_base_ar_positive(seed):
    state = small_state(0)
    tokens = np.random.default_rng(seed).integers(0, 9, size=(2, 5))
    with Tape():
        loss = loss_base_ar(state, tokens)
    assert loss.item() > 0
