"""Search: rollout semantics, UCT arithmetic, tree invariants, and the
Q-pruned variant's boundary behavior — all against hand-built deterministic
generator stubs."""

import json
import math

import numpy as np
import pytest

from actlm.config import ArchConfig, SearchConfig
from actlm.model import init_model
from actlm.search import (LatentActionLM, MctsNode, audit_tree, bellman_error,
                          mcts_q_search, mcts_search, rollout, uct_score)
from actlm.training import Transition


class ChainLM:
    """Two-branch deterministic toy: the first action's parity picks token 2
    (good branch) or 3 (bad); filler token 4 follows until eos at a fixed
    episode length."""

    def __init__(self, episode_len=8, n_actions=2, eos=0):
        self.episode_len = episode_len
        self.n_actions = n_actions
        self.eos_token_id = eos

    def policy_probs(self, tokens):
        return np.full(self.n_actions, 1.0 / self.n_actions)

    def next_token(self, tokens, action):
        if len(tokens) == 1:
            return 2 if action % 2 == 0 else 3
        if len(tokens) >= self.episode_len - 1:
            return self.eos_token_id
        return 4


def chain_reward(tokens):
    return 1.0 if 2 in np.asarray(tokens) else 0.0


def test_rollout_greedy_runs_to_eos():
    model = ChainLM()
    tokens, actions = rollout(model, [1], "greedy", 20)
    assert tokens[-1] == 0 and len(tokens) == model.episode_len
    assert len(actions) == len(tokens) - 1
    assert tokens[1] == 2  # greedy picks action 0


def test_rollout_respects_max_len():
    tokens, _ = rollout(ChainLM(episode_len=50), [1], "greedy", 6)
    assert len(tokens) == 6 and tokens[-1] != 0


def test_rollout_rejects_bad_args():
    with pytest.raises(ValueError):
        rollout(ChainLM(), [], "greedy", 5)
    with pytest.raises(ValueError):
        rollout(ChainLM(), [1], "sample", 5)  # no rng
    with pytest.raises(ValueError):
        rollout(ChainLM(), [1], "beam", 5)


def test_uct_score_oracle():
    parent = MctsNode(state=np.array([1]), visits=10)
    child = MctsNode(state=np.array([1, 2]), visits=4, q_sum=3.0)
    expected = 3.0 / 4 + 0.7 * math.sqrt(math.log(10) / 4)
    assert uct_score(child, parent, 0.7) == pytest.approx(expected, abs=1e-12)
    fresh = MctsNode(state=np.array([1, 3]))
    assert uct_score(fresh, parent, 0.7) == math.inf
    with pytest.raises(ValueError):
        uct_score(child, MctsNode(state=np.array([1])), 0.7)


def test_bellman_error_oracle():
    q = lambda ctx: np.array([0.2, 0.8])
    terminal = Transition(np.array([1]), 0, np.array([1, 2]), 1.0, True)
    # residual = 1.0 - 0.2
    assert bellman_error(terminal, q, 0.9) == pytest.approx(0.64)
    step = Transition(np.array([1]), 1, np.array([1, 2]), 0.0, False)
    # target = 0.9 * 0.8 (argmax is action 1); residual = 0.72 - 0.8
    assert bellman_error(step, q, 0.9) == pytest.approx(0.08 ** 2)


def test_mcts_finds_good_branch_and_audits():
    cfg = SearchConfig(action_steps=2, iterations=12, expand_width=2,
                       max_len=10, seed=3)
    result = mcts_search(ChainLM(), [1], cfg, chain_reward)
    audit_tree(result.root)
    assert chain_reward(result.tokens) == 1.0
    assert result.root.visits == result.iterations


def test_mcts_writes_trace(tmp_path):
    cfg = SearchConfig(action_steps=2, iterations=5, max_len=10, seed=0)
    trace = tmp_path / "trace.jsonl"
    result = mcts_search(ChainLM(), [1], cfg, chain_reward, trace_path=trace)
    records = [json.loads(l) for l in trace.read_text().splitlines()]
    assert len(records) == result.iterations
    assert all({"iteration", "selected_path", "sim_value"} <= set(r) for r in records)


def test_mcts_failing_reward_fn_scores_zero():
    def bad_reward(tokens):
        raise RuntimeError("scorer crashed")
    cfg = SearchConfig(action_steps=2, iterations=4, max_len=10, seed=0)
    result = mcts_search(ChainLM(), [1], cfg, bad_reward)
    audit_tree(result.root)


def snapshot(node):
    return (tuple(node.state.tolist()), node.visits, round(node.q_sum, 12),
            sorted((k, snapshot(v)) for k, v in node.children.items()))


def test_mcts_q_zero_threshold_reproduces_plain_search():
    cfg = SearchConfig(action_steps=2, iterations=10, expand_width=2,
                       max_len=12, seed=7, bellman_threshold=0.0)
    plain = mcts_search(ChainLM(episode_len=12), [1], cfg, chain_reward)
    pruned = mcts_q_search(ChainLM(episode_len=12), [1], cfg, chain_reward,
                           q_fn=lambda ctx: np.zeros(2), gamma=0.9)
    assert snapshot(plain.root) == snapshot(pruned.root)
    np.testing.assert_array_equal(plain.tokens, pruned.tokens)


def test_mcts_q_infinite_threshold_extends_to_terminal_in_one_pass():
    cfg = SearchConfig(action_steps=2, iterations=10, expand_width=2,
                       max_len=12, seed=1, bellman_threshold=math.inf)
    result = mcts_q_search(ChainLM(episode_len=12), [1], cfg, chain_reward,
                           q_fn=lambda ctx: np.zeros(2), gamma=0.9)
    assert result.iterations == 1
    child = next(iter(result.root.children.values()))
    assert child.state[-1] == 0  # extended all the way to eos
    assert child.extension_passes >= 1


def test_audit_tree_catches_violations():
    root = MctsNode(state=np.array([1]), visits=1, q_sum=5.0)  # mean 5 > 1
    with pytest.raises(AssertionError):
        audit_tree(root, max_reward=1.0)
    parent = MctsNode(state=np.array([1]), visits=1)
    parent.children[(0,)] = MctsNode(state=np.array([1, 2]), visits=3)
    with pytest.raises(AssertionError):
        audit_tree(parent)


def test_latent_action_lm_adapter_contract():
    arch = ArchConfig(vocab_size=9, d_model=8, n_heads=2, max_seq_len=12,
                      intermediate_dim=16, codebook_size=4)
    model = LatentActionLM(init_model(arch, 0))
    probs = model.policy_probs([1, 2, 3])
    assert probs.shape == (4,)
    assert probs.sum() == pytest.approx(1.0, abs=1e-5)
    nxt = model.next_token([1, 2, 3], 2)
    assert 0 <= nxt < 9
    assert model.next_token([1, 2, 3], 2) == nxt  # deterministic
