"""Inference-time generation: greedy/stochastic rollout, latent-action MCTS
with multi-step action nodes, and Q-pruned MCTS.

Search code talks to the generator through three duck-typed methods --
policy_probs(tokens), next_token(tokens, action), and the eos/max-len
terminal rule -- so trained models and hand-built test stubs plug in alike.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .actions import policy_forward, world_logits
from .autodiff import Tensor
from .config import SearchConfig
from .model import ModelState, base_forward
from .training import Transition, dqn_target


class LatentActionLM:
    """Generation adapter over a trained model state."""

    def __init__(self, state: ModelState):
        self.state = state
        self.n_actions = state.cfg.codebook_size
        self.eos_token_id = state.cfg.eos_token_id

    def policy_probs(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens).reshape(1, -1)
        e_l, _ = base_forward(self.state.groups["base"], self.state.cfg, tokens)
        return policy_forward(self.state.groups["policy"], self.state.cfg,
                              e_l).data[0, -1, :]

    def next_token(self, tokens, action: int) -> int:
        tokens = np.asarray(tokens).reshape(1, -1)
        e_l, _ = base_forward(self.state.groups["base"], self.state.cfg, tokens)
        code = self.state.groups["codebook"]["codes"].data[action][None, None, :]
        t = tokens.shape[1]
        from . import autodiff as ad
        e_last = ad.slice_time(e_l, t - 1, None)
        logits = world_logits(self.state.groups["merge"], self.state.cfg,
                              e_last, Tensor(code))
        return int(logits.data[0, -1, :].argmax())


def _is_terminal(model, tokens, max_len: int) -> bool:
    return len(tokens) >= max_len or (len(tokens) > 0 and tokens[-1] == model.eos_token_id)


def _sample_action(model, tokens, rng) -> int:
    probs = model.policy_probs(tokens)
    cum = np.cumsum(probs)
    cum /= cum[-1]
    return int(np.searchsorted(cum, rng.random(), side="right"))


def rollout(model, prompt, mode: str, max_len: int, rng=None):
    """Generate until eos or max_len; returns (tokens, actions) aligned so
    actions[s] produced tokens[len(prompt)+s]."""
    tokens = list(np.asarray(prompt).tolist())
    if not tokens:
        raise ValueError("prompt must be non-empty")
    actions = []
    while not _is_terminal(model, tokens, max_len):
        if mode == "greedy":
            action = int(model.policy_probs(tokens).argmax())
        elif mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs an rng")
            action = _sample_action(model, tokens, rng)
        else:
            raise ValueError(f"unknown rollout mode: {mode!r}")
        tokens.append(model.next_token(tokens, action))
        actions.append(action)
    return np.asarray(tokens), np.asarray(actions, dtype=np.int64)


# ---------------------------------------------------------------------------
# Tree search
# ---------------------------------------------------------------------------

@dataclass
class MctsNode:
    state: np.ndarray
    children: dict[tuple, "MctsNode"] = field(default_factory=dict)
    q_sum: float = 0.0
    visits: int = 0
    sim_tokens: np.ndarray | None = None
    sim_value: float | None = None
    # incoming transition (for Q pruning) and instrumentation
    prev_context: np.ndarray | None = None
    last_action: int | None = None
    expansion_tokens: int = 0
    extension_passes: int = 0


def uct_score(child: MctsNode, parent: MctsNode, c_uct: float) -> float:
    """Q/N + c*sqrt(ln N_parent / N); unvisited children score +inf."""
    if parent.visits < 1:
        raise ValueError("parent must have been visited")
    if child.visits == 0:
        return math.inf
    return child.q_sum / child.visits + c_uct * math.sqrt(
        math.log(parent.visits) / child.visits)


def _select_child(node: MctsNode, c_uct: float) -> MctsNode:
    best_key, best_score = None, -math.inf
    for key in sorted(node.children):  # sorted keys: ties go to lowest actions
        score = uct_score(node.children[key], node, c_uct)
        if score > best_score:
            best_key, best_score = key, score
    return node.children[best_key]


def bellman_error(transition: Transition, q_fn, gamma: float) -> float:
    """Squared residual against the Double-DQN target with the target network
    equal to the online network."""
    y = dqn_target(transition, q_fn, q_fn, gamma)
    return float((y - q_fn(transition.context)[transition.action]) ** 2)


@dataclass
class SearchResult:
    tokens: np.ndarray
    root: MctsNode
    iterations: int
    n_nodes: int


def _score(reward_fn, tokens) -> float:
    try:
        return float(reward_fn(np.asarray(tokens)))
    except Exception:
        return 0.0  # failed scorer: simulation counts as zero


def _simulate(model, node: MctsNode, reward_fn, max_len: int, rng) -> float:
    if _is_terminal(model, node.state, max_len):
        node.sim_tokens = np.asarray([], dtype=np.int64)
        node.sim_value = _score(reward_fn, node.state)
        return node.sim_value
    full, _ = rollout(model, node.state, "sample", max_len, rng)
    node.sim_tokens = full[len(node.state):]
    node.sim_value = _score(reward_fn, full)
    return node.sim_value


def _roll_segment(model, tokens, k: int, max_len: int, rng=None):
    """k generation steps (sampled actions if rng, else greedy); stops early
    at terminal. Returns (tokens, action tuple)."""
    tokens = list(tokens)
    actions = []
    for _ in range(k):
        if _is_terminal(model, tokens, max_len):
            break
        if rng is None:
            action = int(model.policy_probs(tokens).argmax())
        else:
            action = _sample_action(model, tokens, rng)
        tokens.append(model.next_token(tokens, action))
        actions.append(action)
    return np.asarray(tokens), tuple(actions)


def _expand(model, node: MctsNode, cfg: SearchConfig, rng) -> MctsNode | None:
    """Create up to expand_width children by sampled k-step segments; returns
    the first newly created child (None only if the node is terminal)."""
    first = None
    for _ in range(cfg.expand_width):
        child_state, key = _roll_segment(model, node.state, cfg.action_steps,
                                         cfg.max_len, rng)
        if not key or key in node.children:
            continue
        child = MctsNode(state=child_state,
                         prev_context=child_state[:-1].copy(),
                         last_action=key[-1],
                         expansion_tokens=len(key))
        node.children[key] = child
        if first is None:
            first = child
    return first


def _extend_low_uncertainty(model, node: MctsNode, cfg: SearchConfig,
                            reward_fn, q_fn, gamma: float) -> None:
    """Q-pruned extension: while the node's incoming transition has Bellman
    error below the threshold, append k more greedy steps to the node (one
    merged node per search, growing in passes) instead of simulating."""
    while not _is_terminal(model, node.state, cfg.max_len):
        terminal = _is_terminal(model, node.state, cfg.max_len)
        tr = Transition(context=node.prev_context, action=int(node.last_action),
                        next_context=node.state,
                        reward=_score(reward_fn, node.state) if terminal else 0.0,
                        terminal=terminal)
        if not bellman_error(tr, q_fn, gamma) < cfg.bellman_threshold:
            break
        new_state, key = _roll_segment(model, node.state, cfg.action_steps,
                                       cfg.max_len, rng=None)
        if not key:
            break
        node.state = new_state
        node.prev_context = new_state[:-1].copy()
        node.last_action = key[-1]
        node.expansion_tokens += len(key)
        node.extension_passes += 1


def mcts_search(model, prompt, cfg: SearchConfig, reward_fn,
                q_fn=None, gamma: float = 0.99, trace_path=None) -> SearchResult:
    """Latent-action MCTS; with q_fn supplied, expansion applies Bellman-error
    pruning (the Q-pruned variant).

    Returns the state of the best-simulation node concatenated with its
    stored simulation."""
    rng = np.random.default_rng(cfg.seed)
    root = MctsNode(state=np.asarray(prompt))
    trace = []
    iterations = 0
    for it in range(cfg.iterations):
        iterations = it + 1
        node, path_keys = root, []
        path = [root]
        while node.children:
            nxt = _select_child(node, cfg.c_uct)
            key = next(k for k, v in node.children.items() if v is nxt)
            path_keys.append(list(key))
            node = nxt
            path.append(node)
        expanded_terminal = False
        if node.visits == 0 and node is not root and node.sim_value is None:
            # freshly created child reached by selection: simulate it
            value = _simulate(model, node, reward_fn, cfg.max_len, rng)
            expanded_terminal = _is_terminal(model, node.state, cfg.max_len)
        elif _is_terminal(model, node.state, cfg.max_len):
            value = _simulate(model, node, reward_fn, cfg.max_len, rng)
            expanded_terminal = True
        else:
            child = _expand(model, node, cfg, rng)
            if child is None:
                value = _simulate(model, node, reward_fn, cfg.max_len, rng)
                expanded_terminal = True
            else:
                path.append(child)
                key = next(k for k, v in node.children.items() if v is child)
                path_keys.append(list(key))
                if q_fn is not None:
                    _extend_low_uncertainty(model, child, cfg, reward_fn,
                                            q_fn, gamma)
                value = _simulate(model, child, reward_fn, cfg.max_len, rng)
                expanded_terminal = _is_terminal(model, child.state, cfg.max_len)
        for n in path:
            n.visits += 1
            n.q_sum += value
        trace.append({"iteration": it, "selected_path": path_keys,
                      "sim_value": value})
        if expanded_terminal:
            break
    if trace_path is not None:
        with open(trace_path, "w") as f:
            for record in trace:
                f.write(json.dumps(record) + "\n")

    best, best_value = None, -math.inf
    stack = [root]
    n_nodes = 0
    while stack:
        n = stack.pop()
        n_nodes += 1
        if n.sim_value is not None and n.sim_value > best_value:
            best, best_value = n, n.sim_value
        stack.extend(n.children[k] for k in sorted(n.children, reverse=True))
    tokens = np.concatenate([best.state, best.sim_tokens]) if best is not None \
        else np.asarray(prompt)
    return SearchResult(tokens=tokens, root=root, iterations=iterations,
                        n_nodes=n_nodes)


def mcts_q_search(model, prompt, cfg: SearchConfig, reward_fn, q_fn,
                  gamma: float = 0.99, trace_path=None) -> SearchResult:
    return mcts_search(model, prompt, cfg, reward_fn, q_fn=q_fn, gamma=gamma,
                       trace_path=trace_path)


def audit_tree(root: MctsNode, max_reward: float = 1.0) -> None:
    """Raise if any structural invariant is violated anywhere in the tree."""
    stack = [root]
    while stack:
        node = stack.pop()
        child_visits = sum(c.visits for c in node.children.values())
        if node.visits < child_visits:
            raise AssertionError("parent visit count below children's sum")
        if node.visits > 0:
            mean = node.q_sum / node.visits
            if not -1e-9 <= mean <= max_reward + 1e-9:
                raise AssertionError("mean node value outside reward range")
        if node.q_sum > node.visits * max_reward + 1e-9:
            raise AssertionError("value sum exceeds visits * max reward")
        if node.sim_value is not None and not -1e-9 <= node.sim_value <= max_reward + 1e-9:
            raise AssertionError("simulation value outside reward range")
        stack.extend(node.children.values())
