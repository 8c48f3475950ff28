"""Synthetic corpora, SFT formatting, and programmatic reward environments."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass
class HmmCorpusConfig:
    n_states: int = 4
    vocab_size: int = 16
    transition_concentration: float = 0.3
    emission_concentration: float = 0.3
    seq_len: int = 64
    n_sequences: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.n_states < 1:
            raise ValueError("n_states must be >= 1")
        if self.transition_concentration <= 0 or self.emission_concentration <= 0:
            raise ValueError("concentrations must be > 0")


def gen_hmm_corpus(cfg: HmmCorpusConfig):
    """Sample a hidden-Markov corpus; returns (tokens (n, L), states (n, L)).

    The state trace is an evaluation oracle only and must never feed
    training. Pure function of the seed.
    """
    rng = np.random.default_rng(cfg.seed)
    m, v = cfg.n_states, cfg.vocab_size
    trans = rng.dirichlet(np.full(m, cfg.transition_concentration), size=m)
    emit = rng.dirichlet(np.full(v, cfg.emission_concentration), size=m)
    init = rng.dirichlet(np.full(m, 1.0))
    tokens = np.empty((cfg.n_sequences, cfg.seq_len), dtype=np.int64)
    states = np.empty((cfg.n_sequences, cfg.seq_len), dtype=np.int64)
    for i in range(cfg.n_sequences):
        s = rng.choice(m, p=init)
        for t in range(cfg.seq_len):
            states[i, t] = s
            tokens[i, t] = rng.choice(v, p=emit[s])
            s = rng.choice(m, p=trans[s])
    return tokens, states


def hmm_matrices(cfg: HmmCorpusConfig):
    """The transition/emission/initial distributions behind gen_hmm_corpus."""
    rng = np.random.default_rng(cfg.seed)
    trans = rng.dirichlet(np.full(cfg.n_states, cfg.transition_concentration),
                          size=cfg.n_states)
    emit = rng.dirichlet(np.full(cfg.vocab_size, cfg.emission_concentration),
                         size=cfg.n_states)
    init = rng.dirichlet(np.full(cfg.n_states, 1.0))
    return trans, emit, init


def save_corpus(path, tokens: np.ndarray, seed: int, states=None):
    """Header line (JSON: V, count, length, seed), then one id sequence per
    line; optional parallel states file with the same layout."""
    header = {"V": int(tokens.max()) + 1, "count": int(tokens.shape[0]),
              "length": int(tokens.shape[1]), "seed": int(seed)}
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for row in tokens:
            f.write(" ".join(str(int(x)) for x in row) + "\n")
    if states is not None:
        with open(str(path) + ".states", "w") as f:
            f.write(json.dumps(header) + "\n")
            for row in states:
                f.write(" ".join(str(int(x)) for x in row) + "\n")


def load_corpus(path):
    with open(path) as f:
        header = json.loads(f.readline())
        rows = [list(map(int, line.split())) for line in f if line.strip()]
    tokens = np.asarray(rows, dtype=np.int64)
    if tokens.shape != (header["count"], header["length"]):
        raise ValueError("corpus body does not match its header")
    return tokens, header


@dataclass
class SftExample:
    prompt: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        if len(self.prompt) < 1 or len(self.response) < 1:
            raise ValueError("prompt and response must be non-empty")


def make_sft_split(corpus: np.ndarray, prompt_len: int) -> list[SftExample]:
    """Deterministically split each sequence into prompt/response at
    prompt_len."""
    if not 0 < prompt_len < corpus.shape[1]:
        raise ValueError("prompt_len out of range")
    return [SftExample(row[:prompt_len].copy(), row[prompt_len:].copy())
            for row in corpus]


def marker_reward(response, marker_token: int) -> float:
    """1 iff the marker token occurs anywhere in the response."""
    return 1.0 if marker_token in np.asarray(response) else 0.0


# ---------------------------------------------------------------------------
# Countdown arithmetic game
# ---------------------------------------------------------------------------

@dataclass
class CountdownTask:
    numbers: list[int]
    target: int

    def __post_init__(self):
        if any(n <= 0 for n in self.numbers):
            raise ValueError("numbers must be positive integers")


_FORMAT_RE = re.compile(r"<think>(.*?)</think><answer>(.*?)</answer>", re.DOTALL)


class _ExprError(Exception):
    pass


class _Parser:
    """Recursive-descent evaluator over digits, + - * / (and their unicode
    aliases), and parentheses. Exact rational arithmetic; never executes
    input."""

    def __init__(self, text: str):
        self.text = text.replace("×", "*").replace("÷", "/")
        self.pos = 0
        self.literals: list[int] = []

    def peek(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self) -> Fraction:
        value = self.expr()
        if self.peek() != "":
            raise _ExprError(f"trailing input at {self.pos}")
        return value

    def expr(self) -> Fraction:
        value = self.term()
        while self.peek() in ("+", "-"):
            op = self.text[self.pos]
            self.pos += 1
            rhs = self.term()
            value = value + rhs if op == "+" else value - rhs
        return value

    def term(self) -> Fraction:
        value = self.factor()
        while self.peek() in ("*", "/"):
            op = self.text[self.pos]
            self.pos += 1
            rhs = self.factor()
            if op == "*":
                value = value * rhs
            else:
                if rhs == 0:
                    raise _ExprError("division by zero")
                value = value / rhs
        return value

    def factor(self) -> Fraction:
        ch = self.peek()
        if ch == "(":
            self.pos += 1
            value = self.expr()
            if self.peek() != ")":
                raise _ExprError("unbalanced parenthesis")
            self.pos += 1
            return value
        if not ch.isdigit():
            raise _ExprError(f"unexpected character {ch!r}")
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        n = int(self.text[start:self.pos])
        self.literals.append(n)
        return Fraction(n)


def evaluate_expression(text: str):
    """(value, literals) of an arithmetic expression, or (None, []) if
    malformed."""
    try:
        parser = _Parser(text)
        return parser.parse(), parser.literals
    except _ExprError:
        return None, []


def countdown_reward(task: CountdownTask, response_text: str) -> tuple[float, float]:
    """(format_reward, correctness_reward), each in {0, 1}.

    Format: the response is exactly <think>...</think><answer>EXPR</answer>
    with nothing outside the tags. Correctness: EXPR uses each task number
    exactly once and evaluates, exactly, to the target.
    """
    format_reward = 1.0 if _FORMAT_RE.fullmatch(response_text) else 0.0
    match = _FORMAT_RE.search(response_text)
    correctness = 0.0
    if match:
        value, literals = evaluate_expression(match.group(2))
        if value is not None and sorted(literals) == sorted(task.numbers) \
                and value == Fraction(task.target):
            correctness = 1.0
    return format_reward, correctness


# Character-level vocabulary for text tasks: digits, operators, tags, eos.
TEXT_CHARSET = "\x00<>/thinkaswer0123456789+-*()=,. "
TEXT_EOS_ID = 0


def encode_text(text: str) -> np.ndarray:
    try:
        return np.asarray([TEXT_CHARSET.index(c) for c in text], dtype=np.int64)
    except ValueError as e:
        raise ValueError(f"character not in charset: {e}") from None


def decode_tokens(tokens) -> str:
    out = []
    for t in np.asarray(tokens):
        if t == TEXT_EOS_ID:
            break
        out.append(TEXT_CHARSET[int(t)])
    return "".join(out)
