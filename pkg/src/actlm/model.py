"""Tiny causal transformer base model and shared block machinery.

All parameters live in flat name->Tensor dicts, grouped by training role
(base / inverse / merge / policy / codebook / q_online / q_target) so stage
freezing, hashing, and checkpointing can treat each group atomically.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ArchConfig

INIT_STD = 0.02


def _normal(rng, shape):
    return Tensor(rng.normal(0.0, INIT_STD, size=shape))


def init_block_params(rng, cfg: ArchConfig, prefix: str) -> dict[str, Tensor]:
    d, inter = cfg.d_model, cfg.intermediate_dim
    p = {}
    p[f"{prefix}.ln1"] = Tensor(np.ones(d))
    for name in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.{name}"] = _normal(rng, (d, d))
    p[f"{prefix}.ln2"] = Tensor(np.ones(d))
    p[f"{prefix}.w1"] = _normal(rng, (d, inter))
    p[f"{prefix}.w2"] = _normal(rng, (d, inter))
    p[f"{prefix}.w3"] = _normal(rng, (inter, d))
    return p


def block_forward(p: dict[str, Tensor], prefix: str, x: Tensor, cfg: ArchConfig) -> Tensor:
    """Pre-norm causal attention block + gated MLP, residual throughout."""
    b, t, d = x.shape
    h, dh = cfg.n_heads, d // cfg.n_heads

    hn = ad.rms_norm(x, p[f"{prefix}.ln1"])

    def heads(w):
        y = ad.matmul(hn, p[f"{prefix}.{w}"])
        y = ad.reshape(y, (b, t, h, dh))
        return ad.swapaxes(y, 1, 2)  # (b, h, t, dh)

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    att = ad.softmax(ad.causal_attention_scores(q, k))
    ctx = ad.matmul(att, v)
    ctx = ad.reshape(ad.swapaxes(ctx, 1, 2), (b, t, d))
    x = ad.add(x, ad.matmul(ctx, p[f"{prefix}.wo"]))

    hn = ad.rms_norm(x, p[f"{prefix}.ln2"])
    gate = ad.mul(ad.silu(ad.matmul(hn, p[f"{prefix}.w1"])),
                  ad.matmul(hn, p[f"{prefix}.w2"]))
    return ad.add(x, ad.matmul(gate, p[f"{prefix}.w3"]))


def init_base_params(rng, cfg: ArchConfig) -> dict[str, Tensor]:
    p = {
        "tok_emb": _normal(rng, (cfg.vocab_size, cfg.d_model)),
        "pos_emb": _normal(rng, (cfg.max_seq_len, cfg.d_model)),
    }
    for i in range(cfg.n_layers_base):
        p.update(init_block_params(rng, cfg, f"blk{i}"))
    p["ln_out"] = Tensor(np.ones(cfg.d_model))
    p["lm_head"] = _normal(rng, (cfg.d_model, cfg.vocab_size))
    return p


def base_forward(p: dict[str, Tensor], cfg: ArchConfig, tokens) -> tuple[Tensor, Tensor]:
    """tokens (B, T) int -> (embeddings (B, T, d), next-token logits (B, T, V))."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("tokens must be (batch, time)")
    b, t = tokens.shape
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token id out of range")
    x = ad.add(ad.embedding(p["tok_emb"], tokens),
               ad.slice_time(ad.reshape(p["pos_emb"], (1, cfg.max_seq_len, cfg.d_model)), 0, t))
    for i in range(cfg.n_layers_base):
        x = block_forward(p, f"blk{i}", x, cfg)
    e_l = ad.rms_norm(x, p["ln_out"])
    logits = ad.matmul(e_l, p["lm_head"])
    return e_l, logits


GROUP_NAMES = ("base", "merge", "inverse", "policy", "codebook", "q_online", "q_target")


@dataclass
class ModelState:
    """Every parameter group plus the architecture that shaped them."""

    cfg: ArchConfig
    groups: dict[str, dict[str, Tensor]] = field(default_factory=dict)

    def params(self, *group_names: str) -> dict[str, Tensor]:
        """Flattened 'group/name' -> Tensor view over the named groups."""
        flat = {}
        for g in group_names:
            for k, t in self.groups[g].items():
                flat[f"{g}/{k}"] = t
        return flat

    def group_hash(self, group: str) -> str:
        h = hashlib.sha256()
        for name in sorted(self.groups[group]):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.groups[group][name].data).tobytes())
        return h.hexdigest()

    def hashes(self, groups=GROUP_NAMES) -> dict[str, str]:
        return {g: self.group_hash(g) for g in groups if g in self.groups}


def init_model(cfg: ArchConfig, seed: int = 0) -> ModelState:
    """Deterministically initialize every parameter group from one seed."""
    rng = np.random.default_rng(seed)
    d, n, v = cfg.d_model, cfg.codebook_size, cfg.vocab_size
    groups: dict[str, dict[str, Tensor]] = {}
    groups["base"] = init_base_params(rng, cfg)

    inverse = {}
    for i in range(cfg.n_layers_inverse):
        inverse.update(init_block_params(rng, cfg, f"blk{i}"))
    inverse["action_head"] = _normal(rng, (d, n))
    groups["inverse"] = inverse

    # Codes live in the residual stream next to post-block embeddings whose
    # scale is ~1; initializing them at the weight scale (0.02) starves the
    # action channel and the assignment collapses to a single code.
    groups["codebook"] = {"codes": Tensor(rng.normal(0.0, 1.0, size=(n, d)))}

    merge = {}
    for i in range(cfg.n_merge_mlps):
        merge[f"mlp{i}.w1"] = _normal(rng, (2 * d, cfg.intermediate_dim))
        merge[f"mlp{i}.w2"] = _normal(rng, (2 * d, cfg.intermediate_dim))
        merge[f"mlp{i}.w3"] = _normal(rng, (cfg.intermediate_dim, d))
    merge["lm_head"] = _normal(rng, (d, v))
    groups["merge"] = merge

    def head_stack(depth):
        p = {}
        for i in range(depth):
            p.update(init_block_params(rng, cfg, f"blk{i}"))
        p["head"] = _normal(rng, (d, n))
        return p

    groups["policy"] = head_stack(cfg.n_layers_policy)
    groups["q_online"] = head_stack(cfg.n_layers_policy)
    groups["q_target"] = {k: Tensor(t.data.copy()) for k, t in groups["q_online"].items()}
    return ModelState(cfg, groups)
