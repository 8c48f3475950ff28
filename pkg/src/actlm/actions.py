"""Discrete latent-action machinery: inverse encoder, code assignment with
straight-through gradients, action-conditioned world head, policy and Q heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ArchConfig
from .model import block_forward


@dataclass
class ActionAssignment:
    """One code selection per predictable position.

    `soft` sums to 1 per row; `hard` is the exact one-hot; `straight` carries
    the hard values forward but the soft gradients backward; `action` is the
    selected codebook rows.
    """

    logits: Tensor       # (..., N)
    soft: Tensor         # (..., N) softmax probabilities g
    hard: np.ndarray     # (..., N) one-hot, constant
    straight: Tensor     # (..., N) straight-through one-hot
    index: np.ndarray    # (...,) argmax indices
    action: Tensor       # (..., d) codebook rows


def inverse_encode(inverse: dict[str, Tensor], cfg: ArchConfig, e_l: Tensor) -> Tensor:
    """Map base embeddings of x_{1:T} to one future-conditioned embedding per
    predictable position t in [1, T-1].

    The encoder is causal, so its output at position t+1 is the final-position
    encoding of x_{1:t+1}.
    """
    if e_l.shape[1] < 2:
        raise ValueError("inverse_encode needs at least 2 positions")
    h = e_l
    for i in range(cfg.n_layers_inverse):
        h = block_forward(inverse, f"blk{i}", h, cfg)
    return ad.slice_time(h, 1, None)  # (B, T-1, d)


def sample_gumbel(rng, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(u + 1e-12) + 1e-12)


def _one_hot(index: np.ndarray, n: int) -> np.ndarray:
    o = np.zeros(index.shape + (n,), dtype=ad.active_dtype())
    np.put_along_axis(o, index[..., None], 1.0, axis=-1)
    return o


def assign_direct(inverse: dict[str, Tensor], codebook: dict[str, Tensor],
                  e_i: Tensor, gumbel_temp: float, rng=None,
                  mode: str = "eval") -> ActionAssignment:
    """Direct code assignment from action logits.

    Train mode perturbs the logits with Gumbel noise before the softmax, so
    the one-hot is a sample of the Gumbel-max distribution over the logits;
    eval mode is the deterministic argmax of the raw logits. Both modes
    forward the exact one-hot; gradients flow through the soft probabilities.
    """
    if gumbel_temp <= 0:
        raise ValueError("gumbel_temp must be > 0")
    logits = ad.matmul(e_i, inverse["action_head"])
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("non-finite action logits")
    n = logits.shape[-1]
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode assignment needs a seeded rng")
        noise = sample_gumbel(rng, logits.shape)
        soft = ad.softmax(ad.scale(ad.add(logits, noise), 1.0 / gumbel_temp))
        index = soft.data.argmax(axis=-1)
    elif mode == "eval":
        soft = ad.softmax(ad.scale(logits, 1.0 / gumbel_temp))
        index = logits.data.argmax(axis=-1)
    else:
        raise ValueError(f"unknown assignment mode: {mode!r}")
    hard = _one_hot(index, n)
    straight = ad.add(ad.stop_grad(ad.sub(Tensor(hard), soft)), soft)
    action = ad.matmul(straight, codebook["codes"])
    return ActionAssignment(logits, soft, hard, straight, index, action)


def assign_vq(codebook: dict[str, Tensor], e_i: Tensor):
    """Nearest-code assignment (distance-based ablation path).

    Returns (index, action, commitment_loss, codebook_loss). The action
    forwards the selected code and passes gradients straight through to the
    encoder embedding; the two auxiliary losses are the standard pull terms.
    Ties go to the lowest index (argmin behavior).
    """
    codes = codebook["codes"]
    d2 = ((e_i.data[..., None, :] - codes.data) ** 2).sum(axis=-1)
    index = d2.argmin(axis=-1)
    quantized = ad.embedding(codes, index)
    # forward: quantized; backward: identity into e_i
    action = ad.add(ad.stop_grad(ad.sub(quantized, e_i)), e_i)
    diff_c = ad.sub(e_i, ad.stop_grad(quantized))
    commitment = ad.mean_(ad.mul(diff_c, diff_c))
    diff_q = ad.sub(quantized, ad.stop_grad(e_i))
    codebook_loss = ad.mean_(ad.mul(diff_q, diff_q))
    return index, action, commitment, codebook_loss


def world_logits(merge: dict[str, Tensor], cfg: ArchConfig,
                 e_l: Tensor, action: Tensor) -> Tensor:
    """Next-token logits from base embeddings plus an action embedding.

    Each merge MLP re-concatenates the running embedding with the action,
    gates two up-projections (SiLU(e1) * e2), and projects back down; the
    final embedding goes through the world lm-head. No biases, so an all-zero
    input yields all-zero logits.
    """
    if e_l.shape[-1] != action.shape[-1]:
        raise ValueError("embedding and action dimension mismatch")
    h = e_l
    for i in range(cfg.n_merge_mlps):
        x = ad.concat_last(h, action)
        gate = ad.mul(ad.silu(ad.matmul(x, merge[f"mlp{i}.w1"])),
                      ad.matmul(x, merge[f"mlp{i}.w2"]))
        h = ad.matmul(gate, merge[f"mlp{i}.w3"])
    return ad.matmul(h, merge["lm_head"])


def _head_stack_forward(params: dict[str, Tensor], cfg: ArchConfig,
                        depth: int, e_l: Tensor) -> Tensor:
    h = e_l
    for i in range(depth):
        h = block_forward(params, f"blk{i}", h, cfg)
    return ad.matmul(h, params["head"])


def policy_forward(policy: dict[str, Tensor], cfg: ArchConfig, e_l: Tensor) -> Tensor:
    """Per-position action distribution (B, T, N), causal in T."""
    return ad.softmax(_head_stack_forward(policy, cfg, cfg.n_layers_policy, e_l))


def policy_log_probs(policy: dict[str, Tensor], cfg: ArchConfig, e_l: Tensor) -> Tensor:
    return ad.log_softmax(_head_stack_forward(policy, cfg, cfg.n_layers_policy, e_l))


def q_forward(q: dict[str, Tensor], cfg: ArchConfig, e_l: Tensor) -> Tensor:
    """Per-position unconstrained action values (B, T, N)."""
    return _head_stack_forward(q, cfg, cfg.n_layers_policy, e_l)
