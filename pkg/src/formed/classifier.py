"""Attention classification head shared across datasets.

Per-dataset channel embeddings are broadcast-added to the backbone feature
tokens, all tokens are flattened into one key sequence, and per-dataset label
queries attend over it through a single shared attention layer followed by a
residual block that emits one logit per query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneWeights, extract_features
from .nn import AttentionWeights, ResidualBlockWeights, Weights, multi_head_attention, residual_block, softmax
from .tensor import Tensor, as_tensor

__all__ = [
    "SDAWeights",
    "prompt_features",
    "flatten_tokens",
    "decode",
    "predict_proba",
    "classify",
    "classify_features",
    "TASK_KINDS",
]

TASK_KINDS = ("multiclass", "binary")


@dataclass(eq=False)
class SDAWeights(Weights):
    """Shared decoding attention: one cross-attention plus a ``D -> 1`` residual block."""

    heads: int
    attn: AttentionWeights
    out_block: ResidualBlockWeights

    @classmethod
    def init(cls, dim: int, heads: int, seed: int = 0) -> "SDAWeights":
        if dim % heads:
            raise ValueError(f"model dim {dim} is not divisible by {heads} heads")
        rng = np.random.default_rng(seed)
        return cls(heads, AttentionWeights.init(rng, dim), ResidualBlockWeights.init(rng, dim, dim, 1))

    @property
    def dim(self) -> int:
        return self.attn.w_query.shape[0]


def prompt_features(h, e) -> Tensor:
    """``(..., C, L, D) + (C, D)`` broadcast over the patch axis."""
    h, e = as_tensor(h), as_tensor(e)
    if h.shape[-3] != e.shape[0]:
        raise ValueError(f"task/dataset channel mismatch: features have {h.shape[-3]} channels, task has {e.shape[0]}")
    if h.shape[-1] != e.shape[1]:
        raise ValueError(f"embedding width {e.shape[1]} does not match feature width {h.shape[-1]}")
    return h + e.reshape(e.shape[0], 1, e.shape[1])


def flatten_tokens(h, valid) -> tuple[Tensor, np.ndarray]:
    """Channel-major flattening to ``(..., C*L, D)``; the mask is True for padded patches."""
    h = as_tensor(h)
    valid = np.asarray(valid, dtype=bool)
    *lead, c, length, d = h.shape
    if valid.shape[-2:] != (c, length):
        raise ValueError(f"validity flags {valid.shape} do not match features {h.shape}")
    key_mask = ~valid.reshape(*valid.shape[:-2], c * length)
    if key_mask.all(axis=-1).any():
        raise ValueError("no attendable keys: every patch is padding")
    return h.reshape(*lead, c * length, d), key_mask


def decode(q, tokens, key_mask, sda: SDAWeights) -> Tensor:
    """Logits ``(..., K)`` from label queries ``(K, D)`` over tokens ``(..., N, D)``.

    Each query is carried on its own leading axis so its arithmetic is
    independent of every other query row.
    """
    q, tokens = as_tensor(q), as_tensor(tokens)
    k = q.shape[0]
    if k < 1:
        raise ValueError("need at least one label query")
    lead = tokens.shape[:-2]
    queries = q.reshape(*([1] * len(lead)), k, 1, q.shape[1])
    keys = tokens.expand_dims(-3)  # (..., 1, N, D)
    mask = np.asarray(key_mask, dtype=bool)[..., None, :]  # (..., 1, N)
    attended = multi_head_attention(queries, keys, keys, sda.attn, sda.heads, key_mask=mask)
    logits = residual_block(attended, sda.out_block)  # (..., K, 1, 1)
    return logits.reshape(*lead, k)


def predict_proba(logits, task_kind: str = "multiclass") -> np.ndarray:
    logits = as_tensor(logits)
    if task_kind == "multiclass":
        if logits.shape[-1] < 2:
            raise ValueError("multiclass prediction needs at least two classes")
        return softmax(logits, axis=-1).data
    if task_kind == "binary":
        return logits.sigmoid().data
    raise ValueError(f"unknown task kind {task_kind!r}")


def classify_features(h, valid, e, q, sda: SDAWeights) -> Tensor:
    prompted = prompt_features(h, e)
    tokens, key_mask = flatten_tokens(prompted, valid)
    return decode(q, tokens, key_mask, sda)


def classify(x, m, backbone: BackboneWeights, e, q, sda: SDAWeights, task_kind: str = "multiclass"):
    """Full forward pass for ``(..., C, T)`` input; returns ``(logits, probabilities)``."""
    h, valid = extract_features(x, m, backbone)
    logits = classify_features(h, valid, e, q, sda)
    return logits, predict_proba(logits, task_kind)
