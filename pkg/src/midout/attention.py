"""General (bilinear) attention and the two decoder self-attention memories.

All three mechanisms use the previous decoder hidden state as the query and
let keys double as values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import uniform_init
from .rng import RngStream
from .tensor import (ContractError, ParameterStore, Tensor, batched_dot, bilinear_attention, matmul, softmax, stack,
                     weighted_sum)


@dataclass
class AttentionResult:
    weights: Tensor   # (batch, m); empty (batch, 0) for an empty memory
    context: Tensor   # (batch, value_dim)


class BilinearAttention:
    """score(q, k) = q W k with W of shape (query_dim, key_dim)."""

    def __init__(self, store: ParameterStore, name: str, query_dim: int, key_dim: int, rng: RngStream):
        self.query_dim = query_dim
        self.key_dim = key_dim
        self.w = store.add(f"{name}.W_a", uniform_init(rng, (query_dim, key_dim)))

    def score(self, query: Tensor, key: Tensor) -> Tensor:
        if query.shape[-1] != self.query_dim or key.shape[-1] != self.key_dim:
            raise ContractError(
                f"score: query {query.shape} / key {key.shape} do not fit W_a {self.w.shape}")
        return matmul(matmul(query, self.w), key)

    def attend(self, query: Tensor, keys, values=None) -> AttentionResult:
        """Softmax-weighted sum of ``values``; ``keys`` is a stacked (batch, m, K) tensor or a list of (batch, K)."""
        if isinstance(keys, list):
            if values is not None and len(values) != len(keys):
                raise ContractError(f"attend: {len(keys)} keys but {len(values)} values")
            if not keys:
                lead = query.shape[:-1]
                return AttentionResult(Tensor(np.zeros(lead + (0,))), Tensor(np.zeros(lead + (self.key_dim,))))
            axis = keys[0].data.ndim - 1
            keys_t = stack(keys, axis=axis)
            values = keys_t if values is None else stack(values, axis=axis)
            keys = keys_t
        elif values is None:
            values = keys
        if query.shape[-1] != self.query_dim or keys.shape[-1] != self.key_dim:
            raise ContractError(f"attend: query {query.shape} / keys {keys.shape} do not fit W_a {self.w.shape}")
        if keys.shape[:-1] != values.shape[:-1]:
            raise ContractError(f"attend: keys {keys.shape} and values {values.shape} disagree on memory length")
        if values is keys and query.data.ndim == 2:
            return AttentionResult(*bilinear_attention(query, self.w, keys))
        scores = batched_dot(keys, matmul(query, self.w))
        alpha = softmax(scores, axis=-1)
        return AttentionResult(alpha, weighted_sum(alpha, values))


def score(att: BilinearAttention, query: Tensor, key: Tensor) -> Tensor:
    return att.score(query, key)


def attend(att: BilinearAttention, query: Tensor, keys, values=None) -> AttentionResult:
    return att.attend(query, keys, values)


def self_attend_outputs(att: BilinearAttention, query: Tensor, memory: list[Tensor]) -> Tensor:
    """d_t: attention context over embedded outputs; zero vector for an empty memory."""
    return att.attend(query, list(memory)).context


def self_attend_hidden(att: BilinearAttention, query: Tensor, memory: list[Tensor]) -> Tensor:
    """Attention context over past decoder hidden states; zero vector for an empty memory."""
    return att.attend(query, list(memory)).context
