"""Absolute sinusoidal position embeddings and the learned relative table."""

from __future__ import annotations

import numpy as np

from .tensor import ContractError, Tensor, gather_last


class SinusoidalTable:
    """Fixed sinusoidal position embeddings, precomputed up to ``max_len``.

    table[p, 2i]   = sin(p / 10000^(2i/dim))
    table[p, 2i+1] = cos(p / 10000^(2i/dim))
    """

    def __init__(self, max_len: int, dim: int, dtype=np.float64):
        if dim % 2 != 0:
            raise ContractError(f"sinusoidal dim must be even, got {dim}")
        if max_len < 1:
            raise ContractError(f"max_len must be >= 1, got {max_len}")
        self.max_len = max_len
        self.dim = dim
        pos = np.arange(max_len, dtype=np.float64)[:, None]
        freqs = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
        angles = pos * freqs[None, :]
        table = np.empty((max_len, dim), dtype=np.float64)
        table[:, 0::2] = np.sin(angles)
        table[:, 1::2] = np.cos(angles)
        self.table = table.astype(dtype)

    def rows(self, length: int) -> np.ndarray:
        """Embeddings for positions 0..length-1."""
        if length > self.max_len:
            raise ContractError(f"requested {length} positions, table holds {self.max_len}")
        return self.table[:length]


def sinusoidal(max_len: int, dim: int, dtype=np.float64) -> SinusoidalTable:
    return SinusoidalTable(max_len, dim, dtype=dtype)


class RelativeTable:
    """Trainable embeddings of signed relative distance, shared across heads.

    Row r encodes distance r - max_len, covering [-max_len, +max_len] without
    clipping, so the parameter count is (2 * max_len + 1) * head_dim.
    """

    def __init__(self, max_len: int, head_dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        self.max_len = max_len
        self.head_dim = head_dim
        rng = rng or np.random.default_rng(0)
        init = rng.normal(0.0, head_dim ** -0.5, size=(2 * max_len + 1, head_dim))
        self.table = Tensor(init.astype(dtype), requires_grad=True)

    @property
    def n_params(self) -> int:
        return (2 * self.max_len + 1) * self.head_dim

    def distance_index(self, n_query: int, n_key: int) -> np.ndarray:
        """index[i, j] = (i - j) + max_len, the table row for query i / key j."""
        i = np.arange(n_query)[:, None]
        j = np.arange(n_key)[None, :]
        return i - j + self.max_len


def relative_logits(q_heads: Tensor, rel: RelativeTable, query_offset: int = 0) -> Tensor:
    """Relative-position attention logits: out[h, i, j] = q[h, i] . table[i - j + L].

    ``query_offset`` shifts query positions, used during incremental decoding
    where the single query row sits at an absolute step > 0.
    """
    n_q = q_heads.shape[-2]
    n_k = n_q + query_offset if query_offset else n_q
    if q_heads.shape[-1] != rel.head_dim:
        raise ContractError(f"head dim {q_heads.shape[-1]} != relative table dim {rel.head_dim}")
    if max(n_q + query_offset, n_k) > rel.max_len:
        raise ContractError(
            f"sequence length {max(n_q + query_offset, n_k)} exceeds relative table range "
            f"{rel.max_len}; split the document into sub-documents first")
    # all distances along the last axis, then pick the needed diagonal band
    scores = q_heads @ rel.table.transpose(1, 0)  # [h, n_q, 2L+1]
    i = np.arange(n_q)[:, None] + query_offset
    j = np.arange(n_k)[None, :]
    return gather_last(scores, i - j + rel.max_len)


def relative_logits_naive(q_heads: np.ndarray, table: np.ndarray, max_len: int) -> np.ndarray:
    """Reference O(I^2) gather-and-dot, kept deliberately simple."""
    h, n, d = q_heads.shape
    out = np.zeros((h, n, n), dtype=q_heads.dtype)
    for head in range(h):
        for i in range(n):
            for j in range(n):
                out[head, i, j] = q_heads[head, i] @ table[i - j + max_len]
    return out
