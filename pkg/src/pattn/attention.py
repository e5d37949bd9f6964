"""Multi-head attention and its position-aware variants.

All five variants share one multi-head core; they differ only in what feeds
the query/key projections (hidden states, optionally plus absolute position
embeddings) and whether relative-position logits are added.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .positional import RelativeTable, relative_logits
from .tensor import ShapeError, Tensor, add_const, mul_const, softmax


@dataclass
class AttentionFlags:
    """Ablation toggles: which attention modules receive position information."""

    pos_self_src: bool = True
    pos_self_tgt: bool = True
    pos_cross: bool = True
    rel_self: bool = True

    @classmethod
    def vanilla(cls) -> "AttentionFlags":
        return cls(False, False, False, False)

    @classmethod
    def parse(cls, spec: str) -> "AttentionFlags":
        """Parse a comma-separated flag list, e.g. 'pos_cross,rel_self'."""
        flags = cls.vanilla()
        spec = spec.strip()
        if spec in ("", "none"):
            return flags
        if spec == "all":
            return cls()
        for name in spec.split(","):
            name = name.strip()
            if name not in ("pos_self_src", "pos_self_tgt", "pos_cross", "rel_self"):
                raise ValueError(f"unknown attention flag: {name!r}")
            setattr(flags, name, True)
        return flags

    def names(self):
        return [n for n in ("pos_self_src", "pos_self_tgt", "pos_cross", "rel_self")
                if getattr(self, n)]


class AttentionParams:
    """Projection matrices for one multi-head attention module."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 dtype=np.float64):
        if d_model % n_heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_head = d_model // n_heads
        std = d_model ** -0.5
        self.w_q = Tensor(rng.normal(0, std, (d_model, d_model)).astype(dtype), requires_grad=True)
        self.w_k = Tensor(rng.normal(0, std, (d_model, d_model)).astype(dtype), requires_grad=True)
        self.w_v = Tensor(rng.normal(0, std, (d_model, d_model)).astype(dtype), requires_grad=True)
        self.w_o = Tensor(rng.normal(0, std, (d_model, d_model)).astype(dtype), requires_grad=True)

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o]


class Mask:
    """Additive attention mask over an [n_query x n_key] logit block."""

    def __init__(self, bias: np.ndarray):
        self.bias = bias  # 0 where visible, -inf surrogate where masked

    @classmethod
    def none(cls, n_query: int, n_key: int) -> "Mask":
        return cls(np.zeros((n_query, n_key)))

    @classmethod
    def causal(cls, n: int, dtype=np.float64) -> "Mask":
        bias = np.triu(np.full((n, n), _neg_inf(dtype)), k=1)
        return cls(bias)

    @classmethod
    def padding(cls, n_query: int, key_keep, dtype=np.float64) -> "Mask":
        """Mask out key positions where ``key_keep`` is False."""
        key_keep = np.asarray(key_keep, dtype=bool)
        bias = np.where(key_keep[None, :], 0.0, _neg_inf(dtype))
        return cls(np.broadcast_to(bias, (n_query, key_keep.shape[0])).copy())

    @classmethod
    def causal_padding(cls, key_keep, dtype=np.float64) -> "Mask":
        key_keep = np.asarray(key_keep, dtype=bool)
        n = key_keep.shape[0]
        return cls(cls.causal(n, dtype).bias + cls.padding(n, key_keep, dtype).bias)

    def fully_masked_rows(self) -> np.ndarray:
        return (self.bias < 0).all(axis=-1)


def _neg_inf(dtype) -> float:
    # -inf surrogate; large enough to vanish under softmax, small enough to
    # keep the subtraction-stabilized exponentials finite
    return -1e9 if np.dtype(dtype) == np.float32 else -1e18


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    length, d_model = x.shape
    return x.reshape(length, n_heads, d_model // n_heads).transpose(1, 0, 2)


def merge_heads(x: Tensor) -> Tensor:
    n_heads, length, d_head = x.shape
    return x.transpose(1, 0, 2).reshape(length, n_heads * d_head)


def multi_head(q_in: Tensor, k_in: Tensor, v_in: Tensor, params: AttentionParams,
               mask: Mask | None = None, rel: RelativeTable | None = None,
               query_offset: int = 0) -> Tensor:
    """Core multi-head attention: Softmax((QK^T [+ S_rel]) / sqrt(d_head)) V, then W_O."""
    q = split_heads(q_in @ params.w_q, params.n_heads)
    k = split_heads(k_in @ params.w_k, params.n_heads)
    v = split_heads(v_in @ params.w_v, params.n_heads)

    logits = q @ k.transpose(0, 2, 1)
    if rel is not None:
        logits = logits + relative_logits(q, rel, query_offset=query_offset)
    logits = logits * (params.d_head ** -0.5)
    if mask is not None:
        if mask.bias.shape != logits.shape[1:]:
            raise ShapeError(f"mask shape {mask.bias.shape} does not match logits {logits.shape[1:]}")
        logits = add_const(logits, mask.bias[None, :, :])

    weights = softmax(logits, axis=-1)
    if mask is not None:
        dead = mask.fully_masked_rows()
        if dead.any():
            weights = mul_const(weights, (~dead).astype(weights.dtype)[None, :, None])

    return merge_heads(weights @ v) @ params.w_o


def attend_vanilla(h_q: Tensor, h_kv: Tensor, params: AttentionParams,
                   mask: Mask | None = None) -> Tensor:
    """Plain attention; position information only as carried by the hidden states."""
    return multi_head(h_q, h_kv, h_kv, params, mask)


def attend_pos_self(h: Tensor, p: np.ndarray, params: AttentionParams,
                    mask: Mask | None = None) -> Tensor:
    """Self-attention with absolute positions added to the query/key inputs.

    Values are computed from the hidden states alone.
    """
    hp = _with_positions(h, p)
    return multi_head(hp, hp, h, params, mask)


def attend_pos_cross(h_t: Tensor, h_s: Tensor, p_t: np.ndarray, p_s: np.ndarray,
                     params: AttentionParams, mask: Mask | None = None) -> Tensor:
    """Cross-attention with absolute positions on both the decoder and encoder sides."""
    return multi_head(_with_positions(h_t, p_t), _with_positions(h_s, p_s), h_s, params, mask)


def attend_rel_self(h: Tensor, params: AttentionParams, rel: RelativeTable,
                    mask: Mask | None = None) -> Tensor:
    """Self-attention with learned relative-position logits added to QK^T."""
    return multi_head(h, h, h, params, mask, rel=rel)


def attend_pos_rel_self(h: Tensor, p: np.ndarray, params: AttentionParams,
                        rel: RelativeTable, mask: Mask | None = None) -> Tensor:
    """Absolute positions on queries/keys plus relative logits from the same queries."""
    hp = _with_positions(h, p)
    return multi_head(hp, hp, h, params, mask, rel=rel)


def _with_positions(h: Tensor, p: np.ndarray) -> Tensor:
    p = np.asarray(p)
    if p.shape[0] < h.shape[0]:
        raise ShapeError(f"position rows {p.shape[0]} < sequence length {h.shape[0]}")
    return add_const(h, p[: h.shape[0]].astype(h.dtype))
