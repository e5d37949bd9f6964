"""Encoder/decoder assembly, teacher-forced training forward, beam search,
and the checkpoint file format.

The training path runs on the autodiff tensors; decoding runs on a plain
numpy incremental path with per-layer key/value caches, reading the same
parameter arrays (consistency between the two is covered by tests).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (AttentionFlags, AttentionParams, Mask,
                        attend_pos_cross, attend_pos_rel_self,
                        attend_pos_self, attend_rel_self, attend_vanilla)
from .positional import RelativeTable, SinusoidalTable
from .tensor import (ContractError, Tensor, dropout, embedding,
                     label_smoothed_nll, layer_norm)

CHECKPOINT_MAGIC = b"PATTN1"


@dataclass
class ModelConfig:
    vocab_size: int
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 64
    ffn_dim: int = 256
    n_heads: int = 4
    dropout: float = 0.3
    max_len: int = 512
    flags: AttentionFlags = field(default_factory=AttentionFlags)
    share_embeddings: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_text(self) -> str:
        """Canonical key=value block, one key per line, sorted."""
        items = {
            "d_model": self.d_model,
            "dropout": repr(self.dropout),
            "dtype": self.dtype,
            "ffn_dim": self.ffn_dim,
            "flags": ",".join(self.flags.names()) or "none",
            "max_len": self.max_len,
            "n_dec_layers": self.n_dec_layers,
            "n_enc_layers": self.n_enc_layers,
            "n_heads": self.n_heads,
            "share_embeddings": int(self.share_embeddings),
            "vocab_size": self.vocab_size,
        }
        return "".join(f"{k}={v}\n" for k, v in sorted(items.items()))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition("=")
            kv[key] = value
        return cls(
            vocab_size=int(kv["vocab_size"]),
            n_enc_layers=int(kv["n_enc_layers"]),
            n_dec_layers=int(kv["n_dec_layers"]),
            d_model=int(kv["d_model"]),
            ffn_dim=int(kv["ffn_dim"]),
            n_heads=int(kv["n_heads"]),
            dropout=float(kv["dropout"]),
            max_len=int(kv["max_len"]),
            flags=AttentionFlags.parse(kv["flags"]),
            share_embeddings=bool(int(kv["share_embeddings"])),
            dtype=kv["dtype"],
        )


class _FFN:
    def __init__(self, d_model, ffn_dim, rng, dtype):
        self.w1 = Tensor(rng.normal(0, d_model ** -0.5, (d_model, ffn_dim)).astype(dtype),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(ffn_dim, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(rng.normal(0, ffn_dim ** -0.5, (ffn_dim, d_model)).astype(dtype),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.w1 + self.b1).relu() @ self.w2 + self.b2

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class _LayerNormParams:
    def __init__(self, d_model, dtype):
        self.gain = Tensor(np.ones(d_model, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}


class _EncoderLayer:
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.attn = AttentionParams(cfg.d_model, cfg.n_heads, rng, dtype)
        self.ln1 = _LayerNormParams(cfg.d_model, dtype)
        self.ffn = _FFN(cfg.d_model, cfg.ffn_dim, rng, dtype)
        self.ln2 = _LayerNormParams(cfg.d_model, dtype)

    def parameters(self):
        out = {}
        for name, p in zip(("w_q", "w_k", "w_v", "w_o"), self.attn.parameters()):
            out[f"self.{name}"] = p
        out.update({f"ln1.{k}": v for k, v in self.ln1.parameters().items()})
        out.update({f"ffn.{k}": v for k, v in self.ffn.parameters().items()})
        out.update({f"ln2.{k}": v for k, v in self.ln2.parameters().items()})
        return out


class _DecoderLayer:
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.self_attn = AttentionParams(cfg.d_model, cfg.n_heads, rng, dtype)
        self.ln1 = _LayerNormParams(cfg.d_model, dtype)
        self.cross_attn = AttentionParams(cfg.d_model, cfg.n_heads, rng, dtype)
        self.ln2 = _LayerNormParams(cfg.d_model, dtype)
        self.ffn = _FFN(cfg.d_model, cfg.ffn_dim, rng, dtype)
        self.ln3 = _LayerNormParams(cfg.d_model, dtype)

    def parameters(self):
        out = {}
        for name, p in zip(("w_q", "w_k", "w_v", "w_o"), self.self_attn.parameters()):
            out[f"self.{name}"] = p
        for name, p in zip(("w_q", "w_k", "w_v", "w_o"), self.cross_attn.parameters()):
            out[f"cross.{name}"] = p
        out.update({f"ln1.{k}": v for k, v in self.ln1.parameters().items()})
        out.update({f"ln2.{k}": v for k, v in self.ln2.parameters().items()})
        out.update({f"ffn.{k}": v for k, v in self.ffn.parameters().items()})
        out.update({f"ln3.{k}": v for k, v in self.ln3.parameters().items()})
        return out


class Seq2SeqModel:
    """Configurable seq2seq transformer with position-aware attention toggles."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dtype = cfg.np_dtype
        rng = np.random.default_rng(seed)
        self.embeddings = Tensor(
            rng.normal(0, cfg.d_model ** -0.5, (cfg.vocab_size, cfg.d_model)).astype(dtype),
            requires_grad=True)
        self.pos = SinusoidalTable(cfg.max_len, cfg.d_model, dtype=dtype)
        # one relative table shared by every self-attention module
        self.rel = (RelativeTable(cfg.max_len, cfg.d_head, rng=rng, dtype=dtype)
                    if cfg.flags.rel_self else None)
        self.enc_layers = [_EncoderLayer(cfg, rng, dtype) for _ in range(cfg.n_enc_layers)]
        self.dec_layers = [_DecoderLayer(cfg, rng, dtype) for _ in range(cfg.n_dec_layers)]
        if cfg.share_embeddings:
            self.out_proj = None
        else:
            self.out_proj = Tensor(
                rng.normal(0, cfg.d_model ** -0.5, (cfg.d_model, cfg.vocab_size)).astype(dtype),
                requires_grad=True)

    # -- parameters ------------------------------------------------------------

    def parameters(self) -> dict:
        """Stable name -> Tensor mapping of every trainable parameter."""
        out = {"emb.weight": self.embeddings}
        if self.out_proj is not None:
            out["out.weight"] = self.out_proj
        if self.rel is not None:
            out["rel.table"] = self.rel.table
        for i, layer in enumerate(self.enc_layers):
            out.update({f"enc.{i}.{k}": v for k, v in layer.parameters().items()})
        for i, layer in enumerate(self.dec_layers):
            out.update({f"dec.{i}.{k}": v for k, v in layer.parameters().items()})
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    # -- forward: encoder -----------------------------------------------------

    def _embed(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[0] > self.cfg.max_len:
            raise ContractError(
                f"sequence of {ids.shape[0]} tokens exceeds max_len {self.cfg.max_len}")
        scaled = embedding(self.embeddings, ids) * (self.cfg.d_model ** 0.5)
        return scaled + Tensor(self.pos.rows(ids.shape[0]))

    def encode(self, src_ids, rng: np.random.Generator | None = None) -> list[Tensor]:
        """All encoder layer outputs; index 0 is the embedded input itself.

        Dropout is active only when an ``rng`` is supplied.
        """
        cfg = self.cfg
        flags = cfg.flags
        states = [self._embed(src_ids)]
        n = states[0].shape[0]
        pe = self.pos.rows(n)
        h = self._dropout(states[0], rng)
        for layer in self.enc_layers:
            if flags.pos_self_src and flags.rel_self:
                attn = attend_pos_rel_self(h, pe, layer.attn, self.rel)
            elif flags.pos_self_src:
                attn = attend_pos_self(h, pe, layer.attn)
            elif flags.rel_self:
                attn = attend_rel_self(h, layer.attn, self.rel)
            else:
                attn = attend_vanilla(h, h, layer.attn)
            h = layer.ln1(h + self._dropout(attn, rng))
            h = layer.ln2(h + self._dropout(layer.ffn(h), rng))
            states.append(h)
        return states

    # -- forward: decoder -----------------------------------------------------

    def _decode_states(self, tgt_in_ids, enc_out: Tensor,
                       rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.cfg
        flags = cfg.flags
        h = self._dropout(self._embed(tgt_in_ids), rng)
        n_t = h.shape[0]
        n_s = enc_out.shape[0]
        pe_t = self.pos.rows(n_t)
        pe_s = self.pos.rows(n_s)
        causal = Mask.causal(n_t, dtype=cfg.np_dtype)
        for layer in self.dec_layers:
            if flags.pos_self_tgt and flags.rel_self:
                attn = attend_pos_rel_self(h, pe_t, layer.self_attn, self.rel, causal)
            elif flags.pos_self_tgt:
                attn = attend_pos_self(h, pe_t, layer.self_attn, causal)
            elif flags.rel_self:
                attn = attend_rel_self(h, layer.self_attn, self.rel, causal)
            else:
                attn = attend_vanilla(h, h, layer.self_attn, causal)
            h = layer.ln1(h + self._dropout(attn, rng))
            if flags.pos_cross:
                cross = attend_pos_cross(h, enc_out, pe_t, pe_s, layer.cross_attn)
            else:
                cross = attend_vanilla(h, enc_out, layer.cross_attn)
            h = layer.ln2(h + self._dropout(cross, rng))
            h = layer.ln3(h + self._dropout(layer.ffn(h), rng))
        return h

    def output_logits(self, h: Tensor) -> Tensor:
        if self.out_proj is not None:
            return h @ self.out_proj
        return h @ self.embeddings.transpose(1, 0)

    def forward_teacher_forced(self, src_ids, tgt_ids, smoothing: float = 0.1,
                               pad_id: int = 0, rng: np.random.Generator | None = None):
        """Teacher-forced forward pass; returns (logits [T x V], loss)."""
        tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
        if tgt_ids.shape[0] < 2:
            raise ContractError("target must contain at least <sos> and one token")
        enc_out = self.encode(src_ids, rng=rng)[-1]
        h = self._decode_states(tgt_ids[:-1], enc_out, rng=rng)
        logits = self.output_logits(h)
        loss = label_smoothed_nll(logits, tgt_ids[1:], smoothing, pad_id)
        return logits, loss

    def _dropout(self, x: Tensor, rng):
        if rng is None or self.cfg.dropout <= 0.0:
            return x
        return dropout(x, self.cfg.dropout, rng)

    # -- decoding ---------------------------------------------------------------

    def beam_search(self, src_ids, sos_id: int, eos_id: int, beam_size: int = 5,
                    lenpen: float = 1.0, max_len_a: float = 1.1,
                    max_len_b: int = 7) -> list[int]:
        """Beam decoding with length-normalized scores.

        The generated portion (after <sos>) is capped at
        floor(max_len_a * len(src)) + max_len_b tokens, <eos> included.
        """
        if beam_size < 1:
            raise ContractError("beam_size must be >= 1")
        src_ids = np.asarray(src_ids, dtype=np.int64)
        cap = int(np.floor(max_len_a * src_ids.shape[0])) + max_len_b
        cap = min(cap, self.cfg.max_len - 1)
        session = _DecodeSession(self, src_ids)

        beams = [([sos_id], 0.0, session.initial_state())]
        finished = []  # (normalized score, token ids)
        for _ in range(cap):
            candidates = []
            for tokens, score, state in beams:
                logp, next_state = session.step_logprobs(tokens, state)
                # keep only plausible continuations; beam_size + eos is enough
                top = np.argsort(-logp, kind="stable")[: beam_size + 1]
                for tok in top:
                    candidates.append((score + float(logp[tok]), int(tok),
                                       tokens, next_state))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            beams = []
            for cand_score, tok, tokens, state in candidates:
                seq = tokens + [tok]
                gen_len = len(seq) - 1
                if tok == eos_id:
                    finished.append((cand_score / gen_len ** lenpen, seq))
                elif len(beams) < beam_size:
                    beams.append((seq, cand_score, state))
                if len(beams) >= beam_size and len(finished) >= beam_size:
                    break
            if not beams:
                break

        if not finished:
            # ran into the cap; fall back to the best live hypothesis
            finished = [(score / (len(tokens) - 1) ** lenpen, tokens)
                        for tokens, score, _ in beams]
        finished.sort(key=lambda f: (-f[0], f[1]))
        return finished[0][1]

    def greedy_decode(self, src_ids, sos_id: int, eos_id: int,
                      max_len_a: float = 1.1, max_len_b: int = 7) -> list[int]:
        return self.beam_search(src_ids, sos_id, eos_id, beam_size=1,
                                lenpen=1.0, max_len_a=max_len_a, max_len_b=max_len_b)


# -- plain-numpy incremental decoding ---------------------------------------------


def _ln_np(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


def _softmax_np(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class _DecodeSession:
    """Shared encoder work plus per-hypothesis decoder K/V caches.

    The decoder state is advanced lazily: ``step_logprobs`` consumes the
    hypothesis prefix that has not been fed yet, so beam bookkeeping stays a
    plain list of token ids.
    """

    def __init__(self, model: Seq2SeqModel, src_ids):
        self.model = model
        cfg = model.cfg
        self.flags = cfg.flags
        enc_out = model.encode(src_ids)[-1].data
        self.pe = model.pos.table
        n_s = enc_out.shape[0]
        self.cross_kv = []
        for layer in model.dec_layers:
            k_in = enc_out + self.pe[:n_s] if self.flags.pos_cross else enc_out
            k = self._split(k_in @ layer.cross_attn.w_k.data)
            v = self._split(enc_out @ layer.cross_attn.w_v.data)
            self.cross_kv.append((k, v))

    def _split(self, x):
        n, d = x.shape
        cfg = self.model.cfg
        return x.reshape(n, cfg.n_heads, cfg.d_head).transpose(1, 0, 2)

    def initial_state(self):
        # per layer: (self K cache [h, t, d], self V cache)
        return tuple((None, None) for _ in self.model.dec_layers)

    def step_logprobs(self, tokens, state):
        """Feed the last token of ``tokens``; return (log-probs, new state)."""
        model = self.model
        cfg = model.cfg
        t = len(tokens) - 1  # absolute position of the token being fed
        tok = tokens[-1]
        x = model.embeddings.data[tok] * (cfg.d_model ** 0.5) + self.pe[t]
        x = x[None, :]
        new_state = []
        for layer, (k_cache, v_cache), (ck, cv) in zip(model.dec_layers, state,
                                                       self.cross_kv):
            x, k_cache, v_cache = self._self_attn_step(layer, x, t, k_cache, v_cache)
            new_state.append((k_cache, v_cache))
            x = self._cross_attn_step(layer, x, t, ck, cv)
            ffn = layer.ffn
            inner = np.maximum(x @ ffn.w1.data + ffn.b1.data, 0.0)
            x = _ln_np(x + (inner @ ffn.w2.data + ffn.b2.data),
                       layer.ln3.gain.data, layer.ln3.bias.data)
        if model.out_proj is not None:
            logits = (x @ model.out_proj.data)[0]
        else:
            logits = (x @ model.embeddings.data.T)[0]
        logits = logits - logits.max()
        logp = logits - np.log(np.exp(logits).sum())
        return logp, tuple(new_state)

    def _self_attn_step(self, layer, x, t, k_cache, v_cache):
        cfg = self.model.cfg
        attn = layer.self_attn
        q_in = x + self.pe[t][None, :] if self.flags.pos_self_tgt else x
        q = self._split(q_in @ attn.w_q.data)          # [h, 1, d]
        k_new = self._split(q_in @ attn.w_k.data)
        v_new = self._split(x @ attn.w_v.data)
        k_cache = k_new if k_cache is None else np.concatenate([k_cache, k_new], axis=1)
        v_cache = v_new if v_cache is None else np.concatenate([v_cache, v_new], axis=1)
        logits = q @ k_cache.transpose(0, 2, 1)        # [h, 1, t+1]
        if self.flags.rel_self:
            rel = self.model.rel
            rows = rel.table.data[t - np.arange(t + 1) + rel.max_len]  # [t+1, d]
            logits = logits + np.einsum("hqd,jd->hqj", q, rows)
        logits = logits * (cfg.d_head ** -0.5)
        weights = _softmax_np(logits, axis=-1)
        out = (weights @ v_cache).transpose(1, 0, 2).reshape(1, cfg.d_model)
        x = _ln_np(x + out @ attn.w_o.data, layer.ln1.gain.data, layer.ln1.bias.data)
        return x, k_cache, v_cache

    def _cross_attn_step(self, layer, x, t, k_s, v_s):
        cfg = self.model.cfg
        attn = layer.cross_attn
        q_in = x + self.pe[t][None, :] if self.flags.pos_cross else x
        q = self._split(q_in @ attn.w_q.data)
        logits = (q @ k_s.transpose(0, 2, 1)) * (cfg.d_head ** -0.5)
        weights = _softmax_np(logits, axis=-1)
        out = (weights @ v_s).transpose(1, 0, 2).reshape(1, cfg.d_model)
        return _ln_np(x + out @ attn.w_o.data, layer.ln2.gain.data, layer.ln2.bias.data)


# -- parameter accounting -----------------------------------------------------------


def added_params(cfg: ModelConfig) -> int:
    """Extra parameters introduced by the position-aware flags over vanilla."""
    vanilla = Seq2SeqModel(replace(cfg, flags=AttentionFlags.vanilla())).n_params()
    return Seq2SeqModel(cfg).n_params() - vanilla


# -- checkpoint I/O ----------------------------------------------------------------


def save_checkpoint(path, model: Seq2SeqModel, extra: dict | None = None):
    """Write magic, length-prefixed config text, then named float32 records."""
    records = {name: p.data for name, p in model.parameters().items()}
    if extra:
        records.update({f"extra.{k}": np.asarray(v) for k, v in extra.items()})
    config_bytes = model.cfg.to_text().encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(config_bytes)))
        f.write(config_bytes)
        f.write(struct.pack("<I", len(records)))
        for name in sorted(records):
            arr = np.ascontiguousarray(records[name], dtype="<f4")
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (model, extra_records)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r}): {path}")
        (config_len,) = struct.unpack("<I", f.read(4))
        cfg = ModelConfig.from_text(f.read(config_len).decode("utf-8"))
        (n_records,) = struct.unpack("<I", f.read(4))
        records = {}
        for _ in range(n_records):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            records[name] = arr

    model = Seq2SeqModel(cfg)
    params = model.parameters()
    extra = {}
    for name, arr in records.items():
        if name.startswith("extra."):
            extra[name[len("extra."):]] = arr.astype(cfg.np_dtype)
        elif name in params:
            if params[name].shape != arr.shape:
                raise ValueError(f"checkpoint record {name} has shape {arr.shape}, "
                                 f"model expects {params[name].shape}")
            params[name].data = arr.astype(cfg.np_dtype)
        else:
            raise ValueError(f"unknown checkpoint record: {name}")
    missing = set(params) - {n for n in records if not n.startswith("extra.")}
    if missing:
        raise ValueError(f"checkpoint is missing parameters: {sorted(missing)}")
    return model, extra
