"""Encoder-decoder transformer over token grids.

The encoder reads the caption; the decoder attends to it through cross
attention and runs either fully bidirectional self-attention (parallel
mask-predict decoding: logits for every position in one pass) or causal
self-attention (the autoregressive baseline). MASK tokens enter through
a dedicated embedding row, never through attention masking, and nothing
in the network is conditioned on an iteration index or mask count.

All regimes share one architecture and parameter set, so parameter
counts are identical across training regimes for a fixed config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ModelConfig:
    enc_layers: int = 4
    dec_layers: int = 4
    width: int = 128
    heads: int = 4
    vocab_text: int = 64
    vocab_image: int = 512
    seq_len_text: int = 16
    seq_len_target: int = 64
    dropout: float = 0.0
    dtype: str = "float32"
    tie_embeddings: bool = False  # decoder head reuses the token embedding

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def mask_id(self) -> int:
        """MASK sentinel: one past the image-token vocabulary."""
        return self.vocab_image

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelBundle:
    """Config + named parameters + provenance; the unit of checkpointing."""

    config: ModelConfig
    params: dict[str, Tensor]
    regime: str = "untrained"
    step: int = 0
    counters: dict = field(default_factory=lambda: {"encoder_passes": 0, "decoder_passes": 0})

    def param_items(self):
        return sorted(self.params.items())

    def num_params(self) -> int:
        return sum(p.size for _, p in self.params.items())

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def reset_counters(self):
        self.counters = {"encoder_passes": 0, "decoder_passes": 0}


def init_bundle(config: ModelConfig, rng: np.random.Generator, regime: str = "untrained") -> ModelBundle:
    """Fresh parameters: normal(0, 0.02) weights, zero biases, unit LN gains."""
    dt = config.np_dtype
    w = config.width
    params: dict[str, Tensor] = {}

    def normal(name, shape, std=0.02):
        params[name] = Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    normal("enc.tok_emb", (config.vocab_text, w))
    normal("enc.pos_emb", (config.seq_len_text, w))
    # decoder embeds image tokens plus the MASK sentinel row
    normal("dec.tok_emb", (config.vocab_image + 1, w))
    normal("dec.pos_emb", (config.seq_len_target, w))

    def block(prefix, cross: bool):
        for sub in ["attn"] + (["xattn"] if cross else []):
            for m in ("q", "k", "v", "o"):
                normal(f"{prefix}.{sub}.w{m}", (w, w))
                zeros(f"{prefix}.{sub}.b{m}", (w,))
            ones(f"{prefix}.{sub}.ln_g", (w,))
            zeros(f"{prefix}.{sub}.ln_b", (w,))
        normal(f"{prefix}.ffn.w1", (w, 4 * w))
        zeros(f"{prefix}.ffn.b1", (4 * w,))
        normal(f"{prefix}.ffn.w2", (4 * w, w))
        zeros(f"{prefix}.ffn.b2", (w,))
        ones(f"{prefix}.ffn.ln_g", (w,))
        zeros(f"{prefix}.ffn.ln_b", (w,))

    for i in range(config.enc_layers):
        block(f"enc.{i}", cross=False)
    ones("enc.ln_f_g", (w,))
    zeros("enc.ln_f_b", (w,))

    for i in range(config.dec_layers):
        block(f"dec.{i}", cross=True)
    ones("dec.ln_f_g", (w,))
    zeros("dec.ln_f_b", (w,))
    # output head over the image vocabulary only: MASK is never predicted
    if not config.tie_embeddings:
        normal("dec.head_w", (w, config.vocab_image))
    zeros("dec.head_b", (config.vocab_image,))

    return ModelBundle(config=config, params=params, regime=regime)


# ---------------------------------------------------------------------------
# forward pieces


def _attention(p, prefix, x: Tensor, kv: Tensor, heads: int, causal: bool,
               train: bool, drop: float, rng) -> Tensor:
    b, lq, w = x.shape
    lk = kv.shape[1]
    dh = w // heads
    xn = T.layer_norm(x, p[f"{prefix}.ln_g"], p[f"{prefix}.ln_b"])
    # self-attention normalizes its own input; cross-attention keys/values
    # are the encoder memory, already normalized by the encoder's final LN
    kvn = xn if kv is x else kv

    def proj(inp, m, length):
        h = T.add(T.matmul(inp, p[f"{prefix}.w{m}"]), p[f"{prefix}.b{m}"])
        h = T.reshape(h, (b, length, heads, dh))
        return T.transpose(h, (0, 2, 1, 3))  # (b, heads, L, dh)

    q = proj(xn, "q", lq)
    k = proj(kvn, "k", lk)
    v = proj(kvn, "v", lk)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if causal:
        neg = np.triu(np.full((lq, lk), -1e9, dtype=x.dtype), k=1)
        scores = T.add(scores, Tensor(neg))
    attn = T.softmax(scores, axis=-1)
    if train and drop > 0.0:
        attn = T.dropout(attn, drop, rng)
    ctx = T.matmul(attn, v)  # (b, heads, lq, dh)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, lq, w))
    out = T.add(T.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])
    if train and drop > 0.0:
        out = T.dropout(out, drop, rng)
    return T.add(x, out)


def _ffn(p, prefix, x: Tensor, train: bool, drop: float, rng) -> Tensor:
    xn = T.layer_norm(x, p[f"{prefix}.ln_g"], p[f"{prefix}.ln_b"])
    h = T.gelu(T.add(T.matmul(xn, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    h = T.add(T.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])
    if train and drop > 0.0:
        h = T.dropout(h, drop, rng)
    return T.add(x, h)


def encode(bundle: ModelBundle, x_ids: np.ndarray, train: bool = False,
           rng: Optional[np.random.Generator] = None) -> Tensor:
    """Caption ids (B, L_x) -> memory (B, L_x, width)."""
    cfg = bundle.config
    x_ids = np.atleast_2d(np.asarray(x_ids))
    if x_ids.shape[1] > cfg.seq_len_text:
        raise T.ShapeError(f"caption length {x_ids.shape[1]} exceeds seq_len_text {cfg.seq_len_text}")
    if x_ids.size and (x_ids.min() < 0 or x_ids.max() >= cfg.vocab_text):
        raise T.ShapeError(f"caption id out of text vocab [0, {cfg.vocab_text})")
    p = bundle.params
    emb = T.embedding_lookup(p["enc.tok_emb"], x_ids)
    pos = T.embedding_lookup(p["enc.pos_emb"], np.arange(x_ids.shape[1]))
    h = T.add(emb, pos)
    if train and cfg.dropout > 0.0:
        h = T.dropout(h, cfg.dropout, rng)
    for i in range(cfg.enc_layers):
        h = _attention(p, f"enc.{i}.attn", h, h, cfg.heads, causal=False,
                       train=train, drop=cfg.dropout, rng=rng)
        h = _ffn(p, f"enc.{i}.ffn", h, train, cfg.dropout, rng)
    bundle.counters["encoder_passes"] += 1
    return T.layer_norm(h, p["enc.ln_f_g"], p["enc.ln_f_b"])


def _decoder_forward(bundle: ModelBundle, memory: Tensor, y_ids: np.ndarray,
                     causal: bool, train: bool, rng) -> Tensor:
    cfg = bundle.config
    p = bundle.params
    y_ids = np.atleast_2d(np.asarray(y_ids))
    if y_ids.size and (y_ids.min() < 0 or y_ids.max() > cfg.mask_id):
        raise T.ShapeError(f"target id out of range [0, {cfg.mask_id}]")
    emb = T.embedding_lookup(p["dec.tok_emb"], y_ids)
    pos = T.embedding_lookup(p["dec.pos_emb"], np.arange(y_ids.shape[1]))
    h = T.add(emb, pos)
    if train and cfg.dropout > 0.0:
        h = T.dropout(h, cfg.dropout, rng)
    for i in range(cfg.dec_layers):
        h = _attention(p, f"dec.{i}.attn", h, h, cfg.heads, causal=causal,
                       train=train, drop=cfg.dropout, rng=rng)
        h = _attention(p, f"dec.{i}.xattn", h, memory, cfg.heads, causal=False,
                       train=train, drop=cfg.dropout, rng=rng)
        h = _ffn(p, f"dec.{i}.ffn", h, train, cfg.dropout, rng)
    h = T.layer_norm(h, p["dec.ln_f_g"], p["dec.ln_f_b"])
    if cfg.tie_embeddings:
        # project against the embedding rows; drop the MASK row so it can
        # never be predicted
        full = T.matmul(h, T.transpose(p["dec.tok_emb"], (1, 0)))
        logits = T.add(T.narrow(full, 0, cfg.vocab_image), p["dec.head_b"])
    else:
        logits = T.add(T.matmul(h, p["dec.head_w"]), p["dec.head_b"])
    bundle.counters["decoder_passes"] += 1
    return logits


def decode_parallel(bundle: ModelBundle, memory: Tensor, y_obs: np.ndarray,
                    train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """One bidirectional pass: logits (B, n, V) for every position at once.

    y_obs entries are image tokens or the MASK id; no attention masking,
    no iteration-index input.
    """
    cfg = bundle.config
    y_obs = np.atleast_2d(np.asarray(y_obs))
    if y_obs.shape[1] != cfg.seq_len_target:
        raise T.ShapeError(
            f"y_obs length {y_obs.shape[1]} != target length {cfg.seq_len_target}")
    return _decoder_forward(bundle, memory, y_obs, causal=False, train=train, rng=rng)


def decode_causal_step(bundle: ModelBundle, memory: Tensor, prefix: np.ndarray) -> np.ndarray:
    """Next-token logits (V,) after ``prefix``; recomputes the prefix each call.

    The decoder input is BOS followed by the prefix; the MASK embedding row
    doubles as BOS so the table stays at V+1 rows and parameter counts match
    the parallel regimes exactly.
    """
    cfg = bundle.config
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    if prefix.shape[0] >= cfg.seq_len_target:
        raise T.ShapeError(f"prefix of length {prefix.shape[0]} is already full (n={cfg.seq_len_target})")
    inp = np.concatenate([[cfg.mask_id], prefix])[None, :]
    logits = _decoder_forward(bundle, memory, inp, causal=True, train=False, rng=None)
    return logits.data[0, -1]


def decode_causal_teacher_forced(bundle: ModelBundle, memory: Tensor, y: np.ndarray,
                                 train: bool = False, rng=None) -> Tensor:
    """Teacher-forced causal pass: logits (B, n, V) for all positions."""
    cfg = bundle.config
    y = np.atleast_2d(np.asarray(y))
    inp = np.concatenate([np.full((y.shape[0], 1), cfg.mask_id, dtype=y.dtype), y[:, :-1]], axis=1)
    return _decoder_forward(bundle, memory, inp, causal=True, train=train, rng=rng)
