"""Encoder-decoder transformer over the unified vocabulary.

Pre-norm residual blocks, learned absolute positions, GELU feed-forward layers
and an output head tied to the token embedding. The encoder consumes a mixed
sequence of text tokens and image patches; the decoder is causal and attends
to the encoder states.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, LengthError, TokenRangeError
from .numerics import (
    Tensor, concat, dropout, gelu, layer_norm, masked_fill, matmul, reshape, softmax,
    swapaxes, take, transpose,
)
from .tokenization import BOS, PAD, UnifiedVocabulary
from .vision import embed_patches, embedder_shapes

INIT_STD = 0.02
# floor for the patch-feature norm; keeps it smooth while embedder output is still tiny
PATCH_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int = 2
    decoder_layers: int = 2
    d_model: int = 64
    heads: int = 4
    d_ffn: int = 256
    max_src: int = 512
    max_tgt: int = 64
    dropout: float = 0.0
    num_text: int = 300
    num_locations: int = 16
    num_vision: int = 32
    patch_size: int = 8
    channels: int = 1
    embed_hidden: int = 8

    @property
    def vocab_size(self) -> int:
        return self.num_text + self.num_locations + self.num_vision

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def validate(self) -> "ModelConfig":
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "dropout":
                if not 0.0 <= value < 1.0:
                    raise ConfigError("dropout must lie in [0, 1)")
            elif f.name.endswith("_layers"):
                if value < 0:
                    raise ConfigError(f"{f.name} must be non-negative")
            elif value < 1:
                raise ConfigError(f"{f.name} must be positive")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        return self

    def with_vocab(self, vocab: UnifiedVocabulary) -> "ModelConfig":
        return replace(self, num_text=vocab.num_text, num_locations=vocab.num_locations,
                       num_vision=vocab.num_vision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data).validate()


# Size ladder of scaled-down configs: deeper and wider at each step.
PRESETS = {
    "tiny": ModelConfig(encoder_layers=2, decoder_layers=2, d_model=64, heads=4, d_ffn=256),
    "small": ModelConfig(encoder_layers=3, decoder_layers=3, d_model=96, heads=4, d_ffn=384),
    "base": ModelConfig(encoder_layers=4, decoder_layers=4, d_model=128, heads=8, d_ffn=512),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides).validate()


class Parameters(dict):
    """Named parameter tensors plus the config they were built for."""

    def __init__(self, config: ModelConfig, tensors=()):
        super().__init__(tensors)
        self.config = config


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple]:
    out = {}
    for proj in ("q", "k", "v", "o"):
        out[f"{prefix}.{proj}.w"] = (d, d)
        out[f"{prefix}.{proj}.b"] = (d,)
    return out


def _ffn_shapes(prefix: str, d: int, f: int) -> dict[str, tuple]:
    return {f"{prefix}.fc1.w": (d, f), f"{prefix}.fc1.b": (f,),
            f"{prefix}.fc2.w": (f, d), f"{prefix}.fc2.b": (d,)}


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple]:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every named tensor and its shape, in initialisation order."""
    c = config.validate()
    d = c.d_model
    shapes: dict[str, tuple] = {
        "embed.tokens": (c.vocab_size, d),
        "embed.src_pos": (c.max_src, d),
        "embed.tgt_pos": (c.max_tgt, d),
        "embed.mask_patch": (d,),
    }
    shapes.update(embedder_shapes(c.patch_size, c.channels, c.embed_hidden, d))
    for i in range(c.encoder_layers):
        p = f"enc.{i}"
        shapes.update(_ln_shapes(f"{p}.ln1", d))
        shapes.update(_attn_shapes(f"{p}.attn", d))
        shapes.update(_ln_shapes(f"{p}.ln2", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, c.d_ffn))
    if c.encoder_layers:
        shapes.update(_ln_shapes("enc.ln", d))
    for i in range(c.decoder_layers):
        p = f"dec.{i}"
        shapes.update(_ln_shapes(f"{p}.ln1", d))
        shapes.update(_attn_shapes(f"{p}.self", d))
        shapes.update(_ln_shapes(f"{p}.ln2", d))
        shapes.update(_attn_shapes(f"{p}.cross", d))
        shapes.update(_ln_shapes(f"{p}.ln3", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, c.d_ffn))
    if c.decoder_layers:
        shapes.update(_ln_shapes("dec.ln", d))
    return shapes


def init_params(config: ModelConfig, seed: int) -> Parameters:
    """Gaussian(0, 0.02) weights, zero biases/shifts, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = Parameters(config)
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "b":
            arr = np.zeros(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count (the output head shares the token embedding)."""
    c = config.validate()
    d, f, h = c.d_model, c.d_ffn, c.embed_hidden
    embeddings = c.vocab_size * d + c.max_src * d + c.max_tgt * d + d
    embedder = 9 * c.channels * h + h + 9 * h * h + h + c.patch_size ** 2 * h * d + d
    attention = 4 * (d * d + d)
    ffn = 2 * d * f + f + d
    norm = 2 * d
    enc = c.encoder_layers * (2 * norm + attention + ffn) + (norm if c.encoder_layers else 0)
    dec = c.decoder_layers * (3 * norm + 2 * attention + ffn) + (norm if c.decoder_layers else 0)
    return embeddings + embedder + enc + dec


# ----------------------------------------------------------------------------
# source items
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SourceItem:
    """One encoder input position: a text token, a raw patch vector, or a masked patch."""

    kind: str
    token: int = -1
    patch: np.ndarray | None = None
    raster: int = -1

    @classmethod
    def text(cls, token: int) -> "SourceItem":
        return cls("text", token=int(token))

    @classmethod
    def image_patch(cls, vector: np.ndarray, raster: int) -> "SourceItem":
        return cls("patch", patch=np.asarray(vector, dtype=np.float64), raster=int(raster))

    @classmethod
    def masked_patch(cls, raster: int) -> "SourceItem":
        return cls("mask", raster=int(raster))


# ----------------------------------------------------------------------------
# forward pass
# ----------------------------------------------------------------------------

def _linear(x: Tensor, params: Parameters, prefix: str) -> Tensor:
    return matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return transpose(reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def attention(params: Parameters, prefix: str, xq: Tensor, xkv: Tensor, blocked: np.ndarray,
              rng: np.random.Generator | None = None) -> Tensor:
    """Multi-head attention; ``blocked`` broadcasts to (B, heads, Sq, Sk), True = masked."""
    cfg = params.config
    q = _split_heads(_linear(xq, params, f"{prefix}.q"), cfg.heads)
    k = _split_heads(_linear(xkv, params, f"{prefix}.k"), cfg.heads)
    v = _split_heads(_linear(xkv, params, f"{prefix}.v"), cfg.heads)
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(cfg.d_model // cfg.heads))
    weights = softmax(masked_fill(scores, blocked), axis=-1)
    weights = dropout(weights, cfg.dropout, rng)
    out = matmul(weights, v)
    b, _, s, _ = out.shape
    merged = reshape(transpose(out, (0, 2, 1, 3)), (b, s, cfg.d_model))
    return _linear(merged, params, f"{prefix}.o")


def _ln(x: Tensor, params: Parameters, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _ffn(x: Tensor, params: Parameters, prefix: str) -> Tensor:
    return _linear(gelu(_linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def embed_sources(params: Parameters, batch: Sequence[Sequence[SourceItem]]) -> tuple[Tensor, np.ndarray]:
    """Embedded, position-augmented source batch (B, S, d) and its padding mask (B, S)."""
    cfg = params.config
    lengths = [len(items) for items in batch]
    if not batch or min(lengths) < 1:
        raise LengthError("every source sequence needs at least one item")
    longest = max(lengths)
    if longest > cfg.max_src:
        raise LengthError(f"source length {longest} exceeds max_src={cfg.max_src}")
    text_ids, patch_vecs = [], []
    for items in batch:
        for it in items:
            if it.kind == "text":
                if not 0 <= it.token < cfg.vocab_size:
                    raise TokenRangeError(f"token id {it.token} outside vocabulary of {cfg.vocab_size}")
                text_ids.append(it.token)
            elif it.kind == "patch":
                patch_vecs.append(it.patch)
            elif it.kind != "mask":
                raise ContractError(f"unknown source item kind {it.kind!r}")
    pieces = []
    if text_ids:
        pieces.append(take(params["embed.tokens"], np.array(text_ids), axis=0))
    if patch_vecs:
        # parameter-free norm: raw embedder output starts far smaller than token rows
        feats = embed_patches(np.stack(patch_vecs), params, cfg.patch_size, cfg.channels)
        pieces.append(layer_norm(feats, eps=PATCH_NORM_EPS))
    mask_row = len(text_ids) + len(patch_vecs)
    pieces.append(reshape(params["embed.mask_patch"], (1, cfg.d_model)))
    pad_row = mask_row + 1
    pieces.append(Tensor(np.zeros((1, cfg.d_model))))
    table = concat(pieces, axis=0)

    index = np.full((len(batch), longest), pad_row, dtype=np.int64)
    t_next, p_next = 0, len(text_ids)
    for b, items in enumerate(batch):
        for s, it in enumerate(items):
            if it.kind == "text":
                index[b, s] = t_next
                t_next += 1
            elif it.kind == "patch":
                index[b, s] = p_next
                p_next += 1
            else:
                index[b, s] = mask_row
    padding = np.arange(longest)[None, :] >= np.array(lengths)[:, None]
    x = take(table, index, axis=0)
    x = x + take(params["embed.src_pos"], np.arange(longest), axis=0)
    return x, padding


def encode_batch(params: Parameters, batch: Sequence[Sequence[SourceItem]],
                 rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
    cfg = params.config
    x, padding = embed_sources(params, batch)
    x = dropout(x, cfg.dropout, rng)
    blocked = padding[:, None, None, :]
    for i in range(cfg.encoder_layers):
        p = f"enc.{i}"
        h = _ln(x, params, f"{p}.ln1")
        x = x + dropout(attention(params, f"{p}.attn", h, h, blocked, rng), cfg.dropout, rng)
        x = x + dropout(_ffn(_ln(x, params, f"{p}.ln2"), params, f"{p}.ffn"), cfg.dropout, rng)
    if cfg.encoder_layers:
        x = _ln(x, params, "enc.ln")
    return x, padding


def decode_batch(params: Parameters, states: Tensor, src_padding: np.ndarray,
                 prefixes: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
    """Logits (B, T, vocab) for right-padded prefix ids (B, T)."""
    cfg = params.config
    prefixes = np.asarray(prefixes, dtype=np.int64)
    b, t = prefixes.shape
    if t > cfg.max_tgt:
        raise LengthError(f"target prefix length {t} exceeds max_tgt={cfg.max_tgt}")
    if t < 1 or (prefixes[:, 0] != BOS).any():
        raise ContractError("target prefixes must start with BOS")
    if prefixes.min() < 0 or prefixes.max() >= cfg.vocab_size:
        raise TokenRangeError("target prefix id outside vocabulary")
    tok = params["embed.tokens"]
    y = take(tok, prefixes, axis=0) + take(params["embed.tgt_pos"], np.arange(t), axis=0)
    y = dropout(y, cfg.dropout, rng)
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)[None, None]
    cross = src_padding[:, None, None, :]
    for i in range(cfg.decoder_layers):
        p = f"dec.{i}"
        h = _ln(y, params, f"{p}.ln1")
        y = y + dropout(attention(params, f"{p}.self", h, h, causal, rng), cfg.dropout, rng)
        h = _ln(y, params, f"{p}.ln2")
        y = y + dropout(attention(params, f"{p}.cross", h, states, cross, rng), cfg.dropout, rng)
        y = y + dropout(_ffn(_ln(y, params, f"{p}.ln3"), params, f"{p}.ffn"), cfg.dropout, rng)
    if cfg.decoder_layers:
        y = _ln(y, params, "dec.ln")
    return matmul(y, transpose(tok, (1, 0)))


def encode_source(params: Parameters, items: Sequence[SourceItem]) -> Tensor:
    """Encoder states, shape (len(items), d_model)."""
    states, _ = encode_batch(params, [list(items)])
    return reshape(states, (len(items), params.config.d_model))


def decode_logits(params: Parameters, states: Tensor, prefix: Sequence[int]) -> Tensor:
    """Logits, shape (len(prefix), vocab); row t depends only on prefix[:t+1]."""
    n, d = states.shape
    batched = reshape(states, (1, n, d))
    logits = decode_batch(params, batched, np.zeros((1, n), dtype=bool), np.array([list(prefix)]))
    return reshape(logits, (len(prefix), params.config.vocab_size))


def pad_targets(targets: Sequence[Sequence[int]]) -> np.ndarray:
    longest = max(len(t) for t in targets)
    out = np.full((len(targets), longest), PAD, dtype=np.int64)
    for i, t in enumerate(targets):
        out[i, :len(t)] = t
    return out
