"""Transformer building blocks with a copy-score scaling hook on attention.

Attention energies are always shifted down by the per-row minimum over the
unmasked keys before the softmax.  The shift is a no-op for the plain
softmax (shift invariance) but makes the energies non-negative, so an
optional per-key scale vector in [0, 1] can only suppress keys.  Running
with a scale vector of all ones is bitwise identical to running without
one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass
class EmbeddingSet:
    """Token/position/language tables; language row 0 is src, row 1 is mt."""

    token: Tensor
    pos: Tensor
    lang: Tensor


@dataclass
class MhaParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class EncoderLayerParams:
    ln_attn: LayerNormParams
    attn: MhaParams
    ln_ffn: LayerNormParams
    ffn: FeedForwardParams


@dataclass
class DecoderLayerParams:
    ln_self: LayerNormParams
    self_attn: MhaParams
    ln_cross: list  # one LayerNormParams per memory
    cross_attn: list  # one MhaParams per memory
    ln_ffn: LayerNormParams
    ffn: FeedForwardParams


def _ln(x: Tensor, p: LayerNormParams) -> Tensor:
    return T.layer_norm(x, p.gain, p.bias)


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    *,
    key_mask: Optional[np.ndarray] = None,
    causal: bool = False,
    scale: Optional[Tensor] = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention with optional key-scaling vector.

    ``q``/``k``/``v`` are ``[..., L, dh]`` with matching leading axes.
    ``key_mask`` is a boolean array broadcastable to ``k.shape[:-1]``
    (True = attend).  ``scale`` is a tensor broadcastable the same way;
    entries multiply the min-shifted energies of their keys, so 1 leaves a
    key untouched and 0 floors it to the row minimum.
    """
    dh = q.shape[-1]
    if k.shape[-1] != dh or v.shape[-2] != k.shape[-2]:
        raise T.ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    energy = T.matmul(q, T.transpose(k, _swap_last(k.ndim))) * (1.0 / math.sqrt(dh))
    lq, lk = energy.shape[-2], energy.shape[-1]

    valid = None
    if key_mask is not None:
        valid = np.asarray(key_mask, dtype=bool)[..., None, :]
    if causal:
        tri = np.tril(np.ones((lq, lk), dtype=bool))
        valid = tri if valid is None else valid & tri

    if valid is None:
        shifted = energy - T.tmin(energy, axis=-1, keepdims=True)
    else:
        if not np.broadcast_to(valid, energy.shape).any(axis=-1).all():
            raise ContractError("attention row with no unmasked key")
        # +big on masked keys keeps them out of the row minimum
        off = np.where(valid, 0.0, 1e9).astype(energy.dtype)
        shifted = energy - T.tmin(energy + Tensor(off), axis=-1, keepdims=True)

    if scale is not None:
        if scale.shape[-1] != lk:
            raise T.ShapeError(f"scale vector covers {scale.shape[-1]} keys, expected {lk}")
        shifted = shifted * T.reshape(scale, scale.shape[:-1] + (1, lk))

    if valid is not None:
        shifted = shifted + Tensor(np.where(valid, 0.0, -1e30).astype(energy.dtype))

    weights = T.softmax(shifted, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _swap_last(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, l, d = x.shape
    return T.transpose(T.reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    params: MhaParams,
    heads: int,
    *,
    key_mask: Optional[np.ndarray] = None,
    causal: bool = False,
    scale: Optional[Tensor] = None,
    collect: Optional[list] = None,
) -> Tensor:
    """Multi-head attention over ``[B, L, d]`` inputs.

    The scale vector (``[B, L_k]``) is shared by every head.  When
    ``collect`` is a list, the post-softmax weights ``[B, h, L_q, L_k]``
    are appended to it as plain arrays (heatmap export).
    """
    d = x_q.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    b, lk = x_kv.shape[0], x_kv.shape[1]
    q = split_heads(T.matmul(x_q, params.wq), heads)
    k = split_heads(T.matmul(x_kv, params.wk), heads)
    v = split_heads(T.matmul(x_kv, params.wv), heads)
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool).reshape(b, 1, lk)
    svec = None if scale is None else T.reshape(scale, (b, 1, lk))
    out, weights = scaled_dot_attention(
        q, k, v, key_mask=mask, causal=causal, scale=svec, return_weights=True
    )
    if collect is not None:
        collect.append(weights.data)
    return T.matmul(merge_heads(out), params.wo)


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    return T.matmul(T.relu(T.matmul(x, p.w1) + p.b1), p.w2) + p.b2


def embed_sequence(
    tokens: np.ndarray,
    lang_id: Optional[int],
    emb: EmbeddingSet,
    *,
    max_len: Optional[int] = None,
) -> Tensor:
    """Token + position (+ language) embedding of ``[B, L]`` token ids.

    Positions count from 0 within the sequence, so the mt segment of a
    concatenated input restarts at position 0.  ``lang_id`` None skips the
    language term (decoder input).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    l = tokens.shape[1]
    limit = emb.pos.shape[0] if max_len is None else min(max_len, emb.pos.shape[0])
    if l > limit:
        raise ContractError(f"sequence length {l} exceeds maximum {limit}")
    x = T.embedding_lookup(emb.token, tokens)
    x = x + T.embedding_lookup(emb.pos, np.arange(l))
    if lang_id is not None:
        x = x + T.embedding_lookup(emb.lang, np.array([lang_id]))
    return x


def encoder_layer(
    x: Tensor,
    p: EncoderLayerParams,
    heads: int,
    *,
    key_mask: Optional[np.ndarray] = None,
    scale: Optional[Tensor] = None,
    drop_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Pre-norm self-attention + feed-forward residual block."""
    h = _ln(x, p.ln_attn)
    x = x + T.dropout(
        multi_head_attention(h, h, p.attn, heads, key_mask=key_mask, scale=scale),
        drop_rate,
        rng,
    )
    x = x + T.dropout(feed_forward(_ln(x, p.ln_ffn), p.ffn), drop_rate, rng)
    return x


def decoder_layer(
    y: Tensor,
    p: DecoderLayerParams,
    heads: int,
    memories: list,
    *,
    self_key_mask: Optional[np.ndarray] = None,
    drop_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    collect: Optional[list] = None,
) -> Tensor:
    """Causal self-attention, one cross-attention per memory, feed-forward.

    ``memories`` holds ``(memory, key_mask, scale)`` triples; the baseline
    multi-source decoder passes two (src then mt), the interactive decoder
    one.
    """
    h = _ln(y, p.ln_self)
    y = y + T.dropout(
        multi_head_attention(h, h, p.self_attn, heads, key_mask=self_key_mask, causal=True),
        drop_rate,
        rng,
    )
    for (mem, mem_mask, scale), ln, mha in zip(memories, p.ln_cross, p.cross_attn):
        y = y + T.dropout(
            multi_head_attention(
                _ln(y, ln), mem, mha, heads, key_mask=mem_mask, scale=scale, collect=collect
            ),
            drop_rate,
            rng,
        )
    y = y + T.dropout(feed_forward(_ln(y, p.ln_ffn), p.ffn), drop_rate, rng)
    return y
