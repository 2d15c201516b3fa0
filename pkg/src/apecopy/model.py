"""The full APE network.

Composition: a Predictor stack scores each mt token for copying; an
interactive encoder runs self-attention over the concatenated [src; mt]
input (or two separate encoders in baseline mode); a causal decoder
cross-attends the memory; and a CopyNet head interpolates a copy
distribution over mt positions with the vocabulary softmax.  The copy
scores scale the attention energies of the mt keys inside the encoder,
the decoder cross-attention and the CopyNet attention, each behind its
own config switch.

Predictor and encoder keep separate stack weights but read the same
embedding tables; the output projection is the transposed token table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import nn, tensor as T
from .config import ModelConfig
from .data import BOS, PAD, Batch
from .errors import ConfigError, ContractError
from .nn import EmbeddingSet
from .tensor import Tensor

LANG_SRC, LANG_MT = 0, 1


@dataclass
class EncodedInput:
    """Decoder-facing view of the encoder output."""

    memories: list  # (memory, key_mask, scale) triples for cross-attention
    h_mt: Tensor  # [B, K, d] mt representation feeding CopyNet
    mt_mask: np.ndarray
    src_len: int  # padded src width (mt columns of an interactive memory start here)


@dataclass
class ForwardTrace:
    """Everything a teacher-forced pass produces, for losses and export."""

    s: Optional[Tensor]  # [B, K] copy scores (pre-detach)
    h_pred: Optional[Tensor]
    enc: EncodedInput
    h_pe: Tensor  # [B, T, d]
    p_gen: Tensor  # [B, T, V]
    p_copy: Optional[Tensor]  # [B, T, K]
    gamma: Optional[Tensor]  # [B, T, 1]
    p_final: Tensor  # [B, T, V]
    copy_mass: Optional[Tensor]  # [B, K]
    cross_attention: Optional[list]  # per decoder layer, [B, h, T, L_mem]


class ApeModel:
    """Owns the parameter set; forward methods are pure given the params."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        if config.vocab_size < 5:
            raise ConfigError(f"vocab_size {config.vocab_size} too small (4 ids are reserved)")
        self.config = config
        self.params: dict = {}
        self._dtype = np.float32 if config.dtype == "float32" else np.float64
        rng = np.random.default_rng([seed, 0x5EED])
        d = config.d

        emb_std = 1.0 / math.sqrt(d)
        self.embeddings = EmbeddingSet(
            self._param(rng, "emb.token", (config.vocab_size, d), emb_std),
            self._param(rng, "emb.pos", (config.max_len, d), emb_std),
            self._param(rng, "emb.lang", (2, d), emb_std),
        )
        if config.predictor:
            self.predictor_layers = [
                self._encoder_layer(rng, f"predictor.{i}") for i in range(config.n_pred)
            ]
            self.predictor_ln = self._ln(rng, "predictor.ln")
            self.w_s = self._param(rng, "predictor.w_s", (d, 1), glorot=True)
        if config.interactive:
            self.encoder_layers = [
                self._encoder_layer(rng, f"encoder.{i}") for i in range(config.n_enc)
            ]
            self.encoder_ln = self._ln(rng, "encoder.ln")
        else:
            self.src_encoder_layers = [
                self._encoder_layer(rng, f"encoder_src.{i}") for i in range(config.n_enc)
            ]
            self.src_encoder_ln = self._ln(rng, "encoder_src.ln")
            self.mt_encoder_layers = [
                self._encoder_layer(rng, f"encoder_mt.{i}") for i in range(config.n_enc)
            ]
            self.mt_encoder_ln = self._ln(rng, "encoder_mt.ln")
        cross = 1 if config.interactive else 2
        self.decoder_layers = [
            self._decoder_layer(rng, f"decoder.{i}", cross) for i in range(config.n_dec)
        ]
        self.decoder_ln = self._ln(rng, "decoder.ln")
        if config.copynet:
            self.copy_wq = self._param(rng, "copynet.wq", (d, d), glorot=True)
            self.copy_wk = self._param(rng, "copynet.wk", (d, d), glorot=True)
            self.copy_wu = self._param(rng, "copynet.wu", (2 * d, 1), glorot=True)
            self.copy_bu = self._param(rng, "copynet.bu", (1,), 0.0)

    # -- parameter construction -----------------------------------------
    def _param(self, rng, name, shape, std=0.0, glorot=False) -> Tensor:
        if glorot:
            std = math.sqrt(2.0 / (shape[0] + shape[-1]))
        values = rng.normal(scale=std, size=shape) if std > 0 else np.zeros(shape)
        t = T.tensor(values.astype(self._dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _const_param(self, name, value: np.ndarray) -> Tensor:
        t = T.tensor(value.astype(self._dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _ln(self, rng, name) -> nn.LayerNormParams:
        d = self.config.d
        return nn.LayerNormParams(
            self._const_param(f"{name}.gain", np.ones(d)),
            self._const_param(f"{name}.bias", np.zeros(d)),
        )

    def _mha(self, rng, name) -> nn.MhaParams:
        d = self.config.d
        return nn.MhaParams(
            *(self._param(rng, f"{name}.{w}", (d, d), glorot=True) for w in ("wq", "wk", "wv", "wo"))
        )

    def _ffn(self, rng, name) -> nn.FeedForwardParams:
        d, f = self.config.d, self.config.ffn
        return nn.FeedForwardParams(
            self._param(rng, f"{name}.w1", (d, f), glorot=True),
            self._const_param(f"{name}.b1", np.zeros(f)),
            self._param(rng, f"{name}.w2", (f, d), glorot=True),
            self._const_param(f"{name}.b2", np.zeros(d)),
        )

    def _encoder_layer(self, rng, name) -> nn.EncoderLayerParams:
        return nn.EncoderLayerParams(
            self._ln(rng, f"{name}.ln_attn"),
            self._mha(rng, f"{name}.attn"),
            self._ln(rng, f"{name}.ln_ffn"),
            self._ffn(rng, f"{name}.ffn"),
        )

    def _decoder_layer(self, rng, name, cross: int) -> nn.DecoderLayerParams:
        return nn.DecoderLayerParams(
            self._ln(rng, f"{name}.ln_self"),
            self._mha(rng, f"{name}.self"),
            [self._ln(rng, f"{name}.ln_cross{i}") for i in range(cross)],
            [self._mha(rng, f"{name}.cross{i}") for i in range(cross)],
            self._ln(rng, f"{name}.ln_ffn"),
            self._ffn(rng, f"{name}.ffn"),
        )

    def parameter_items(self):
        return list(self.params.items())

    def with_config(self, **changes) -> "ApeModel":
        """A view of the same parameters under modified ablation switches.

        Only switches that do not change the parameter set may differ
        (a predictor/copynet stack must exist to be switched on).
        """
        new_config = replace(self.config, **changes).validate()
        if new_config.predictor and not self.config.predictor:
            raise ConfigError("cannot enable the predictor on a model built without one")
        if new_config.copynet and not self.config.copynet:
            raise ConfigError("cannot enable copynet on a model built without one")
        if new_config.interactive != self.config.interactive:
            raise ConfigError("interactive switch changes the parameter set; build a new model")
        view = object.__new__(ApeModel)
        view.__dict__.update(self.__dict__)
        view.config = new_config
        return view

    # -- forward pieces ---------------------------------------------------
    def _embed_pair(self, src_ids, mt_ids):
        x = nn.embed_sequence(src_ids, LANG_SRC, self.embeddings, max_len=self.config.max_len)
        y = nn.embed_sequence(mt_ids, LANG_MT, self.embeddings, max_len=self.config.max_len)
        return T.concat([x, y], axis=1)

    @staticmethod
    def _check_nonempty(src_ids, mt_ids, src_mask, mt_mask):
        if src_ids.shape[1] == 0 or mt_ids.shape[1] == 0:
            raise ContractError("src and mt must be non-empty")
        if src_mask is not None and not src_mask.any(axis=1).all():
            raise ContractError("a row has an empty src")
        if mt_mask is not None and not mt_mask.any(axis=1).all():
            raise ContractError("a row has an empty mt")

    def predictor_forward(
        self, src_ids, mt_ids, src_mask=None, mt_mask=None, *, rng=None
    ):
        """Copy scores for every mt token: s = sigmoid(H_mt W_s), s in (0,1)^K.

        Returns (s, h_pred); the predictor stack shares no weights with the
        encoder, only the embedding tables.
        """
        if not self.config.predictor:
            raise ConfigError("predictor_forward on a model with the predictor disabled")
        src_ids, mt_ids = np.atleast_2d(src_ids), np.atleast_2d(mt_ids)
        self._check_nonempty(src_ids, mt_ids, src_mask, mt_mask)
        h = self._embed_pair(src_ids, mt_ids)
        key_mask = _concat_masks(src_ids, mt_ids, src_mask, mt_mask)
        for layer in self.predictor_layers:
            h = nn.encoder_layer(
                h, layer, self.config.heads, key_mask=key_mask,
                drop_rate=self.config.dropout, rng=rng,
            )
        h = T.layer_norm(h, self.predictor_ln.gain, self.predictor_ln.bias)
        i = src_ids.shape[1]
        mt_rows = T.slice_axis(h, 1, i, i + mt_ids.shape[1])
        s = T.sigmoid(T.reshape(T.matmul(mt_rows, self.w_s), mt_rows.shape[:2]))
        return s, h

    def encode(self, src_ids, mt_ids, s=None, src_mask=None, mt_mask=None, *, rng=None) -> EncodedInput:
        """Encode src/mt into the decoder memory, scaling mt keys by ``s``."""
        cfg = self.config
        if s is not None and not cfg.predictor:
            raise ConfigError("copy scores were passed but the predictor is disabled")
        src_ids, mt_ids = np.atleast_2d(src_ids), np.atleast_2d(mt_ids)
        self._check_nonempty(src_ids, mt_ids, src_mask, mt_mask)
        b, i = src_ids.shape
        k = mt_ids.shape[1]
        if src_mask is None:
            src_mask = np.ones((b, i), dtype=bool)
        if mt_mask is None:
            mt_mask = np.ones((b, k), dtype=bool)

        if cfg.interactive:
            full_scale = None
            if s is not None:
                ones = T.tensor(np.ones((b, i), dtype=s.dtype))
                full_scale = T.concat([ones, s], axis=1)
            h = self._embed_pair(src_ids, mt_ids)
            key_mask = np.concatenate([src_mask, mt_mask], axis=1)
            enc_scale = full_scale if cfg.mask_encoder else None
            for layer in self.encoder_layers:
                h = nn.encoder_layer(
                    h, layer, cfg.heads, key_mask=key_mask, scale=enc_scale,
                    drop_rate=cfg.dropout, rng=rng,
                )
            h = T.layer_norm(h, self.encoder_ln.gain, self.encoder_ln.bias)
            dec_scale = full_scale if cfg.mask_decoder else None
            return EncodedInput(
                memories=[(h, key_mask, dec_scale)],
                h_mt=T.slice_axis(h, 1, i, i + k),
                mt_mask=mt_mask,
                src_len=i,
            )

        h_src = nn.embed_sequence(src_ids, LANG_SRC, self.embeddings, max_len=cfg.max_len)
        for layer in self.src_encoder_layers:
            h_src = nn.encoder_layer(
                h_src, layer, cfg.heads, key_mask=src_mask, drop_rate=cfg.dropout, rng=rng
            )
        h_src = T.layer_norm(h_src, self.src_encoder_ln.gain, self.src_encoder_ln.bias)

        mt_scale = s if (s is not None and cfg.mask_encoder) else None
        h_mt = nn.embed_sequence(mt_ids, LANG_MT, self.embeddings, max_len=cfg.max_len)
        for layer in self.mt_encoder_layers:
            h_mt = nn.encoder_layer(
                h_mt, layer, cfg.heads, key_mask=mt_mask, scale=mt_scale,
                drop_rate=cfg.dropout, rng=rng,
            )
        h_mt = T.layer_norm(h_mt, self.mt_encoder_ln.gain, self.mt_encoder_ln.bias)

        dec_scale = s if (s is not None and cfg.mask_decoder) else None
        memories = [(h_src, src_mask, None), (h_mt, mt_mask, dec_scale)]
        if not cfg.baseline_src_first:
            memories.reverse()
        return EncodedInput(memories=memories, h_mt=h_mt, mt_mask=mt_mask, src_len=i)

    def decode_hidden(self, dec_in_ids, enc: EncodedInput, *, rng=None, collect=None) -> Tensor:
        """Decoder stack over the (BOS-prefixed) pe prefix; causal self-attention."""
        if not enc.memories:
            raise ContractError("decoding needs a non-empty memory")
        dec_in_ids = np.atleast_2d(dec_in_ids)
        cfg = self.config
        self_mask = dec_in_ids != PAD
        self_mask[:, 0] = True  # BOS
        y = nn.embed_sequence(dec_in_ids, None, self.embeddings, max_len=cfg.max_len)
        for layer in self.decoder_layers:
            y = nn.decoder_layer(
                y, layer, cfg.heads, enc.memories, self_key_mask=self_mask,
                drop_rate=cfg.dropout, rng=rng, collect=collect,
            )
        return T.layer_norm(y, self.decoder_ln.gain, self.decoder_ln.bias)

    def output_distributions(self, h_pe: Tensor, enc: EncodedInput, s: Optional[Tensor], mt_ids):
        """Per-step distributions: generation softmax, copy attention, gate.

        The copy distribution lives on mt positions; its token-level image
        (summing positions that share a surface token) is interpolated with
        the generation distribution through the gate.
        """
        cfg = self.config
        gen_logits = T.matmul(h_pe, T.transpose(self.embeddings.token, (1, 0)))
        p_gen = T.softmax(gen_logits, axis=-1)
        if not cfg.copynet:
            return p_gen, None, None, p_gen
        copy_scale = s if (s is not None and cfg.mask_copynet) else None
        ctx, p_copy = nn.scaled_dot_attention(
            T.matmul(h_pe, self.copy_wq),
            T.matmul(enc.h_mt, self.copy_wk),
            enc.h_mt,
            key_mask=enc.mt_mask,
            scale=copy_scale,
            return_weights=True,
        )
        gamma = T.sigmoid(
            T.matmul(T.concat([h_pe, ctx], axis=-1), self.copy_wu) + self.copy_bu
        )
        p_copy_tok = T.scatter_last(p_copy, np.atleast_2d(mt_ids), cfg.vocab_size)
        p_final = (1.0 - gamma) * p_gen + gamma * p_copy_tok
        return p_gen, p_copy, gamma, p_final

    # -- whole passes -----------------------------------------------------
    def forward_teacher_forced(
        self, batch: Batch, *, s_override=None, rng=None, collect_attention=False
    ) -> ForwardTrace:
        """Run predictor, encoder and all decode steps on the gold prefix."""
        cfg = self.config
        s = h_pred = None
        if cfg.predictor:
            s, h_pred = self.predictor_forward(
                batch.src_ids, batch.mt_ids, batch.src_mask, batch.mt_mask, rng=rng
            )
        if s_override is not None:
            s = T.tensor(np.asarray(s_override, dtype=self._dtype))
        s_used = None
        if s is not None:
            s_used = s if cfg.joint_training else s.detach()
        enc = self.encode(
            batch.src_ids, batch.mt_ids, s_used, batch.src_mask, batch.mt_mask, rng=rng
        )
        collect = [] if collect_attention else None
        h_pe = self.decode_hidden(batch.dec_in, enc, rng=rng, collect=collect)
        p_gen, p_copy, gamma, p_final = self.output_distributions(
            h_pe, enc, s_used, batch.mt_ids
        )
        copy_mass = None
        if cfg.copynet:
            copy_mass = copy_mass_from_steps(gamma, p_copy, batch.word_target_mask)
        return ForwardTrace(
            s=s, h_pred=h_pred, enc=enc, h_pe=h_pe, p_gen=p_gen, p_copy=p_copy,
            gamma=gamma, p_final=p_final, copy_mass=copy_mass, cross_attention=collect,
        )

    def decode_step(self, prefix_ids, enc: EncodedInput, s: Optional[Tensor], mt_ids):
        """Distribution over the next token given a BOS-prefixed prefix.

        Returns (h_last, p_last) with shapes [B, d] and [B, V].
        """
        prefix_ids = np.atleast_2d(prefix_ids)
        if (prefix_ids[:, 0] != BOS).any():
            raise ContractError("decode prefix must begin with BOS")
        h_pe = self.decode_hidden(prefix_ids, enc)
        t = prefix_ids.shape[1]
        _, _, _, p_final = self.output_distributions(h_pe, enc, s, mt_ids)
        h_last = T.slice_axis(h_pe, 1, t - 1, t)
        p_last = T.slice_axis(p_final, 1, t - 1, t)
        return (
            T.reshape(h_last, (h_pe.shape[0], h_pe.shape[2])),
            T.reshape(p_last, (p_final.shape[0], p_final.shape[2])),
        )


def _concat_masks(src_ids, mt_ids, src_mask, mt_mask):
    if src_mask is None and mt_mask is None:
        return None
    b, i = src_ids.shape
    k = mt_ids.shape[1]
    if src_mask is None:
        src_mask = np.ones((b, i), dtype=bool)
    if mt_mask is None:
        mt_mask = np.ones((b, k), dtype=bool)
    return np.concatenate([src_mask, mt_mask], axis=1)


def copy_mass_from_steps(gamma, p_copy, step_mask) -> Tensor:
    """Accumulated copy probability per mt position: c_k = sum_j gamma_j P_j(k).

    ``step_mask`` selects the decode steps that predict real pe words.
    """
    steps = T.tensor(np.asarray(step_mask)[:, :, None].astype(gamma.dtype))
    return T.tsum(gamma * p_copy * steps, axis=1)
