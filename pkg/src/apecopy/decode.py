"""Beam-search inference over the interpolated copy/generate distribution.

Hypotheses accumulate token log-probabilities; finished hypotheses (EOS
emitted) are scored as logprob / length_penalty(len) with len counting the
generated tokens including EOS.  Ties break toward the lower token id and
then the earlier hypothesis, so decoding is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, Triplet, Vocab
from .errors import ContractError
from .model import ApeModel, EncodedInput
from .tensor import Tensor

LOG_FLOOR = 1e-30


def length_penalty(length: int, alpha: float) -> float:
    """((5 + len) / 6) ** alpha."""
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class BeamHypothesis:
    tokens: list  # generated ids, EOS last when finished
    logprob: float
    finished: bool = False

    def score(self, alpha: float) -> float:
        return self.logprob / length_penalty(max(len(self.tokens), 1), alpha)


@dataclass
class DecodeResult:
    tokens: list  # generated ids without BOS/EOS
    score: float
    finished: bool  # False when max_len cut the best hypothesis short


def default_max_len(src_len: int, mt_len: int, scale: float = 1.5, extra: int = 5) -> int:
    return int(scale * (src_len + mt_len)) + extra


def _tile(t: Tensor, n: int) -> Tensor:
    return Tensor(np.broadcast_to(t.data, (n,) + t.shape[1:]).copy())


def _tile_mask(mask, n):
    return None if mask is None else np.broadcast_to(mask, (n,) + mask.shape[1:])


def _tile_enc(enc: EncodedInput, s: Optional[Tensor], n: int):
    memories = [
        (_tile(mem, n), _tile_mask(mask, n), None if scale is None else _tile(scale, n))
        for mem, mask, scale in enc.memories
    ]
    tiled = EncodedInput(
        memories=memories,
        h_mt=_tile(enc.h_mt, n),
        mt_mask=_tile_mask(enc.mt_mask, n),
        src_len=enc.src_len,
    )
    return tiled, (None if s is None else _tile(s, n))


def beam_search(
    model: ApeModel,
    src_ids,
    mt_ids,
    *,
    beam: int = 4,
    lp_alpha: float = 1.0,
    max_len: Optional[int] = None,
) -> DecodeResult:
    """Decode one sentence; returns the best finished hypothesis.

    When no hypothesis emits EOS within ``max_len`` steps the best partial
    is returned with ``finished=False``.
    """
    if beam < 1:
        raise ContractError("beam must be at least 1")
    src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
    mt_ids = np.atleast_2d(np.asarray(mt_ids, dtype=np.int64))
    if src_ids.shape[1] == 0 or mt_ids.shape[1] == 0:
        raise ContractError("decoding needs non-empty src and mt")
    if max_len is None:
        max_len = default_max_len(src_ids.shape[1], mt_ids.shape[1])

    with T.no_grad():
        s = None
        if model.config.predictor:
            s, _ = model.predictor_forward(src_ids, mt_ids)
        enc = model.encode(src_ids, mt_ids, s)

        live = [BeamHypothesis([], 0.0)]
        finished: list = []
        for _ in range(max_len):
            n = len(live)
            prefix = np.full((n, 1 + max(len(h.tokens) for h in live)), PAD, dtype=np.int64)
            prefix[:, 0] = BOS
            for row, hyp in enumerate(live):
                prefix[row, 1: 1 + len(hyp.tokens)] = hyp.tokens
            enc_n, s_n = _tile_enc(enc, s, n)
            _, p = model.decode_step(prefix, enc_n, s_n, np.broadcast_to(mt_ids, (n, mt_ids.shape[1])))
            logp = np.log(np.maximum(p.data, LOG_FLOOR))

            candidates = []
            for row, hyp in enumerate(live):
                for tok in range(logp.shape[1]):
                    if tok in (PAD, BOS):
                        continue
                    candidates.append((hyp.logprob + float(logp[row, tok]), tok, row))
            # higher logprob first; ties by lower token id, then hypothesis index
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

            # EOS competes for beam slots, so beam=1 degenerates to greedy
            next_live = []
            for logprob, tok, row in candidates[: beam]:
                if tok == EOS:
                    finished.append(BeamHypothesis(live[row].tokens + [EOS], logprob, True))
                else:
                    next_live.append(BeamHypothesis(live[row].tokens + [tok], logprob))
            live = next_live
            if not live:
                break

    if finished:
        best = min(finished, key=lambda h: (-h.score(lp_alpha), h.tokens))
        return DecodeResult(best.tokens[:-1], best.score(lp_alpha), True)
    best = min(live, key=lambda h: (-h.score(lp_alpha), h.tokens))
    return DecodeResult(best.tokens, best.score(lp_alpha), False)


def decode_corpus(
    model: ApeModel,
    vocab: Vocab,
    triplets,
    *,
    beam: int = 4,
    lp_alpha: float = 1.0,
    max_len_scale: float = 1.5,
    max_len_extra: int = 5,
) -> list:
    """Beam-decode every triplet; returns token-string hypotheses."""
    hyps = []
    for t in triplets:
        src = vocab.encode(t.src)
        mt = vocab.encode(t.mt)
        result = beam_search(
            model, src, mt, beam=beam, lp_alpha=lp_alpha,
            max_len=default_max_len(len(src), len(mt), max_len_scale, max_len_extra),
        )
        hyps.append(vocab.decode(result.tokens))
    return hyps
