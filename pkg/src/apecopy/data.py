"""Corpus I/O, vocabulary, byte-pair encoding, batching, synthetic data.

A corpus file is line-delimited UTF-8: one triplet per line with
tab-separated fields ``src``, ``mt``, ``pe`` and an optional fourth field
of space-separated 0/1 copy labels aligned to the mt tokens.  Tokens are
space-separated inside each field.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, CorpusFormatError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass
class Triplet:
    """One APE example: source, machine translation, post-edit."""

    src: list
    mt: list
    pe: list
    labels: Optional[list] = None


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------


def parse_triplet_line(line: str, path="<str>", line_no: int = 0) -> Triplet:
    fields = line.rstrip("\n").split("\t")
    if len(fields) not in (3, 4):
        raise CorpusFormatError(path, line_no, f"expected 3 or 4 tab-separated fields, got {len(fields)}")
    src, mt, pe = (f.split() for f in fields[:3])
    labels = None
    if len(fields) == 4:
        try:
            labels = [int(tok) for tok in fields[3].split()]
        except ValueError:
            raise CorpusFormatError(path, line_no, "labels field must contain integers") from None
        if any(l not in (0, 1) for l in labels):
            raise CorpusFormatError(path, line_no, "labels must be 0 or 1")
        if len(labels) != len(mt):
            raise CorpusFormatError(path, line_no, f"{len(labels)} labels for {len(mt)} mt tokens")
    return Triplet(src, mt, pe, labels)


def format_triplet_line(t: Triplet) -> str:
    fields = [" ".join(t.src), " ".join(t.mt), " ".join(t.pe)]
    if t.labels is not None:
        fields.append(" ".join(str(l) for l in t.labels))
    return "\t".join(fields)


def read_corpus(path) -> list:
    triplets = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            triplets.append(parse_triplet_line(line, path, line_no))
    return triplets


def write_corpus(path, triplets: Iterable[Triplet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(format_triplet_line(t) + "\n")


def import_parallel(src_path, mt_path, pe_path) -> list:
    """Assemble triplets from three line-parallel token files."""
    streams = [Path(p).read_text(encoding="utf-8").splitlines() for p in (src_path, mt_path, pe_path)]
    if len({len(s) for s in streams}) != 1:
        raise ContractError(
            f"parallel files differ in length: {[len(s) for s in streams]}"
        )
    return [Triplet(a.split(), b.split(), c.split()) for a, b, c in zip(*streams)]


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


class Vocab:
    """Bijective token<->id map with fixed reserved ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, tokens: Sequence[str]) -> list:
        get = self.token_to_id.get
        return [get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list:
        return [self.id_to_token[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[: len(RESERVED)] != list(RESERVED):
            raise ConfigError(f"vocab file {path} does not start with the reserved tokens")
        return cls(lines[len(RESERVED):])


def build_vocab(triplets: Sequence[Triplet], min_count: int = 1) -> Vocab:
    """Frequency-sorted shared vocabulary over src, mt and pe tokens."""
    if not triplets:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    counts = collections.Counter()
    for t in triplets:
        counts.update(t.src)
        counts.update(t.mt)
        counts.update(t.pe)
    kept = [(tok, c) for tok, c in counts.items() if c >= min_count]
    kept.sort(key=lambda item: (-item[1], item[0]))
    return Vocab([tok for tok, _ in kept])


# ---------------------------------------------------------------------------
# byte-pair encoding
# ---------------------------------------------------------------------------

EOW = "</w>"


@dataclass
class BpeModel:
    merges: list = field(default_factory=list)

    @property
    def merge_count(self):
        return len(self.merges)

    def save(self, path) -> None:
        Path(path).write_text(
            "\n".join(f"{a} {b}" for a, b in self.merges) + ("\n" if self.merges else ""),
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path) -> "BpeModel":
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            a, b = line.split(" ")
            merges.append((a, b))
        return cls(merges)


def _word_symbols(word: str) -> tuple:
    return tuple(word) + (EOW,)


def bpe_learn(lines: Iterable[str], merges: int) -> BpeModel:
    """Learn a merge list: repeatedly fuse the most frequent adjacent pair.

    Ties break toward the lexicographically smallest pair so the merge
    sequence is deterministic.
    """
    if merges < 0:
        raise ConfigError("merge count must be >= 0")
    word_counts = collections.Counter()
    for line in lines:
        word_counts.update(line.split())
    words = {_word_symbols(w): c for w, c in word_counts.items()}

    model = BpeModel()
    for _ in range(merges):
        pair_counts = collections.Counter()
        for symbols, count in words.items():
            for a, b in zip(symbols, symbols[1:]):
                pair_counts[(a, b)] += count
        if not pair_counts:
            break
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        model.merges.append(best)
        words = {_merge_word(symbols, best): c for symbols, c in words.items()}
    return model


def _merge_word(symbols: tuple, pair: tuple) -> tuple:
    merged = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            merged.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return tuple(merged)


def bpe_apply(model: BpeModel, text: str) -> list:
    """Segment whitespace-split words by replaying the merges in order."""
    out = []
    for word in text.split():
        symbols = _word_symbols(word)
        for pair in model.merges:
            if len(symbols) == 1:
                break
            symbols = _merge_word(symbols, pair)
        out.extend(symbols)
    return out


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded id arrays for one training step.

    ``dec_in`` is BOS + pe and ``targets`` is pe + EOS, so position j of
    the decoder predicts ``targets[:, j]``.  ``word_target_mask`` marks the
    steps whose target is a real pe word (EOS and padding excluded); the
    copy-mass sum runs over exactly those steps.
    """

    src_ids: np.ndarray
    src_mask: np.ndarray
    mt_ids: np.ndarray
    mt_mask: np.ndarray
    dec_in: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    word_target_mask: np.ndarray
    labels: np.ndarray

    @property
    def size(self):
        return self.src_ids.shape[0]


def _pad(rows: list, width: int, fill: int = PAD) -> np.ndarray:
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, : len(row)] = row
    return out


def encode_batch(triplets: Sequence[Triplet], vocab: Vocab) -> Batch:
    for t in triplets:
        if not t.src or not t.mt or not t.pe:
            raise ContractError("training triplets need non-empty src, mt and pe")
        if t.labels is None:
            raise ContractError("batch encoding needs labels; run labeling first")
    src = [vocab.encode(t.src) for t in triplets]
    mt = [vocab.encode(t.mt) for t in triplets]
    pe = [vocab.encode(t.pe) for t in triplets]
    max_i = max(len(s) for s in src)
    max_k = max(len(m) for m in mt)
    max_t = max(len(p) for p in pe) + 1  # BOS prefix / EOS target

    src_ids = _pad(src, max_i)
    mt_ids = _pad(mt, max_k)
    dec_in = _pad([[BOS] + p for p in pe], max_t)
    targets = _pad([p + [EOS] for p in pe], max_t)
    src_mask = src_ids != PAD
    mt_mask = mt_ids != PAD
    target_mask = targets != PAD
    word_target_mask = target_mask & (targets != EOS)
    labels = _pad([t.labels for t in triplets], max_k)
    return Batch(
        src_ids, src_mask, mt_ids, mt_mask, dec_in, targets, target_mask, word_target_mask, labels
    )


def batch_iter(
    triplets: Sequence[Triplet],
    vocab: Vocab,
    token_budget: int,
    seed: int,
    epoch: int = 0,
) -> list:
    """Deterministic length-bucketed batches under a padded-token budget.

    Examples are shuffled per (seed, epoch), stably sorted by length so
    neighbours pad efficiently, grouped greedily, and the group order is
    shuffled again.  The same arguments always produce the same batches.
    """
    if not triplets:
        raise ContractError("cannot batch an empty corpus")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(triplets))
    order = sorted(order, key=lambda i: len(triplets[i].src) + len(triplets[i].mt) + len(triplets[i].pe))

    groups = []
    current: list = []

    def cost(indices):
        mi = max(len(triplets[i].src) for i in indices)
        mk = max(len(triplets[i].mt) for i in indices)
        mj = max(len(triplets[i].pe) for i in indices) + 1
        return len(indices) * (mi + mk + mj)

    for idx in order:
        if current and cost(current + [idx]) > token_budget:
            groups.append(current)
            current = []
        current.append(idx)
    if current:
        groups.append(current)
    rng.shuffle(groups)
    return [encode_batch([triplets[i] for i in g], vocab) for g in groups]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def synth_corpus(
    seed: int,
    n: int,
    vocab_size: int,
    len_range: tuple,
    noise: dict,
    return_truth: bool = False,
):
    """Toy APE corpus where src fully determines the correct pe.

    pe is random text over a target vocabulary; src maps each pe token
    into a disjoint source vocabulary one-for-one; mt corrupts pe with
    substitutions, deletions and insertions.  With ``return_truth`` the
    generator's own per-mt-token copied/corrupted bookkeeping is returned
    alongside (1 = survived unchanged from pe).
    """
    sub = float(noise.get("sub_rate", 0.0))
    dele = float(noise.get("del_rate", 0.0))
    ins = float(noise.get("ins_rate", 0.0))
    for rate in (sub, dele, ins):
        if not 0.0 <= rate <= 1.0:
            raise ConfigError(f"noise rate {rate} outside [0, 1]")
    if sub + dele + ins >= 1.0:
        raise ConfigError("noise rates must sum to less than 1")
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad length range {len_range}")

    rng = np.random.default_rng(seed)
    tgt = [f"t{i:03d}" for i in range(vocab_size)]
    src_map = {t: f"s{i:03d}" for i, t in enumerate(tgt)}

    triplets = []
    truths = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        pe = [tgt[i] for i in rng.integers(0, vocab_size, size=length)]
        src = [src_map[t] for t in pe]
        mt = []
        truth = []
        for tok in pe:
            r = rng.random()
            if r < sub:
                other = tgt[int(rng.integers(0, vocab_size - 1))]
                if other == tok:
                    other = tgt[-1]
                mt.append(other)
                truth.append(0)
            elif r < sub + dele:
                continue
            elif r < sub + dele + ins:
                mt.append(tok)
                truth.append(1)
                mt.append(tgt[int(rng.integers(0, vocab_size))])
                truth.append(0)
            else:
                mt.append(tok)
                truth.append(1)
        if not mt:  # fully deleted; keep one corrupted token so mt is non-empty
            mt = [tgt[int(rng.integers(0, vocab_size))]]
            truth = [0]
        triplets.append(Triplet(src, mt, pe))
        truths.append(truth)
    return (triplets, truths) if return_truth else triplets
