"""Evaluation metrics: TER, corpus BLEU, copying and prediction accuracy.

TER follows the greedy shift procedure: repeatedly apply the single block
shift that most reduces the remaining edit distance (each shift costs one
edit, so only reductions of at least two help), then add the leftover
insertions/deletions/substitutions and divide by the reference length.
BLEU is corpus-level, case-sensitive, 4-gram with brevity penalty and no
smoothing, so any order with zero matches zeroes the score.
"""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .labeling import lcs_labels

MAX_SHIFT_BLOCK = 10  # standard cap on shifted-block length


def levenshtein(a: Sequence[str], b: Sequence[str]) -> int:
    """Unit-cost edit distance (insert / delete / substitute)."""
    if not a:
        return len(b)
    prev = list(range(len(b) + 1))
    for i, tok in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j in range(1, len(b) + 1):
            cur[j] = min(
                prev[j] + 1,
                cur[j - 1] + 1,
                prev[j - 1] + (tok != b[j - 1]),
            )
        prev = cur
    return prev[-1]


def _ref_blocks(ref: Sequence[str]) -> set:
    blocks = set()
    for p in range(len(ref)):
        for length in range(1, min(MAX_SHIFT_BLOCK, len(ref) - p) + 1):
            blocks.add(tuple(ref[p: p + length]))
    return blocks


def _best_shift(hyp: list, ref: Sequence[str], blocks: set, base: int):
    """The single block shift with the largest edit-distance reduction.

    Candidate blocks must occur verbatim in the reference.  Ties break on
    (start, length, destination) so the procedure is deterministic.
    Returns (new_hyp, new_distance) or None when no shift reduces the
    total edit count (a shift itself costs one edit).
    """
    best = None
    for i in range(len(hyp)):
        for length in range(1, min(MAX_SHIFT_BLOCK, len(hyp) - i) + 1):
            block = tuple(hyp[i: i + length])
            if block not in blocks:
                break  # longer blocks starting here cannot match either
            remainder = hyp[:i] + hyp[i + length:]
            for dest in range(len(remainder) + 1):
                if dest == i:
                    continue
                candidate = remainder[:dest] + list(block) + remainder[dest:]
                dist = levenshtein(candidate, ref)
                if best is None or dist < best[0]:
                    best = (dist, candidate)
    if best is not None and base - best[0] >= 2:
        return best[1], best[0]
    return None


def ter_edits(hyp: Sequence[str], ref: Sequence[str]):
    """(total edits including shifts, shift count) for one sentence pair."""
    if not ref:
        raise ContractError("TER needs a non-empty reference")
    current = list(hyp)
    blocks = _ref_blocks(ref)
    shifts = 0
    dist = levenshtein(current, ref)
    while dist > 0:
        found = _best_shift(current, ref, blocks, dist)
        if found is None:
            break
        current, dist = found
        shifts += 1
    return shifts + dist, shifts


def ter(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Translation edit rate for one sentence: edits / reference length."""
    edits, _ = ter_edits(hyp, ref)
    return edits / len(ref)


def corpus_ter(hyps, refs) -> float:
    """Pooled TER: total edits over total reference length."""
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    edits = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        e, _ = ter_edits(hyp, ref)
        edits += e
        ref_len += len(ref)
    return edits / ref_len


def _ngrams(tokens: Sequence[str], n: int):
    return collections.Counter(
        tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1)
    )


def bleu(hyps, refs, max_order: int = 4) -> float:
    """Corpus BLEU (percentage): clipped n-gram precision, brevity penalty."""
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for m, t in zip(matches, totals):
        if m == 0 or t == 0:
            return 0.0
        log_sum += math.log(m / t)
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_sum / max_order)


def _positions(token: str, tokens: Sequence[str]) -> list:
    return [i for i, t in enumerate(tokens) if t == token]


def copy_counts(hyp, ref_pe, mt):
    """(correctly copied, should-be-copied) counts for one sentence.

    An mt token labeled 1 by the LCS alignment counts as correctly copied
    iff its surface form occupies exactly the same positions in the
    hypothesis as in the reference.
    """
    labels = lcs_labels(mt, ref_pe)
    correct = total = 0
    for k, token in enumerate(mt):
        if not labels[k]:
            continue
        total += 1
        if _positions(token, hyp) == _positions(token, ref_pe):
            correct += 1
    return correct, total


def copying_accuracy(hyps, refs, mts) -> float:
    """Corpus copying accuracy (percentage) over should-be-copied tokens."""
    correct = total = 0
    for hyp, ref, mt in zip(hyps, refs, mts):
        c, t = copy_counts(hyp, ref, mt)
        correct += c
        total += t
    return 100.0 if total == 0 else 100.0 * correct / total


def prediction_accuracy(scores, labels) -> float:
    """Percentage of tokens whose thresholded score (>= 0.5) matches the label."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ContractError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    return 100.0 * float(((scores >= 0.5) == (labels == 1)).mean())


@dataclass
class EvalReport:
    ter: float  # percentage; may exceed 100 when edits outnumber reference tokens
    bleu: float
    copying_accuracy: Optional[float] = None
    prediction_accuracy: Optional[float] = None
    n_sentences: int = 0
    per_sentence: list = field(default_factory=list)

    def to_record(self) -> dict:
        record = {
            "ter": self.ter,
            "bleu": self.bleu,
            "n_sentences": self.n_sentences,
        }
        if self.copying_accuracy is not None:
            record["copying_accuracy"] = self.copying_accuracy
        if self.prediction_accuracy is not None:
            record["prediction_accuracy"] = self.prediction_accuracy
        return record


def evaluate(hyps, refs, mts=None, scores=None, labels=None) -> EvalReport:
    """Full corpus report; mt sides and predictor scores are optional."""
    per_sentence = [
        {"ter": ter(h, r), "hyp_len": len(h), "ref_len": len(r)}
        for h, r in zip(hyps, refs)
    ]
    report = EvalReport(
        ter=100.0 * corpus_ter(hyps, refs),
        bleu=bleu(hyps, refs),
        n_sentences=len(hyps),
        per_sentence=per_sentence,
    )
    if mts is not None:
        report.copying_accuracy = copying_accuracy(hyps, refs, mts)
    if scores is not None and labels is not None:
        flat_scores = np.concatenate([np.asarray(s, dtype=float) for s in scores])
        flat_labels = np.concatenate([np.asarray(l) for l in labels])
        report.prediction_accuracy = prediction_accuracy(flat_scores, flat_labels)
    return report


def format_report(report: EvalReport) -> str:
    lines = [
        f"sentences            {report.n_sentences:>10d}",
        f"TER                  {report.ter:>10.2f}",
        f"BLEU                 {report.bleu:>10.2f}",
    ]
    if report.copying_accuracy is not None:
        lines.append(f"copying accuracy     {report.copying_accuracy:>10.2f}")
    if report.prediction_accuracy is not None:
        lines.append(f"prediction accuracy  {report.prediction_accuracy:>10.2f}")
    return "\n".join(lines) + "\n"
