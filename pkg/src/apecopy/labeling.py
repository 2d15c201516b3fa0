"""Copy labels from the longest common subsequence of mt and pe.

Each mt token gets label 1 when it takes part in one maximal alignment
between mt and pe (so it should be copied into the post-edit) and 0
otherwise.  The alignment is recovered by a deterministic DP backtrace;
``union=True`` instead labels every token that appears in *any* maximal
alignment.
"""

from __future__ import annotations

from typing import Sequence

from .errors import ContractError

__all__ = ["lcs_length", "lcs_labels", "corpus_copy_rate"]


def _lcs_table(a: Sequence[str], b: Sequence[str]):
    """Prefix table: t[i][j] = LCS length of a[:i] and b[:j]."""
    n, m = len(a), len(b)
    t = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        ai = a[i - 1]
        row, prev = t[i], t[i - 1]
        for j in range(1, m + 1):
            if ai == b[j - 1]:
                row[j] = prev[j - 1] + 1
            else:
                up, left = prev[j], row[j - 1]
                row[j] = up if up >= left else left
    return t


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Length of the longest common subsequence under exact token equality."""
    return _lcs_table(a, b)[len(a)][len(b)]


def lcs_labels(mt: Sequence[str], pe: Sequence[str], *, union: bool = False) -> list[int]:
    """Per-mt-token 0/1 copy labels, length ``len(mt)``.

    The default backtrace prefers a match when tokens are equal and
    otherwise consumes a pe token on DP ties, which pins down one maximal
    alignment.  ``sum(labels) == lcs_length(mt, pe)`` always holds for the
    backtrace variant.
    """
    if union:
        return _union_labels(mt, pe)
    t = _lcs_table(mt, pe)
    labels = [0] * len(mt)
    i, j = len(mt), len(pe)
    while i > 0 and j > 0:
        if mt[i - 1] == pe[j - 1]:
            labels[i - 1] = 1
            i -= 1
            j -= 1
        elif t[i][j - 1] >= t[i - 1][j]:
            j -= 1
        else:
            i -= 1
    return labels


def _union_labels(mt: Sequence[str], pe: Sequence[str]) -> list[int]:
    """Label mt tokens that occur in any maximal alignment."""
    pre = _lcs_table(mt, pe)
    suf = _lcs_table(mt[::-1], pe[::-1])
    total = pre[len(mt)][len(pe)]
    labels = [0] * len(mt)
    for i in range(1, len(mt) + 1):
        for j in range(1, len(pe) + 1):
            if mt[i - 1] == pe[j - 1]:
                if pre[i - 1][j - 1] + 1 + suf[len(mt) - i][len(pe) - j] == total:
                    labels[i - 1] = 1
                    break
    return labels


def corpus_copy_rate(pairs) -> float:
    """Fraction of mt tokens labeled copied, pooled over the corpus.

    ``pairs`` yields (mt, pe) token-sequence tuples.
    """
    labeled = 0
    tokens = 0
    for mt, pe in pairs:
        labeled += sum(lcs_labels(mt, pe))
        tokens += len(mt)
    if tokens == 0:
        raise ContractError("copy rate of an empty corpus")
    return labeled / tokens
