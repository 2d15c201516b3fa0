import itertools

import numpy as np
import pytest

from apecopy import labeling
from apecopy.errors import ContractError


def brute_force_lcs(a, b):
    """Exhaustive subsequence enumeration, longest first."""
    for length in range(len(a), -1, -1):
        for picks in itertools.combinations(range(len(a)), length):
            if is_subsequence([a[i] for i in picks], b):
                return length
    return 0


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(tok in it for tok in sub)


def all_maximal_alignments(a, b):
    """Every set of a-indices realising an LCS-length alignment."""
    best = brute_force_lcs(a, b)
    out = []
    for picks in itertools.combinations(range(len(a)), best):
        if is_subsequence([a[i] for i in picks], b):
            out.append(set(picks))
    return out


class TestLcsLength:
    def test_identical(self):
        assert labeling.lcs_length(list("abc"), list("abc")) == 3

    def test_disjoint(self):
        assert labeling.lcs_length(list("abc"), list("xyz")) == 0

    def test_classic_pair(self):
        a, b = list("ABCBDAB"), list("BDCABA")
        assert brute_force_lcs(a, b) == 4
        assert labeling.lcs_length(a, b) == 4

    def test_random_against_enumeration(self, rng):
        alphabet = list("abc")
        for _ in range(200):
            a = [alphabet[i] for i in rng.integers(0, 3, size=rng.integers(0, 7))]
            b = [alphabet[i] for i in rng.integers(0, 3, size=rng.integers(0, 7))]
            assert labeling.lcs_length(a, b) == brute_force_lcs(a, b)


class TestLcsLabels:
    def test_running_example(self):
        mt = "Ich esse einen Hamburger".split()
        pe = "Ich hatte gestern einen Kuchen gegessen".split()
        assert labeling.lcs_labels(mt, pe) == [1, 0, 1, 0]

    def test_identical_all_ones(self):
        toks = "a b c d".split()
        assert labeling.lcs_labels(toks, toks) == [1, 1, 1, 1]

    def test_duplicate_token_backtrace(self):
        mt, pe = "a b a".split(), "a a".split()
        labels = labeling.lcs_labels(mt, pe)
        assert labels == [1, 0, 1]
        chosen = {i for i, l in enumerate(labels) if l}
        assert chosen in all_maximal_alignments(mt, pe)

    def test_sum_equals_lcs_length(self, rng):
        alphabet = list("abc")
        for _ in range(300):
            mt = [alphabet[i] for i in rng.integers(0, 3, size=rng.integers(1, 8))]
            pe = [alphabet[i] for i in rng.integers(0, 3, size=rng.integers(0, 8))]
            labels = labeling.lcs_labels(mt, pe)
            assert sum(labels) == labeling.lcs_length(mt, pe)
            # deterministic pure function
            assert labels == labeling.lcs_labels(mt, pe)
            # chosen alignment is maximal, and labeled tokens occur in pe
            chosen = {i for i, l in enumerate(labels) if l}
            assert chosen in all_maximal_alignments(mt, pe) or not chosen
            for i in chosen:
                assert mt[i] in pe

    def test_union_variant_is_superset(self, rng):
        alphabet = list("ab")
        for _ in range(100):
            mt = [alphabet[i] for i in rng.integers(0, 2, size=rng.integers(1, 7))]
            pe = [alphabet[i] for i in rng.integers(0, 2, size=rng.integers(0, 7))]
            single = labeling.lcs_labels(mt, pe)
            union = labeling.lcs_labels(mt, pe, union=True)
            assert all(u >= s for u, s in zip(union, single))
            expected = set().union(*all_maximal_alignments(mt, pe)) if labeling.lcs_length(mt, pe) else set()
            assert {i for i, l in enumerate(union) if l} == expected


class TestCorpusCopyRate:
    def test_identical_pairs(self):
        pairs = [("a b".split(), "a b".split())] * 5
        assert labeling.corpus_copy_rate(pairs) == 1.0

    def test_disjoint_pairs(self):
        pairs = [("a b".split(), "x y".split())] * 5
        assert labeling.corpus_copy_rate(pairs) == 0.0

    def test_empty_corpus_rejected(self):
        with pytest.raises(ContractError):
            labeling.corpus_copy_rate([])

    def test_substitution_noise_rate(self, rng):
        # 15% substitution noise -> about 85% of tokens keep their identity
        vocab = [f"w{i}" for i in range(50)]
        pairs = []
        for _ in range(2000):
            pe = [vocab[i] for i in rng.integers(0, 50, size=rng.integers(4, 13))]
            mt = [
                vocab[(vocab.index(t) + 1 + rng.integers(0, 48)) % 50] if rng.random() < 0.15 else t
                for t in pe
            ]
            pairs.append((mt, pe))
        rate = labeling.corpus_copy_rate(pairs)
        assert abs(rate - 0.85) < 0.03
