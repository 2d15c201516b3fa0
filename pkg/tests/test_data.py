import collections

import numpy as np
import pytest

from apecopy import data, labeling
from apecopy.errors import ConfigError, ContractError, CorpusFormatError


class TestCorpusRoundTrip:
    def test_write_then_read(self, tmp_path):
        triplets = [
            data.Triplet(["I", "ate"], ["Ich", "esse"], ["Ich", "ass"], [1, 0]),
            data.Triplet(["a"], ["b"], ["c"]),
        ]
        path = tmp_path / "corpus.tsv"
        data.write_corpus(path, triplets)
        back = data.read_corpus(path)
        assert back == triplets

    def test_missing_field_reports_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("a b\tc d\te f\nx y\tz w\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError) as err:
            data.read_corpus(path)
        assert ":2:" in str(err.value)

    def test_label_length_mismatch(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("a\tb c\td\t1\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError):
            data.read_corpus(path)

    def test_running_example_with_labels(self, tmp_path):
        line = (
            "I ate a cake yesterday\tIch esse einen Hamburger\t"
            "Ich hatte gestern einen Kuchen gegessen\t1 0 1 0"
        )
        t = data.parse_triplet_line(line)
        assert t.labels == [1, 0, 1, 0]
        assert t.labels == labeling.lcs_labels(t.mt, t.pe)
        assert data.format_triplet_line(t) == line

    def test_import_parallel(self, tmp_path):
        (tmp_path / "s").write_text("a b\nc\n", encoding="utf-8")
        (tmp_path / "m").write_text("x\ny z\n", encoding="utf-8")
        (tmp_path / "p").write_text("u\nv\n", encoding="utf-8")
        triplets = data.import_parallel(tmp_path / "s", tmp_path / "m", tmp_path / "p")
        assert triplets[1] == data.Triplet(["c"], ["y", "z"], ["v"])


class TestVocab:
    def test_single_token_type(self):
        vocab = data.build_vocab([data.Triplet(["a"], ["a"], ["a"])])
        assert len(vocab) == 5

    def test_round_trip_ids(self):
        corpus = [data.Triplet("a b".split(), "b c".split(), "c a".split())]
        vocab = data.build_vocab(corpus)
        for tok in "abc":
            assert vocab.decode([vocab.token_to_id[tok]]) == [tok]

    def test_frequency_then_lexical_order(self):
        corpus = [data.Triplet(["b", "b"], ["a", "a"], ["c", "c", "c"])]
        vocab = data.build_vocab(corpus)
        assert vocab.id_to_token[4:] == ["c", "a", "b"]

    def test_unknown_maps_to_unk(self):
        vocab = data.build_vocab([data.Triplet(["a"], ["a"], ["a"])])
        assert vocab.encode(["zzz"]) == [data.UNK]

    def test_save_load(self, tmp_path):
        vocab = data.build_vocab([data.Triplet(["a", "b"], ["c"], ["d"])])
        vocab.save(tmp_path / "v.txt")
        again = data.Vocab.load(tmp_path / "v.txt")
        assert again.id_to_token == vocab.id_to_token


def reference_merge_sequence(word_counts, steps):
    """Independent pair counting over expanded word instances."""
    instances = []
    for word, count in word_counts.items():
        instances.extend([list(word) + [data.EOW]] * count)
    merges = []
    for _ in range(steps):
        counts = collections.Counter()
        for inst in instances:
            for i in range(len(inst) - 1):
                counts[(inst[i], inst[i + 1])] += 1
        if not counts:
            break
        top = max(counts.values())
        best = sorted(p for p, c in counts.items() if c == top)[0]
        merges.append(best)
        for inst in instances:
            i = 0
            while i < len(inst) - 1:
                if (inst[i], inst[i + 1]) == best:
                    inst[i: i + 2] = [inst[i] + inst[i + 1]]
                else:
                    i += 1
    return merges


CLASSIC = {"low": 5, "lower": 2, "newest": 6, "widest": 3}


class TestBpe:
    def test_zero_merges_is_character_segmentation(self):
        model = data.bpe_learn(["hi you"], 0)
        assert data.bpe_apply(model, "hi you") == ["h", "i", data.EOW, "y", "o", "u", data.EOW]

    def test_classic_corpus_merge_trace(self):
        lines = [" ".join([w] * c) for w, c in CLASSIC.items()]
        model = data.bpe_learn(lines, 10)
        assert model.merges == reference_merge_sequence(CLASSIC, 10)
        # first merges fuse the 9-count 'est</w>' suffix, hand-checked
        assert model.merges[:3] == [("e", "s"), ("es", "t"), ("est", data.EOW)]

    def test_enough_merges_reconstruct_words(self):
        lines = [" ".join([w] * c) for w, c in CLASSIC.items()]
        model = data.bpe_learn(lines, 50)
        for word in CLASSIC:
            assert data.bpe_apply(model, word) == [word + data.EOW]

    def test_apply_is_per_word(self):
        lines = [" ".join([w] * c) for w, c in CLASSIC.items()]
        model = data.bpe_learn(lines, 10)
        joined = data.bpe_apply(model, "low newest")
        assert joined == data.bpe_apply(model, "low") + data.bpe_apply(model, "newest")

    def test_save_load(self, tmp_path):
        model = data.bpe_learn(["aa ab aa"], 3)
        model.save(tmp_path / "bpe.txt")
        again = data.BpeModel.load(tmp_path / "bpe.txt")
        assert again.merges == model.merges


class TestBatching:
    def corpus(self, rng, n=40):
        triplets = data.synth_corpus(3, n, 20, (2, 8), {"sub_rate": 0.2})
        for t in triplets:
            t.labels = labeling.lcs_labels(t.mt, t.pe)
        return triplets

    def test_deterministic_for_seed(self, rng):
        triplets = self.corpus(rng)
        vocab = data.build_vocab(triplets)
        a = data.batch_iter(triplets, vocab, 64, seed=5)
        b = data.batch_iter(triplets, vocab, 64, seed=5)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert x.src_ids.tobytes() == y.src_ids.tobytes()
            assert x.targets.tobytes() == y.targets.tobytes()

    def test_budget_respected(self, rng):
        triplets = self.corpus(rng)
        vocab = data.build_vocab(triplets)
        for batch in data.batch_iter(triplets, vocab, 64, seed=1):
            padded = batch.size * (
                batch.src_ids.shape[1] + batch.mt_ids.shape[1] + batch.dec_in.shape[1]
            )
            assert padded <= 64 or batch.size == 1

    def test_all_examples_covered(self, rng):
        triplets = self.corpus(rng)
        vocab = data.build_vocab(triplets)
        batches = data.batch_iter(triplets, vocab, 64, seed=1)
        assert sum(b.size for b in batches) == len(triplets)

    def test_batch_layout(self):
        t = data.Triplet(["s000", "s001"], ["t000"], ["t000", "t001"], [1])
        vocab = data.build_vocab([t])
        batch = data.encode_batch([t], vocab)
        assert batch.dec_in[0, 0] == data.BOS
        assert batch.targets[0, -1] == data.EOS
        assert batch.word_target_mask[0].tolist() == [True, True, False]
        np.testing.assert_array_equal(batch.labels[0], [1])

    def test_unlabeled_batch_rejected(self):
        t = data.Triplet(["a"], ["b"], ["c"])
        vocab = data.build_vocab([t])
        with pytest.raises(ContractError):
            data.encode_batch([t], vocab)


class TestSynthCorpus:
    def test_no_noise_copies_everything(self):
        triplets = data.synth_corpus(1, 50, 30, (3, 9), {})
        for t in triplets:
            assert t.mt == t.pe
            assert labeling.lcs_labels(t.mt, t.pe) == [1] * len(t.mt)

    def test_src_determines_pe(self):
        triplets = data.synth_corpus(2, 50, 30, (3, 9), {"sub_rate": 0.3})
        mapping = {}
        for t in triplets:
            assert len(t.src) == len(t.pe)
            for s, p in zip(t.src, t.pe):
                assert mapping.setdefault(s, p) == p

    def test_sub_noise_copy_rate(self):
        triplets = data.synth_corpus(4, 2000, 50, (4, 12), {"sub_rate": 0.15})
        rate = labeling.corpus_copy_rate((t.mt, t.pe) for t in triplets)
        assert abs(rate - 0.85) < 0.03

    def test_seed_reproducible_bitwise(self):
        a = data.synth_corpus(9, 100, 20, (2, 6), {"sub_rate": 0.1, "del_rate": 0.05, "ins_rate": 0.05})
        b = data.synth_corpus(9, 100, 20, (2, 6), {"sub_rate": 0.1, "del_rate": 0.05, "ins_rate": 0.05})
        assert a == b

    def test_generator_truth_close_to_lcs_labels(self):
        triplets, truths = data.synth_corpus(
            11, 500, 50, (4, 12), {"sub_rate": 0.15}, return_truth=True
        )
        agree = total = 0
        for t, truth in zip(triplets, truths):
            labels = labeling.lcs_labels(t.mt, t.pe)
            agree += sum(a == b for a, b in zip(labels, truth))
            total += len(truth)
        assert agree / total >= 0.99

    def test_invalid_rates_rejected(self):
        with pytest.raises(ConfigError):
            data.synth_corpus(1, 10, 10, (2, 4), {"sub_rate": 0.6, "del_rate": 0.5})
        with pytest.raises(ConfigError):
            data.synth_corpus(1, 10, 10, (2, 4), {"sub_rate": -0.1})
