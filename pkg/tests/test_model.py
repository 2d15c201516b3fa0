import numpy as np
import pytest

from apecopy import data, labeling, tensor as T
from apecopy.config import ModelConfig
from apecopy.errors import ConfigError, ContractError
from apecopy.model import ApeModel, copy_mass_from_steps

from conftest import check_gradients


def tiny_config(**kw):
    base = dict(
        d=8, heads=2, n_enc=1, n_dec=1, n_pred=1, ffn=16, vocab_size=20,
        max_len=32, dropout=0.0, dtype="float64",
    )
    base.update(kw)
    return ModelConfig(**base)


def toy_batch(rng, b=2, i=3, k=3, j=3, vocab=20):
    triplets = []
    for _ in range(b):
        src = [f"s{x}" for x in rng.integers(0, 5, size=i)]
        mt = [f"t{x}" for x in rng.integers(0, 5, size=k)]
        pe = [f"t{x}" for x in rng.integers(0, 5, size=j)]
        triplets.append(data.Triplet(src, mt, pe, labeling.lcs_labels(mt, pe)))
    vocab_obj = data.Vocab([f"s{x}" for x in range(5)] + [f"t{x}" for x in range(5)])
    return data.encode_batch(triplets, vocab_obj)


class TestPredictor:
    def test_score_shape_and_range(self, rng):
        model = ApeModel(tiny_config(), seed=1)
        s, _ = model.predictor_forward(np.array([[4, 5]]), np.array([[6, 7, 8]]))
        assert s.shape == (1, 3)
        assert ((s.data > 0) & (s.data < 1)).all()

    def test_zero_ws_gives_half(self, rng):
        model = ApeModel(tiny_config(), seed=1)
        model.w_s.data[:] = 0.0
        s, _ = model.predictor_forward(np.array([[4, 5]]), np.array([[6, 7, 8]]))
        np.testing.assert_array_equal(s.data, np.full((1, 3), 0.5))

    def test_empty_mt_rejected(self):
        model = ApeModel(tiny_config(), seed=1)
        with pytest.raises(ContractError):
            model.predictor_forward(np.array([[4]]), np.zeros((1, 0), dtype=int))

    def test_predictor_weights_do_not_touch_encoder(self, rng):
        model = ApeModel(tiny_config(), seed=2)
        src, mt = np.array([[4, 5]]), np.array([[6, 7]])
        ones = T.tensor(np.ones((1, 2)), dtype=np.float64)
        before = model.encode(src, mt, ones).memories[0][0].data.copy()
        model.params["predictor.0.attn.wq"].data[:] += 0.7
        model.w_s.data[:] += 0.3
        after = model.encode(src, mt, ones).memories[0][0].data
        np.testing.assert_array_equal(before, after)


class TestEncode:
    def test_interactive_memory_length(self):
        model = ApeModel(tiny_config(), seed=3)
        enc = model.encode(np.array([[4, 5, 6]]), np.array([[7, 8]]))
        assert enc.memories[0][0].shape == (1, 5, 8)
        assert enc.src_len == 3

    def test_scores_without_predictor_rejected(self):
        model = ApeModel(tiny_config(predictor=False), seed=3)
        with pytest.raises(ConfigError):
            model.encode(np.array([[4]]), np.array([[5]]), T.ones((1, 1)))

    def test_baseline_symmetry_with_shared_weights(self):
        model = ApeModel(tiny_config(interactive=False, predictor=False, copynet=False), seed=4)
        # copy the src stack onto the mt stack and collapse the language rows
        for name, tensor in model.parameter_items():
            if name.startswith("encoder_src."):
                twin = model.params[name.replace("encoder_src.", "encoder_mt.")]
                twin.data[:] = tensor.data
        model.embeddings.lang.data[1] = model.embeddings.lang.data[0]
        ids = np.array([[4, 5, 6]])
        enc = model.encode(ids, ids)
        h_src, h_mt = enc.memories[0][0], enc.memories[1][0]
        np.testing.assert_array_equal(h_src.data, h_mt.data)

    def test_predictor_off_equals_all_ones_scores(self, rng):
        model = ApeModel(tiny_config(), seed=5)
        batch = toy_batch(rng)
        masked = model.forward_teacher_forced(batch, s_override=np.ones_like(batch.labels, dtype=float))
        plain = model.with_config(predictor=False).forward_teacher_forced(batch)
        assert masked.p_final.data.tobytes() == plain.p_final.data.tobytes()


class TestOutputInterpolation:
    def test_gate_zero_returns_generation(self, rng):
        model = ApeModel(tiny_config(), seed=6)
        model.copy_bu.data[:] = -50.0  # gate virtually closed
        batch = toy_batch(rng)
        trace = model.forward_teacher_forced(batch)
        np.testing.assert_allclose(trace.p_final.data, trace.p_gen.data, atol=1e-12)

    def test_gate_one_with_single_key_copies_that_token(self, rng):
        model = ApeModel(tiny_config(), seed=7)
        model.copy_bu.data[:] = 50.0  # gate open
        vocab_obj = data.Vocab([f"s{x}" for x in range(5)] + [f"t{x}" for x in range(5)])
        t = data.Triplet(["s1", "s2"], ["t3"], ["t1", "t3"], [1])
        batch = data.encode_batch([t], vocab_obj)
        trace = model.forward_teacher_forced(batch)
        # one mt key -> copy distribution is one-hot there -> P one-hot at t3
        t3 = vocab_obj.token_to_id["t3"]
        np.testing.assert_allclose(trace.p_final.data[0, :, t3], 1.0, atol=1e-12)

    def test_final_distribution_normalised(self, rng):
        model = ApeModel(tiny_config(), seed=8)
        batch = toy_batch(rng, b=3, i=4, k=3, j=4)
        trace = model.forward_teacher_forced(batch)
        np.testing.assert_allclose(trace.p_final.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_duplicate_mt_tokens_pool_their_mass(self, rng):
        model = ApeModel(tiny_config(), seed=9)
        vocab_obj = data.Vocab([f"s{x}" for x in range(5)] + [f"t{x}" for x in range(5)])
        t = data.Triplet(["s1", "s2"], ["t3", "t4", "t3"], ["t3"], [1, 0, 0])
        batch = data.encode_batch([t], vocab_obj)
        trace = model.forward_teacher_forced(batch)
        t3 = vocab_obj.token_to_id["t3"]
        copy_tok = trace.p_copy.data[0, :, 0] + trace.p_copy.data[0, :, 2]
        gen = trace.p_gen.data[0, :, t3]
        gamma = trace.gamma.data[0, :, 0]
        expected = (1 - gamma) * gen + gamma * copy_tok
        np.testing.assert_allclose(trace.p_final.data[0, :, t3], expected, atol=1e-12)


class TestCopyMass:
    def test_zero_gate_zero_mass(self, rng):
        model = ApeModel(tiny_config(), seed=10)
        model.copy_bu.data[:] = -60.0
        batch = toy_batch(rng)
        trace = model.forward_teacher_forced(batch)
        np.testing.assert_allclose(trace.copy_mass.data, 0.0, atol=1e-20)

    def test_single_step_one_hot(self):
        gamma = T.tensor(np.ones((1, 1, 1)))
        p_copy = T.tensor(np.array([[[0.0, 1.0, 0.0]]]))
        c = copy_mass_from_steps(gamma, p_copy, np.array([[True]]))
        np.testing.assert_array_equal(c.data, [[0.0, 1.0, 0.0]])

    def test_matches_double_loop(self, rng):
        model = ApeModel(tiny_config(), seed=11)
        batch = toy_batch(rng, b=2, i=3, k=4, j=5)
        trace = model.forward_teacher_forced(batch)
        c = trace.copy_mass.data
        for b in range(batch.size):
            for k in range(batch.mt_ids.shape[1]):
                total = 0.0
                for j in range(batch.targets.shape[1]):
                    if batch.word_target_mask[b, j]:
                        total += trace.gamma.data[b, j, 0] * trace.p_copy.data[b, j, k]
                assert abs(c[b, k] - total) < 1e-6


class TestForwardTeacherForced:
    def test_bare_ablation_reduces_to_generation(self, rng):
        cfg = tiny_config(interactive=False, predictor=False, copynet=False)
        model = ApeModel(cfg, seed=12)
        batch = toy_batch(rng)
        trace = model.forward_teacher_forced(batch)
        assert trace.s is None and trace.p_copy is None
        assert trace.p_final is trace.p_gen

    def test_steps_match_incremental_decode(self, rng):
        model = ApeModel(tiny_config(), seed=13)
        batch = toy_batch(rng, b=1, i=3, k=3, j=4)
        trace = model.forward_teacher_forced(batch)
        s = trace.s
        enc = model.encode(batch.src_ids, batch.mt_ids, s, batch.src_mask, batch.mt_mask)
        for t in range(1, batch.dec_in.shape[1] + 1):
            _, p = model.decode_step(batch.dec_in[:, :t], enc, s, batch.mt_ids)
            np.testing.assert_allclose(p.data[0], trace.p_final.data[0, t - 1], atol=1e-10)

    def test_detached_scores_under_joint_off(self, rng):
        model = ApeModel(tiny_config(joint_training=False), seed=14)
        batch = toy_batch(rng)
        trace = model.forward_teacher_forced(batch)
        loss = T.tsum(T.log(T.maximum(trace.p_final, 1e-9)))
        loss.backward()
        # predictor parameters see no gradient through the scaled attention
        assert model.w_s.grad is None or not model.w_s.grad.any()
        # but s itself still carries graph linkage for the predictor loss
        assert trace.s.requires_grad

    def test_token_tying_shares_storage(self, rng):
        model = ApeModel(tiny_config(), seed=15)
        batch = toy_batch(rng)
        trace = model.forward_teacher_forced(batch)
        T.tsum(trace.p_final).backward()
        assert model.embeddings.token.grad is not None
        # single-coordinate poke (a constant shift of an output column sits
        # in the final layer norm's null space and would not move the logit)
        before = model.forward_teacher_forced(batch).p_gen.data[0, 0].copy()
        model.embeddings.token.data[7, 3] += 0.5
        after = model.forward_teacher_forced(batch).p_gen.data[0, 0]
        assert before[7] != after[7]

    def test_end_to_end_gradient_check(self, rng):
        model = ApeModel(tiny_config(), seed=16)
        batch = toy_batch(rng, b=1, i=3, k=3, j=3)
        probe = [
            model.params["emb.token"],
            model.params["predictor.w_s"],
            model.params["encoder.0.attn.wq"],
            model.params["decoder.0.cross0.wk"],
            model.params["copynet.wu"],
        ]

        def loss():
            trace = model.forward_teacher_forced(batch)
            mask = T.tensor(batch.target_mask.astype(np.float64))
            logp = T.log(T.maximum(T.gather_last(trace.p_final, batch.targets), 1e-9))
            main = T.tsum(logp * mask) * -1.0
            aux = T.tsum(trace.s) + T.tsum(trace.copy_mass)
            return main + 0.3 * aux

        check_gradients(loss, probe, rtol=1e-3, atol=1e-6)


class TestDecodeStep:
    def test_requires_bos(self, rng):
        model = ApeModel(tiny_config(), seed=17)
        batch = toy_batch(rng, b=1)
        enc = model.encode(batch.src_ids, batch.mt_ids, None, batch.src_mask, batch.mt_mask)
        with pytest.raises(ContractError):
            model.decode_step(np.array([[5, 6]]), enc, None, batch.mt_ids)

    def test_empty_memory_rejected(self, rng):
        model = ApeModel(tiny_config(), seed=18)
        from apecopy.model import EncodedInput

        enc = EncodedInput(memories=[], h_mt=None, mt_mask=None, src_len=0)
        with pytest.raises(ContractError):
            model.decode_hidden(np.array([[1]]), enc)
