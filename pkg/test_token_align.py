import math

import numpy as np
import pytest

import tensor_autodiff as ta
import token_align as tk
from data_pipeline import Label
from errors import ConfigError, ContractError, LengthError
from tensor_autodiff import Tensor


@pytest.fixture
def base():
    return tk.init_surrogate(seed=5, d_k=8, block_count=1, heads=2, vocab_size=16, context_cap=12)


@pytest.fixture
def model(base, rng):
    m = tk.build_model(rng, base, rank=2, alpha=4.0, dropout_p=0.0, token_count=3)
    for adapter in m.adapters.values():
        adapter.b.data = 0.1 * rng.standard_normal(adapter.b.shape)
    return m


PROMPT = (1, 4, 9, 2)


class TestCompressTokens:
    def test_uniform_identity_single_query_is_time_mean(self, rng):
        states = rng.standard_normal((10, 4))
        params = tk.CompressorParams(Tensor(rng.standard_normal((1, 4))), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        z = tk.compress_tokens(Tensor(states), params, uniform=True).z.data
        np.testing.assert_allclose(z[0], states.mean(axis=0), atol=1e-14)

    def test_single_state(self, rng):
        params = tk.init_compressor(rng, d_h=4, d_k=6, token_count=3)
        s = rng.standard_normal((1, 4))
        z = tk.compress_tokens(Tensor(s), params).z.data
        expected = s[0] @ params.proj_weight.data.T + params.proj_bias.data
        for token in z:
            np.testing.assert_allclose(token, expected, atol=1e-14)

    def test_matches_explicit_attention(self, rng):
        params = tk.init_compressor(rng, d_h=5, d_k=7, token_count=4)
        params.proj_bias.data = rng.standard_normal(7)
        s = rng.standard_normal((20, 5))
        q, w, b = params.queries.data, params.proj_weight.data, params.proj_bias.data
        expected = []
        for k in range(4):
            scores = np.array([q[k] @ s[t] / math.sqrt(5) for t in range(20)])
            weights = np.exp(scores) / np.exp(scores).sum()
            expected.append(w @ (weights @ s) + b)
        tokens = tk.compress_tokens(Tensor(s), params)
        assert (tokens.count, tokens.width) == (4, 7)
        np.testing.assert_allclose(tokens.z.data, expected, atol=1e-12)

    def test_mask_ignores_padding(self, rng):
        params = tk.init_compressor(rng, d_h=3, d_k=4, token_count=2)
        s = rng.standard_normal((8, 3))
        mask = np.array([True] * 5 + [False] * 3)
        padded = tk.compress_tokens(Tensor(s), params, mask=mask).z.data
        trimmed = tk.compress_tokens(Tensor(s[:5]), params).z.data
        np.testing.assert_allclose(padded, trimmed, atol=1e-12)

    def test_token_count_independent_of_length(self, rng):
        params = tk.init_compressor(rng, d_h=3, d_k=4, token_count=5)
        for T in (1, 17, 300):
            assert tk.compress_tokens(Tensor(rng.standard_normal((T, 3))), params).z.shape == (5, 4)

    def test_mean_pool_is_projected_mean(self, rng):
        params = tk.init_compressor(rng, d_h=3, d_k=4, token_count=5)
        s = rng.standard_normal((9, 3))
        z = tk.mean_pool_tokens(Tensor(s), params).z.data
        assert z.shape == (1, 4)
        np.testing.assert_allclose(z[0], s.mean(axis=0) @ params.proj_weight.data.T, atol=1e-14)

    def test_random_tokens_shape(self, rng):
        assert tk.random_tokens(rng, (2, 3, 4)).z.shape == (2, 3, 4)


class TestLora:
    def test_fresh_adapter_is_identity(self, rng):
        w = Tensor(rng.standard_normal((6, 5)))
        x = Tensor(rng.standard_normal((3, 5)))
        adapter = tk.init_lora(rng, 5, 6, rank=2)
        assert not np.any(adapter.b.data)
        np.testing.assert_array_equal(tk.lora_linear(x, w, adapter).data, ta.linear(x, w).data)

    def test_hand_low_rank_product(self):
        adapter = tk.LoraAdapter(Tensor([[1.0, 0.0]]), Tensor([[1.0], [0.0]]), alpha=1.0, dropout_p=0.0)
        y = tk.lora_linear(Tensor([3.0, 7.0]), Tensor(np.zeros((2, 2))), adapter)
        assert y.data.tolist() == [3.0, 0.0]

    def test_doubling_alpha_doubles_update(self, rng):
        a, b = rng.standard_normal((2, 5)), rng.standard_normal((4, 2))
        w = Tensor(np.zeros((4, 5)))
        x = Tensor(rng.standard_normal(5))
        once = tk.lora_linear(x, w, tk.LoraAdapter(Tensor(a), Tensor(b), alpha=3.0, dropout_p=0.0)).data
        twice = tk.lora_linear(x, w, tk.LoraAdapter(Tensor(a), Tensor(b), alpha=6.0, dropout_p=0.0)).data
        np.testing.assert_array_equal(twice, 2.0 * once)

    def test_rank_bounds(self, rng):
        with pytest.raises(ConfigError):
            tk.init_lora(rng, 4, 3, rank=4)
        with pytest.raises(ConfigError):
            tk.init_lora(rng, 4, 3, rank=0)

    def test_dropout_bounds(self, rng):
        with pytest.raises(ConfigError):
            tk.init_lora(rng, 4, 4, rank=2, dropout_p=1.0)

    def test_merged_weight_matches_adapter(self, rng):
        w = Tensor(rng.standard_normal((6, 5)))
        adapter = tk.init_lora(rng, 5, 6, rank=3)
        adapter.b.data = rng.standard_normal((6, 3))
        x = Tensor(rng.standard_normal((4, 5)))
        merged = ta.linear(x, tk.merge_adapter(w, adapter)).data
        np.testing.assert_allclose(tk.lora_linear(x, w, adapter).data, merged, atol=1e-12)

    def test_delta_rank_bounded(self, rng):
        adapter = tk.init_lora(rng, 16, 16, rank=3)
        adapter.b.data = rng.standard_normal((16, 3))
        assert np.linalg.matrix_rank(tk.effective_delta(adapter)) <= 3

    def test_dropout_only_while_training(self, rng):
        w = Tensor(np.zeros((4, 4)))
        adapter = tk.init_lora(rng, 4, 4, rank=2, dropout_p=0.5)
        adapter.b.data = rng.standard_normal((4, 2))
        x = Tensor(rng.standard_normal(4))
        inference = tk.lora_linear(x, w, adapter).data
        np.testing.assert_array_equal(tk.lora_linear(x, w, adapter, training=False, rng=rng).data, inference)
        trained = [tk.lora_linear(x, w, adapter, training=True, rng=ta.make_rng(s)).data for s in range(5)]
        assert any(not np.allclose(t, inference) for t in trained)


class TestSurrogate:
    def test_frozen_weights_do_not_require_grad(self, base):
        assert not any(t.requires_grad for t in base.parameters().values())

    def test_deterministic(self, model, rng):
        tokens = tk.BrainTokens(Tensor(rng.standard_normal((3, 8))))
        first = tk.surrogate_forward(tokens, PROMPT, model).data
        second = tk.surrogate_forward(tokens, PROMPT, model).data
        assert np.array_equal(first, second)

    def test_brain_tokens_are_an_unordered_set(self, model, rng):
        z = rng.standard_normal((3, 8))
        logits = tk.surrogate_forward(tk.BrainTokens(Tensor(z)), PROMPT, model).data
        permuted = tk.surrogate_forward(tk.BrainTokens(Tensor(z[[2, 0, 1]])), PROMPT, model).data
        np.testing.assert_allclose(permuted, logits, atol=1e-12)

    def test_brain_positions_break_the_symmetry(self, base, rng):
        m = tk.build_model(rng, base, rank=2, alpha=4.0, dropout_p=0.0, token_count=3, brain_positions=True)
        m.brain_positions.data = rng.standard_normal((3, 8))
        z = rng.standard_normal((3, 8))
        logits = tk.surrogate_forward(tk.BrainTokens(Tensor(z)), PROMPT, m).data
        permuted = tk.surrogate_forward(tk.BrainTokens(Tensor(z[[2, 0, 1]])), PROMPT, m).data
        assert not np.allclose(permuted, logits)

    def test_fresh_adapters_leave_logits_unchanged(self, base, rng):
        m = tk.build_model(rng, base, rank=2, alpha=4.0, dropout_p=0.0, token_count=3)
        bare = tk.SurrogateModel(base, m.head_weight, m.head_bias)
        tokens = tk.BrainTokens(Tensor(rng.standard_normal((3, 8))))
        with_adapters = tk.surrogate_forward(tokens, PROMPT, m).data
        without = tk.surrogate_forward(tokens, PROMPT, bare).data
        assert np.max(np.abs(with_adapters - without)) <= 1e-15

    def test_batched_matches_single(self, model, rng):
        z = rng.standard_normal((2, 3, 8))
        batched = tk.surrogate_forward(tk.BrainTokens(Tensor(z)), PROMPT, model).data
        assert batched.shape == (2, 2)
        for b in range(2):
            single = tk.surrogate_forward(tk.BrainTokens(Tensor(z[b])), PROMPT, model).data
            np.testing.assert_allclose(batched[b], single, atol=1e-12)

    def test_prompt_only(self, model):
        assert tk.surrogate_forward(None, PROMPT, model).shape == (2,)

    def test_context_overflow(self, model, rng):
        tokens = tk.BrainTokens(Tensor(rng.standard_normal((3, 8))))
        with pytest.raises(LengthError):
            tk.surrogate_forward(tokens, tuple(range(10)), model)

    def test_prompt_ids_checked(self, model):
        with pytest.raises(ContractError):
            tk.surrogate_forward(None, (1, 99), model)

    def test_gradients_match_finite_differences(self, model, rng):
        tokens = tk.BrainTokens(Tensor(rng.standard_normal((3, 8))))
        w = rng.standard_normal(2)
        params = {**model.adapter_parameters(), **model.head_parameters()}
        err = ta.finite_diff_check(lambda p: ta.sum(ta.mul(tk.surrogate_forward(tokens, PROMPT, model), Tensor(w))),
                                   params)
        assert err < 1e-4

    def test_adapter_names(self, model):
        assert set(model.adapter_parameters()) == {"lora.block0.query.A", "lora.block0.query.B",
                                                   "lora.block0.value.A", "lora.block0.value.B"}

    def test_unknown_target(self, base, rng):
        with pytest.raises(ConfigError):
            tk.build_model(rng, base, rank=2, targets=("query", "gate"))

    def test_seeded_weights_and_checkpoint_round_trip(self, base, tmp_path):
        again = tk.init_surrogate(seed=5, d_k=8, block_count=1, heads=2, vocab_size=16, context_cap=12)
        assert tk.frozen_checksum(again) == tk.frozen_checksum(base)
        ta.save_checkpoint(tmp_path / "surrogate.dyns", base.parameters())
        loaded = tk.FrozenSurrogate.from_arrays(ta.load_checkpoint(tmp_path / "surrogate.dyns"), heads=2)
        assert tk.frozen_checksum(loaded) == tk.frozen_checksum(base)

    def test_checksum_sees_every_weight(self, base):
        before = tk.frozen_checksum(base)
        base.blocks[0].ffn_out_bias.data = base.blocks[0].ffn_out_bias.data + 1e-12
        assert tk.frozen_checksum(base) != before


class TestDecisions:
    def test_tie_goes_to_tc(self):
        assert tk.classify(np.array([0.0, 0.0])) == (Label.TC, 0.5)

    def test_leaning_asd(self):
        label, confidence = tk.classify(np.log([58.0, 42.0]))
        assert label == Label.ASD
        assert confidence == pytest.approx(0.58, abs=1e-12)
        assert tk.summarize(label, confidence) == "Classification leaning toward ASD (58.0% confidence)."

    def test_confident_tc(self):
        label, confidence = tk.classify(Tensor([-5.0, 5.0]))
        assert label == Label.TC
        assert confidence == pytest.approx(0.9999546, abs=1e-7)

    def test_trainable_fraction(self):
        trainable = {"a": Tensor(np.ones(3))}
        frozen = {"w": Tensor(np.ones((3, 9)))}
        assert tk.trainable_fraction(trainable, frozen) == pytest.approx(0.1)

    def test_default_configuration_trains_under_ten_percent(self):
        base = tk.init_surrogate()
        lm = tk.build_model(ta.make_rng(0), base)
        trainable = {**lm.adapter_parameters(), **lm.head_parameters()}
        assert 0.0 < tk.trainable_fraction(trainable, base.parameters()) < 0.10
