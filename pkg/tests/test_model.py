# tests/test_model.py

import numpy as np
import pytest

from lrclone.config import ModelConfig
from lrclone.errors import ConfigError, InputError, ShapeError
from lrclone.model import (
    WeightSet,
    attention_forward,
    check_tokens,
    expected_shapes,
    init_teacher_weights,
    model_forward,
    rmsnorm,
    swiglu,
    weights_hash,
)
from lrclone.tensor import Tensor


def gqa_config(**kw):
    base = dict(num_layers=1, hidden_size=8, num_q_heads=4, num_kv_heads=2, head_dim=4, ffn_size=8, vocab_size=16)
    base.update(kw)
    return ModelConfig(**base)


def reference_attention(q, k, v, cfg):
    """Per-head loop: query head j reads kv head j // group_size."""
    b, s, _ = q.shape
    hd = cfg.head_dim
    q = q.reshape(b, s, cfg.num_q_heads, hd)
    k = k.reshape(b, s, cfg.num_kv_heads, hd)
    v = v.reshape(b, s, cfg.num_kv_heads, hd)
    out = np.zeros_like(q)
    future = np.triu(np.ones((s, s), dtype=bool), k=1)
    for j in range(cfg.num_q_heads):
        kv = j // cfg.group_size
        scores = q[:, :, j] @ k[:, :, kv].transpose(0, 2, 1) / np.sqrt(hd)
        scores = np.where(future, -np.inf, scores)
        p = np.exp(scores - scores.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        out[:, :, j] = p @ v[:, :, kv]
    return out.reshape(b, s, -1)


@pytest.mark.unit
class TestBlocks:
    def test_rmsnorm_example(self):
        x = Tensor([3.0, 4.0], dtype=np.float64)
        g = Tensor([1.0, 2.0], dtype=np.float64)
        np.testing.assert_allclose(rmsnorm(x, g, 0.0).data, [0.84853, 2.26274], atol=1e-5)

    def test_rmsnorm_gain_length_mismatch(self):
        with pytest.raises(ShapeError):
            rmsnorm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), 1e-5)

    def test_swiglu_shape_mismatch(self):
        with pytest.raises(ShapeError):
            swiglu(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 5))))

    def test_swiglu_zero_gate_is_zero(self):
        out = swiglu(Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 3))))
        assert np.all(out.data == 0)


@pytest.mark.unit
class TestAttention:
    def test_grouped_query_matches_per_head_loop(self):
        cfg = gqa_config()
        rng = np.random.default_rng(0)
        q = rng.standard_normal((2, 5, cfg.d_q))
        k = rng.standard_normal((2, 5, cfg.d_kv))
        v = rng.standard_normal((2, 5, cfg.d_kv))
        out = attention_forward(Tensor(q), Tensor(k), Tensor(v), None, cfg, rope=False)
        np.testing.assert_allclose(out.data, reference_attention(q, k, v, cfg), atol=1e-12)

    def test_rotary_depends_on_relative_position_only(self):
        cfg = gqa_config()
        rng = np.random.default_rng(1)
        q, k, v = (Tensor(rng.standard_normal((1, 6, d))) for d in (cfg.d_q, cfg.d_kv, cfg.d_kv))
        a = attention_forward(q, k, v, np.arange(6), cfg)
        b = attention_forward(q, k, v, np.arange(6) + 11, cfg)
        np.testing.assert_allclose(a.data, b.data, atol=1e-10)

    def test_first_position_returns_its_own_value(self):
        cfg = gqa_config(num_q_heads=2, num_kv_heads=2)
        rng = np.random.default_rng(2)
        q, k, v = (rng.standard_normal((1, 3, cfg.d_q)) for _ in range(3))
        out = attention_forward(Tensor(q), Tensor(k), Tensor(v), None, cfg)
        np.testing.assert_allclose(out.data[0, 0], v[0, 0], atol=1e-12)

    def test_kv_shape_checked(self):
        cfg = gqa_config()
        with pytest.raises(ShapeError):
            wide = Tensor(np.ones((1, 3, cfg.d_q)))
            attention_forward(wide, wide, wide, None, cfg)


@pytest.mark.unit
class TestModelForward:
    def test_bundle_layout(self, tiny):
        weights = init_teacher_weights(tiny.teacher, seed=0, dtype=np.float64)
        tokens = np.random.default_rng(0).integers(0, 256, size=(2, 7))
        bundle = model_forward(tokens, weights)
        cfg = tiny.teacher
        assert bundle.entry_count() == 7 * cfg.num_layers + 1
        assert bundle.logits.shape == (2, 7, cfg.vocab_size)
        assert bundle.h["q"][0].shape == (2, 7, cfg.d_q)
        assert bundle.h["k"][0].shape == (2, 7, cfg.d_kv)
        assert bundle.h["gate"][0].shape == (2, 7, cfg.ffn_size)
        assert bundle.o_ffn[-1].shape == (2, 7, cfg.hidden_size)
        assert [name for name, _ in bundle.entries()][:7] == [
            "layers.0.h_q", "layers.0.h_k", "layers.0.h_v", "layers.0.h_gate", "layers.0.h_up",
            "layers.0.o_attn", "layers.0.o_ffn",
        ]

    def test_future_tokens_do_not_leak(self, tiny):
        weights = init_teacher_weights(tiny.teacher, seed=3, dtype=np.float64)
        a = np.array([[1, 2, 3, 4, 5]])
        b = a.copy()
        b[0, -1] = 200
        ba, bb = model_forward(a, weights), model_forward(b, weights)
        for (name, ta), (_, tb) in zip(ba.entries(), bb.entries(), strict=True):
            np.testing.assert_allclose(ta.data[:, :-1], tb.data[:, :-1], atol=1e-12, err_msg=name)
            assert not np.array_equal(ta.data[:, -1], tb.data[:, -1]), name

    def test_one_dimensional_tokens_promoted(self, tiny):
        weights = init_teacher_weights(tiny.teacher)
        assert model_forward(np.array([1, 2, 3]), weights).logits.shape == (1, 3, 256)

    def test_out_of_vocab_token(self):
        with pytest.raises(InputError):
            check_tokens(np.array([[0, 256]]), 256)

    def test_float_tokens_rejected(self):
        with pytest.raises(InputError):
            check_tokens(np.array([[0.0, 1.0]]), 256)


@pytest.mark.unit
class TestWeightSet:
    def test_tied_teacher_aliases_head(self, tiny):
        weights = init_teacher_weights(tiny.teacher)
        assert weights.tied
        assert "lm_head" not in dict(weights.named_tensors())

    def test_untied_teacher_stores_head(self, tiny):
        cfg = ModelConfig.model_validate({**tiny.teacher.model_dump(), "tie_embeddings": False})
        weights = init_teacher_weights(cfg)
        assert not weights.tied
        assert list(expected_shapes(cfg))[-1] == "lm_head"
        weights.validate()

    def test_init_gains_are_one(self, tiny):
        weights = init_teacher_weights(tiny.teacher)
        assert np.all(weights.layers[0].attn_norm.data == 1)
        assert np.all(weights.final_norm.data == 1)

    def test_from_named_missing(self, tiny):
        tensors = {n: t.data for n, t in init_teacher_weights(tiny.teacher).named_tensors()}
        del tensors["layers.1.up"]
        with pytest.raises(ConfigError, match="layers.1.up"):
            WeightSet.from_named(tiny.teacher, tensors)

    def test_from_named_wrong_shape(self, tiny):
        tensors = {n: t.data for n, t in init_teacher_weights(tiny.teacher).named_tensors()}
        tensors["final_norm"] = np.ones(3, dtype=np.float32)
        with pytest.raises(ShapeError):
            WeightSet.from_named(tiny.teacher, tensors)

    def test_hash_tracks_values(self, tiny):
        weights = init_teacher_weights(tiny.teacher, seed=1)
        twin = weights.copy()
        assert weights_hash(weights) == weights_hash(twin)
        twin.layers[2].v.data[0, 0] += 1e-3
        assert weights_hash(weights) != weights_hash(twin)

    def test_same_seed_same_weights(self, tiny):
        first, second = init_teacher_weights(tiny.teacher, 5), init_teacher_weights(tiny.teacher, 5)
        assert weights_hash(first) == weights_hash(second)
