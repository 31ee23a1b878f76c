"""Layer forward values and hand-written backward passes.

Gradient correctness is established two ways: hand-derivable closed forms for
the simple cases, and central finite differences (float64 probes through the
float32 weights) for every layer type.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sketchlab.errors import ConfigError, DimensionError, StateError, ValidationError
from sketchlab.gradcheck import gradient_check
from sketchlab.layers import (
    LayerNorm,
    Linear,
    MultiHeadAttention,
    TokenEmbedding,
    TransformerBlock,
    attention_forward,
    gelu,
    gelu_grad,
    linear_forward,
    softmax,
)


class TestLinear:
    def test_zero_weight_broadcasts_bias(self):
        lin = Linear(3, 1, name="lin")
        lin.weight.value[...] = 0.0
        lin.bias.value[...] = 7.0
        out = linear_forward(lin, np.ones((4, 3), dtype=np.float32))
        assert np.array_equal(out, np.full((4, 1), 7.0, dtype=np.float32))

    def test_matches_matmul_definition(self, rng):
        lin = Linear(4, 3, rng=rng)
        x = rng.normal(size=(5, 4)).astype(np.float32)
        want = x @ lin.weight.value.T + lin.bias.value
        assert np.allclose(lin(x), want, atol=1e-6)

    def test_weight_grad_is_broadcast_of_input(self):
        # loss = sum(y) means dL/dW[j, :] = column sums of x
        lin = Linear(3, 2, name="lin")
        x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], dtype=np.float32)
        lin.forward(x)
        lin.backward(np.ones((2, 2), dtype=np.float32))
        want = np.tile(x.sum(axis=0), (2, 1))
        assert np.allclose(lin.weight.grad, want)
        assert np.allclose(lin.bias.grad, [2.0, 2.0])

    def test_backward_before_forward_raises(self):
        with pytest.raises(StateError):
            Linear(3, 2).backward(np.zeros((1, 2), dtype=np.float32))

    def test_shape_validation(self):
        lin = Linear(3, 2)
        with pytest.raises(DimensionError):
            lin.forward(np.zeros((4, 5), dtype=np.float32))
        with pytest.raises(ConfigError):
            Linear(0, 2)


class TestGelu:
    def test_known_values(self):
        assert gelu(np.float32(0.0)) == 0.0
        assert float(gelu(np.float32(1.0))) == pytest.approx(0.841192, abs=1e-5)
        assert float(gelu(np.float32(-1.0))) == pytest.approx(-0.158808, abs=1e-5)

    def test_odd_part_is_half_x(self):
        # gelu(x) - gelu(-x) = x exactly, any x (the tanh terms cancel)
        x = np.linspace(-3, 3, 13, dtype=np.float32)
        assert np.allclose(gelu(x) - gelu(-x), x, atol=1e-6)

    def test_grad_matches_finite_difference(self):
        x = np.linspace(-4, 4, 33)
        eps = 1e-6
        fd = (gelu(x + eps) - gelu(x - eps)) / (2 * eps)
        assert np.allclose(gelu_grad(x), fd, atol=1e-4)


class TestSoftmax:
    @given(
        hnp.arrays(
            np.float64,
            st.tuples(st.integers(1, 4), st.integers(1, 6)),
            elements=st.floats(-50, 50),
        )
    )
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one(self, x):
        rows = softmax(x, axis=-1)
        assert np.all(np.abs(rows.sum(axis=-1) - 1.0) < 1e-5)
        assert np.all(rows >= 0)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(3, 5))
        assert np.allclose(softmax(x), softmax(x + 100.0), atol=1e-12)

    def test_masked_keys_underflow_to_exact_zero(self):
        scores = np.array([[1.0, 2.0, -1e9]], dtype=np.float32)
        probs = softmax(scores, axis=-1)
        assert probs[0, 2] == 0.0
        assert probs[0, :2].sum() == pytest.approx(1.0, abs=1e-6)


class TestAttention:
    def test_single_key_returns_value_through_identity(self):
        attn = MultiHeadAttention(2, 1, name="attn")
        for proj in attn.projections().values():
            proj.weight.value[...] = np.eye(2, dtype=np.float32)
        out = attention_forward(attn, np.array([[1.0, 0.0]], dtype=np.float32))
        assert np.allclose(out, [[1.0, 0.0]], atol=1e-6)

    def test_equal_values_give_their_convex_combination(self):
        attn = MultiHeadAttention(2, 1, name="attn")
        for proj in attn.projections().values():
            proj.weight.value[...] = np.eye(2, dtype=np.float32)
        q = np.array([[0.3, -0.7], [2.0, 2.0]], dtype=np.float32)
        attn.forward(np.array([[2.0, 2.0], [2.0, 2.0]], dtype=np.float32))
        out = attention_forward(attn, np.array([[2.0, 2.0], [2.0, 2.0]], dtype=np.float32))
        assert np.allclose(out, [[2.0, 2.0], [2.0, 2.0]], atol=1e-5)

    def test_two_token_case_matches_direct_formula(self, rng):
        d, heads = 4, 1
        attn = MultiHeadAttention(d, heads, rng=rng, name="attn")
        x = rng.normal(size=(2, d)).astype(np.float32)
        got = attention_forward(attn, x)

        q = x @ attn.q_proj.weight.value.T
        k = x @ attn.k_proj.weight.value.T
        v = x @ attn.v_proj.weight.value.T
        scores = (q @ k.T) / np.sqrt(d)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        want = (probs @ v) @ attn.o_proj.weight.value.T
        assert np.allclose(got, want, atol=1e-5)

    def test_attention_rows_sum_to_one(self, rng):
        attn = MultiHeadAttention(8, 2, rng=rng)
        attn.forward(rng.normal(size=(5, 8)).astype(np.float32))
        sums = attn.last_probs.sum(axis=-1)
        assert np.all(np.abs(sums - 1.0) < 1e-5)

    def test_key_mask_blocks_padded_positions(self, rng):
        attn = MultiHeadAttention(8, 2, rng=rng)
        x = rng.normal(size=(1, 4, 8)).astype(np.float32)
        mask = np.array([[True, True, False, False]])
        attn.forward(x, key_mask=mask)
        assert np.all(attn.last_probs[..., 2:] == 0.0)

    def test_cross_attention_requires_kv(self, rng):
        attn = MultiHeadAttention(8, 2, mode="cross", rng=rng)
        with pytest.raises(ValidationError):
            attn.forward(rng.normal(size=(3, 8)).astype(np.float32))

    def test_self_attention_rejects_foreign_kv(self, rng):
        attn = MultiHeadAttention(8, 2, mode="self", rng=rng)
        x = rng.normal(size=(3, 8)).astype(np.float32)
        with pytest.raises(ValidationError):
            attn.forward(x, x + 1.0)

    def test_empty_key_sequence_rejected(self, rng):
        attn = MultiHeadAttention(8, 2, mode="cross", rng=rng)
        q = rng.normal(size=(1, 3, 8)).astype(np.float32)
        with pytest.raises(ValidationError):
            attn.forward(q, np.zeros((1, 0, 8), dtype=np.float32))

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention(8, 3)


class TestTokenEmbedding:
    def test_lookup_and_scatter_add(self):
        emb = TokenEmbedding(5, 3, name="emb")
        ids = np.array([[0, 2, 2]])
        out = emb.forward(ids)
        assert out.shape == (1, 3, 3)
        d = np.ones((1, 3, 3), dtype=np.float32)
        emb.backward(d)
        # id 2 appears twice: its row accumulates twice
        assert np.allclose(emb.weight.grad[2], 2.0)
        assert np.allclose(emb.weight.grad[0], 1.0)
        assert np.allclose(emb.weight.grad[1], 0.0)

    def test_out_of_range_ids_rejected(self):
        emb = TokenEmbedding(5, 3)
        with pytest.raises(ValidationError):
            emb.forward(np.array([[5]]))


class TestDeterminism:
    def test_same_seed_same_outputs(self):
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(9)
            blk = TransformerBlock(8, 2, rng=rng)
            x = np.random.default_rng(1).normal(size=(1, 3, 8)).astype(np.float32)
            outs.append(blk.forward(x))
        assert np.array_equal(outs[0], outs[1])


def check_fragment(params, loss_fn):
    report = gradient_check(params, loss_fn)
    assert report.passed, f"\n{report}"
    assert report.max_rel_error < 1e-3


class TestFiniteDifferences:
    """Every layer type, probed in float64 (weights stay float32)."""

    def test_linear(self, rng):
        lin = Linear(4, 3, rng=rng)
        x = rng.normal(size=(5, 4))
        w = rng.normal(size=(5, 3))

        def loss():
            y = lin.forward(x)
            lin.backward(w)
            return float((y * w).sum())

        check_fragment(lin.parameters(), loss)

    def test_layernorm(self, rng):
        ln = LayerNorm(6)
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(4, 6))

        def loss():
            y = ln.forward(x)
            ln.backward(w)
            return float((y * w).sum())

        check_fragment(ln.parameters(), loss)

    def test_token_embedding(self, rng):
        emb = TokenEmbedding(11, 5, rng=rng)
        ids = np.array([[1, 4, 4, 9], [0, 2, 10, 3]])
        w = rng.normal(size=(2, 4, 5))

        def loss():
            y = emb.forward(ids)
            emb.backward(w)
            return float((y * w).sum())

        check_fragment(emb.parameters(), loss)

    def test_self_attention(self, rng):
        attn = MultiHeadAttention(8, 2, rng=rng)
        x = rng.normal(size=(3, 8))
        w = rng.normal(size=(3, 8))

        def loss():
            y = attn.forward(x)
            attn.backward(w)
            return float((y * w).sum())

        check_fragment(attn.parameters(), loss)

    def test_cross_attention(self, rng):
        attn = MultiHeadAttention(8, 2, mode="cross", rng=rng)
        q = rng.normal(size=(3, 8))
        kv = rng.normal(size=(4, 8))
        w = rng.normal(size=(3, 8))

        def loss():
            y = attn.forward(q, kv)
            attn.backward(w)
            return float((y * w).sum())

        check_fragment(attn.parameters(), loss)

    def test_masked_attention(self, rng):
        attn = MultiHeadAttention(8, 2, rng=rng)
        x = rng.normal(size=(2, 4, 8))
        mask = np.array([[True, True, True, False], [True, True, False, False]])
        w = rng.normal(size=(2, 4, 8))

        def loss():
            y = attn.forward(x, key_mask=mask)
            attn.backward(w)
            return float((y * w).sum())

        check_fragment(attn.parameters(), loss)

    def test_transformer_block_self(self, rng):
        blk = TransformerBlock(8, 2, rng=rng)
        x = rng.normal(size=(1, 3, 8))
        w = rng.normal(size=(1, 3, 8))

        def loss():
            y = blk.forward(x)
            blk.backward(w)
            return float((y * w).sum())

        check_fragment(blk.parameters(), loss)

    def test_transformer_block_cross(self, rng):
        blk = TransformerBlock(8, 2, mode="cross", rng=rng)
        x = rng.normal(size=(1, 3, 8))
        kv = rng.normal(size=(1, 4, 8))
        w = rng.normal(size=(1, 3, 8))

        def loss():
            y = blk.forward(x, kv)
            blk.backward(w)
            return float((y * w).sum())

        check_fragment(blk.parameters(), loss)
