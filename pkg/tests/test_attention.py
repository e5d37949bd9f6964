import numpy as np
import pytest

from helpers import check_grads
from pattn.attention import (AttentionFlags, AttentionParams, Mask,
                             attend_pos_cross, attend_pos_rel_self,
                             attend_pos_self, attend_rel_self, attend_vanilla,
                             multi_head, split_heads)
from pattn.positional import RelativeTable, sinusoidal
from pattn.tensor import ShapeError, Tensor, softmax

D = 8
HEADS = 2
RNG = np.random.default_rng(11)


@pytest.fixture
def params():
    return AttentionParams(D, HEADS, np.random.default_rng(0))


@pytest.fixture
def rel():
    return RelativeTable(max_len=16, head_dim=D // HEADS, rng=np.random.default_rng(1))


def rand_h(n, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((n, D)))


def pe(n):
    return sinusoidal(32, D).rows(n)


def naive_attention(h_q, h_kv_k, h_kv_v, params, rel_table=None, rel_max=None,
                    mask_bias=None):
    """Per-head loop oracle, independent of the vectorized path."""
    n_q = h_q.shape[0]
    w_q, w_k, w_v, w_o = (p.data for p in params.parameters())
    d_head = params.d_head
    out = np.zeros((n_q, D))
    for head in range(params.n_heads):
        sl = slice(head * d_head, (head + 1) * d_head)
        q = h_q @ w_q[:, sl]
        k = h_kv_k @ w_k[:, sl]
        v = h_kv_v @ w_v[:, sl]
        logits = q @ k.T
        if rel_table is not None:
            for i in range(n_q):
                for j in range(k.shape[0]):
                    logits[i, j] += q[i] @ rel_table[i - j + rel_max]
        logits = logits / np.sqrt(d_head)
        if mask_bias is not None:
            logits = logits + mask_bias
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        a = e / e.sum(axis=-1, keepdims=True)
        out[:, sl] = a @ v
    return out @ w_o


class TestVanilla:
    def test_single_key_collapses_to_value(self, params):
        h_q = rand_h(3, seed=2)
        h_kv = rand_h(1, seed=3)
        out = attend_vanilla(h_q, h_kv, params)
        expected = (h_kv.data @ params.w_v.data) @ params.w_o.data
        for row in out.data:
            np.testing.assert_allclose(row, expected[0], atol=1e-12)

    def test_key_value_permutation_invariance(self, params):
        h_q = rand_h(3, seed=4)
        h_kv = rand_h(5, seed=5)
        out = attend_vanilla(h_q, h_kv, params)
        perm = [3, 1, 4, 0, 2]
        out_p = attend_vanilla(h_q, Tensor(h_kv.data[perm]), params)
        np.testing.assert_allclose(out.data, out_p.data, atol=1e-12)

    def test_matches_naive_oracle(self, params):
        h = rand_h(3, seed=6)
        out = attend_vanilla(h, h, params)
        np.testing.assert_allclose(
            out.data, naive_attention(h.data, h.data, h.data, params), atol=1e-12)

    def test_self_permutation_equivariance(self, params):
        # unmasked self-attention commutes with input row permutation
        h = rand_h(5, seed=7)
        perm = [4, 2, 0, 1, 3]
        out = attend_vanilla(h, h, params).data
        out_p = attend_vanilla(Tensor(h.data[perm]), Tensor(h.data[perm]), params).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_mask_shape_mismatch(self, params):
        h = rand_h(3, seed=8)
        with pytest.raises(ShapeError):
            attend_vanilla(h, h, params, mask=Mask.none(2, 2))


class TestPosSelf:
    def test_zero_positions_reduce_to_vanilla(self, params):
        h = rand_h(4, seed=9)
        a = attend_pos_self(h, np.zeros((4, D)), params)
        b = attend_vanilla(h, h, params)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_permutation_witness(self, params):
        # with positions attached, permuting rows changes the (unpermuted) output
        h = rand_h(6, seed=10)
        perm = [5, 3, 1, 0, 4, 2]
        out = attend_pos_self(h, pe(6), params).data
        out_p = attend_pos_self(Tensor(h.data[perm]), pe(6), params).data
        assert np.abs(out_p - out[perm]).max() > 1e-6

    def test_grad_matches_finite_differences(self, params):
        h = Tensor(RNG.standard_normal((4, D)), requires_grad=True)
        w = RNG.standard_normal((4, D))
        check_grads(lambda: (attend_pos_self(h, pe(4), params) * w).sum(),
                    [h] + params.parameters())

    def test_short_position_table_rejected(self, params):
        with pytest.raises(ShapeError):
            attend_pos_self(rand_h(5), pe(3), params)


class TestPosCross:
    def test_zero_positions_reduce_to_vanilla_cross(self, params):
        h_t, h_s = rand_h(3, seed=11), rand_h(5, seed=12)
        a = attend_pos_cross(h_t, h_s, np.zeros((3, D)), np.zeros((5, D)), params)
        b = attend_vanilla(h_t, h_s, params)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_single_source_row(self, params):
        h_t, h_s = rand_h(4, seed=13), rand_h(1, seed=14)
        out = attend_pos_cross(h_t, h_s, pe(4), pe(1), params)
        expected = (h_s.data @ params.w_v.data) @ params.w_o.data
        for row in out.data:
            np.testing.assert_allclose(row, expected[0], atol=1e-12)

    def test_matches_naive_oracle(self, params):
        h_t, h_s = rand_h(3, seed=15), rand_h(4, seed=16)
        out = attend_pos_cross(h_t, h_s, pe(3), pe(4), params)
        naive = naive_attention(h_t.data + pe(3), h_s.data + pe(4), h_s.data, params)
        np.testing.assert_allclose(out.data, naive, atol=1e-12)


class TestRelSelf:
    def test_zero_table_reduces_to_vanilla(self, params, rel):
        rel.table.data[:] = 0.0
        h = rand_h(5, seed=17)
        a = attend_rel_self(h, params, rel)
        b = attend_vanilla(h, h, params)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_causal_first_row_ignores_future(self, params, rel):
        h = rand_h(5, seed=18)
        mask = Mask.causal(5)
        out = attend_rel_self(h, params, rel, mask).data
        perturbed = h.data.copy()
        perturbed[2:] += 10.0
        out_p = attend_rel_self(Tensor(perturbed), params, rel, mask).data
        np.testing.assert_allclose(out_p[0], out[0], atol=1e-12)

    def test_matches_naive_oracle(self, params, rel):
        h = rand_h(4, seed=19)
        out = attend_rel_self(h, params, rel)
        naive = naive_attention(h.data, h.data, h.data, params,
                                rel_table=rel.table.data, rel_max=rel.max_len)
        np.testing.assert_allclose(out.data, naive, atol=1e-12)


class TestPosRelSelf:
    def test_zero_table_equals_pos_self(self, params, rel):
        rel.table.data[:] = 0.0
        h = rand_h(4, seed=20)
        a = attend_pos_rel_self(h, pe(4), params, rel)
        b = attend_pos_self(h, pe(4), params)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_zero_positions_equals_rel_self(self, params, rel):
        h = rand_h(4, seed=21)
        a = attend_pos_rel_self(h, np.zeros((4, D)), params, rel)
        b = attend_rel_self(h, params, rel)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_grad_matches_finite_differences(self, params, rel):
        h = Tensor(RNG.standard_normal((3, D)), requires_grad=True)
        w = RNG.standard_normal((3, D))
        check_grads(
            lambda: (attend_pos_rel_self(h, pe(3), params, rel) * w).sum(),
            [h, rel.table] + params.parameters())

    def test_matches_naive_oracle(self, params, rel):
        h = rand_h(4, seed=22)
        out = attend_pos_rel_self(h, pe(4), params, rel)
        hp = h.data + pe(4)
        naive = naive_attention(hp, hp, h.data, params,
                                rel_table=rel.table.data, rel_max=rel.max_len)
        np.testing.assert_allclose(out.data, naive, atol=1e-12)


class TestMasks:
    def test_logit_shift_invariance(self):
        # adding a constant to a logit row leaves softmax unchanged; this is
        # what makes the -inf surrogate implementation sound
        rng = np.random.default_rng(23)
        x = rng.standard_normal((3, 6))
        a = softmax(Tensor(x), axis=-1).data
        b = softmax(Tensor(x + 17.5), axis=-1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_weights_are_distribution_over_unmasked(self, params):
        h = rand_h(4, seed=24)
        mask = Mask.causal(4)
        q = split_heads(h @ params.w_q, HEADS)
        k = split_heads(h @ params.w_k, HEADS)
        logits = (q @ k.transpose(0, 2, 1)) * (params.d_head ** -0.5)
        w = softmax(Tensor(logits.data + mask.bias[None]), axis=-1).data
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
        assert np.abs(np.triu(w[0], k=1)).max() < 1e-12

    def test_fully_masked_row_outputs_zero(self, params):
        h = rand_h(3, seed=25)
        mask = Mask.padding(3, [False, False, False])
        out = multi_head(h, h, h, params, mask)
        np.testing.assert_array_equal(out.data, np.zeros((3, D)))

    def test_causal_padding_combines(self):
        m = Mask.causal_padding([True, True, False])
        assert m.bias[0, 1] < 0 and m.bias[1, 0] == 0
        assert (m.bias[:, 2] < 0).all()


class TestFlags:
    def test_parse(self):
        f = AttentionFlags.parse("pos_cross,rel_self")
        assert f.names() == ["pos_cross", "rel_self"]
        assert AttentionFlags.parse("none").names() == []
        assert AttentionFlags.parse("all").names() == \
            ["pos_self_src", "pos_self_tgt", "pos_cross", "rel_self"]
        with pytest.raises(ValueError):
            AttentionFlags.parse("bogus")

    def test_defaults(self):
        assert AttentionFlags().names() == \
            ["pos_self_src", "pos_self_tgt", "pos_cross", "rel_self"]
        assert AttentionFlags.vanilla().names() == []
