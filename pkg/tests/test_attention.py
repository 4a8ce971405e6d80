import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clora import numkit as nk
from clora.attention import AttentionWeights, cross_attention, group_mask, penalty, self_attention_qkv
from clora.lora import AdapterStack, freeze_task, new_task_pair


def brute_attention(q, k, v):
    """Straight-line single-head attention, one output row at a time."""
    d = k.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = [sum(q[i, a] * k[j, a] for a in range(d)) / math.sqrt(d) for j in range(k.shape[0])]
        top = max(logits)
        w = [math.exp(x - top) for x in logits]
        z = sum(w)
        for j in range(k.shape[0]):
            out[i] += (w[j] / z) * v[j]
    return out


def cross_weights(d_f, d_c, d, seed=0, trained=False):
    g = np.random.default_rng(seed)
    wk = AdapterStack("k", g.normal(size=(d_c, d)))
    wv = AdapterStack("v", g.normal(size=(d_c, d)))
    if trained:
        for s in (wk, wv):
            p = new_task_pair(s, 2, g)
            p.b = g.normal(size=p.b.shape)
            freeze_task(s)
    return AttentionWeights(g.normal(size=(d_f, d)), wk, wv)


def self_weights(d, seed=0):
    g = np.random.default_rng(seed)
    return AttentionWeights(*(AdapterStack(n, g.normal(size=(d, d))) for n in ("q", "k", "v")))


class TestCrossAttention:
    def test_single_token_returns_value_row(self):
        w = cross_weights(4, 3, 5)
        g = np.random.default_rng(1)
        f, c = g.normal(size=(6, 4)), g.normal(size=(1, 3))
        out = cross_attention(f, c, w)
        np.testing.assert_allclose(out, np.repeat(c @ w.w_v.w_init, 6, axis=0), rtol=0, atol=1e-14)

    def test_fresh_adapters_match_pretrained(self):
        w = cross_weights(4, 3, 4)
        g = np.random.default_rng(2)
        f, c = g.normal(size=(3, 4)), g.normal(size=(2, 3))
        plain = brute_attention(f @ w.w_q, c @ w.w_k.w_init, c @ w.w_v.w_init)
        for s in (w.w_k, w.w_v):
            new_task_pair(s, 2, 0)
        assert np.max(np.abs(cross_attention(f, c, w) - plain)) <= 1e-14

    def test_brute_force_oracle(self):
        w = cross_weights(4, 4, 4, seed=3, trained=True)
        g = np.random.default_rng(3)
        f, c = g.normal(size=(3, 4)), g.normal(size=(2, 4))
        k = c @ (w.w_k.w_init + w.w_k.cached_past_sum)
        v = c @ (w.w_v.w_init + w.w_v.cached_past_sum)
        assert np.max(np.abs(cross_attention(f, c, w) - brute_attention(f @ w.w_q, k, v))) <= 1e-12

    def test_shape_mismatch(self):
        w = cross_weights(4, 3, 4)
        with pytest.raises(nk.ShapeError):
            cross_attention(np.ones((2, 5)), np.ones((1, 3)), w)

    def test_output_dims_must_agree(self):
        with pytest.raises(nk.ShapeError):
            AttentionWeights(np.ones((4, 5)), AdapterStack("k", np.ones((3, 4))), AdapterStack("v", np.ones((3, 4))))

    def test_gradient_reaches_k_and_v_pairs(self):
        w = cross_weights(4, 3, 4, seed=4, trained=True)
        g = np.random.default_rng(4)
        f, c = g.normal(size=(3, 4)), g.normal(size=(3, 3))
        target = g.normal(size=(3, 4))
        point = {}
        for s in (w.w_k, w.w_v):
            p = new_task_pair(s, 2, g)
            point[s.site_id + ".A"], point[s.site_id + ".B"] = p.a, g.normal(size=p.b.shape)

        def loss(v):
            live = {"k": (v["k.A"], v["k.B"]), "v": (v["v.A"], v["v.B"])}
            return nk.frobenius_sq(nk.sub(cross_attention(f, c, w, live=live), target))

        assert nk.finite_diff_check(loss, point) <= 1e-5
        tape = nk.Tape()
        leaves = {k: tape.leaf(v, k) for k, v in point.items()}
        grads = tape.backward(loss(leaves))
        assert np.any(grads["k.B"] != 0) and np.any(grads["v.B"] != 0)

    @given(st.integers(0, 10_000), st.floats(-50, 50))
    def test_logit_shift_invariance(self, seed, shift):
        g = np.random.default_rng(seed)
        q, k, v = g.normal(size=(3, 4)), g.normal(size=(5, 4)), g.normal(size=(5, 2))
        logits = q @ k.T / 2.0
        shifted = logits + np.array([[shift], [0.0], [-shift]])
        a = nk.row_softmax(logits) @ v
        b = nk.row_softmax(shifted) @ v
        assert np.max(np.abs(a - b)) <= 1e-10


class TestSelfAttention:
    def test_single_row(self):
        w = self_weights(5)
        x = np.random.default_rng(0).normal(size=(1, 5))
        np.testing.assert_allclose(self_attention_qkv(x, w), x @ w.w_v.w_init, rtol=0, atol=1e-14)

    @given(st.integers(0, 10_000))
    def test_permutation_equivariant(self, seed):
        w = self_weights(4, seed)
        g = np.random.default_rng(seed)
        x = g.normal(size=(5, 4))
        perm = g.permutation(5)
        np.testing.assert_allclose(self_attention_qkv(x[perm], w), self_attention_qkv(x, w)[perm],
                                   rtol=0, atol=1e-12)

    def test_brute_force_oracle(self):
        w = self_weights(8, 1)
        x = np.random.default_rng(1).normal(size=(4, 8)) * 0.3
        expect = brute_attention(x @ w.w_q.w_init, x @ w.w_k.w_init, x @ w.w_v.w_init)
        assert np.max(np.abs(self_attention_qkv(x, w) - expect)) <= 1e-12

    def test_groups_do_not_mix(self):
        w = self_weights(4, 2)
        g = np.random.default_rng(2)
        a, b = g.normal(size=(3, 4)), g.normal(size=(2, 4))
        packed = self_attention_qkv(np.vstack([a, b]), w, groups=[0, 0, 0, 1, 1])
        np.testing.assert_allclose(packed[:3], self_attention_qkv(a, w), rtol=0, atol=1e-13)
        np.testing.assert_allclose(packed[3:], self_attention_qkv(b, w), rtol=0, atol=1e-13)
        assert group_mask([0, 1])[0, 1] == -np.inf

    def test_needs_adapted_query(self):
        with pytest.raises(nk.ShapeError):
            self_attention_qkv(np.ones((2, 4)), cross_weights(4, 4, 4))

    def test_all_three_sites_penalized(self):
        w = self_weights(4, 3)
        g = np.random.default_rng(3)
        live = {}
        tape = nk.Tape()
        for name, s in w.stacks().items():
            p = new_task_pair(s, 2, g)
            p.b = g.normal(size=p.b.shape)
            freeze_task(s)
            p = new_task_pair(s, 2, g)
            live[s.site_id] = (tape.leaf(p.a, name + ".A"), tape.leaf(g.normal(size=p.b.shape), name + ".B"))
        grads = tape.backward(penalty(w, live))
        assert all(np.any(grads[n + ".A"] != 0) for n in ("q", "k", "v"))
