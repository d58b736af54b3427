import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from outfitforge import tensor_core as tc

import oracles


def _rand_params(rng, d, inner=None):
    inner = inner or 4 * d
    P = tc.init_encoder_layer(rng, "L", d, inner)
    P.update(tc.init_transition(rng, "T", d, d))
    for k in P:                      # move norms off their trivial init
        if k.endswith(".g"):
            P[k] = rng.uniform(0.5, 1.5, size=P[k].shape)
        elif k.endswith(".b") and ".ln" in k:
            P[k] = rng.normal(scale=0.1, size=P[k].shape)
    return P


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tc.softmax(np.ones(3)), np.full(3, 1 / 3))

    @pytest.mark.parametrize("x", [-1e4, -3.0, 0.0, 7.5, 1e4])
    def test_single_element(self, x):
        assert tc.softmax(np.array([x]))[0] == 1.0

    def test_two_to_one_ratio(self):
        np.testing.assert_allclose(tc.softmax(np.array([math.log(2.0), 0.0])), [2 / 3, 1 / 3], atol=1e-15)

    def test_matches_oracle(self):
        z = np.random.default_rng(0).normal(size=9) * 5
        np.testing.assert_allclose(tc.softmax(z), oracles.softmax(z), rtol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e4, 1e4)))
    def test_sums_to_one_at_large_magnitude(self, z):
        p = tc.softmax(z)
        assert np.all(np.isfinite(p))
        assert abs(p.sum() - 1.0) <= 1e-6

    def test_mask_gives_exact_zero(self):
        p = tc.softmax(np.array([5.0, 1.0, 2.0]), mask=np.array([False, True, True]))
        assert p[0] == 0.0
        np.testing.assert_allclose(p[1:], oracles.softmax([1.0, 2.0]))

    @pytest.mark.parametrize("bad", [np.array([]), np.array([1.0, np.nan])])
    def test_rejects_empty_and_nan(self, bad):
        with pytest.raises(ValueError):
            tc.softmax(bad)


class TestLayerNorm:
    def test_constant_vector_is_zero(self):
        np.testing.assert_array_equal(tc.layer_norm(np.full(5, 3.7), np.ones(5), np.zeros(5)), np.zeros(5))

    def test_already_standardized(self):
        np.testing.assert_allclose(tc.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), epsilon=1e-12),
                                   [1.0, -1.0], atol=1e-11)

    def test_scale_and_shift(self):
        y = tc.layer_norm(np.array([2.0, 0.0]), np.array([3.0, 3.0]), np.array([1.0, 1.0]))
        np.testing.assert_allclose(y, [4.0, -2.0], atol=1e-4)
        np.testing.assert_allclose(y, oracles.layer_norm_row([2.0, 0.0], [3, 3], [1, 1]), rtol=1e-13)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            tc.layer_norm(np.ones(3), np.ones(2), np.zeros(3))

    def test_batched_rows_match_oracle(self):
        rng = np.random.default_rng(1)
        x, g, b = rng.normal(size=(2, 4, 6)), rng.normal(size=6), rng.normal(size=6)
        want = np.stack([oracles.layer_norm(m, g, b) for m in x])
        np.testing.assert_allclose(tc.layer_norm(x, g, b), want, rtol=1e-10, atol=1e-12)


class TestAttention:
    def test_identical_keys_give_uniform_weights(self):
        rng = np.random.default_rng(2)
        cfg = tc.AttentionConfig(4, 2)
        P = tc.init_attention(rng, "a", 4)
        P = {k.split(".")[-1]: v for k, v in P.items()}
        q = rng.normal(size=(3, 4))
        k = np.tile(rng.normal(size=(1, 4)), (5, 1))
        v = rng.normal(size=(5, 4))
        out, w = tc.multi_head_attention(q, k, v, cfg, P, return_weights=True)
        np.testing.assert_allclose(w.data, 0.2, rtol=1e-12)
        np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0) @ P["wv"] @ P["wo"], (3, 1)), rtol=1e-10)

    def test_causal_row_zero_sees_only_key_zero(self):
        rng = np.random.default_rng(3)
        cfg = tc.AttentionConfig(4, 2, causal=True)
        P = {k.split(".")[-1]: v for k, v in tc.init_attention(rng, "a", 4).items()}
        x = rng.normal(size=(5, 4))
        _, w = tc.multi_head_attention(x, x, x, cfg, P, return_weights=True)
        np.testing.assert_array_equal(w.data[:, 0, 0], 1.0)
        for t in range(5):
            assert np.all(w.data[:, t, t + 1:] == 0.0)

    @pytest.mark.parametrize("a,b", [(1.0, 0.0), (2.0, -1.0), (0.3, 0.3), (-4.0, 2.0)])
    def test_two_key_score_gap(self, a, b):
        cfg = tc.AttentionConfig(2, 1)
        eye = np.eye(2)
        P = {"wq": eye, "wk": eye, "wv": eye, "wo": eye}
        q = np.array([[1.0, 0.0]])
        k = np.array([[a, 0.0], [b, 0.0]])
        _, w = tc.multi_head_attention(q, k, k, cfg, P, return_weights=True)
        gap = (a - b) / math.sqrt(2)
        sig = 1.0 / (1.0 + math.exp(-gap))
        np.testing.assert_allclose(w.data[0, 0], [sig, 1 - sig], rtol=1e-12)

    @pytest.mark.parametrize("heads,causal", [(1, False), (2, False), (4, True), (2, True)])
    def test_matches_oracle(self, heads, causal):
        rng = np.random.default_rng(heads)
        cfg = tc.AttentionConfig(8, heads, causal)
        P = tc.init_attention(rng, "a", 8)
        q, kv = rng.normal(size=(4, 8)), rng.normal(size=(4 if causal else 6, 8))
        got = tc.multi_head_attention(q, kv, kv, cfg, {k.split(".")[-1]: v for k, v in P.items()}).data
        np.testing.assert_allclose(got, oracles.attention(q, kv, kv, P, "a", heads, causal), rtol=1e-9, atol=1e-12)

    def test_key_mask_equals_dropping_keys(self):
        rng = np.random.default_rng(4)
        cfg = tc.AttentionConfig(4, 2)
        P = {k.split(".")[-1]: v for k, v in tc.init_attention(rng, "a", 4).items()}
        q, kv = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        masked = tc.multi_head_attention(q, kv, kv, cfg, P, key_mask=np.array([1, 1, 0, 1, 0], bool)).data
        dropped = tc.multi_head_attention(q, kv[[0, 1, 3]], kv[[0, 1, 3]], cfg, P).data
        np.testing.assert_allclose(masked, dropped, rtol=1e-12, atol=1e-14)

    def test_dim_mismatch(self):
        cfg = tc.AttentionConfig(4, 2)
        P = {w: np.eye(4) for w in ("wq", "wk", "wv", "wo")}
        with pytest.raises(ValueError):
            tc.multi_head_attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)), cfg, P)

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            tc.AttentionConfig(6, 4)


class TestPffnAndTransition:
    def test_zero_input_zero_biases(self):
        rng = np.random.default_rng(5)
        P = {k.split(".")[-1]: v for k, v in tc.init_pffn(rng, "f", 4, 16).items()}
        P["b1"], P["b2"] = np.zeros(16), np.zeros(4)
        np.testing.assert_array_equal(tc.pffn(np.zeros((3, 4)), P).data, 0.0)

    def test_matches_oracle(self):
        rng = np.random.default_rng(6)
        P = tc.init_pffn(rng, "f", 8, 32)
        x = rng.normal(size=(2, 8))
        got = tc.pffn(x, {k.split(".")[-1]: v for k, v in P.items()}).data
        want = oracles.matvec_rows(oracles.relu(oracles.matvec_rows(x, P["f.w1"]) + P["f.b1"]), P["f.w2"]) + P["f.b2"]
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_dim_mismatch(self):
        P = {"w1": np.ones((4, 8)), "b1": np.zeros(8), "w2": np.ones((8, 4)), "b2": np.zeros(4)}
        with pytest.raises(ValueError):
            tc.pffn(np.ones((2, 5)), P)

    def test_encoder_layer_matches_oracle(self):
        rng = np.random.default_rng(7)
        P = _rand_params(rng, 8)
        x = rng.normal(size=(5, 8))
        got = tc.encoder_layer(tc.Tensor(x), P, "L", tc.AttentionConfig(8, 2)).data
        np.testing.assert_allclose(got, oracles.encoder_layer(x, P, "L", 2), rtol=1e-9, atol=1e-11)


class TestAutodiff:
    def test_linear_map_is_exact(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=7)
        err = tc.grad_check(lambda P: tc.tsum(P["w"] * x), {"w": rng.normal(size=7)})
        assert err <= 1e-10
        _, g = tc.value_and_grad(lambda P: tc.tsum(P["w"] * x), {"w": np.zeros(7)})
        np.testing.assert_array_equal(g["w"], x)

    def test_relu_positive_region(self):
        err = tc.grad_check(lambda P: tc.tsum(tc.relu(P["w"])), {"w": np.array([0.5, 1.0, 2.0])})
        assert err <= 1e-6

    def test_non_scalar_output_rejected(self):
        with pytest.raises(ValueError):
            tc.grad_check(lambda P: P["w"] * 2.0, {"w": np.ones(3)})

    @pytest.mark.parametrize("step", [1e-7, 1e-2])
    def test_step_bounds(self, step):
        with pytest.raises(ValueError):
            tc.grad_check(lambda P: tc.tsum(P["w"]), {"w": np.ones(2)}, step=step)

    def test_backward_without_tape(self):
        with pytest.raises(RuntimeError):
            tc.Tensor(1.0, requires_grad=True).backward()

    def test_shared_leaf_accumulates(self):
        _, g = tc.value_and_grad(lambda P: tc.tsum(P["w"] * P["w"] + P["w"]), {"w": np.array([1.0, -2.0])})
        np.testing.assert_allclose(g["w"], [3.0, -3.0])

    OPS = {
        "matmul_bcast": lambda P: tc.tsum(tc.relu(P["a"] @ P["b"] + P["c"])),
        "exp_log_sqrt": lambda P: tc.tsum(tc.log(tc.exp(P["a"] @ P["b"]) + 1.0) * tc.sqrt(P["c"] * P["c"] + 1.0)),
        "softmax": lambda P: tc.tsum(tc.softmax(P["a"] @ P["b"], axis=-1) * P["a"][:, :1]),
        "log_softmax": lambda P: tc.tmean(tc.log_softmax(P["a"] @ P["b"])[:, 0]),
        "layer_norm": lambda P: tc.tsum(tc.layer_norm(P["a"] @ P["b"], P["c"], P["c"] * 0.5) * P["a"][:, :1]),
        "reshape_transpose": lambda P: tc.tsum(tc.transpose(tc.reshape(P["a"], (2, 3, 2)), (1, 0, 2)) * 1.7),
        "take_concat": lambda P: tc.tsum(tc.concat([P["a"][1:], P["a"][:1] * 2.0], axis=0) @ P["b"]),
        "mean_neg": lambda P: -tc.tmean(P["a"] @ P["b"], axis=0).sum(),
    }

    @pytest.mark.parametrize("name", sorted(OPS))
    @pytest.mark.parametrize("seed", range(20))
    def test_op_gradients(self, name, seed):
        rng = np.random.default_rng(seed)
        params = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(3, 5)), "c": rng.normal(size=5)}
        if name == "reshape_transpose":
            params["a"] = rng.normal(size=(3, 4))
        assert tc.grad_check(self.OPS[name], params) <= 1e-3

    @pytest.mark.parametrize("seed", range(20))
    def test_attention_and_encoder_gradients(self, seed):
        rng = np.random.default_rng(seed)
        P = _rand_params(rng, 4, 8)
        x = rng.normal(size=(2, 3, 4))
        mask = np.array([[1, 1, 0], [1, 1, 1]], bool)
        cfg = tc.AttentionConfig(4, 2, causal=bool(seed % 2))

        def f(Q):
            h = tc.transition_layer(tc.Tensor(x), Q, "T")
            return tc.tsum(tc.encoder_layer(h, Q, "L", cfg, key_mask=mask) * x[..., :1])

        assert tc.grad_check(f, P) <= 1e-3

    def test_determinism(self):
        rng = np.random.default_rng(9)
        P = _rand_params(rng, 8)
        x = rng.normal(size=(5, 8))
        a = tc.value_and_grad(lambda Q: tc.tsum(tc.encoder_layer(tc.Tensor(x), Q, "L", tc.AttentionConfig(8, 2))), P)
        b = tc.value_and_grad(lambda Q: tc.tsum(tc.encoder_layer(tc.Tensor(x), Q, "L", tc.AttentionConfig(8, 2))), P)
        assert a[0] == b[0]
        for k in a[1]:
            assert np.array_equal(a[1][k], b[1][k])


class TestAdam:
    def test_minimizes_quadratic(self):
        params = {"w": np.array([3.0, -2.0])}
        opt = tc.Adam(params, lr=0.1)
        for _ in range(500):
            _, g = tc.value_and_grad(lambda P: tc.tsum(P["w"] * P["w"]), params)
            opt.step(g)
        assert np.all(np.abs(params["w"]) < 1e-2)

    def test_first_step_magnitude_is_lr(self):
        params = {"w": np.array([1.0, -5.0])}
        tc.Adam(params, lr=0.01).step({"w": np.array([4.0, -0.001])})
        np.testing.assert_allclose(params["w"], [0.99, -4.99], atol=1e-5)

    def test_rejects_bad_lr(self):
        with pytest.raises(ValueError):
            tc.Adam({"w": np.ones(1)}, lr=0.0)
