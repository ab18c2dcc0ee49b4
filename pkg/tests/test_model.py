import numpy as np
import pytest

from tcakws import tensor as T
from tcakws.errors import ContractViolation
from tcakws.model import ModelConfig, TCANet, init_params
from tcakws.tensor import Tensor


def encoder_oracle(model, x):
    """Independent numpy re-derivation of the encoder chain (train-mode BN)."""
    P = {k: v.data.astype(np.float64) for k, v in model.params.items()}
    c = model.cfg

    def conv(x, w, b, stride):
        B, Tn, Cin = x.shape
        K, _, Cout = w.shape
        pad = (K - 1) // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        To = -(-Tn // stride)
        out = np.zeros((B, To, Cout))
        for t in range(To):
            for k in range(K):
                out[:, t] += xp[:, t * stride + k] @ w[k]
        return out + b

    def bn_relu(x, g, b):
        mu = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        xhat = (x - mu) / np.sqrt(var + 1e-5)
        return np.maximum(g * xhat + b, 0.0)

    h = bn_relu(conv(x.astype(np.float64), P["enc0.w"], P["enc0.b"], 2),
                P["enc0.bn.gamma"], P["enc0.bn.beta"])
    for i in range(1, c.n_layers):
        dw, pw = P[f"enc{i}.dw"], P[f"enc{i}.pw"]
        K = dw.shape[0]
        pad = (K - 1) // 2
        xp = np.pad(h, ((0, 0), (pad, pad), (0, 0)))
        dwe = np.zeros_like(h)
        for k in range(K):
            dwe += dw[k] * xp[:, k:k + h.shape[1], :]
        h = bn_relu(dwe @ pw + P[f"enc{i}.pwb"],
                    P[f"enc{i}.bn.gamma"], P[f"enc{i}.bn.beta"])
    return h


class TestEncoder:
    def test_zero_input_zero_output(self):
        m = TCANet(seed=0)
        x = Tensor(np.zeros((2, 100, 40), dtype=np.float32))
        assert np.all(m.encoder_forward(x, train=True, update_stats=False).data == 0)
        assert np.all(TCANet(seed=0).encoder_forward(x, train=False).data == 0)

    def test_shape_algebra(self):
        m = TCANet(seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(4, 100, 40)).astype(np.float32))
        assert m.encoder_forward(x, train=True).shape == (4, 50, 64)

    def test_bad_input_shape_raises(self):
        m = TCANet(seed=0)
        with pytest.raises(ContractViolation):
            m.encoder_forward(Tensor(np.zeros((1, 99, 40), dtype=np.float32)), train=False)
        with pytest.raises(ContractViolation):
            m.encoder_forward(Tensor(np.zeros((1, 100, 39), dtype=np.float32)), train=False)

    def test_matches_layer_by_layer_oracle(self):
        m = TCANet(seed=4)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 100, 40)).astype(np.float32)
        got = m.encoder_forward(Tensor(x), train=True, update_stats=False).data
        ref = encoder_oracle(m, x)
        np.testing.assert_allclose(got, ref, atol=2e-4)


class TestDecoder:
    def test_zero_qk_uniform_attention(self):
        m = TCANet(seed=0)
        m.params["dec.wq"].data = np.zeros((64, 64), dtype=np.float32)
        m.params["dec.wk"].data = np.zeros((64, 64), dtype=np.float32)
        rng = np.random.default_rng(1)
        e = rng.normal(size=(2, 50, 64)).astype(np.float32)
        out = m.decoder_forward(Tensor(e)).data
        # uniform softmax -> every frame is the time-mean through Wv, Wo
        ref = (e.mean(axis=1, keepdims=True) @ m.params["dec.wv"].data
               @ m.params["dec.wo"].data)
        np.testing.assert_allclose(out, np.broadcast_to(ref, out.shape), atol=1e-5)

    def test_attention_rows_sum_to_one(self):
        m = TCANet(seed=2)
        e = Tensor(np.random.default_rng(2).normal(size=(3, 50, 64)).astype(np.float32))
        att = m.attention_weights(e)
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-6)

    def test_single_head_dense_oracle(self):
        m = TCANet(ModelConfig(num_heads=1), seed=3)
        rng = np.random.default_rng(3)
        e = rng.normal(size=(1, 3, 64)).astype(np.float32) * 0.3
        got = m.decoder_forward(Tensor(e)).data
        # direct dense math, scaling by h_n = 64 exactly as configured
        P = {k: v.data.astype(np.float64) for k, v in m.params.items()}
        q, k_, v = e @ P["dec.wq"], e @ P["dec.wk"], e @ P["dec.wv"]
        scores = q[0] @ k_[0].T / 64.0
        w = np.exp(scores - scores.max(axis=-1, keepdims=True))
        w /= w.sum(axis=-1, keepdims=True)
        ref = (w @ v[0]) @ P["dec.wo"]
        np.testing.assert_allclose(got[0], ref, atol=1e-5)

    def test_multi_head_matches_bruteforce(self):
        m = TCANet(ModelConfig(num_heads=4), seed=5)
        rng = np.random.default_rng(5)
        e = rng.normal(size=(2, 7, 64)).astype(np.float32) * 0.3
        got = m.decoder_forward(Tensor(e)).data
        P = {k: v.data.astype(np.float64) for k, v in m.params.items()}
        d = 16
        outs = np.zeros((2, 7, 64))
        for b in range(2):
            q, k_, v = e[b] @ P["dec.wq"], e[b] @ P["dec.wk"], e[b] @ P["dec.wv"]
            ctx = []
            for h in range(4):
                sl = slice(h * d, (h + 1) * d)
                s = q[:, sl] @ k_[:, sl].T / d
                w = np.exp(s - s.max(axis=-1, keepdims=True))
                w /= w.sum(axis=-1, keepdims=True)
                ctx.append(w @ v[:, sl])
            outs[b] = np.concatenate(ctx, axis=1) @ P["dec.wo"]
        np.testing.assert_allclose(got, outs, atol=1e-5)

    def test_sqrt_scaling_flag(self):
        base = TCANet(ModelConfig(sqrt_scaling=False), seed=6)
        alt = TCANet(ModelConfig(sqrt_scaling=True), seed=6)
        e = Tensor(np.random.default_rng(6).normal(size=(1, 5, 64)).astype(np.float32))
        assert not np.allclose(base.decoder_forward(e).data,
                               alt.decoder_forward(e).data)

    def test_heads_must_divide_channels(self):
        with pytest.raises(ContractViolation):
            TCANet(ModelConfig(num_heads=5))


class TestClassify:
    def test_zero_weights_uniform(self):
        m = TCANet(seed=0)
        m.params["cls.w"].data = np.zeros((64, 12), dtype=np.float32)
        m.params["cls.b"].data = np.zeros(12, dtype=np.float32)
        d = Tensor(np.random.default_rng(0).normal(size=(3, 50, 64)).astype(np.float32))
        np.testing.assert_allclose(m.classify(d).data, 1 / 12, atol=1e-6)

    def test_rows_sum_to_one(self):
        m = TCANet(seed=1)
        d = Tensor(np.random.default_rng(1).normal(size=(5, 50, 64)).astype(np.float32))
        np.testing.assert_allclose(m.classify(d).data.sum(axis=1), 1.0, atol=1e-6)

    def test_logit_shift_invariance(self):
        m = TCANet(seed=2)
        d = Tensor(np.random.default_rng(2).normal(size=(4, 50, 64)).astype(np.float32))
        p0 = m.classify(d).data.copy()
        m.params["cls.b"].data = m.params["cls.b"].data + 3.0
        p1 = m.classify(d).data
        np.testing.assert_allclose(p0, p1, atol=1e-6)


class TestProjections:
    def test_wvc_zero_in_zero_out(self):
        m = TCANet(seed=0)
        z = Tensor(np.zeros((2, 50, 64), dtype=np.float32))
        assert np.all(m.wvc_projection(z).data == 0)
        assert np.all(m.siam_projection(z).data == 0)

    def test_shapes(self):
        m = TCANet(seed=0)
        e = Tensor(np.random.default_rng(0).normal(size=(3, 50, 64)).astype(np.float32))
        assert m.wvc_projection(e).shape == (3, 50, 768)
        assert m.siam_projection(e).shape == (3, 50, 128)

    def test_match_dense_oracle(self):
        m = TCANet(seed=7)
        rng = np.random.default_rng(7)
        e = rng.normal(size=(2, 5, 64)).astype(np.float32)
        w1 = m.params["wvc.w1"].data.astype(np.float64)
        w2 = m.params["wvc.w2"].data.astype(np.float64)
        ref = np.maximum(e.astype(np.float64) @ w1, 0) @ w2
        np.testing.assert_allclose(m.wvc_projection(Tensor(e)).data, ref, atol=1e-4)
        w3 = m.params["siam.w3"].data.astype(np.float64)
        w4 = m.params["siam.w4"].data.astype(np.float64)
        ref = np.maximum(e.astype(np.float64) @ w3, 0) @ w4
        np.testing.assert_allclose(m.siam_projection(Tensor(e)).data, ref, atol=1e-4)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = init_params(11), init_params(11)
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)

    def test_different_seed_differs(self):
        a, b = init_params(11), init_params(12)
        assert not np.array_equal(a.params["enc0.w"].data, b.params["enc0.w"].data)

    def test_parameter_count_band(self):
        c = TCANet(seed=0).parameter_counts()
        assert 55_000 <= c["model"] <= 80_000
        assert c["encoder"] == 37056
        assert c["decoder"] == 4 * 64 * 64
        assert c["classifier"] == 64 * 12 + 12
        assert c["siam_head"] == 64 * 128 + 128 * 128
        assert c["wvc_head"] == 64 * 128 + 128 * 768

    def test_all_finite_and_kaiming_scale(self):
        m = TCANet(seed=3)
        for p in m.params.values():
            assert np.all(np.isfinite(p.data))
        w = m.params["enc1.dw"].data          # fan_in = 9
        theory = np.sqrt(2.0 / 9.0)
        assert theory / 3 < w.std() < theory * 3
        w0 = m.params["enc0.w"].data          # fan_in = 3*40
        theory0 = np.sqrt(2.0 / 120.0)
        assert theory0 / 3 < w0.std() < theory0 * 3

    def test_bn_identity_and_zero_biases(self):
        m = TCANet(seed=0)
        assert np.all(m.params["enc0.bn.gamma"].data == 1)
        assert np.all(m.params["enc0.bn.beta"].data == 0)
        assert np.all(m.params["cls.b"].data == 0)

    def test_describe_mentions_counts(self):
        m = TCANet(seed=0)
        text = m.describe()
        assert "model parameters" in text
        assert str(m.parameter_counts()["model"]) in text
        assert "enc0.w" in text and "dec.wq" in text


class TestEndToEnd:
    @pytest.mark.parametrize("B", [1, 3])
    def test_shape_chain(self, B):
        m = TCANet(seed=0)
        x = Tensor(np.random.default_rng(B).normal(size=(B, 100, 40)).astype(np.float32))
        e = m.encoder_forward(x, train=False)
        d = m.decoder_forward(e)
        p = m.classify(d)
        assert e.shape == (B, 50, 64)
        assert d.shape == (B, 50, 64)
        assert p.shape == (B, 12)

    def test_siamese_weight_sharing(self):
        m = TCANet(seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 100, 40)).astype(np.float32))
        out1 = m.decoder_forward(m.encoder_forward(x, train=False)).data.copy()
        m.params["dec.wo"].data = m.params["dec.wo"].data * 1.1
        # both "branches" are the same object: a perturbation moves both outputs
        b1 = m.decoder_forward(m.encoder_forward(x, train=False)).data
        b2 = m.decoder_forward(m.encoder_forward(x, train=False)).data
        assert not np.allclose(out1, b1)
        np.testing.assert_array_equal(b1, b2)

    def test_state_roundtrip(self):
        m = TCANet(seed=9)
        x = Tensor(np.random.default_rng(1).normal(size=(2, 100, 40)).astype(np.float32))
        m.encoder_forward(x, train=True)     # move BN stats off init
        state = m.state_arrays()
        m2 = TCANet(seed=0)
        m2.load_state_arrays(state)
        for k in m.params:
            assert np.array_equal(m.params[k].data, m2.params[k].data)
        for k in m.bn_stats:
            assert np.array_equal(m.bn_stats[k].mean, m2.bn_stats[k].mean)

    def test_state_shape_mismatch_raises(self):
        m = TCANet(seed=0)
        state = m.state_arrays()
        state["cls.w"] = np.zeros((64, 13), dtype=np.float32)
        with pytest.raises(ContractViolation):
            TCANet(seed=0).load_state_arrays(state)
