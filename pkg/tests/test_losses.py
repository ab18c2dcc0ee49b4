import numpy as np
import pytest

from tcakws import losses as L
from tcakws import tensor as T
from tcakws.errors import ContractViolation
from tcakws.tensor import Tensor

from gradcheck import fd_check


def local_oracle(a, b, tau=0.5):
    """Exhaustive double-loop reference in float64."""
    a = a.reshape(-1, a.shape[-1]).astype(np.float64)
    b = b.reshape(-1, b.shape[-1]).astype(np.float64)
    na = a / (np.linalg.norm(a, axis=1, keepdims=True) + 1e-8)
    nb = b / (np.linalg.norm(b, axis=1, keepdims=True) + 1e-8)
    total = 0.0
    for i in range(len(na)):
        sims = np.array([float(na[i] @ nb[j]) for j in range(len(nb))]) / tau
        total += -np.log(np.exp(sims[i]) / np.exp(sims).sum())
    return total / len(na)


class TestCrossEntropy:
    def test_perfect_prediction_zero(self):
        p = Tensor(np.eye(12, dtype=np.float32)[[2, 5]])
        y = np.eye(12)[[2, 5]]
        assert L.cross_entropy(p, y).item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_is_ln12(self):
        p = Tensor(np.full((4, 12), 1 / 12, dtype=np.float32))
        y = np.eye(12)[[0, 3, 7, 11]]
        assert L.cross_entropy(p, y).item() == pytest.approx(np.log(12), abs=1e-6)

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(6, 12))
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        labels = rng.integers(0, 12, 6)
        y = np.eye(12)[labels]
        ref = -np.mean([np.log(p[i, labels[i]]) for i in range(6)])
        got = L.cross_entropy(Tensor(p.astype(np.float32)), y).item()
        assert got == pytest.approx(ref, rel=1e-5)

    def test_non_one_hot_rejected(self):
        p = Tensor(np.full((2, 12), 1 / 12, dtype=np.float32))
        y = np.zeros((2, 12))
        y[0, 0] = 0.5
        y[0, 1] = 0.5
        y[1, 2] = 1.0
        with pytest.raises(ContractViolation):
            L.cross_entropy(p, y)

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.full((2, 12), 1 / 12, dtype=np.float32))
        with pytest.raises(ContractViolation):
            L.cross_entropy(p, np.eye(12)[[1, 2, 3]])

    def test_nonnegative_and_clamped(self):
        p = np.full((1, 12), 1e-30, dtype=np.float32)
        p[0, 0] = 1.0
        y = np.eye(12)[[5]]   # true class has ~zero probability
        val = L.cross_entropy(Tensor(p), y).item()
        assert 0 <= val <= -np.log(1e-12) + 1e-3


class TestWvcLoss:
    def test_identical_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 768)).astype(np.float32))
        assert L.wvc_loss(x, Tensor(x.data.copy())).item() == 0.0

    def test_unit_difference(self):
        a = Tensor(np.zeros((2, 3, 768), dtype=np.float32))
        b = Tensor(np.ones((2, 3, 768), dtype=np.float32))
        assert L.wvc_loss(a, b).item() == pytest.approx(1.0, abs=1e-7)

    def test_matches_elementwise_oracle_and_symmetry(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 4, 768)).astype(np.float32)
        b = rng.normal(size=(2, 4, 768)).astype(np.float32)
        ref = np.mean((a.astype(np.float64) - b) ** 2)
        assert L.wvc_loss(Tensor(a), Tensor(b)).item() == pytest.approx(ref, rel=1e-5)
        assert L.wvc_loss(Tensor(b), Tensor(a)).item() == pytest.approx(ref, rel=1e-5)

    def test_frame_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            L.wvc_loss(Tensor(np.zeros((1, 50, 768), dtype=np.float32)),
                       Tensor(np.zeros((1, 49, 768), dtype=np.float32)))


class TestGlobalLoss:
    def test_identical_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 5, 128)).astype(np.float32))
        assert L.global_loss(x, Tensor(x.data.copy())).item() == 0.0

    def test_constant_case_128(self):
        a = Tensor(np.zeros((1, 4, 128), dtype=np.float32))
        b = Tensor(np.ones((1, 4, 128), dtype=np.float32))
        assert L.global_loss(a, b).item() == pytest.approx(128.0, abs=1e-5)

    def test_frame_permutation_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(2, 6, 128)).astype(np.float32)
        b = rng.normal(size=(2, 6, 128)).astype(np.float32)
        base = L.global_loss(Tensor(a), Tensor(b)).item()
        perm = rng.permutation(6)
        assert L.global_loss(Tensor(a), Tensor(b[:, perm])).item() == \
            pytest.approx(base, rel=1e-5)
        assert L.global_loss(Tensor(a[:, perm]), Tensor(b[:, perm])).item() == \
            pytest.approx(base, rel=1e-5)

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a = Tensor(rng.normal(size=(2, 4, 128)).astype(np.float32))
            b = Tensor(rng.normal(size=(2, 4, 128)).astype(np.float32))
            assert L.global_loss(a, b).item() >= 0


class TestLocalLoss:
    @pytest.mark.parametrize("B,F", [(1, 2), (2, 3)])
    def test_identical_vectors_log_bf(self, B, F):
        v = np.tile(np.array([0.2, -0.4, 0.1], dtype=np.float32), (B, F, 1))
        got = L.local_loss(Tensor(v), Tensor(v.copy())).item()
        assert got == pytest.approx(np.log(B * F), abs=1e-6)

    @pytest.mark.parametrize("B,F,seed", [(1, 3, 0), (2, 3, 1), (2, 5, 2)])
    def test_matches_bruteforce_oracle(self, B, F, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(B, F, 8)).astype(np.float32)
        b = rng.normal(size=(B, F, 8)).astype(np.float32)
        got = L.local_loss(Tensor(a), Tensor(b)).item()
        assert got == pytest.approx(local_oracle(a, b), abs=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a = Tensor(rng.normal(size=(2, 4, 16)).astype(np.float32))
            b = Tensor(rng.normal(size=(2, 4, 16)).astype(np.float32))
            assert L.local_loss(a, b).item() >= 0

    def test_rotation_invariance(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(2, 3, 16)).astype(np.float32)
        b = rng.normal(size=(2, 3, 16)).astype(np.float32)
        q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
        base = L.local_loss(Tensor(a), Tensor(b)).item()
        rot = L.local_loss(Tensor((a @ q).astype(np.float32)),
                           Tensor((b @ q).astype(np.float32))).item()
        assert rot == pytest.approx(base, abs=1e-5)

    def test_zero_vector_guarded(self):
        a = np.zeros((1, 2, 8), dtype=np.float32)
        b = np.ones((1, 2, 8), dtype=np.float32)
        val = L.local_loss(Tensor(a), Tensor(b)).item()
        assert np.isfinite(val)

    def test_symmetric_flag_averages_both_anchors(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(1, 4, 8)).astype(np.float32)
        b = rng.normal(size=(1, 4, 8)).astype(np.float32)
        sym = L.local_loss(Tensor(a), Tensor(b), symmetric=True).item()
        ref = 0.5 * (local_oracle(a, b) + local_oracle(b, a))
        assert sym == pytest.approx(ref, abs=1e-6)

    def test_temperature_matters(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.normal(size=(1, 4, 8)).astype(np.float32))
        b = Tensor(rng.normal(size=(1, 4, 8)).astype(np.float32))
        assert L.local_loss(a, b, tau=0.5).item() != \
            pytest.approx(L.local_loss(a, b, tau=0.1).item(), abs=1e-4)


class TestCombinations:
    def test_lgcsiam_is_component_sum(self):
        rng = np.random.default_rng(8)
        a = Tensor(rng.normal(size=(2, 4, 16)).astype(np.float32))
        b = Tensor(rng.normal(size=(2, 4, 16)).astype(np.float32))
        total = L.lgcsiam_loss(a, b).item()
        parts = L.global_loss(a, b).item() + L.local_loss(a, b).item()
        assert total == pytest.approx(parts, rel=1e-6)

    def test_lgcsiam_identical_inputs(self):
        v = np.tile(np.array([1.0, 2.0], dtype=np.float32), (2, 3, 1))
        got = L.lgcsiam_loss(Tensor(v), Tensor(v.copy())).item()
        assert got == pytest.approx(np.log(6), abs=1e-6)   # global term is 0

    def test_pretrain_weighted_sum(self):
        w = L.LossWeights()
        assert L.pretrain_loss(1.0, 2.0, w) == pytest.approx(1.9)
        assert L.pretrain_loss(0.0, 0.0, w) == 0.0
        rng = np.random.default_rng(9)
        for _ in range(5):
            a, b = rng.uniform(0, 5, 2)
            assert L.pretrain_loss(a, b, w) == pytest.approx(0.1 * a + 0.9 * b)

    def test_finetune_weighted_sum(self):
        w = L.LossWeights()
        assert L.finetune_loss(1.0, 1.0, 1.0, w) == pytest.approx(1.0)
        assert L.finetune_loss(np.log(12), 0.0, 0.0, w) == \
            pytest.approx(0.9 * np.log(12), abs=1e-9)
        rng = np.random.default_rng(10)
        for _ in range(5):
            a, b, c = rng.uniform(0, 5, 3)
            assert L.finetune_loss(a, b, c, w) == \
                pytest.approx(0.9 * a + 0.05 * b + 0.05 * c)

    def test_tensor_inputs_stay_differentiable(self):
        a = Tensor(np.float32(2.0), requires_grad=True)
        w = L.LossWeights()
        with T.Tape() as tape:
            out = L.finetune_loss(a, 0.0, 0.0, w)
        T.backward(out, tape)
        np.testing.assert_allclose(a.grad, 0.9)


class TestDifferentiability:
    def test_all_losses_gradcheck(self):
        rng = np.random.default_rng(11)
        d1 = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True, name="d1")
        d2 = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True, name="d2")
        te = Tensor(rng.normal(size=(2, 3, 8)))
        logits = Tensor(rng.normal(size=(2, 12)), requires_grad=True, name="logits")
        y = np.eye(12)[[3, 8]]

        checks = [
            (lambda: L.global_loss(d1, d2), [d1, d2]),
            (lambda: L.local_loss(d1, d2), [d1, d2]),
            (lambda: L.lgcsiam_loss(d1, d2), [d1, d2]),
            (lambda: L.wvc_loss(d1, te), [d1]),
            (lambda: L.cross_entropy(T.softmax(logits), y), [logits]),
        ]
        for fn, tensors in checks:
            n, _, failures = fd_check(fn, tensors, h=1e-5, rel_tol=1e-3,
                                      refine_h=1e-6)
            assert n > 0 and not failures, failures
