import math

import numpy as np
import numpy.testing as npt
import pytest

from relcap import tensor as T
from relcap.errors import ConfigError, DimensionError, NumericError, UsageError


def f64(x):
    return T.tensor(x, dtype=np.float64)


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Independent finite-difference oracle: df/dx of scalar f at x."""
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    grad = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return out


class TestMatmul:
    def test_identity(self):
        a = T.tensor(np.eye(2))
        b = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        npt.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_hand_product(self):
        a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        b = T.tensor([[0.0, 1.0], [1.0, 0.0]])
        npt.assert_array_equal(T.matmul(a, b).data, [[2.0, 1.0], [4.0, 3.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((2, 3))))

    def test_grad_of_sum_is_row_sums(self):
        # d/dA sum(A @ B) = matrix whose every row is the row-sums of B.
        rng = np.random.default_rng(0)
        a = T.param(rng.normal(size=(3, 4)), dtype=np.float64)
        b = T.param(rng.normal(size=(4, 5)), dtype=np.float64)
        with T.Tape() as tape:
            loss = T.sum_all(T.matmul(a, b))
        tape.backward(loss)
        expected = np.tile(b.data.sum(axis=1), (3, 1))
        npt.assert_allclose(a.grad, expected, rtol=1e-12)

        fd = central_diff(lambda: float(np.sum(a.data @ b.data)), a.data)
        npt.assert_allclose(a.grad, fd, rtol=1e-6, atol=1e-9)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(1)
        a = T.tensor(rng.normal(size=(4, 3, 5)), dtype=np.float64)
        b = T.tensor(rng.normal(size=(4, 5, 2)), dtype=np.float64)
        out = T.matmul(a, b).data
        for h in range(4):
            npt.assert_allclose(out[h], a.data[h] @ b.data[h], rtol=1e-12)


class TestSoftmaxRows:
    def test_uniform_logits(self):
        out = T.softmax_rows(T.tensor([[0.0, 0.0, 0.0]]))
        npt.assert_allclose(out.data, [[1 / 3] * 3], rtol=1e-6)

    def test_hand_exponentials(self):
        out = T.softmax_rows(T.tensor([[0.0, math.log(2.0)]], dtype=np.float64))
        npt.assert_allclose(out.data, [[1 / 3, 2 / 3]], rtol=1e-12)

    def test_stability_under_large_logits(self):
        out = T.softmax_rows(T.tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        npt.assert_allclose(out.data[0, 0], 1.0, atol=1e-12)

    def test_nan_input_rejected(self):
        with pytest.raises(NumericError):
            T.softmax_rows(T.tensor([[np.nan, 0.0]]))

    def test_rows_sum_to_one_property(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            m, n = rng.integers(1, 6), rng.integers(2, 7)
            x = T.tensor(rng.normal(scale=10, size=(m, n)), dtype=np.float64)
            sums = T.softmax_rows(x).data.sum(axis=-1)
            npt.assert_allclose(sums, 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_row_collapses_to_beta(self):
        x = f64([[5.0, 5.0, 5.0]])
        out = T.layer_norm(x, f64(np.ones(3)), f64(np.zeros(3)))
        npt.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        out = T.layer_norm(f64([[1.0, 3.0]]), f64(np.ones(2)), f64(np.zeros(2)))
        npt.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = T.param(rng.normal(size=(2, 5)), dtype=np.float64)
        gamma = T.param(rng.normal(size=5), dtype=np.float64)
        beta = T.param(rng.normal(size=5), dtype=np.float64)
        weights = rng.normal(size=(2, 5))

        def forward():
            return float((T.layer_norm(x, gamma, beta).data * weights).sum())

        with T.Tape() as tape:
            out = T.layer_norm(x, gamma, beta)
            loss = T.sum_all(T.mul(out, T.tensor(weights, dtype=np.float64)))
        tape.backward(loss)
        for p in (x, gamma, beta):
            fd = central_diff(forward, p.data)
            npt.assert_allclose(p.grad, fd, rtol=1e-4, atol=1e-8)


class TestPointwiseOps:
    def test_relu(self):
        npt.assert_array_equal(T.relu(T.tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_dropout_zero_rate_is_identity(self):
        x = T.tensor([1.0, 2.0, 3.0])
        assert T.dropout(x, 0.0, rng=1, train=True) is x

    def test_dropout_eval_identity_any_rate(self):
        x = T.tensor([1.0, 2.0, 3.0])
        assert T.dropout(x, 0.9, rng=1, train=False) is x

    def test_dropout_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            T.dropout(T.tensor([1.0]), 1.0, rng=1, train=True)

    def test_dropout_expectation_matches_input(self):
        # Inverted scaling: the mean over many masks recovers x within 2%.
        x = T.tensor(np.array([0.5, -2.0, 3.0, 1.0]), dtype=np.float64)
        acc = np.zeros(4)
        n = 10_000
        for seed in range(n):
            acc += T.dropout(x, 0.3, rng=seed, train=True).data
        npt.assert_allclose(acc / n, x.data, rtol=0.02)

    def test_embedding_lookup_and_grad(self):
        table = T.param(np.arange(12.0).reshape(4, 3), dtype=np.float64)
        out = T.embedding_lookup(table, [1, 1, 3])
        npt.assert_array_equal(out.data, table.data[[1, 1, 3]])
        with T.Tape() as tape:
            loss = T.sum_all(T.embedding_lookup(table, [1, 1, 3]))
        tape.backward(loss)
        expected = np.zeros((4, 3))
        expected[1] = 2.0  # repeated id accumulates
        expected[3] = 1.0
        npt.assert_array_equal(table.grad, expected)

    def test_concat_last_dim_roundtrip(self):
        a = T.param(np.ones((2, 2)), dtype=np.float64)
        b = T.param(np.full((2, 3), 2.0), dtype=np.float64)
        with T.Tape() as tape:
            cat = T.concat_last_dim([a, b])
            loss = T.sum_all(T.mul(cat, cat))
        assert cat.shape == (2, 5)
        tape.backward(loss)
        npt.assert_allclose(a.grad, 2 * a.data)
        npt.assert_allclose(b.grad, 2 * b.data)


class TestCrossEntropy:
    def test_uniform_logits_gives_log_vocab(self):
        logits = f64(np.zeros((3, 4)))
        loss = T.cross_entropy(logits, [0, 1, 2], pad_id=99)
        npt.assert_allclose(float(loss.data), math.log(4.0), rtol=1e-12)

    def test_confident_logits_near_zero_loss(self):
        loss = T.cross_entropy(f64([[10.0, 0.0, 0.0, 0.0]]), [0], pad_id=99)
        assert 0.0 < float(loss.data) < 1e-3

    def test_pad_positions_excluded(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(4, 6))
        base = T.cross_entropy(f64(logits[:2]), [1, 2], pad_id=0)
        padded = T.cross_entropy(f64(logits), [1, 2, 0, 0], pad_id=0)
        npt.assert_allclose(float(base.data), float(padded.data), rtol=1e-12)

    def test_all_pad_is_an_error(self):
        with pytest.raises(UsageError):
            T.cross_entropy(f64(np.zeros((2, 3))), [0, 0], pad_id=0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        logits = T.param(rng.normal(size=(3, 5)), dtype=np.float64)
        targets = [2, 0, 4]
        with T.Tape() as tape:
            loss = T.cross_entropy(logits, targets, pad_id=1)
        tape.backward(loss)
        fd = central_diff(
            lambda: float(T.cross_entropy(T.Tensor(logits.data.copy()), targets, pad_id=1).data),
            logits.data,
        )
        npt.assert_allclose(logits.grad, fd, rtol=1e-4, atol=1e-8)


class TestCombinedAttention:
    def test_constant_gate_reduces_to_softmax(self):
        rng = np.random.default_rng(2)
        a = f64(rng.normal(size=(4, 4)))
        gates = f64(np.full((4, 4), 3.7))
        combined = T.combined_attention(a, gates)
        npt.assert_allclose(combined.data, T.softmax_rows(a).data, atol=1e-6)

    def test_zero_gate_annihilates(self):
        a = f64([[0.3, -1.0, 2.0]])
        g = f64([[1.0, 0.0, 0.0]])
        out = T.combined_attention(a, g)
        npt.assert_allclose(out.data, [[1.0, 0.0, 0.0]], atol=1e-12)

    def test_hand_weighted_row(self):
        out = T.combined_attention(f64([[0.0, 0.0]]), f64([[1.0, 3.0]]))
        npt.assert_allclose(out.data, [[0.25, 0.75]], rtol=1e-9)

    def test_dead_row_falls_back_to_softmax(self):
        a = f64([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
        g = f64([[0.0, 0.0, 0.0], [1.0, 1.0, 2.0]])
        out = T.combined_attention(a, g)
        npt.assert_allclose(out.data[0], T.softmax_rows(f64([[1.0, 2.0, 3.0]])).data[0], atol=1e-12)
        assert out.fallback_rows == 1

    def test_rows_sum_to_one_with_partial_gates(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            n = rng.integers(2, 6)
            a = f64(rng.normal(scale=4, size=(n, n)))
            g = rng.uniform(size=(n, n))
            g[rng.random(size=(n, n)) < 0.3] = 0.0
            g[:, 0] = 0.5  # keep every row alive
            sums = T.combined_attention(a, f64(g)).data.sum(axis=-1)
            npt.assert_allclose(sums, 1.0, atol=1e-6)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(13)
        a = T.param(rng.normal(size=(3, 3)), dtype=np.float64)
        g = T.param(rng.uniform(0.1, 2.0, size=(3, 3)), dtype=np.float64)
        weights = rng.normal(size=(3, 3))

        def forward():
            out = T.combined_attention(T.Tensor(a.data.copy()), T.Tensor(g.data.copy()))
            return float((out.data * weights).sum())

        with T.Tape() as tape:
            out = T.combined_attention(a, g)
            loss = T.sum_all(T.mul(out, T.tensor(weights, dtype=np.float64)))
        tape.backward(loss)
        npt.assert_allclose(a.grad, central_diff(forward, a.data), rtol=1e-5, atol=1e-9)
        npt.assert_allclose(g.grad, central_diff(forward, g.data), rtol=1e-5, atol=1e-9)


class TestTapeAndGradCheck:
    def test_fanout_accumulates(self):
        x = T.param(np.array([1.0, 2.0, 3.0]), dtype=np.float64)
        with T.Tape() as tape:
            loss = T.add(T.sum_all(x), T.sum_all(x))
        tape.backward(loss)
        npt.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_backward_requires_scalar(self):
        x = T.param(np.ones((2, 2)), dtype=np.float64)
        with T.Tape() as tape:
            y = T.relu(x)
        with pytest.raises(UsageError):
            tape.backward(y)

    def test_grad_check_polynomial(self):
        x = T.param(np.array([0.5, -1.5, 2.0]), dtype=np.float64)
        report = T.grad_check(lambda: T.sum_all(T.mul(x, x)), {"x": x})
        assert report["passed"]
        assert report["max_rel_error"] < 1e-8

    def test_grad_check_rejects_float32(self):
        x = T.param(np.ones(3, dtype=np.float32))
        with pytest.raises(UsageError):
            T.grad_check(lambda: T.sum_all(x), {"x": x})

    def test_grad_check_rejects_nonscalar(self):
        x = T.param(np.ones(3), dtype=np.float64)
        with pytest.raises(UsageError):
            T.grad_check(lambda: T.relu(x), {"x": x})

    def test_random_ops_gradients_property(self):
        # Fused ops against finite differences on random small shapes, 64-bit.
        rng = np.random.default_rng(21)
        for trial in range(5):
            m, k, n = rng.integers(2, 5, size=3)
            a = T.param(rng.normal(size=(m, k)), dtype=np.float64)
            b = T.param(rng.normal(size=(k, n)), dtype=np.float64)
            gamma = T.param(rng.normal(size=n), dtype=np.float64)
            beta = T.param(rng.normal(size=n), dtype=np.float64)

            def model():
                h = T.relu(T.matmul(a, b))
                h = T.layer_norm(h, gamma, beta)
                return T.sum_all(T.softmax_rows(h))

            report = T.grad_check(model, {"a": a, "b": b, "gamma": gamma, "beta": beta})
            assert report["passed"], (trial, report["per_param"])
