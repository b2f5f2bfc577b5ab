"""Tensor engine: forward semantics, backward rules, and the
finite-difference checker."""

import numpy as np
import pytest

import psformer.tensor as tc
from psformer import rng as rngmod
from psformer.errors import (ContractError, DegeneracyError, DimensionError,
                             NumericError)
from psformer.tensor import ComputeGraph, Tensor, grad_check


def rand(shape, seed=0):
    return rngmod.stream(seed, rngmod.GENERIC).normal(size=shape)


def pairwise_oracle(q, k):
    """Element-wise loop over all pairs, independent of the vectorized path."""
    out = np.empty((q.shape[0], k.shape[0]))
    for i in range(q.shape[0]):
        for j in range(k.shape[0]):
            out[i, j] = sum((q[i, c] - k[j, c]) ** 2 for c in range(q.shape[1]))
    return out


class TestMatmul:
    def test_identity(self):
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        out = tc.matmul(Tensor(np.eye(2)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_dot_product_by_hand(self):
        out = tc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_associativity(self):
        rng = rngmod.stream(1, rngmod.GENERIC)
        for _ in range(20):
            a, b, c = (Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(5, 6))),
                       Tensor(rng.normal(size=(6, 3))))
            left = tc.matmul(tc.matmul(a, b), c).data
            right = tc.matmul(a, tc.matmul(b, c)).data
            np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)

    def test_gradient_flows_to_both_inputs(self):
        a = Tensor(rand((3, 4)), requires_grad=True)
        b = Tensor(rand((4, 2), seed=1), requires_grad=True)
        with ComputeGraph() as g:
            loss = tc.sum_all(tc.matmul(a, b))
        g.backward(loss)
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


class TestPairwiseSqDist:
    def test_identical_point(self):
        q = Tensor([[1.0, 2.0]])
        np.testing.assert_array_equal(tc.pairwise_sq_dist(q, q).data, [[0.0]])

    def test_unit_separation(self):
        q = Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal(tc.pairwise_sq_dist(q, q).data,
                                      [[0.0, 1.0], [1.0, 0.0]])

    def test_matches_loop_oracle(self):
        q, k = rand((8, 3)), rand((8, 3), seed=1)
        out = tc.pairwise_sq_dist(Tensor(q), Tensor(k)).data
        np.testing.assert_allclose(out, pairwise_oracle(q, k), atol=1e-12)

    def test_self_distance_symmetric_zero_diagonal(self):
        q = Tensor(rand((10, 4)))
        d = tc.pairwise_sq_dist(q, q).data
        assert np.abs(np.diag(d)).max() <= 1e-12
        assert np.abs(d - d.T).max() <= 1e-12

    def test_feature_mismatch(self):
        with pytest.raises(DimensionError):
            tc.pairwise_sq_dist(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


class TestAffineMap:
    def test_identity_map(self):
        x = Tensor(rand((5, 3)))
        out = tc.affine_map(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_arithmetic(self):
        out = tc.affine_map(Tensor([[1.0, 1.0]]), Tensor(np.eye(2)), Tensor([2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            tc.affine_map(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))

    def test_three_axis_input(self):
        x = Tensor(rand((4, 5, 3)))
        w, b = Tensor(rand((3, 2), seed=1)), Tensor(rand(2, seed=2))
        out = tc.affine_map(x, w, b)
        assert out.shape == (4, 5, 2)
        np.testing.assert_allclose(out.data, x.data @ w.data + b.data)


class TestRelu:
    def test_values(self):
        out = tc.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        out = tc.relu(Tensor([-3.0, -0.5]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0])

    def test_gradient_mask(self):
        x = Tensor([3.0, -3.0], requires_grad=True)
        with ComputeGraph() as g:
            loss = tc.sum_all(tc.relu(x))
        g.backward(loss)
        np.testing.assert_array_equal(x.grad, [1.0, 0.0])


class TestGatherRows:
    def test_identity_gather(self):
        x = Tensor(rand((2, 3)))
        out = tc.gather_rows(x, np.array([[0], [1]]))
        assert out.shape == (2, 1, 3)
        np.testing.assert_array_equal(out.data[:, 0, :], x.data)

    def test_duplicate_indices_accumulate_gradient(self):
        x = Tensor(rand((3, 2)), requires_grad=True)
        with ComputeGraph() as g:
            loss = tc.sum_all(tc.gather_rows(x, np.array([0, 0])))
        g.backward(loss)
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [0.0, 0.0]])

    def test_out_of_range(self):
        x = Tensor(rand((2, 3)))
        with pytest.raises(IndexError):
            tc.gather_rows(x, np.array([0, 2]))

    def test_gradient_mass_conserved(self):
        rng = rngmod.stream(3, rngmod.GENERIC)
        for _ in range(20):
            n = int(rng.integers(2, 8))
            x = Tensor(rng.normal(size=(n, 3)), requires_grad=True)
            idx = rng.integers(0, n, size=(4, 2))
            upstream = rng.normal(size=(4, 2, 3))
            with ComputeGraph() as g:
                loss = tc.sum_all(tc.mul(tc.gather_rows(x, idx), Tensor(upstream)))
            g.backward(loss)
            assert x.grad.sum() == pytest.approx(upstream.sum(), rel=1e-12)


class TestReduceMax:
    def test_single_row(self):
        x = Tensor([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(tc.reduce_max_rows(x).data, [1.0, 2.0, 3.0])

    def test_columnwise_maximum(self):
        x = Tensor([[1.0, 5.0], [3.0, 2.0]])
        np.testing.assert_array_equal(tc.reduce_max_rows(x).data, [3.0, 5.0])

    def test_tie_routes_to_lowest_row(self):
        x = Tensor([[2.0], [2.0]], requires_grad=True)
        with ComputeGraph() as g:
            loss = tc.sum_all(tc.reduce_max_rows(x))
        g.backward(loss)
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0]])

    def test_empty_input(self):
        with pytest.raises(DimensionError):
            tc.reduce_max_rows(Tensor(np.zeros((0, 3))))

    def test_neighbor_max_ties_to_lowest(self):
        x = Tensor(np.array([[[1.0, 4.0], [1.0, 2.0]]]), requires_grad=True)
        with ComputeGraph() as g:
            loss = tc.sum_all(tc.reduce_max_neighbors(x))
        g.backward(loss)
        np.testing.assert_array_equal(x.grad, [[[1.0, 1.0], [0.0, 0.0]]])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(rand((2, 2)), requires_grad=True)
        with ComputeGraph() as g:
            loss = tc.sum_all(x)
        g.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_square_sum_analytic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with ComputeGraph() as g:
            loss = tc.sum_all(tc.mul(x, x))
        g.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(rand((2, 2)), requires_grad=True)
        with ComputeGraph() as g:
            y = tc.relu(x)
        with pytest.raises(ContractError):
            g.backward(y)

    def test_module_level_backward_uses_last_graph(self):
        x = Tensor([2.0], requires_grad=True)
        with ComputeGraph():
            loss = tc.sum_all(tc.mul(x, x))
        tc.backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0])

    def test_reused_tensor_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with ComputeGraph() as g:
            loss = tc.sum_all(tc.add(tc.mul(x, x), x))  # x^2 + x
        g.backward(loss)
        np.testing.assert_array_equal(x.grad, [7.0])


class TestNumericGuards:
    def test_nan_fails_fast(self):
        with pytest.raises(NumericError):
            tc.add(Tensor([np.nan]), Tensor([1.0]))

    def test_overflow_fails_fast(self):
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            tc.mul(Tensor([1e308]), Tensor([1e308]))

    def test_zero_row_normalization_degenerate(self):
        with pytest.raises(DegeneracyError):
            tc.normalize_rows(Tensor([[0.0, 0.0], [1.0, 1.0]]))


class TestSoftmaxAndNormalize:
    def test_softmax_rows_sum_to_one(self):
        x = Tensor(rand((5, 7)) * 10)
        out = tc.softmax_rows(x)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_cols_sum_to_one(self):
        x = Tensor(rand((5, 7)) * 10)
        out = tc.softmax_cols(x)
        np.testing.assert_allclose(out.data.sum(axis=0), 1.0, atol=1e-12)

    def test_softmax_stable_at_large_magnitudes(self):
        out = tc.softmax_rows(Tensor([[1e4, 1e4 + 1.0]]))
        assert np.isfinite(out.data).all()

    def test_normalize_rows(self):
        x = Tensor([[1.0, 3.0], [2.0, 2.0]])
        out = tc.normalize_rows(x)
        np.testing.assert_allclose(out.data, [[0.25, 0.75], [0.5, 0.5]])


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = tc.cross_entropy_logits(Tensor(np.zeros(4)), 1)
        assert float(loss.data) == pytest.approx(np.log(4.0), abs=1e-12)

    def test_one_hot_limit(self):
        loss = tc.cross_entropy_logits(Tensor([100.0, 0.0, 0.0]), 0)
        assert float(loss.data) < 1e-12

    def test_matches_naive_oracle(self):
        logits = rand(6)
        naive = -np.log(np.exp(logits)[2] / np.exp(logits).sum())
        loss = tc.cross_entropy_logits(Tensor(logits), 2)
        assert float(loss.data) == pytest.approx(naive, abs=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            tc.cross_entropy_logits(Tensor(np.zeros(3)), 3)

    def test_rows_matches_per_row_mean(self):
        logits = rand((4, 5))
        labels = np.array([0, 2, 4, 1])
        per_row = [float(tc.cross_entropy_logits(Tensor(logits[i]), labels[i]).data)
                   for i in range(4)]
        batched = float(tc.cross_entropy_rows(Tensor(logits), labels).data)
        assert batched == pytest.approx(np.mean(per_row), abs=1e-12)


class TestGradCheck:
    def test_linear_function_is_exact(self):
        x = Tensor(rand((3, 2)))
        err = grad_check(lambda t: tc.sum_all(tc.scale(t, 3.0)), x)
        assert err <= 1e-9

    def test_composite_graph(self):
        w = Tensor(rand((4, 4), seed=5))
        b = Tensor(rand(4, seed=6))

        def f(t):
            h = tc.relu(tc.affine_map(t, w, b))
            return tc.sum_all(tc.mul(h, h))

        assert grad_check(f, Tensor(rand((6, 4), seed=7))) < 1e-4

    def test_every_primitive_op(self):
        """Randomized finite-difference sweep across the op set."""
        rng = rngmod.stream(11, rngmod.GENERIC)
        other = Tensor(rng.normal(size=(5, 4)))
        weight = Tensor(rng.normal(size=(4, 4)))
        vec = Tensor(rng.normal(size=4))
        idx = rng.integers(0, 5, size=(3, 2))
        mix_g = Tensor(rng.normal(size=(3, 2, 4)))
        mix_m = Tensor(rng.normal(size=(5, 4)))
        half = Tensor(np.full((5, 4), 0.5))
        cases = {
            "matmul": lambda t: tc.sum_all(tc.matmul(t, tc.transpose(other))),
            "pairwise": lambda t: tc.sum_all(tc.mul(tc.pairwise_sq_dist(t, other),
                                                    Tensor(np.full((5, 5), 0.3)))),
            "affine": lambda t: tc.sum_all(tc.affine_map(t, weight, vec)),
            "relu": lambda t: tc.sum_all(tc.relu(t)),
            "gather": lambda t: tc.sum_all(tc.mul(tc.gather_rows(t, idx), mix_g)),
            "softmax_rows": lambda t: tc.sum_all(tc.mul(tc.softmax_rows(t), mix_m)),
            "softmax_cols": lambda t: tc.sum_all(tc.mul(tc.softmax_cols(t), mix_m)),
            "normalize_rows": lambda t: tc.sum_all(
                tc.mul(tc.normalize_rows(tc.add(tc.relu(t), half)), mix_m)),
            "max_rows": lambda t: tc.sum_all(tc.reduce_max_rows(t)),
            "cross_entropy": lambda t: tc.cross_entropy_rows(t, np.array([0, 1, 2, 3, 0])),
        }
        for name, f in cases.items():
            for trial in range(10):
                x = Tensor(rngmod.stream(trial, rngmod.GENERIC, 17).normal(size=(5, 4)) + 0.05)
                err = grad_check(f, x)
                assert err < 1e-4, f"{name} trial {trial}: {err}"

    def test_requires_positive_eps(self):
        with pytest.raises(ContractError):
            grad_check(lambda t: tc.sum_all(t), Tensor([1.0]), eps=0.0)
