"""
Unit tests for the tensor engine.

Tests cover:
- Tensor construction and the recorded graph
- Forward values of the operations and their shape contracts
- Finite-difference agreement of every gradient rule
"""

import math

import numpy as np
import pytest

from twostream.errors import ContractError, DimensionError, NumericalError, TokenIndexError
from twostream.tensor import tensor_ops as ops
from twostream.tensor.tensor_base import Tensor, backward, grad_enabled, no_grad
from twostream.tensor.tensor_check import GRADCHECK_TOLERANCE, gradcheck, projected, run_op_suite


# -------------------------------------------------------------------------------------------------
# Fixtures
# -------------------------------------------------------------------------------------------------


@pytest.fixture
def matrix():
    return Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True, name="matrix")


# -------------------------------------------------------------------------------------------------
# Tensor and graph
# -------------------------------------------------------------------------------------------------


class TestTensor:
    """Construction, dtype handling and backward()."""

    def test_scalars_are_single_element_vectors(self):
        """A scalar is stored with shape (1,)."""
        t = Tensor(3.0)
        assert t.shape == (1,)
        assert t.item() == 3.0

    def test_integer_data_becomes_float64(self):
        """Integer input is converted to a floating point array."""
        assert Tensor([1, 2, 3]).dtype == np.float64
        assert Tensor([1, 2, 3], dtype="float32").dtype == np.float32

    def test_item_needs_one_element(self, matrix):
        """item() on a matrix is rejected."""
        with pytest.raises(ContractError):
            matrix.item()

    def test_non_finite_result_raises(self):
        """An op producing inf names itself in a NumericalError."""
        with pytest.raises(NumericalError, match="scale"):
            ops.scale(Tensor([1.0]), math.inf)

    def test_backward_of_product(self):
        """d/da sum(a * b) = b."""
        a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        b = Tensor([4.0, 5.0, 6.0], requires_grad=True)
        backward(ops.total(ops.mul(a, b)))
        np.testing.assert_allclose(a.grad, b.data)
        np.testing.assert_allclose(b.grad, a.data)

    def test_gradients_accumulate_over_reuse(self):
        """A tensor used twice receives both contributions."""
        a = Tensor([1.0, -2.0], requires_grad=True)
        backward(ops.total(ops.add(a, a)))
        np.testing.assert_allclose(a.grad, [2.0, 2.0])

    def test_backward_needs_a_scalar(self, matrix):
        """backward() of a non-scalar output is a contract violation."""
        with pytest.raises(ContractError):
            backward(ops.scale(matrix, 2.0))

    def test_constants_receive_no_gradient(self, matrix):
        """Only tensors that asked for a gradient get one."""
        weights = ops.constant(np.ones((2, 3)), like=matrix)
        backward(ops.total(ops.mul(matrix, weights)))
        assert weights.grad is None
        np.testing.assert_allclose(matrix.grad, np.ones((2, 3)))

    def test_no_grad_suspends_recording(self, matrix):
        """Inside no_grad() results are detached; recording resumes afterwards."""
        with no_grad():
            assert not grad_enabled()
            out = ops.scale(matrix, 2.0)
        assert grad_enabled()
        assert not out.requires_grad
        assert ops.scale(matrix, 2.0).requires_grad

    def test_graph_lists_operations_in_order(self, matrix):
        """The traversed graph records each op after its inputs."""
        graph = backward(ops.total(ops.tanh(matrix)))
        assert graph.operations() == ["tanh", "sum"]


# -------------------------------------------------------------------------------------------------
# Operations
# -------------------------------------------------------------------------------------------------


class TestOps:
    """Forward values and shape contracts."""

    def test_matmul_shape_mismatch(self):
        """Inner extents must agree."""
        with pytest.raises(DimensionError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_bias_broadcast(self, matrix):
        """A 1-d right operand broadcasts along the last axis only."""
        out = ops.add(matrix, Tensor([10.0, 20.0, 30.0]))
        np.testing.assert_allclose(out.data[1], [13.0, 24.0, 35.0])
        with pytest.raises(DimensionError):
            ops.add(matrix, Tensor([1.0, 2.0]))

    def test_bias_gradient_is_summed(self, matrix):
        """The broadcast operand's gradient sums over the rows."""
        bias = Tensor([0.0, 0.0, 0.0], requires_grad=True)
        backward(ops.total(ops.add(matrix, bias)))
        np.testing.assert_allclose(bias.grad, [2.0, 2.0, 2.0])

    def test_total_without_axis_is_scalar(self, matrix):
        """Summing everything yields shape (1,)."""
        out = ops.total(matrix)
        assert out.shape == (1,)
        assert out.item() == 15.0

    def test_mean(self, matrix):
        np.testing.assert_allclose(ops.mean(matrix, axis=1).data, [1.0, 4.0])
        assert ops.mean(matrix).item() == pytest.approx(2.5)

    def test_concat_slice_transpose(self, matrix):
        """Structural ops move values without changing them."""
        joined = ops.concat([matrix, matrix], axis=0)
        assert joined.shape == (4, 3)
        np.testing.assert_array_equal(ops.slice_axis(joined, 2, 4, axis=0).data, matrix.data)
        np.testing.assert_array_equal(ops.transpose(matrix).data, matrix.data.T)
        np.testing.assert_array_equal(ops.reshape(matrix, (3, 2)).data, matrix.data.reshape(3, 2))

    def test_concat_shape_mismatch(self, matrix):
        with pytest.raises(DimensionError):
            ops.concat([matrix, Tensor(np.ones((2, 2)))], axis=0)

    def test_softmax_rows_are_distributions(self, matrix):
        """Each row of a softmax is non-negative and sums to one."""
        probs = ops.softmax(ops.scale(matrix, 100.0), axis=-1).data
        assert np.all(probs >= 0.0)
        np.testing.assert_allclose(probs.sum(axis=-1), [1.0, 1.0])

    def test_log_softmax_matches_softmax(self, matrix):
        np.testing.assert_allclose(np.exp(ops.log_softmax(matrix).data), ops.softmax(matrix).data)

    def test_layer_norm_standardizes_rows(self):
        """With unit gamma and zero beta every row has mean 0 and variance 1."""
        x = Tensor(np.random.default_rng(3).standard_normal((4, 6)))
        out = ops.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        np.testing.assert_allclose(out.mean(axis=-1), np.zeros(4), atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), np.ones(4), atol=1e-9)

    def test_layer_norm_parameter_shapes(self, matrix):
        with pytest.raises(DimensionError):
            ops.layer_norm(matrix, Tensor(np.ones(2)), Tensor(np.zeros(3)))

    def test_gelu_and_tanh(self):
        """gelu(0) = 0, gelu(x) ≈ x for large x, tanh matches numpy."""
        x = Tensor([0.0, 10.0, -10.0])
        np.testing.assert_allclose(ops.gelu(x).data, [0.0, 10.0, 0.0], atol=1e-6)
        np.testing.assert_allclose(ops.tanh(x).data, np.tanh(x.data))

    def test_dropout_identity_cases(self, matrix):
        """p = 0, eval mode and a missing rng all leave the input untouched."""
        rng = np.random.default_rng(0)
        assert ops.dropout(matrix, 0.0, rng) is matrix
        assert ops.dropout(matrix, 0.5, rng, training=False) is matrix
        assert ops.dropout(matrix, 0.5, None) is matrix

    def test_dropout_rescales_kept_entries(self):
        """Kept entries are scaled by 1 / (1 - p), dropped ones are 0."""
        x = Tensor(np.ones((50, 50)))
        out = ops.dropout(x, 0.5, np.random.default_rng(1)).data
        assert set(np.unique(out).tolist()) <= {0.0, 2.0}
        assert 0.4 < float(np.mean(out == 0.0)) < 0.6

    def test_dropout_rate_range(self, matrix):
        with pytest.raises(ContractError):
            ops.dropout(matrix, 1.0, np.random.default_rng(0))

    def test_embedding_lookup(self, matrix):
        """Rows are gathered by id; an out-of-range id is both a TokenIndexError and an IndexError."""
        np.testing.assert_array_equal(ops.embedding_lookup(matrix, [1, 0, 1]).data[0], matrix.data[1])
        with pytest.raises(TokenIndexError):
            ops.embedding_lookup(matrix, [2])
        with pytest.raises(IndexError):
            ops.embedding_lookup(matrix, [-1])

    def test_embedding_gradient_scatter_adds(self, matrix):
        backward(ops.total(ops.embedding_lookup(matrix, [1, 1])))
        np.testing.assert_allclose(matrix.grad, [[0.0, 0.0, 0.0], [2.0, 2.0, 2.0]])

    def test_uniform_nll_is_log_of_classes(self):
        """Equal logits give a loss of ln C whatever the target."""
        log_probs = ops.log_softmax(Tensor(np.zeros((3, 5))))
        assert ops.nll(log_probs, [0, 2, 4]).item() == pytest.approx(math.log(5))

    def test_nll_target_range(self):
        with pytest.raises(TokenIndexError):
            ops.nll(ops.log_softmax(Tensor(np.zeros((1, 3)))), [3])

    def test_bce_with_logits(self):
        """Zero logits cost ln 2; confident correct logits cost about nothing; large logits stay finite."""
        assert ops.bce_with_logits(Tensor([[0.0]]), [[1.0]]).item() == pytest.approx(math.log(2))
        assert ops.bce_with_logits(Tensor([[40.0]]), [[1.0]]).item() == pytest.approx(0.0, abs=1e-12)
        assert ops.bce_with_logits(Tensor([[-800.0]]), [[1.0]]).item() == pytest.approx(800.0)

    def test_stack_rows(self):
        out = ops.stack_rows([Tensor([1.0]), Tensor([2.0]), Tensor([3.0])])
        assert out.shape == (3, 1)


# -------------------------------------------------------------------------------------------------
# Gradient checks
# -------------------------------------------------------------------------------------------------


class TestGradcheck:
    """Analytic gradients against central finite differences."""

    def test_every_op_passes(self):
        """Every differentiable op stays under the tolerance on random shapes."""
        errors = run_op_suite(seed=0)
        assert set(errors) >= {"matmul", "softmax", "layer_norm", "embedding_lookup", "nll", "bce_with_logits"}
        for name, error in errors.items():
            assert error < GRADCHECK_TOLERANCE, name

    def test_sampled_entries(self):
        """Sampling checks exactly the requested number of entries."""
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True, dtype=np.float64)
        result = gradcheck(lambda: projected(ops.gelu(x), np.random.default_rng(1)), [x], samples=5, rng=rng)
        assert result.checked == 5
        assert result.passed()

    def test_detects_a_wrong_rule(self):
        """A gradient rule that is off by a factor is caught."""
        x = Tensor(np.random.default_rng(0).standard_normal(3), requires_grad=True, dtype=np.float64)

        def doubled() -> Tensor:
            return Tensor.from_op(x.data ** 2, "square", (x,), lambda g: (g * 4.0 * x.data,))

        result = gradcheck(lambda: ops.total(doubled()), [x])
        assert not result.passed()
