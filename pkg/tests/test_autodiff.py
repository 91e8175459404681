"""
Tests for the reverse-mode tape: gradients, shape and finiteness errors, and the
finite-difference checker (including a deliberately broken derivative).
"""

import unittest
from unittest.mock import patch

import numpy as np

import autodiff as ad
from autodiff import NonFiniteError, ShapeMismatchError, Tape
from selftest import check_objective_gradients, check_op_gradients


class TestTape(unittest.TestCase):
    """Tests for recording and backward accumulation."""

    def setUp(self):
        self.tape = Tape()

    def test_square_gradient(self):
        """∇ Σx² = 2x."""
        x = self.tape.leaf(np.array([1.0, -2.0, 3.0]))
        out = ad.reduce_sum(x * x)
        (g,) = self.tape.gradient(out, [x])
        np.testing.assert_allclose(g, [2.0, -4.0, 6.0])

    def test_fan_out_accumulates(self):
        """A leaf used twice receives both contributions."""
        x = self.tape.leaf(np.array(2.0))
        out = ad.add(ad.scale(x, 3.0), ad.mul(x, x))
        (g,) = self.tape.gradient(out, [x])
        self.assertAlmostEqual(float(g), 3.0 + 4.0)

    def test_broadcast_gradient_unbroadcasts(self):
        """Broadcast operands get gradients of their own shape."""
        a = self.tape.leaf(np.ones((3, 4)))
        b = self.tape.leaf(np.ones(4))
        (ga, gb) = self.tape.gradient(ad.reduce_sum(ad.mul(a, b)), [a, b])
        self.assertEqual(ga.shape, (3, 4))
        np.testing.assert_allclose(gb, np.full(4, 3.0))

    def test_off_path_leaf_gets_zeros(self):
        """Leaves that do not reach the output have zero gradient."""
        x = self.tape.leaf(np.ones(2))
        y = self.tape.leaf(np.ones(3))
        (gy,) = self.tape.gradient(ad.reduce_sum(x), [y])
        np.testing.assert_array_equal(gy, np.zeros(3))

    def test_constants_need_no_gradient(self):
        """Ops on constants only are not differentiable."""
        c = self.tape.constant(np.ones(2))
        self.assertFalse(ad.reduce_sum(c).requires_grad)

    def test_operators(self):
        """Tensor operators map to the tape ops."""
        a = self.tape.leaf(np.array([[1.0, 2.0]]))
        b = self.tape.leaf(np.array([[3.0], [4.0]]))
        np.testing.assert_allclose((a @ b).value, [[11.0]])
        np.testing.assert_allclose((-a).value, [[-1.0, -2.0]])
        np.testing.assert_allclose((a - 1.0).value, [[0.0, 1.0]])

    def test_inputs_not_mutated(self):
        """Recording and differentiating leave the input array unchanged."""
        data = np.array([0.5, -0.5])
        before = data.copy()
        x = self.tape.leaf(data)
        self.tape.gradient(ad.reduce_sum(ad.tanh(x)), [x])
        np.testing.assert_array_equal(data, before)

    def test_mixed_tapes_rejected(self):
        """Operands from different tapes cannot be combined."""
        a = self.tape.leaf(np.ones(2))
        b = Tape().leaf(np.ones(2))
        with self.assertRaises(ValueError):
            ad.add(a, b)


class TestErrors(unittest.TestCase):
    """Tests for shape and finiteness errors."""

    def test_matmul_shape_mismatch(self):
        """Incompatible matmul operands raise ShapeMismatchError."""
        tape = Tape()
        with self.assertRaises(ShapeMismatchError):
            ad.matmul(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((2, 3))))

    def test_broadcast_mismatch(self):
        """Non-broadcastable elementwise operands raise ShapeMismatchError."""
        tape = Tape()
        with self.assertRaises(ShapeMismatchError):
            ad.add(tape.leaf(np.ones(3)), tape.leaf(np.ones(4)))

    def test_item_needs_scalar(self):
        """item() on a vector raises ShapeMismatchError."""
        with self.assertRaises(ShapeMismatchError):
            Tape().leaf(np.ones(2)).item()

    def test_checked_mode_detects_overflow(self):
        """exp overflow raises NonFiniteError in checked mode."""
        tape = Tape(checked=True)
        with np.errstate(over="ignore"):
            with self.assertRaises(NonFiniteError):
                ad.exp(tape.leaf(np.array([1000.0])))

    def test_unchecked_mode_passes_inf(self):
        """Unchecked tapes let non-finite values through."""
        tape = Tape(checked=False)
        with np.errstate(over="ignore"):
            out = ad.exp(tape.leaf(np.array([1000.0])))
        self.assertTrue(np.isinf(out.value[0]))

    def test_checked_leaf_rejects_nan(self):
        """A NaN input is caught at the leaf."""
        with self.assertRaises(NonFiniteError):
            Tape(checked=True).leaf(np.array([np.nan]))


class TestOps(unittest.TestCase):
    """Tests for individual op semantics."""

    def setUp(self):
        self.tape = Tape()

    def test_conv_preserves_spatial_size(self):
        """3×3 convolution with padding keeps H and W."""
        x = self.tape.leaf(np.zeros((2, 1, 4, 4)))
        k = self.tape.leaf(np.zeros((5, 1, 3, 3)))
        self.assertEqual(ad.conv2d(x, k).shape, (2, 5, 4, 4))

    def test_conv_identity_kernel(self):
        """A centered unit kernel copies the input."""
        data = np.arange(16.0).reshape(1, 1, 4, 4)
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        out = ad.conv2d(self.tape.leaf(data), self.tape.leaf(kernel))
        np.testing.assert_allclose(out.value, data)

    def test_maxpool_values(self):
        """2×2 pooling takes the window maxima."""
        data = np.arange(16.0).reshape(1, 1, 4, 4)
        out = ad.maxpool2x2(self.tape.leaf(data))
        np.testing.assert_allclose(out.value[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_block_diagonal_layout(self):
        """Blocks land on the diagonal, zeros elsewhere."""
        blocks = self.tape.leaf(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]))
        np.testing.assert_allclose(ad.block_diagonal(blocks).value, [[1, 0], [2, 0], [0, 3], [0, 4]])

    def test_reduce_max_exclude_and_ties(self):
        """Excluded columns are skipped; ties route the gradient to the first index."""
        x = self.tape.leaf(np.array([5.0, 3.0, 3.0]))
        out = ad.reduce_max(x, exclude=0)
        self.assertEqual(float(out.value), 3.0)
        (g,) = self.tape.gradient(out, [x])
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_l2_norm_zero_gradient_at_origin(self):
        """The norm's gradient at 0 is defined as 0."""
        x = self.tape.leaf(np.zeros(3))
        (g,) = self.tape.gradient(ad.l2_norm(x), [x])
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_cross_entropy_value(self):
        """Mean cross-entropy matches a direct computation."""
        z = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
        labels = np.array([1, 2])
        expected = np.mean([
            -np.log(np.exp(z[i, labels[i]]) / np.exp(z[i]).sum()) for i in range(2)
        ])
        self.assertAlmostEqual(float(ad.cross_entropy(self.tape.leaf(z), labels).value), expected)

    def test_softplus_large_input(self):
        """softplus stays finite for large arguments."""
        out = ad.softplus(self.tape.leaf(np.array([800.0])))
        self.assertAlmostEqual(float(out.value[0]), 800.0)

    def test_minimum_clamps(self):
        """minimum(a, c) caps values at c and blocks the gradient there."""
        x = self.tape.leaf(np.array([1.0, 3.0]))
        out = ad.minimum(x, 2.0)
        np.testing.assert_allclose(out.value, [1.0, 2.0])
        (g,) = self.tape.gradient(ad.reduce_sum(out), [x])
        np.testing.assert_array_equal(g, [1.0, 0.0])


class TestFiniteDifferences(unittest.TestCase):
    """Tests for gradient verification against central differences."""

    def test_every_op_matches(self):
        """All differentiable ops agree with finite differences over 100 random trials."""
        result = check_op_gradients(trials=100)
        self.assertTrue(result.passed, result.detail)

    def test_attack_objectives_match(self):
        """The three attack objectives agree with finite differences over 100+ trials."""
        result = check_objective_gradients(trials=34)
        self.assertTrue(result.passed, result.detail)

    def test_sign_flip_in_tanh_is_caught(self):
        """An injected sign error in tanh's derivative fails the check."""
        with patch("autodiff._tanh_grad", lambda y: -(1.0 - y * y)):
            result = check_op_gradients(trials=1)
        self.assertFalse(result.passed)

    def test_sign_flip_breaks_objectives(self):
        """The same mutation is visible through the attack objectives."""
        with patch("autodiff._tanh_grad", lambda y: -(1.0 - y * y)):
            result = check_objective_gradients(trials=1)
        self.assertFalse(result.passed)

    def test_non_scalar_rejected(self):
        """The checker needs a scalar function."""
        with self.assertRaises(ShapeMismatchError):
            ad.finite_difference_check(lambda x: ad.tanh(x), np.ones(3))

    def test_non_finite_rejected(self):
        """A non-finite f(x) is reported."""
        with np.errstate(over="ignore"):
            with self.assertRaises(NonFiniteError):
                ad.finite_difference_check(lambda x: ad.reduce_sum(ad.exp(x)), np.array([1000.0]))


if __name__ == "__main__":
    unittest.main()
