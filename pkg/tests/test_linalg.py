import math
import unittest

import numpy as np

from core.linalg import (
    add_scaled,
    frobenius,
    gaussian_matrix,
    leading_left_vector,
    max_abs_cosine,
    power_iteration,
    sigma_max,
    svd_thin,
    top_singular_vectors,
    zeros,
)
from core.rng import Rng
from utils.errors import DegenerateInputError, NumericalError, ShapeError


class TestSvdThin(unittest.TestCase):
    """Test case for the one-sided Jacobi SVD."""

    def setUp(self):
        """Set up a random stream."""
        self.rng = Rng(7)

    def assertOrthonormal(self, q, tol=1e-10):
        np.testing.assert_allclose(q.T @ q, np.eye(q.shape[1]), atol=tol)

    def test_diagonal_matrix(self):
        """Test that a diagonal matrix decomposes into the identity factors."""
        factors = svd_thin(np.diag([2.0, 1.0]))
        np.testing.assert_allclose(factors.sigma, [2.0, 1.0])
        np.testing.assert_allclose(np.abs(factors.u), np.eye(2))
        np.testing.assert_allclose(np.abs(factors.v), np.eye(2))

    def test_rank_one_outer_product(self):
        """Test that a unit rank-1 outer product has a single unit singular value."""
        u = self.rng.unit_vector(5)
        v = self.rng.unit_vector(4)
        factors = svd_thin(np.outer(u, v))
        self.assertAlmostEqual(factors.sigma[0], 1.0, places=12)
        self.assertTrue(np.all(np.abs(factors.sigma[1:]) < 1e-10))
        self.assertOrthonormal(factors.u)
        self.assertOrthonormal(factors.v)

    def test_reconstruction_random_shapes(self):
        """Test the reconstruction residual and orthonormality on tall, wide and square matrices."""
        for rows, cols in [(10, 6), (6, 10), (64, 64), (64, 17), (1, 5), (5, 1)]:
            m = self.rng.normal((rows, cols))
            factors = svd_thin(m)
            residual = frobenius(factors.reconstruct() - m)
            self.assertLessEqual(residual, 1e-8 * frobenius(m), f"shape {(rows, cols)}")
            self.assertOrthonormal(factors.u)
            self.assertOrthonormal(factors.v)
            self.assertEqual(factors.k, min(rows, cols))

    def test_matches_numpy_singular_values(self):
        """Test singular values against numpy's LAPACK SVD."""
        m = self.rng.normal((12, 9))
        factors = svd_thin(m)
        np.testing.assert_allclose(factors.sigma, np.linalg.svd(m, compute_uv=False), rtol=1e-10)

    def test_sorted_and_sign_convention(self):
        """Test descending order and a positive largest entry in every U column."""
        factors = svd_thin(self.rng.normal((8, 8)))
        self.assertTrue(np.all(np.diff(factors.sigma) <= 0.0))
        for j in range(factors.u.shape[1]):
            column = factors.u[:, j]
            self.assertGreater(column[np.argmax(np.abs(column))], 0.0)

    def test_rank_deficient_completes_basis(self):
        """Test that zero columns still yield orthonormal factors."""
        m = np.zeros((4, 3))
        m[:, 0] = [1.0, 2.0, 0.0, 0.0]
        factors = svd_thin(m)
        self.assertAlmostEqual(factors.sigma[0], math.sqrt(5.0))
        np.testing.assert_array_equal(factors.sigma[1:], [0.0, 0.0])
        self.assertOrthonormal(factors.u)
        self.assertOrthonormal(factors.v)

    def test_deterministic(self):
        """Test that repeated decompositions are bit-identical."""
        m = self.rng.normal((9, 7))
        first = svd_thin(m)
        second = svd_thin(m)
        np.testing.assert_array_equal(first.u, second.u)
        np.testing.assert_array_equal(first.sigma, second.sigma)
        np.testing.assert_array_equal(first.v, second.v)

    def test_non_convergence_raises(self):
        """Test that exhausting the sweep budget raises a numerical error."""
        with self.assertRaises(NumericalError) as ctx:
            svd_thin(self.rng.normal((10, 6)), max_sweeps=1)
        self.assertIn("sweeps", ctx.exception.details)

    def test_rejects_vectors(self):
        """Test that 1-D input is a shape error."""
        with self.assertRaises(ShapeError):
            svd_thin(np.ones(3))

    def test_truncate(self):
        """Test truncation to the leading triplets."""
        factors = svd_thin(self.rng.normal((6, 5))).truncate(2)
        self.assertEqual(factors.u.shape, (6, 2))
        self.assertEqual(factors.v.shape, (5, 2))
        with self.assertRaises(ShapeError):
            factors.truncate(3)


class TestPowerIteration(unittest.TestCase):
    """Test case for the spectral norm estimate."""

    def test_matches_svd_and_numpy(self):
        """Test sigma_max against the Jacobi SVD and numpy's 2-norm."""
        rng = Rng(3)
        for shape in [(20, 12), (5, 9), (16, 16)]:
            m = rng.normal(shape)
            top = svd_thin(m).sigma[0]
            estimate = sigma_max(m)
            self.assertLessEqual(abs(estimate - top), 1e-6 * top)
            self.assertLessEqual(abs(estimate - np.linalg.norm(m, ord=2)), 1e-6 * top)

    def test_zero_matrix_is_degenerate(self):
        """Test that the zero matrix reports sigma 0 without iterating."""
        result = power_iteration(zeros(3, 4))
        self.assertTrue(result.degenerate)
        self.assertEqual(result.sigma, 0.0)
        self.assertEqual(sigma_max(zeros(2, 2)), 0.0)

    def test_deterministic(self):
        """Test that the fixed start vector makes results reproducible."""
        m = Rng(11).normal((7, 5))
        self.assertEqual(power_iteration(m).sigma, power_iteration(m).sigma)

    def test_diagonal(self):
        """Test the spectral norm of a diagonal matrix."""
        self.assertAlmostEqual(sigma_max(np.diag([3.0, -5.0, 1.0])), 5.0, places=10)


class TestCosineAndHelpers(unittest.TestCase):
    """Test case for alignment and elementwise helpers."""

    def test_max_abs_cosine_examples(self):
        """Test self-alignment, orthogonality and equal superposition."""
        basis = np.eye(3)[:, :2]
        self.assertAlmostEqual(max_abs_cosine(basis[:, 0], basis), 1.0)
        self.assertEqual(max_abs_cosine(np.array([0.0, 0.0, 2.0]), basis), 0.0)
        u = (basis[:, 0] + basis[:, 1]) / math.sqrt(2.0)
        self.assertAlmostEqual(max_abs_cosine(u, basis), 1.0 / math.sqrt(2.0), places=12)

    def test_max_abs_cosine_brute_force(self):
        """Test against a per-column loop."""
        rng = Rng(5)
        basis, _ = np.linalg.qr(rng.normal((6, 3)))
        u = rng.normal(6)
        expected = max(abs(sum(u[i] * basis[i, j] for i in range(6))) for j in range(3)) / np.linalg.norm(u)
        self.assertAlmostEqual(max_abs_cosine(u, basis), expected, places=12)

    def test_max_abs_cosine_zero_vector(self):
        """Test that a zero vector is rejected."""
        with self.assertRaises(DegenerateInputError):
            max_abs_cosine(np.zeros(3), np.eye(3))

    def test_add_scaled_and_frobenius(self):
        """Test the identity and 3-4-5 examples."""
        np.testing.assert_array_equal(add_scaled(np.eye(2), np.eye(2), 2.0), 3.0 * np.eye(2))
        self.assertEqual(frobenius(np.diag([3.0, 4.0])), 5.0)
        with self.assertRaises(ShapeError):
            add_scaled(np.eye(2), np.eye(3), 1.0)

    def test_gaussian_matrix_deterministic(self):
        """Test that the same seed gives bit-identical matrices."""
        first = gaussian_matrix(Rng(42), 4, 3, 0.5)
        second = gaussian_matrix(Rng(42), 4, 3, 0.5)
        np.testing.assert_array_equal(first, second)
        self.assertFalse(np.array_equal(first, gaussian_matrix(Rng(43), 4, 3, 0.5)))

    def test_leading_vectors(self):
        """Test leading singular vectors of a constructed matrix."""
        m = np.diag([1.0, 4.0, 2.0])
        np.testing.assert_allclose(leading_left_vector(m), [0.0, 1.0, 0.0], atol=1e-12)
        self.assertIsNone(leading_left_vector(zeros(2, 3)))
        u_k, v_k = top_singular_vectors(m, 2)
        self.assertEqual(u_k.shape, (3, 2))
        self.assertEqual(v_k.shape, (3, 2))


if __name__ == "__main__":
    unittest.main()
