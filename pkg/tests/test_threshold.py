import math
import time
import unittest

import numpy as np

from core.rng import Rng
from data.synth import TaskSpec, TriggerSpec, apply_trigger, sample_clean
from spectral.threshold import (
    RhoReport,
    aggregate_rhos,
    check_proposition_soundness,
    estimate_rhos,
    margin,
    margin_direction,
    random_instance,
    verify_proposition,
)
from utils.errors import ConfigError, DegenerateInputError


class TestAlignmentCoefficients(unittest.TestCase):
    """Test case for the alignment coefficients."""

    def test_backdoor_coefficient_example(self):
        """Test rho_bd = 1 for a pretrained weight fully against the true class."""
        w_pre = np.array([[-1.0], [1.0]])
        delta = np.array([[1.0], [-1.0]])
        rhos = estimate_rhos(w_pre, delta, [1.0], [1.0], y=0, y_bd=1)
        self.assertAlmostEqual(rhos.rho_bd, 1.0, places=12)
        self.assertAlmostEqual(rhos.rho_cl, 1.0, places=12)
        self.assertEqual(rhos.rho_tr, 0.0)
        self.assertAlmostEqual(rhos.s_star, 1.0, places=12)

    def test_rank_one_clean_aligned_update(self):
        """Test that dW = kappa c x^T / |c| gives rho_cl = 1 and rho_tr = 0 when x_trig = x."""
        rng = Rng(3)
        w_pre = rng.normal((3, 4))
        x = rng.unit_vector(4)
        c = margin_direction(3, 0, 2)
        delta = 2.5 * np.outer(c, x) / np.linalg.norm(c)
        rhos = estimate_rhos(w_pre, delta, x, x, y=0, y_bd=2)
        self.assertAlmostEqual(rhos.rho_cl, 1.0, places=10)
        self.assertEqual(rhos.rho_tr, 0.0)
        self.assertAlmostEqual(rhos.rho_eff, 1.0, places=10)

    def test_resubstitution(self):
        """Test that the coefficients reproduce the margin terms they were computed from."""
        inst = random_instance(Rng(11), 5, 12)
        rhos = estimate_rhos(inst.w_pre, inst.delta, inst.x, inst.x_trig, inst.y, inst.y_bd)
        c = margin_direction(5, inst.y, inst.y_bd)
        scale_pre = rhos.c_norm * rhos.sigma_pre
        scale_delta = rhos.c_norm * rhos.sigma_delta
        self.assertLessEqual(abs(-c @ inst.w_pre @ inst.x_trig - rhos.rho_bd * scale_pre), 1e-12 * scale_pre)
        self.assertLessEqual(abs(c @ inst.delta @ inst.x - rhos.rho_cl * scale_delta), 1e-12 * scale_delta)
        self.assertLessEqual(
            abs(abs(c @ inst.delta @ (inst.x_trig - inst.x)) - rhos.rho_tr * scale_delta), 1e-12 * scale_delta
        )

    def test_threshold_formula(self):
        """Test s* = (rho_bd / rho_eff) (sigma_pre / sigma_delta)."""
        rhos = RhoReport(rho_bd=0.5, rho_cl=0.8, rho_tr=0.3, c_norm=math.sqrt(2.0), sigma_pre=10.0, sigma_delta=1.0)
        self.assertAlmostEqual(rhos.rho_eff, 0.5, places=12)
        self.assertAlmostEqual(rhos.s_star, 10.0, places=10)

    def test_inapplicable_without_positive_alignment(self):
        """Test that rho_eff <= 0 yields no threshold."""
        rhos = RhoReport(rho_bd=0.5, rho_cl=0.3, rho_tr=0.3, c_norm=math.sqrt(2.0), sigma_pre=1.0, sigma_delta=1.0)
        self.assertFalse(rhos.applicable)
        self.assertIsNone(rhos.s_star)

    def test_zero_update(self):
        """Test that a zero update leaves the clean and trigger coefficients undefined."""
        rhos = estimate_rhos(np.eye(2), np.zeros((2, 2)), [1.0, 0.0], [0.0, 1.0], y=0, y_bd=1)
        self.assertIsNone(rhos.rho_cl)
        self.assertIsNone(rhos.rho_eff)
        self.assertFalse(rhos.applicable)

    def test_invalid_inputs(self):
        """Test zero pretrained weights, equal labels and non-unit inputs."""
        with self.assertRaises(DegenerateInputError):
            estimate_rhos(np.zeros((2, 2)), np.eye(2), [1.0, 0.0], [0.0, 1.0], y=0, y_bd=1)
        with self.assertRaises(ConfigError):
            margin_direction(3, 1, 1)
        with self.assertRaises(ValueError):
            estimate_rhos(np.eye(2), np.eye(2), [2.0, 0.0], [0.0, 1.0], y=0, y_bd=1)


class TestProposition(unittest.TestCase):
    """Test case for the threshold statement and its verifier."""

    def setUp(self):
        """Set up an instance with an effective backdoor and a clean-aligned update."""
        self.w_pre = np.array([[-1.0], [1.0]])
        self.delta = np.array([[1.0], [-1.0]])
        self.x = np.array([1.0])

    def test_zero_scale_keeps_backdoor(self):
        """Test that the triggered margin is negative without an update."""
        self.assertLess(margin(self.w_pre, self.delta, self.x, 0, 1, 0.0), 0.0)

    def test_margin_positive_past_threshold(self):
        """Test positive margins at every multiple of s* above one."""
        check = verify_proposition(self.w_pre, self.delta, self.x, self.x, 0, 1)
        self.assertTrue(check.applicable)
        self.assertTrue(check.proof_holds)
        self.assertEqual(check.violations, [])
        self.assertEqual(len(check.margins), 4)
        for value in check.margins.values():
            self.assertGreater(value, 0.0)

    def test_inapplicable_instance(self):
        """Test that an update against the clean margin is reported as inapplicable."""
        check = verify_proposition(self.w_pre, -self.delta, self.x, self.x, 0, 1)
        self.assertFalse(check.applicable)
        self.assertEqual(check.margins, {})
        self.assertEqual(check.violations, [])

    def test_soundness_on_random_instances(self):
        """Test no violations on a thousand random valid instances, checked in under ten seconds."""
        started = time.perf_counter()
        report = check_proposition_soundness(n=1000, seed=0)
        self.assertLess(time.perf_counter() - started, 10.0)
        self.assertEqual(report.instances, 1000)
        self.assertEqual(report.violations, 0)
        self.assertEqual(report.proof_violations, 0)
        q05, q50, q95 = report.s_star_quantiles
        self.assertLessEqual(q05, q50)
        self.assertLessEqual(q50, q95)
        self.assertGreater(q05, 0.0)

    def test_soundness_is_reproducible(self):
        """Test that a seed fixes the soundness run."""
        first = check_proposition_soundness(n=50, seed=7)
        second = check_proposition_soundness(n=50, seed=7)
        self.assertEqual(first.as_row(), second.as_row())
        self.assertEqual(first.attempts, second.attempts)

    def test_multipliers_must_exceed_one(self):
        """Test that multipliers at or below one are rejected."""
        with self.assertRaises(ConfigError):
            check_proposition_soundness(n=1, multipliers=(0.5, 2.0))


class TestAggregateRhos(unittest.TestCase):
    """Test case for dataset-level coefficients."""

    def setUp(self):
        """Set up a small task, a trigger and a pair of weights."""
        rng = Rng(5)
        task = TaskSpec.random(6, 3, 0.1, seed=5)
        self.dataset = sample_clean(task, 30, rng.child("data"))
        self.trig = TriggerSpec.random(task, 1.0, 0, rng.child("trigger"))
        self.w_pre = rng.normal((3, 6))
        self.delta = rng.normal((3, 6))

    def test_worst_case_over_rows(self):
        """Test min rho_bd, min rho_cl and max rho_tr over the non-target rows."""
        agg = aggregate_rhos(self.w_pre, self.delta, self.dataset, self.trig)
        rows = [i for i in range(self.dataset.n) if self.dataset.labels[i] != self.trig.y_bd]
        reports = [
            estimate_rhos(
                self.w_pre, self.delta, self.dataset.inputs[i], apply_trigger(self.dataset.inputs[i], self.trig),
                int(self.dataset.labels[i]), self.trig.y_bd,
            )
            for i in rows
        ]
        self.assertEqual(agg.rows, len(rows))
        self.assertAlmostEqual(agg.worst.rho_bd, min(r.rho_bd for r in reports), places=12)
        self.assertAlmostEqual(agg.worst.rho_cl, min(r.rho_cl for r in reports), places=12)
        self.assertAlmostEqual(agg.worst.rho_tr, max(r.rho_tr for r in reports), places=12)
        self.assertAlmostEqual(agg.mean_rho_bd, float(np.mean([r.rho_bd for r in reports])), places=12)

    def test_limit_and_zero_update(self):
        """Test the row limit and the aggregate of an untrained update."""
        agg = aggregate_rhos(self.w_pre, np.zeros((3, 6)), self.dataset, self.trig, limit=4)
        self.assertEqual(agg.rows, 4)
        self.assertIsNone(agg.worst.rho_cl)
        self.assertIsNone(agg.mean_rho_eff)
        self.assertIsNone(agg.mean_s_star)


if __name__ == "__main__":
    unittest.main()
