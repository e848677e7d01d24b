import math
import unittest

import numpy as np

from core.linalg import sigma_max
from core.rng import Rng
from models.lora import LoraLayer, ModelStack
from orchestration.workflow import build_seed_data
from schemas.report_schema import REPORT_HEADERS
from spectral.diagnostics import spectral_report, subspace_overlap
from spectral.rescaling import apply_rescale, rescale, resolve_layers
from training.trainer import finetune, pretrain_poison
from utils.errors import ConfigError, DegenerateInputError
from utils.validation_utils import validate_experiment_config

FINETUNE_CONFIG = {
    "d": 12,
    "noise_std": 0.1,
    "shift": 0.1,
    "tau": 1.0,
    "n_proxy": 300,
    "n_proxy_heldout": 100,
    "n_poison": 60,
    "n_train": 120,
    "n_test": 100,
    "pretrain_lr": 0.01,
    "pretrain_min_epochs": 5,
    "pretrain_max_epochs": 300,
    "epochs": 2,
    "r": 1,
    "alpha": 1.0,
    "k": 4,
}


def trained_mlp(seed=0):
    rng = Rng(seed)
    stack = ModelStack.mlp(rng.normal((6, 8)), rng.normal((3, 6))).with_adapters(2, 4.0, rng.child("adapters"))
    for layer in stack.layers:
        layer.b = rng.child(layer.name).normal(layer.b.shape, 0.05)
    return stack


class TestRescaling(unittest.TestCase):
    """Test case for post-training spectral rescaling."""

    def test_direct_ratio(self):
        """Test sigma_pre = 6 and sigma_delta = 0.5 give s = 12."""
        layer = LoraLayer("out", np.diag([6.0, 1.0]), a=np.array([[1.0, 0.0]]), b=np.array([[0.5], [0.0]]))
        self.assertAlmostEqual(rescale(layer), 12.0, places=8)

    def test_equal_spectra(self):
        """Test that an update equal to the pretrained weight gives s = 1."""
        rng = Rng(1)
        a = rng.normal((1, 4))
        b = rng.normal((3, 1))
        layer = LoraLayer("out", b @ a, a=a, b=b)
        self.assertAlmostEqual(rescale(layer), 1.0, places=10)

    def test_untrained_adapter(self):
        """Test that a zero update has no rescale."""
        stack = ModelStack.linear(np.eye(3)).with_adapters(1, 1.0, Rng(0))
        with self.assertRaises(DegenerateInputError) as ctx:
            rescale(stack.layers[0])
        self.assertIn("untrained adapter", str(ctx.exception))

    def test_spectral_match_after_rescale(self):
        """Test sigma_max(s * BA) = sigma_max(W_pre) on every selected layer."""
        stack = trained_mlp()
        rescaled = apply_rescale(stack, "all")
        for layer in rescaled.layers:
            sigma_pre = sigma_max(layer.w_pre)
            self.assertLessEqual(abs(sigma_max(layer.scale * layer.delta()) - sigma_pre), 1e-6 * sigma_pre)
        self.assertTrue(all(layer.scale is None for layer in stack.layers))

    def test_selector_none_and_top(self):
        """Test that only selected layers are rescaled."""
        stack = trained_mlp()
        unchanged = apply_rescale(stack, "none")
        self.assertEqual([layer.scale for layer in unchanged.layers], [None, None])
        top = apply_rescale(stack, "top1")
        self.assertIsNone(top.layer("hidden").scale)
        self.assertIsNotNone(top.layer("out").scale)

    def test_resolve_layers(self):
        """Test every selector form."""
        stack = trained_mlp()
        self.assertEqual(resolve_layers(stack, "top3"), ["hidden", "out"])
        self.assertEqual(resolve_layers(stack, "top1"), ["out"])
        self.assertEqual(resolve_layers(stack, "all"), ["hidden", "out"])
        self.assertEqual(resolve_layers(stack, "none"), [])
        self.assertEqual(resolve_layers(stack, "out,hidden"), ["hidden", "out"])
        self.assertEqual(resolve_layers(stack, ["hidden"]), ["hidden"])
        with self.assertRaises(ConfigError):
            resolve_layers(stack, "attention")


class TestSpectralReport(unittest.TestCase):
    """Test case for the spectral diagnostics."""

    def setUp(self):
        """Set up a diagonal pretrained weight with sigma_pre = 5."""
        self.w_pre = np.diag([5.0, 2.0, 1.0])

    def test_self_aligned_update(self):
        """Test an update along the leading pretrained pair."""
        layer = LoraLayer("out", self.w_pre, a=np.array([[1.0, 0.0, 0.0]]), b=np.array([[0.5], [0.0], [0.0]]))
        record = spectral_report(ModelStack([layer], mode="lora"), k=2, s=1.0).record("out")
        self.assertAlmostEqual(record.sigma_pre, 5.0, places=10)
        self.assertAlmostEqual(record.sigma_delta, 0.5, places=10)
        self.assertAlmostEqual(record.ratio, 10.0, places=8)
        self.assertAlmostEqual(record.max_cosine, 1.0, places=12)

    def test_orthogonal_update(self):
        """Test an update on the complement of the top-k subspace."""
        layer = LoraLayer("out", self.w_pre, a=np.array([[0.0, 0.0, 1.0]]), b=np.array([[0.0], [0.0], [1.0]]))
        stack = ModelStack([layer], mode="lora")
        record = spectral_report(stack, k=2, s=1.0).record("out")
        self.assertEqual(record.max_cosine, 0.0)
        left, right = subspace_overlap(stack, k=2)["out"].values()
        self.assertEqual(left, 0.0)
        self.assertEqual(right, 0.0)

    def test_default_scale_is_inference_scale(self):
        """Test that the update is measured at alpha / r unless rescaled."""
        layer = LoraLayer("out", self.w_pre, a=np.array([[1.0, 0.0, 0.0]]), b=np.array([[0.5], [0.0], [0.0]]), alpha=4.0)
        record = spectral_report(ModelStack([layer], mode="lora"), k=2).record("out")
        self.assertAlmostEqual(record.sigma_delta, 2.0, places=10)

    def test_untrained_layers_flagged(self):
        """Test that zero updates are flagged instead of failing."""
        stack = ModelStack.linear(self.w_pre).with_adapters(1, 1.0, Rng(0))
        report = spectral_report(stack, k=2)
        self.assertEqual(report.untrained_layers, ["out"])
        self.assertTrue(math.isinf(report.record("out").ratio))

    def test_needs_adapters(self):
        """Test that a model without adapters has no spectral report."""
        with self.assertRaises(DegenerateInputError):
            spectral_report(ModelStack.linear(self.w_pre), k=2)

    def test_row_layout(self):
        """Test the CSV column layout and the cosine range of every record."""
        report = spectral_report(trained_mlp(), k=32)
        for record in report.records:
            self.assertGreaterEqual(record.max_cosine, 0.0)
            self.assertLessEqual(record.max_cosine, 1.0)
            self.assertEqual(list(record.as_row()), REPORT_HEADERS["spectral"])


class TestFinetunedSpectra(unittest.TestCase):
    """Test case for the spectra of adapters learned by a real fine-tuning run."""

    @classmethod
    def setUpClass(cls):
        """Pretrain a poisoned backbone and fine-tune it with plain LoRA."""
        cls.cfg = validate_experiment_config(FINETUNE_CONFIG)
        data = build_seed_data(cls.cfg, 0)
        poisoned = pretrain_poison(cls.cfg, data.proxy_train, data.proxy_heldout, data.trigger, Rng(0).child("pretrain"))
        cls.result = finetune(cls.cfg, poisoned, data.clean_train, Rng(0).child("finetune"), method="lora")

    def test_lora_regime(self):
        """Test that a LoRA fine-tune leaves the update spectrally below the pretrained weight."""
        report = spectral_report(self.result.stack, k=self.cfg["k"])
        self.assertEqual(report.untrained_layers, [])
        for record in report.records:
            self.assertGreater(record.ratio, 1.0, record.layer)
            self.assertAlmostEqual(record.ratio, record.sigma_pre / record.sigma_delta, places=12)


if __name__ == "__main__":
    unittest.main()
