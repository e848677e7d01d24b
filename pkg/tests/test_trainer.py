import unittest

import numpy as np

from core.rng import Rng
from data.synth import triggered_eval_set
from orchestration.workflow import build_seed_data
from training.evaluation import attack_success_rate, evaluate, evaluate_frozen_baseline
from training.trainer import TrainingHistory, finetune, pretrain_poison
from utils.errors import ConfigError, PipelineTargetError
from utils.validation_utils import validate_experiment_config

SMALL_CONFIG = {
    "d": 12,
    "num_classes": 2,
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
    "rescale_layers": "all",
}


class TestPretrainPoison(unittest.TestCase):
    """Test case for poisoned pretraining."""

    def test_reaches_asr_target(self):
        """Test that poisoned pretraining plants an effective backdoor."""
        cfg = validate_experiment_config(SMALL_CONFIG)
        data = build_seed_data(cfg, 0)
        history = TrainingHistory()
        stack = pretrain_poison(
            cfg, data.proxy_train, data.proxy_heldout, data.trigger, Rng(0).child("pretrain"), history=history
        )
        self.assertEqual(stack.mode, "frozen")
        self.assertGreaterEqual(history.epochs, cfg["pretrain_min_epochs"])
        triggered = triggered_eval_set(data.proxy_heldout, data.trigger)
        self.assertGreaterEqual(attack_success_rate(stack, triggered, data.trigger.y_bd), 0.95)

    def test_clean_label_plants_backdoor(self):
        """Test that a strong clean-label trigger on most target-class rows is learned without relabeling."""
        cfg = validate_experiment_config(dict(SMALL_CONFIG, clean_label=True, tau=5.0, n_poison=120, pretrain_min_epochs=1))
        data = build_seed_data(cfg, 0)
        poisoned_labels = data.proxy_train.labels[data.proxy_train.poisoned_mask]
        self.assertEqual(len(poisoned_labels), 120)
        self.assertTrue(np.all(poisoned_labels == data.trigger.y_bd))
        stack = pretrain_poison(cfg, data.proxy_train, data.proxy_heldout, data.trigger, Rng(0).child("pretrain"))
        triggered = triggered_eval_set(data.proxy_heldout, data.trigger)
        self.assertGreaterEqual(attack_success_rate(stack, triggered, data.trigger.y_bd), 0.95)

    def test_no_poison_no_backdoor(self):
        """Test that clean pretraining misses the ASR target."""
        cfg = validate_experiment_config(dict(SMALL_CONFIG, n_poison=0, pretrain_max_epochs=20))
        data = build_seed_data(cfg, 0)
        with self.assertRaises(PipelineTargetError) as ctx:
            pretrain_poison(cfg, data.proxy_train, data.proxy_heldout, data.trigger, Rng(0).child("pretrain"))
        self.assertLess(ctx.exception.details["asr"], 0.5)


class TestFinetune(unittest.TestCase):
    """Test case for the fine-tuning methods."""

    @classmethod
    def setUpClass(cls):
        """Pretrain one poisoned backbone shared by every test."""
        cls.cfg = validate_experiment_config(SMALL_CONFIG)
        cls.data = build_seed_data(cls.cfg, 0)
        cls.poisoned = pretrain_poison(
            cls.cfg, cls.data.proxy_train, cls.data.proxy_heldout, cls.data.trigger, Rng(0).child("pretrain")
        )

    def run_method(self, method, toggles=None):
        return finetune(
            self.cfg, self.poisoned, self.data.clean_train, Rng(0).child("finetune"), method=method, toggles=toggles
        )

    def test_rora_without_toggles_is_lora(self):
        """Test that rora with every toggle off reproduces lora exactly."""
        lora = self.run_method("lora")
        rora = self.run_method("rora", "none")
        for a, b in zip(lora.stack.layers, rora.stack.layers):
            np.testing.assert_array_equal(a.a, b.a)
            np.testing.assert_array_equal(a.b, b.b)
            self.assertIsNone(b.scale)
        self.assertEqual(
            [r.loss for r in lora.history.records], [r.loss for r in rora.history.records]
        )

    def test_deterministic(self):
        """Test that a seed fixes the fine-tuned adapters."""
        first = self.run_method("rora", "cl,tr")
        second = self.run_method("rora", "cl,tr")
        np.testing.assert_array_equal(first.stack.layers[0].b, second.stack.layers[0].b)

    def test_method_contracts(self):
        """Test which tensors each method is allowed to change."""
        w_pre = self.poisoned.layers[0].w_pre
        lora = self.run_method("lora")
        np.testing.assert_array_equal(lora.stack.layers[0].w_pre, w_pre)
        self.assertTrue(np.any(lora.stack.layers[0].b != 0.0))
        self.assertEqual(lora.history.epochs, self.cfg["epochs"])

        fft = self.run_method("fft")
        self.assertFalse(np.array_equal(fft.stack.layers[0].w_pre, w_pre))

        frozen = self.run_method("frozen")
        self.assertEqual(frozen.history.epochs, 0)
        self.assertFalse(np.any(frozen.stack.layers[0].b))
        self.assertEqual(frozen.stack.mode, "frozen")

    def test_post_training_rescale(self):
        """Test that pt sets the inference scale of the selected layer."""
        result = self.run_method("rora", "pt")
        layer = result.stack.layers[0]
        self.assertIsNotNone(layer.scale)
        self.assertEqual(result.toggles, {"cl": False, "tr": False, "pt": True})
        metrics = evaluate(result.stack, None, self.data.clean_test, self.data.trigger)
        self.assertGreaterEqual(metrics.ca, 0.0)

    def test_frozen_baseline_beats_chance(self):
        """Test that the untouched poisoned backbone already classifies the clean target task."""
        baseline = evaluate_frozen_baseline(self.poisoned, self.data.clean_test, self.data.trigger)
        self.assertGreater(baseline.ca, 1.0 / self.cfg["num_classes"] + 0.2)
        self.assertGreaterEqual(baseline.asr, 0.5)

    def test_rejects_poisoned_training_data(self):
        """Test that fine-tuning refuses rows flagged as poisoned."""
        with self.assertRaises(ConfigError):
            finetune(self.cfg, self.poisoned, self.data.proxy_train, Rng(0), method="lora")


if __name__ == "__main__":
    unittest.main()
