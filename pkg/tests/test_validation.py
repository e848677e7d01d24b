import unittest

from schemas.experiment_schema import default_config
from utils.errors import ConfigError
from utils.validation_utils import resolve_adapter_layers, validate_experiment_config


class TestValidateExperimentConfig(unittest.TestCase):
    """Test case for configuration validation."""

    def assertRejected(self, **overrides):
        with self.assertRaises(ConfigError):
            validate_experiment_config(overrides)

    def test_defaults(self):
        """Test that an empty object resolves to the defaults."""
        self.assertEqual(validate_experiment_config({}), default_config())

    def test_unknown_key(self):
        """Test that a misspelled key is reported."""
        with self.assertRaises(ConfigError) as ctx:
            validate_experiment_config({"lamda": 1.0})
        self.assertIn("lamda", str(ctx.exception))

    def test_types_and_ranges(self):
        """Test wrong types and out-of-range values."""
        self.assertRejected(d="32")
        self.assertRejected(epochs=True)
        self.assertRejected(p=1.0)
        self.assertRejected(tau=0.0)
        self.assertRejected(architecture="transformer")
        self.assertRejected(seeds=[])

    def test_impossible_setups(self):
        """Test setups in which the backdoor or its metrics are undefined."""
        self.assertRejected(y_bd=2, num_classes=2)
        self.assertRejected(d=4, num_classes=4)
        self.assertRejected(n_proxy=10, n_poison=6)
        self.assertRejected(n_proxy=10, n_poison=6, clean_label=True)
        self.assertRejected(n_test=1)
        self.assertRejected(pretrain_min_epochs=20, pretrain_max_epochs=10)

    def test_poison_budget_boundary(self):
        """Test that every non-target proxy row may be poisoned."""
        cfg = validate_experiment_config({"n_proxy": 10, "n_poison": 5})
        self.assertEqual(cfg["n_poison"], 5)

    def test_toggles_and_cells(self):
        """Test toggle strings in the method and ablation settings."""
        validate_experiment_config({"toggles": "none", "ablation_cells": ["cl,tr", "pt"]})
        self.assertRejected(toggles="cl,xx")
        self.assertRejected(ablation_cells=["dropout"])

    def test_layer_selectors(self):
        """Test adapter and rescale selectors against the architecture."""
        validate_experiment_config({"architecture": "mlp", "rescale_layers": "top1", "adapter_layers": ["out"]})
        self.assertRejected(rescale_layers="hidden")
        self.assertRejected(adapter_layers="top1")
        self.assertRejected(rescale_layers="top0")

    def test_sweep_values(self):
        """Test axis-specific value checks."""
        validate_experiment_config({"axis": "r", "values": [1, 2, 4]})
        self.assertRejected(axis="r", values=[1.5])
        self.assertRejected(axis="p", values=[1.0])
        self.assertRejected(axis="s", values=[-1])

    def test_duplicate_seeds(self):
        """Test that a seed may appear only once."""
        self.assertRejected(seeds=[0, 1, 0])

    def test_resolve_adapter_layers(self):
        """Test every adapter selector form."""
        cfg = validate_experiment_config({"architecture": "mlp"})
        self.assertIsNone(resolve_adapter_layers(cfg))
        self.assertEqual(resolve_adapter_layers(dict(cfg, adapter_layers="none")), [])
        self.assertEqual(resolve_adapter_layers(dict(cfg, adapter_layers="hidden, out")), ["hidden", "out"])


if __name__ == "__main__":
    unittest.main()
