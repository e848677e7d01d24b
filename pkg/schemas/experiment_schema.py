"""
Schema definition for experiment configuration files.

A configuration is one flat JSON object. Every key has an explicit default
so the resolved configuration written next to each run is complete.
"""

EXPERIMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "experiment_id": {
            "type": "string",
            "default": "sll",
            "description": "Identifier written into the summary"
        },
        "seeds": {
            "type": "array",
            "items": {"type": "integer", "minimum": 0},
            "minItems": 1,
            "default": [0],
            "description": "Seeds to run; each seed drives every random stream of a run"
        },
        "d": {
            "type": "integer",
            "minimum": 2,
            "maximum": 512,
            "default": 8,
            "description": "Input dimension"
        },
        "num_classes": {
            "type": "integer",
            "minimum": 2,
            "maximum": 64,
            "default": 2,
            "description": "Number of classes"
        },
        "noise_std": {
            "type": "number",
            "minimum": 0.0,
            "default": 0.2,
            "description": "Per-coordinate noise added to the class mean before normalization"
        },
        "shift": {
            "type": "number",
            "minimum": 0.0,
            "exclusiveMaximum": 1.0,
            "default": 0.15,
            "description": "Proxy-vs-target distribution gap (rotation angle as a fraction of pi/2)"
        },
        "tau": {
            "type": "number",
            "exclusiveMinimum": 0.0,
            "default": 3.0,
            "description": "Trigger strength"
        },
        "y_bd": {
            "type": "integer",
            "minimum": 0,
            "default": 0,
            "description": "Backdoor target label"
        },
        "n_proxy": {
            "type": "integer",
            "minimum": 1,
            "default": 2000,
            "description": "Proxy rows used for poisoned pretraining"
        },
        "n_proxy_heldout": {
            "type": "integer",
            "minimum": 1,
            "default": 500,
            "description": "Held-out proxy rows used to measure the pretraining ASR"
        },
        "n_poison": {
            "type": "integer",
            "minimum": 0,
            "default": 300,
            "description": "Number of poisoned proxy rows"
        },
        "clean_label": {
            "type": "boolean",
            "default": False,
            "description": "Clean-label poisoning (labels untouched) instead of dirty-label"
        },
        "n_train": {
            "type": "integer",
            "minimum": 1,
            "default": 2000,
            "description": "Clean downstream training rows"
        },
        "n_test": {
            "type": "integer",
            "minimum": 1,
            "default": 1000,
            "description": "Clean downstream test rows"
        },
        "architecture": {
            "type": "string",
            "enum": ["linear", "mlp"],
            "default": "linear",
            "description": "Single linear classifier or two-layer tanh MLP"
        },
        "hidden": {
            "type": "integer",
            "minimum": 1,
            "default": 32,
            "description": "Hidden width of the MLP"
        },
        "pretrain_lr": {
            "type": "number",
            "exclusiveMinimum": 0.0,
            "default": 0.01,
            "description": "AdamW learning rate of poisoned pretraining"
        },
        "pretrain_weight_decay": {
            "type": "number",
            "minimum": 0.0,
            "default": 0.01,
            "description": "AdamW weight decay of poisoned pretraining"
        },
        "pretrain_min_epochs": {
            "type": "integer",
            "minimum": 1,
            "default": 10,
            "description": "Epochs before the ASR target may stop pretraining"
        },
        "pretrain_max_epochs": {
            "type": "integer",
            "minimum": 1,
            "default": 300,
            "description": "Epoch cap of poisoned pretraining"
        },
        "pretrain_asr_target": {
            "type": "number",
            "minimum": 0.0,
            "maximum": 1.0,
            "default": 0.95,
            "description": "Held-out ASR that counts as an effective backdoor"
        },
        "method": {
            "type": "string",
            "enum": ["frozen", "fft", "lora", "rora"],
            "default": "rora",
            "description": "Fine-tuning method"
        },
        "toggles": {
            "type": "string",
            "default": "cl,tr,pt",
            "description": "RoRA mechanisms: comma-separated subset of cl,tr,pt or 'none'"
        },
        "lr": {
            "type": "number",
            "exclusiveMinimum": 0.0,
            "default": 0.002,
            "description": "Fine-tuning learning rate"
        },
        "weight_decay": {
            "type": "number",
            "minimum": 0.0,
            "default": 0.01,
            "description": "Fine-tuning AdamW weight decay"
        },
        "epochs": {
            "type": "integer",
            "minimum": 1,
            "default": 4,
            "description": "Fine-tuning epochs"
        },
        "batch_size": {
            "type": "integer",
            "minimum": 1,
            "default": 32,
            "description": "Mini-batch size for pretraining and fine-tuning"
        },
        "warmup_fraction": {
            "type": "number",
            "minimum": 0.0,
            "exclusiveMaximum": 1.0,
            "default": 0.0,
            "description": "Fraction of fine-tuning steps with a linear learning-rate warm-up"
        },
        "r": {
            "type": "integer",
            "minimum": 1,
            "default": 2,
            "description": "LoRA rank (clipped per layer to min(out, in))"
        },
        "alpha": {
            "type": "number",
            "exclusiveMinimum": 0.0,
            "default": 2.0,
            "description": "LoRA alpha; training scale is alpha / r"
        },
        "lam": {
            "type": "number",
            "minimum": 0.0,
            "default": 10.0,
            "description": "Weight of the subspace-orthogonality penalty"
        },
        "p": {
            "type": "number",
            "minimum": 0.0,
            "exclusiveMaximum": 1.0,
            "default": 0.1,
            "description": "Weight dropout rate on the pretrained weights"
        },
        "lora_dropout": {
            "type": "number",
            "minimum": 0.0,
            "exclusiveMaximum": 1.0,
            "default": 0.1,
            "description": "Dropout on the adapter input during LoRA/RoRA training"
        },
        "k": {
            "type": "integer",
            "minimum": 1,
            "default": 32,
            "description": "Rank of the pretrained subspaces in the penalty (clipped per layer)"
        },
        "adapter_layers": {
            "type": ["string", "array"],
            "default": "all",
            "description": "'all' or the list of layer names that carry an active adapter"
        },
        "rescale_layers": {
            "type": ["string", "array"],
            "default": "top3",
            "description": "Layers rescaled after training: none, all, topN or a list of names"
        },
        "axis": {
            "type": "string",
            "enum": ["s", "lambda", "p", "r", "alpha"],
            "default": "s",
            "description": "Sweep axis"
        },
        "values": {
            "type": "array",
            "items": {"type": "number"},
            "minItems": 1,
            "default": [1, 2, 4, 8, 16, 32, 64, 128],
            "description": "Sweep values"
        },
        "sweep_methods": {
            "type": "array",
            "items": {"type": "string", "enum": ["fft", "lora", "rora"]},
            "minItems": 1,
            "default": ["lora", "rora"],
            "description": "Methods compared by a scale sweep"
        },
        "ablation_cells": {
            "type": "array",
            "items": {"type": "string"},
            "minItems": 1,
            "default": ["none", "cl", "tr", "cl,tr,pt"],
            "description": "Toggle sets of the ablation grid"
        },
        "diagnostic_k": {
            "type": "integer",
            "minimum": 1,
            "default": 32,
            "description": "Pretrained left singular vectors compared in the alignment diagnostic"
        },
        "rho_rows": {
            "type": "integer",
            "minimum": 1,
            "default": 500,
            "description": "Maximum number of test rows used for dataset-level alignment coefficients"
        },
        "proposition_instances": {
            "type": "integer",
            "minimum": 1,
            "default": 1000,
            "description": "Valid random instances in the threshold soundness run"
        },
        "proposition_multipliers": {
            "type": "array",
            "items": {"type": "number", "exclusiveMinimum": 1.0},
            "minItems": 1,
            "default": [1.01, 1.1, 2.0, 10.0],
            "description": "Multiples of the threshold at which the triggered margin is checked"
        }
    }
}


def default_config():
    """Configuration with every key at its default."""
    defaults = {}
    for key, prop in EXPERIMENT_SCHEMA["properties"].items():
        value = prop["default"]
        defaults[key] = list(value) if isinstance(value, list) else value
    return defaults
