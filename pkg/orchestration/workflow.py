"""
Experiment workflow: drives data synthesis, poisoned pretraining,
fine-tuning, evaluation, sweeps, ablations and diagnostics for every seed of
a resolved configuration, and collects the result records.
"""

import logging
import os
import platform
import threading
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.rng import Rng
from data.dataset_io import dataset_to_tensors, export_csv
from data.synth import Dataset, TaskSpec, TriggerSpec, poison, proxy_shift, sample_clean
from hubs.report_hub import ReportHub
from memory.checkpoint_store import Checkpoint, load_checkpoint, save_checkpoint, stack_from_checkpoint, stack_to_checkpoint
from models.lora import ModelStack
from models.method_presets import parse_toggles
from schemas.report_schema import RESOLVED_CONFIG_FILE, SUMMARY_FILE
from spectral.diagnostics import spectral_report, subspace_overlap
from spectral.rescaling import apply_rescale
from spectral.threshold import aggregate_rhos, check_proposition_soundness
from training.evaluation import Metrics, evaluate, evaluate_frozen_baseline, scale_sweep
from training.trainer import FinetuneResult, TrainingHistory, finetune, pretrain_poison
from utils.errors import ConfigError, LabError
from utils.json_utils import dumps_canonical, write_json_file
from utils.validation_utils import resolve_adapter_layers, validate_experiment_config

logger = logging.getLogger(__name__)

__version__ = "0.1.0"

# Keys that determine the synthetic data and the backbone shape of a seed.
DATA_KEYS = (
    "d", "num_classes", "noise_std", "shift", "tau", "y_bd",
    "n_proxy", "n_proxy_heldout", "n_poison", "clean_label",
    "n_train", "n_test", "architecture", "hidden",
)

# Config key changed by each non-scale sweep axis.
SWEEP_KEYS = {"lambda": "lam", "p": "p", "r": "r", "alpha": "alpha"}


@dataclass
class SeedData:
    """Every dataset of one seed, generated from named child streams."""

    seed: int
    task: TaskSpec
    proxy: TaskSpec
    trigger: TriggerSpec
    proxy_train: Dataset
    proxy_heldout: Dataset
    clean_train: Dataset
    clean_test: Dataset


def build_seed_data(cfg: Dict[str, Any], seed: int) -> SeedData:
    """
    Synthesize target task, shifted proxy, trigger and all datasets for ``seed``.

    Args:
        cfg: Resolved experiment configuration
        seed: Root seed

    Returns:
        SeedData with the poisoned proxy training set and clean target sets
    """
    root = Rng(seed)
    task = TaskSpec.random(cfg["d"], cfg["num_classes"], cfg["noise_std"], seed)
    proxy = proxy_shift(task, cfg["shift"], root.child("proxy"))
    trigger = TriggerSpec.random(task, cfg["tau"], cfg["y_bd"], root.child("trigger"))
    proxy_clean = sample_clean(proxy, cfg["n_proxy"], root.child("proxy_train"))
    proxy_train = poison(proxy_clean, trigger, cfg["n_poison"], cfg["clean_label"], root.child("poison"))
    proxy_heldout = sample_clean(proxy, cfg["n_proxy_heldout"], root.child("proxy_heldout"))
    clean_train = sample_clean(task, cfg["n_train"], root.child("train"))
    clean_test = sample_clean(task, cfg["n_test"], root.child("test"))
    logger.debug(
        f"Seed {seed}: {proxy_train.n} proxy rows ({int(proxy_train.poisoned_mask.sum())} poisoned), "
        f"{clean_train.n} train, {clean_test.n} test"
    )
    return SeedData(seed, task, proxy, trigger, proxy_train, proxy_heldout, clean_train, clean_test)


def resolve_thread_count(value: Optional[Any] = None) -> int:
    """Worker count from the argument, else ``SLL_THREADS``, else 1."""
    raw = value if value is not None else os.environ.get("SLL_THREADS", "1")
    try:
        threads = int(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"SLL_THREADS must be a positive integer, got '{raw}'") from e
    if threads < 1:
        raise ConfigError(f"SLL_THREADS must be a positive integer, got {threads}")
    return threads


def output_scale(stack: ModelStack) -> float:
    """Inference scale of the output layer, 0 when it carries no active adapter."""
    layer = stack.layers[-1]
    return float(layer.inference_scale) if layer.active else 0.0


class ExperimentWorkflow:
    """
    Runs one command of the experiment harness over every configured seed.

    Independent runs (seeds, sweep points, ablation cells) are fanned out on
    a thread pool; every record carries a sort key so the emitted files do
    not depend on completion order.
    """

    def __init__(self, config: Dict[str, Any], out_dir: str, threads: Optional[int] = None):
        """
        Initialize the workflow.

        Args:
            config: Raw or resolved configuration (validated here)
            out_dir: Run directory receiving reports, checkpoints and the resolved config
            threads: Worker count, defaults to ``SLL_THREADS``
        """
        self.config = validate_experiment_config(config)
        self.out_dir = out_dir
        self.threads = resolve_thread_count(threads)
        self.hub = ReportHub(self.config["experiment_id"])
        self.current_stage: Optional[str] = None
        self.completed_stages: List[str] = []
        self.errors: List[Dict[str, Any]] = []
        self.command: Optional[str] = None

        self._lock = threading.Lock()
        self._data: Dict[Tuple, SeedData] = {}
        self._poisoned: Dict[int, ModelStack] = {}
        self._pretrain_epochs: Dict[int, int] = {}

        os.makedirs(out_dir, exist_ok=True)

    # Stage tracking

    def _update_stage(self, stage: str):
        self.current_stage = stage
        logger.info(f"Experiment {self.config['experiment_id']} moved to stage: {stage}")

    def _complete_stage(self, stage: str):
        if stage not in self.completed_stages:
            self.completed_stages.append(stage)
        logger.info(f"Experiment {self.config['experiment_id']} completed stage: {stage}")

    def _record_error(self, stage: str, error: Exception):
        self.errors.append({
            "stage": stage,
            "error": str(error),
            "error_type": type(error).__name__,
            "time": datetime.now().isoformat(),
        })
        logger.error(f"Error in stage {stage}: {error}")
        logger.debug(traceback.format_exc())

    def get_status(self) -> Dict[str, Any]:
        """Current stage, completed stages and recorded errors."""
        return {
            "command": self.command,
            "current_stage": self.current_stage,
            "completed_stages": list(self.completed_stages),
            "errors": list(self.errors),
        }

    def _run_stage(self, stage: str, fn: Callable[[], Any]) -> Any:
        self._update_stage(stage)
        try:
            result = fn()
        except LabError as e:
            self._record_error(stage, e)
            raise
        self._complete_stage(stage)
        return result

    # Worker pool

    def _map(self, fn: Callable[[Any], Any], jobs: Sequence[Any]) -> List[Any]:
        """Apply ``fn`` to every job; results come back in job order."""
        jobs = list(jobs)
        if self.threads == 1 or len(jobs) <= 1:
            return [fn(job) for job in jobs]
        workers = min(self.threads, len(jobs))
        logger.debug(f"Running {len(jobs)} jobs on {workers} workers")
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fn, job) for job in jobs]
            return [future.result() for future in futures]

    # Per-seed building blocks

    @property
    def seeds(self) -> List[int]:
        return list(self.config["seeds"])

    def seed_data(self, seed: int, cfg: Optional[Dict[str, Any]] = None) -> SeedData:
        cfg = cfg or self.config
        key = (seed,) + tuple(cfg[k] for k in DATA_KEYS)
        with self._lock:
            cached = self._data.get(key)
        if cached is not None:
            return cached
        data = build_seed_data(cfg, seed)
        with self._lock:
            return self._data.setdefault(key, data)

    def poisoned_model(self, seed: int) -> ModelStack:
        """Poisoned backbone of ``seed``, pretrained once and cached."""
        with self._lock:
            cached = self._poisoned.get(seed)
        if cached is not None:
            return cached
        data = self.seed_data(seed)
        history = TrainingHistory()
        stack = pretrain_poison(
            self.config, data.proxy_train, data.proxy_heldout, data.trigger,
            Rng(seed).child("pretrain"), history=history,
        )
        logger.info(f"Seed {seed}: poisoned backbone after {history.epochs} epochs (ASR {history.records[-1].asr:.4f})")
        with self._lock:
            self._pretrain_epochs[seed] = history.epochs
            return self._poisoned.setdefault(seed, stack)

    def use_poisoned_checkpoint(self, path: str) -> int:
        """
        Register a poisoned backbone from a checkpoint and restrict the run to its seed.

        Raises:
            ConfigError: If the checkpoint was built from different data settings
        """
        ckpt = load_checkpoint(path)
        seed = self._checkpoint_seed(ckpt.metadata, path)
        self._check_data_keys(ckpt.config, path)
        self.adopt_poisoned(seed, stack_from_checkpoint(ckpt))
        self.config["seeds"] = [seed]
        return seed

    def adopt_poisoned(self, seed: int, stack: ModelStack) -> None:
        """Use ``stack`` as the poisoned backbone of ``seed`` instead of pretraining one."""
        with self._lock:
            self._poisoned[seed] = stack.set_mode("frozen")

    def _checkpoint_seed(self, metadata: Dict[str, Any], path: str) -> int:
        if "seed" not in metadata:
            raise ConfigError(f"Checkpoint {path} does not record its seed")
        return int(metadata["seed"])

    def _check_data_keys(self, other: Dict[str, Any], path: str) -> None:
        mismatched = [k for k in DATA_KEYS if k in other and other[k] != self.config[k]]
        if mismatched:
            raise ConfigError(f"Checkpoint {path} was built with different settings for {mismatched}")

    def _finetune(
        self, seed: int, method: Optional[str] = None, toggles: Optional[Any] = None,
        cfg: Optional[Dict[str, Any]] = None,
    ) -> FinetuneResult:
        cfg = cfg or self.config
        data = self.seed_data(seed)
        return finetune(
            cfg, self.poisoned_model(seed), data.clean_train, Rng(seed).child("finetune"),
            method=method, toggles=toggles, adapter_layers=resolve_adapter_layers(cfg),
        )

    def _prepare_backbones(self) -> None:
        self._run_stage("synth", lambda: self._map(self.seed_data, self.seeds))
        self._run_stage("pretrain", lambda: self._map(self.poisoned_model, self.seeds))

    def _add_metrics(self, method: str, seed: int, s: float, metrics: Metrics, key: tuple) -> None:
        self.hub.add("metrics", {"method": method, "seed": seed, "s": s, **metrics.as_dict()}, key=key)

    def _add_baselines(self) -> None:
        def baseline(seed):
            data = self.seed_data(seed)
            return evaluate_frozen_baseline(self.poisoned_model(seed), data.clean_test, data.trigger)

        results = self._run_stage("baseline", lambda: self._map(baseline, self.seeds))
        for seed, metrics in zip(self.seeds, results):
            self._add_metrics("frozen", seed, 0.0, metrics, key=(seed, 0))

    def _layer_label(self, layer: str, seed: int) -> str:
        return layer if len(self.seeds) == 1 else f"{layer}@seed{seed}"

    def _save_model(self, stack: ModelStack, name: str, metadata: Dict[str, Any]) -> str:
        path = os.path.join(self.out_dir, f"{name}.sllb")
        return save_checkpoint(path, stack_to_checkpoint(stack, self.config, metadata))

    def _load_model(self, path: str) -> Tuple[ModelStack, Dict[str, Any]]:
        ckpt = load_checkpoint(path)
        seed = self._checkpoint_seed(ckpt.metadata, path)
        self._check_data_keys(ckpt.config, path)
        self.config["seeds"] = [seed]
        return stack_from_checkpoint(ckpt), ckpt.metadata

    # Commands

    def synth(self) -> List[str]:
        """Generate and export every dataset of every seed."""
        self.command = "synth"
        written = []

        def export(seed):
            data = self.seed_data(seed)
            seed_dir = os.path.join(self.out_dir, f"seed_{seed}")
            paths = [
                export_csv(getattr(data, name), os.path.join(seed_dir, f"{name}.csv"))
                for name in ("proxy_train", "proxy_heldout", "clean_train", "clean_test")
            ]
            tensors = {}
            for name in ("proxy_train", "proxy_heldout", "clean_train", "clean_test"):
                tensors.update(dataset_to_tensors(getattr(data, name), name))
            tensors["trigger.t"] = data.trigger.t.reshape(1, -1)
            tensors["task.class_means"] = data.task.class_means
            tensors["proxy.class_means"] = data.proxy.class_means
            ckpt = Checkpoint(
                tensors=tensors,
                trailer=dumps_canonical({"config": self.config, "metadata": {"method": "data", "seed": seed}}),
            )
            paths.append(save_checkpoint(os.path.join(seed_dir, "data.sllb"), ckpt))
            return paths, {
                "seed": seed,
                "proxy_rows": data.proxy_train.n,
                "poisoned_rows": int(data.proxy_train.poisoned_mask.sum()),
                "train_rows": data.clean_train.n,
                "test_rows": data.clean_test.n,
            }

        results = self._run_stage("synth", lambda: self._map(export, self.seeds))
        for paths, _ in results:
            written.extend(paths)
        self.hub.update_summary(datasets=[info for _, info in results])
        return written

    def pretrain_poison(self) -> List[str]:
        """Poison every seed's backbone, record the no-finetune baseline and save it."""
        self.command = "pretrain-poison"
        self._prepare_backbones()
        self._add_baselines()
        paths = []
        for seed in self.seeds:
            paths.append(self._save_model(
                self.poisoned_model(seed), f"poisoned_seed{seed}",
                {"method": "poisoned", "seed": seed, "pretrain_epochs": self._pretrain_epochs.get(seed)},
            ))
        self.hub.update_summary(pretrain_epochs={str(k): v for k, v in sorted(self._pretrain_epochs.items())})
        return paths

    def finetune(self, method: Optional[str] = None, toggles: Optional[Any] = None, checkpoint: Optional[str] = None) -> List[str]:
        """
        Fine-tune every seed's poisoned backbone with one method and evaluate it.

        Args:
            method: Fine-tuning method, defaults to the configured one
            toggles: RoRA toggles, defaults to the configured ones
            checkpoint: Poisoned backbone to start from instead of pretraining

        Returns:
            Checkpoint paths of the fine-tuned models
        """
        self.command = "finetune"
        method = method or self.config["method"]
        if checkpoint:
            self.use_poisoned_checkpoint(checkpoint)
        self._prepare_backbones()
        self._add_baselines()

        results = self._run_stage("finetune", lambda: self._map(lambda seed: self._finetune(seed, method, toggles), self.seeds))

        def score(item):
            seed, result = item
            data = self.seed_data(seed)
            return evaluate(result.stack, None, data.clean_test, data.trigger)

        pairs = list(zip(self.seeds, results))
        scores = self._run_stage("evaluate", lambda: self._map(score, pairs))
        paths = []
        for (seed, result), metrics in zip(pairs, scores):
            self._add_metrics(method, seed, output_scale(result.stack), metrics, key=(seed, 1))
            paths.append(self._save_model(
                result.stack, f"{method}_seed{seed}",
                {"method": method, "seed": seed, "toggles": result.toggles, "final_loss": result.history.final_loss},
            ))
        self._summarize_metrics()
        return paths

    def evaluate_checkpoint(self, checkpoint: str) -> Metrics:
        """Evaluate a saved model on its seed's clean test set at its inference scales."""
        self.command = "eval"
        stack, meta = self._load_model(checkpoint)
        seed = self.seeds[0]
        data = self._run_stage("synth", lambda: self.seed_data(seed))
        metrics = self._run_stage("evaluate", lambda: evaluate(stack, None, data.clean_test, data.trigger))
        self._add_metrics(meta.get("method", "unknown"), seed, output_scale(stack), metrics, key=(seed,))
        self._summarize_metrics()
        return metrics

    def rescale_checkpoint(self, checkpoint: str, layers: Optional[Any] = None) -> str:
        """Apply post-training rescaling to a saved model, report and save the result."""
        self.command = "rescale"
        stack, meta = self._load_model(checkpoint)
        seed = self.seeds[0]
        selector = layers if layers is not None else self.config["rescale_layers"]
        rescaled = apply_rescale(stack, selector)
        data = self.seed_data(seed)
        metrics = self._run_stage("evaluate", lambda: evaluate(rescaled, None, data.clean_test, data.trigger))
        method = f"{meta.get('method', 'unknown')}+pt"
        self._add_metrics(method, seed, output_scale(rescaled), metrics, key=(seed,))
        for i, record in enumerate(spectral_report(rescaled, self.config["diagnostic_k"]).records):
            self.hub.add("spectral", record.as_row(), key=(seed, i))
        self._summarize_metrics()
        return self._save_model(rescaled, f"{method}_seed{seed}", {**meta, "method": method, "seed": seed})

    def diagnose(self, checkpoint: Optional[str] = None, method: Optional[str] = None) -> None:
        """
        Spectral report per adapted layer, rho coefficients for the linear
        architecture and subspace overlap of the update.
        """
        self.command = "diagnose"
        if checkpoint:
            stack, _ = self._load_model(checkpoint)
            models = [(self.seeds[0], stack)]
        else:
            self._prepare_backbones()
            results = self._run_stage("finetune", lambda: self._map(lambda seed: self._finetune(seed, method), self.seeds))
            models = list(zip(self.seeds, [r.stack for r in results]))

        def diagnose_one(item):
            seed, stack = item
            report = spectral_report(stack, self.config["diagnostic_k"])
            rhos = None
            if self.config["architecture"] == "linear" and not report.untrained_layers:
                data = self.seed_data(seed)
                layer = stack.layers[0]
                rhos = aggregate_rhos(layer.w_pre, layer.delta(), data.clean_test, data.trigger, self.config["rho_rows"])
            return report, rhos, subspace_overlap(stack, self.config["k"])

        outputs = self._run_stage("evaluate", lambda: self._map(diagnose_one, models))
        overlaps = {}
        for (seed, stack), (report, rhos, overlap) in zip(models, outputs):
            for i, record in enumerate(report.records):
                row = record.as_row()
                row["layer"] = self._layer_label(record.layer, seed)
                self.hub.add("spectral", row, key=(seed, i))
            if rhos is not None:
                self._add_rho_rows(seed, rhos, output_scale(stack))
            overlaps[str(seed)] = overlap
        self.hub.update_summary(subspace_overlap=overlaps)

    def _add_rho_rows(self, seed: int, rhos, inference_scale: float) -> None:
        worst = rhos.worst
        self.hub.add("rho", {
            "seed": seed, "kind": "worst", "rho_bd": worst.rho_bd, "rho_cl": worst.rho_cl,
            "rho_tr": worst.rho_tr, "rho_eff": worst.rho_eff, "s_star": worst.s_star,
        }, key=(seed, 0))
        self.hub.add("rho", {
            "seed": seed, "kind": "mean", "rho_bd": rhos.mean_rho_bd, "rho_cl": rhos.mean_rho_cl,
            "rho_tr": rhos.mean_rho_tr, "rho_eff": rhos.mean_rho_eff, "s_star": rhos.mean_s_star,
        }, key=(seed, 1))
        self.hub.update_summary_entry("rho", str(seed), {
            "rows": rhos.rows,
            "inference_scale": inference_scale,
            "s_star_worst": worst.s_star,
            "s_star_mean": rhos.mean_s_star,
            "s_star_quantiles": rhos.s_star_quantiles,
        })

    def threshold(self, checkpoint: Optional[str] = None) -> None:
        """Soundness run of the scaling threshold on random instances (and a checkpoint's rhos)."""
        self.command = "threshold"
        cfg = self.config
        seed = self.seeds[0]
        if checkpoint:
            stack, _ = self._load_model(checkpoint)
            if len(stack.layers) != 1:
                raise ConfigError("Threshold coefficients are defined for the single-layer model only")
            data = self.seed_data(seed)
            layer = stack.layers[0]
            rhos = aggregate_rhos(layer.w_pre, layer.delta(), data.clean_test, data.trigger, cfg["rho_rows"])
            self._add_rho_rows(seed, rhos, output_scale(stack))
        report = self._run_stage("evaluate", lambda: check_proposition_soundness(
            n=cfg["proposition_instances"], seed=seed, multipliers=cfg["proposition_multipliers"],
        ))
        self.hub.add("proposition", report.as_row())
        self.hub.update_summary(proposition={
            "attempts": report.attempts,
            "skipped": report.skipped,
            "multipliers": list(report.multipliers),
            "s_star_quantiles": list(report.s_star_quantiles),
        })

    def sweep(self, axis: Optional[str] = None, values: Optional[Sequence[float]] = None) -> None:
        """
        Sweep one axis over values x seeds.

        The scale axis re-evaluates one fine-tuned model per method and seed
        at every scale; other axes fine-tune a fresh model per value.
        """
        self.command = "sweep"
        axis = axis or self.config["axis"]
        values = list(values if values is not None else self.config["values"])
        self._prepare_backbones()

        if axis == "s":
            methods = list(self.config["sweep_methods"])
            jobs = [(mi, method, seed) for mi, method in enumerate(methods) for seed in self.seeds]

            def run(job):
                _, method, seed = job
                data = self.seed_data(seed)
                result = self._finetune(seed, method)
                return scale_sweep(result.stack, values, data.clean_test, data.trigger)

            results = self._run_stage("finetune", lambda: self._map(run, jobs))
            for (mi, method, seed), points in zip(jobs, results):
                for vi, (s, metrics) in enumerate(points):
                    self._add_sweep_row(method, seed, axis, s, s, metrics, key=(mi, vi, seed))
            return

        key_name = SWEEP_KEYS[axis]
        method = self.config["method"]
        jobs = [(vi, value, seed) for vi, value in enumerate(values) for seed in self.seeds]

        def run(job):
            _, value, seed = job
            cfg = dict(self.config)
            cfg[key_name] = int(value) if axis == "r" else float(value)
            data = self.seed_data(seed)
            result = self._finetune(seed, method, cfg=cfg)
            return output_scale(result.stack), evaluate(result.stack, None, data.clean_test, data.trigger)

        results = self._run_stage("finetune", lambda: self._map(run, jobs))
        for (vi, value, seed), (s, metrics) in zip(jobs, results):
            self._add_sweep_row(method, seed, axis, value, s, metrics, key=(vi, seed))

    def _add_sweep_row(self, method: str, seed: int, axis: str, value: float, s: float, metrics: Metrics, key: tuple) -> None:
        self.hub.add("sweep", {
            "method": method, "seed": seed, "axis": axis, "value": value, "s": s, **metrics.as_dict(),
        }, key=key)

    def ablate(self, cells: Optional[Sequence[Any]] = None) -> None:
        """Fine-tune RoRA once per toggle cell and seed."""
        self.command = "ablate"
        cells = list(cells if cells is not None else self.config["ablation_cells"])
        self._prepare_backbones()
        jobs = [(ci, cell, seed) for ci, cell in enumerate(cells) for seed in self.seeds]

        def run(job):
            _, cell, seed = job
            data = self.seed_data(seed)
            result = self._finetune(seed, "rora", toggles=cell)
            return result.toggles, evaluate(result.stack, None, data.clean_test, data.trigger)

        results = self._run_stage("finetune", lambda: self._map(run, jobs))
        for (ci, cell, seed), (toggles, metrics) in zip(jobs, results):
            self.hub.add("ablation", {
                "cell": cell_label(cell), "seed": seed, **toggles, **metrics.as_dict(),
            }, key=(ci, seed))

    # Output

    def _summarize_metrics(self) -> None:
        self.hub.update_summary(metrics=self.hub.rows("metrics"))

    def write_resolved_config(self) -> str:
        return write_json_file(os.path.join(self.out_dir, RESOLVED_CONFIG_FILE), self.config)

    def finish(self) -> List[str]:
        """Write the resolved config, the reports and the summary."""
        self.hub.update_summary(
            command=self.command,
            seeds=self.seeds,
            versions={"sll": __version__, "numpy": np.__version__, "python": platform.python_version()},
        )
        paths = [self.write_resolved_config()]
        if self.hub.records():
            paths.extend(self.hub.emit(self.out_dir))
        else:
            paths.append(write_json_file(os.path.join(self.out_dir, SUMMARY_FILE), self.hub.summary))
        logger.info(f"Experiment {self.config['experiment_id']} wrote {len(paths)} files to {self.out_dir}")
        return paths


def cell_label(cell: Any) -> str:
    """Canonical name of an ablation cell, e.g. ``cl,tr,pt`` or ``none``."""
    toggles = parse_toggles(cell)
    enabled = [name for name, on in toggles.items() if on]
    return ",".join(enabled) if enabled else "none"
