import csv
import logging
import os
from typing import Dict

import numpy as np

from data.synth import Dataset
from utils.errors import CheckpointError

logger = logging.getLogger(__name__)


def csv_header(d: int):
    return [f"x_{i}" for i in range(d)] + ["label", "poisoned"]


def export_csv(dataset: Dataset, path: str) -> str:
    """
    Write a dataset as CSV with header ``x_0..x_{d-1},label,poisoned``.

    Args:
        dataset: Dataset to export
        path: Target file path

    Returns:
        The path written
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(csv_header(dataset.d))
        for row, label, poisoned in zip(dataset.inputs, dataset.labels, dataset.poisoned_mask):
            writer.writerow([repr(float(v)) for v in row] + [int(label), int(bool(poisoned))])
    logger.info(f"Exported {dataset.n} rows to {path}")
    return path


def import_csv(path: str) -> Dataset:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        d = len(header) - 2
        if d < 1 or header != csv_header(d):
            raise ValueError(f"Unexpected dataset CSV header in {path}")
        rows, labels, poisoned = [], [], []
        for record in reader:
            rows.append([float(v) for v in record[:d]])
            labels.append(int(record[d]))
            poisoned.append(record[d + 1] == "1")
    return Dataset(np.array(rows, dtype=np.float64).reshape(len(rows), d), labels, poisoned)


def dataset_to_tensors(dataset: Dataset, prefix: str) -> Dict[str, np.ndarray]:
    """Checkpoint blocks ``<prefix>.inputs``, ``<prefix>.labels`` and ``<prefix>.poisoned``."""
    return {
        f"{prefix}.inputs": dataset.inputs.copy(),
        f"{prefix}.labels": dataset.labels.astype(np.float64).reshape(-1, 1),
        f"{prefix}.poisoned": dataset.poisoned_mask.astype(np.float64).reshape(-1, 1),
    }


def dataset_from_tensors(tensors: Dict[str, np.ndarray], prefix: str) -> Dataset:
    try:
        inputs = tensors[f"{prefix}.inputs"]
        labels = tensors[f"{prefix}.labels"].reshape(-1)
        poisoned = tensors[f"{prefix}.poisoned"].reshape(-1)
    except KeyError as e:
        raise CheckpointError(f"Checkpoint has no dataset block {e}") from e
    return Dataset(inputs, labels.astype(np.int64), poisoned != 0.0)
