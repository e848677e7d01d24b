import csv
import logging
import math
import os
import threading
from typing import Any, Dict, List, Optional

from tabulate import tabulate

from schemas.report_schema import REPORT_HEADERS, SUMMARY_FILE, report_file
from utils.errors import ReportError
from utils.json_utils import dumps_canonical

logger = logging.getLogger(__name__)


def format_cell(value: Any) -> str:
    """CSV text of one value; floats use repr so reruns are byte-identical."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "item"):
        return format_cell(value.item())
    return str(value)


def emit_reports(records: Dict[str, List[Dict[str, Any]]], out_dir: str, summary: Optional[Dict[str, Any]] = None) -> List[str]:
    """
    Write one CSV per report kind plus ``summary.json``.

    Args:
        records: Rows by report kind; each row holds exactly the kind's columns
        out_dir: Output directory (created if missing)
        summary: Structured run summary

    Returns:
        Paths written

    Raises:
        ReportError: If there is nothing to write, a kind or column is
            unknown, or the directory is not writable
    """
    non_empty = {kind: rows for kind, rows in records.items() if rows}
    if not non_empty:
        raise ReportError("No report records to emit")
    unknown = sorted(set(non_empty) - set(REPORT_HEADERS))
    if unknown:
        raise ReportError(f"Unknown report kinds {unknown}")

    written = []
    try:
        os.makedirs(out_dir, exist_ok=True)
        for kind, rows in non_empty.items():
            header = REPORT_HEADERS[kind]
            path = os.path.join(out_dir, report_file(kind))
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(header)
                for row in rows:
                    if set(row) != set(header):
                        raise ReportError(f"{kind} row has columns {sorted(row)}, expected {header}")
                    writer.writerow([format_cell(row[col]) for col in header])
            written.append(path)
            logger.info(f"Wrote {len(rows)} {kind} rows to {path}")
        if summary is not None:
            path = os.path.join(out_dir, SUMMARY_FILE)
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                f.write(dumps_canonical(summary))
            written.append(path)
    except OSError as e:
        raise ReportError(f"Cannot write reports to {out_dir}: {e}") from e
    return written


class ReportHub:
    """
    Collects report rows from concurrent runs and emits them once.

    Rows are stored with a sort key so the written order does not depend on
    which worker finished first.
    """

    def __init__(self, experiment_id: str):
        self.experiment_id = experiment_id
        self._lock = threading.Lock()
        self._rows: Dict[str, List[tuple]] = {}
        self.summary: Dict[str, Any] = {"experiment_id": experiment_id}

    def add(self, kind: str, row: Dict[str, Any], key: tuple = ()) -> None:
        if kind not in REPORT_HEADERS:
            raise ReportError(f"Unknown report kind '{kind}'")
        with self._lock:
            rows = self._rows.setdefault(kind, [])
            rows.append((key, len(rows), row))

    def rows(self, kind: str) -> List[Dict[str, Any]]:
        with self._lock:
            entries = sorted(self._rows.get(kind, []), key=lambda e: (e[0], e[1]))
        return [row for _, _, row in entries]

    def records(self) -> Dict[str, List[Dict[str, Any]]]:
        return {kind: self.rows(kind) for kind in REPORT_HEADERS if self._rows.get(kind)}

    def update_summary(self, **entries: Any) -> None:
        with self._lock:
            self.summary.update(entries)

    def update_summary_entry(self, section: str, key: str, value: Any) -> None:
        """Set ``summary[section][key]``, creating the section on first use."""
        with self._lock:
            entry = self.summary.setdefault(section, {})
            if not isinstance(entry, dict):
                raise ReportError(f"Summary section '{section}' is not a mapping")
            entry[key] = value

    def emit(self, out_dir: str) -> List[str]:
        return emit_reports(self.records(), out_dir, self.summary)

    def render(self, kind: str) -> str:
        """Console table of one report kind."""
        rows = self.rows(kind)
        header = REPORT_HEADERS[kind]
        table = [[_short(row[col]) for col in header] for row in rows]
        return tabulate(table, headers=header, tablefmt="grid")


def _short(value: Any) -> Any:
    if isinstance(value, float) and math.isfinite(value):
        return round(value, 4)
    return value
