"""
Run directory files.

rows.csv, finals.csv and context_metrics.csv are append-only and flushed
after every run so an interrupted experiment leaves parseable partial CSV.
Floats are written with repr() so reading them back is exact.
"""

import csv
import json
import logging
import os
from dataclasses import astuple
from typing import Any, Dict, Iterable, List

from errors import DataError, ErrorCode
from reporting.report_builder import (CONTEXT_FIELDS, FINAL_FIELDS, ROW_FIELDS, ContextRow,
                                      EpochRow, FinalRow, MetricsReport)

logger = logging.getLogger(__name__)

ROWS_FILE = "rows.csv"
FINALS_FILE = "finals.csv"
CONTEXT_FILE = "context_metrics.csv"
SUMMARY_FILE = "summary.csv"
TIMING_FILE = "timing.json"
CONFIG_FILE = "config.json"
RUN_FILES = (ROWS_FILE, FINALS_FILE, CONTEXT_FILE, SUMMARY_FILE, TIMING_FILE, CONFIG_FILE)


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _write_atomic(path: str, text: str) -> str:
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", newline="", encoding="utf-8") as handle:
        handle.write(text)
    os.replace(tmp_path, path)
    return path


class RunDirectoryWriter:
    """Writes the files of one experiment run into `run_dir`."""

    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        os.makedirs(run_dir, exist_ok=True)
        for name, fields in ((ROWS_FILE, ROW_FIELDS), (FINALS_FILE, FINAL_FIELDS),
                             (CONTEXT_FILE, CONTEXT_FIELDS)):
            with open(self.path(name), "w", newline="", encoding="utf-8") as handle:
                csv.writer(handle, lineterminator="\n").writerow(fields)

    def path(self, name: str) -> str:
        return os.path.join(self.run_dir, name)

    def _append(self, name: str, records: Iterable):
        with open(self.path(name), "a", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            for record in records:
                writer.writerow([_cell(value) for value in astuple(record)])
            handle.flush()

    def append_rows(self, rows: List[EpochRow]):
        self._append(ROWS_FILE, rows)

    def append_final(self, final: FinalRow):
        self._append(FINALS_FILE, [final])

    def append_context_rows(self, rows: List[ContextRow]):
        self._append(CONTEXT_FILE, rows)

    def write_text(self, name: str, text: str) -> str:
        return _write_atomic(self.path(name), text)

    def write_json(self, name: str, payload: Dict[str, Any]) -> str:
        return self.write_text(name, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_summary(run_dir: str, summary_csv: str) -> str:
    """Replace summary.csv in `run_dir`."""
    path = _write_atomic(os.path.join(run_dir, SUMMARY_FILE), summary_csv)
    logger.info(f"Wrote {path}")
    return path


def _read_csv(path: str, fields) -> List[Dict[str, str]]:
    with open(path, "r", newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != tuple(fields):
            raise DataError(ErrorCode.PARSE_ERROR,
                            f"{path}: header {reader.fieldnames} != {list(fields)}")
        records = []
        for line_number, record in enumerate(reader, start=2):
            if None in record or any(value is None for value in record.values()):
                # a torn final line from an interrupted run
                logger.warning(f"{path}: skipping incomplete line {line_number}")
                continue
            records.append(record)
        return records


def read_report(run_dir: str) -> MetricsReport:
    """Rebuild a MetricsReport from rows.csv, finals.csv and the optional extras."""
    for name in (ROWS_FILE, FINALS_FILE):
        if not os.path.isfile(os.path.join(run_dir, name)):
            raise DataError(ErrorCode.PARSE_ERROR, f"{run_dir} has no {name}")
    try:
        rows = [EpochRow(method=r["method"], seed=int(r["seed"]), epoch=int(r["epoch"]),
                         train_loss=float(r["train_loss"]), train_acc=float(r["train_acc"]),
                         eval_acc=float(r["eval_acc"]))
                for r in _read_csv(os.path.join(run_dir, ROWS_FILE), ROW_FIELDS)]
        finals = [FinalRow(method=r["method"], seed=int(r["seed"]), acc=float(r["acc"]),
                           prec=float(r["prec"]), rec=float(r["rec"]), f1=float(r["f1"]))
                  for r in _read_csv(os.path.join(run_dir, FINALS_FILE), FINAL_FIELDS)]
        context_rows = []
        if os.path.isfile(os.path.join(run_dir, CONTEXT_FILE)):
            context_rows = [
                ContextRow(method=r["method"], seed=int(r["seed"]), context=int(r["context"]),
                           acc=float(r["acc"]), prec=float(r["prec"]), rec=float(r["rec"]),
                           f1=float(r["f1"]))
                for r in _read_csv(os.path.join(run_dir, CONTEXT_FILE), CONTEXT_FIELDS)]
    except ValueError as exc:
        raise DataError(ErrorCode.PARSE_ERROR, f"{run_dir}: {exc}") from exc

    wall_s, include_timing = {}, False
    timing_path = os.path.join(run_dir, TIMING_FILE)
    if os.path.isfile(timing_path):
        with open(timing_path, "r", encoding="utf-8") as handle:
            timing = json.load(handle)
        wall_s = {method: float(seconds) for method, seconds in timing.get("wall_s", {}).items()}
        include_timing = bool(timing.get("include_timing", False))

    return MetricsReport(rows=rows, finals=finals, context_rows=context_rows, wall_s=wall_s,
                         include_timing=include_timing)
