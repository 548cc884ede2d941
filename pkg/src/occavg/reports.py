"""Report files: atomic writes, provenance headers, and metric records.

CSV files start with ``#`` comment lines (command, timestamp, config hash,
seed, and every resolved config key) followed by a deterministic body.  Only
the header changes between reruns of the same config and seed.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
import time
from dataclasses import dataclass
from datetime import datetime, timezone

from .config import ExperimentConfig


@dataclass(frozen=True)
class ReportRecord:
    experiment: str
    metric: str
    value: float
    stderr: float
    parameters: str  # "key=value;key=value"
    seed: int
    config_hash: str
    wall_time: float = 0.0


def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temp file in the same directory and a rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_body(text):
    """The deterministic part of a report: everything after the leading comment lines."""
    lines = text.splitlines(keepends=True)
    k = 0
    while k < len(lines) and lines[k].startswith("#"):
        k += 1
    return "".join(lines[k:])


def read_body(path):
    with open(path, encoding="utf-8") as fh:
        return csv_body(fh.read())


def format_params(params: dict):
    return ";".join(f"{k}={params[k]}" for k in sorted(params))


class ReportWriter:
    """Collects records for one command and writes its files under ``out_dir``."""

    def __init__(self, out_dir, config: ExperimentConfig, command: str):
        self.out_dir = out_dir
        self.config = config
        self.command = command
        self.records: list[ReportRecord] = []
        self.files: list[str] = []
        self._t0 = time.perf_counter()

    def header(self, extra=None):
        now = datetime.now(timezone.utc).isoformat(timespec="seconds")
        lines = [f"occavg {self.command}", f"generated: {now}", f"config_hash: {self.config.hash}",
                 f"seed: {self.config.seed}"]
        lines += list(extra or [])
        lines += self.config.header_lines()
        return "".join(f"# {ln}\n" for ln in lines)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def write_csv(self, name, body, extra_header=None):
        atomic_write(self.path(name), self.header(extra_header) + body)
        self.files.append(name)

    def write_text(self, name, text):
        """Files in other formats (plans, LP text) are written without a header."""
        atomic_write(self.path(name), text)
        self.files.append(name)

    def record(self, metric, value, stderr=0.0, **params):
        self.records.append(ReportRecord(self.command, metric, float(value), float(stderr),
                                         format_params(params), self.config.seed, self.config.hash,
                                         time.perf_counter() - self._t0))

    def extend(self, records):
        self.records.extend(records)

    def records_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "metric", "value", "stderr", "parameters", "seed", "config_hash"])
        for r in self.records:
            w.writerow([r.experiment, r.metric, repr(r.value), repr(r.stderr), r.parameters, r.seed, r.config_hash])
        return buf.getvalue()

    def finish(self):
        wall = time.perf_counter() - self._t0
        # wall time is not reproducible, so it goes in the header only
        self.write_csv("records.csv", self.records_csv(), [f"wall_time_s: {wall:.3f}"])
        return self.files
