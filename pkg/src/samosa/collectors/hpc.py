"""Parse ``perf stat -x, -I <ms>`` interval output.

Each data row is::

    <interval-seconds>,<value>,<unit>,<event>,<run-time>,<pct>,...

``<not counted>`` and ``<not supported>`` values become NOT_COUNTED; they are
never replaced by zero.
"""

from __future__ import annotations

import csv
import io
import re

from .events import NOT_COUNTED, HpcSample

_NUM_RE = re.compile(r"\d+(\.\d+)?", re.ASCII)


def _value(text: str):
    text = text.strip()
    if text.startswith("<not"):
        return NOT_COUNTED
    if not _NUM_RE.fullmatch(text):
        return None
    if "." in text:
        return float(text)
    return int(text)


def parse_hpc_csv(text) -> tuple[list[HpcSample], int]:
    if isinstance(text, bytes):
        text = text.decode("utf-8", "replace")
    samples, skipped = [], 0
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            row = next(csv.reader(io.StringIO(stripped)))
        except (csv.Error, StopIteration):
            skipped += 1
            continue
        ts_text = row[0].strip() if row else ""
        if len(row) < 4 or not _NUM_RE.fullmatch(ts_text):
            skipped += 1
            continue
        try:
            value = _value(row[1])
        except ValueError:
            value = None
        counter = row[3].strip()
        if value is None or not counter:
            skipped += 1
            continue
        samples.append(HpcSample(float(ts_text), counter, value, row[2].strip()))
    return samples, skipped


def perf_command(pid: int, events, interval_ms: int, out_path: str) -> list[str]:
    return [
        "perf", "stat", "-x", ",", "-I", str(interval_ms),
        "-e", ",".join(events), "-p", str(pid), "-o", str(out_path),
    ]
