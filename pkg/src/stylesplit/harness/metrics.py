"""Append-only newline-delimited metrics records.

Each line is one self-describing JSON object; records carry a `kind` field
("train", "probe", "ablate", ...) plus whatever the producer measured.
Appending never rewrites earlier lines, so crashed runs keep their history.
"""

from __future__ import annotations

import json
import os

from ..tensorops import OpError


class MetricsWriter:
    def __init__(self, path: str) -> None:
        self.path = path
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)

    def write(self, kind: str, **fields) -> dict:
        record = {"kind": kind, **fields}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record


def read_metrics(path: str) -> list[dict]:
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise OpError(f"read_metrics: bad JSON on line {line_no} of {path}: {exc}")
    return records


def scan_metrics_dir(directory: str) -> list[dict]:
    """All records from every *.jsonl file in a directory, file order sorted."""
    records = []
    for name in sorted(os.listdir(directory)):
        if name.endswith(".jsonl"):
            records.extend(read_metrics(os.path.join(directory, name)))
    return records
