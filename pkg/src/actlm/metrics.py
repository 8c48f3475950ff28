"""Append-only JSONL metrics log, flushed per record."""

from __future__ import annotations

import json


class MetricsWriter:
    def __init__(self, path, mode: str = "a"):
        if mode not in ("a", "w"):
            raise ValueError("mode must be 'a' or 'w'")
        self.path = path
        self._f = open(path, mode)

    def append(self, record: dict) -> None:
        if not record:
            raise ValueError("refusing to log an empty metrics record")
        self._f.write(json.dumps(record, sort_keys=True, default=float) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
