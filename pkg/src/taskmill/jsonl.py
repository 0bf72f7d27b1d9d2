"""JSONL reading and writing with crash-safe replace and malformed-line counts."""

from __future__ import annotations

import json
import os
from typing import Any, Iterable, Iterator, Optional


def dumps(obj: Any) -> str:
    """Compact single-line JSON, UTF-8 text preserved as-is."""
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: str, records: Iterable[dict]) -> int:
    """Write all records atomically: temp file in the same directory, fsync,
    then rename over the target. Returns the record count."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    count = 0
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")
            count += 1
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return count


class JsonlWriter:
    """Append-mode writer that flushes every line and fsyncs on request.

    Tracks the byte offset after each complete line so a checkpoint can
    record exactly how much of the file is trustworthy; `truncate_to`
    discards a torn tail after a crash.
    """

    def __init__(self, path: str, append: bool = True):
        self.path = path
        mode = "a" if append else "w"
        self._fh = open(path, mode, encoding="utf-8")
        self._fh.seek(0, os.SEEK_END)

    @property
    def offset(self) -> int:
        return self._fh.tell()

    def write(self, record: dict) -> int:
        self._fh.write(dumps(record) + "\n")
        self._fh.flush()
        return self._fh.tell()

    def sync(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        if not self._fh.closed:
            self.sync()
            self._fh.close()

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def truncate_to(path: str, offset: int) -> None:
    """Cut the file back to a known-good byte offset (checkpoint recovery)."""
    with open(path, "r+b") as fh:
        fh.truncate(offset)


class JsonlReader:
    """Iterate records in a JSONL file, skipping and counting malformed lines.

    A malformed line is one that fails to parse as JSON or does not hold a
    JSON object. The `malformed` counter is valid after iteration finishes.
    """

    def __init__(self, path: str):
        self.path = path
        self.malformed = 0

    def __iter__(self) -> Iterator[dict]:
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    self.malformed += 1
                    continue
                if not isinstance(obj, dict):
                    self.malformed += 1
                    continue
                yield obj


def read_jsonl(path: str) -> list[dict]:
    """Load every well-formed record; malformed lines are dropped silently.
    Use JsonlReader directly when the skip count matters."""
    return list(JsonlReader(path))
