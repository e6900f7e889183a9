"""Atomic file writes and CSV helpers shared by all output-producing code.

Every artifact is written to a temporary file in the destination directory
and renamed into place, so interrupted runs never leave truncated files.
Numeric CSV fields use 17 significant digits (exact float64 round-trip).
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bytes_atomic(path, data: bytes) -> None:
    _atomic_write(path, data)


def write_text_atomic(path, text: str) -> None:
    _atomic_write(path, text.encode())


def fmt(x) -> str:
    return format(float(x), ".17g")


def write_csv_atomic(path, header: list[str], rows) -> None:
    """Rows are sequences; floats are formatted with 17 significant digits."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) if isinstance(v, float) else v for v in row])
    _atomic_write(path, buf.getvalue().encode())


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        return header, [row for row in reader]
