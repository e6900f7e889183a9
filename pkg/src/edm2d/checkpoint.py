"""Model checkpoint file format.

Binary layout (all integers and reals little-endian):

    magic   5 bytes  b"EDM2D"
    version u32      currently 1
    n       u32      number of layer widths
    widths  n * u32  [d+1, hidden..., d]
    omega0  f64
    sigma_data f64
    n_params u64
    params  n_params * f64, flat order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .fileio import write_bytes_atomic
from .models import MLPLayout

MAGIC = b"EDM2D"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, layout: MLPLayout, params: np.ndarray, sigma_data: float) -> None:
    widths = layout.widths
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(widths))
    blob += struct.pack(f"<{len(widths)}I", *widths)
    blob += struct.pack("<dd", layout.omega0, sigma_data)
    blob += struct.pack("<Q", params.size)
    blob += np.asarray(params, dtype="<f8").tobytes()
    write_bytes_atomic(path, bytes(blob))


def load_checkpoint(path) -> tuple[MLPLayout, np.ndarray, float]:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = 5
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    widths = list(struct.unpack_from(f"<{n}I", data, off))
    off += 4 * n
    omega0, sigma_data = struct.unpack_from("<dd", data, off)
    off += 16
    (n_params,) = struct.unpack_from("<Q", data, off)
    off += 8
    params = np.frombuffer(data, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    if n < 3 or widths[0] != widths[-1] + 1:
        raise CheckpointError(f"{path}: inconsistent layer widths {widths}")
    hidden = widths[1]
    if any(w != hidden for w in widths[1:-1]):
        raise CheckpointError(f"{path}: non-uniform hidden widths {widths}")
    layout = MLPLayout(data_dim=widths[-1], hidden=hidden, depth=n - 2, omega0=omega0)
    if layout.n_params != n_params:
        raise CheckpointError(
            f"{path}: parameter count {n_params} does not match layout "
            f"({layout.n_params} expected)")
    return layout, params, sigma_data
