"""Single-file checkpoint container: text header plus raw float32 arrays.

Layout:

    VFCKPT 1\n
    meta <key>=<value>\n          (any number of lines; values are strings)
    array <name> <d0> <d1> ...\n  (shapes in declaration order)
    end\n
    <raw little-endian float32 data, arrays concatenated in header order>

All arrays are stored as little-endian float32, so a load/save round trip
of float32 data is bitwise exact.
"""

from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np

__all__ = ["save_archive", "load_archive"]

_MAGIC = "VFCKPT 1"


def save_archive(path, meta: dict[str, str], arrays: list[tuple[str, np.ndarray]]) -> None:
    """Write metadata and named arrays; arrays are converted to float32."""
    path = Path(path)
    header = io.StringIO()
    header.write(_MAGIC + "\n")
    for key, value in meta.items():
        value = str(value)
        if "\n" in key or "\n" in value or "=" in key:
            raise ValueError(f"invalid metadata entry {key!r}")
        header.write(f"meta {key}={value}\n")
    blobs = []
    for name, arr in arrays:
        if " " in name or "\n" in name:
            raise ValueError(f"invalid array name {name!r}")
        a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        if a.ndim and not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)
        header.write(" ".join(["array", name, *(str(d) for d in a.shape)]) + "\n")
        blobs.append(a.tobytes())
    header.write("end\n")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header.getvalue().encode("utf-8"))
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_archive(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Read back (meta, arrays); array order is preserved in the dict."""
    with open(path, "rb") as f:
        data = f.read()
    newline = data.index(b"\n")
    if data[:newline].decode("utf-8") != _MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    meta: dict[str, str] = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    pos = newline + 1
    while True:
        newline = data.index(b"\n", pos)
        line = data[pos:newline].decode("utf-8")
        pos = newline + 1
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition("=")
            meta[key] = value
        elif kind == "array":
            parts = rest.split(" ")
            shapes.append((parts[0], tuple(int(d) for d in parts[1:] if d)))
        else:
            raise ValueError(f"bad header line in {path}: {line!r}")
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        arrays[name] = np.frombuffer(data[pos:pos + nbytes], dtype="<f4").reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise ValueError(f"trailing bytes in {path}")
    return meta, arrays
