"""File helpers: canonical JSON, float CSV tables, atomic writes, hashing."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Sequence

import numpy as np

SCHEMA_VERSION = 1


def format_float(value: float) -> str:
    """Format a float with 17 significant digits so it round-trips exactly."""
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"cannot serialize non-finite float {value!r}")
    text = format(value, ".17g")
    # keep JSON readers from turning integral floats into ints
    if all(ch not in text for ch in ".en"):
        text += ".0"
    return text


def dumps_canonical(obj: Any, indent: int | None = None) -> str:
    """Serialize ``obj`` to JSON with sorted keys and 17-digit floats.

    The output is byte-stable under a load/dump round trip, which
    ``json.dumps`` does not promise for the float format we want.
    """
    return _encode(obj, indent, 0)


def _encode(obj: Any, indent: int | None, level: int) -> str:
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist(), indent, level)
    if isinstance(obj, Path):
        return json.dumps(str(obj))

    if indent is None:
        sep, pad, end = ",", "", ""
    else:
        sep = ",\n"
        pad = "\n" + " " * (indent * (level + 1))
        end = "\n" + " " * (indent * level)

    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            f"{json.dumps(str(k))}:{'' if indent is None else ' '}{_encode(v, indent, level + 1)}"
            for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))
        ]
        if indent is None:
            return "{" + ",".join(items) + "}"
        return "{" + pad + (sep + " " * (indent * (level + 1))).join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # numeric leaves stay on one line; keeps weight matrices compact
        if indent is None or all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ",".join(_encode(v, None, 0) for v in obj) + "]"
        items = [_encode(v, indent, level + 1) for v in obj]
        return "[" + pad + (sep + " " * (indent * (level + 1))).join(items) + end + "]"
    raise TypeError(f"cannot serialize object of type {type(obj).__name__}")


def atomic_write_text(path: str | os.PathLike, text: str) -> Path:
    """Write ``text`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path: str | os.PathLike, obj: Any) -> Path:
    return atomic_write_text(path, dumps_canonical(obj, indent=2) + "\n")


def read_json(path: str | os.PathLike) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def table_to_csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (float, np.floating)):
                cells.append(format_float(v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    return atomic_write_text(path, table_to_csv(header, rows))


def write_matrix_csv(path: str | os.PathLike, header: Sequence[str], values: np.ndarray) -> Path:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != len(header):
        raise ValueError(f"matrix of shape {values.shape} does not match {len(header)} columns")
    return write_csv(path, header, values.tolist())


def read_matrix_csv(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    """Read a headed numeric CSV into ``(header, values)``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        values = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
    if values.size == 0:
        values = values.reshape(0, len(header))
    return header, values


def content_hash(data: bytes | str) -> str:
    """Git-style blob hash (sha1 over ``"blob <len>\\0" + data``)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def array_hash(values: np.ndarray) -> str:
    values = np.ascontiguousarray(values, dtype=np.float64)
    return hashlib.sha1(values.tobytes() + str(values.shape).encode()).hexdigest()[:16]
