"""Plain-text matrix files and atomic report writes.
"""
import csv
import io
import json
import os
import tempfile
from typing import Any, Dict, List, Sequence

import numpy as np
import yaml
from hydra import log

from ..flow.base import BadMatrixFormat

__all__ = "FLOAT_FORMAT", "read_matrix", "write_matrix", "write_atomic", "write_json", "write_csv", "write_yaml"

FLOAT_FORMAT = ".17g"


def read_matrix(path: str, ndim: int = 2) -> np.ndarray:
    """Whitespace-separated rows, '#' comments; a single column reads as shape (n, 1).
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(path)

    try:
        data = np.loadtxt(path, dtype=float, comments="#", ndmin=ndim)
    except ValueError as exc:
        raise BadMatrixFormat(f"{path}: {exc}") from exc

    if data.size == 0:
        raise BadMatrixFormat(f"{path}: no numeric rows")

    if not np.all(np.isfinite(data)):
        raise BadMatrixFormat(f"{path}: non-finite entries")

    return data


def write_atomic(path: str, text: str) -> None:
    """Write text to a temporary file in the target directory, then rename over path.
    """
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".", suffix=".tmp", dir=folder)

    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as out:
            out.write(text)

        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

    log.debug(f"io: wrote {path}")


def write_matrix(path: str, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=float)

    if data.ndim == 1:
        data = data.reshape(-1, 1)

    buf = io.StringIO()
    np.savetxt(buf, data, fmt=f"%{FLOAT_FORMAT}")
    write_atomic(path, buf.getvalue())


def write_json(path: str, obj: Any) -> None:
    write_atomic(path, json.dumps(obj, indent=2) + "\n")


def write_yaml(path: str, obj: Any) -> None:
    write_atomic(path, yaml.safe_dump(obj, sort_keys=False))


def write_csv(path: str, fieldnames: Sequence[str], rows: List[Dict[str, Any]]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
    w.writeheader()

    for row in rows:
        w.writerow({k: _cell(row.get(k, "")) for k in fieldnames})

    write_atomic(path, buf.getvalue())


def _cell(value: Any) -> Any:
    if isinstance(value, float):
        return format(value, FLOAT_FORMAT)

    return value
