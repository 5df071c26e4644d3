"""Batch loading and raw-binary dumps.

Raw files hold little-endian float64 values in column-major order next to a JSON
sidecar with the same stem. A batch sidecar looks like
``{"n": 784, "b": 4, "range": [0, 1], "labels": [3, 1, 4, 1]}``; a gradient dump
sidecar lists named arrays with their shape and byte offset.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..fcnn import Batch

DTYPE = np.dtype("<f8")


class DataError(ValueError):
    pass


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def load_csv(path: str | Path) -> np.ndarray:
    try:
        X = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot parse CSV {path}: {exc}") from exc
    return X


def load_raw(path: str | Path) -> tuple[np.ndarray, dict]:
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read sidecar {side}: {exc}") from exc
    try:
        n, b = int(meta["n"]), int(meta["b"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"sidecar {side} needs integer 'n' and 'b'") from exc
    raw = Path(path).read_bytes()
    expected = n * b * DTYPE.itemsize
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {n}x{b} float64, found {len(raw)}")
    X = np.frombuffer(raw, dtype=DTYPE).reshape((n, b), order="F").astype(np.float64)
    return X, meta


def load_batch(
    source: str,
    path: Optional[str] = None,
    n: Optional[int] = None,
    b: Optional[int] = None,
    labels: Optional[Sequence[int]] = None,
    data_range: Sequence[float] = (0.0, 1.0),
) -> Batch:
    """Read a batch from ``csv`` (n rows x b columns, no header) or ``raw`` files."""
    meta: dict = {}
    if source == "csv":
        X = load_csv(path)
    elif source == "raw":
        X, meta = load_raw(path)
    else:
        raise DataError(f"unknown data source {source!r}")
    if n is not None and X.shape[0] != n:
        raise DataError(f"batch has {X.shape[0]} rows, configuration expects n={n}")
    if b is not None and X.shape[1] != b:
        raise DataError(f"batch has {X.shape[1]} columns, configuration expects b={b}")
    if not np.all(np.isfinite(X)):
        raise DataError("batch contains non-finite values")
    if "labels" in meta:
        labels = meta["labels"]
    if labels is None:
        labels = np.zeros(X.shape[1], dtype=np.int64)
    rng = tuple(meta.get("range", data_range))
    try:
        return Batch(X, np.asarray(labels, dtype=np.int64), (float(rng[0]), float(rng[1])))
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def write_raw_batch(path: str | Path, batch: Batch) -> None:
    path = Path(path)
    path.write_bytes(np.asarray(batch.X, dtype=DTYPE).tobytes(order="F"))
    meta = {"n": batch.X.shape[0], "b": batch.X.shape[1], "range": list(batch.data_range),
            "labels": [int(v) for v in batch.labels]}
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def write_dump(path: str | Path, arrays: dict, meta: Optional[dict] = None) -> None:
    """Concatenate named arrays into one raw file with a sidecar index."""
    path = Path(path)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=DTYPE)
        data = arr.tobytes(order="F")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    path.write_bytes(b"".join(chunks))
    sidecar = {"format": "spear-dump", "dtype": "<f8", "order": "F", "arrays": entries}
    if meta:
        sidecar.update(meta)
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")


def read_dump(path: str | Path) -> tuple[dict, dict]:
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix(".bin")
    try:
        meta = json.loads(sidecar_path(path).read_text())
        raw = path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dump {path}: {exc}") from exc
    arrays = {}
    for e in meta.get("arrays", []):
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = e["offset"] + count * DTYPE.itemsize
        if end > len(raw):
            raise DataError(f"dump {path} is truncated at array {e['name']}")
        flat = np.frombuffer(raw[e["offset"]:end], dtype=DTYPE)
        arrays[e["name"]] = flat.reshape(shape, order="F").astype(np.float64)
    return arrays, meta
