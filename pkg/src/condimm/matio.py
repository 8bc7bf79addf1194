"""Bit-exact artifact I/O: the binary matrix format for trained extractors,
deterministic CSV writing, and run manifests with dataset fingerprints."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic
from .spectral import Array, as_matrix

MATRIX_MAGIC = 0x43494D31  # "CIM1", little-endian header + float64 payload


def save_matrix(path, m) -> None:
    a = as_matrix(m)
    header = struct.pack("<III", MATRIX_MAGIC, a.shape[0], a.shape[1])
    payload = np.ascontiguousarray(a, dtype="<f8").tobytes()
    Path(path).write_bytes(header + payload)


def load_matrix(path) -> Array:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise BadMagic(f"{path} is too short for a matrix header")
    magic, rows, cols = struct.unpack("<III", data[:12])
    if magic != MATRIX_MAGIC:
        raise BadMagic(f"{path}: magic {magic:#010x}, expected {MATRIX_MAGIC:#010x}")
    expected = 12 + rows * cols * 8
    if len(data) != expected:
        raise BadMagic(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f8", offset=12)
    return values.reshape(rows, cols).copy()


def format_cell(value) -> str:
    """Deterministic shortest round-trip rendering for CSV cells."""
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    if isinstance(value, (np.floating,)):
        return format_cell(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path, columns, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


def fingerprint_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def fingerprint_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fingerprint_array(a: Array) -> str:
    arr = np.ascontiguousarray(a)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def write_manifest(path, *, config: dict, dataset_fingerprints: dict,
                   seed: int, outputs: list[str]) -> None:
    """Persist the run manifest before heavy compute starts."""
    from . import __version__

    manifest = {
        "tool": "condimm",
        "version": __version__,
        "seed": seed,
        "config": config,
        "dataset_fingerprints": dataset_fingerprints,
        "outputs": sorted(outputs),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
