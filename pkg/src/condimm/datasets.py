"""Dataset construction: tabular CSV ingestion with a column-value split,
IDX-format digit pairs, and synthetic Gaussian tasks with a controlled
rotation between the two covariance eigenbases."""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DigitAbsent,
    EmptyFile,
    EmptySplit,
    InvalidSpec,
    LabelImageCountMismatch,
    MissingColumn,
)
from .spectral import Array

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Feature matrix, target matrix, and preprocessing provenance."""

    x: Array
    y: Array
    feature_names: list[str] = field(default_factory=list)
    normalization: dict | None = None
    source: str = ""

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_in(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class TabularConfig:
    csv_path: str
    split_column: str
    split_value: str  # matching rows -> harmful side, rest -> pretrain side
    target_p: str
    target_h: str
    drop_columns: tuple = ()
    normalize_per_split: bool = True


@dataclass(frozen=True)
class SyntheticSpec:
    d_in: int
    n_p: int
    n_h: int
    spectrum_p: tuple
    spectrum_h: tuple
    alignment_angle: float  # rotation between eigenbases in the top-2 plane
    seed: int = 0
    noise: float = 0.01
    d_out: int = 1


# ---------------------------------------------------------------------------
# tabular CSV pipeline
# ---------------------------------------------------------------------------


def _is_float(value: str) -> bool:
    try:
        float(value)
        return True
    except ValueError:
        return False


def _encode_columns(header, rows, drop: set[str]):
    """Numeric columns keep their values (missing -> 0); non-numeric columns
    get first-appearance integer codes, with missing treated as the token '0'."""
    keep_idx = [i for i, name in enumerate(header) if name not in drop]
    encoded = np.empty((len(rows), len(keep_idx)))
    names = [header[i] for i in keep_idx]
    for out_col, i in enumerate(keep_idx):
        raw = [row[i].strip() if i < len(row) else "" for row in rows]
        non_missing = [v for v in raw if v not in ("", "NA", "NaN", "nan")]
        if non_missing and all(_is_float(v) for v in non_missing):
            encoded[:, out_col] = [
                float(v) if v not in ("", "NA", "NaN", "nan") else 0.0 for v in raw
            ]
        else:
            codes: dict[str, int] = {}
            column = []
            for v in raw:
                token = v if v not in ("", "NA", "NaN", "nan") else "0"
                if token not in codes:
                    codes[token] = len(codes)
                column.append(codes[token])
            encoded[:, out_col] = column
    return names, encoded


def _z_normalize(matrix: Array, names: list[str], what: str):
    """Column-wise z-normalization; constant columns are dropped with a warning."""
    means = matrix.mean(axis=0)
    stds = matrix.std(axis=0)
    keep = stds > 0.0
    for name, ok in zip(names, keep):
        if not ok:
            warnings.warn(f"dropping constant {what} column {name!r}", stacklevel=3)
    normalized = (matrix[:, keep] - means[keep]) / stds[keep]
    kept_names = [n for n, ok in zip(names, keep) if ok]
    return normalized, kept_names, {"mean": means[keep], "std": stds[keep]}


def _build_split(header, rows, cfg: TabularConfig, tag: str) -> Dataset:
    feature_drop = set(cfg.drop_columns) | {cfg.split_column, cfg.target_p, cfg.target_h}
    names, features = _encode_columns(header, rows, feature_drop)
    target_name = cfg.target_p if tag == "pretrain" else cfg.target_h
    _, target = _encode_columns(header, rows, set(header) - {target_name})
    x, kept, norm = _z_normalize(features, names, "feature")
    y, _, y_norm = _z_normalize(target, [target_name], "target")
    if y.shape[1] == 0:
        raise EmptySplit(f"target {target_name!r} is constant on the {tag} split")
    return Dataset(
        x=x,
        y=y,
        feature_names=kept,
        normalization={"x": norm, "y": y_norm},
        source=f"{cfg.csv_path}[{tag}]",
    )


def load_tabular(cfg: TabularConfig) -> tuple[Dataset, Dataset]:
    """Load a header-ed CSV and split it into (pretrain, harmful) datasets.

    Rows whose ``split_column`` equals ``split_value`` form the harmful side,
    everything else the pretrain side. Missing numerics become 0, categorical
    columns are label-encoded in first-appearance order, and features/targets
    are z-normalized (per split by default).
    """
    path = Path(cfg.csv_path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path} has no header row") from None
        rows = [row for row in reader if any(cell.strip() for cell in row)]
    if not rows:
        raise EmptyFile(f"{path} has a header but no data rows")

    for column in (cfg.split_column, cfg.target_p, cfg.target_h, *cfg.drop_columns):
        if column not in header:
            raise MissingColumn(f"column {column!r} not in header of {path}")

    split_idx = header.index(cfg.split_column)
    harmful_rows = [r for r in rows if r[split_idx].strip() == cfg.split_value]
    pretrain_rows = [r for r in rows if r[split_idx].strip() != cfg.split_value]
    if not harmful_rows or not pretrain_rows:
        raise EmptySplit(
            f"split on {cfg.split_column!r} == {cfg.split_value!r} left "
            f"{len(pretrain_rows)} pretrain and {len(harmful_rows)} harmful rows"
        )

    if cfg.normalize_per_split:
        d_p = _build_split(header, pretrain_rows, cfg, "pretrain")
        d_h = _build_split(header, harmful_rows, cfg, "harmful")
    else:
        joint = _build_split(header, rows, cfg, "pretrain")
        mask = np.array([r[split_idx].strip() == cfg.split_value for r in rows])
        d_h_all = _build_split(header, rows, cfg, "harmful")
        d_p = Dataset(joint.x[~mask], joint.y[~mask], joint.feature_names,
                      joint.normalization, f"{cfg.csv_path}[pretrain]")
        d_h = Dataset(d_h_all.x[mask], d_h_all.y[mask], d_h_all.feature_names,
                      d_h_all.normalization, f"{cfg.csv_path}[harmful]")
    return d_p, d_h


# ---------------------------------------------------------------------------
# IDX image / label files
# ---------------------------------------------------------------------------


def read_idx_images(path) -> Array:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise BadMagic(f"{path} is too short for an IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagic(f"{path}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    expected = 16 + count * rows * cols
    if len(data) != expected:
        raise LabelImageCountMismatch(
            f"{path}: header promises {expected} bytes, file has {len(data)}"
        )
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path) -> Array:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise BadMagic(f"{path} is too short for an IDX label header")
    magic, count = struct.unpack(">II", data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise BadMagic(f"{path}: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    if len(data) != 8 + count:
        raise LabelImageCountMismatch(
            f"{path}: header promises {8 + count} bytes, file has {len(data)}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=8).copy()


def write_idx_images(path, images: Array) -> None:
    """Write uint8 images of shape (n, rows, cols) in IDX format."""
    arr = np.ascontiguousarray(images, dtype=np.uint8)
    if arr.ndim != 3:
        raise InvalidSpec(f"images must be (n, rows, cols), got {arr.shape}")
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def write_idx_labels(path, labels: Array) -> None:
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    if arr.ndim != 1:
        raise InvalidSpec(f"labels must be 1-D, got shape {arr.shape}")
    header = struct.pack(">II", IDX_LABELS_MAGIC, arr.shape[0])
    Path(path).write_bytes(header + arr.tobytes())


def load_idx_pair(images_path, labels_path, digit_a: int, digit_b: int) -> Dataset:
    """Binary task from two digit classes of an IDX image/label pair.

    Pixels are flattened and scaled to [0, 1]; ``digit_a`` maps to label 0 and
    ``digit_b`` to 1. Classes are balanced by truncating each to the smaller
    per-class count, keeping file order.
    """
    if digit_a == digit_b:
        raise DigitAbsent(f"digit pair ({digit_a}, {digit_b}) is degenerate")
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise LabelImageCountMismatch(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    idx_a = np.flatnonzero(labels == digit_a)
    idx_b = np.flatnonzero(labels == digit_b)
    if idx_a.size == 0 or idx_b.size == 0:
        raise DigitAbsent(
            f"digit {digit_a if idx_a.size == 0 else digit_b} absent from {labels_path}"
        )
    limit = min(idx_a.size, idx_b.size)
    keep = np.sort(np.concatenate([idx_a[:limit], idx_b[:limit]]))
    x = images[keep].reshape(keep.size, -1).astype(np.float64) / 255.0
    y = (labels[keep] == digit_b).astype(np.float64).reshape(-1, 1)
    side = images.shape[1] * images.shape[2]
    return Dataset(
        x=x,
        y=y,
        feature_names=[f"px{i}" for i in range(side)],
        source=f"{images_path}[{digit_a}vs{digit_b}]",
    )


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


def _plane_rotation(q: Array, angle: float) -> Array:
    """Rotate an orthogonal basis by ``angle`` within its top-2 principal plane."""
    q1, q2 = q[:, 0], q[:, 1]
    c, s = np.cos(angle), np.sin(angle)
    rot = (
        np.eye(q.shape[0])
        + (c - 1.0) * (np.outer(q1, q1) + np.outer(q2, q2))
        + s * (np.outer(q2, q1) - np.outer(q1, q2))
    )
    return rot @ q


def synthesize(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Two Gaussian tasks whose covariances share spectra layouts but whose
    eigenbases differ by ``alignment_angle`` in the top-2 plane.

    Targets come from a planted linear map plus N(0, noise^2) noise.
    """
    sp = np.asarray(spec.spectrum_p, dtype=np.float64)
    sh = np.asarray(spec.spectrum_h, dtype=np.float64)
    if spec.d_in < 2:
        raise InvalidSpec("d_in must be >= 2")
    if sp.shape != (spec.d_in,) or sh.shape != (spec.d_in,):
        raise InvalidSpec("spectra must have length d_in")
    if np.any(sp <= 0) or np.any(sh <= 0):
        raise InvalidSpec("spectra must be strictly positive")
    if np.any(np.diff(sp) > 0) or np.any(np.diff(sh) > 0):
        raise InvalidSpec("spectra must be sorted descending")
    if not 0.0 <= spec.alignment_angle <= np.pi / 2:
        raise InvalidSpec("alignment_angle must lie in [0, pi/2]")
    if spec.n_p < 1 or spec.n_h < 1:
        raise InvalidSpec("sample counts must be positive")

    rng = np.random.default_rng(spec.seed)
    q_p, _ = np.linalg.qr(rng.standard_normal((spec.d_in, spec.d_in)))
    q_h = _plane_rotation(q_p, spec.alignment_angle)
    w_plant = rng.standard_normal((spec.d_in, spec.d_out))

    def draw(n, q, spectrum, tag):
        z = rng.standard_normal((n, spec.d_in))
        x = z @ (q * np.sqrt(spectrum)[None, :]) @ q.T
        y = x @ w_plant + spec.noise * rng.standard_normal((n, spec.d_out))
        return Dataset(
            x=x,
            y=y,
            feature_names=[f"f{i}" for i in range(spec.d_in)],
            source=f"synthetic[{tag}, seed={spec.seed}]",
        )

    return draw(spec.n_p, q_p, sp, "pretrain"), draw(spec.n_h, q_h, sh, "harmful")
