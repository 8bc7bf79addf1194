"""Deterministic desk-scale fixtures: a ten-class synthetic digit corpus in
IDX format and a house-sale-style tabular CSV with a zoning split. Both are
reproducible bit-for-bit from their seeds, so tests and demos need no
external downloads."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .datasets import write_idx_images, write_idx_labels

DIGIT_SIDE = 28
DIGIT_CLASSES = 10


def _blob(side: int, cy: float, cx: float, width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width * width))


def _class_template(digit: int, side: int) -> np.ndarray:
    """Two soft blobs on a ring plus a class-specific stripe; distinct classes
    get visibly different active-pixel geometry (hence covariance structure)."""
    angle = 2.0 * np.pi * digit / DIGIT_CLASSES
    r = side * 0.28
    cy1 = side / 2 + r * np.sin(angle)
    cx1 = side / 2 + r * np.cos(angle)
    cy2 = side / 2 - r * np.sin(angle + 0.9)
    cx2 = side / 2 - r * np.cos(angle + 0.9)
    img = _blob(side, cy1, cx1, 2.6) + 0.8 * _blob(side, cy2, cx2, 2.2)
    stripe = np.zeros((side, side))
    row = 3 + (digit * 2) % (side - 6)
    stripe[row:row + 2, 4:side - 4] = 0.5
    return np.clip(img + stripe, 0.0, 1.0)


def make_digit_idx_fixture(out_dir, n_per_class: int = 300, side: int = DIGIT_SIDE,
                           seed: int = 0) -> tuple[Path, Path]:
    """Write IDX image/label files with ``n_per_class`` samples per class,
    interleaved round-robin. Samples jitter the class template's position,
    intensity, and pixel noise."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    templates = [_class_template(d, side) for d in range(DIGIT_CLASSES)]

    total = n_per_class * DIGIT_CLASSES
    images = np.zeros((total, side, side), dtype=np.uint8)
    labels = np.zeros(total, dtype=np.uint8)
    for i in range(total):
        digit = i % DIGIT_CLASSES
        base = templates[digit]
        dy, dx = rng.integers(-2, 3, size=2)
        shifted = np.roll(np.roll(base, dy, axis=0), dx, axis=1)
        amplitude = rng.uniform(0.6, 1.0)
        noise = rng.uniform(0.0, 0.15, size=(side, side))
        sample = np.clip(amplitude * shifted + noise, 0.0, 1.0)
        images[i] = np.round(sample * 255.0).astype(np.uint8)
        labels[i] = digit

    images_path = out / "fixture-digits-images-idx3-ubyte"
    labels_path = out / "fixture-digits-labels-idx1-ubyte"
    write_idx_images(images_path, images)
    write_idx_labels(labels_path, labels)
    return images_path, labels_path


# ---------------------------------------------------------------------------
# tabular fixture
# ---------------------------------------------------------------------------

_ZONES = ("RL", "RM", "FV", "CI")
_ZONE_WEIGHTS = (0.62, 0.2, 0.1, 0.08)
N_NUMERIC = 36
N_CATEGORICAL = 43  # 79 feature columns total, mirroring a house-sale table


def make_house_csv_fixture(path, n_rows: int = 1460, seed: int = 0,
                           n_numeric: int = N_NUMERIC,
                           n_categorical: int = N_CATEGORICAL) -> Path:
    """Write a house-sale-style CSV: a zoning split column, mixed numeric and
    categorical features, and two continuous targets driven by different
    latent factors.

    The zoning value shifts the latent-factor distribution, so the two sides
    of the split have genuinely different feature covariances.
    """
    rng = np.random.default_rng(seed)
    n_latent = 6
    zones = rng.choice(len(_ZONES), size=n_rows, p=_ZONE_WEIGHTS)

    # latent factors with zone-dependent mean and anisotropy
    zone_shift = rng.normal(0.0, 1.2, size=(len(_ZONES), n_latent))
    zone_scale = rng.uniform(0.6, 1.6, size=(len(_ZONES), n_latent))
    latent = zone_shift[zones] + zone_scale[zones] * rng.normal(size=(n_rows, n_latent))

    mix = rng.normal(size=(n_latent, n_numeric))
    numeric = latent @ mix + 0.35 * rng.normal(size=(n_rows, n_numeric))
    numeric = numeric * rng.uniform(5.0, 400.0, size=n_numeric) + rng.uniform(
        10.0, 2000.0, size=n_numeric)

    cat_levels = rng.integers(2, 7, size=n_categorical)
    cat_cut = [np.sort(rng.normal(size=levels - 1)) for levels in cat_levels]
    cat_source = latent @ rng.normal(size=(n_latent, n_categorical)) + 0.8 * rng.normal(
        size=(n_rows, n_categorical))
    categorical = np.stack(
        [np.digitize(cat_source[:, j], cat_cut[j]) for j in range(n_categorical)], axis=1)

    w_lot = rng.normal(size=n_latent)
    w_sale = rng.normal(size=n_latent)
    lot_area = 9000.0 + 2500.0 * (latent @ w_lot) + 400.0 * rng.normal(size=n_rows)
    sale_price = 180000.0 + 42000.0 * (latent @ w_sale) + 9000.0 * rng.normal(size=n_rows)

    header = (["Zoning"]
              + [f"Num{j:02d}" for j in range(n_numeric)]
              + [f"Cat{j:02d}" for j in range(n_categorical)]
              + ["LotSize", "SalePrice"])
    lines = [",".join(header)]
    for i in range(n_rows):
        cells = [_ZONES[zones[i]]]
        cells += [f"{numeric[i, j]:.4f}" for j in range(n_numeric)]
        cells += [f"L{categorical[i, j]}" for j in range(n_categorical)]
        cells += [f"{lot_area[i]:.2f}", f"{sale_price[i]:.2f}"]
        lines.append(",".join(cells))
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def house_tabular_config(csv_path) -> dict:
    """Loader settings matching :func:`make_house_csv_fixture` output."""
    return {
        "csv_path": str(csv_path),
        "split_column": "Zoning",
        "split_value": "RL",  # majority zone forms the harmful side
        "target_p": "LotSize",
        "target_h": "SalePrice",
    }
