"""Evaluation measures: edit-distance similarity, exact match, box IoU, and
a Frechet distance over a fixed deterministic image feature.

All functions here are pure numpy; nothing touches the autodiff graph. The
image feature is an 8x8 mean-pool of the pixel canvas (d=64), so the Frechet
number is comparable only within this repo and is labeled toy_fid wherever
it is reported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .accel import jacobi_eigh, levenshtein
from .errors import ContractError

FEATURE_SIDE = 8
SHRINKAGE = 1e-6


def ned(a: str, b: str) -> float:
    """Edit-distance similarity in [0, 1]; 1 means equal, including two empties."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


def _check_box(box, label):
    x0, y0, x1, y1 = box
    if not (x0 < x1 and y0 < y1):
        raise ContractError(f"{label} box {box} is degenerate")


def acc_at_05(pred, gt):
    """(hit, iou) with the 0.5 threshold; both boxes must have positive area."""
    _check_box(pred, "predicted")
    _check_box(gt, "ground-truth")
    px0, py0, px1, py1 = pred
    gx0, gy0, gx1, gy1 = gt
    iw = max(0.0, min(px1, gx1) - max(px0, gx0))
    ih = max(0.0, min(py1, gy1) - max(py0, gy0))
    inter = iw * ih
    union = (px1 - px0) * (py1 - py0) + (gx1 - gx0) * (gy1 - gy0) - inter
    iou = inter / union
    return iou >= 0.5, iou


def exact_accuracy(preds, gts) -> float:
    """Case-sensitive exact match after stripping outer whitespace."""
    if len(preds) != len(gts):
        raise ContractError(f"got {len(preds)} predictions for {len(gts)} references")
    if not preds:
        return 0.0
    return sum(p.strip() == g.strip() for p, g in zip(preds, gts)) / len(preds)


def image_features(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    h, w = arr.shape
    if h % FEATURE_SIDE or w % FEATURE_SIDE:
        raise ContractError(f"image sides {arr.shape} must be multiples of {FEATURE_SIDE}")
    bh, bw = h // FEATURE_SIDE, w // FEATURE_SIDE
    pooled = arr.reshape(FEATURE_SIDE, bh, FEATURE_SIDE, bw).mean(axis=(1, 3))
    return pooled.reshape(-1)


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray


def fit_stats(images) -> FeatureStats:
    if len(images) == 0:
        raise ContractError("cannot fit feature statistics to an empty image set")
    feats = np.stack([image_features(img) for img in images])
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / len(feats)
    sigma = sigma + SHRINKAGE * np.eye(sigma.shape[0])
    return FeatureStats(mu, sigma)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    w, v = jacobi_eigh(sym)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_gaussian(mu_a, sigma_a, mu_b, sigma_b) -> float:
    """Squared Frechet distance between two Gaussians.

    The cross term uses sqrt(sqrt(A) B sqrt(A)); eigenvalues are clamped at
    zero before each root so finite-precision wiggle below zero cannot turn
    into a complex number.
    """
    mu_a = np.atleast_1d(np.asarray(mu_a, dtype=np.float64))
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    sigma_a = np.atleast_2d(np.asarray(sigma_a, dtype=np.float64))
    sigma_b = np.atleast_2d(np.asarray(sigma_b, dtype=np.float64))
    diff = mu_a - mu_b
    root_a = _psd_sqrt(sigma_a)
    cross = _psd_sqrt(root_a @ sigma_b @ root_a)
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b)
                  - 2.0 * np.trace(cross))
    return max(value, 0.0)


def toy_fid(set_a, set_b) -> float:
    a = fit_stats(set_a)
    b = fit_stats(set_b)
    return frechet_gaussian(a.mu, a.sigma, b.mu, b.sigma)


def pixel_mse(pred: np.ndarray, target: np.ndarray) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"image shapes differ: {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


def report_table(rows, columns) -> str:
    """Fixed-width text table; floats printed to four decimals."""

    def fmt(value):
        if isinstance(value, float):
            return f"{value:.4f}"
        return "-" if value is None else str(value)

    grid = [[fmt(row.get(c)) for c in columns] for row in rows]
    widths = [max(len(c), *(len(g[i]) for g in grid)) if grid else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for g in grid:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(g, widths)))
    return "\n".join(lines)


def write_report(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
