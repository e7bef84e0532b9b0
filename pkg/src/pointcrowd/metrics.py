"""Counting and localization evaluation.

Counting reports MAE and root-mean-squared count error. Localization pairs
predictions with ground truths one-to-one (maximum number of within-threshold
pairs, minimum total distance among such pairings) and reports precision,
recall and F1.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "CountingResult",
    "LocalizationResult",
    "counting_metrics",
    "localization_metrics",
    "brute_force_tp",
    "infer_predictions",
]


@dataclass
class CountingResult:
    mae: float
    mse: float  # root mean squared count error
    per_image: list


@dataclass
class LocalizationResult:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    sigma_mode: str  # "fixed" or "box_derived"


def counting_metrics(pairs) -> CountingResult:
    """pairs: iterable of (gt_count, pred_count)."""
    pairs = [(float(g), float(p)) for g, p in pairs]
    if not pairs:
        raise ValueError("counting_metrics requires at least one image")
    err = np.array([g - p for g, p in pairs])
    return CountingResult(
        mae=float(np.abs(err).mean()),
        mse=float(np.sqrt((err**2).mean())),
        per_image=pairs,
    )


def _sigma_per_gt(n_gt: int, sigma_spec) -> tuple[np.ndarray, str]:
    if np.isscalar(sigma_spec):
        if sigma_spec <= 0:
            raise ValueError("sigma must be positive")
        return np.full(n_gt, float(sigma_spec)), "fixed"
    boxes = np.asarray(sigma_spec, dtype=np.float64).reshape(-1, 2)
    if len(boxes) != n_gt:
        raise ValueError("box dims must be given per ground truth")
    return np.sqrt((boxes**2).sum(-1)) / 2.0, "box_derived"


def localization_metrics(gt_xy, pred_xy, sigma_spec) -> LocalizationResult:
    """sigma_spec: fixed threshold (scalar) or per-ground-truth (w, h) box dims
    giving sigma_i = sqrt(w^2 + h^2) / 2."""
    gt_xy = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    pred_xy = np.asarray(pred_xy, dtype=np.float64).reshape(-1, 2)
    n, m = len(gt_xy), len(pred_xy)
    sigma, mode = _sigma_per_gt(n, sigma_spec)

    tp = 0
    if n and m:
        dist = np.linalg.norm(gt_xy[:, None, :] - pred_xy[None, :, :], axis=-1)
        feasible = dist <= sigma[:, None]
        # cost chosen so every extra feasible pair outweighs any distance savings
        big = (min(n, m) + 1.0) * (dist.max() + 1.0)
        cost = np.where(feasible, dist, big)
        rows, cols = linear_sum_assignment(cost)
        tp = int(feasible[rows, cols].sum())

    fp = m - tp
    fn = n - tp
    precision = tp / m if m else 0.0
    recall = tp / n if n else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return LocalizationResult(precision, recall, f1, tp, fp, fn, mode)


def brute_force_tp(gt_xy, pred_xy, sigma_spec) -> int:
    """Exhaustive maximum one-to-one within-threshold pairing; test oracle."""
    gt_xy = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    pred_xy = np.asarray(pred_xy, dtype=np.float64).reshape(-1, 2)
    n, m = len(gt_xy), len(pred_xy)
    sigma, _ = _sigma_per_gt(n, sigma_spec)
    if n == 0 or m == 0:
        return 0
    dist = np.linalg.norm(gt_xy[:, None, :] - pred_xy[None, :, :], axis=-1)
    feasible = dist <= sigma[:, None]
    best = 0
    if n <= m:
        for cols in permutations(range(m), n):
            best = max(best, int(feasible[np.arange(n), list(cols)].sum()))
    else:
        for rows in permutations(range(n), m):
            best = max(best, int(feasible[list(rows), np.arange(m)].sum()))
    return best


def infer_predictions(field, threshold: float = 0.5):
    """Keep proposals with confidence above threshold; returns (count, points)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    conf = field.confidences.detach().cpu().numpy()
    coords = field.coords.detach().cpu().numpy()
    keep = conf > threshold
    return int(keep.sum()), coords[keep]
