"""Proposal-target assignment: cost matrix, optimal one-to-one matching,
positive/negative partition, and matching-stability diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

__all__ = [
    "CostMatrix",
    "MatchResult",
    "StabilityRecord",
    "InfeasibleMatchError",
    "build_cost",
    "hungarian_match",
    "brute_force_match",
    "partition",
    "instability_rate",
]


class InfeasibleMatchError(ValueError):
    """Raised when fewer proposals than ground truths (M < N)."""


@dataclass
class CostMatrix:
    values: np.ndarray  # (N, M)
    tau: float


@dataclass
class MatchResult:
    psi: np.ndarray  # (N,) proposal column index per ground truth, injective
    total_cost: float
    positives: np.ndarray  # matched proposal indices, sorted
    negatives: np.ndarray  # unmatched proposal indices, sorted


@dataclass
class StabilityRecord:
    """Matched proposal identity and position per ground truth on a probe set."""

    epoch: int
    # image_id -> list of (gt_index, proposal_id, x, y)
    entries: dict = field(default_factory=dict)

    def add(self, image_id: str, gt_index: int, proposal_id: int, x: float, y: float):
        self.entries.setdefault(image_id, []).append((gt_index, proposal_id, float(x), float(y)))


def build_cost(gt_xy: np.ndarray, proposal_xy: np.ndarray, confidences: np.ndarray, tau: float) -> CostMatrix:
    """Pairwise cost: tau * Euclidean distance minus proposal confidence."""
    gt_xy = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    proposal_xy = np.asarray(proposal_xy, dtype=np.float64).reshape(-1, 2)
    confidences = np.asarray(confidences, dtype=np.float64).ravel()
    n, m = len(gt_xy), len(proposal_xy)
    if n < 1:
        raise ValueError("build_cost requires at least one ground truth (N=0 scenes skip matching)")
    if m < n:
        raise InfeasibleMatchError(f"need M >= N proposals, got M={m}, N={n}")
    dist = cdist(gt_xy, proposal_xy)
    return CostMatrix(values=tau * dist - confidences[None, :], tau=tau)


def hungarian_match(cost: CostMatrix) -> MatchResult:
    """Minimum-total-cost injective assignment of every row to a distinct column."""
    values = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if not np.isfinite(values).all():
        raise ValueError("cost matrix contains non-finite entries")
    n, m = values.shape
    if m < n:
        raise InfeasibleMatchError(f"need M >= N, got M={m}, N={n}")
    rows, cols = linear_sum_assignment(values)
    psi = np.empty(n, dtype=np.int64)
    psi[rows] = cols
    pos = np.sort(psi)
    neg = np.setdiff1d(np.arange(m), pos, assume_unique=True)
    return MatchResult(
        psi=psi,
        total_cost=float(values[np.arange(n), psi].sum()),
        positives=pos,
        negatives=neg,
    )


def brute_force_match(values: np.ndarray) -> float:
    """Exhaustive minimum assignment cost; independent oracle for small N, M."""
    from itertools import permutations

    values = np.asarray(values, dtype=np.float64)
    n, m = values.shape
    best = np.inf
    for cols in permutations(range(m), n):
        c = values[np.arange(n), list(cols)].sum()
        if c < best:
            best = c
    return float(best)


def partition(match: MatchResult, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Split proposal indices into matched positives and all remaining negatives."""
    pos = np.sort(np.asarray(match.psi, dtype=np.int64))
    neg = np.setdiff1d(np.arange(m), pos, assume_unique=True)
    return pos, neg


def instability_rate(prev: StabilityRecord, curr: StabilityRecord) -> tuple[float, float]:
    """Fraction of ground truths whose matched proposal identity changed, and
    mean displacement (pixels) of the matched position, between two records."""
    if set(prev.entries) != set(curr.entries):
        raise ValueError("stability records cover different probe images")
    changed = 0
    total = 0
    disp = 0.0
    for image_id, prev_rows in prev.entries.items():
        curr_rows = curr.entries[image_id]
        if [r[0] for r in prev_rows] != [r[0] for r in curr_rows]:
            raise ValueError(f"ground-truth index mismatch for probe image {image_id!r}")
        for (_, pid0, x0, y0), (_, pid1, x1, y1) in zip(prev_rows, curr_rows):
            total += 1
            if pid0 != pid1:
                changed += 1
            disp += float(np.hypot(x1 - x0, y1 - y0))
    if total == 0:
        return 0.0, 0.0
    return changed / total, disp / total
