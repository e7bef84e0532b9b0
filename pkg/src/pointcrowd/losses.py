"""Training objectives: matched-proposal classification/regression losses,
auxiliary point sampling around ground truths, and the auxiliary guidance
losses that push near points toward confidence one and mid-range points toward
confidence zero with zero offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "LossWeights",
    "AuxiliarySet",
    "LossBreakdown",
    "sample_auxiliary",
    "loss_cls",
    "loss_loc",
    "loss_apg_pos",
    "loss_apg_neg",
    "loss_overall",
]


@dataclass
class LossWeights:
    lambda1: float = 0.5  # negative-proposal weight in the classification loss
    lambda2: float = 2e-4  # regression weight in the point loss
    lambda3: float = 2e-4  # auxiliary-positive regression weight
    lambda4: float = 2e-4  # auxiliary-negative offset penalty
    lambda5: float = 0.2  # auxiliary guidance weight in the overall loss
    tau: float = 5e-2  # distance weight in the matching cost

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class AuxiliarySet:
    """Sampled auxiliary points per ground truth, with generating offsets."""

    pos_xy: np.ndarray  # (N, k_pos, 2)
    pos_offsets: np.ndarray  # (N, k_pos, 2), each component in [-n_pos, n_pos]
    neg_xy: np.ndarray  # (N, k_neg, 2)
    neg_offsets: np.ndarray  # (N, k_neg, 2), |component| in [n_pos, n_neg]
    n_pos: float
    n_neg: float

    @property
    def k_pos(self) -> int:
        return self.pos_xy.shape[1]

    @property
    def k_neg(self) -> int:
        return self.neg_xy.shape[1]


def sample_auxiliary(
    gt_xy: np.ndarray, k_pos: int, k_neg: int, n_pos: float, n_neg: float, seed: int
) -> AuxiliarySet:
    """Sample k_pos near and k_neg mid-range auxiliary points per ground truth.

    Positive offsets have each component uniform on [-n_pos, n_pos]; negative
    offsets draw each component from [-n_neg, -n_pos] u [n_pos, n_neg]
    (uniform sign, uniform magnitude). Deterministic given the seed.
    """
    if not 0 < n_pos < n_neg:
        raise ValueError(f"need 0 < n_pos < n_neg, got ({n_pos}, {n_neg})")
    if k_pos < 0 or k_neg < 0:
        raise ValueError("k_pos and k_neg must be >= 0")
    gt_xy = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    n = len(gt_xy)
    rng = np.random.default_rng(seed)
    pos_off = rng.uniform(-n_pos, n_pos, size=(n, k_pos, 2))
    signs = rng.integers(0, 2, size=(n, k_neg, 2)) * 2 - 1
    neg_off = signs * rng.uniform(n_pos, n_neg, size=(n, k_neg, 2))
    return AuxiliarySet(
        pos_xy=gt_xy[:, None, :] + pos_off,
        pos_offsets=pos_off,
        neg_xy=gt_xy[:, None, :] + neg_off,
        neg_offsets=neg_off,
        n_pos=float(n_pos),
        n_neg=float(n_neg),
    )


def loss_cls(confidences: torch.Tensor, psi, lambda1: float) -> torch.Tensor:
    """Cross-entropy over all proposals: matched count as positive, rest as
    negative (weighted by lambda1), averaged over all M proposals."""
    m = confidences.shape[0]
    psi = torch.as_tensor(np.asarray(psi, dtype=np.int64), device=confidences.device)
    neg_mask = torch.ones(m, dtype=torch.bool, device=confidences.device)
    if psi.numel():
        neg_mask[psi] = False
        pos_term = torch.log(confidences[psi]).sum()
    else:
        pos_term = confidences.new_zeros(())
    neg_term = torch.log1p(-confidences[neg_mask]).sum()
    return -(pos_term + lambda1 * neg_term) / m


def loss_loc(gt_xy: torch.Tensor, proposal_xy: torch.Tensor, psi) -> torch.Tensor:
    """Mean squared Euclidean distance between each ground truth and its match."""
    if len(gt_xy) == 0:
        return proposal_xy.new_zeros(())
    psi = torch.as_tensor(np.asarray(psi, dtype=np.int64), device=proposal_xy.device)
    diff = gt_xy - proposal_xy[psi]
    return (diff**2).sum(-1).mean()


def loss_apg_pos(
    gt_xy: torch.Tensor,
    confidences: torch.Tensor,
    proposal_xy: torch.Tensor,
    lambda3: float,
    raw_offsets: torch.Tensor | None = None,
    generating_offsets: torch.Tensor | None = None,
    reg_target: str = "proposal",
) -> torch.Tensor:
    """Auxiliary-positive loss: drive confidence to one and the proposal back
    onto the ground truth.

    confidences/proposal_xy are (N, k_pos[, 2]) predictions at the sampled
    positive points. With reg_target="raw_offset" the regression term instead
    penalizes the predicted offset against the negated generating offset; the
    two forms coincide when both offsets are expressed in pixels.
    """
    nll = -torch.log(confidences)
    if reg_target == "proposal":
        sq = ((gt_xy[:, None, :] - proposal_xy) ** 2).sum(-1)
    elif reg_target == "raw_offset":
        sq = ((raw_offsets + generating_offsets) ** 2).sum(-1)
    else:
        raise ValueError(f"unknown reg_target {reg_target!r}")
    return (nll + lambda3 * sq).mean()


def loss_apg_neg(confidences: torch.Tensor, offsets: torch.Tensor, lambda4: float) -> torch.Tensor:
    """Auxiliary-negative loss: drive confidence to zero and pin the predicted
    offset at zero so mid-range points cannot drift onto targets. The offset
    penalty is unit-agnostic; the trainer passes pixel-scaled offsets."""
    nll = -torch.log1p(-confidences)
    sq = (offsets**2).sum(-1)
    return (nll + lambda4 * sq).mean()


@dataclass
class LossBreakdown:
    l_cls: torch.Tensor
    l_loc: torch.Tensor
    l_point: torch.Tensor
    l_apg_pos: torch.Tensor
    l_apg_neg: torch.Tensor
    l_apg: torch.Tensor
    l_overall: torch.Tensor

    FIELDS = ("l_cls", "l_loc", "l_point", "l_apg_pos", "l_apg_neg", "l_apg", "l_overall")

    def floats(self) -> dict:
        return {name: float(getattr(self, name).detach()) for name in self.FIELDS}


def loss_overall(
    l_cls: torch.Tensor,
    l_loc: torch.Tensor,
    weights: LossWeights,
    l_apg_pos: torch.Tensor | None = None,
    l_apg_neg: torch.Tensor | None = None,
) -> LossBreakdown:
    """Assemble the combined objective. With auxiliary guidance disabled the
    overall loss equals the point loss exactly."""
    zero = l_cls.new_zeros(())
    l_apg_pos = zero if l_apg_pos is None else l_apg_pos
    l_apg_neg = zero if l_apg_neg is None else l_apg_neg
    l_point = l_cls + weights.lambda2 * l_loc
    l_apg = l_apg_pos + l_apg_neg
    overall = l_point + weights.lambda5 * l_apg
    bd = LossBreakdown(l_cls, l_loc, l_point, l_apg_pos, l_apg_neg, l_apg, overall)
    for name in LossBreakdown.FIELDS:
        if not torch.isfinite(getattr(bd, name)):
            raise FloatingPointError(f"non-finite loss component {name}")
    return bd
