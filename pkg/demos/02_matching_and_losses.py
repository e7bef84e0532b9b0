"""Walk through one supervision step: propose points from an untrained
network, match them to ground truth with the Hungarian solver, sample
auxiliary points, and assemble the full loss breakdown.

    python3 demos/02_matching_and_losses.py
"""

import numpy as np
import torch

from pointcrowd.losses import LossWeights, loss_cls, loss_loc, loss_overall, sample_auxiliary
from pointcrowd.matching import build_cost, hungarian_match, partition
from pointcrowd.model import ModelConfig, ProposalNetwork, propose
from pointcrowd.scenes import SceneGenConfig, generate_scene

torch.manual_seed(0)

scene = generate_scene(SceneGenConfig(n_range=(8, 8)), seed=11)
gt = scene.annotations.points
print(f"scene with {len(gt)} ground-truth points")

model = ProposalNetwork(ModelConfig())
field = propose(scene.image, model)
print(f"{len(field)} proposals on the stride-8 grid (4 per cell)")

# Cost couples distance (weight tau) against confidence; the optimal
# one-to-one assignment picks each ground truth's proposal.
cost = build_cost(gt, field.coords.detach().numpy(), field.confidences.detach().numpy(), tau=0.05)
match = hungarian_match(cost)
pos, neg = partition(match, len(field))
print(f"matched {len(pos)} positives, {len(neg)} negatives, total cost {match.total_cost:.3f}")
for i, j in enumerate(match.psi[:4]):
    d = np.linalg.norm(gt[i] - field.coords[j].detach().numpy())
    print(f"  gt {i} at ({gt[i][0]:6.2f}, {gt[i][1]:6.2f}) -> proposal {j} ({d:.2f} px away)")

# Auxiliary guidance: near points (within 2 px of a ground truth) are pushed
# toward confidence 1, mid-range points (2 to 8 px) toward confidence 0.
aux = sample_auxiliary(gt, k_pos=2, k_neg=2, n_pos=2.0, n_neg=8.0, seed=0)
print(f"\nsampled {aux.pos_xy.shape[1]} near + {aux.neg_xy.shape[1]} mid-range points per gt")
print(f"example near offsets: {np.round(aux.pos_offsets[0], 2).tolist()}")
print(f"example mid-range offsets: {np.round(aux.neg_offsets[0], 2).tolist()}")

weights = LossWeights()
l_cls = loss_cls(field.confidences, pos, weights.lambda1)
l_loc = loss_loc(torch.as_tensor(gt, dtype=torch.float32), field.coords, match.psi)
bd = loss_overall(l_cls, l_loc, weights)
print("\nloss breakdown at initialization:")
for name, value in bd.floats().items():
    print(f"  {name:10s} {value:.6f}")
