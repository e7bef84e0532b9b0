"""End-to-end training: augmentation, target-selection strategies, the
optimization loop with per-epoch stability probing, evaluation, and run
artifacts (CSV logs + checkpoints).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .losses import (
    LossWeights,
    loss_apg_neg,
    loss_apg_pos,
    loss_cls,
    loss_loc,
    loss_overall,
    sample_auxiliary,
)
from .matching import StabilityRecord, build_cost, hungarian_match, instability_rate
from .metrics import counting_metrics, infer_predictions, localization_metrics
from .model import ModelConfig, ProposalBatch, ProposalNetwork, save_checkpoint
from .scenes import SceneGenConfig, SyntheticScene, generate_scene

__all__ = [
    "STRATEGIES",
    "TrainConfig",
    "RunArtifacts",
    "TargetSelection",
    "augment",
    "select_targets",
    "train",
    "evaluate",
    "make_dataset",
]

STRATEGIES = ("matcher", "nearest_point", "apg_only", "matcher_apg")

# seed offsets keeping probe/test scene streams fixed across run seeds
_PROBE_SEED_BASE = 8_000_000
_TEST_SEED_BASE = 9_000_000


@dataclass
class TrainConfig:
    strategy: str = "matcher_apg"
    epochs: int = 150
    batch_size: int = 8
    lr: float = 1e-4
    encoder_lr: float | None = None  # only meaningful with a pretrained encoder
    crop: int = 128
    scale_range: tuple[float, float] = (0.7, 1.3)
    flip_prob: float = 0.5
    seed: int = 0
    n_train: int = 200
    n_probe: int = 16
    n_test: int = 50
    k_pos: int = 2
    k_neg: int = 2
    n_pos: float = 2.0
    n_neg: float = 8.0
    probe_interval: int = 1
    checkpoint_interval: int = 0  # extra checkpoints every n epochs; 0 = first/last only
    eval_sigmas: tuple[float, ...] = (4.0, 8.0)
    infer_threshold: float = 0.5
    pos_reg_target: str = "proposal"
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.scene, dict):
            self.scene = SceneGenConfig(**self.scene)


@dataclass
class RunArtifacts:
    out_dir: Path
    losses_csv: Path
    stability_csv: Path
    ir_csv: Path
    eval_csv: Path
    checkpoint_dir: Path
    ir_history: list  # (epoch, ir, avg_delta)
    mae: float | None = None
    mse: float | None = None
    f1: dict | None = None  # sigma -> f1
    mean_signed_error: float | None = None


def make_dataset(cfg: TrainConfig) -> tuple[list, list, list]:
    """Generate the (train, probe, test) scene lists for a run. Probe and test
    scene seeds are fixed across run seeds so runs stay comparable."""
    train = [generate_scene(cfg.scene, cfg.seed * 100_000 + i) for i in range(cfg.n_train)]
    probe = [generate_scene(cfg.scene, _PROBE_SEED_BASE + i) for i in range(cfg.n_probe)]
    test = [generate_scene(cfg.scene, _TEST_SEED_BASE + i) for i in range(cfg.n_test)]
    return train, probe, test


def augment(scene: SyntheticScene, cfg: TrainConfig, rng: np.random.Generator):
    """Random rescale (shorter side kept >= crop), random crop, random
    horizontal flip; annotations transformed identically, out-of-crop points
    dropped. Returns (image HxWxC float32, points (n, 2))."""
    img = scene.image
    pts = scene.annotations.points.copy()
    h, w = img.shape[:2]
    crop = cfg.crop

    s = rng.uniform(*cfg.scale_range)
    s = max(s, crop / min(h, w))
    nh, nw = max(crop, round(h * s)), max(crop, round(w * s))
    if (nh, nw) != (h, w):
        t = torch.from_numpy(img).permute(2, 0, 1).unsqueeze(0)
        t = F.interpolate(t, size=(nh, nw), mode="bilinear", align_corners=False)
        img = t.squeeze(0).permute(1, 2, 0).numpy()
        pts = pts * np.array([nw / w, nh / h])
    h, w = nh, nw

    x0 = int(rng.integers(0, w - crop + 1))
    y0 = int(rng.integers(0, h - crop + 1))
    img = img[y0 : y0 + crop, x0 : x0 + crop]
    pts = pts - np.array([x0, y0], dtype=np.float64)
    inside = (
        (pts[:, 0] >= 0) & (pts[:, 0] < crop) & (pts[:, 1] >= 0) & (pts[:, 1] < crop)
        if len(pts)
        else np.zeros(0, dtype=bool)
    )
    pts = pts[inside]

    if rng.uniform() < cfg.flip_prob:
        img = img[:, ::-1].copy()
        if len(pts):
            pts[:, 0] = (crop - 1) - pts[:, 0]

    return np.ascontiguousarray(img, dtype=np.float32), pts


@dataclass
class TargetSelection:
    psi: np.ndarray | None  # (N,) proposal index per ground truth, or None
    positives: np.ndarray | None  # distinct positive proposal indices
    apply_point_loss: bool
    apply_apg: bool
    duplicate_claims: int = 0


def select_targets(strategy: str, gt_xy, proposal_xy, confidences, tau: float) -> TargetSelection:
    """Pick the supervision targets for one image under a training strategy."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    apply_apg = strategy in ("apg_only", "matcher_apg")
    if strategy == "apg_only":
        return TargetSelection(None, None, False, True)

    gt_xy = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    if len(gt_xy) == 0:
        return TargetSelection(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), True, apply_apg
        )
    if strategy == "nearest_point":
        dist = np.linalg.norm(
            gt_xy[:, None, :] - np.asarray(proposal_xy, dtype=np.float64)[None, :, :], axis=-1
        )
        psi = dist.argmin(axis=1).astype(np.int64)
        positives = np.unique(psi)
        return TargetSelection(psi, positives, True, apply_apg, len(psi) - len(positives))
    match = hungarian_match(build_cost(gt_xy, proposal_xy, confidences, tau))
    return TargetSelection(match.psi, match.positives, True, apply_apg)


def _image_loss(cfg: TrainConfig, batch, b, gt_pts, aux=None, aux_preds=None):
    """Loss breakdown for one image of a batch.

    aux/aux_preds: the image's AuxiliarySet and its (conf, raw offset, coords)
    predictions, already queried (batched across images by the caller).
    """
    conf = batch.confidences[b]
    coords = batch.coords[b]
    gt = torch.as_tensor(gt_pts, dtype=conf.dtype)
    zero = conf.new_zeros(())

    sel = select_targets(
        cfg.strategy,
        gt_pts,
        coords.detach().numpy(),
        conf.detach().numpy(),
        cfg.weights.tau,
    )

    if sel.apply_point_loss:
        l_cls = loss_cls(conf, sel.positives, cfg.weights.lambda1)
        l_loc = loss_loc(gt, coords, sel.psi) if len(gt_pts) else zero
    else:
        l_cls, l_loc = zero, zero

    l_pos = l_neg = None
    if sel.apply_apg and aux is not None and aux_preds is not None:
        a_conf, a_off, a_coords = aux_preds
        n = len(gt_pts)
        kp, kn = aux.k_pos, aux.k_neg
        gamma = cfg.model.gamma
        if kp:
            l_pos = loss_apg_pos(
                gt,
                a_conf[: n * kp].view(n, kp),
                a_coords[: n * kp].view(n, kp, 2),
                cfg.weights.lambda3,
                # offsets in pixels so both regression targets agree in scale
                raw_offsets=gamma * a_off[: n * kp].view(n, kp, 2),
                generating_offsets=torch.as_tensor(aux.pos_offsets, dtype=conf.dtype),
                reg_target=cfg.pos_reg_target,
            )
        if kn:
            l_neg = loss_apg_neg(
                a_conf[n * kp : n * (kp + kn)].view(n, kn),
                gamma * a_off[n * kp : n * (kp + kn)].view(n, kn, 2),
                cfg.weights.lambda4,
            )

    return loss_overall(l_cls, l_loc, cfg.weights, l_pos, l_neg), sel


def _batch_aux_queries(cfg: TrainConfig, model, grids, gts, step_key):
    """Sample auxiliary sets for every image and query them in one padded call.

    Returns (aux_sets, preds) aligned with gts; entries are None for images
    without auxiliary supervision.
    """
    if cfg.strategy not in ("apg_only", "matcher_apg") or not (cfg.k_pos or cfg.k_neg):
        return [None] * len(gts), [None] * len(gts)
    aux_sets = []
    queries = []
    for b, pts in enumerate(gts):
        if len(pts) == 0:
            aux_sets.append(None)
            queries.append(np.zeros((0, 2)))
            continue
        aux = sample_auxiliary(pts, cfg.k_pos, cfg.k_neg, cfg.n_pos, cfg.n_neg, step_key + (b,))
        aux_sets.append(aux)
        queries.append(
            np.concatenate([aux.pos_xy.reshape(-1, 2), aux.neg_xy.reshape(-1, 2)], axis=0)
        )
    pmax = max(len(q) for q in queries)
    if pmax == 0:
        return aux_sets, [None] * len(gts)
    padded = np.full((len(gts), pmax, 2), cfg.crop / 2.0)
    for b, q in enumerate(queries):
        padded[b, : len(q)] = q
    xy = torch.as_tensor(padded, dtype=torch.float32)
    conf, off, coords = model.query_points(grids, xy, clamp=True)
    preds = [
        (conf[b], off[b], coords[b]) if aux_sets[b] is not None else None
        for b in range(len(gts))
    ]
    return aux_sets, preds


def grids_slice(grids, b):
    """View of one image's feature grids from a batch."""
    f4, f8 = grids
    return (
        f4._replace(data=f4.data[b : b + 1]),
        f8._replace(data=f8.data[b : b + 1]),
    )


def _probe_record(model, probe_scenes, tau, epoch) -> StabilityRecord:
    record = StabilityRecord(epoch=epoch)
    with torch.no_grad():
        for scene in probe_scenes:
            img = torch.from_numpy(scene.image).permute(2, 0, 1).unsqueeze(0)
            batch = model(img)
            gt = scene.annotations.points
            record.entries.setdefault(scene.annotations.image_id, [])
            if len(gt) == 0:
                continue
            conf = batch.confidences[0].numpy()
            coords = batch.coords[0].numpy()
            match = hungarian_match(build_cost(gt, coords, conf, tau))
            for i, j in enumerate(match.psi):
                record.add(scene.annotations.image_id, i, int(j), coords[j, 0], coords[j, 1])
    return record


def evaluate(model, scenes, sigmas, threshold: float = 0.5):
    """Per-image counting and localization rows plus aggregates."""
    rows = []
    pairs = []
    agg = {s: {"tp": 0, "fp": 0, "fn": 0} for s in sigmas}
    with torch.no_grad():
        for scene in scenes:
            img = torch.from_numpy(scene.image).permute(2, 0, 1).unsqueeze(0)
            batch = model(img)
            fld = batch.field(0, scene.annotations.image_id, model.config.gamma)
            count, pred_xy = infer_predictions(fld, threshold)
            gt = scene.annotations.points
            row = {"image_id": scene.annotations.image_id, "gt_count": len(gt), "pred_count": count}
            for s in sigmas:
                loc = localization_metrics(gt, pred_xy, s)
                row[f"tp_{s:g}"] = loc.tp
                row[f"fp_{s:g}"] = loc.fp
                row[f"fn_{s:g}"] = loc.fn
                for k in ("tp", "fp", "fn"):
                    agg[s][k] += getattr(loc, k)
            rows.append(row)
            pairs.append((len(gt), count))
    counting = counting_metrics(pairs)
    f1 = {}
    for s in sigmas:
        tp, fp, fn = agg[s]["tp"], agg[s]["fp"], agg[s]["fn"]
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1[s] = 2 * p * r / (p + r) if p + r else 0.0
    signed = float(np.mean([c - g for g, c in counting.per_image]))
    return rows, counting, f1, signed


def _fmt(v) -> str:
    return repr(float(v))


def train(config: TrainConfig, out_dir, overwrite: bool = False) -> RunArtifacts:
    """Run the full training loop; reproducible given (config, seed)."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not overwrite:
        raise FileExistsError(f"{out_dir} is not empty; pass overwrite=True to clobber")
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    model = ProposalNetwork(config.model)
    params = list(model.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr)

    (out_dir / "config.yaml").write_text(yaml.safe_dump(asdict(config), sort_keys=True))
    save_checkpoint(model, ckpt_dir / "epoch_0")

    train_scenes, probe_scenes, test_scenes = make_dataset(config)

    losses_csv = out_dir / "losses.csv"
    stability_csv = out_dir / "stability.csv"
    ir_csv = out_dir / "ir.csv"
    eval_csv = out_dir / "eval.csv"

    loss_f = losses_csv.open("w", newline="")
    loss_writer = csv.writer(loss_f)
    loss_writer.writerow(
        ["step", "l_cls", "l_loc", "l_point", "l_apg_pos", "l_apg_neg", "l_apg", "l_overall"]
    )
    stab_f = stability_csv.open("w", newline="")
    stab_writer = csv.writer(stab_f)
    stab_writer.writerow(["epoch", "image_id", "gt_index", "proposal_id", "x", "y"])
    ir_f = ir_csv.open("w", newline="")
    ir_writer = csv.writer(ir_f)
    ir_writer.writerow(["epoch", "ir", "avg_delta"])

    ir_history = []
    prev_record = None
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            order_rng = np.random.default_rng((config.seed, 1, epoch))
            order = order_rng.permutation(config.n_train)
            for start in range(0, config.n_train, config.batch_size):
                idxs = order[start : start + config.batch_size]
                images, gts = [], []
                for pos_in_batch, idx in enumerate(idxs):
                    rng = np.random.default_rng((config.seed, 2, epoch, int(idx)))
                    img, pts = augment(train_scenes[idx], config, rng)
                    images.append(torch.from_numpy(img).permute(2, 0, 1))
                    gts.append(pts)
                imgs = torch.stack(images)

                grids = model.encode(imgs)
                ref, _ = model.reference_points(config.crop, config.crop, dtype=imgs.dtype)
                conf_b, off_b, coords_b = model.query_points(
                    grids, ref.unsqueeze(0).expand(len(idxs), -1, -1)
                )
                batch = ProposalBatch(conf_b, off_b, ref, coords_b, None)

                aux_sets, aux_preds = _batch_aux_queries(
                    config, model, grids, gts, (config.seed, 3, epoch, step)
                )
                total = None
                logged = {k: 0.0 for k in ("l_cls", "l_loc", "l_point", "l_apg_pos", "l_apg_neg", "l_apg", "l_overall")}
                for b in range(len(idxs)):
                    try:
                        bd, _ = _image_loss(config, batch, b, gts[b], aux_sets[b], aux_preds[b])
                    except FloatingPointError as e:
                        raise FloatingPointError(
                            f"step {step}, image {b}: {e}"
                        ) from e
                    total = bd.l_overall if total is None else total + bd.l_overall
                    for k, v in bd.floats().items():
                        logged[k] += v / len(idxs)
                total = total / len(idxs)
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                step += 1
                loss_writer.writerow([step] + [_fmt(logged[k]) for k in logged])

            if config.probe_interval and epoch % config.probe_interval == 0:
                record = _probe_record(model, probe_scenes, config.weights.tau, epoch)
                for image_id, entries in sorted(record.entries.items()):
                    for gt_index, pid, x, y in entries:
                        stab_writer.writerow([epoch, image_id, gt_index, pid, _fmt(x), _fmt(y)])
                if prev_record is not None:
                    ir, avg_delta = instability_rate(prev_record, record)
                    ir_writer.writerow([epoch, _fmt(ir), _fmt(avg_delta)])
                    ir_history.append((epoch, ir, avg_delta))
                prev_record = record

            if config.checkpoint_interval and epoch % config.checkpoint_interval == 0:
                save_checkpoint(model, ckpt_dir / f"epoch_{epoch}")
    finally:
        loss_f.close()
        stab_f.close()
        ir_f.close()

    if config.epochs:
        save_checkpoint(model, ckpt_dir / f"epoch_{config.epochs}")

    rows, counting, f1, signed = evaluate(
        model, test_scenes, config.eval_sigmas, config.infer_threshold
    )
    with eval_csv.open("w", newline="") as f:
        fieldnames = list(rows[0].keys()) if rows else ["image_id", "gt_count", "pred_count"]
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow(row)
        summary = {"image_id": "summary", "gt_count": sum(r["gt_count"] for r in rows),
                   "pred_count": sum(r["pred_count"] for r in rows)}
        for s in config.eval_sigmas:
            for k in ("tp", "fp", "fn"):
                summary[f"{k}_{s:g}"] = sum(r[f"{k}_{s:g}"] for r in rows)
        w.writerow(summary)

    return RunArtifacts(
        out_dir=out_dir,
        losses_csv=losses_csv,
        stability_csv=stability_csv,
        ir_csv=ir_csv,
        eval_csv=eval_csv,
        checkpoint_dir=ckpt_dir,
        ir_history=ir_history,
        mae=counting.mae,
        mse=counting.mse,
        f1={float(s): f1[s] for s in f1},
        mean_signed_error=signed,
    )
