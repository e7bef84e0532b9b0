"""Proposal network: tiny two-scale conv encoder, continuous feature queries,
and a shared confidence/offset prediction head.

Feature maps live on a cell-center lattice: the feature at (row i, col j) of a
stride-s grid sits at pixel ((j + 0.5) s, (i + 0.5) s). Continuous queries are
blended from the four surrounding lattice features with bilinear area weights;
the full interpolation variant first passes each neighbor feature, its signed
offset to the query (in cell units), and a Fourier encoding of that offset
through a small MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

__all__ = [
    "FeatureGrid",
    "PositionalEncodingConfig",
    "ModelConfig",
    "ProposalField",
    "ProposalBatch",
    "positional_encoding",
    "reference_layout",
    "FeatureInterpolator",
    "PredictionHead",
    "Encoder",
    "ProposalNetwork",
    "propose",
    "save_checkpoint",
    "load_checkpoint",
    "IFI_VARIANTS",
    "CONF_EPS",
]

IFI_VARIANTS = ("nearest", "bilinear", "ifi_single_ref", "ifi_no_pe", "ifi")

# confidences are clamped into [CONF_EPS, 1 - CONF_EPS] before any log
CONF_EPS = 1e-6


class FeatureGrid(NamedTuple):
    data: torch.Tensor  # (B, C, Hf, Wf)
    stride: int


@dataclass
class PositionalEncodingConfig:
    n_freqs: int = 8
    base: float = 2.0

    def out_dim(self, in_dim: int) -> int:
        return 2 * self.n_freqs * in_dim


def positional_encoding(x: torch.Tensor, cfg: PositionalEncodingConfig) -> torch.Tensor:
    """Map (..., d) to (..., 2 * n_freqs * d) of sin/cos at pi * base**l."""
    if cfg.n_freqs == 0:
        return x.new_zeros(x.shape[:-1] + (0,))
    freqs = x.new_tensor([math.pi * cfg.base**l for l in range(cfg.n_freqs)])
    ang = x[..., None, :] * freqs[:, None]  # (..., n_freqs, d)
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)  # (..., n_freqs, 2d)
    return out.flatten(-2)


@dataclass
class ModelConfig:
    in_channels: int = 1
    encoder_channels: tuple[int, int, int] = (12, 24, 24)
    head_dims: tuple[int, ...] = (128, 64, 64, 64)
    K: int = 4
    gamma: float = 100.0
    stride: int = 8  # proposal grid stride
    ifi_variant: str = "ifi"
    ifi_hidden: int = 48
    ifi_depth: int = 1
    detail_channels: int = 0  # shallow stride-4 detail branch; 0 disables
    pe: PositionalEncodingConfig = field(default_factory=PositionalEncodingConfig)
    dilated_block: bool = True

    def __post_init__(self):
        if isinstance(self.pe, dict):
            self.pe = PositionalEncodingConfig(**self.pe)
        if self.ifi_variant not in IFI_VARIANTS:
            raise ValueError(f"ifi_variant must be one of {IFI_VARIANTS}, got {self.ifi_variant!r}")
        if not self.head_dims:
            raise ValueError("head_dims must be non-empty")
        if self.K < 1:
            raise ValueError("K must be >= 1")


def reference_layout(stride: int, K: int) -> np.ndarray:
    """K in-cell (dx, dy) anchor offsets on a uniform rows x cols sub-grid.

    K=4 gives the 2x2 quarter points of the cell, K=8 gives 2x4.
    """
    rows = max(1, int(math.isqrt(K)))
    while K % rows:
        rows -= 1
    cols = K // rows
    xs = (np.arange(cols) + 0.5) * stride / cols
    ys = (np.arange(rows) + 0.5) * stride / rows
    layout = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)  # row-major, x fastest
    return layout.astype(np.float64)


@dataclass
class ProposalField:
    """All point proposals of one image.

    ``ids`` rows are (cell_row, cell_col, k); stable across epochs for a fixed
    image and grid, which is what the stability diagnostics rely on.
    """

    image_id: str
    ids: np.ndarray  # (M, 3) int64
    ref_xy: torch.Tensor  # (M, 2) pixels
    offsets: torch.Tensor  # (M, 2) raw
    confidences: torch.Tensor  # (M,) in (0, 1)
    gamma: float

    @property
    def coords(self) -> torch.Tensor:
        return self.ref_xy + self.gamma * self.offsets

    def __len__(self) -> int:
        return len(self.ids)


class ProposalBatch(NamedTuple):
    confidences: torch.Tensor  # (B, M)
    offsets: torch.Tensor  # (B, M, 2)
    ref_xy: torch.Tensor  # (M, 2)
    coords: torch.Tensor  # (B, M, 2)
    ids: np.ndarray  # (M, 3) rows (cell_row, cell_col, k)

    def field(self, b: int, image_id: str, gamma: float) -> ProposalField:
        return ProposalField(
            image_id=image_id,
            ids=self.ids,
            ref_xy=self.ref_xy,
            offsets=self.offsets[b],
            confidences=self.confidences[b],
            gamma=gamma,
        )


class _DilatedBlock(nn.Module):
    """Parallel 3x3 convolutions at dilation rates 1/2/3, summed then mixed."""

    def __init__(self, channels: int):
        super().__init__()
        self.branches = nn.ModuleList(
            [nn.Conv2d(channels, channels, 3, padding=d, dilation=d) for d in (1, 2, 3)]
        )
        self.norm = nn.GroupNorm(min(4, channels), channels)
        self.mix = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        y = sum(b(x) for b in self.branches)
        return torch.relu(self.mix(torch.relu(self.norm(y))))


class Encoder(nn.Module):
    """Three conv stages yielding refined feature maps at strides 4 and 8.

    Each stage pairs a stride-1 conv with a stride-2 conv; the stride-1 conv
    preserves sub-cell peak position that pure strided subsampling aliases
    away, which the confidence field needs to stay sharp at the 2-px scale.

    An optional shallow detail branch (two convs straight from the image,
    receptive field ~9 px) is concatenated onto the stride-4 output. The
    deep path carries context; the detail branch carries local peak shape
    that survives no matter how the deep features drift during training.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3 = cfg.encoder_channels

        def stage(cin, cout):
            # GroupNorm keeps the tiny from-scratch encoder trainable within
            # the short desk-scale schedule (no pretrained weights to lean on)
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.GroupNorm(min(4, cout), cout), nn.ReLU(),
                nn.Conv2d(cout, cout, 3, stride=2, padding=1),
                nn.GroupNorm(min(4, cout), cout), nn.ReLU(),
            )

        self.stem = stage(cfg.in_channels, c1)
        self.stage2 = stage(c1, c2)
        self.stage3 = stage(c2, c3)
        cd = cfg.detail_channels
        if cd:
            self.detail: nn.Module | None = nn.Sequential(
                nn.Conv2d(cfg.in_channels, cd, 5, stride=2, padding=2),
                nn.GroupNorm(min(4, cd), cd), nn.ReLU(),
                nn.Conv2d(cd, cd, 3, stride=2, padding=1),
                nn.GroupNorm(min(4, cd), cd), nn.ReLU(),
            )
        else:
            self.detail = None
        if cfg.dilated_block:
            self.refine4: nn.Module = _DilatedBlock(c2)
            self.refine8: nn.Module = _DilatedBlock(c3)
        else:
            self.refine4 = nn.Sequential(nn.Conv2d(c2, c2, 3, padding=1), nn.ReLU())
            self.refine8 = nn.Sequential(nn.Conv2d(c3, c3, 3, padding=1), nn.ReLU())
        self.out_channels = (c2 + cd, c3)

    def forward(self, images: torch.Tensor) -> tuple[FeatureGrid, FeatureGrid]:
        if images.shape[-1] % 8 or images.shape[-2] % 8:
            raise ValueError(f"image dims must be divisible by 8, got {tuple(images.shape[-2:])}")
        x = self.stem(images)
        deep4 = self.refine4(self.stage2(x))
        f8 = self.refine8(self.stage3(deep4))
        f4 = deep4 if self.detail is None else torch.cat([deep4, self.detail(images)], dim=1)
        return FeatureGrid(f4, 4), FeatureGrid(f8, 8)


class FeatureInterpolator(nn.Module):
    """Continuous feature lookup on one FeatureGrid scale."""

    def __init__(self, channels: int, variant: str, pe: PositionalEncodingConfig,
                 hidden: int = 32, depth: int = 1):
        super().__init__()
        if variant not in IFI_VARIANTS:
            raise ValueError(f"unknown interpolation variant {variant!r}")
        self.variant = variant
        self.channels = channels
        self.pe = pe
        if variant in ("ifi", "ifi_single_ref"):
            in_dim = channels + 2 + pe.out_dim(2)
        elif variant == "ifi_no_pe":
            in_dim = channels + 2
        else:
            in_dim = 0
        if in_dim:
            layers: list[nn.Module] = []
            d = in_dim
            for _ in range(depth):
                layers += [nn.Linear(d, hidden), nn.LayerNorm(hidden), nn.ReLU()]
                d = hidden
            layers.append(nn.Linear(d, channels))
            self.mlp = nn.Sequential(*layers)
        else:
            self.mlp = None
        self.out_channels = channels

    def _neighbors(self, grid: FeatureGrid, query_xy: torch.Tensor):
        """Corner features, signed offsets and area weights for each query.

        query_xy: (B, Q, 2) pixels. Returns feats (B, Q, 4, C),
        deltas (B, Q, 4, 2) in cell units, weights (B, Q, 4).
        """
        data, stride = grid.data, grid.stride
        B, C, Hf, Wf = data.shape
        W_img, H_img = Wf * stride, Hf * stride
        x, y = query_xy[..., 0], query_xy[..., 1]
        if (x < 0).any() or (x >= W_img).any() or (y < 0).any() or (y >= H_img).any():
            raise ValueError("query outside image bounds")
        if Hf < 2 or Wf < 2:
            if self.variant != "nearest":
                raise ValueError(f"grid {Hf}x{Wf} too small to interpolate")
        # cell-center convention; clamp into the lattice hull (constant
        # extrapolation in the outer half-cells)
        u = (x / stride - 0.5).clamp(0, Wf - 1)
        v = (y / stride - 0.5).clamp(0, Hf - 1)
        x0 = u.floor().clamp(0, max(Wf - 2, 0)).long()
        y0 = v.floor().clamp(0, max(Hf - 2, 0)).long()
        fx = u - x0
        fy = v - y0
        x1 = (x0 + 1).clamp(max=Wf - 1)
        y1 = (y0 + 1).clamp(max=Hf - 1)

        idx = torch.stack(
            [y0 * Wf + x0, y0 * Wf + x1, y1 * Wf + x0, y1 * Wf + x1], dim=-1
        )  # (B, Q, 4)
        flat = data.flatten(2).transpose(1, 2)  # (B, HW, C)
        gidx = idx.flatten(1).unsqueeze(-1).expand(-1, -1, C)  # (B, Q*4, C)
        feats = flat.gather(1, gidx).view(B, -1, 4, C)

        one = torch.ones_like(fx)
        wx0, wy0 = one - fx, one - fy
        weights = torch.stack([wx0 * wy0, fx * wy0, wx0 * fy, fx * fy], dim=-1)
        deltas = torch.stack(
            [
                torch.stack([fx, fy], dim=-1),
                torch.stack([fx - 1, fy], dim=-1),
                torch.stack([fx, fy - 1], dim=-1),
                torch.stack([fx - 1, fy - 1], dim=-1),
            ],
            dim=-2,
        )  # (B, Q, 4, 2)
        return feats, deltas, weights

    def forward(self, grid: FeatureGrid, query_xy: torch.Tensor) -> torch.Tensor:
        """query_xy: (B, Q, 2) pixels -> (B, Q, C) interpolated features."""
        feats, deltas, weights = self._neighbors(grid, query_xy)
        v = self.variant
        if v == "bilinear":
            return (weights.unsqueeze(-1) * feats).sum(-2)
        if v in ("nearest", "ifi_single_ref"):
            sel = weights.argmax(dim=-1, keepdim=True)  # deterministic at ties
            feat = feats.gather(-2, sel.unsqueeze(-1).expand(*sel.shape, feats.shape[-1])).squeeze(-2)
            if v == "nearest":
                return feat
            delta = deltas.gather(-2, sel.unsqueeze(-1).expand(*sel.shape, 2)).squeeze(-2)
            inp = torch.cat([feat, delta, positional_encoding(delta, self.pe)], dim=-1)
            return self.mlp(inp)
        if v == "ifi_no_pe":
            inp = torch.cat([feats, deltas], dim=-1)
        else:  # ifi
            inp = torch.cat([feats, deltas, positional_encoding(deltas, self.pe)], dim=-1)
        out = self.mlp(inp)  # (B, Q, 4, C)
        return (weights.unsqueeze(-1) * out).sum(-2)


def interpolation_weights(grid: FeatureGrid, query_xy: torch.Tensor):
    """Area weights and signed offsets alone, for diagnostics and tests."""
    probe = FeatureInterpolator(grid.data.shape[1], "bilinear", PositionalEncodingConfig(0))
    _, deltas, weights = probe._neighbors(grid, query_xy)
    return weights, deltas


class PredictionHead(nn.Module):
    """Shared MLP head emitting (confidence, raw offset) per query feature.

    The final layer is zero-initialized so an untrained head answers
    confidence 0.5 and offset (0, 0) everywhere. The neutral confidence
    start keeps the opposing gradients of the positive (-log c) and
    negative (-log(1-c)) terms balanced from the first step; a biased
    start lets whichever side it favors run away early.
    """

    def __init__(self, in_dim: int, hidden_dims: tuple[int, ...]):
        super().__init__()
        layers: list[nn.Module] = []
        d = in_dim
        for h in hidden_dims:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        self.body = nn.Sequential(*layers)
        self.out = nn.Linear(d, 3)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.in_dim = in_dim

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if feat.shape[-1] != self.in_dim:
            raise ValueError(f"feature dim {feat.shape[-1]} != head input dim {self.in_dim}")
        y = self.out(self.body(feat))
        conf = torch.sigmoid(y[..., 0]).clamp(CONF_EPS, 1 - CONF_EPS)
        return conf, y[..., 1:]


class ProposalNetwork(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        c4, c8 = self.encoder.out_channels
        self.interp4 = FeatureInterpolator(
            c4, config.ifi_variant, config.pe, config.ifi_hidden, config.ifi_depth)
        self.interp8 = FeatureInterpolator(
            c8, config.ifi_variant, config.pe, config.ifi_hidden, config.ifi_depth)
        self.head = PredictionHead(c4 + c8, tuple(config.head_dims))
        self.layout = reference_layout(config.stride, config.K)

    def encode(self, images: torch.Tensor) -> tuple[FeatureGrid, FeatureGrid]:
        return self.encoder(images)

    def query_points(
        self, grids: tuple[FeatureGrid, FeatureGrid], xy: torch.Tensor, clamp: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Predict (confidence, raw offset, proposal position) at pixel queries.

        xy: (B, P, 2). This is the single pathway shared by grid reference
        points and auxiliary points.
        """
        f4, f8 = grids
        if clamp:
            H_img = f8.data.shape[2] * f8.stride
            W_img = f8.data.shape[3] * f8.stride
            # margin must survive float32 rounding at image-size magnitudes
            hi = xy.new_tensor([W_img - 1e-3, H_img - 1e-3])
            xy = torch.minimum(torch.clamp(xy, min=0.0), hi)
        feat = torch.cat([self.interp4(f4, xy), self.interp8(f8, xy)], dim=-1)
        conf, offsets = self.head(feat)
        coords = xy + self.config.gamma * offsets
        return conf, offsets, coords

    def reference_points(self, H: int, W: int, device=None, dtype=torch.float32):
        """(M, 2) pixel positions and (M, 3) ids for an H x W input."""
        s, K = self.config.stride, self.config.K
        hf, wf = H // s, W // s
        rows, cols = np.meshgrid(np.arange(hf), np.arange(wf), indexing="ij")
        base = np.stack([cols * s, rows * s], axis=-1).reshape(-1, 1, 2)  # (cells, 1, 2) x,y
        pts = (base + self.layout[None, :, :]).reshape(-1, 2)
        ids = np.concatenate(
            [
                np.repeat(np.stack([rows.ravel(), cols.ravel()], axis=-1), K, axis=0),
                np.tile(np.arange(K), hf * wf)[:, None],
            ],
            axis=1,
        ).astype(np.int64)
        return torch.as_tensor(pts, device=device, dtype=dtype), ids

    def forward(self, images: torch.Tensor) -> ProposalBatch:
        grids = self.encode(images)
        B, _, H, W = images.shape
        ref, ids = self.reference_points(H, W, device=images.device, dtype=images.dtype)
        queries = ref.unsqueeze(0).expand(B, -1, -1)
        conf, offsets, coords = self.query_points(grids, queries)
        return ProposalBatch(conf, offsets, ref, coords, ids)


def propose(image: np.ndarray, model: ProposalNetwork, image_id: str = "image") -> ProposalField:
    """Run the network on one HxWxC image array and collect its proposals."""
    t = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32)
    t = t.permute(2, 0, 1).unsqueeze(0)
    batch = model(t)
    return batch.field(0, image_id, model.config.gamma)


def save_checkpoint(model: ProposalNetwork, path) -> None:
    torch.save({"config": asdict(model.config), "state_dict": model.state_dict()}, path)


def load_checkpoint(path) -> ProposalNetwork:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = blob["config"]
    cfg["encoder_channels"] = tuple(cfg["encoder_channels"])
    cfg["head_dims"] = tuple(cfg["head_dims"])
    model = ProposalNetwork(ModelConfig(**cfg))
    model.load_state_dict(blob["state_dict"])
    return model
