"""Synthetic crowd scenes: blob rendering, point annotations, annotation file I/O.

Scenes are grayscale images of Gaussian blobs (one per annotated head) over
background noise. A configurable fraction of heads is placed in dense clusters
so that local density varies within a single image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PointSet",
    "SyntheticScene",
    "SceneGenConfig",
    "SceneConfigError",
    "AnnotationParseError",
    "generate_scene",
    "write_annotations",
    "read_annotations",
]


class SceneConfigError(ValueError):
    """Raised for invalid scene generator configuration."""


class AnnotationParseError(ValueError):
    """Raised when an annotation file is malformed. Message names the line."""


@dataclass
class PointSet:
    """Ordered head coordinates (pixels) for one image.

    ``boxes`` is optional per-point (w, h) head-box dims, used only by
    box-derived localization thresholds.
    """

    points: np.ndarray  # (N, 2) float64, columns (x, y)
    image_id: str
    image_size: tuple[int, int] | None = None  # (width, height), if known
    boxes: np.ndarray | None = None  # (N, 2) float64, columns (w, h)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.boxes is not None:
            self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 2)
            if len(self.boxes) != len(self.points):
                raise ValueError("boxes must have one row per point")
        if self.image_size is not None:
            w, h = self.image_size
            if len(self.points) and (
                (self.points[:, 0] < 0).any()
                or (self.points[:, 0] >= w).any()
                or (self.points[:, 1] < 0).any()
                or (self.points[:, 1] >= h).any()
            ):
                raise ValueError(
                    f"points of {self.image_id!r} outside [0,{w})x[0,{h})"
                )

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    annotations: PointSet
    rng_seed: int


@dataclass
class SceneGenConfig:
    image_size: int = 128
    n_range: tuple[int, int] = (1, 30)
    blob_sigma_range: tuple[float, float] = (1.5, 4.0)
    cluster_fraction: float = 0.5
    noise_std: float = 0.02
    channels: int = 1
    min_spacing: float = 2.0  # pairwise floor inside clusters, pixels

    def validate(self):
        lo, hi = self.n_range
        if lo < 0 or hi < lo:
            raise SceneConfigError(f"n_range must satisfy 0 <= min <= max, got {self.n_range}")
        slo, shi = self.blob_sigma_range
        if slo <= 0 or shi < slo:
            raise SceneConfigError(f"blob_sigma_range must be positive, got {self.blob_sigma_range}")
        if not 0.0 <= self.cluster_fraction <= 1.0:
            raise SceneConfigError(f"cluster_fraction must be in [0,1], got {self.cluster_fraction}")
        if self.image_size <= 0 or self.channels <= 0:
            raise SceneConfigError("image_size and channels must be positive")
        if self.noise_std < 0:
            raise SceneConfigError("noise_std must be non-negative")


def _place_points(cfg: SceneGenConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample n head positions, a cluster_fraction of them in tight groups."""
    size = cfg.image_size
    margin = 2.0
    lo, hi = margin, size - 1 - margin
    if n == 0:
        return np.zeros((0, 2))

    n_clustered = int(round(cfg.cluster_fraction * n))
    pts: list[np.ndarray] = []

    remaining = n_clustered
    while remaining > 0:
        k = int(min(remaining, rng.integers(2, 7)))
        center = rng.uniform(lo + 6, hi - 6, size=2) if hi - lo > 12 else rng.uniform(lo, hi, size=2)
        radius = rng.uniform(3.0, 10.0)
        placed: list[np.ndarray] = []
        attempts = 0
        while len(placed) < k and attempts < 200:
            attempts += 1
            p = center + rng.uniform(-radius, radius, size=2)
            p = np.clip(p, lo, hi)
            if all(np.linalg.norm(p - q) >= cfg.min_spacing for q in placed):
                placed.append(p)
        pts.extend(placed)
        remaining -= k

    while len(pts) < n:
        pts.append(rng.uniform(lo, hi, size=2))

    return np.asarray(pts[:n], dtype=np.float64)


def generate_scene(config: SceneGenConfig, seed: int) -> SyntheticScene:
    """Render one scene. Pure function of (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    size = config.image_size
    n = int(rng.integers(config.n_range[0], config.n_range[1] + 1))
    points = _place_points(config, n, rng)

    img = rng.normal(0.0, config.noise_std, size=(size, size)).astype(np.float64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for x, y in points:
        sigma = rng.uniform(*config.blob_sigma_range)
        amp = rng.uniform(0.6, 1.0)
        d2 = (xx - x) ** 2 + (yy - y) ** 2
        win = d2 < (4.0 * sigma) ** 2
        img[win] += amp * np.exp(-d2[win] / (2.0 * sigma**2))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    img = np.repeat(img[:, :, None], config.channels, axis=2)

    ann = PointSet(points=points, image_id=f"scene_{seed}", image_size=(size, size))
    return SyntheticScene(image=img, annotations=ann, rng_seed=seed)


def write_annotations(scenes: list, path) -> None:
    """Write annotation records; accepts SyntheticScene or PointSet items.

    Format: per record, a header line ``image_id width height`` followed by one
    ``x y`` (or ``x y w h``) line per point; records separated by a blank line.
    """
    records = []
    for item in scenes:
        ps = item.annotations if isinstance(item, SyntheticScene) else item
        if ps.image_size is None:
            raise ValueError(f"PointSet {ps.image_id!r} has no image_size; cannot serialize bounds")
        w, h = ps.image_size
        lines = [f"{ps.image_id} {w} {h}"]
        for i, (x, y) in enumerate(ps.points):
            if ps.boxes is not None:
                bw, bh = ps.boxes[i]
                lines.append(f"{float(x)!r} {float(y)!r} {float(bw)!r} {float(bh)!r}")
            else:
                lines.append(f"{float(x)!r} {float(y)!r}")
        records.append("\n".join(lines))
    Path(path).write_text("\n\n".join(records) + "\n", encoding="utf-8")


def read_annotations(path) -> list[PointSet]:
    """Parse annotation records back into PointSets; exact round trip."""
    text = Path(path).read_text(encoding="utf-8")
    result: list[PointSet] = []
    record_lines: list[tuple[int, str]] = []

    def flush(record):
        if not record:
            return
        lineno, header = record[0]
        parts = header.split()
        if len(parts) != 3:
            raise AnnotationParseError(
                f"line {lineno}: expected header 'image_id width height', got {header!r}"
            )
        image_id = parts[0]
        try:
            w, h = int(parts[1]), int(parts[2])
        except ValueError:
            raise AnnotationParseError(f"line {lineno}: non-integer image size in {header!r}")
        pts, boxes = [], []
        for lineno, line in record[1:]:
            fields = line.split()
            if len(fields) not in (2, 4):
                raise AnnotationParseError(
                    f"line {lineno}: expected 'x y' or 'x y w h', got {line!r}"
                )
            try:
                vals = [float(v) for v in fields]
            except ValueError:
                raise AnnotationParseError(f"line {lineno}: non-numeric coordinate in {line!r}")
            x, y = vals[0], vals[1]
            if not (0 <= x < w and 0 <= y < h):
                raise AnnotationParseError(
                    f"line {lineno}: point ({x}, {y}) outside image bounds [0,{w})x[0,{h})"
                )
            pts.append((x, y))
            if len(vals) == 4:
                boxes.append((vals[2], vals[3]))
        if boxes and len(boxes) != len(pts):
            raise AnnotationParseError(
                f"record {image_id!r}: box dims must be given for all points or none"
            )
        result.append(
            PointSet(
                points=np.asarray(pts, dtype=np.float64).reshape(-1, 2),
                image_id=image_id,
                image_size=(w, h),
                boxes=np.asarray(boxes, dtype=np.float64) if boxes else None,
            )
        )

    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip() == "":
            flush(record_lines)
            record_lines = []
        else:
            record_lines.append((lineno, line.strip()))
    flush(record_lines)
    return result
