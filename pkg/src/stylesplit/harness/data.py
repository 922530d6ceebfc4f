"""Synthetic shapes-times-styles dataset.

Every sample is a 64x64 RGB image of one of four shapes (circle, triangle,
square, cross) rendered with jittered pose and colors, then passed through
one of nine appearance styles: clean, or {tint, veil, grain, streak} at two
intensities.  Shape and style ids are drawn independently and uniformly from
a per-sample generator seeded by hash(run_seed, index), so any slice of the
dataset can be regenerated without touching the rest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..tensorops import OpError, Tensor, derive_seed

SHAPE_NAMES = ("circle", "triangle", "square", "cross")
STYLE_NAMES = (
    "clean",
    "tint_lo",
    "tint_hi",
    "veil_lo",
    "veil_hi",
    "grain_lo",
    "grain_hi",
    "streak_lo",
    "streak_hi",
)

# (kind, strength) per style id; strengths chosen so the two intensities are
# clearly separated but neither destroys the underlying shape
_STYLE_PARAMS = {
    1: ("tint", 0.18),
    2: ("tint", 0.40),
    3: ("veil", 0.25),
    4: ("veil", 0.50),
    5: ("grain", 0.06),
    6: ("grain", 0.14),
    7: ("streak", 0.12),
    8: ("streak", 0.28),
}


def _coord_grid(res: int) -> tuple[np.ndarray, np.ndarray]:
    axis = (np.arange(res) + 0.5) / res
    return np.meshgrid(axis, axis, indexing="xy")


def _rotate(xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, theta: float):
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    return u, v


# area = coef * r^2 and farthest-point distance = extent * r for each shape,
# given the vertex constructions below.  Size is sampled as a target area
# fraction shared by all classes so that foreground area carries no shape
# information: a pooled "how many pixels are lit" statistic would otherwise
# separate the classes on its own.
_SHAPE_AREA_COEF = (np.pi, 1.299, 2.690, 2.362)
_SHAPE_EXTENT = (1.0, 1.0, 1.161, 1.063)


def _shape_mask(shape_id: int, rng: np.random.Generator, res: int) -> np.ndarray:
    if not 0 <= shape_id < len(SHAPE_NAMES):
        raise OpError(f"shape id must be in [0, {len(SHAPE_NAMES)}), got {shape_id}")
    xx, yy = _coord_grid(res)
    area = rng.uniform(0.10, 0.20)
    r = float(np.sqrt(area / _SHAPE_AREA_COEF[shape_id]))
    # keep the farthest vertex inside the frame; only large triangles bind
    half = min(0.12, 0.97 - 0.5 - r * _SHAPE_EXTENT[shape_id])
    cx, cy = rng.uniform(0.5 - half, 0.5 + half, size=2)
    theta = rng.uniform(0, np.pi)
    u, v = _rotate(xx, yy, cx, cy, theta)
    if shape_id == 0:  # circle
        return (u * u + v * v) <= r * r
    if shape_id == 1:  # triangle: three half-planes around the centroid
        angles = theta + np.array([0.5, 2.594, 4.689])  # ~120 degrees apart
        vx = cx + r * np.cos(angles)
        vy = cy + r * np.sin(angles)
        mask = np.ones((res, res), dtype=bool)
        for i in range(3):
            x0, y0 = vx[i], vy[i]
            x1, y1 = vx[(i + 1) % 3], vy[(i + 1) % 3]
            cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
            centroid_side = (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0)
            mask &= cross * centroid_side >= 0
        return mask
    if shape_id == 2:  # square
        s = r * 0.82
        return np.maximum(np.abs(u), np.abs(v)) <= s
    # shape_id == 3, cross
    arm = r * 0.36
    inside = np.maximum(np.abs(u), np.abs(v)) <= r
    return inside & ((np.abs(u) <= arm) | (np.abs(v) <= arm))


def _separable_blur(img: np.ndarray, radius: int) -> np.ndarray:
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / max(radius * 0.6, 1e-6)) ** 2)
    taps /= taps.sum()
    padded = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for i, t in enumerate(taps):
        out += t * padded[i : i + img.shape[0]]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for i, t in enumerate(taps):
        out += t * padded[:, i : i + img.shape[1]]
    return out


def _apply_style(img: np.ndarray, style_id: int, rng: np.random.Generator) -> np.ndarray:
    if style_id == 0:
        return img
    kind, s = _STYLE_PARAMS[style_id]
    res = img.shape[0]
    if kind == "tint":
        direction = rng.normal(size=3)
        direction = direction / np.linalg.norm(direction)
        img = img * (1.0 + s * direction)
    elif kind == "veil":
        radius = 1 if s < 0.4 else 2
        img = _separable_blur(img, radius)
        haze = rng.uniform(0.7, 0.9)
        img = (1 - s) * img + s * haze
    elif kind == "grain":
        img = img + s * rng.normal(size=img.shape)
    elif kind == "streak":
        xx, yy = _coord_grid(res)
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(4.0, 8.0)
        phase = rng.uniform(0, 2 * np.pi)
        band = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img = img + s * band[..., None]
    return np.clip(img, 0.0, 1.0)


def sample_record(run_seed: int, index: int, resolution: int = 64) -> tuple[Tensor, int, int]:
    """Render sample `index` of the run: (CHW float32 image in [-1,1], shape, style)."""
    rng = np.random.default_rng(derive_seed(run_seed, index))
    shape_id = int(rng.integers(len(SHAPE_NAMES)))
    style_id = int(rng.integers(len(STYLE_NAMES)))
    mask = _shape_mask(shape_id, rng, resolution)
    bg = rng.uniform(0.10, 0.30) + rng.uniform(-0.05, 0.05, size=3)
    fg = rng.uniform(0.60, 0.90) + rng.uniform(-0.05, 0.05, size=3)
    img = np.where(mask[..., None], fg, bg)
    img = _apply_style(img, style_id, rng)
    chw = torch.from_numpy((img * 2.0 - 1.0).transpose(2, 0, 1).astype(np.float32))
    return chw, shape_id, style_id


@dataclass
class SyntheticDataset:
    images: Tensor  # [N, 3, R, R] in [-1, 1]
    content_labels: Tensor  # [N] shape ids
    style_labels: Tensor  # [N] style ids
    run_seed: int

    def __len__(self) -> int:
        return self.images.shape[0]


def make_dataset(n: int, run_seed: int, resolution: int = 64) -> SyntheticDataset:
    if n < 1:
        raise OpError(f"make_dataset: n must be >= 1, got {n}")
    images, shapes, styles = [], [], []
    for i in range(n):
        img, shape_id, style_id = sample_record(run_seed, i, resolution)
        images.append(img)
        shapes.append(shape_id)
        styles.append(style_id)
    return SyntheticDataset(
        images=torch.stack(images),
        content_labels=torch.tensor(shapes, dtype=torch.long),
        style_labels=torch.tensor(styles, dtype=torch.long),
        run_seed=run_seed,
    )
