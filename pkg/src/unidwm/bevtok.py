"""BEV tokenizer: geometric camera-to-BEV splat, downsampling, flatten + project.

Grid convention: cell ``(ix, iy)`` covers ``x in [-W/2 + ix, -W/2 + ix + 1)``
and ``y in [-H/2 + iy, ...)`` (times the cell size) in the ego frame at
time t, x forward and y left. Tensors are channels-first ``(B, C, X, Y)``
and flatten row-major with x as the slow index.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .toyworld.sensors import CameraSpec


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------- splatting


def trace_cells(origin, direction, w: int, h: int) -> Tuple[np.ndarray, np.ndarray]:
    """Cells crossed by a 2D ray in grid units, with the entry distance of each.

    ``origin`` is in continuous grid coordinates, ``direction`` a unit 2D
    vector. The integer part of the origin is split off before marching so a
    whole-cell shift of the origin shifts the traversal exactly.
    """
    base = np.floor(origin).astype(np.int64)
    frac = np.asarray(origin, dtype=np.float64) - base
    d = np.asarray(direction, dtype=np.float64)
    cell = np.floor(frac + 1e-9 * d).astype(np.int64)
    step = np.where(d > 0, 1, -1)
    with np.errstate(divide="ignore"):
        t_max = np.where(d != 0, (cell + (d > 0) - frac) / d, np.inf)
        t_delta = np.where(d != 0, 1.0 / np.abs(d), np.inf)
    cells, enters = [], []
    t = 0.0
    while True:
        ix, iy = cell + base
        if not (0 <= ix < w and 0 <= iy < h):
            # the origin may sit outside the grid; keep marching until we enter or pass through
            if cells or t > 2.0 * (w + h):
                break
        else:
            cells.append(ix * h + iy)
            enters.append(t)
        axis = 0 if t_max[0] <= t_max[1] else 1
        t = t_max[axis]
        cell[axis] += step[axis]
        t_max[axis] += t_delta[axis]
    return np.asarray(cells, dtype=np.int64), np.asarray(enters, dtype=np.float64)


@dataclass
class SplatPlan:
    """Sparse pixel-to-cell operator: ``splat[cell] = sum(weight * feature[pixel])``."""

    cells: np.ndarray
    pixels: np.ndarray
    counts: np.ndarray  # deposits per cell, (w*h,)
    n_pixels: int
    w: int
    h: int

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.counts[self.cells]

    def apply(self, features: torch.Tensor, normalize: bool = True) -> torch.Tensor:
        """(P, C) pixel features -> (C, w, h) splat."""
        vals = features[torch.as_tensor(self.pixels)]
        if normalize:
            vals = vals * torch.as_tensor(self.weights, dtype=features.dtype).unsqueeze(-1)
        out = features.new_zeros(self.w * self.h, features.shape[-1])
        out = out.index_add(0, torch.as_tensor(self.cells), vals)
        return out.T.reshape(features.shape[-1], self.w, self.h)


@lru_cache(maxsize=8)
def _camera_columns(cams: CameraSpec, w: int, h: int, cell_size: float, origin: Tuple[float, float]):
    """Per (view, column): traversal of its ground-projected ray; per pixel: horizontal scale."""
    dirs = cams.pixel_directions()  # (V, H, W, 3)
    V, H, W, _ = dirs.shape
    g0 = np.array([w / 2.0 + origin[0] / cell_size, h / 2.0 + origin[1] / cell_size])
    traces = []
    for v in range(V):
        for u in range(W):
            d2 = dirs[v, 0, u, :2]
            traces.append(trace_cells(g0, d2 / np.linalg.norm(d2), w, h))
    horiz = np.linalg.norm(dirs[..., :2], axis=-1) / cell_size  # grid units per metre of ray
    return traces, horiz


def splat_plan(images: np.ndarray, cams: CameraSpec, w: int, h: int, cell_size: float = 1.0,
               origin: Tuple[float, float] = (0.0, 0.0)) -> SplatPlan:
    """Trace every pixel ray across the BEV grid up to its hit (or the grid edge on a miss).

    ``images`` is (V, H, W, C) with inverse depth in the last channel. The
    camera sits at ego-frame position ``origin`` (metres).
    """
    traces, horiz = _camera_columns(cams, w, h, float(cell_size), tuple(float(o) for o in origin))
    V, H, W = images.shape[:3]
    inv = np.asarray(images[..., -1], dtype=np.float64)
    with np.errstate(divide="ignore"):
        reach = np.where(inv > 0, horiz / np.where(inv > 0, inv, 1.0), np.inf)  # grid units
    cells, pixels = [], []
    for v in range(V):
        for u in range(W):
            c, t_enter = traces[v * W + u]
            counts = np.searchsorted(t_enter, reach[v, :, u], side="left")
            pix = (v * H + np.arange(H)) * W + u
            pixels.append(np.repeat(pix, counts))
            cells.append(np.concatenate([c[:k] for k in counts]) if counts.sum() else np.zeros(0, np.int64))
    cells = np.concatenate(cells).astype(np.int64)
    pixels = np.concatenate(pixels).astype(np.int64)
    counts = np.bincount(cells, minlength=w * h).astype(np.float64)
    return SplatPlan(cells, pixels, np.maximum(counts, 1.0), V * H * W, w, h)


def splat_images(images, cams: CameraSpec, w: int, h: int, cell_size: float = 1.0,
                 origin=(0.0, 0.0), plan: Optional[SplatPlan] = None) -> torch.Tensor:
    """Pre-convolution splat (C, w, h) of feature images (V, H, W, C)."""
    images_t = images if torch.is_tensor(images) else torch.as_tensor(np.asarray(images),
                                                                     dtype=torch.get_default_dtype())
    if plan is None:
        plan = splat_plan(images_t.detach().cpu().numpy(), cams, w, h, cell_size, origin)
    return plan.apply(images_t.reshape(-1, images_t.shape[-1]))


# ---------------------------------------------------------------- modules


class BevTokenizer(nn.Module):
    """Splat refinement (two 3x3 convs) followed by the downsampling block."""

    def __init__(self, c_in: int = 4, c: int = 16):
        super().__init__()
        self.c = c
        self.refine1 = nn.Conv2d(c_in, c, 3, padding=1)
        self.refine2 = nn.Conv2d(c, c, 3, padding=1)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)

    def lift(self, splat: torch.Tensor) -> torch.Tensor:
        """(B, c_in, w, h) splat -> BEV grid (B, c, w, h)."""
        return self.refine2(F.silu(self.refine1(splat)))

    def downsample(self, bev: torch.Tensor) -> torch.Tensor:
        """(B, c, w, h) -> (B, 4c, w/4, h/4)."""
        check_downsample_shape(bev.shape)
        return F.silu(self.down2(F.silu(self.down1(bev))))

    def forward(self, splat: torch.Tensor):
        bev = self.lift(splat)
        return bev, self.downsample(bev)


def check_downsample_shape(shape) -> None:
    if len(shape) != 4 or shape[2] % 4 or shape[3] % 4:
        raise ShapeError(f"BEV spatial size must be divisible by 4, got {tuple(shape)}")


def downsample_shape(w: int, h: int, c: int) -> Tuple[int, int, int]:
    """Shape law of the downsampling block."""
    if w % 4 or h % 4:
        raise ShapeError(f"BEV spatial size must be divisible by 4, got {w}x{h}")
    return w // 4, h // 4, 4 * c


class LanguageProjection(nn.Module):
    """Two-layer perceptron from BEV channels to the sequence width (shared by BEV tokens and queries)."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_out)
        self.fc2 = nn.Linear(d_out, d_out)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class OutProjection(nn.Module):
    """Two-layer perceptron from the sequence width back to BEV channels."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_in)
        self.fc2 = nn.Linear(d_in, d_out)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def flatten_bev(comp: torch.Tensor) -> torch.Tensor:
    """(B, C, X, Y) -> (B, X*Y, C), x-major."""
    B, C, X, Y = comp.shape
    return comp.permute(0, 2, 3, 1).reshape(B, X * Y, C)


def unflatten_bev(tokens: torch.Tensor, x: int, y: int) -> torch.Tensor:
    """(B, X*Y, C) -> (B, C, X, Y)."""
    B, L, C = tokens.shape
    if L != x * y:
        raise ShapeError(f"{L} tokens do not fill a {x}x{y} grid")
    return tokens.reshape(B, x, y, C).permute(0, 3, 1, 2)


def flatten_project(comp: torch.Tensor, proj) -> torch.Tensor:
    """Compressed BEV (B, 4c, w/4, h/4) -> token matrix (B, L_bev, C)."""
    return proj(flatten_bev(comp))
