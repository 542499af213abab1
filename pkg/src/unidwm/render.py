"""BEV-to-point rendering through an SDF field and volume rendering.

Per ray with SDF samples ``s_1..s_n`` at depths ``d_1 < .. < d_n``::

    sigma(x)  = 1 / (1 + exp(-t x))
    alpha_i   = max((sigma(s_i) - sigma(s_{i+1})) / sigma(s_i), 0)     i = 1..n-1
    T_i       = prod_{j<i} (1 - alpha_j)
    w_i       = T_i alpha_i
    depth     = sum_i w_i d_i,  W = sum_i w_i

``alpha`` is evaluated as ``-expm1(logsigmoid(t s_{i+1}) - logsigmoid(t s_i))``,
the same quantity without the division.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics
from .bevtok import unflatten_bev
from .toyworld.sensors import LidarSpec


@dataclass(frozen=True)
class VolumeGeometry:
    """Metric placement of the w x h x z volume in the frame-t ego frame."""

    w: int = 32
    h: int = 32
    z: int = 8
    cell_size: float = 1.0
    z_min: float = -2.0
    z_max: float = 6.0

    @property
    def half_x(self) -> float:
        return self.w * self.cell_size / 2.0

    @property
    def half_y(self) -> float:
        return self.h * self.cell_size / 2.0

    @property
    def dz(self) -> float:
        return (self.z_max - self.z_min) / self.z

    def to_grid(self, p: torch.Tensor) -> torch.Tensor:
        """Metric points -> continuous node coordinates (node i at the centre of cell i)."""
        gx = (p[..., 0] + self.half_x) / self.cell_size - 0.5
        gy = (p[..., 1] + self.half_y) / self.cell_size - 0.5
        gz = (p[..., 2] - self.z_min) / self.dz - 0.5
        return torch.stack([gx, gy, gz], dim=-1)

    def from_grid(self, g: torch.Tensor) -> torch.Tensor:
        x = (g[..., 0] + 0.5) * self.cell_size - self.half_x
        y = (g[..., 1] + 0.5) * self.cell_size - self.half_y
        z = (g[..., 2] + 0.5) * self.dz + self.z_min
        return torch.stack([x, y, z], dim=-1)

    def normalize(self, p: torch.Tensor) -> torch.Tensor:
        """Metric points -> [-1, 1]^3 over the volume extent."""
        zc = 0.5 * (self.z_min + self.z_max)
        zh = 0.5 * (self.z_max - self.z_min)
        return torch.stack([p[..., 0] / self.half_x, p[..., 1] / self.half_y, (p[..., 2] - zc) / zh], dim=-1)


class VolumeDecoder(nn.Module):
    """Encoded BEV tokens (B, L, 4c) -> volumetric feature (B, w, h, z, c')."""

    def __init__(self, c: int = 16, z: int = 8, c_vol: int = 16, w: int = 32, h: int = 32):
        super().__init__()
        if c % z:
            raise ValueError(f"BEV channels {c} not divisible by height bins {z}")
        self.c, self.z, self.w, self.h = c, z, w, h
        self.up1 = nn.Conv2d(4 * c, 2 * c, 3, padding=1)
        self.up2 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.conv3d1 = nn.Conv3d(c // z, c_vol, 3, padding=1)
        self.conv3d2 = nn.Conv3d(c_vol, c_vol, 3, padding=1)

    def upsample(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, L, 4c) -> (B, c, w, h) via two nearest x2 steps, each followed by a conv."""
        x = unflatten_bev(tokens, self.w // 4, self.h // 4)
        x = F.silu(self.up1(F.interpolate(x, scale_factor=2, mode="nearest")))
        return F.silu(self.up2(F.interpolate(x, scale_factor=2, mode="nearest")))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.upsample(tokens)
        B, c, W, H = x.shape
        # channel k = zi * (c / z) + j  ->  (B, c/z, W, H, z)
        v = x.view(B, self.z, c // self.z, W, H).permute(0, 2, 3, 4, 1)
        v = self.conv3d2(F.silu(self.conv3d1(v)))
        return v.permute(0, 2, 3, 4, 1)  # channels last


class SdfField(nn.Module):
    """Shallow perceptron on (normalized position, trilinear feature) with a learnable sharpness."""

    def __init__(self, geometry: VolumeGeometry, c_vol: int = 16, hidden: int = 64, t_init: float = 10.0):
        super().__init__()
        self.geometry = geometry
        self.fc1 = nn.Linear(3 + c_vol, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 1)
        self.log_t = nn.Parameter(torch.tensor(math.log(t_init)))

    @property
    def t(self) -> torch.Tensor:
        return self.log_t.exp()

    def forward(self, points: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        x = torch.cat([self.geometry.normalize(points), feats], dim=-1)
        x = F.softplus(self.fc1(x), beta=10.0)
        x = F.softplus(self.fc2(x), beta=10.0)
        return self.fc3(x).squeeze(-1)


class AnalyticField(nn.Module):
    """Closed-form SDF of world points, for oracles; ignores the volume."""

    def __init__(self, fn: Callable[[torch.Tensor], torch.Tensor], t: float):
        super().__init__()
        self.fn = fn
        self.register_buffer("_t", torch.tensor(float(t)))

    @property
    def t(self):
        return self._t

    def forward(self, points, feats=None):
        return self.fn(points)


# ---------------------------------------------------------------- rays


@dataclass
class Rays:
    origins: torch.Tensor  # (R, 3) frame-t coordinates
    dirs: torch.Tensor  # (R, 3) unit
    depths: torch.Tensor  # (S,) sample depths, shared by all rays

    def __len__(self):
        return self.origins.shape[0]

    def points(self) -> torch.Tensor:
        return self.origins.unsqueeze(-2) + self.depths.view(-1, 1) * self.dirs.unsqueeze(-2)


def sample_depths(n: int, near: float, far: float, jitter: bool = False, generator=None) -> torch.Tensor:
    """Midpoints of ``n`` equal bins on [near, far]; optional uniform jitter inside each bin."""
    edges = torch.linspace(near, far, n + 1, dtype=torch.float64)
    width = (far - near) / n
    if jitter:
        u = torch.rand(n, generator=generator, dtype=torch.float64)
        d = edges[:-1] + u * width
    else:
        d = edges[:-1] + 0.5 * width
    return d.to(torch.get_default_dtype())


def pose_transform(ego_motion) -> np.ndarray:
    """(dx, dy, dyaw) -> (rotation 3x3, translation 3)."""
    dx, dy, dyaw = (float(v) for v in ego_motion)
    c, s = math.cos(dyaw), math.sin(dyaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.array([dx, dy, 0.0])


def build_rays(lidar: LidarSpec, ego_motion=None, n_samples: int = 64, near: float = 0.5, far: float = 24.0,
               jitter: bool = False, generator=None) -> Rays:
    """LiDAR rays of the frame whose pose relative to frame t is ``ego_motion``, in frame-t coordinates."""
    dirs = lidar.directions()
    origin = lidar.origin()
    if ego_motion is not None:
        rot, trans = pose_transform(ego_motion)
        dirs = dirs @ rot.T
        origin = rot @ origin + trans
    dtype = torch.get_default_dtype()
    origins = torch.as_tensor(np.broadcast_to(origin, dirs.shape).copy(), dtype=dtype)
    return Rays(origins, torch.as_tensor(dirs, dtype=dtype), sample_depths(n_samples, near, far, jitter, generator))


# ---------------------------------------------------------------- rendering


def sdf_weights(s: torch.Tensor, t) -> tuple:
    """(alpha, transmittance, weights), each (..., n-1), from SDF samples (..., n)."""
    ls = F.logsigmoid(t * s)
    alpha = (-torch.expm1(ls[..., 1:] - ls[..., :-1])).clamp(min=0.0)
    survive = torch.cumprod(1.0 - alpha, dim=-1)
    trans = torch.cat([torch.ones_like(survive[..., :1]), survive[..., :-1]], dim=-1)
    return alpha, trans, trans * alpha


def render_depth(field, vol: Optional[torch.Tensor], rays_origins: torch.Tensor, rays_dirs: torch.Tensor,
                 depths: torch.Tensor, geometry: Optional[VolumeGeometry] = None):
    """Rendered depth and weight sum per ray.

    vol: (B, w, h, z, c') channels-last or None for analytic fields;
    rays_origins/dirs: (B, R, 3); depths: (S,). Returns (depth (B, R), W (B, R)).
    """
    p = rays_origins.unsqueeze(-2) + depths.view(-1, 1) * rays_dirs.unsqueeze(-2)  # (B, R, S, 3)
    if vol is None:
        feats = None
    else:
        geometry = geometry or field.geometry
        feats = numerics.trilinear_sample(vol, geometry.to_grid(p).reshape(vol.shape[0], -1, 3))
        feats = feats.view(*p.shape[:-1], vol.shape[-1])
    s = field(p, feats)
    _, _, w = sdf_weights(s, field.t)
    depth = (w * depths[:-1]).sum(-1)
    return depth, w.sum(-1)


def depth_loss(pred: Sequence[Optional[torch.Tensor]], gt: Sequence[Optional[torch.Tensor]],
               masks: Sequence[Optional[torch.Tensor]], lambdas: Sequence[float]) -> torch.Tensor:
    """Frame-weighted mean L1 over rays with returns.

    ``pred[i]``, ``gt[i]``, ``masks[i]`` are (R,) or (B, R) for supervised
    frame i (None to skip). Batched inputs average the per-sample losses.
    A frame without returns contributes 0 and warns.
    """
    total = None
    for p, g, m, lam in zip(pred, gt, masks, lambdas):
        if p is None:
            continue
        p2, g2, m2 = (x if x.dim() == 2 else x.unsqueeze(0) for x in (p, g, m))
        m2 = m2.to(p2.dtype)
        n = m2.sum(-1)
        if bool((n == 0).any()):
            warnings.warn("depth_loss: frame without ray returns contributes 0", RuntimeWarning)
        err = ((p2 - torch.nan_to_num(g2)).abs() * m2).sum(-1) / n.clamp(min=1.0)
        term = lam * err.mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("depth_loss needs at least one supervised frame")
    return numerics.check_finite(total, "depth loss")


def frame_lambdas(frames: Sequence[int], base: float = 1.0, step: float = 0.5) -> List[float]:
    return [base + step * i for i in frames]


def rendered_points(origins: torch.Tensor, dirs: torch.Tensor, depth: torch.Tensor, weight: torch.Tensor,
                    surface_eps: float = 1e-4, renormalize: bool = False) -> np.ndarray:
    """Point cloud {o + d dir : W >= eps}; ``renormalize`` divides the depth by W first."""
    keep = weight >= surface_eps
    d = depth / weight.clamp(min=1e-12) if renormalize else depth
    pts = origins + d.unsqueeze(-1) * dirs
    return pts[keep].detach().cpu().numpy().astype(np.float64)
