"""Simulated LiDAR and multi-view feature cameras via sphere tracing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CLASSES, SceneGraph, frame_boxes, scene_class, sdf_with_geometry

HIT_EPS = 1e-4
MAX_STEPS = 4000

VIEW_NAMES = ("front", "left", "right", "rear")
VIEW_YAWS = (0.0, np.pi / 2, -np.pi / 2, np.pi)


@dataclass(frozen=True)
class LidarSpec:
    azimuth_bins: int = 32
    elevation_rows: int = 8
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 5.0
    max_range: float = 24.0
    mount_height: float = 1.8

    @classmethod
    def from_world(cls, world) -> "LidarSpec":
        return cls(world.lidar_azimuth_bins, world.lidar_elevation_rows, world.lidar_elevation_min_deg,
                   world.lidar_elevation_max_deg, world.lidar_max_range, world.lidar_mount_height)

    @property
    def n_rays(self) -> int:
        return self.azimuth_bins * self.elevation_rows

    def azimuths(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.azimuth_bins) / self.azimuth_bins

    def elevations(self) -> np.ndarray:
        return np.deg2rad(np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.elevation_rows))

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor/ego frame, azimuth-major, (A*E, 3)."""
        az, el = np.meshgrid(self.azimuths(), self.elevations(), indexing="ij")
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
        return d.reshape(-1, 3)

    def origin(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.mount_height])


@dataclass(frozen=True)
class CameraSpec:
    width: int = 64
    height: int = 32
    mount_height: float = 1.5
    max_range: float = 100.0

    @classmethod
    def from_world(cls, world) -> "CameraSpec":
        return cls(world.camera_width, world.camera_height, world.camera_mount_height, world.camera_max_range)

    @property
    def n_views(self) -> int:
        return len(VIEW_YAWS)

    @property
    def focal(self) -> float:
        # 90 degree horizontal field of view, square pixels
        return self.width / 2.0

    @property
    def principal_point(self):
        return self.width / 2.0, self.height / 2.0

    def pixel_directions(self) -> np.ndarray:
        """Unit directions in the ego frame, (V, H, W, 3)."""
        cx, cy = self.principal_point
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)  # (H, W)
        cam = np.stack([np.ones_like(uu), -(uu - cx) / self.focal, -(vv - cy) / self.focal], axis=-1)
        cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
        out = []
        for yaw in VIEW_YAWS:
            c, s = np.cos(yaw), np.sin(yaw)
            out.append(np.stack([c * cam[..., 0] - s * cam[..., 1], s * cam[..., 0] + c * cam[..., 1], cam[..., 2]],
                                axis=-1))
        return np.stack(out)

    def origin(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.mount_height])


def ego_to_world(points: np.ndarray, pose) -> np.ndarray:
    x, y, yaw = pose
    c, s = np.cos(yaw), np.sin(yaw)
    p = np.asarray(points, dtype=np.float64)
    return np.stack([c * p[..., 0] - s * p[..., 1] + x, s * p[..., 0] + c * p[..., 1] + y, p[..., 2]], axis=-1)


def world_to_ego(points: np.ndarray, pose) -> np.ndarray:
    x, y, yaw = pose
    c, s = np.cos(yaw), np.sin(yaw)
    p = np.asarray(points, dtype=np.float64)
    dx, dy = p[..., 0] - x, p[..., 1] - y
    return np.stack([c * dx + s * dy, -s * dx + c * dy, p[..., 2]], axis=-1)


def rotate_dirs(dirs: np.ndarray, yaw: float) -> np.ndarray:
    return ego_to_world(dirs, (0.0, 0.0, yaw))


def raycast(scene: SceneGraph, origins, dirs, frame: float = 0, max_range: float = 24.0) -> np.ndarray:
    """Sphere-traced hit depth per ray; ``nan`` marks a miss.

    Marches ``depth += sdf`` until ``|sdf| < 1e-4`` (hit) or the depth passes
    ``max_range`` (miss). Rays are independent and results land in their
    own slot, so the order of evaluation does not matter.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs)).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(dirs)
    depth = np.zeros(n)
    out = np.full(n, np.nan)
    active = np.arange(n)
    geom = frame_boxes(scene, frame)
    for _ in range(MAX_STEPS):
        if active.size == 0:
            break
        p = origins[active] + depth[active, None] * dirs[active]
        s = sdf_with_geometry(p, geom, scene.ground)
        hit = np.abs(s) < HIT_EPS
        out[active[hit]] = depth[active[hit]]
        depth[active] += s
        gone = depth[active] > max_range
        active = active[~(hit | gone)]
    return out


@dataclass
class LidarSweep:
    depths: np.ndarray  # (A*E,) hit depth, nan for a miss
    dirs: np.ndarray  # (A*E, 3) ego-frame unit directions
    origin: np.ndarray  # (3,) sensor position in the ego frame

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.depths)

    @property
    def points(self) -> np.ndarray:
        """Returns in the ego frame of this sweep, (N, 3)."""
        h = self.hit
        return self.origin + self.depths[h, None] * self.dirs[h]

    def depths_or_max(self, max_range: float) -> np.ndarray:
        return np.where(self.hit, self.depths, max_range)


def simulate_lidar(scene: SceneGraph, frame: int, lidar: LidarSpec, pose=None) -> LidarSweep:
    pose = scene.ego_poses[frame] if pose is None else pose
    dirs = lidar.directions()
    origin_w = ego_to_world(lidar.origin(), pose)
    depths = raycast(scene, origin_w, rotate_dirs(dirs, pose[2]), frame, lidar.max_range)
    return LidarSweep(depths, dirs, lidar.origin())


def render_views(scene: SceneGraph, frame: int, cams: CameraSpec, pose=None) -> np.ndarray:
    """Feature images (V, H, W, 4): one-hot plane/vehicle/building + inverse depth.

    Pixels whose ray misses within the camera range are all zero.
    """
    pose = scene.ego_poses[frame] if pose is None else pose
    dirs = cams.pixel_directions()
    shape = dirs.shape[:-1]
    dirs_w = rotate_dirs(dirs.reshape(-1, 3), pose[2])
    origin_w = ego_to_world(cams.origin(), pose)
    depth = raycast(scene, origin_w, dirs_w, frame, cams.max_range)
    hit = np.isfinite(depth)
    img = np.zeros((dirs_w.shape[0], len(CLASSES) + 1))
    if hit.any():
        p = origin_w + depth[hit, None] * dirs_w[hit]
        labels = scene_class(scene, p, frame)
        img[np.flatnonzero(hit), labels] = 1.0
        img[hit, -1] = 1.0 / np.maximum(depth[hit], 1e-6)
    return img.reshape(*shape, len(CLASSES) + 1)
