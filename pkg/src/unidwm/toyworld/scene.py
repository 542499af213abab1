"""Procedural driving scenes with analytic signed-distance geometry."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

VEHICLE = "vehicle"
BUILDING = "building"
CLASSES = ("plane", VEHICLE, BUILDING)

EGO_CLEARANCE = 1.5  # m kept between the ego position and any box footprint
MAX_ATTEMPTS = 1000


class GenerationError(RuntimeError):
    pass


@dataclass
class Box:
    center: np.ndarray  # (3,) m, at frame 0
    half: np.ndarray  # (3,) half-extents, m
    yaw: float
    cls: str
    speed: float = 0.0  # m/s along heading
    yaw_rate: float = 0.0  # rad/s

    def pose(self, frame: float):
        x, y, yaw = unicycle(self.center[0], self.center[1], self.yaw, self.speed, self.yaw_rate, frame)
        return np.array([x, y, self.center[2]]), yaw


@dataclass
class SceneGraph:
    boxes: List[Box] = field(default_factory=list)
    ego_poses: np.ndarray = field(default_factory=lambda: np.zeros((4, 3)))  # (frames, [x, y, yaw])
    ground: bool = True
    seed: Optional[int] = None

    @property
    def n_frames(self) -> int:
        return len(self.ego_poses)

    def ego_motion(self, frame: int) -> np.ndarray:
        """(dx, dy, dyaw) of the ego pose at ``frame`` expressed in the frame-0 ego frame."""
        x0, y0, yaw0 = self.ego_poses[0]
        x, y, yaw = self.ego_poses[frame]
        c, s = np.cos(yaw0), np.sin(yaw0)
        dx, dy = x - x0, y - y0
        return np.array([c * dx + s * dy, -s * dx + c * dy, wrap_angle(yaw - yaw0)])

    def ego_speed(self) -> float:
        if self.n_frames < 2:
            return 0.0
        return float(np.hypot(*(self.ego_poses[1, :2] - self.ego_poses[0, :2])))


def wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def unicycle(x, y, yaw, speed, yaw_rate, t):
    """Closed-form constant speed / constant turn-rate motion."""
    if abs(yaw_rate) < 1e-9:
        return x + speed * t * np.cos(yaw), y + speed * t * np.sin(yaw), yaw
    r = speed / yaw_rate
    yaw_t = yaw + yaw_rate * t
    return x + r * (np.sin(yaw_t) - np.sin(yaw)), y - r * (np.cos(yaw_t) - np.cos(yaw)), yaw_t


def world_to_local(p: np.ndarray, center: np.ndarray, yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    d = p - center
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], axis=-1)


def box_sdf(p: np.ndarray, center, half, yaw: float = 0.0) -> np.ndarray:
    q = np.abs(world_to_local(np.asarray(p, dtype=np.float64), np.asarray(center, dtype=np.float64), yaw))
    d = q - np.asarray(half, dtype=np.float64)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(d.max(axis=-1), 0.0)
    return outside + inside


def frame_boxes(scene: SceneGraph, frame: float = 0):
    """Stacked box geometry at ``frame``: centers (K,3), halves (K,3), yaws (K,), class indices (K,)."""
    if not scene.boxes:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64)
    poses = [b.pose(frame) for b in scene.boxes]
    centers = np.array([c for c, _ in poses])
    yaws = np.array([y for _, y in poses])
    halves = np.array([b.half for b in scene.boxes])
    labels = np.array([CLASSES.index(b.cls) for b in scene.boxes])
    return centers, halves, yaws, labels


def _all_box_sdf(p: np.ndarray, geom) -> np.ndarray:
    """(K, ...) signed distances of points p (..., 3) to every box."""
    centers, halves, yaws = geom[:3]
    extra = (1,) * (p.ndim - 1)
    c = np.cos(yaws).reshape(-1, *extra)
    s = np.sin(yaws).reshape(-1, *extra)
    dx = p[..., 0] - centers[:, 0].reshape(-1, *extra)
    dy = p[..., 1] - centers[:, 1].reshape(-1, *extra)
    dz = p[..., 2] - centers[:, 2].reshape(-1, *extra)
    qx = np.abs(c * dx + s * dy) - halves[:, 0].reshape(-1, *extra)
    qy = np.abs(-s * dx + c * dy) - halves[:, 1].reshape(-1, *extra)
    qz = np.abs(dz) - halves[:, 2].reshape(-1, *extra)
    outside = np.sqrt(np.maximum(qx, 0.0) ** 2 + np.maximum(qy, 0.0) ** 2 + np.maximum(qz, 0.0) ** 2)
    inside = np.minimum(np.maximum(np.maximum(qx, qy), qz), 0.0)
    return outside + inside


def sdf_with_geometry(p: np.ndarray, geom, ground: bool = True) -> np.ndarray:
    best = p[..., 2].copy() if ground else np.full(p.shape[:-1], np.inf)
    if len(geom[0]):
        best = np.minimum(best, _all_box_sdf(p, geom).min(axis=0))
    return best


def scene_sdf(scene: SceneGraph, p, frame: float = 0) -> np.ndarray:
    """Signed distance (m) of world points ``p`` (..., 3) at ``frame``."""
    p = np.asarray(p, dtype=np.float64)
    return sdf_with_geometry(p, frame_boxes(scene, frame), scene.ground)


def scene_class(scene: SceneGraph, p, frame: float = 0) -> np.ndarray:
    """Index into CLASSES of the closest surface to each point."""
    p = np.asarray(p, dtype=np.float64)
    geom = frame_boxes(scene, frame)
    best = p[..., 2].copy() if scene.ground else np.full(p.shape[:-1], np.inf)
    label = np.zeros(p.shape[:-1], dtype=np.int64)
    if len(geom[0]):
        d = _all_box_sdf(p, geom)
        k = d.argmin(axis=0)
        dmin = np.take_along_axis(d, k[None], axis=0)[0]
        closer = dmin < best
        label = np.where(closer, geom[3][k], label)
    return label


def _footprint_distance(x, y, box: Box, frame: float) -> float:
    center, yaw = box.pose(frame)
    q = world_to_local(np.array([x, y, center[2]]), center, yaw)
    d = np.abs(q[:2]) - box.half[:2]
    return float(np.linalg.norm(np.maximum(d, 0.0)) + min(d.max(), 0.0))


def _footprints_overlap(a: Box, b: Box) -> bool:
    # conservative: bounding circles of the footprints
    ra = float(np.hypot(*a.half[:2]))
    rb = float(np.hypot(*b.half[:2]))
    return float(np.hypot(*(a.center[:2] - b.center[:2]))) < ra + rb + 0.5


def validate_scene(scene: SceneGraph) -> List[str]:
    """Invariant violations, empty when the scene is sound."""
    problems = []
    for k, box in enumerate(scene.boxes):
        if box.cls == BUILDING and (box.speed != 0.0 or box.yaw_rate != 0.0):
            problems.append(f"building {k} moves")
        if box.cls == VEHICLE and box.speed == 0.0:
            problems.append(f"vehicle {k} is static")
        for f, (x, y, _) in enumerate(scene.ego_poses):
            if _footprint_distance(x, y, box, f) < EGO_CLEARANCE:
                problems.append(f"box {k} intersects ego at frame {f}")
    return problems


def generate_scene(seed: int, world) -> SceneGraph:
    """Deterministic scene for ``seed`` under a WorldConfig-like ``world``."""
    rng = np.random.default_rng(seed)
    n_frames = world.delta_t + 1
    ext = world.extent

    if rng.random() < world.p_ego_stopped:
        ego_speed, ego_rate = 0.0, 0.0
    else:
        ego_speed = rng.uniform(world.ego_speed_min, world.ego_speed_max)
        ego_rate = rng.uniform(-world.ego_yaw_rate_max, world.ego_yaw_rate_max)
    ego = np.array([unicycle(0.0, 0.0, 0.0, ego_speed, ego_rate, f) for f in range(n_frames)])

    n_b = int(rng.integers(world.n_buildings_min, world.n_buildings_max + 1))
    n_v = int(rng.integers(world.n_vehicles_min, world.n_vehicles_max + 1))
    scene = SceneGraph(boxes=[], ego_poses=ego, seed=seed)

    attempts = 0
    for cls in [BUILDING] * n_b + [VEHICLE] * n_v:
        while True:
            attempts += 1
            if attempts > MAX_ATTEMPTS:
                raise GenerationError(f"seed {seed}: rejection sampling exceeded {MAX_ATTEMPTS} attempts")
            box = _sample_box(rng, cls, world, ext)
            if any(_footprints_overlap(box, other) for other in scene.boxes):
                continue
            if any(_footprint_distance(x, y, box, f) < EGO_CLEARANCE for f, (x, y, _) in enumerate(ego)):
                continue
            scene.boxes.append(box)
            break
    return scene


def _sample_box(rng, cls, world, ext) -> Box:
    if cls == BUILDING:
        half = np.array([rng.uniform(2.0, 5.0), rng.uniform(1.5, 3.0), rng.uniform(1.5, 2.8)])
        side = rng.choice([-1.0, 1.0])
        y = side * rng.uniform(7.0, ext - 2.0)
        x = rng.uniform(-ext + 2.0, ext - 2.0)
        return Box(np.array([x, y, half[2]]), half, float(rng.uniform(-0.2, 0.2)), BUILDING)
    half = np.array([2.2, 0.9, 0.75])
    x = rng.uniform(-ext + 3.0, ext - 3.0)
    y = rng.uniform(-5.0, 5.0)
    yaw = float(rng.choice([0.0, np.pi]) + rng.uniform(-0.15, 0.15))
    speed = float(rng.uniform(world.vehicle_speed_min, world.vehicle_speed_max))
    rate = float(rng.uniform(-world.vehicle_yaw_rate_max, world.vehicle_yaw_rate_max))
    return Box(np.array([x, y, half[2]]), half, yaw, VEHICLE, speed, rate)
