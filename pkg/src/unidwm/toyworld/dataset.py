"""Frame samples and the binary dataset container.

File layout (little-endian)::

    b"HWM1"
    u64  manifest length, then UTF-8 JSON manifest
    per scene, in manifest order:
        f32[V*H*W*4]            multi-view feature images (frame 0)
        per frame f = 0..dt:    u32 N_f, f32[N_f*3] point cloud (ego frame of f)
        f32[(dt+1)*A*E]         per-ray depths, -1 for a miss
        f32[dt*3]               ego motions (dx, dy, dyaw) relative to frame 0
        f32[(dt+1)*3]           ego poses (x, y, yaw) in the world
        u32 len + UTF-8         prompt
        u32 len + UTF-8         answer
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .captions import caption
from .scene import SceneGraph, generate_scene
from .sensors import CameraSpec, LidarSpec, render_views, simulate_lidar

MAGIC = b"HWM1"
FORMAT_VERSION = 1
MISS_VALUE = -1.0
BLOCK_ORDER = ["images", "point_clouds", "ray_depths", "ego_motions", "ego_poses", "prompt", "answer"]


class DatasetFormatError(ValueError):
    pass


@dataclass
class FrameSample:
    seed: int
    images: np.ndarray  # (V, H, W, 4) float32
    point_clouds: List[np.ndarray]  # per frame (N_f, 3) float32, ego frame of that frame
    ray_depths: np.ndarray  # (F, A*E) float32, nan = miss
    ego_motions: np.ndarray  # (dt, 3) float32
    ego_poses: np.ndarray  # (F, 3) float32
    prompt: str
    answer: str

    @property
    def delta_t(self) -> int:
        return len(self.ego_motions)

    def equals(self, other: "FrameSample") -> bool:
        same = (self.seed == other.seed and self.prompt == other.prompt and self.answer == other.answer
                and len(self.point_clouds) == len(other.point_clouds))
        arrays = [(self.images, other.images), (self.ray_depths, other.ray_depths),
                  (self.ego_motions, other.ego_motions), (self.ego_poses, other.ego_poses)]
        arrays += list(zip(self.point_clouds, other.point_clouds))
        return same and all(a.shape == b.shape and np.array_equal(a, b, equal_nan=True) for a, b in arrays)


@dataclass
class Dataset:
    samples: List[FrameSample]
    world: dict
    seeds: List[int]

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def equals(self, other: "Dataset") -> bool:
        return (self.world == other.world and self.seeds == other.seeds and len(self) == len(other)
                and all(a.equals(b) for a, b in zip(self.samples, other.samples)))


def build_sample(seed: int, world, scene: Optional[SceneGraph] = None) -> FrameSample:
    scene = generate_scene(seed, world) if scene is None else scene
    lidar = LidarSpec.from_world(world)
    cams = CameraSpec.from_world(world)
    n_frames = world.delta_t + 1
    images = render_views(scene, 0, cams).astype(np.float32)
    clouds, depths = [], []
    for f in range(n_frames):
        sweep = simulate_lidar(scene, f, lidar)
        clouds.append(sweep.points.astype(np.float32))
        depths.append(sweep.depths.astype(np.float32))
    motions = np.array([scene.ego_motion(i) for i in range(1, n_frames)], dtype=np.float32).reshape(-1, 3)
    prompt, answer = caption(scene, 0)
    return FrameSample(int(seed), images, clouds, np.stack(depths), motions,
                       scene.ego_poses.astype(np.float32), prompt, answer)


def scene_seeds(seed: int, count: int) -> List[int]:
    """Per-scene seeds derived from a dataset seed."""
    if count == 0:
        return []
    states = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)
    return [int(s) for s in states]


def make_dataset(seeds: Sequence[int], world) -> Dataset:
    from dataclasses import asdict
    return Dataset([build_sample(s, world) for s in seeds], asdict(world), list(seeds))


def write_dataset(ds: Dataset, path) -> None:
    manifest = {
        "format_version": FORMAT_VERSION,
        "scene_count": len(ds),
        "seeds": list(ds.seeds),
        "world": ds.world,
        "block_order": BLOCK_ORDER,
        "miss_value": MISS_VALUE,
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    for s in ds.samples:
        buf.write(_f32(s.images))
        for cloud in s.point_clouds:
            buf.write(struct.pack("<I", len(cloud)))
            buf.write(_f32(cloud))
        buf.write(_f32(np.where(np.isnan(s.ray_depths), MISS_VALUE, s.ray_depths)))
        buf.write(_f32(s.ego_motions))
        buf.write(_f32(s.ego_poses))
        for text in (s.prompt, s.answer):
            b = text.encode("utf-8")
            buf.write(struct.pack("<I", len(b)))
            buf.write(b)
    Path(path).write_bytes(buf.getvalue())


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    (n,) = struct.unpack("<Q", r.take(8))
    try:
        manifest = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {manifest.get('format_version')!r}")
    world = manifest["world"]
    dt = int(world["delta_t"])
    n_views = 4
    img_shape = (n_views, int(world["camera_height"]), int(world["camera_width"]), 4)
    n_rays = int(world["lidar_azimuth_bins"]) * int(world["lidar_elevation_rows"])
    samples = []
    for seed in manifest["seeds"]:
        images = r.f32(int(np.prod(img_shape))).reshape(img_shape)
        clouds = []
        for _ in range(dt + 1):
            (count,) = struct.unpack("<I", r.take(4))
            clouds.append(r.f32(3 * count).reshape(count, 3))
        depths = r.f32((dt + 1) * n_rays).reshape(dt + 1, n_rays)
        depths = np.where(depths == MISS_VALUE, np.float32(np.nan), depths).astype(np.float32)
        motions = r.f32(dt * 3).reshape(dt, 3)
        poses = r.f32((dt + 1) * 3).reshape(dt + 1, 3)
        prompt, answer = r.text(), r.text()
        samples.append(FrameSample(int(seed), images, clouds, depths, motions, poses, prompt, answer))
    if r.pos != len(data):
        raise DatasetFormatError("trailing bytes after last scene block")
    if len(samples) != manifest["scene_count"]:
        raise DatasetFormatError("scene count disagrees with manifest")
    return Dataset(samples, world, list(manifest["seeds"]))


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError("truncated dataset file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def text(self) -> str:
        (n,) = struct.unpack("<I", self.take(4))
        return self.take(n).decode("utf-8")
