"""Run configuration: one JSON document with six sections.

Every section is a dataclass; unknown keys are rejected and the fully
materialized config (defaults included) is what gets written next to
outputs.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    extent: float = 16.0
    delta_t: int = 3
    n_vehicles_min: int = 1
    n_vehicles_max: int = 4
    n_buildings_min: int = 2
    n_buildings_max: int = 4
    ego_speed_min: float = 2.0
    ego_speed_max: float = 4.0
    p_ego_stopped: float = 0.15
    ego_yaw_rate_max: float = 0.1
    vehicle_speed_min: float = 2.0
    vehicle_speed_max: float = 6.0
    vehicle_yaw_rate_max: float = 0.1
    lidar_azimuth_bins: int = 32
    lidar_elevation_rows: int = 8
    lidar_elevation_min_deg: float = -15.0
    lidar_elevation_max_deg: float = 5.0
    lidar_max_range: float = 24.0
    lidar_mount_height: float = 1.8
    camera_width: int = 64
    camera_height: int = 32
    camera_mount_height: float = 1.5
    camera_max_range: float = 100.0


@dataclass
class BevConfig:
    w: int = 32
    h: int = 32
    c: int = 16
    cell_size: float = 1.0


@dataclass
class ModelConfig:
    width: int = 96
    layers: int = 4
    heads: int = 4
    max_seq_len: int = 256
    n_world_queries: int = 4
    pool_mode: str = "max"
    separated_mode: bool = False
    link_blocks: int = 3
    link_heads: int = 4
    zero_init_link: bool = True


@dataclass
class RenderConfig:
    z: int = 8
    c_vol: int = 16
    z_min: float = -2.0
    z_max: float = 6.0
    samples_train: int = 64
    samples_eval: int = 128
    near: float = 0.5
    far: float = 24.0
    surface_eps: float = 1e-4
    renormalize_depth: bool = False
    jitter: bool = False
    sdf_hidden: int = 64
    t_init: float = 10.0


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 4
    steps_phase_a: int = 1000
    steps_joint: int = 5000
    cosine: bool = True
    ntp_weight: float = 1.0
    depth_weight: float = 10.0
    lambda_base: float = 1.0
    lambda_step: float = 0.5
    supervised_frames: list = field(default_factory=lambda: [0, 1, 2, 3])
    include_misses: bool = False
    rays_per_frame: int = 0
    precision: str = "float32"
    threads: int = 1
    ckpt_every: int = 500
    log_every: int = 10


@dataclass
class EvalConfig:
    bounds: str = "desk"
    x_min: float = -16.0
    x_max: float = 16.0
    y_min: float = -16.0
    y_max: float = 16.0
    z_min: float = -2.0
    z_max: float = 6.0
    chamfer_squared: bool = False
    max_decode_tokens: int = 64


PAPER_BOUNDS = dict(x_min=-51.2, x_max=51.2, y_min=-51.2, y_max=51.2, z_min=-3.0, z_max=5.0)

_SECTIONS = {
    "world": WorldConfig,
    "bev": BevConfig,
    "model": ModelConfig,
    "render": RenderConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    bev: BevConfig = field(default_factory=BevConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, klass in _SECTIONS.items():
            parts[name] = _section(klass, doc.get(name, {}), name)
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def override(self, dotted: dict) -> "RunConfig":
        """Return a copy with ``{"section.key": value}`` overrides applied."""
        doc = self.to_dict()
        for key, value in dotted.items():
            if "." not in key:
                raise ConfigError(f"override key {key!r} must look like section.key")
            section, name = key.split(".", 1)
            if section not in doc or name not in doc[section]:
                raise ConfigError(f"unknown config key {key!r}")
            doc[section][name] = value
        return RunConfig.from_dict(doc)

    def validate(self) -> None:
        w, b, m, r, t, e = self.world, self.bev, self.model, self.render, self.train, self.eval
        _require(w.delta_t >= 1, "world.delta_t must be >= 1")
        _require(w.extent > 0, "world.extent must be positive")
        _require(0 <= w.n_vehicles_min <= w.n_vehicles_max, "vehicle count range invalid")
        _require(0 <= w.n_buildings_min <= w.n_buildings_max, "building count range invalid")
        _require(0.0 <= w.p_ego_stopped <= 1.0, "world.p_ego_stopped must be a probability")
        _require(w.lidar_azimuth_bins > 0 and w.lidar_elevation_rows > 0, "lidar resolution must be positive")
        _require(b.w % 4 == 0 and b.h % 4 == 0, "bev.w and bev.h must be divisible by 4")
        _require(b.c > 0 and b.cell_size > 0, "bev.c and bev.cell_size must be positive")
        _require(m.width % m.heads == 0, "model.width must be divisible by model.heads")
        _require((4 * b.c) % m.link_heads == 0, "4*bev.c must be divisible by model.link_heads")
        _require(m.pool_mode in ("max", "avg", "attention"), "model.pool_mode must be max, avg or attention")
        _require(m.n_world_queries >= 1, "model.n_world_queries must be >= 1")
        n_cells = (b.w // 4) * (b.h // 4)
        _require(n_cells % m.n_world_queries == 0, "n_world_queries must divide the compressed cell count")
        _require(b.c % r.z == 0, "bev.c must be divisible by render.z")
        _require(r.samples_train >= 2 and r.samples_eval >= 2, "render needs at least 2 samples")
        _require(0 <= r.near < r.far, "render.near must be below render.far")
        _require(r.z_min < r.z_max, "render.z_min must be below render.z_max")
        _require(r.t_init > 0, "render.t_init must be positive")
        _require(t.lr > 0 and t.eps > 0, "learning rate and eps must be positive")
        _require(0 < t.beta1 < 1 and 0 < t.beta2 < 1, "betas must lie in (0, 1)")
        _require(t.weight_decay >= 0, "weight decay must be non-negative")
        _require(t.batch_size >= 1, "batch size must be >= 1")
        _require(t.steps_phase_a >= 0 and t.steps_joint >= 0, "step counts must be non-negative")
        _require(t.precision in ("float32", "float64"), "train.precision must be float32 or float64")
        _require(isinstance(t.seed, int), "train.seed must be an integer")
        _require(isinstance(t.supervised_frames, list) and len(t.supervised_frames) > 0,
                 "train.supervised_frames must be a non-empty list")
        _require(all(isinstance(i, int) and 0 <= i <= w.delta_t for i in t.supervised_frames),
                 "train.supervised_frames must be frame indices in [0, delta_t]")
        _require(len(set(t.supervised_frames)) == len(t.supervised_frames), "duplicate supervised frames")
        _require(t.rays_per_frame >= 0, "train.rays_per_frame must be >= 0")
        _require(e.bounds in ("desk", "paper", "custom"), "eval.bounds must be desk, paper or custom")
        _require(e.x_min <= e.x_max and e.y_min <= e.y_max and e.z_min <= e.z_max, "eval bounds inverted")
        _require(e.max_decode_tokens >= 1, "eval.max_decode_tokens must be >= 1")

    def range_bounds(self) -> dict:
        if self.eval.bounds == "paper":
            return dict(PAPER_BOUNDS)
        e = self.eval
        return dict(x_min=e.x_min, x_max=e.x_max, y_min=e.y_min, y_max=e.y_max, z_min=e.z_min, z_max=e.z_max)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _section(klass, values: Any, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(klass)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    defaults = klass()
    out = {}
    for key, f in known.items():
        if key not in values:
            continue
        value = values[key]
        ref = getattr(defaults, key)
        if isinstance(ref, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name}.{key} must be a boolean")
        elif isinstance(ref, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}.{key} must be an integer")
        elif isinstance(ref, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number")
            value = float(value)
        elif isinstance(ref, str):
            if not isinstance(value, str):
                raise ConfigError(f"{name}.{key} must be a string")
        elif isinstance(ref, list):
            if not isinstance(value, list):
                raise ConfigError(f"{name}.{key} must be a list")
            value = list(value)
        out[key] = value
    return klass(**out)
