"""Losses, optimization, the two training phases, and checkpoint files.

Checkpoint layout (little-endian)::

    b"HWCK"
    u32  format version
    u64  manifest length, then UTF-8 JSON manifest (sorted keys)
    u64  payload length in bytes
    payload: model tensors in registry order, then optimizer moments in
             optimizer-registry order, each as raw f4 (or f8 in 64-bit runs)
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import numerics
from . import render as rnd
from .config import RunConfig
from .model import Prepared, WorldModel
from .seqmodel import Vocabulary

MAGIC = b"HWCK"
FORMAT_VERSION = 1
METRIC_COLUMNS = ("phase", "step", "L_N", "L_D", "L", "lr")
PHASE_A_GROUPS = ("tokenizer", "render")


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class RegistryError(CheckpointError):
    pass


# ---------------------------------------------------------------- losses


def total_loss(ntp: torch.Tensor, depth: torch.Tensor, ntp_weight: float = 1.0,
               depth_weight: float = 10.0) -> torch.Tensor:
    return ntp_weight * ntp + depth_weight * depth


def _no_decay(name: str, p: torch.Tensor) -> bool:
    return p.dim() < 2 or name.endswith(("tok.weight", "pos.weight")) or "frame_embedding" in name


def make_optimizer(model: WorldModel, cfg: RunConfig, groups: Optional[Sequence[str]] = None):
    """AdamW over the chosen parameter groups; decay on weight matrices only."""
    t = cfg.train
    decay, plain = [], []
    for name, p in model.named_parameters():
        if groups is not None and model.group_of(name) not in groups:
            continue
        (plain if _no_decay(name, p) else decay).append(p)
    return torch.optim.AdamW([{"params": decay, "weight_decay": t.weight_decay},
                              {"params": plain, "weight_decay": 0.0}],
                             lr=t.lr, betas=(t.beta1, t.beta2), eps=t.eps, foreach=False)


def learning_rate(step: int, total: int, base: float, cosine: bool = True) -> float:
    if not cosine or total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
        for p in group["params"]:
            if p.grad is not None and p.grad.shape != p.shape:
                raise numerics.DimensionError(f"gradient shape {tuple(p.grad.shape)} != parameter {tuple(p.shape)}")
    optimizer.step()


# ---------------------------------------------------------------- batching


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> List[int]:
    """Indices of batch ``step`` in a stream of per-epoch permutations drawn from rng([seed, epoch])."""
    if n == 0:
        raise ValueError("cannot draw batches from an empty dataset")
    out = []
    for k in range(step * batch_size, (step + 1) * batch_size):
        epoch, pos = divmod(k, n)
        out.append(int(np.random.default_rng([seed, epoch]).permutation(n)[pos]))
    return out


@dataclass
class Batch:
    splat: torch.Tensor
    ego: torch.Tensor
    origins: torch.Tensor  # (B, F, R, 3)
    dirs: torch.Tensor
    depths: torch.Tensor  # (B, F, R)
    prompts: List[str]
    answers: List[str]


def collate(items: Sequence[Prepared]) -> Batch:
    return Batch(torch.stack([p.splat for p in items]), torch.stack([p.ego for p in items]),
                 torch.stack([p.ray_origins for p in items]), torch.stack([p.ray_dirs for p in items]),
                 torch.stack([p.ray_depths for p in items]), [p.prompt for p in items],
                 [p.answer for p in items])


def ray_subset(n_rays: int, k: int, seed: int, step: int) -> Optional[torch.Tensor]:
    if k <= 0 or k >= n_rays:
        return None
    idx = np.sort(np.random.default_rng([seed, step, 1]).choice(n_rays, size=k, replace=False))
    return torch.as_tensor(idx)


def frame_depth_loss(model: WorldModel, frame_bevs: List[torch.Tensor], batch: Batch, frames: Sequence[int],
                     cfg: RunConfig, step: int = 0) -> torch.Tensor:
    """Frame-weighted L1 on the supervised frames (frame_bevs indexed by frame)."""
    r, t = cfg.render, cfg.train
    depths = rnd.sample_depths(r.samples_train, r.near, r.far, r.jitter,
                               torch.Generator().manual_seed(t.seed * 1_000_003 + step) if r.jitter else None)
    sub = ray_subset(batch.depths.shape[-1], t.rays_per_frame, t.seed, step)
    preds, gts, masks = [], [], []
    for f in frames:
        o, d, g = batch.origins[:, f], batch.dirs[:, f], batch.depths[:, f]
        if sub is not None:
            o, d, g = o[:, sub], d[:, sub], g[:, sub]
        pred, _ = model.render_frame(frame_bevs[f], o, d, depths)
        hit = torch.isfinite(g)
        if t.include_misses:
            g = torch.where(hit, g, torch.full_like(g, cfg.world.lidar_max_range))
            hit = torch.ones_like(hit)
        preds.append(pred)
        gts.append(g)
        masks.append(hit)
    lambdas = rnd.frame_lambdas(frames, t.lambda_base, t.lambda_step)
    return rnd.depth_loss(preds, gts, masks, lambdas)


# ---------------------------------------------------------------- training state


@dataclass
class TrainState:
    model: WorldModel
    optimizer: torch.optim.Optimizer
    phase: str  # "a" or "joint"
    step: int = 0
    metrics: List[list] = field(default_factory=list)
    train_seeds: List[int] = field(default_factory=list)


def build_model(cfg: RunConfig, vocab: Optional[Vocabulary] = None) -> WorldModel:
    numerics.set_precision(cfg.train.precision)
    numerics.make_deterministic(cfg.train.threads)
    torch.manual_seed(cfg.train.seed)
    return WorldModel(cfg, vocab)


def new_state(model: WorldModel, phase: str, train_seeds=(), metrics=None) -> TrainState:
    groups = PHASE_A_GROUPS if phase == "a" else None
    return TrainState(model, make_optimizer(model, model.cfg, groups), phase, 0, list(metrics or []),
                      list(train_seeds))


def phase_steps(cfg: RunConfig, phase: str) -> int:
    return cfg.train.steps_phase_a if phase == "a" else cfg.train.steps_joint


def train_step(state: TrainState, data: Sequence[Prepared]) -> dict:
    model, cfg = state.model, state.model.cfg
    t = cfg.train
    total = phase_steps(cfg, state.phase)
    lr = learning_rate(state.step, total, t.lr, t.cosine)
    batch = collate([data[i] for i in batch_indices(len(data), t.batch_size, t.seed, state.step)])
    state.optimizer.zero_grad(set_to_none=True)
    if state.phase == "a":
        _, raw = model.encode_bev(batch.splat)
        frame_bevs = [raw]
        ln = torch.zeros((), dtype=raw.dtype)
        ld = frame_depth_loss(model, frame_bevs, batch, [0], cfg, state.step)
    else:
        out = model(batch.splat, batch.ego, batch.prompts, batch.answers)
        ln = out.ntp
        ld = frame_depth_loss(model, out.frame_bevs, batch, t.supervised_frames, cfg, state.step)
    loss = total_loss(ln, ld, t.ntp_weight, t.depth_weight)
    numerics.backward(loss)
    optimizer_step(state.optimizer, lr)
    row = [state.phase, state.step, ln.item(), ld.item(), loss.item(), lr]
    state.metrics.append(row)
    state.step += 1
    return dict(zip(METRIC_COLUMNS, row))


def run_phase(state: TrainState, data: Sequence[Prepared], steps: Optional[int] = None,
              on_step: Optional[Callable[[TrainState, dict], None]] = None,
              stop_at: Optional[int] = None) -> TrainState:
    """Advance ``state`` to ``steps`` (default: the configured phase length), or ``stop_at`` if earlier."""
    end = phase_steps(state.model.cfg, state.phase) if steps is None else steps
    if stop_at is not None:
        end = min(end, stop_at)
    while state.step < end:
        row = train_step(state, data)
        if on_step is not None:
            on_step(state, row)
    return state


def train_phase_a(model: WorldModel, data: Sequence[Prepared], steps: Optional[int] = None,
                  on_step=None, train_seeds=()) -> TrainState:
    state = new_state(model, "a", train_seeds)
    return run_phase(state, data, steps, on_step)


def train_joint(model: WorldModel, data: Sequence[Prepared], steps: Optional[int] = None,
                on_step=None, train_seeds=(), metrics=None) -> TrainState:
    state = new_state(model, "joint", train_seeds, metrics)
    return run_phase(state, data, steps, on_step)


# ---------------------------------------------------------------- metrics files


def write_metrics_csv(rows: Sequence[list], path) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for phase, step, ln, ld, loss, lr in rows:
        lines.append(f"{phase},{step},{ln!r},{ld!r},{loss!r},{lr!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path) -> List[list]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        phase, step, *vals = line.split(",")
        rows.append([phase, int(step)] + [float(v) for v in vals])
    return rows


# ---------------------------------------------------------------- checkpoints


def _dtype_code(dtype: torch.dtype) -> str:
    return {torch.float32: "<f4", torch.float64: "<f8"}[dtype]


def _optimizer_registry(state: TrainState):
    """(manifest entries, tensors) for the AdamW moments, in parameter order."""
    names = {id(p): n for n, p in state.model.named_parameters()}
    entries, tensors = [], []
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            entries.append({"name": name, "step": float(st["step"])})
            tensors.extend([st["exp_avg"], st["exp_avg_sq"]])
    return entries, tensors


def checkpoint_bytes(state: TrainState) -> bytes:
    model = state.model
    sd = model.state_dict()
    dtype = torch.get_default_dtype()
    code = _dtype_code(dtype)
    registry = [{"name": k, "shape": list(v.shape)} for k, v in sd.items()]
    opt_entries, opt_tensors = _optimizer_registry(state)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": code,
        "config": model.cfg.to_dict(),
        "vocab": model.vocab.itos,
        "registry": registry,
        "optimizer": opt_entries,
        "phase": state.phase,
        "step": state.step,
        "train_seeds": list(state.train_seeds),
        "metrics": state.metrics,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.detach().cpu().numpy(), dtype=code).tobytes()
                       for t in list(sd.values()) + opt_tensors)
    return (MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(head)) + head
            + struct.pack("<Q", len(payload)) + payload)


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


@dataclass
class Checkpoint:
    manifest: dict
    tensors: Dict[str, np.ndarray]
    optimizer: List[tuple]  # (name, step, exp_avg, exp_avg_sq)

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_dict(self.manifest["config"])

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.from_list(self.manifest["vocab"])


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(data)


def parse_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if len(data) < 16:
        raise CheckpointFormatError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    (n_head,) = struct.unpack_from("<Q", data, 8)
    if len(data) < 16 + n_head + 8:
        raise CheckpointFormatError("truncated checkpoint manifest")
    try:
        manifest = json.loads(data[16:16 + n_head].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError("manifest version mismatch")
    (n_payload,) = struct.unpack_from("<Q", data, 16 + n_head)
    start = 16 + n_head + 8
    if len(data) - start < n_payload:
        raise CheckpointFormatError("truncated checkpoint payload")
    if len(data) - start > n_payload:
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    dtype = np.dtype(manifest["dtype"])
    sizes = [int(np.prod(e["shape"])) for e in manifest["registry"]]
    shapes_by_name = {e["name"]: e["shape"] for e in manifest["registry"]}
    opt = manifest["optimizer"]
    opt_sizes = []
    for e in opt:
        if e["name"] not in shapes_by_name:
            raise RegistryError(f"optimizer entry for unknown parameter {e['name']!r}")
        n = int(np.prod(shapes_by_name[e["name"]]))
        opt_sizes += [n, n]
    expected = (sum(sizes) + sum(opt_sizes)) * dtype.itemsize
    if expected != n_payload:
        raise RegistryError(f"registry describes {expected} bytes but the payload holds {n_payload}")
    flat = np.frombuffer(data, dtype=dtype, offset=start, count=n_payload // dtype.itemsize)
    tensors, pos = {}, 0
    for e, n in zip(manifest["registry"], sizes):
        tensors[e["name"]] = flat[pos:pos + n].reshape(e["shape"]).copy()
        pos += n
    moments = []
    for e in opt:
        n = int(np.prod(shapes_by_name[e["name"]]))
        a = flat[pos:pos + n].reshape(shapes_by_name[e["name"]]).copy()
        b = flat[pos + n:pos + 2 * n].reshape(shapes_by_name[e["name"]]).copy()
        pos += 2 * n
        moments.append((e["name"], e["step"], a, b))
    return Checkpoint(manifest, tensors, moments)


def restore_model(ckpt: Checkpoint, cfg: Optional[RunConfig] = None) -> WorldModel:
    """Model with the checkpoint's parameters; ``cfg`` defaults to the stored config."""
    cfg = cfg or ckpt.config
    model = build_model(cfg, ckpt.vocab)
    sd = model.state_dict()
    if list(sd) != list(ckpt.tensors):
        raise RegistryError("checkpoint registry does not match the model's parameter names")
    dtype = torch.get_default_dtype()
    loaded = {}
    for name, ref in sd.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise RegistryError(f"{name}: checkpoint shape {tuple(arr.shape)} != model shape {tuple(ref.shape)}")
        loaded[name] = torch.from_numpy(arr).to(dtype)
    model.load_state_dict(loaded)
    return model


def restore_state(ckpt: Checkpoint, cfg: Optional[RunConfig] = None) -> TrainState:
    """Model, optimizer moments, step counter and metrics history for resuming."""
    model = restore_model(ckpt, cfg)
    m = ckpt.manifest
    state = new_state(model, m["phase"], m["train_seeds"], m["metrics"])
    state.step = int(m["step"])
    params = dict(model.named_parameters())
    dtype = torch.get_default_dtype()
    for name, step, a, b in ckpt.optimizer:
        p = params[name]
        state.optimizer.state[p] = {"step": torch.tensor(float(step), dtype=torch.float32),
                                    "exp_avg": torch.from_numpy(a).to(dtype),
                                    "exp_avg_sq": torch.from_numpy(b).to(dtype)}
    return state

