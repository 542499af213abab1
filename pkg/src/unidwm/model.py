"""The full driving world model: camera splat -> BEV -> sequence model -> future BEVs -> rendered depths."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import render as rnd
from .bevtok import BevTokenizer, LanguageProjection, OutProjection, flatten_bev, splat_plan
from .config import RunConfig
from .seqmodel import (CausalTransformer, Vocabulary, answer_ids, greedy_decode, ntp_loss, pack, prompt_ids,
                       text_targets)
from .toyworld.captions import PROMPT, grammar_words
from .toyworld.dataset import FrameSample
from .toyworld.sensors import CameraSpec, LidarSpec
from .worldlink import CurrentToFutureLink, SeparatedGenerator, WorldQueries, split_groups

PARAM_GROUPS = ("tokenizer", "sequence", "queries", "link", "render")


def default_vocabulary() -> Vocabulary:
    return Vocabulary(PROMPT.split() + grammar_words())


@dataclass
class Prepared:
    """Tensors derived once from a dataset sample."""

    seed: int
    splat: torch.Tensor  # (4, w, h)
    ego: torch.Tensor  # (dt, 3)
    ray_origins: torch.Tensor  # (F, R, 3) in frame-0 ego coordinates
    ray_dirs: torch.Tensor  # (F, R, 3)
    ray_depths: torch.Tensor  # (F, R), nan for a miss
    prompt: str
    answer: str


def prepare(sample: FrameSample, cfg: RunConfig) -> Prepared:
    cams = CameraSpec.from_world(cfg.world)
    lidar = LidarSpec.from_world(cfg.world)
    dtype = torch.get_default_dtype()
    plan = splat_plan(sample.images, cams, cfg.bev.w, cfg.bev.h, cfg.bev.cell_size)
    images = torch.as_tensor(np.asarray(sample.images, dtype=np.float64), dtype=dtype)
    splat = plan.apply(images.reshape(-1, images.shape[-1]))
    origins, dirs = [], []
    for f in range(sample.delta_t + 1):
        rays = rnd.build_rays(lidar, None if f == 0 else sample.ego_motions[f - 1])
        origins.append(rays.origins)
        dirs.append(rays.dirs)
    depths = torch.as_tensor(np.asarray(sample.ray_depths, dtype=np.float64), dtype=dtype)
    ego = torch.as_tensor(np.asarray(sample.ego_motions, dtype=np.float64), dtype=dtype)
    return Prepared(sample.seed, splat, ego, torch.stack(origins), torch.stack(dirs), depths,
                    sample.prompt, sample.answer)


@dataclass
class ForwardOutput:
    ntp: torch.Tensor
    frame_bevs: List[torch.Tensor]  # frame 0..dt, each (B, L_bev, 4c)
    logits: torch.Tensor
    queries: Optional[torch.Tensor] = None  # projected world queries (B, dt*n, C)


class WorldModel(nn.Module):
    def __init__(self, cfg: RunConfig, vocab: Optional[Vocabulary] = None):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab or default_vocabulary()
        b, m, r = cfg.bev, cfg.model, cfg.render
        c4 = 4 * b.c
        self.delta_t = cfg.world.delta_t
        self.tokenizer = BevTokenizer(4, b.c)
        self.lang_proj = LanguageProjection(c4, m.width)
        self.out_proj = OutProjection(m.width, c4)
        self.transformer = CausalTransformer(len(self.vocab), m.width, m.layers, m.heads, m.max_seq_len)
        self.queries = WorldQueries(c4, self.delta_t, m.n_world_queries, m.pool_mode)
        self.link = CurrentToFutureLink(c4, m.link_heads, m.link_blocks, m.zero_init_link)
        self.separated = SeparatedGenerator(c4, m.link_heads, m.link_blocks, m.zero_init_link) \
            if m.separated_mode else None
        self.geometry = rnd.VolumeGeometry(b.w, b.h, r.z, b.cell_size, r.z_min, r.z_max)
        self.decoder = rnd.VolumeDecoder(b.c, r.z, r.c_vol, b.w, b.h)
        self.field = rnd.SdfField(self.geometry, r.c_vol, r.sdf_hidden, r.t_init)

    # ------------------------------------------------------------ groups

    def group_of(self, name: str) -> str:
        head = name.split(".")[0]
        return {"tokenizer": "tokenizer", "lang_proj": "sequence", "out_proj": "sequence",
                "transformer": "sequence", "queries": "queries", "link": "link", "separated": "link",
                "decoder": "render", "field": "render"}[head]

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        out: Dict[str, List[nn.Parameter]] = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            out[self.group_of(name)].append(p)
        return out

    # ------------------------------------------------------------ pieces

    def encode_bev(self, splat: torch.Tensor):
        """(B, 4, w, h) splat -> (compressed BEV (B, 4c, w/4, h/4), raw tokens (B, L_bev, 4c))."""
        _, comp = self.tokenizer(splat)
        return comp, flatten_bev(comp)

    def render_frame(self, tokens: torch.Tensor, origins: torch.Tensor, dirs: torch.Tensor,
                     depths: torch.Tensor):
        """BEV tokens (B, L, 4c) and rays (B, R, 3) -> (depth (B, R), W (B, R))."""
        vol = self.decoder(tokens)
        return rnd.render_depth(self.field, vol, origins, dirs, depths, self.geometry)

    def text_ids(self, prompts: Sequence[str], answers: Sequence[str]):
        ids, n_prompt = [], []
        for p, a in zip(prompts, answers):
            pi = prompt_ids(self.vocab, p)
            ids.append(pi + answer_ids(self.vocab, a))
            n_prompt.append(len(pi))
        return ids, n_prompt

    def forward(self, splat: torch.Tensor, ego: torch.Tensor, prompts: Sequence[str],
                answers: Sequence[str], with_futures: bool = True) -> ForwardOutput:
        comp, raw = self.encode_bev(splat)
        bev_in = self.lang_proj(raw)
        ids, n_prompt = self.text_ids(prompts, answers)
        unified = with_futures and self.separated is None
        qw = self.queries(comp, ego, self.lang_proj) if unified else None
        emb, valid, layouts = pack(bev_in, ids, n_prompt, self.transformer.embed_tokens, qw,
                                   self.transformer.max_seq_len)
        logits, hidden = self.transformer(emb, valid)
        targets, mask = text_targets(ids, layouts, emb.shape[1])
        loss = ntp_loss(logits, targets, mask)
        if not with_futures:
            return ForwardOutput(loss, [], logits)
        if unified:
            n_bev = raw.shape[1]
            encoded = self.out_proj(hidden[:, :n_bev])
            q_hidden = torch.stack([hidden[b, lay.query_start:lay.used] for b, lay in enumerate(layouts)])
            groups = split_groups(self.out_proj(q_hidden), self.delta_t)
            futures = self.link(encoded, groups)
            return ForwardOutput(loss, [encoded] + futures, logits, qw)
        futures = self.separated(raw, ego)
        return ForwardOutput(loss, [raw] + futures, logits)

    # ------------------------------------------------------------ inference

    @torch.no_grad()
    def describe(self, splat: torch.Tensor, prompt: str = PROMPT, max_tokens: int = 64) -> str:
        _, raw = self.encode_bev(splat.unsqueeze(0))
        return greedy_decode(self.transformer, self.lang_proj(raw)[0], self.vocab, prompt, max_tokens)

    @torch.no_grad()
    def generate(self, splat: torch.Tensor, ego: torch.Tensor, prompt: str = PROMPT, answer: Optional[str] = None,
                 max_tokens: int = 64):
        """Answer text and frame BEVs (frame 0..dt) for one scene under an ego plan (dt, 3).

        Without ``answer`` the model's own greedy answer fills the text segment.
        """
        if answer is None:
            answer = self.describe(splat, prompt, max_tokens)
        out = self.forward(splat.unsqueeze(0), ego.unsqueeze(0), [prompt], [answer])
        return answer, out.frame_bevs

    @torch.no_grad()
    def render_points(self, frame_bevs: List[torch.Tensor], ego, lidar: LidarSpec) -> List[np.ndarray]:
        """Generated clouds per frame, each in that frame's own ego coordinates."""
        r = self.cfg.render
        depths = rnd.sample_depths(r.samples_eval, r.near, r.far)
        ego = np.asarray(ego, dtype=np.float64)
        clouds = []
        for f, tokens in enumerate(frame_bevs):
            motion = None if f == 0 else ego[f - 1]
            rays = rnd.build_rays(lidar, motion, r.samples_eval, r.near, r.far)
            d, w = self.render_frame(tokens, rays.origins.unsqueeze(0), rays.dirs.unsqueeze(0), depths)
            pts = rnd.rendered_points(rays.origins, rays.dirs, d[0], w[0], r.surface_eps, r.renormalize_depth)
            clouds.append(pts if motion is None else frame0_to_frame(pts, motion))
        return clouds


def frame0_to_frame(points: np.ndarray, motion) -> np.ndarray:
    """Points in frame-0 ego coordinates -> ego coordinates of the frame at relative pose ``motion``."""
    rot, trans = rnd.pose_transform(motion)
    return (np.asarray(points, dtype=np.float64) - trans) @ rot


def frame_to_frame0(points: np.ndarray, motion) -> np.ndarray:
    rot, trans = rnd.pose_transform(motion)
    return np.asarray(points, dtype=np.float64) @ rot.T + trans


def make_predictor(model: WorldModel, cfg: RunConfig):
    """Evaluation callable: sample -> (decoded answer, generated clouds under the true ego motion)."""
    lidar = LidarSpec.from_world(cfg.world)

    def predict(sample: FrameSample):
        p = prepare(sample, cfg)
        answer, bevs = model.generate(p.splat, p.ego, max_tokens=cfg.eval.max_decode_tokens)
        return answer, model.render_points(bevs, p.ego.double().numpy(), lidar)

    return predict
