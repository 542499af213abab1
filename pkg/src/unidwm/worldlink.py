"""World queries and the current-to-future link."""
from __future__ import annotations

import math
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics
from .seqmodel import MultiHeadAttention


class QueryError(ValueError):
    pass


def region_grid(X: int, Y: int, n: int):
    """Rows x cols of the equal rectangular partition used for ``n`` queries."""
    if (X * Y) % n:
        raise QueryError(f"n={n} does not divide the {X}x{Y} cell count")
    r = max(d for d in range(1, int(math.isqrt(n)) + 1) if n % d == 0)
    for rows, cols in ((r, n // r), (n // r, r)):
        if X % rows == 0 and Y % cols == 0:
            return rows, cols
    raise QueryError(f"cannot split a {X}x{Y} grid into {n} equal rectangles")


def pool_regions(comp: torch.Tensor, n: int, mode: str = "max", probe: Optional[torch.Tensor] = None):
    """Compressed BEV (B, C, X, Y) -> queries (B, n, C), regions in row-major order.

    ``attention`` mode weights each region's cells by a softmax of their dot
    product with the learned ``probe`` (single head).
    """
    B, C, X, Y = comp.shape
    rows, cols = region_grid(X, Y, n)
    rh, cw = X // rows, Y // cols
    # (B, C, rows, rh, cols, cw) -> (B, rows, cols, rh*cw, C)
    cells = comp.reshape(B, C, rows, rh, cols, cw).permute(0, 2, 4, 3, 5, 1).reshape(B, n, rh * cw, C)
    if mode == "max":
        return cells.amax(dim=2)
    if mode == "avg":
        return cells.mean(dim=2)
    if mode == "attention":
        if probe is None:
            raise QueryError("attention pooling needs a probe vector")
        w = numerics.softmax((cells @ probe) / math.sqrt(C), axis=-1)
        return (w.unsqueeze(-1) * cells).sum(dim=2)
    raise QueryError(f"unknown pool mode {mode!r}")


class EgoEncoder(nn.Module):
    """(dx, dy, dyaw) -> embedding via (dx, dy, sin dyaw, cos dyaw) and a two-layer perceptron."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(4, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, ego: torch.Tensor) -> torch.Tensor:
        feats = torch.stack([ego[..., 0], ego[..., 1], torch.sin(ego[..., 2]), torch.cos(ego[..., 2])], dim=-1)
        return self.fc2(F.gelu(self.fc1(feats)))


class WorldQueries(nn.Module):
    """Learned parts of the world queries: ego encoder, frame embedding, pooling probe."""

    def __init__(self, dim: int, delta_t: int, n: int, pool_mode: str = "max"):
        super().__init__()
        self.n = n
        self.delta_t = delta_t
        self.pool_mode = pool_mode
        self.ego = EgoEncoder(dim)
        self.frame_embedding = nn.Parameter(torch.randn(delta_t, dim) * 0.02)
        self.probe = nn.Parameter(torch.randn(dim) * 0.02)

    def init_queries(self, comp: torch.Tensor) -> torch.Tensor:
        return pool_regions(comp, self.n, self.pool_mode, self.probe)

    def forward(self, comp: torch.Tensor, ego: torch.Tensor, proj) -> torch.Tensor:
        """Projected world queries (B, delta_t * n, C)."""
        return assemble(self.init_queries(comp), self.ego(ego), self.frame_embedding, proj)


def assemble(q: torch.Tensor, ego_emb: torch.Tensor, fe: torch.Tensor, proj) -> torch.Tensor:
    """Copy the pooled queries once per future frame, add that frame's ego and frame embeddings, project.

    q: (B, n, c4); ego_emb: (B, dt, c4); fe: (dt, c4) -> (B, dt * n, C).
    """
    B, n, c4 = q.shape
    if ego_emb.shape[1] != fe.shape[0]:
        raise QueryError(f"{ego_emb.shape[1]} ego motions for {fe.shape[0]} frame embeddings")
    groups = q.unsqueeze(1) + ego_emb.unsqueeze(2) + fe.view(1, -1, 1, c4)  # (B, dt, n, c4)
    return proj(groups.reshape(B, -1, c4))


class LinkBlock(nn.Module):
    """Cross-attention to the frame's queries, self-attention over BEV cells, feed-forward; all pre-norm."""

    def __init__(self, dim: int, heads: int, zero_init: bool = True):
        super().__init__()
        self.ln_q = nn.LayerNorm(dim)
        self.ln_kv = nn.LayerNorm(dim)
        self.cross = MultiHeadAttention(dim, heads)
        self.ln_s = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.ln_f = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)
        if zero_init:
            for lin in (self.cross.out, self.self_attn.out, self.fc2):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)

    def forward(self, x, kv):
        x = x + self.cross(self.ln_q(x), context=self.ln_kv(kv))
        h = self.ln_s(x)
        x = x + self.self_attn(h)
        return x + self.fc2(F.gelu(self.fc1(self.ln_f(x))))


class CurrentToFutureLink(nn.Module):
    def __init__(self, dim: int, heads: int = 4, blocks: int = 3, zero_init: bool = True):
        super().__init__()
        self.blocks = nn.ModuleList([LinkBlock(dim, heads, zero_init) for _ in range(blocks)])

    def forward(self, bev: torch.Tensor, queries: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        """bev (B, L, c4) and one (B, n, c4) query tensor per future frame -> future BEVs.

        Frames are stacked along the batch axis and never attend to each other.
        """
        dt = len(queries)
        B, L, D = bev.shape
        x = bev.unsqueeze(0).expand(dt, B, L, D).reshape(dt * B, L, D)
        kv = torch.stack(list(queries)).reshape(dt * B, -1, D)
        for block in self.blocks:
            x = block(x, kv)
        return list(x.view(dt, B, L, D).unbind(0))


def split_groups(encoded: torch.Tensor, delta_t: int) -> List[torch.Tensor]:
    """(B, dt*n, c4) -> dt tensors of (B, n, c4)."""
    B, N, D = encoded.shape
    if N % delta_t:
        raise QueryError(f"{N} encoded queries do not split into {delta_t} groups")
    return list(encoded.view(B, delta_t, N // delta_t, D).unbind(1))


def current_to_future(link: CurrentToFutureLink, bev: torch.Tensor, queries: Sequence[torch.Tensor],
                      delta_t: int) -> List[torch.Tensor]:
    if len(queries) != delta_t:
        raise QueryError(f"expected {delta_t} query groups, got {len(queries)}")
    return link(bev, queries)


class SeparatedGenerator(nn.Module):
    """Ablation path: the link reads the raw compressed BEV and ego embeddings only."""

    def __init__(self, dim: int, heads: int, blocks: int, zero_init: bool = True):
        super().__init__()
        self.ego = EgoEncoder(dim)
        self.link = CurrentToFutureLink(dim, heads, blocks, zero_init)

    def forward(self, bev_tokens: torch.Tensor, ego: torch.Tensor) -> List[torch.Tensor]:
        """bev_tokens (B, L, c4) raw compressed BEV; ego (B, dt, 3)."""
        e = self.ego(ego)  # (B, dt, c4)
        return self.link(bev_tokens, [e[:, i:i + 1] for i in range(e.shape[1])])
