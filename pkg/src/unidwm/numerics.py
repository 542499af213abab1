"""Dense tensor primitives on top of torch autograd.

torch supplies the tensors and the reverse-mode graph. This module adds the
few pieces the rest of the package relies on having exact semantics for:
a global precision mode, shape-checked matmul, a max-shifted softmax,
boundary-clamped trilinear sampling, a one-shot ``backward`` and an
independent central-difference gradient checker.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np
import torch

Tensor = torch.Tensor

_PRECISIONS = {"float64": torch.float64, "float32": torch.float32}


class NumericsError(RuntimeError):
    pass


class DimensionError(NumericsError, ValueError):
    pass


class NonFiniteError(NumericsError):
    pass


class StaleGraphError(NumericsError):
    pass


def set_precision(mode: str) -> torch.dtype:
    """Switch the global floating point mode ("float64" or "float32")."""
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    dtype = _PRECISIONS[mode]
    torch.set_default_dtype(dtype)
    return dtype


def get_precision() -> str:
    return "float64" if torch.get_default_dtype() == torch.float64 else "float32"


class precision:
    """Context manager that temporarily switches the global precision."""

    def __init__(self, mode: str):
        self.mode = mode
        self._saved = None

    def __enter__(self):
        self._saved = get_precision()
        set_precision(self.mode)
        return self

    def __exit__(self, *exc):
        set_precision(self._saved)
        return False


def make_deterministic(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return torch.tensor(np.asarray(data), dtype=torch.get_default_dtype(), requires_grad=requires_grad)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # -inf entries (masked keys) are allowed; a row must keep one finite entry
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def trilinear_sample(vol: Tensor, points: Tensor) -> Tensor:
    """Sample a channels-last volume at continuous grid coordinates.

    ``vol`` is (X, Y, Z, C) or batched (B, X, Y, Z, C); ``points`` is (..., 3)
    or (B, ..., 3) in grid units, node ``i`` sitting at coordinate ``i``.
    Coordinates outside [0, size - 1] are clamped to the boundary.
    """
    batched = vol.dim() == 5
    if not batched:
        vol = vol.unsqueeze(0)
        points = points.unsqueeze(0)
    if vol.dim() != 5 or points.shape[-1] != 3 or points.shape[0] != vol.shape[0]:
        raise DimensionError(f"bad trilinear operands {tuple(vol.shape)} / {tuple(points.shape)}")
    B, X, Y, Z, C = vol.shape
    lead = points.shape[1:-1]
    p = points.reshape(B, -1, 3)
    sizes = (X, Y, Z)

    base, frac = [], []
    for axis, n in enumerate(sizes):
        u = p[..., axis].clamp(0.0, float(n - 1))
        if n == 1:
            i0 = torch.zeros_like(u, dtype=torch.long)
            f = torch.zeros_like(u)
        else:
            i0 = torch.floor(u.detach()).long().clamp(0, n - 2)
            f = u - i0.to(u.dtype)
        base.append(i0)
        frac.append(f)

    flat = vol.reshape(B, X * Y * Z, C)
    out = 0.0
    for dx in (0, 1):
        ix = (base[0] + dx).clamp(max=X - 1)
        wx = frac[0] if dx else 1.0 - frac[0]
        for dy in (0, 1):
            iy = (base[1] + dy).clamp(max=Y - 1)
            wy = frac[1] if dy else 1.0 - frac[1]
            for dz in (0, 1):
                iz = (base[2] + dz).clamp(max=Z - 1)
                wz = frac[2] if dz else 1.0 - frac[2]
                idx = (ix * Y + iy) * Z + iz
                corner = torch.gather(flat, 1, idx.unsqueeze(-1).expand(-1, -1, C))
                out = out + corner * (wx * wy * wz).unsqueeze(-1)
    out = out.reshape(B, *lead, C)
    return out if batched else out[0]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    A given loss tensor can be back-propagated once; record a new graph
    (re-run the forward pass) to differentiate again.
    """
    if loss.numel() != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if getattr(loss, "_unidwm_consumed", False):
        raise StaleGraphError("graph already consumed; re-run the forward pass")
    check_finite(loss, "loss")
    try:
        loss.backward()
    except RuntimeError as exc:
        if "second time" in str(exc):
            raise StaleGraphError(str(exc)) from exc
        raise
    loss._unidwm_consumed = True


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-6,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative disagreement between autograd and central differences.

    ``f`` maps ``x`` (a leaf that may also be a parameter closed over by
    ``f``) to a scalar. The error per element is
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``. With ``max_elements`` a
    seeded random subset of coordinates is probed.
    """
    if x.dtype != torch.float64:
        raise NumericsError("finite_diff_check runs in 64-bit mode only")
    leaf = x if x.is_leaf else x.detach()
    was = leaf.requires_grad
    leaf.requires_grad_(True)
    out = f(leaf)
    if out.numel() != 1:
        raise DimensionError("finite_diff_check needs a scalar-valued function")
    (g_ad,) = torch.autograd.grad(out, leaf, allow_unused=True)
    g_ad = torch.zeros_like(leaf) if g_ad is None else g_ad.detach()

    n = leaf.numel()
    coords: Iterable[int]
    if max_elements is not None and n > max_elements:
        coords = np.random.default_rng(seed).choice(n, size=max_elements, replace=False)
    else:
        coords = range(n)

    worst = 0.0
    flat = leaf.data.view(-1)
    g_flat = g_ad.reshape(-1)
    with torch.no_grad():
        for i in coords:
            orig = flat[i].item()
            flat[i] = orig + h
            up = flat[i].item()
            fp = float(f(leaf))
            flat[i] = orig - h
            down = flat[i].item()
            fm = float(f(leaf))
            flat[i] = orig
            # divide by the step actually taken, not the nominal 2h
            g_fd = (fp - fm) / (up - down)
            ga = float(g_flat[i])
            err = abs(ga - g_fd) / max(1.0, abs(ga), abs(g_fd))
            worst = max(worst, err)
    leaf.requires_grad_(was)
    return worst
