"""ASCII PLY point clouds (x, y, z only)."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def ply_text(points) -> str:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    head = ["ply", "format ascii 1.0", f"element vertex {len(p)}",
            "property float x", "property float y", "property float z", "end_header"]
    body = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in p]
    return "\n".join(head + body) + "\n"


def write_ply(path, points) -> None:
    Path(path).write_text(ply_text(points))


def read_ply(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply" or lines[1] != "format ascii 1.0":
        raise ValueError(f"{path}: not an ASCII PLY file")
    n = int(lines[2].split()[-1])
    start = lines.index("end_header") + 1
    rows = [list(map(float, ln.split())) for ln in lines[start:start + n]]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)
