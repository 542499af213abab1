"""Template captions over the scene graph.

Answer grammar::

    <n> vehicles[: vehicle <dir> <dist> , ...] ; <m> buildings[: building <dir> <dist> , ...] ; ego <moving|stopped>

``dir`` is the ego-frame quadrant of the box center and ``dist`` is ``near``
below 10 m, ``far`` otherwise. Boxes are listed nearest first.
"""
from __future__ import annotations

import numpy as np

from .scene import BUILDING, VEHICLE, SceneGraph
from .sensors import world_to_ego

PROMPT = "describe the scene"
NEAR_RANGE = 10.0
MOVING_SPEED = 0.1  # m/s

DIRECTIONS = ("ahead", "left", "behind", "right")
DISTANCES = ("near", "far")
MAX_COUNT = 12


def quantize(x: float, y: float) -> tuple:
    """Relative position bucket of an ego-frame point."""
    ang = np.arctan2(y, x)
    if -np.pi / 4 <= ang <= np.pi / 4:
        direction = "ahead"
    elif np.pi / 4 < ang <= 3 * np.pi / 4:
        direction = "left"
    elif -3 * np.pi / 4 <= ang < -np.pi / 4:
        direction = "right"
    else:
        direction = "behind"
    return direction, "near" if np.hypot(x, y) < NEAR_RANGE else "far"


def _group(scene: SceneGraph, frame: int, cls: str) -> str:
    pose = scene.ego_poses[frame]
    items = []
    for box in scene.boxes:
        if box.cls != cls:
            continue
        center, _ = box.pose(frame)
        p = world_to_ego(center, pose)
        items.append((float(np.hypot(p[0], p[1])), quantize(p[0], p[1])))
    items.sort(key=lambda it: it[0])
    head = f"{len(items)} {cls}s"
    if not items:
        return head
    return head + ": " + " , ".join(f"{cls} {d} {r}" for _, (d, r) in items)


def caption(scene: SceneGraph, frame: int = 0) -> tuple:
    """(prompt, answer) for ``frame``; a pure function of its inputs."""
    moving = scene.ego_speed() > MOVING_SPEED
    parts = [_group(scene, frame, VEHICLE), _group(scene, frame, BUILDING), "ego " + ("moving" if moving else "stopped")]
    return PROMPT, " ; ".join(parts)


def grammar_words() -> list:
    """Every word the caption grammar and prompt can emit, in a fixed order."""
    words = PROMPT.split()
    words += [str(i) for i in range(MAX_COUNT + 1)]
    words += ["vehicles", "vehicles:", "buildings", "buildings:", VEHICLE, BUILDING]
    words += list(DIRECTIONS) + list(DISTANCES)
    words += [",", ";", "ego", "moving", "stopped"]
    return words
