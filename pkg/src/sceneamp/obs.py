"""Observation and goal features for policy, value function and discriminator.

Local quantities are expressed in the root frame: origin at the root, rotated
by the root pitch. Root height and root rotation stay in the world frame.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .physics import BodyDef, CharacterState, SceneObject, link_frames, point_world

TASKS = ("sit", "lie", "carry")


def encode_rotation(angle, mode: str = "planar") -> np.ndarray:
    """(cos, sin) of a planar angle. mode="3d" returns the first two columns of the
    rotation matrix about the out-of-plane axis (6 numbers)."""
    c, s = np.cos(angle), np.sin(angle)
    if mode == "planar":
        return np.array([c, s])
    if mode == "3d":
        return np.array([c, s, 0.0, -s, c, 0.0])
    raise ValueError(f"unknown rotation mode {mode!r}")


def _to_local(angle, vec):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * vec[0] + s * vec[1], -s * vec[0] + c * vec[1]])


def character_layout(body: BodyDef) -> list[str]:
    names = ["root_height", "root_rot_cos", "root_rot_sin",
             "root_vel_x", "root_vel_y", "root_angvel"]
    joints = body.link_names[1:]
    names += [f"{j}_rot_{c}" for j in joints for c in ("cos", "sin")]
    names += [f"{j}_vel" for j in joints]
    names += ["hand_x", "hand_y"]
    for i in range(len(body.feet)):
        names += [f"foot{i}_x", f"foot{i}_y"]
    return names


OBJECT_LAYOUT = ["obj_x", "obj_y", "obj_rot_cos", "obj_rot_sin"]


def observation_layout(body: BodyDef) -> list[str]:
    return character_layout(body) + OBJECT_LAYOUT


def goal_layout(task: str, bbox: bool = True, density: bool = False) -> list[str]:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    names = []
    if task == "carry":
        names += ["target_x", "target_y"]
        if bbox:
            names += ["box_h", "box_w", "box_d"]
        if density:
            names += ["box_density"]
    elif bbox:
        names += ["obj_w", "obj_h", "obj_d"]
    return names


def layout_hash(names) -> str:
    return hashlib.sha256("|".join(names).encode()).hexdigest()[:16]


def character_obs(body: BodyDef, char: CharacterState) -> np.ndarray:
    q, qd = char.q, char.qd
    frames = link_frames(body, q, qd)
    root = char.root_pos
    th = char.root_angle
    parts = [
        [root[1]],
        encode_rotation(th),
        _to_local(th, char.root_vel),
        [char.root_angvel],
    ]
    for a in char.joint_angles:
        parts.append(encode_rotation(a))
    parts.append(char.joint_vels)
    hand = point_world(frames, body.hand[0], body.hand[1])
    parts.append(_to_local(th, hand - root))
    for link, local in body.feet:
        parts.append(_to_local(th, point_world(frames, link, local) - root))
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def object_obs(char: CharacterState, obj_position, obj_angle: float) -> np.ndarray:
    th = char.root_angle
    rel = _to_local(th, np.asarray(obj_position, dtype=np.float64) - char.root_pos)
    return np.concatenate([rel, encode_rotation(obj_angle - th)])


def full_obs(body: BodyDef, char: CharacterState, obj_position, obj_angle) -> np.ndarray:
    return np.concatenate([character_obs(body, char), object_obs(char, obj_position, obj_angle)])


@dataclass
class GoalConfig:
    bbox: bool = True
    density: bool = False
    density_scale: float = 0.01   # kg/m^3 -> O(1) feature


def goal_features(task: str, char: CharacterState, obj: SceneObject | None,
                  target=None, config: GoalConfig | None = None) -> np.ndarray:
    """Sit/lie: (w, h, d) of the object. Carry: local target position then (h, w, d)
    and optionally the box density."""
    config = config or GoalConfig()
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if obj is None:
        raise ValueError(f"{task} goal needs its task object")
    if task == "carry":
        if target is None:
            raise ValueError("carry goal needs a target position")
        rel = _to_local(char.root_angle, np.asarray(target, dtype=np.float64) - char.root_pos)
        parts = [rel]
        if config.bbox:
            parts.append([obj.height, obj.width, obj.depth])
        if config.density:
            parts.append([obj.density * config.density_scale])
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])
    if not config.bbox:
        return np.zeros(0)
    return np.array([obj.width, obj.height, obj.depth])


def layout_manifest(body: BodyDef, task: str, goal: GoalConfig | None = None) -> str:
    """Text manifest of the observation and goal vectors, one feature per line."""
    goal = goal or GoalConfig()
    obs = observation_layout(body)
    g = goal_layout(task, goal.bbox, goal.density)
    lines = [f"# observation layout hash={layout_hash(obs)} dim={len(obs)}"]
    lines += [f"obs {i} {n}" for i, n in enumerate(obs)]
    lines.append(f"# goal layout task={task} hash={layout_hash(g)} dim={len(g)}")
    lines += [f"goal {i} {n}" for i, n in enumerate(g)]
    return "\n".join(lines) + "\n"
