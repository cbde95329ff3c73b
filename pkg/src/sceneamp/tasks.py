"""Task goals, task rewards, success/termination predicates and scene randomization.

Rewards take a `TaskKinematics` summary (root, head height, hand height, box) so
they stay pure functions of already-computed quantities. `task_kinematics`
builds one from a `World`.

Distances: the walk-to-goal branch tests, the far-field position term and the
heading vectors use horizontal (x) separation, because the goal sits on the
ground plane while the root rides ~1 m above it. Near-field terms and success
tests use full planar (x, y) distances to the anchors.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .physics import (SceneObject, World, link_frames, lowest_nonextremity_height,
                      point_world)

DEFAULT_SEAT = (0.50, 0.45, 0.50)
DEFAULT_BED = (1.00, 0.50, 1.90)
DEFAULT_BOX = (0.50, 0.35, 0.30)


@dataclass
class TaskSpec:
    kind: str
    episode_length: float                         # s, training horizon
    timeout: float = 20.0                         # s, evaluation trials
    distance_range: tuple[float, float] = (1.0, 10.0)
    orientation_range: tuple[float, float] = (0.0, 2.0 * np.pi)
    scale_range: tuple[float, float] = (0.8, 1.2)
    mass_range: tuple[float, float] = (5.0, 26.0)   # kg, used when randomize_mass is set
    randomize_mass: bool = False
    hip_threshold: float = 0.2
    head_threshold: float = 0.3
    box_threshold: float = 0.2
    ground_clearance: float = 0.2
    box_low: float = 0.3
    box_lift_gate: float = 0.45
    walk_speed: float = 1.5
    carry_speed: float = 1.5
    box_density: float = 60.0
    platform_height: float = 0.75
    target_range: tuple[float, float] = (1.5, 4.0)  # box start to carry target, m

    def __post_init__(self):
        if self.kind not in ("sit", "lie", "carry"):
            raise ValueError(f"unknown task {self.kind!r}")
        for name in ("hip_threshold", "head_threshold", "box_threshold", "episode_length",
                     "timeout", "walk_speed", "carry_speed"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("distance_range", "orientation_range", "scale_range", "target_range",
                     "mass_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a non-empty interval")

    @property
    def max_steps(self) -> int:
        return int(round(self.episode_length * 30))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        base = default_spec(d.pop("kind"))
        return replace(base, **d)


def default_spec(kind: str) -> TaskSpec:
    if kind == "sit":
        return TaskSpec("sit", episode_length=10.0)
    if kind == "lie":
        return TaskSpec("lie", episode_length=10.0)
    if kind == "carry":
        return TaskSpec("carry", episode_length=15.0, scale_range=(0.5, 1.5))
    raise ValueError(f"unknown task {kind!r}")


@dataclass
class TaskContext:
    task: str
    object: SceneObject
    extras: list[SceneObject] = field(default_factory=list)   # platforms
    carry_target: np.ndarray | None = None                      # box centre goal
    walk_speed: float = 1.5
    carry_speed: float = 1.5
    scale: float = 1.0
    orientation: float = 0.0

    def __post_init__(self):
        if not (self.walk_speed > 0 and self.carry_speed > 0):
            raise ValueError("target speeds must be positive")
        if self.carry_target is not None:
            self.carry_target = np.asarray(self.carry_target, dtype=np.float64)

    @property
    def objects(self) -> list[SceneObject]:
        return [self.object] + list(self.extras)

    @property
    def goal_position(self) -> np.ndarray:
        """Where the character should end up: the anchor for sit/lie, the box for carry."""
        if self.task == "carry":
            return self.object.position
        return self.object.sit_anchor

    def copy(self) -> "TaskContext":
        return TaskContext(self.task, self.object.copy(), [e.copy() for e in self.extras],
                           None if self.carry_target is None else self.carry_target.copy(),
                           self.walk_speed, self.carry_speed, self.scale, self.orientation)

    def to_dict(self) -> dict:
        return {"task": self.task, "object": self.object.to_dict(),
                "extras": [e.to_dict() for e in self.extras],
                "carry_target": None if self.carry_target is None else self.carry_target.tolist(),
                "walk_speed": self.walk_speed, "carry_speed": self.carry_speed,
                "scale": self.scale, "orientation": self.orientation}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskContext":
        return cls(d["task"], SceneObject.from_dict(d["object"]),
                   [SceneObject.from_dict(e) for e in d.get("extras", [])],
                   d.get("carry_target"), d.get("walk_speed", 1.5), d.get("carry_speed", 1.5),
                   d.get("scale", 1.0), d.get("orientation", 0.0))


@dataclass
class TaskKinematics:
    root: np.ndarray          # (2,)
    root_vel: np.ndarray      # (2,)
    head_height: float
    hand_height: float
    box: np.ndarray | None = None
    box_vel: np.ndarray | None = None


def task_kinematics(world: World) -> TaskKinematics:
    body = world.body
    frames = link_frames(body, world.q)
    head = point_world(frames, body.head[0], body.head[1])
    hand = point_world(frames, body.hand[0], body.hand[1])
    box = world.box
    return TaskKinematics(world.q[:2].copy(), world.qd[:2].copy(), float(head[1]),
                          float(hand[1]),
                          None if box is None else box.position.copy(),
                          None if box is None else world.box_vel[:2].copy())


# ---------------------------------------------------------------------------
# rewards


def _heading(goal_x: float, from_x: float) -> float:
    d = goal_x - from_x
    return 0.0 if d == 0 else float(np.sign(d))


def _far_terms(goal_x, pos_x, vel_x, speed, w_pos, w_vel):
    dist = abs(goal_x - pos_x)
    heading = _heading(goal_x, pos_x)
    return (w_pos * np.exp(-0.5 * dist * dist)
            + w_vel * np.exp(-2.0 * (speed - heading * vel_x) ** 2))


def _approach_reward(kin: TaskKinematics, ctx: TaskContext, near: float) -> float:
    obj_x = ctx.object.position[0]
    if abs(obj_x - kin.root[0]) > 0.5:
        far = _far_terms(obj_x, kin.root[0], kin.root_vel[0], ctx.walk_speed, 0.5, 0.5)
        return float(0.7 * near + 0.3 * far)
    return float(0.7 * near + 0.3)


def _sq(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(d @ d)


def reward_sit(kin: TaskKinematics, ctx: TaskContext) -> float:
    near = np.exp(-10.0 * _sq(ctx.object.sit_anchor, kin.root))
    return _approach_reward(kin, ctx, near)


def reward_lie(kin: TaskKinematics, ctx: TaskContext) -> float:
    dh = ctx.object.head_height - kin.head_height
    near = np.exp(-10.0 * _sq(ctx.object.sit_anchor, kin.root) - 10.0 * dh * dh)
    return _approach_reward(kin, ctx, near)


def reward_carry_terms(kin: TaskKinematics, ctx: TaskContext) -> dict:
    """The carry reward split into its walk and carry parts."""
    box, box_vel, target = kin.box, kin.box_vel, ctx.carry_target
    if abs(box[0] - kin.root[0]) > 0.5:
        walk = _far_terms(box[0], kin.root[0], kin.root_vel[0], ctx.walk_speed, 0.1, 0.1)
    else:
        walk = 0.2
    near = 0.2 * np.exp(-10.0 * _sq(target, box))
    if abs(target[0] - box[0]) > 0.5:
        dh = kin.hand_height - box[1]
        carry = (_far_terms(target[0], box[0], box_vel[0], ctx.carry_speed, 0.2, 0.2)
                 + 0.1 * np.exp(-10.0 * dh * dh) + near)
    else:
        carry = 0.2 + near
    return {"walk": float(walk), "carry": float(carry)}


def reward_carry(kin: TaskKinematics, ctx: TaskContext) -> float:
    t = reward_carry_terms(kin, ctx)
    return t["walk"] + t["carry"]


def task_reward(kin: TaskKinematics, ctx: TaskContext) -> float:
    if ctx.task == "sit":
        return reward_sit(kin, ctx)
    if ctx.task == "lie":
        return reward_lie(kin, ctx)
    return reward_carry(kin, ctx)


# ---------------------------------------------------------------------------
# predicates


def anchor_error(kin: TaskKinematics, ctx: TaskContext) -> float:
    """Distance used for precision: hip to anchor for sit and lie, box to target for carry."""
    if ctx.task in ("sit", "lie"):
        return float(np.sqrt(_sq(ctx.object.sit_anchor, kin.root)))
    return float(np.sqrt(_sq(ctx.carry_target, kin.box)))


def success(spec: TaskSpec, kin: TaskKinematics, ctx: TaskContext) -> bool:
    if ctx.task == "sit":
        return np.sqrt(_sq(ctx.object.sit_anchor, kin.root)) <= spec.hip_threshold
    if ctx.task == "lie":
        hip = np.sqrt(_sq(ctx.object.sit_anchor, kin.root))
        head = abs(ctx.object.head_height - kin.head_height)
        return bool(hip <= spec.head_threshold and head <= spec.head_threshold)
    return bool(np.sqrt(_sq(ctx.carry_target, kin.box)) <= spec.box_threshold)


class Termination(enum.Enum):
    CONTINUE = "continue"
    FALL = "fall"
    BOX_DROP = "box_drop"
    TIMEOUT = "timeout"

    @property
    def is_failure(self) -> bool:
        return self in (Termination.FALL, Termination.BOX_DROP)

    @property
    def done(self) -> bool:
        return self is not Termination.CONTINUE


@dataclass
class EpisodeFlags:
    box_lifted: bool = False


def update_flags(spec: TaskSpec, world: World, flags: EpisodeFlags) -> EpisodeFlags:
    box = world.box
    if box is not None and box.position[1] > spec.box_lift_gate:
        flags.box_lifted = True
    return flags


def should_terminate(spec: TaskSpec, world: World, t: float,
                     flags: EpisodeFlags | None = None, horizon: float | None = None) -> Termination:
    """`horizon` overrides the episode length (evaluation uses the 20 s timeout)."""
    if lowest_nonextremity_height(world) < spec.ground_clearance:
        return Termination.FALL
    if spec.kind == "carry":
        box = world.box
        lifted = flags.box_lifted if flags is not None else False
        if box is not None and lifted and box.position[1] < spec.box_low:
            return Termination.BOX_DROP
    limit = spec.episode_length if horizon is None else horizon
    if t >= limit - 1e-9:
        return Termination.TIMEOUT
    return Termination.CONTINUE


# ---------------------------------------------------------------------------
# scenes


def flip_angle(orientation: float) -> float:
    """Planar stand-in for a yaw draw: objects face either way along the line."""
    return 0.0 if np.cos(orientation) >= 0 else float(np.pi)


def make_seat(x: float, scale: float = 1.0, angle: float = 0.0,
              size=DEFAULT_SEAT) -> SceneObject:
    w, h, d = (s * scale for s in size)
    top = h
    return SceneObject("seat", (x, 0.5 * h), angle, (w, h, d),
                       sit_anchor=(x, top + 0.04))


def make_bed(x: float, scale: float = 1.0, angle: float = 0.0,
             size=DEFAULT_BED) -> SceneObject:
    w, h, d = (s * scale for s in size)
    # lying on the back: pelvis resting on the top, head towards the -x side of the bed
    return SceneObject("bed", (x, 0.5 * h), angle, (w, h, d),
                       sit_anchor=(x, h + 0.1), head_height=h + 0.1)


def make_platform(x: float, top: float, depth: float) -> SceneObject:
    return SceneObject("platform", (x, 0.5 * top), 0.0, (0.6, top, depth))


def pedestal_depth(box: SceneObject) -> float:
    """Narrower than the box so a hand can reach under its far edge."""
    return max(0.1, box.depth - 0.12)


def make_box(x: float, bottom: float, scale: float = 1.0, density: float = 60.0,
             size=DEFAULT_BOX) -> SceneObject:
    w, h, d = (s * scale for s in size)
    return SceneObject("box", (x, bottom + 0.5 * h), 0.0, (w, h, d), density=density)


def carry_scene(box_x: float, target_x: float, scale: float, spec: TaskSpec,
                density: float | None = None) -> TaskContext:
    box = make_box(box_x, spec.platform_height, scale,
                   spec.box_density if density is None else density)
    pd = pedestal_depth(box)
    start = make_platform(box_x, spec.platform_height, pd)
    goal = make_platform(target_x, spec.platform_height, pd)
    target = np.array([target_x, spec.platform_height + 0.5 * box.height])
    return TaskContext("carry", box, [start, goal], target, spec.walk_speed, spec.carry_speed,
                       scale)


def randomize_scene(task: str, rng: np.random.Generator, spec: TaskSpec | None = None,
                    root_x: float = 0.0) -> TaskContext:
    """Fresh task object placed ahead of a character whose root is at `root_x`."""
    spec = spec or default_spec(task)
    dist = rng.uniform(*spec.distance_range)
    orient = rng.uniform(*spec.orientation_range)
    scale = rng.uniform(*spec.scale_range)
    x = root_x + dist
    angle = flip_angle(orient)
    if task == "sit":
        ctx = TaskContext("sit", make_seat(x, scale, angle), walk_speed=spec.walk_speed,
                          carry_speed=spec.carry_speed, scale=scale)
    elif task == "lie":
        ctx = TaskContext("lie", make_bed(x, scale, angle), walk_speed=spec.walk_speed,
                          carry_speed=spec.carry_speed, scale=scale)
    elif task == "carry":
        tx = x + rng.uniform(*spec.target_range)
        density = None
        if spec.randomize_mass:
            vol = np.prod(DEFAULT_BOX) * scale ** 3
            density = rng.uniform(*spec.mass_range) / vol
        ctx = carry_scene(x, tx, scale, spec, density)
    else:
        raise ValueError(f"unknown task {task!r}")
    ctx.orientation = float(orient)
    return ctx

