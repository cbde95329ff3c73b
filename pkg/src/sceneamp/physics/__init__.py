"""Deterministic planar articulated rigid-body simulator.

The character is a 7-link chain (torso with rigid head, upper arm, forearm with
hand, and two legs of thigh + shin with a rigid foot) driven by 6 PD servos. A
single free box can be present; seats, beds and platforms are static boxes.
Contacts are velocity-level impulses with Coulomb friction.

`step` mutates the world in place and returns it; use `World.copy()` when a
pristine snapshot is needed.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import yaml

from . import _kernels as K

__all__ = [
    "BodyDef", "SceneObject", "World", "PhysicsConfig", "CharacterState", "SimulationFault",
    "default_body", "rest_state", "pd_torque", "step", "lowest_nonextremity_height",
    "apply_impulse", "link_frames", "point_world", "load_body", "save_body",
    "load_scene", "save_scene", "make_world",
]

GROUND, FURNITURE, BOX = K.GROUND, K.FURNITURE, K.BOX
OBJECT_KINDS = ("seat", "bed", "box", "platform", "target-marker")


class SimulationFault(RuntimeError):
    def __init__(self, msg, snapshot=None):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass
class ContactSphere:
    link: int
    local: tuple[float, float]
    radius: float
    mask: int


@dataclass
class BodyDef:
    """Planar character description. Link 0 is the torso; link k>0 hangs off
    `parent[k]` at `joint_offset[k]` (parent-local) and is driven by joint k-1."""
    link_names: list[str]
    parent: list[int]
    joint_offset: list[tuple[float, float]]
    com: list[tuple[float, float]]
    mass: list[float]
    inertia: list[float]
    length: list[float]
    extremity: list[bool]
    joint_lower: list[float]
    joint_upper: list[float]
    kp: list[float]
    kd: list[float]
    torque_limit: list[float]
    spheres: list[ContactSphere]
    head: tuple[int, tuple[float, float]] = (0, (0.0, 0.65))
    hand: tuple[int, tuple[float, float]] = (2, (0.0, -0.38))
    feet: list[tuple[int, tuple[float, float]]] = field(
        default_factory=lambda: [(4, (0.0, -0.45)), (6, (0.0, -0.45))])

    def __post_init__(self):
        n = len(self.link_names)
        for name in ("parent", "joint_offset", "com", "mass", "inertia", "length", "extremity"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"BodyDef.{name} must have {n} entries")
        for name in ("joint_lower", "joint_upper", "kp", "kd", "torque_limit"):
            if len(getattr(self, name)) != n - 1:
                raise ValueError(f"BodyDef.{name} must have {n - 1} entries")
        if any(m <= 0 for m in self.mass) or any(l <= 0 for l in self.length):
            raise ValueError("link masses and lengths must be positive")
        if any(v < 0 for v in self.kd):
            raise ValueError("kd must be non-negative")
        if any(lo > hi for lo, hi in zip(self.joint_lower, self.joint_upper)):
            raise ValueError("joint lower limit above upper limit")
        if n - 1 != 6:
            raise ValueError("the simulator kernel is built for exactly 6 actuated joints")
        for k in range(1, n):
            if not 0 <= self.parent[k] < k:
                raise ValueError("links must be ordered parents-first")
        self._arrays = None

    @property
    def n_links(self) -> int:
        return len(self.link_names)

    @property
    def n_joints(self) -> int:
        return len(self.link_names) - 1

    def arrays(self):
        if self._arrays is None:
            n = self.n_links
            anc = np.zeros((n, n), dtype=np.bool_)
            for k in range(n):
                m = k
                while m >= 0:
                    anc[k, m] = True
                    m = self.parent[m] if m > 0 else -1
            spheres = self.spheres
            self._arrays = dict(
                parent=np.array(self.parent, dtype=np.int64),
                joint_off=np.array(self.joint_offset, dtype=np.float64).reshape(n, 2),
                com=np.array(self.com, dtype=np.float64).reshape(n, 2),
                mass=np.array(self.mass, dtype=np.float64),
                inertia=np.array(self.inertia, dtype=np.float64),
                anc=anc,
                kp=np.array(self.kp, dtype=np.float64),
                kd=np.array(self.kd, dtype=np.float64),
                tau_lim=np.array(self.torque_limit, dtype=np.float64),
                qlo=np.array(self.joint_lower, dtype=np.float64),
                qhi=np.array(self.joint_upper, dtype=np.float64),
                sph_link=np.array([s.link for s in spheres], dtype=np.int64),
                sph_local=np.array([s.local for s in spheres], dtype=np.float64).reshape(-1, 2),
                sph_r=np.array([s.radius for s in spheres], dtype=np.float64),
                sph_mask=np.array([s.mask for s in spheres], dtype=np.int64),
            )
        return self._arrays

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if not k.startswith("_")}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BodyDef":
        d = dict(d)
        d["spheres"] = [ContactSphere(int(s["link"]), tuple(s["local"]), float(s["radius"]),
                                      int(s["mask"])) for s in d["spheres"]]
        d["joint_offset"] = [tuple(x) for x in d["joint_offset"]]
        d["com"] = [tuple(x) for x in d["com"]]
        d["head"] = (int(d["head"][0]), tuple(d["head"][1]))
        d["hand"] = (int(d["hand"][0]), tuple(d["hand"][1]))
        d["feet"] = [(int(f[0]), tuple(f[1])) for f in d["feet"]]
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _rod_inertia(m, length):
    return m * length * length / 12.0


def default_body() -> BodyDef:
    """~60 kg planar humanoid: hip height 0.95 m, head centre 1.6 m."""
    G, F, B = GROUND, FURNITURE, BOX
    spheres = [
        ContactSphere(0, (0.0, 0.0), 0.04, G | F),          # pelvis / root
        ContactSphere(0, (0.0, 0.17), 0.10, G | F | B),     # lower torso
        ContactSphere(0, (0.0, 0.38), 0.10, G | F | B),     # chest
        ContactSphere(0, (0.0, 0.65), 0.10, G | F | B),     # head
        ContactSphere(1, (0.0, -0.32), 0.04, G | B),        # elbow
        ContactSphere(2, (0.0, -0.19), 0.04, G | B),        # forearm
        ContactSphere(2, (0.0, -0.38), 0.05, G | B),        # hand
    ]
    for thigh, shin in ((3, 4), (5, 6)):
        spheres += [
            ContactSphere(thigh, (0.0, -0.22), 0.04, G | F),
            ContactSphere(thigh, (0.0, -0.45), 0.05, G),    # knee
            ContactSphere(shin, (0.0, -0.22), 0.04, G),
            ContactSphere(shin, (-0.10, -0.47), 0.03, G),   # heel
            ContactSphere(shin, (0.20, -0.47), 0.03, G),    # toe
        ]
    masses = [32.0, 3.0, 2.5, 7.5, 4.0, 7.5, 4.0]
    lengths = [0.75, 0.32, 0.38, 0.45, 0.45, 0.45, 0.45]
    return BodyDef(
        link_names=["torso", "upper_arm", "forearm", "thigh_a", "shin_a", "thigh_b", "shin_b"],
        parent=[-1, 0, 1, 0, 3, 0, 5],
        joint_offset=[(0.0, 0.0), (0.0, 0.5), (0.0, -0.32), (0.0, 0.0), (0.0, -0.45),
                      (0.0, 0.0), (0.0, -0.45)],
        com=[(0.0, 0.3), (0.0, -0.16), (0.0, -0.19), (0.0, -0.2), (0.0, -0.24),
             (0.0, -0.2), (0.0, -0.24)],
        mass=masses,
        inertia=[_rod_inertia(m, l) for m, l in zip(masses, lengths)],
        length=lengths,
        extremity=[False, False, True, False, True, False, True],
        # shoulder, elbow, hip a, knee a, hip b, knee b; the elbow flexes clockwise so the
        # forearm can hook down over a carried box
        joint_lower=[-1.0, -2.6, -0.8, -2.5, -0.8, -2.5],
        joint_upper=[3.0, 0.3, 2.3, 0.0, 2.3, 0.0],
        kp=[300.0, 200.0, 800.0, 800.0, 800.0, 800.0],
        kd=[60.0, 40.0, 160.0, 160.0, 160.0, 160.0],
        torque_limit=[200.0, 150.0, 400.0, 400.0, 400.0, 400.0],
        spheres=spheres,
    )


@dataclass
class CharacterState:
    root_pos: np.ndarray          # (2,) m
    root_angle: float             # rad, ccw from upright
    root_vel: np.ndarray          # (2,) m/s
    root_angvel: float            # rad/s
    joint_angles: np.ndarray      # (J,) rad
    joint_vels: np.ndarray        # (J,) rad/s

    @classmethod
    def from_q(cls, q, qd) -> "CharacterState":
        q = np.asarray(q, dtype=np.float64)
        qd = np.asarray(qd, dtype=np.float64)
        return cls(q[0:2].copy(), float(q[2]), qd[0:2].copy(), float(qd[2]),
                   q[3:].copy(), qd[3:].copy())

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([self.root_pos, [self.root_angle], self.joint_angles])

    @property
    def qd(self) -> np.ndarray:
        return np.concatenate([self.root_vel, [self.root_angvel], self.joint_vels])


@dataclass
class SceneObject:
    """A primitive object. `size` holds full extents (width, height, depth) in m;
    in the plane the rectangle spans depth along x and height along y. `position`
    is the bounding-box centre. Anchors are world-frame."""
    kind: str
    position: np.ndarray
    angle: float = 0.0
    size: tuple[float, float, float] = (0.5, 0.45, 0.5)
    density: float = 100.0
    sit_anchor: np.ndarray | None = None
    head_height: float | None = None

    def __post_init__(self):
        if self.kind not in OBJECT_KINDS:
            raise ValueError(f"unknown object kind {self.kind!r}")
        self.position = np.asarray(self.position, dtype=np.float64)
        self.size = tuple(float(s) for s in self.size)
        if any(s <= 0 for s in self.size):
            raise ValueError("object extents must be positive")
        if self.sit_anchor is not None:
            self.sit_anchor = np.asarray(self.sit_anchor, dtype=np.float64)

    @property
    def width(self) -> float:
        return self.size[0]

    @property
    def height(self) -> float:
        return self.size[1]

    @property
    def depth(self) -> float:
        return self.size[2]

    @property
    def half_extents(self) -> np.ndarray:
        """In-plane half extents (x, y)."""
        return np.array([0.5 * self.depth, 0.5 * self.height])

    @property
    def top(self) -> float:
        return float(self.position[1] + 0.5 * self.height)

    @property
    def mass(self) -> float:
        return self.density * self.width * self.height * self.depth

    @property
    def inertia(self) -> float:
        return self.mass * (self.depth ** 2 + self.height ** 2) / 12.0

    def contains(self, p, tol: float = 1e-9) -> bool:
        """Point inside the (axis-aligned at angle 0) bounding rectangle."""
        c, s = np.cos(-self.angle), np.sin(-self.angle)
        d = np.asarray(p, dtype=np.float64) - self.position
        local = np.array([c * d[0] - s * d[1], s * d[0] + c * d[1]])
        return bool(np.all(np.abs(local) <= self.half_extents + tol))

    def copy(self) -> "SceneObject":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "position": [float(v) for v in self.position],
            "angle": float(self.angle),
            "size": list(self.size),
            "density": float(self.density),
            "sit_anchor": None if self.sit_anchor is None else [float(v) for v in self.sit_anchor],
            "head_height": None if self.head_height is None else float(self.head_height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(kind=d["kind"], position=d["position"], angle=d.get("angle", 0.0),
                   size=tuple(d["size"]), density=d.get("density", 100.0),
                   sit_anchor=d.get("sit_anchor"), head_height=d.get("head_height"))


@dataclass
class PhysicsConfig:
    gravity: float = 9.81
    dt: float = 1.0 / 120.0
    substeps: int = 4
    mu_ground: float = 0.8
    mu_box: float = 0.6
    mu_furniture: float = 0.8
    iterations: int = 20
    baumgarte: float = 0.2
    slop: float = 0.001
    skin: float = 0.01
    oneway_depth: float = 0.12


@dataclass
class World:
    body: BodyDef
    q: np.ndarray
    qd: np.ndarray
    objects: list[SceneObject]
    box_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0
    config: PhysicsConfig = field(default_factory=PhysicsConfig)
    last_torque: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).copy()
        self.qd = np.asarray(self.qd, dtype=np.float64).copy()
        self.box_vel = np.asarray(self.box_vel, dtype=np.float64).copy()
        self._rect_cache = None

    @property
    def gravity(self) -> float:
        return self.config.gravity

    @property
    def character(self) -> CharacterState:
        return CharacterState.from_q(self.q, self.qd)

    def set_character(self, state: CharacterState) -> None:
        self.q = state.q.copy()
        self.qd = state.qd.copy()

    @property
    def box_index(self):
        for i, o in enumerate(self.objects):
            if o.kind == "box":
                return i
        return None

    @property
    def box(self):
        i = self.box_index
        return None if i is None else self.objects[i]

    def static_rects(self):
        if self._rect_cache is None:
            rows, flags = [], []
            for o in self.objects:
                if o.kind in ("seat", "bed", "platform"):
                    hx, hy = o.half_extents
                    rows.append([o.position[0], o.position[1], hx, hy])
                    flags.append(K.RECT_ONEWAY | K.RECT_SOLID)
            self._rect_cache = (np.array(rows, dtype=np.float64).reshape(-1, 4),
                                np.array(flags, dtype=np.int64))
        return self._rect_cache

    def invalidate(self) -> None:
        """Call after moving static objects."""
        self._rect_cache = None

    def copy(self) -> "World":
        w = World(self.body, self.q.copy(), self.qd.copy(), [o.copy() for o in self.objects],
                  self.box_vel.copy(), self.time, copy.deepcopy(self.config),
                  self.last_torque.copy())
        return w

    def snapshot(self) -> dict:
        return {"time": self.time, "q": self.q.tolist(), "qd": self.qd.tolist(),
                "box_vel": self.box_vel.tolist(),
                "objects": [o.to_dict() for o in self.objects]}


def rest_state(body: BodyDef, x: float = 0.0) -> CharacterState:
    """Upright standing pose with zero joint angles, feet resting on the ground."""
    q = np.zeros(3 + body.n_joints)
    # lowest point of ground-touching spheres at q with root at height 0
    frames = link_frames(body, q)
    low = min(point_world(frames, s.link, s.local)[1] - s.radius
              for s in body.spheres if s.mask & GROUND)
    q[0] = x
    q[1] = -low
    return CharacterState.from_q(q, np.zeros_like(q))


def make_world(body: BodyDef, state: CharacterState | None = None, objects=None,
               config: PhysicsConfig | None = None) -> World:
    state = state if state is not None else rest_state(body)
    return World(body, state.q, state.qd, list(objects or []),
                 config=config or PhysicsConfig())


def pd_torque(q, qdot, q_target, kp, kd, limit=np.inf):
    """Explicit PD servo torque, clamped to +-limit."""
    tau = kp * (np.asarray(q_target) - np.asarray(q)) - kd * np.asarray(qdot)
    return np.clip(tau, -limit, limit)


def link_frames(body: BodyDef, q, qd=None):
    """World origins (n,2), angles (n,), origin velocities (n,2), angular velocities (n,)."""
    a = body.arrays()
    n = body.n_links
    q = np.asarray(q, dtype=np.float64)
    qd = np.zeros_like(q) if qd is None else np.asarray(qd, dtype=np.float64)
    O, phi, VO, om, AO = (np.empty((n, 2)), np.empty(n), np.empty((n, 2)), np.empty(n),
                          np.empty((n, 2)))
    K.link_kinematics(q, qd, a["parent"], a["joint_off"], O, phi, VO, om, AO)
    return O, phi, VO, om


def point_world(frames, link: int, local):
    O, phi = frames[0], frames[1]
    c, s = np.cos(phi[link]), np.sin(phi[link])
    return np.array([O[link, 0] + c * local[0] - s * local[1],
                     O[link, 1] + s * local[0] + c * local[1]])


def point_velocity(frames, link: int, local):
    O, phi, VO, om = frames
    c, s = np.cos(phi[link]), np.sin(phi[link])
    rx, ry = c * local[0] - s * local[1], s * local[0] + c * local[1]
    return np.array([VO[link, 0] - om[link] * ry, VO[link, 1] + om[link] * rx])


def _box_args(world: World):
    box = world.box
    if box is None:
        return (np.zeros(3), np.zeros(3), False, 1.0, 1.0, np.ones(2))
    bq = np.array([box.position[0], box.position[1], box.angle])
    return bq, world.box_vel, True, box.mass, box.inertia, box.half_extents


def step(world: World, pd_targets, dt: float | None = None, substeps: int = 1) -> World:
    """Advance the world by `dt` seconds split into `substeps` equal integration steps."""
    cfg = world.config
    dt = cfg.dt if dt is None else float(dt)
    if not dt > 0:
        raise ValueError("dt must be positive")
    a = world.body.arrays()
    targets = np.clip(np.asarray(pd_targets, dtype=np.float64), a["qlo"], a["qhi"])
    if targets.shape != (world.body.n_joints,):
        raise ValueError(f"expected {world.body.n_joints} PD targets, got {targets.shape}")
    rects, flags = world.static_rects()
    bq, bqd, has_box, bm, bi, bh = _box_args(world)
    bqd = bqd.copy()
    h = dt / substeps
    tau = np.zeros(world.body.n_joints)
    for _ in range(substeps):
        ok = K.substep(world.q, world.qd, bq, bqd, has_box, bm, bi, bh, targets,
                       a["parent"], a["joint_off"], a["com"], a["mass"], a["inertia"], a["anc"],
                       a["kp"], a["kd"], a["tau_lim"], a["qlo"], a["qhi"],
                       a["sph_link"], a["sph_local"], a["sph_r"], a["sph_mask"],
                       rects, flags,
                       cfg.gravity, h, cfg.mu_ground, cfg.mu_box, cfg.mu_furniture,
                       cfg.iterations, cfg.baumgarte, cfg.slop, cfg.skin, cfg.oneway_depth, tau)
        world.time += h
        if not ok:
            raise SimulationFault(f"simulation diverged at t={world.time:.4f}s", world.snapshot())
    if has_box:
        box = world.box
        box.position = bq[:2].copy()
        box.angle = float(bq[2])
        world.box_vel = bqd
    world.last_torque = tau
    return world


def nonextremity_points(world: World) -> np.ndarray:
    """Joint frames that count for ground-proximity termination: every link origin plus
    the distal end of each link not flagged as hand/foot."""
    body = world.body
    frames = link_frames(body, world.q)
    pts = [frames[0][k] for k in range(body.n_links)]
    for k in range(body.n_links):
        if not body.extremity[k]:
            tip = body.head[1] if k == 0 else (0.0, -body.length[k])
            pts.append(point_world(frames, k, tip))
    return np.array(pts)


def lowest_nonextremity_height(world: World) -> float:
    return float(np.min(nonextremity_points(world)[:, 1]))


def _link_index(body: BodyDef, body_id):
    if isinstance(body_id, (int, np.integer)):
        if 0 <= body_id < body.n_links:
            return int(body_id)
    elif body_id in body.link_names:
        return body.link_names.index(body_id)
    raise KeyError(f"unknown body id {body_id!r}")


def apply_impulse(world: World, body_id, impulse, point) -> World:
    """Instantaneous impulse (N s) at a world point on a character link or on the box."""
    p = np.asarray(impulse, dtype=np.float64)
    pt = np.asarray(point, dtype=np.float64)
    if body_id == "box":
        box = world.box
        if box is None:
            raise KeyError("world has no box")
        r = pt - box.position
        world.box_vel = world.box_vel + np.array(
            [p[0] / box.mass, p[1] / box.mass, (r[0] * p[1] - r[1] * p[0]) / box.inertia])
        return world
    k = _link_index(world.body, body_id)
    if not np.any(p):
        return world
    a = world.body.arrays()
    dqd = K.character_impulse(world.q, world.qd, a["parent"], a["joint_off"], a["com"],
                              a["mass"], a["inertia"], a["anc"], k,
                              float(pt[0]), float(pt[1]), float(p[0]), float(p[1]))
    world.qd = world.qd + dqd
    return world


def character_com(world_or_body, q=None, qd=None):
    """Whole-body centre of mass position and velocity."""
    if isinstance(world_or_body, World):
        body, q, qd = world_or_body.body, world_or_body.q, world_or_body.qd
    else:
        body = world_or_body
    frames = link_frames(body, q, qd)
    total = sum(body.mass)
    pos = sum(m * point_world(frames, k, body.com[k]) for k, m in enumerate(body.mass)) / total
    vel = sum(m * point_velocity(frames, k, body.com[k]) for k, m in enumerate(body.mass)) / total
    return pos, vel


def kinetic_energy(world: World) -> float:
    body = world.body
    frames = link_frames(body, world.q, world.qd)
    e = 0.0
    for k, m in enumerate(body.mass):
        v = point_velocity(frames, k, body.com[k])
        e += 0.5 * m * float(v @ v) + 0.5 * body.inertia[k] * frames[3][k] ** 2
    box = world.box
    if box is not None:
        e += 0.5 * box.mass * float(world.box_vel[:2] @ world.box_vel[:2])
        e += 0.5 * box.inertia * world.box_vel[2] ** 2
    return e


def potential_energy(world: World) -> float:
    body = world.body
    frames = link_frames(body, world.q)
    g = world.gravity
    e = sum(m * g * point_world(frames, k, body.com[k])[1] for k, m in enumerate(body.mass))
    box = world.box
    if box is not None:
        e += box.mass * g * box.position[1]
    return float(e)


# ---------------------------------------------------------------------------
# files


def save_body(path, body: BodyDef) -> None:
    Path(path).write_text(yaml.safe_dump(_plain(body.to_dict()), sort_keys=False))


def load_body(path) -> BodyDef:
    return BodyDef.from_dict(yaml.safe_load(Path(path).read_text()))


def save_scene(path, objects) -> None:
    doc = {"objects": [o.to_dict() for o in objects]}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def load_scene(path) -> list[SceneObject]:
    doc = yaml.safe_load(Path(path).read_text())
    return [SceneObject.from_dict(d) for d in doc["objects"]]


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x
