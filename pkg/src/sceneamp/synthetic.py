"""Kinematically scripted reference clips: walk cycle, approach, then the task phase.

Walking pins the stance foot's lowest contact point so the root advances without
foot skate; the stride amplitude is solved by bisection so the walk covers the
requested distance exactly. Task phases blend root, torso and arm key poses
while both ankles stay planted via two-link leg IK.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .physics import BodyDef, SceneObject, default_body, link_frames, point_world, rest_state
from . import tasks as T

SHOULDER, ELBOW, HIP_A, KNEE_A, HIP_B, KNEE_B = range(6)


@dataclass
class SynthParams:
    fps: float = 120.0                       # authoring rate; transitions subsample to 30 Hz
    distance: float | None = None            # root start to object centre; sampled if None
    distance_range: tuple[float, float] = (1.0, 4.0)
    scale: float | None = None
    scale_range: tuple[float, float] | None = None   # task default if None
    target_distance: float | None = None     # carry: box start to target
    target_range: tuple[float, float] = (1.5, 3.5)
    step_time: float = 0.5
    ramp_steps: float = 1.5
    hold_time: float = 2.0
    start_x: float = 0.0
    platform_height: float = 0.75
    box_density: float = 60.0
    smoothing: float = 0.02                  # s, Gaussian sigma applied to the trajectory


def _smooth(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


class _Kin:
    """Forward kinematics helpers bound to one body."""

    def __init__(self, body: BodyDef):
        self.body = body
        self.foot_spheres = [s for s in body.spheres
                             if s.link in (body.feet[0][0], body.feet[1][0])
                             and s.local[1] < -0.4]
        self.thigh = body.length[3]
        self.shin = body.length[4]
        self.upper = body.length[1]
        self.fore = -body.hand[1][1]
        self.shoulder = np.array(body.joint_offset[1])

    def frames(self, q):
        return link_frames(self.body, q)

    def foot_points(self, q):
        """(link, world x, bottom y) for every foot sphere."""
        f = self.frames(q)
        out = []
        for s in self.foot_spheres:
            p = point_world(f, s.link, s.local)
            out.append((s.link, p[0], p[1] - s.radius))
        return out

    def lowest_foot(self, q) -> float:
        return min(p[2] for p in self.foot_points(q))

    def ankle(self, q, leg: int):
        link = self.body.feet[leg][0]
        return point_world(self.frames(q), link, self.body.feet[leg][1])


def _two_link(rx, ry, l1, l2, bend_ccw: bool):
    """Absolute angles (from straight down, ccw) of both links reaching vector (rx, ry)."""
    L = np.hypot(rx, ry)
    L = np.clip(L, abs(l1 - l2) + 1e-6, l1 + l2 - 1e-6)
    alpha = np.arctan2(rx, -ry)
    beta = np.arccos(np.clip((l1 * l1 + L * L - l2 * l2) / (2 * l1 * L), -1.0, 1.0))
    a1 = alpha + beta if bend_ccw else alpha - beta
    ex, ey = l1 * np.sin(a1), -l1 * np.cos(a1)
    a2 = np.arctan2(rx - ex, -(ry - ey)) if np.hypot(rx, ry) > 1e-9 else a1
    return a1, a2


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


class ClipScript:
    """Accumulates frames; object poses come from a per-frame callback."""

    def __init__(self, body: BodyDef, fps: float, q0: np.ndarray, obj_pose):
        self.kin = _Kin(body)
        self.body = body
        self.fps = fps
        self.qs = [np.asarray(q0, dtype=np.float64).copy()]
        self.objs = [np.asarray(obj_pose(self.qs[0]), dtype=np.float64)]
        self.obj_pose = obj_pose

    @property
    def q(self):
        return self.qs[-1]

    def push(self, q):
        q = np.asarray(q, dtype=np.float64).copy()
        self.qs.append(q)
        self.objs.append(np.asarray(self.obj_pose(q), dtype=np.float64))

    def n_frames(self, duration):
        return max(1, int(round(duration * self.fps)))

    # -- legs --------------------------------------------------------------
    def leg_ik(self, q, ankle):
        """Set both legs so the ankles sit at the world point `ankle`."""
        q = q.copy()
        a1, a2 = _two_link(ankle[0] - q[0], ankle[1] - q[1], self.kin.thigh, self.kin.shin,
                           bend_ccw=True)
        for hip, knee in ((HIP_A, KNEE_A), (HIP_B, KNEE_B)):
            q[3 + hip] = a1 - q[2]
            q[3 + knee] = _wrap(a2 - a1)
        return q

    # -- segments ----------------------------------------------------------
    def hold(self, duration, breathe=0.0):
        base = self.q.copy()
        n = self.n_frames(duration)
        for i in range(1, n + 1):
            q = base.copy()
            q[2] += breathe * np.sin(2 * np.pi * i / self.fps / 2.5)
            self.push(q)

    def blend(self, target, duration, ankle=None, joints=None):
        """Smoothstep from the current pose to `target` (full q). With `ankle`, leg angles
        come from IK instead of interpolation. `joints` restricts which joint entries
        are interpolated (others are held)."""
        start = self.q.copy()
        target = np.asarray(target, dtype=np.float64)
        n = self.n_frames(duration)
        for i in range(1, n + 1):
            u = _smooth(i / n)
            q = start + u * (target - start)
            if joints is not None:
                keep = np.ones(len(q), dtype=bool)
                keep[[3 + j for j in joints]] = False
                keep[:3] = False
                q[keep] = start[keep]
            if ankle is not None:
                q = self.leg_ik(q, ankle)
            self.push(q)

    def walk(self, distance, upper=None, lean=-0.06):
        """Walk forward by `distance` metres returning to a legs-together stance."""
        if not distance > 0:
            raise ValueError("walk distance must be positive")
        q0 = self.q.copy()
        upper = upper or (lambda phase, env: (-0.3 * env * np.sin(phase), -0.25 * env))
        n_steps = max(1, int(np.ceil(distance / 0.65)))
        for _ in range(8):
            lo, hi = 0.02, 0.75
            if self._walk_frames(q0, n_steps, hi, upper, lean)[-1][0] - q0[0] < distance:
                n_steps += 1
                continue
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if self._walk_frames(q0, n_steps, mid, upper, lean)[-1][0] - q0[0] < distance:
                    lo = mid
                else:
                    hi = mid
            frames = self._walk_frames(q0, n_steps, 0.5 * (lo + hi), upper, lean)
            for q in frames:
                self.push(q)
            return
        raise ValueError(f"cannot cover {distance} m with the gait model")

    def _walk_frames(self, q0, n_steps, amp, upper, lean):
        kin = self.kin
        nfr = max(2, int(round(n_steps * self.step_time * self.fps)))
        out = []
        prev = q0.copy()
        start_legs = q0[3 + HIP_A:].copy()
        bias = np.array([0.08, -0.16, 0.08, -0.16])   # slightly flexed stance
        for i in range(1, nfr + 1):
            s = n_steps * i / nfr
            phase = np.pi * s
            env = _smooth(min(s / self.ramp_steps, (n_steps - s) / 0.5))
            a = amp * env
            q = prev.copy()
            q[2] = lean * env
            gait = bias + np.array([
                a * np.sin(phase),
                -2.6 * a * max(0.0, np.cos(phase)) ** 2,
                -a * np.sin(phase),
                -2.6 * a * max(0.0, -np.cos(phase)) ** 2,
            ])
            w = _smooth(1.0 - s / 0.5) if s < 0.5 else 0.0
            q[3 + HIP_A:] = w * start_legs + (1.0 - w) * gait
            sh, el = upper(phase, env)
            q[3 + SHOULDER], q[3 + ELBOW] = sh, el
            # pin the lowest sphere of the stance foot (the leg whose hip is swinging back)
            q[0], q[1] = prev[0], prev[1]
            pts_new = kin.foot_points(q)
            pts_old = kin.foot_points(prev)
            stance = kin.body.feet[0 if np.cos(phase) < 0 else 1][0]
            ids = [k for k, p in enumerate(pts_new) if p[0] == stance]
            c = min(ids, key=lambda k: pts_new[k][2])
            q[0] = prev[0] - (pts_new[c][1] - pts_old[c][1])
            q[1] = prev[1] - min(p[2] for p in pts_new)
            out.append(q)
            prev = q
        return out

    step_time = 0.5
    ramp_steps = 1.5      # steps over which the stride grows from standing

    def arm_ik(self, hand_local):
        """(shoulder, elbow) placing the hand at a torso-local point, elbow above the reach."""
        s = self.kin.shoulder
        a1, a2 = _two_link(hand_local[0] - s[0], hand_local[1] - s[1],
                           self.kin.upper, self.kin.fore, bend_ccw=True)
        return float(a1), float(_wrap(a2 - a1))


# ---------------------------------------------------------------------------
# task scripts


def _rot(th, v):
    c, s = np.cos(th), np.sin(th)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _object_pose_static(obj):
    pose = np.array([obj.position[0], obj.position[1], obj.angle])
    return lambda q: pose


def _script_sit_like(kind, body, params, rng):
    scale = params.scale if params.scale is not None else rng.uniform(
        *(params.scale_range or (0.8, 1.2)))
    dist = params.distance if params.distance is not None else rng.uniform(*params.distance_range)
    if not dist > 0:
        raise ValueError("walk distance must be positive")
    x_obj = params.start_x + dist
    obj = T.make_seat(x_obj, scale) if kind == "sit" else T.make_bed(x_obj, scale)
    anchor = obj.sit_anchor
    if anchor[1] < 0:
        raise ValueError("anchor underground")
    script = ClipScript(body, params.fps, rest_state(body, params.start_x).q,
                        _object_pose_static(obj))
    script.step_time = params.step_time
    script.ramp_steps = params.ramp_steps
    script.hold(0.3)
    overshoot = 0.35 if kind == "sit" else 0.3
    script.walk(anchor[0] + overshoot - script.q[0])
    ankle = 0.5 * (script.kin.ankle(script.q, 0) + script.kin.ankle(script.q, 1))
    # lean forward while lowering the hips back onto the anchor
    mid = script.q.copy()
    mid[0] = 0.5 * (mid[0] + anchor[0])
    mid[1] = 0.5 * (mid[1] + anchor[1]) + 0.05
    mid[2] = -0.45
    mid[3 + SHOULDER], mid[3 + ELBOW] = 0.6, -0.4
    script.blend(mid, 0.7, ankle=ankle)
    seated = mid.copy()
    seated[0], seated[1], seated[2] = anchor[0], anchor[1], 0.0
    seated[3 + SHOULDER], seated[3 + ELBOW] = 0.35, -0.9
    script.blend(seated, 0.7, ankle=ankle)
    if kind == "sit":
        script.hold(params.hold_time, breathe=0.015)
        return script, obj, {}
    # recline: torso flat on the bed, legs straight along it
    lying = script.q.copy()
    lying[1] = anchor[1]
    lying[2] = 0.5 * np.pi
    lying[3 + SHOULDER], lying[3 + ELBOW] = 0.1, -0.2
    for hip, knee in ((HIP_A, KNEE_A), (HIP_B, KNEE_B)):
        lying[3 + hip] = 0.0
        lying[3 + knee] = 0.0
    start_y = script.q[1]
    n = script.n_frames(1.6)
    start = script.q.copy()
    for i in range(1, n + 1):
        u = _smooth(i / n)
        q = start + u * (lying - start)
        q[1] = start_y + (anchor[1] - start_y) * u
        script.push(q)
    script.hold(params.hold_time, breathe=0.0)
    return script, obj, {}


def _hug_geometry(kin: _Kin, box: SceneObject):
    """Torso-local box centre and hand point for a hook grip over the far face."""
    d, h = box.depth, box.height
    shoulder = kin.shoulder
    cx = 0.105 + 0.5 * d
    cy = min(shoulder[1] - 0.5 * h - 0.03, 0.30)
    far = 0.105 + d + 0.045
    hand_y = cy - 0.5 * h + 0.01
    reach = 0.97 * (kin.upper + kin.fore)
    dx = far - shoulder[0]
    min_y = shoulder[1] - np.sqrt(max(reach ** 2 - dx ** 2, 0.0))
    hand_y = max(hand_y, min_y)
    if np.hypot(dx, hand_y - shoulder[1]) > kin.upper + kin.fore:
        raise ValueError("box too large for the arm")
    return np.array([cx, cy]), np.array([far, hand_y])


def _reach_pose(box_center_world, center_local):
    """Squat with an upright torso so the box keeps its orientation when grasped."""
    return 0.0, np.asarray(box_center_world, dtype=np.float64) - center_local


def _script_carry(body, params, rng):
    scale = params.scale if params.scale is not None else rng.uniform(
        *(params.scale_range or (0.5, 1.5)))
    dist = params.distance if params.distance is not None else rng.uniform(*params.distance_range)
    if not dist > 0:
        raise ValueError("walk distance must be positive")
    tdist = (params.target_distance if params.target_distance is not None
             else rng.uniform(*params.target_range))
    spec = T.TaskSpec("carry", episode_length=15.0, scale_range=(0.5, 1.5),
                      platform_height=params.platform_height, box_density=params.box_density)
    box_x = params.start_x + dist
    ctx = T.carry_scene(box_x, box_x + tdist, scale, spec)
    box = ctx.object
    kin = _Kin(body)
    c_local, hand_local = _hug_geometry(kin, box)
    start_center = box.position.copy()
    target_center = ctx.carry_target.copy()

    state = {"attached": False, "pose": np.array([*start_center, 0.0])}

    def box_pose(q):
        if state["attached"]:
            p = q[:2] + _rot(q[2], c_local)
            state["pose"] = np.array([p[0], p[1], q[2]])
        return state["pose"].copy()

    script = ClipScript(body, params.fps, rest_state(body, params.start_x).q, box_pose)
    script.step_time = params.step_time
    script.ramp_steps = params.ramp_steps
    sh_h, el_h = script.arm_ik(hand_local)
    over = np.array([hand_local[0] + 0.02, c_local[1] + 0.5 * box.height + 0.12])
    sh_o, el_o = script.arm_ik(over)

    th_r, root_r = _reach_pose(start_center, c_local)
    script.hold(0.3)
    script.walk(root_r[0] + 0.05 - script.q[0])
    ankle = 0.5 * (script.kin.ankle(script.q, 0) + script.kin.ankle(script.q, 1))

    def pose(root, th, sh, el):
        q = script.q.copy()
        q[0], q[1], q[2] = root[0], root[1], th
        q[3 + SHOULDER], q[3 + ELBOW] = sh, el
        return q

    # raise the arm over the box, then hook down onto the far face
    hover = 0.5 * (script.q[:2] + root_r)
    script.blend(pose(hover, 0.5 * th_r, sh_o, el_o), 0.6, ankle=ankle)
    script.blend(pose(root_r, th_r, sh_o, el_o), 0.4, ankle=ankle)
    script.blend(pose(root_r, th_r, sh_h, el_h), 0.4, ankle=ankle)
    state["attached"] = True
    stand = np.array([ankle[0], ankle[1] + 0.97 * (kin.thigh + kin.shin)])
    script.blend(pose(stand, 0.0, sh_h, el_h), 0.9, ankle=ankle)
    # walk with the box held
    th_p, root_p = _reach_pose(target_center, c_local)
    script.walk(root_p[0] + 0.05 - script.q[0], upper=lambda ph, env: (sh_h, el_h), lean=0.0)
    ankle = 0.5 * (script.kin.ankle(script.q, 0) + script.kin.ankle(script.q, 1))
    script.blend(pose(root_p, th_p, sh_h, el_h), 0.9, ankle=ankle)
    # release exactly on the target
    state["attached"] = False
    state["pose"] = np.array([*target_center, 0.0])
    script.objs[-1] = state["pose"].copy()
    script.blend(pose(root_p, th_p, sh_o, el_o), 0.4, ankle=ankle)
    back = np.array([root_p[0] - 0.05, ankle[1] + 0.97 * (kin.thigh + kin.shin)])
    script.blend(pose(back, 0.0, 0.0, -0.25), 0.8, ankle=ankle)
    script.hold(0.5)
    meta = {"carry_target": target_center.tolist(), "box_start": start_center.tolist(),
            "platform_xs": [float(box_x), float(target_center[0])]}
    return script, box, meta


def generate_synthetic(task: str, params: SynthParams | None = None, rng=None,
                       body: BodyDef | None = None):
    """One scripted reference clip for `task` as a MotionClip."""
    from .motiondata import MotionClip

    params = params or SynthParams()
    rng = rng if rng is not None else np.random.default_rng()
    body = body or default_body()
    if task in ("sit", "lie"):
        script, obj, meta = _script_sit_like(task, body, params, rng)
    elif task == "carry":
        script, obj, meta = _script_carry(body, params, rng)
    else:
        raise ValueError(f"unsupported synthetic task {task!r}")
    q = np.array(script.qs)
    lo = np.array(body.joint_lower)
    hi = np.array(body.joint_upper)
    # a light low-pass removes the velocity kinks at gait-phase and segment switches
    q = gaussian_filter1d(q, sigma=params.smoothing * params.fps, axis=0, mode="nearest")
    q[:, 3:] = np.clip(q[:, 3:], lo, hi)
    qd = np.gradient(q, 1.0 / params.fps, axis=0)
    template = obj.copy()
    meta = dict(meta, body_hash=body.hash())
    return MotionClip(params.fps, q, qd, np.array(script.objs), task, template, meta)
