"""Evaluation harness: seeded trials from a rest pose in a randomized scene,
projectile perturbations, and trajectory export.

A controller is any callable `controller(env) -> pd_targets`. `PolicyController`
wraps a trained agent and always takes the mean action.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tasks as T
from .env import POLICY_DT, TaskEnv
from .motiondata import MotionClip, save_clip
from .obs import GoalConfig, goal_layout, layout_hash, observation_layout
from .physics import BodyDef, PhysicsConfig, apply_impulse, link_frames, point_world

METRICS_HEADER = ["task", "n_trials", "success_rate", "execution_time", "precision_cm",
                  "fall", "box_drop", "timeout"]
CSV_HEADER = ["step", "time", "root_x", "root_y", "box_x", "box_y", "target_x", "target_y",
              "event"]
TRIAL_HEADER = ["trial", "success", "termination", "time", "precision_cm", "distance", "scale",
                "hits"]


@dataclass
class EvalMetrics:
    task: str
    n_trials: int
    success_rate: float                 # percent
    execution_time: float | None        # s, mean over successes
    precision_cm: float | None          # cm, mean over successes
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 100.0:
            raise ValueError("success rate must lie in [0, 100]")

    def row(self) -> list[str]:
        def fmt(v):
            return "n/a" if v is None else f"{v:.6f}"
        return [self.task, str(self.n_trials), f"{self.success_rate:.6f}", fmt(self.execution_time),
                fmt(self.precision_cm), str(self.failures.get("fall", 0)),
                str(self.failures.get("box_drop", 0)), str(self.failures.get("timeout", 0))]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrialResult:
    trial: int
    success: bool
    termination: str          # "success", "fall", "box_drop" or "timeout"
    time: float
    precision_cm: float | None
    distance: float
    scale: float
    hits: int = 0


@dataclass
class DisplacementEvent:
    time: float
    offset: tuple[float, float]     # object translation applied at `time`


@dataclass
class PerturbConfig:
    count: int = 20
    mass: float = 1.2
    speed: float = 8.0
    jitter_deg: float = 20.0
    target_link: str = "torso"
    displacements: list = field(default_factory=list)

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("projectile count must be non-negative")
        if self.mass < 0 or self.speed < 0:
            raise ValueError("projectile mass and speed must be non-negative")
        self.displacements = [d if isinstance(d, DisplacementEvent)
                              else DisplacementEvent(float(d["time"]), tuple(d["offset"]))
                              for d in self.displacements]


@dataclass
class Hit:
    step: int
    impulse: np.ndarray
    link: str = "torso"


def perturbation_schedule(cfg: PerturbConfig, horizon_steps: int, rng: np.random.Generator):
    """Hit steps drawn uniformly over the episode, each with a jittered horizontal
    impulse of magnitude mass * speed coming from a random side."""
    steps = np.sort(rng.integers(0, horizon_steps, size=cfg.count))
    hits = []
    for s in steps:
        side = 1.0 if rng.random() < 0.5 else -1.0
        jitter = math.radians(cfg.jitter_deg) * rng.uniform(-1.0, 1.0)
        direction = np.array([side * math.cos(jitter), math.sin(jitter)])
        hits.append(Hit(int(s), cfg.mass * cfg.speed * direction, cfg.target_link))
    return hits


class PolicyController:
    def __init__(self, agent):
        self.agent = agent

    def __call__(self, env: TaskEnv):
        return self.agent.pd_targets(self.agent.mean_action(env.obs, env.goal()))


def stand_still(env: TaskEnv):
    return np.zeros(env.body.n_joints)


def check_agent(agent, body: BodyDef, task: str, goal: GoalConfig):
    agent.check(layout_hash(observation_layout(body)),
                layout_hash(goal_layout(task, goal.bbox, goal.density)))


def _link_com(world, link: str):
    k = world.body.link_names.index(link)
    frames = link_frames(world.body, world.q)
    return point_world(frames, k, world.body.com[k])


def run_trial(env: TaskEnv, controller, ctx: T.TaskContext, trial: int, hits=(),
              displacements=(), recorder=None) -> TrialResult:
    spec = env.spec
    env.reset_scene(ctx, horizon=spec.timeout)
    distance = float(ctx.object.position[0] - env.world.q[0])
    pending = list(hits)
    moves = sorted(displacements, key=lambda d: d.time)
    applied = 0
    if recorder is not None:
        recorder.record(env)
    max_steps = int(round(spec.timeout / POLICY_DT))
    for n in range(max_steps):
        while pending and pending[0].step <= n:
            hit = pending.pop(0)
            apply_impulse(env.world, hit.link, hit.impulse, _link_com(env.world, hit.link))
            applied += 1
        while moves and moves[0].time <= n * POLICY_DT:
            displace_object(env, moves.pop(0).offset)
        res = env.step(controller(env))
        if recorder is not None:
            recorder.record(env)
        if res.success:
            prec = 100.0 * T.anchor_error(env.kinematics(), env.ctx)
            return TrialResult(trial, True, "success", env.t, prec, distance, ctx.scale, applied)
        if res.termination.done:
            return TrialResult(trial, False, res.termination.value, env.t, None, distance,
                               ctx.scale, applied)
    return TrialResult(trial, False, "timeout", env.t, None, distance, ctx.scale, applied)


def displace_object(env: TaskEnv, offset) -> None:
    """Teleport the task object (and its anchor) by `offset`."""
    off = np.asarray(offset, dtype=np.float64)
    obj = env.ctx.object
    obj.position = obj.position + off
    if obj.sit_anchor is not None:
        obj.sit_anchor = obj.sit_anchor + off
    env.world.invalidate()


def aggregate(task: str, trials: list[TrialResult]) -> EvalMetrics:
    n = len(trials)
    ok = [t for t in trials if t.success]
    failures = {"fall": 0, "box_drop": 0, "timeout": 0}
    for t in trials:
        if not t.success:
            failures[t.termination] = failures.get(t.termination, 0) + 1
    rate = 100.0 * len(ok) / n if n else 0.0
    exec_time = math.fsum(t.time for t in ok) / len(ok) if ok else None
    precision = math.fsum(t.precision_cm for t in ok) / len(ok) if ok else None
    return EvalMetrics(task, n, rate, exec_time, precision, failures)


def _trial_rngs(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def evaluate(controller, task: str, n_trials: int, seed: int, body: BodyDef,
             spec: T.TaskSpec | None = None, goal: GoalConfig | None = None,
             physics: PhysicsConfig | None = None, perturb: PerturbConfig | None = None,
             out_dir=None) -> tuple[EvalMetrics, list[TrialResult]]:
    """Seeded trials; each draws its own scene (and perturbation schedule)."""
    spec = spec or T.default_spec(task)
    if spec.kind != task:
        raise ValueError(f"task spec is for {spec.kind!r}, not {task!r}")
    env = TaskEnv(body, spec, goal, physics=physics)
    horizon_steps = int(round(spec.timeout / POLICY_DT))
    results = []
    for i, rng in enumerate(_trial_rngs(seed, n_trials)):
        scene_rng, hit_rng = (np.random.default_rng(s) for s in
                              np.random.SeedSequence(int(rng.integers(2 ** 63))).spawn(2))
        ctx = T.randomize_scene(task, scene_rng, spec, 0.0)
        hits, moves = (), ()
        if perturb is not None:
            hits = perturbation_schedule(perturb, horizon_steps, hit_rng)
            moves = perturb.displacements
        results.append(run_trial(env, controller, ctx, i, hits, moves))
    metrics = aggregate(task, results)
    if out_dir is not None:
        write_metrics(out_dir, metrics, results)
    return metrics, results


def perturb_evaluate(controller, task: str, cfg: PerturbConfig, n_trials: int, seed: int,
                     body: BodyDef, **kw):
    return evaluate(controller, task, n_trials, seed, body, perturb=cfg, **kw)


def write_metrics(out_dir, metrics: EvalMetrics, trials: list[TrialResult]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        w.writerow(metrics.row())
    with open(out / "trials.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRIAL_HEADER)
        for t in trials:
            w.writerow([t.trial, int(t.success), t.termination, f"{t.time:.6f}",
                        "n/a" if t.precision_cm is None else f"{t.precision_cm:.6f}",
                        f"{t.distance:.6f}", f"{t.scale:.6f}", t.hits])


# ---------------------------------------------------------------------------
# trajectory export


class Recorder:
    def __init__(self):
        self.q, self.qd, self.obj, self.box = [], [], [], []
        self.events: list[tuple[int, str]] = []

    def record(self, env: TaskEnv) -> None:
        w = env.world
        self.q.append(w.q.copy())
        self.qd.append(w.qd.copy())
        o = env.ctx.object
        self.obj.append(np.array([o.position[0], o.position[1], o.angle]))
        box = w.box
        self.box.append(None if box is None else box.position.copy())

    def __len__(self) -> int:
        return len(self.q)


def export_trajectory(recorder: Recorder, env: TaskEnv, result: TrialResult, path) -> tuple:
    """Write the episode as a clip file plus a plot-ready CSV next to it. The CSV
    has one row per policy step holding the pre-step state; the first row carries
    the start and target annotations, the last the outcome.

    Exported clips skip the velocity consistency check: simulated velocities at
    contact events are not trapezoid-consistent with positions."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ctx = env.ctx
    goal_pos = ctx.carry_target if ctx.carry_target is not None else ctx.goal_position
    meta = {"source": "rollout", "termination": result.termination, "success": result.success,
            "goal": [float(v) for v in goal_pos], "body_hash": env.body.hash()}
    if ctx.carry_target is not None:
        meta["carry_target"] = [float(v) for v in ctx.carry_target]
        meta["platform_xs"] = [float(o.position[0]) for o in ctx.extras]
    clip = MotionClip(1.0 / POLICY_DT, np.array(recorder.q), np.array(recorder.qd),
                      np.array(recorder.obj), ctx.task, ctx.object, meta, check_velocity=False)
    save_clip(path, clip)
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        n_steps = max(len(recorder) - 1, 1)
        for i in range(n_steps):
            q, box = recorder.q[i], recorder.box[i]
            events = ["start", "target"] if i == 0 else []
            if i == n_steps - 1:
                events.append(result.termination)
            w.writerow([i, f"{i * POLICY_DT:.6f}", f"{q[0]:.6f}", f"{q[1]:.6f}",
                        "" if box is None else f"{box[0]:.6f}",
                        "" if box is None else f"{box[1]:.6f}",
                        f"{goal_pos[0]:.6f}" if i == 0 else "",
                        f"{goal_pos[1]:.6f}" if i == 0 else "", ";".join(events)])
    return path, csv_path


def record_episode(controller, task: str, seed: int, body: BodyDef, path,
                   spec: T.TaskSpec | None = None, goal: GoalConfig | None = None,
                   max_steps: int | None = None):
    """Run one seeded trial and export it."""
    spec = spec or T.default_spec(task)
    if max_steps is not None:
        spec = T.TaskSpec.from_dict({**spec.to_dict(), "timeout": max_steps * POLICY_DT})
    env = TaskEnv(body, spec, goal)
    rng = _trial_rngs(seed, 1)[0]
    scene_rng = np.random.default_rng(np.random.SeedSequence(int(rng.integers(2 ** 63))).spawn(2)[0])
    ctx = T.randomize_scene(task, scene_rng, spec, 0.0)
    rec = Recorder()
    result = run_trial(env, controller, ctx, 0, recorder=rec)
    return export_trajectory(rec, env, result, path), result
