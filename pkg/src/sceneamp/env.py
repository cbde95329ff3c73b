"""Single-character task environment used by training and evaluation.

One policy step is 1/30 s: the PD targets are held for four 120 Hz physics
substeps. Observations are the 34-feature vector shared with the
discriminator; goal features are returned separately.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tasks as T
from .motiondata import MotionDataset, sample_init
from .obs import GoalConfig, full_obs, goal_features
from .physics import BodyDef, PhysicsConfig, SceneObject, make_world, rest_state, step

POLICY_DT = 1.0 / 30.0


@dataclass
class InitConfig:
    """How episodes start during training."""
    rest_prob: float = 0.2          # canonical rest pose with a fresh random scene
    random_scene_prob: float = 0.5  # pre-contact reference frames get a fresh scene
    precontact_distance: float = 1.0


@dataclass
class StepResult:
    obs: np.ndarray
    goal: np.ndarray
    task_reward: float
    termination: T.Termination
    success: bool
    prev_obs: np.ndarray


class TaskEnv:
    def __init__(self, body: BodyDef, spec: T.TaskSpec, goal: GoalConfig | None = None,
                 dataset: MotionDataset | None = None, init: InitConfig | None = None,
                 physics: PhysicsConfig | None = None, rng: np.random.Generator | None = None):
        self.body = body
        self.spec = spec
        self.task = spec.kind
        self.goal_config = goal or GoalConfig()
        self.dataset = dataset
        self.init = init or InitConfig()
        self.physics = physics or PhysicsConfig()
        self.rng = rng if rng is not None else np.random.default_rng()
        self._task_clips = [] if dataset is None else dataset.clips_for(self.task)
        self.world = None
        self.ctx = None
        self.flags = T.EpisodeFlags()
        self.t = 0.0
        self.steps = 0
        self.horizon = spec.episode_length
        self.init_info = {}
        self._obs = None

    # -- episode setup -------------------------------------------------------
    def _build(self, state, ctx: T.TaskContext, box_vel=None):
        self.ctx = ctx
        self.world = make_world(self.body, state, ctx.objects, self.physics)
        if box_vel is not None and self.world.box is not None:
            self.world.box_vel = np.asarray(box_vel, dtype=np.float64).copy()
        self.flags = T.EpisodeFlags()
        T.update_flags(self.spec, self.world, self.flags)
        self.t = 0.0
        self.steps = 0
        self._obs = self._observe()

    def reset_scene(self, ctx: T.TaskContext, state=None, horizon=None):
        """Start from `state` (rest pose by default) in the given scene."""
        state = state if state is not None else rest_state(self.body)
        self.horizon = self.spec.episode_length if horizon is None else horizon
        self.init_info = {"mode": "scene"}
        self._build(state, ctx)
        return self._obs, self.goal()

    def reset(self):
        """Training reset: reference-state initialization or rest pose, randomized scene."""
        self.horizon = self.spec.episode_length
        use_clip = self._task_clips and self.rng.random() >= self.init.rest_prob
        if not use_clip:
            ctx = T.randomize_scene(self.task, self.rng, self.spec, 0.0)
            self.init_info = {"mode": "rest"}
            self._build(rest_state(self.body), ctx)
            return self._obs, self.goal()
        init = sample_init(self.dataset, self.rng, clips=self._task_clips)
        clip = self.dataset.clips[init.clip]
        state = init.state
        ahead = init.object_pose[0] - state.root_pos[0]
        box_vel = None
        if (ahead > self.init.precontact_distance
                and self.rng.random() < self.init.random_scene_prob):
            ctx = T.randomize_scene(self.task, self.rng, self.spec, float(state.root_pos[0]))
            mode = "clip+scene"
        else:
            ctx = clip_context(clip, init.frame, self.spec)
            if self.task == "carry":
                box_vel = clip_object_velocity(clip, init.frame)
            mode = "clip"
        self.init_info = {"mode": mode, "clip": init.clip, "frame": init.frame}
        self._build(state, ctx, box_vel)
        return self._obs, self.goal()

    # -- observation ---------------------------------------------------------
    def _observe(self) -> np.ndarray:
        obj = self.ctx.object
        return full_obs(self.body, self.world.character, obj.position, obj.angle)

    def goal(self) -> np.ndarray:
        return goal_features(self.task, self.world.character, self.ctx.object,
                             self.ctx.carry_target, self.goal_config)

    @property
    def obs(self) -> np.ndarray:
        return self._obs

    def kinematics(self) -> T.TaskKinematics:
        return T.task_kinematics(self.world)

    # -- stepping ------------------------------------------------------------
    def step(self, pd_targets) -> StepResult:
        prev = self._obs
        step(self.world, pd_targets, dt=POLICY_DT, substeps=self.physics.substeps)
        self.steps += 1
        self.t = self.steps * POLICY_DT
        T.update_flags(self.spec, self.world, self.flags)
        kin = self.kinematics()
        r = T.task_reward(kin, self.ctx)
        ok = T.success(self.spec, kin, self.ctx)
        term = T.should_terminate(self.spec, self.world, self.t, self.flags, self.horizon)
        self._obs = self._observe()
        return StepResult(self._obs, self.goal(), r, term, ok, prev)


def clip_object_velocity(clip, i: int) -> np.ndarray:
    dt = 1.0 / clip.fps
    lo, hi = max(i - 1, 0), min(i + 1, clip.n_frames - 1)
    if hi == lo:
        return np.zeros(3)
    return (clip.object_pose[hi] - clip.object_pose[lo]) / ((hi - lo) * dt)


def clip_context(clip, i: int, spec: T.TaskSpec) -> T.TaskContext:
    """Scene matching the reference clip at frame i."""
    obj = clip.object_at(i)
    if clip.task == "carry":
        target = np.asarray(clip.meta["carry_target"], dtype=np.float64)
        depth = T.pedestal_depth(obj)
        height = target[1] - 0.5 * obj.height
        extras = [T.make_platform(x, height, depth) for x in clip.meta["platform_xs"]]
        return T.TaskContext("carry", obj, extras, target, spec.walk_speed, spec.carry_speed)
    return T.TaskContext(clip.task, obj, walk_speed=spec.walk_speed, carry_speed=spec.carry_speed)
