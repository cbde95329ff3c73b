"""Reference clips, the transition dataset the discriminator trains on, and reference
state initialization.

Clip files are JSON lines: a header record followed by one record per frame.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .obs import full_obs, layout_hash, observation_layout
from .physics import BodyDef, CharacterState, SceneObject, default_body
from .synthetic import SynthParams, generate_synthetic

CLIP_FORMAT = "sceneamp-clip"
CLIP_VERSION = 1
CLIP_TASKS = ("sit", "lie", "carry", "locomotion", "idle")
POLICY_FPS = 30.0
VELOCITY_TOLERANCE = 0.10

__all__ = ["MotionClip", "MotionDataset", "Transition", "InitState", "load_clips", "load_clip",
           "save_clip", "save_clips", "sample_transition", "sample_init", "generate_synthetic",
           "SynthParams", "generate_dataset"]


class ClipError(ValueError):
    pass


@dataclass
class MotionClip:
    fps: float
    q: np.ndarray              # (N, 3 + J) root x, y, pitch, joints
    qd: np.ndarray             # (N, 3 + J)
    object_pose: np.ndarray    # (N, 3) x, y, angle
    task: str
    object: SceneObject        # extents, density and anchors of the clip's object
    meta: dict = field(default_factory=dict)
    check_velocity: bool = True

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.qd = np.asarray(self.qd, dtype=np.float64)
        self.object_pose = np.asarray(self.object_pose, dtype=np.float64)
        self.validate()

    @property
    def n_frames(self) -> int:
        return len(self.q)

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) / self.fps

    def validate(self) -> None:
        if self.task not in CLIP_TASKS:
            raise ClipError(f"unknown task tag {self.task!r}")
        if not self.fps > 0:
            raise ClipError("frame rate must be positive")
        if self.q.ndim != 2 or self.n_frames < 2:
            raise ClipError("clip needs at least 2 frames")
        if self.qd.shape != self.q.shape or self.object_pose.shape != (self.n_frames, 3):
            raise ClipError("inconsistent frame dimensions")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qd))
                and np.all(np.isfinite(self.object_pose))):
            raise ClipError("non-finite frame values")
        if self.check_velocity:
            bad = velocity_mismatch(self)
            if bad is not None:
                raise ClipError(f"velocities inconsistent with positions at frame {bad}")

    def state(self, i: int) -> CharacterState:
        return CharacterState.from_q(self.q[i], self.qd[i])

    def object_at(self, i: int) -> SceneObject:
        obj = self.object.copy()
        shift = self.object_pose[i, :2] - obj.position
        obj.position = self.object_pose[i, :2].copy()
        obj.angle = float(self.object_pose[i, 2])
        if obj.sit_anchor is not None:
            obj.sit_anchor = obj.sit_anchor + shift
        return obj


def velocity_mismatch(clip: MotionClip, tol: float = VELOCITY_TOLERANCE, floor: float = 1.0):
    """First frame whose trapezoidal velocity disagrees with the position difference by
    more than `tol` relative, or None. Speeds below `floor` are compared against it."""
    fd = np.diff(clip.q, axis=0) * clip.fps
    avg = 0.5 * (clip.qd[1:] + clip.qd[:-1])
    err = np.linalg.norm(avg - fd, axis=1)
    limit = tol * np.maximum(np.linalg.norm(fd, axis=1), floor)
    bad = np.nonzero(err > limit)[0]
    return int(bad[0]) if len(bad) else None


# ---------------------------------------------------------------------------
# files


def _header(clip: MotionClip) -> dict:
    return {"format": CLIP_FORMAT, "version": CLIP_VERSION, "fps": clip.fps, "task": clip.task,
            "body_hash": clip.meta.get("body_hash"), "object": clip.object.to_dict(),
            "meta": clip.meta, "check_velocity": clip.check_velocity}


def save_clip(path, clip: MotionClip) -> None:
    lines = [json.dumps(_header(clip))]
    for q, qd, o in zip(clip.q, clip.qd, clip.object_pose):
        lines.append(json.dumps({"q": q.tolist(), "qd": qd.tolist(), "obj": o.tolist()}))
    Path(path).write_text("\n".join(lines) + "\n")


def load_clip(path) -> MotionClip:
    path = Path(path)
    rows = path.read_text().splitlines()
    if not rows:
        raise ClipError(f"{path}: empty clip file")
    try:
        head = json.loads(rows[0])
        if head.get("format") != CLIP_FORMAT:
            raise ClipError(f"{path}: not a clip file")
        if head.get("version") != CLIP_VERSION:
            raise ClipError(f"{path}: unsupported clip version {head.get('version')}")
        q, qd, obj = [], [], []
        for n, line in enumerate(rows[1:], start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            q.append(rec["q"])
            qd.append(rec["qd"])
            obj.append(rec["obj"])
        if len({len(r) for r in q} | {len(r) for r in qd}) > 1:
            raise ClipError(f"{path}: inconsistent frame dimensions")
        return MotionClip(float(head["fps"]), np.array(q, dtype=np.float64),
                          np.array(qd, dtype=np.float64), np.array(obj, dtype=np.float64),
                          head["task"], SceneObject.from_dict(head["object"]),
                          head.get("meta", {}), head.get("check_velocity", True))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ClipError(f"{path}: malformed frame ({e})") from e
    except ClipError as e:
        if str(e).startswith(str(path)):
            raise
        raise ClipError(f"{path}: {e}") from e


def save_clips(directory, clips, prefix="clip") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, clip in enumerate(clips):
        p = directory / f"{prefix}_{i:03d}_{clip.task}.jsonl"
        save_clip(p, clip)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Transition:
    obs: np.ndarray
    obs_next: np.ndarray
    layout: str = ""

    def __post_init__(self):
        if self.obs.shape != self.obs_next.shape:
            raise ValueError("transition observations differ in length")

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.obs, self.obs_next])


@dataclass
class InitState:
    state: CharacterState
    object_pose: np.ndarray
    clip: int
    frame: int


class MotionDataset:
    """Immutable set of clips with precomputed policy-rate transition features."""

    def __init__(self, clips, body: BodyDef | None = None, policy_fps: float = POLICY_FPS):
        clips = list(clips)
        if not clips:
            raise ClipError("empty dataset")
        self.clips = clips
        self.body = body or default_body()
        self.policy_fps = policy_fps
        self.layout = layout_hash(observation_layout(self.body))
        lo = np.array(self.body.joint_lower)
        hi = np.array(self.body.joint_upper)
        obs_t, obs_n, owners, starts = [], [], [], []
        self.strides = []
        for ci, clip in enumerate(clips):
            if clip.q.shape[1] != 3 + self.body.n_joints:
                raise ClipError(f"clip {ci}: frames have {clip.q.shape[1]} dofs, body has "
                                f"{3 + self.body.n_joints}")
            stride = int(round(clip.fps / policy_fps))
            if stride < 1 or abs(clip.fps / stride - policy_fps) > 1e-6:
                raise ClipError(f"clip {ci}: {clip.fps} Hz does not subsample to {policy_fps} Hz")
            self.strides.append(stride)
            feats = np.array([self._frame_obs(clip, i, lo, hi) for i in range(clip.n_frames)])
            n = clip.n_frames - stride
            if n < 1:
                raise ClipError(f"clip {ci}: too short for one transition")
            obs_t.append(feats[:n])
            obs_n.append(feats[stride:stride + n])
            owners.append(np.full(n, ci))
            starts.append(np.arange(n))
        self.obs = np.concatenate(obs_t)
        self.obs_next = np.concatenate(obs_n)
        self.transition_clip = np.concatenate(owners)
        self.transition_frame = np.concatenate(starts)
        frame_counts = np.array([c.n_frames for c in clips])
        self._frame_offsets = np.concatenate([[0], np.cumsum(frame_counts)])

    def _frame_obs(self, clip, i, lo, hi):
        q = clip.q[i].copy()
        q[3:] = np.clip(q[3:], lo, hi)
        st = CharacterState.from_q(q, clip.qd[i])
        return full_obs(self.body, st, clip.object_pose[i, :2], clip.object_pose[i, 2])

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def n_transitions(self) -> int:
        return len(self.obs)

    @property
    def n_frames(self) -> int:
        return int(self._frame_offsets[-1])

    def transition_counts(self) -> np.ndarray:
        return np.bincount(self.transition_clip, minlength=len(self.clips))

    def sample_batch(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, len(self.obs), size=n)
        return self.obs[idx], self.obs_next[idx]

    def features(self) -> np.ndarray:
        return np.concatenate([self.obs, self.obs_next], axis=1)

    def clips_for(self, task: str) -> list[int]:
        return [i for i, c in enumerate(self.clips) if c.task == task]


def load_clips(path, body: BodyDef | None = None) -> MotionDataset:
    """Dataset from a clip file, a directory of clip files, or a list of paths."""
    if isinstance(path, (list, tuple)):
        files = [Path(p) for p in path]
    else:
        path = Path(path)
        if path.is_dir():
            files = sorted(path.glob("*.jsonl"))
        elif path.exists():
            files = [path]
        else:
            raise FileNotFoundError(f"clip path not found: {path}")
    if not files:
        raise ClipError("empty dataset")
    return MotionDataset([load_clip(f) for f in files], body)


def sample_transition(dataset: MotionDataset, rng: np.random.Generator) -> Transition:
    """Uniform over all transitions, i.e. clips weighted by their transition count."""
    i = int(rng.integers(0, len(dataset)))
    return Transition(dataset.obs[i].copy(), dataset.obs_next[i].copy(), dataset.layout)


def sample_init(dataset: MotionDataset, rng: np.random.Generator, clips=None,
                frame_filter=None) -> InitState:
    """Uniformly sampled reference frame, projected onto the joint limits. `clips`
    restricts the draw to those clip indices; `frame_filter(clip, i)` rejects frames."""
    candidates = list(range(len(dataset.clips))) if clips is None else list(clips)
    if not candidates:
        raise ClipError("no clips to initialize from")
    counts = np.array([dataset.clips[c].n_frames for c in candidates], dtype=np.float64)
    lo = np.array(dataset.body.joint_lower)
    hi = np.array(dataset.body.joint_upper)
    for _ in range(1000):
        c = candidates[int(rng.choice(len(candidates), p=counts / counts.sum()))]
        clip = dataset.clips[c]
        i = int(rng.integers(0, clip.n_frames))
        if frame_filter is not None and not frame_filter(clip, i):
            continue
        q = clip.q[i].copy()
        q[3:] = np.clip(q[3:], lo, hi)
        return InitState(CharacterState.from_q(q, clip.qd[i]), clip.object_pose[i].copy(), c, i)
    raise ClipError("frame filter rejected every sampled frame")


def generate_dataset(task: str, n_clips: int, rng: np.random.Generator,
                     params: SynthParams | None = None, body: BodyDef | None = None):
    return [generate_synthetic(task, params, rng, body) for _ in range(n_clips)]
