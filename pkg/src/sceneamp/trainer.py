"""On-policy training: rollouts with the combined task + style reward, GAE, clipped
policy-gradient updates and interleaved discriminator updates.

Single-worker collection is fully deterministic for a given seed. Metrics go to
an append-only CSV; with `deterministic=True` the wall_time column is written
as 0 and real timings land in a separate timing.csv.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import tasks as T
from .amp import DiscConfig, Discriminator, LayoutMismatch
from .env import InitConfig, TaskEnv
from .motiondata import MotionDataset, load_clips
from .numerics import (Checkpoint, NetParams, OptimState, RunningNorm, adam_like_step,
                       gaussian_logprob, gaussian_sample, init_mlp, load_checkpoint,
                       mlp_backward, mlp_forward, mlp_forward_cache, save_checkpoint)
from .obs import GoalConfig, goal_layout, layout_hash, observation_layout
from .physics import BodyDef, SimulationFault, default_body, load_body

log = logging.getLogger(__name__)

METRICS_HEADER = ["iteration", "env_steps", "mean_task_reward", "mean_style_reward",
                  "disc_loss", "disc_accuracy", "success_rate_eval", "wall_time"]
TERM_CODES = {T.Termination.CONTINUE: 0, T.Termination.FALL: 1, T.Termination.BOX_DROP: 2,
              T.Termination.TIMEOUT: 3}


# ---------------------------------------------------------------------------
# config


@dataclass
class TrainConfig:
    task: str = "sit"
    n_envs: int = 16
    horizon: int = 256
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 5
    minibatch: int = 1024
    lr_policy: float = 3e-4
    lr_value: float = 3e-4
    w_task: float = 0.5
    w_style: float = 0.5
    sigma: float = 0.3
    action_scale: float = 0.5      # PD offset per unit action, as a fraction of the joint range
    hidden: tuple[int, ...] = (256, 128)
    out_scale: float = 0.01
    kl_max: float = 0.05
    bound_weight: float = 10.0
    iterations: int = 100
    max_env_steps: int | None = None
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 25
    eval_every: int = 0
    eval_trials: int = 32
    bbox: bool = True
    density: bool = False
    disc: DiscConfig = field(default_factory=DiscConfig)
    init: InitConfig = field(default_factory=InitConfig)
    task_spec: dict = field(default_factory=dict)     # overrides for TaskSpec
    clips: str | None = None                          # clip directory
    body: str | None = None                           # body definition file
    synthetic_clips: int = 12                         # generated when `clips` is unset

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.n_envs < 1:
            raise ValueError("n_envs must be at least 1")
        if self.horizon < 1 or self.epochs < 1 or self.minibatch < 1:
            raise ValueError("horizon, epochs and minibatch must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if isinstance(self.disc, dict):
            self.disc = DiscConfig(**_tuplify(self.disc))
        if isinstance(self.init, dict):
            self.init = InitConfig(**self.init)
        self.hidden = tuple(self.hidden)

    def spec(self) -> T.TaskSpec:
        return T.TaskSpec.from_dict({"kind": self.task, **self.task_spec})

    def goal(self) -> GoalConfig:
        return GoalConfig(bbox=self.bbox, density=self.density)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["disc"]["hidden"] = list(self.disc.hidden)
        return d


def _tuplify(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_config(path, **overrides) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping")
    raw = raw.get("train", raw)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    base = path.parent
    for key in ("clips", "body"):
        if raw.get(key) and not Path(raw[key]).is_absolute():
            raw[key] = str((base / raw[key]).resolve())
    return TrainConfig(**raw)


# ---------------------------------------------------------------------------
# policy and value


@dataclass
class Agent:
    policy: NetParams
    value: NetParams
    norm: RunningNorm
    sigma: np.ndarray
    obs_layout: str
    goal_layout: str
    lower: np.ndarray          # joint limits
    upper: np.ndarray
    action_offset: np.ndarray  # PD target at zero action (the rest pose)
    action_scale: np.ndarray   # PD target change per unit action
    policy_opt: OptimState = None
    value_opt: OptimState = None

    def __post_init__(self):
        if self.policy_opt is None:
            self.policy_opt = OptimState.zeros(self.policy)
        if self.value_opt is None:
            self.value_opt = OptimState.zeros(self.value)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(self.sigma <= 0):
            raise ValueError("policy sigma must stay positive")
        if np.any(np.asarray(self.action_scale) <= 0):
            raise ValueError("action scale must be positive")

    @classmethod
    def create(cls, obs_dim, goal_dim, body: BodyDef, config: TrainConfig, rng,
               obs_layout="", goal_layout_hash=""):
        in_dim = obs_dim + goal_dim
        pol = init_mlp([in_dim, *config.hidden, body.n_joints], rng, config.out_scale)
        val = init_mlp([in_dim, *config.hidden, 1], rng, 1.0)
        norm = RunningNorm(np.zeros(in_dim), np.ones(in_dim), 0.0, 5.0)
        lower, upper = np.array(body.joint_lower), np.array(body.joint_upper)
        return cls(pol, val, norm, np.full(body.n_joints, config.sigma), obs_layout,
                   goal_layout_hash, lower, upper, np.zeros(body.n_joints),
                   config.action_scale * (upper - lower))

    @property
    def action_bounds(self):
        """Joint limits expressed in action units."""
        return ((self.lower - self.action_offset) / self.action_scale,
                (self.upper - self.action_offset) / self.action_scale)

    def pd_targets(self, action):
        return self.action_offset + self.action_scale * np.asarray(action)

    def inputs(self, obs, goal):
        return self.norm(np.concatenate([obs, goal], axis=-1))

    def mean_action(self, obs, goal):
        return mlp_forward(self.policy, self.inputs(obs, goal))

    def value_of(self, obs, goal):
        return mlp_forward(self.value, self.inputs(obs, goal))[..., 0]

    def act(self, obs, goal, rng, deterministic=False):
        x = self.inputs(obs, goal)
        mean = mlp_forward(self.policy, x)
        a = mean if deterministic else gaussian_sample(mean, self.sigma, rng)
        return a, gaussian_logprob(mean, self.sigma, a), mlp_forward(self.value, x)[..., 0]

    def check(self, obs_layout: str, goal_layout_hash: str) -> None:
        if obs_layout != self.obs_layout or goal_layout_hash != self.goal_layout:
            raise LayoutMismatch(
                f"checkpoint layout obs={self.obs_layout} goal={self.goal_layout} does not match "
                f"obs={obs_layout} goal={goal_layout_hash}")


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutBatch:
    obs: np.ndarray            # (T, E, D)
    goal: np.ndarray           # (T, E, G)
    next_obs: np.ndarray       # (T, E, D) observation after the step, before any reset
    action: np.ndarray         # (T, E, J)
    logp: np.ndarray           # (T, E)
    task_reward: np.ndarray    # (T, E)
    style_reward: np.ndarray   # (T, E)
    reward: np.ndarray         # (T, E)
    value: np.ndarray          # (T, E)
    done: np.ndarray           # (T, E) bool
    termination: np.ndarray    # (T, E) int codes, see TERM_CODES
    bootstrap: np.ndarray      # (T, E) value of the final observation for timeouts
    last_value: np.ndarray     # (E,)
    success: np.ndarray        # (T, E) bool
    w_task: float = 0.5
    w_style: float = 0.5

    def __post_init__(self):
        n = self.obs.shape[:2]
        for name in ("goal", "next_obs", "action", "logp", "task_reward", "style_reward",
                     "reward", "value", "done", "termination", "bootstrap", "success"):
            if getattr(self, name).shape[:2] != n:
                raise ValueError(f"rollout field {name} has mismatched length")

    @property
    def n_steps(self) -> int:
        return int(self.obs.shape[0] * self.obs.shape[1])

    def transitions(self) -> np.ndarray:
        """Discriminator features for every collected step."""
        d = self.obs.shape[-1]
        return np.concatenate([self.obs.reshape(-1, d), self.next_obs.reshape(-1, d)], axis=1)


def collect_rollouts(agent: Agent, disc: Discriminator | None, envs: list[TaskEnv],
                     config: TrainConfig, rng: np.random.Generator) -> RolloutBatch:
    """Step every env for `config.horizon` policy steps; terminated envs reset in place."""
    H, E = config.horizon, len(envs)
    obs = np.stack([e.obs for e in envs])
    goal = np.stack([e.goal() for e in envs])
    D, G, J = obs.shape[1], goal.shape[1], agent.sigma.shape[0]
    buf = {k: np.zeros((H, E) + s) for k, s in (
        ("obs", (D,)), ("goal", (G,)), ("next_obs", (D,)), ("action", (J,)), ("logp", ()),
        ("task_reward", ()), ("value", ()), ("bootstrap", ()))}
    done = np.zeros((H, E), dtype=bool)
    term = np.zeros((H, E), dtype=np.int64)
    succ = np.zeros((H, E), dtype=bool)
    for t in range(H):
        a, logp, v = agent.act(obs, goal, rng)
        buf["obs"][t], buf["goal"][t] = obs, goal
        buf["action"][t], buf["logp"][t], buf["value"][t] = a, logp, v
        timeout_rows = []
        for i, env in enumerate(envs):
            try:
                res = env.step(agent.pd_targets(a[i]))
            except SimulationFault as exc:
                raise SimulationFault(f"env {i}: {exc}", exc.snapshot) from exc
            buf["next_obs"][t, i] = res.obs
            buf["task_reward"][t, i] = res.task_reward
            succ[t, i] = res.success
            term[t, i] = TERM_CODES[res.termination]
            if res.termination.done:
                done[t, i] = True
                if res.termination is T.Termination.TIMEOUT:
                    timeout_rows.append((i, res.obs, res.goal))
                obs[i], goal[i] = env.reset()
            else:
                obs[i], goal[i] = res.obs, res.goal
        if timeout_rows:
            idx = [r[0] for r in timeout_rows]
            buf["bootstrap"][t, idx] = agent.value_of(np.stack([r[1] for r in timeout_rows]),
                                                      np.stack([r[2] for r in timeout_rows]))
    last_value = agent.value_of(obs, goal)
    batch_feats = np.concatenate([buf["obs"].reshape(-1, D), buf["next_obs"].reshape(-1, D)], 1)
    if disc is not None and config.w_style != 0.0:
        style = disc.reward(batch_feats).reshape(H, E)
    else:
        style = np.zeros((H, E))
    reward = config.w_task * buf["task_reward"] + config.w_style * style
    return RolloutBatch(buf["obs"], buf["goal"], buf["next_obs"], buf["action"], buf["logp"],
                        buf["task_reward"], style, reward, buf["value"], done, term,
                        buf["bootstrap"], last_value, succ, config.w_task, config.w_style)


def gae_advantages(batch: RolloutBatch, gamma: float, lam: float):
    """Generalized advantage estimation truncated at episode ends. Timeouts bootstrap
    from the value of their final observation; failures do not."""
    r, v, done = batch.reward, batch.value, batch.done
    timeout = batch.termination == TERM_CODES[T.Termination.TIMEOUT]
    H = r.shape[0]
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    for t in range(H - 1, -1, -1):
        next_v = batch.last_value if t == H - 1 else v[t + 1]
        cont = ~done[t]
        target = np.where(cont, next_v, np.where(timeout[t], batch.bootstrap[t], 0.0))
        delta = r[t] + gamma * target - v[t]
        last = delta + gamma * lam * cont * last
        adv[t] = last
    return adv, adv + v


# ---------------------------------------------------------------------------
# updates


def policy_loss_and_grads(agent: Agent, x, actions, logp_old, adv, clip: float,
                          bound_weight: float = 0.0):
    """Clipped surrogate (plus optional action-bound penalty) and its parameter grads.
    `x` is the normalized policy input."""
    mean, cache = mlp_forward_cache(agent.policy, x)
    logp = gaussian_logprob(mean, agent.sigma, actions)
    ratio = np.exp(logp - logp_old)
    n = len(x)
    surr = np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)
    loss = -surr.mean()
    active = np.where(adv >= 0, ratio <= 1.0 + clip, ratio >= 1.0 - clip)
    dlogp = np.where(active, -ratio * adv, 0.0) / n
    up = dlogp[:, None] * (actions - mean) / agent.sigma ** 2
    if bound_weight:
        lo, hi = agent.action_bounds
        over = np.maximum(mean - hi, 0.0)
        under = np.maximum(lo - mean, 0.0)
        loss = loss + bound_weight * np.mean(np.sum(over ** 2 + under ** 2, axis=1))
        up = up + bound_weight * 2.0 * (over - under) / n
    grads, _ = mlp_backward(agent.policy, x, up, cache)
    with np.errstate(divide="ignore"):
        kl = float(np.mean((ratio - 1.0) - np.log(ratio)))
    clipped = float(np.mean(np.abs(ratio - 1.0) > clip))
    return float(loss), grads, {"kl": kl, "clip_frac": clipped}


def value_loss_and_grads(agent: Agent, x, returns):
    v, cache = mlp_forward_cache(agent.value, x)
    err = v[:, 0] - returns
    grads, _ = mlp_backward(agent.value, x, (err / len(x))[:, None], cache)
    return float(0.5 * np.mean(err * err)), grads


def ppo_update(agent: Agent, batch: RolloutBatch, config: TrainConfig,
               rng: np.random.Generator, disc: Discriminator | None = None,
               dataset: MotionDataset | None = None, advantages=None):
    """Clipped-ratio policy and squared-error value updates over `config.epochs`
    passes. With `disc` and `dataset`, each minibatch step also runs
    `disc.config.updates_per_step` discriminator updates. An epoch whose
    approximate KL exceeds `kl_max` stops the update early."""
    if advantages is None:
        adv, ret = gae_advantages(batch, config.gamma, config.lam)
    else:
        adv, ret = advantages
    N = batch.n_steps
    obs = batch.obs.reshape(N, -1)
    goal = batch.goal.reshape(N, -1)
    x = agent.inputs(obs, goal)
    acts = batch.action.reshape(N, -1)
    logp_old = batch.logp.reshape(N)
    adv = adv.reshape(N)
    ret = ret.reshape(N)
    std = adv.std()
    adv = (adv - adv.mean()) / (std + 1e-8)
    feats = batch.transitions() if disc is not None else None
    stats = {"policy_loss": [], "value_loss": [], "kl": [], "clip_frac": []}
    dstats = []
    mb = min(config.minibatch, N)
    stopped = False
    for epoch in range(config.epochs):
        perm = rng.permutation(N)
        for s in range(0, N - mb + 1, mb):
            idx = perm[s:s + mb]
            pl, pg, info = policy_loss_and_grads(agent, x[idx], acts[idx], logp_old[idx],
                                                 adv[idx], config.clip, config.bound_weight)
            if not np.isfinite(pl):
                raise FloatingPointError("policy loss is not finite")
            if info["kl"] > config.kl_max:
                stopped = True
                break
            vl, vg = value_loss_and_grads(agent, x[idx], ret[idx])
            if not np.isfinite(vl):
                raise FloatingPointError("value loss is not finite")
            agent.policy, agent.policy_opt = adam_like_step(agent.policy, pg, agent.policy_opt,
                                                            config.lr_policy)
            agent.value, agent.value_opt = adam_like_step(agent.value, vg, agent.value_opt,
                                                          config.lr_value)
            stats["policy_loss"].append(pl)
            stats["value_loss"].append(vl)
            stats["kl"].append(info["kl"])
            stats["clip_frac"].append(info["clip_frac"])
            if disc is not None and dataset is not None:
                for _ in range(disc.config.updates_per_step):
                    bd = disc.config.batch
                    d_obs, d_next = dataset.sample_batch(bd, rng)
                    data_x = np.concatenate([d_obs, d_next], axis=1)
                    pol_x = feats[rng.integers(0, N, size=bd)]
                    dstats.append(disc.update(data_x, pol_x))
        if stopped:
            break
    out = {k: float(np.mean(v)) if v else float("nan") for k, v in stats.items()}
    out["early_stop"] = stopped
    out["epochs_run"] = epoch + 1
    if dstats:
        for k in dstats[0]:
            out[k] = float(np.mean([d[k] for d in dstats]))
    return agent, out


# ---------------------------------------------------------------------------
# run


def build_body(config: TrainConfig) -> BodyDef:
    return load_body(config.body) if config.body else default_body()


def build_dataset(config: TrainConfig, body: BodyDef, rng) -> MotionDataset:
    if config.clips:
        return load_clips(config.clips, body)
    from .motiondata import generate_dataset
    return MotionDataset(generate_dataset(config.task, config.synthetic_clips, rng, body=body),
                         body)


def make_envs(config: TrainConfig, body, dataset, seed_seq: np.random.SeedSequence):
    spec = config.spec()
    children = seed_seq.spawn(config.n_envs)
    return [TaskEnv(body, spec, config.goal(), dataset, config.init,
                    rng=np.random.default_rng(c)) for c in children]


def agent_checkpoint(agent: Agent, disc: Discriminator | None, step: int, meta: dict):
    nets = {"policy": agent.policy, "value": agent.value}
    optim = {"policy": agent.policy_opt, "value": agent.value_opt}
    arrays = {"obs_norm": agent.norm.state(), "lower": agent.lower, "upper": agent.upper,
              "action_offset": agent.action_offset, "action_scale": agent.action_scale}
    if disc is not None:
        nets["disc"] = disc.params
        optim["disc"] = disc.optim
        arrays["disc_norm"] = disc.norm.state()
    meta = dict(meta, obs_layout=agent.obs_layout, goal_layout=agent.goal_layout,
                disc_layout=None if disc is None else disc.layout)
    return Checkpoint(nets, optim, agent.sigma, step, agent.obs_layout + ":" + agent.goal_layout,
                      arrays, meta)


def agent_from_checkpoint(ckpt: Checkpoint) -> tuple[Agent, Discriminator | None]:
    m = ckpt.meta
    agent = Agent(ckpt.nets["policy"], ckpt.nets["value"],
                  RunningNorm.from_state(ckpt.arrays["obs_norm"]), ckpt.sigma,
                  m["obs_layout"], m["goal_layout"], ckpt.arrays["lower"], ckpt.arrays["upper"],
                  ckpt.arrays["action_offset"], ckpt.arrays["action_scale"],
                  ckpt.optim.get("policy"), ckpt.optim.get("value"))
    disc = None
    if "disc" in ckpt.nets:
        cfg = DiscConfig(**_tuplify(m.get("disc_config", {})))
        disc = Discriminator(ckpt.nets["disc"], RunningNorm.from_state(ckpt.arrays["disc_norm"]),
                             m["disc_layout"], ckpt.optim.get("disc"), cfg)
    return agent, disc


def load_agent(path):
    ckpt = load_checkpoint(path)
    agent, disc = agent_from_checkpoint(ckpt)
    return agent, disc, ckpt


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def train(config: TrainConfig, out_dir, eval_fn=None, progress=None) -> dict:
    """Run training and write config.yaml, metrics.csv, timing.csv, layout.txt and
    checkpoints into `out_dir`. Returns a summary dict."""
    from .obs import layout_manifest

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    seq = np.random.SeedSequence(config.seed)
    s_data, s_init, s_envs, s_train = seq.spawn(4)
    body = build_body(config)
    dataset = build_dataset(config, body, np.random.default_rng(s_data))
    (out / "layout.txt").write_text(layout_manifest(body, config.task, config.goal()))
    obs_names = observation_layout(body)
    goal_names = goal_layout(config.task, config.bbox, config.density)
    if dataset.layout != layout_hash(obs_names):
        raise LayoutMismatch("dataset layout does not match the body observation layout")
    init_rng = np.random.default_rng(s_init)
    disc = Discriminator.create(dataset.features(), dataset.layout, init_rng, config.disc)
    agent = Agent.create(len(obs_names), len(goal_names), body, config, init_rng,
                         layout_hash(obs_names), layout_hash(goal_names))
    envs = make_envs(config, body, dataset, s_envs)
    rng = np.random.default_rng(s_train)
    for e in envs:
        e.reset()
    metrics = out / "metrics.csv"
    timing = out / "timing.csv"
    with open(metrics, "w", newline="") as f:
        csv.writer(f).writerow(METRICS_HEADER)
    with open(timing, "w", newline="") as f:
        csv.writer(f).writerow(["iteration", "collect_s", "update_s", "eval_s", "total_s"])
    meta = {"task": config.task, "config": config.to_dict(), "body_hash": body.hash(),
            "disc_config": asdict(config.disc)}
    env_steps = 0
    t0 = time.perf_counter()
    last_eval = None
    summary = {}
    it = 0
    terms = np.zeros(len(TERM_CODES), dtype=np.int64)
    for it in range(1, config.iterations + 1):
        if config.max_env_steps is not None and env_steps >= config.max_env_steps:
            break
        tc = time.perf_counter()
        batch = collect_rollouts(agent, disc, envs, config, rng)
        env_steps += batch.n_steps
        terms += np.bincount(batch.termination.ravel(), minlength=len(TERM_CODES))
        tu = time.perf_counter()
        adv = gae_advantages(batch, config.gamma, config.lam)
        agent, stats = ppo_update(agent, batch, config, rng, disc, dataset, adv)
        # after the update, so the stored log-probs match the inputs it sees
        agent.norm.update(np.concatenate([batch.obs.reshape(batch.n_steps, -1),
                                          batch.goal.reshape(batch.n_steps, -1)], axis=1))
        te = time.perf_counter()
        success_eval = None
        if eval_fn is not None and config.eval_every and it % config.eval_every == 0:
            success_eval = eval_fn(agent, config, it)
            last_eval = success_eval
        tend = time.perf_counter()
        wall = 0.0 if config.deterministic else tend - t0
        row = [it, env_steps, float(batch.task_reward.mean()), float(batch.style_reward.mean()),
               stats.get("disc_loss", float("nan")), stats.get("disc_accuracy", float("nan")),
               success_eval, wall]
        with open(metrics, "a", newline="") as f:
            csv.writer(f).writerow([_fmt(v) for v in row])
        with open(timing, "a", newline="") as f:
            csv.writer(f).writerow([it, f"{tu - tc:.3f}", f"{te - tu:.3f}", f"{tend - te:.3f}",
                                    f"{tend - t0:.3f}"])
        summary = {"iteration": it, "env_steps": env_steps, **stats,
                   "task_reward": float(batch.task_reward.mean()),
                   "style_reward": float(batch.style_reward.mean()),
                   "success_train": float(batch.success.mean()),
                   "terminations": {k.value: int(terms[c]) for k, c in TERM_CODES.items()}}
        if progress is not None:
            progress(summary)
        if config.checkpoint_every and it % config.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint.npz",
                            agent_checkpoint(agent, disc, env_steps, dict(meta, iteration=it)))
    save_checkpoint(out / "checkpoint.npz",
                    agent_checkpoint(agent, disc, env_steps, dict(meta, iteration=it)))
    summary["last_eval"] = last_eval
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return summary
