"""Acceptance criteria. Each test prints one PASS/FAIL line, repeated in the
terminal summary.

The four desk-scale runs (sit, carry and their no-bounding-box ablations) are
cached under runs/acceptance/<name>/. A missing run is trained here from
configs/acceptance_<name>.yaml, which takes on the order of an hour per run;
`python scripts/train_acceptance.py` produces the same artifacts up front.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from sceneamp import tasks as T
from sceneamp.amp import (STYLE_MAX, STYLE_MIN, DiscConfig, Discriminator, disc_loss_and_grads,
                          style_reward)
from sceneamp.env import TaskEnv
from sceneamp.evaluation import PerturbConfig, PolicyController, evaluate, perturb_evaluate
from sceneamp.motiondata import MotionDataset, generate_dataset
from sceneamp.numerics import (NetParams, gaussian_logprob, input_grad_penalty, mlp_backward,
                               mlp_forward)
from sceneamp.obs import observation_layout
from sceneamp.physics import default_body
from sceneamp.trainer import (Agent, TrainConfig, load_agent, load_config, policy_loss_and_grads,
                              train, value_loss_and_grads)

from .gradcheck import away_from_kinks, fd_gradient, random_net, relative_error
from .oracles import reward_oracle

ROOT = Path(__file__).resolve().parents[1]
RUNS = ROOT / "runs" / "acceptance"
CONFIGS = ROOT / "configs"
BODY = default_body()
TRIALS = 256
EVAL_SEED = 12345
STEP_BUDGET = 3_000_000

pytestmark = pytest.mark.acceptance


# ---------------------------------------------------------------------------
# formula and gradient checks


def test_reward_formula_oracle(criterion):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        seat = T.make_seat(rng.uniform(-5, 5), rng.uniform(0.8, 1.2))
        bed = T.make_bed(rng.uniform(-5, 5), rng.uniform(0.8, 1.2))
        carry = T.carry_scene(rng.uniform(-3, 3), rng.uniform(-3, 6), rng.uniform(0.5, 1.5),
                              T.default_spec("carry"))
        root = np.array([rng.uniform(-6, 6), rng.uniform(0.3, 1.1)])
        vel = rng.normal(size=2)
        head, hand = rng.uniform(0.2, 1.7), rng.uniform(0.2, 1.5)
        box = np.array([root[0] + rng.normal(), rng.uniform(0.2, 1.5)])
        box_vel = rng.normal(size=2)
        k = T.TaskKinematics(root, vel, head, hand, box, box_vel)
        got = (T.reward_sit(k, T.TaskContext("sit", seat)),
               T.reward_lie(k, T.TaskContext("lie", bed)),
               T.reward_carry(k, carry))
        ref = (reward_oracle.sit(seat.position[0], *seat.sit_anchor, *root, vel[0]),
               reward_oracle.lie(bed.position[0], *bed.sit_anchor, bed.head_height, *root, head,
                                 vel[0]),
               reward_oracle.carry(*box, box_vel[0], *carry.carry_target, root[0], vel[0], hand))
        worst = max(worst, *(abs(g - r) / max(abs(r), 1e-300) for g, r in zip(got, ref)))
    elapsed = time.perf_counter() - start
    criterion(worst < 1e-9 and elapsed < 10.0,
              f"worst relative error {worst:.2e} (< 1e-9), {elapsed:.2f} s (< 10 s)")


def _policy_case(rng):
    obs_dim, goal_dim = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    hidden = tuple(int(rng.integers(2, 8)) for _ in range(int(rng.integers(1, 3))))
    agent = Agent.create(obs_dim, goal_dim, BODY, TrainConfig(hidden=hidden), rng)
    agent.policy = random_net(rng, agent.policy.sizes)
    agent.value = random_net(rng, agent.value.sizes)
    n = 4
    x = np.stack([away_from_kinks(agent.policy, lambda r: r.normal(size=obs_dim + goal_dim), rng)
                  for _ in range(n)])
    mean = mlp_forward(agent.policy, x)
    actions = mean + agent.sigma * rng.normal(size=mean.shape)
    # ratios stay inside the clip band so the surrogate is smooth at x
    logp_old = gaussian_logprob(mean, agent.sigma, actions) + rng.uniform(-0.05, 0.05, n)
    return agent, x, actions, logp_old, rng.normal(size=n)


def test_gradient_exactness(criterion):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = {"policy": 0.0, "value": 0.0, "disc": 0.0, "disc_loss": 0.0}
    for _ in range(100):
        agent, x, actions, logp_old, adv = _policy_case(rng)
        _, pg, _ = policy_loss_and_grads(agent, x, actions, logp_old, adv, 0.2)
        fd = fd_gradient(lambda f: policy_loss_and_grads(
            _with(agent, policy=f), x, actions, logp_old, adv, 0.2)[0], agent.policy.flat())
        worst["policy"] = max(worst["policy"], relative_error(pg.flat(), fd))

        ret = rng.normal(size=len(x))
        vx = np.stack([away_from_kinks(agent.value, lambda r: r.normal(size=x.shape[1]), rng)
                       for _ in range(len(x))])
        _, vg = value_loss_and_grads(agent, vx, ret)
        fd = fd_gradient(lambda f: value_loss_and_grads(_with(agent, value=f), vx, ret)[0],
                         agent.value.flat())
        worst["value"] = max(worst["value"], relative_error(vg.flat(), fd))

        d = random_net(rng, [int(rng.integers(2, 6)), int(rng.integers(2, 7)),
                             int(rng.integers(2, 7)), 1])
        draw = lambda r: r.normal(size=d.in_dim)
        xd = away_from_kinks(d, draw, rng)
        grads, gx = mlp_backward(d, xd, np.ones(1))
        fd = fd_gradient(lambda f: float(mlp_forward(d.with_flat(f), xd)[0]), d.flat())
        fdx = fd_gradient(lambda v: float(mlp_forward(d, v)[0]), xd.copy())
        worst["disc"] = max(worst["disc"], relative_error(grads.flat(), fd),
                            relative_error(gx, fdx))

        data = np.stack([away_from_kinks(d, draw, rng) for _ in range(4)])
        pol = np.stack([away_from_kinks(d, draw, rng) for _ in range(3)])
        w_gp = float(rng.uniform(0.5, 10.0))
        _, lg, _ = disc_loss_and_grads(d, data, pol, w_gp)
        fd = fd_gradient(lambda f: disc_loss_and_grads(d.with_flat(f), data, pol, w_gp)[0],
                         d.flat())
        worst["disc_loss"] = max(worst["disc_loss"], relative_error(lg.flat(), fd))
    elapsed = time.perf_counter() - start
    ok = (max(worst["policy"], worst["value"], worst["disc"]) < 1e-5
          and worst["disc_loss"] < 1e-4 and elapsed < 120.0)
    criterion(ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
              + f" (nets < 1e-5, full loss < 1e-4), {elapsed:.1f} s (< 120 s)")


def _with(agent, policy=None, value=None):
    clone = Agent(agent.policy, agent.value, agent.norm, agent.sigma, agent.obs_layout,
                  agent.goal_layout, agent.lower, agent.upper, agent.action_offset,
                  agent.action_scale)
    if policy is not None:
        clone.policy = agent.policy.with_flat(policy)
    if value is not None:
        clone.value = agent.value.with_flat(value)
    return clone


def test_gradient_penalty_closed_form(criterion):
    p = NetParams([np.array([[3.0, 4.0]])], [np.array([-0.4])])
    x = np.random.default_rng(2).normal(size=(7, 2))
    pen, _, _ = input_grad_penalty(p, x)
    base = disc_loss_and_grads(p, x, x[:3], 0.0)[0]
    total = disc_loss_and_grads(p, x, x[:3], 1.0)[0]
    ok = np.all(pen == 25.0) and total - base == pytest.approx(25.0, abs=1e-12)
    criterion(bool(ok), f"w=(3,4): penalty {float(pen[0])}, "
                        f"loss increase {float(total - base)} (== 25)")


def test_style_reward_bounds(criterion):
    logits = np.concatenate([[-np.inf], np.linspace(-1e3, 1e3, 2_000_001), [np.inf]])
    r = style_reward(logits)
    lo, hi = float(r.min()), float(r.max())
    ok = (np.all(np.isfinite(r)) and np.all(np.diff(r) >= 0.0)
          and lo >= STYLE_MIN and hi <= STYLE_MAX
          and STYLE_MIN == pytest.approx(1.0001e-4, rel=1e-4)
          and STYLE_MAX == pytest.approx(9.2104, abs=1e-4))
    criterion(bool(ok), f"range [{lo:.6e}, {hi:.6f}] within [1.0001e-4, 9.2104], monotone on "
                        f"{len(logits)} logits")


# ---------------------------------------------------------------------------
# discriminator separation


def _random_policy_features(dataset, n, seed):
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(task="sit")
    env = TaskEnv(BODY, cfg.spec(), cfg.goal(), dataset, cfg.init, rng=rng)
    env.reset()
    lo, hi = np.array(BODY.joint_lower), np.array(BODY.joint_upper)
    rows = []
    while len(rows) < n:
        prev = env.obs
        res = env.step(rng.uniform(lo, hi))
        rows.append(np.concatenate([prev, res.obs]))
        if res.termination.done:
            env.reset()
    return np.array(rows)


@pytest.fixture(scope="module")
def separated_disc():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    train_clips = MotionDataset(generate_dataset("sit", 8, rng, body=BODY), BODY)
    held_clips = MotionDataset(generate_dataset("sit", 4, rng, body=BODY), BODY)
    pol_train = _random_policy_features(train_clips, 8000, 4)
    pol_held = _random_policy_features(train_clips, 2000, 5)
    disc = Discriminator.create(train_clips.features(), train_clips.layout, rng, DiscConfig())
    data = train_clips.features()
    for _ in range(500):
        disc.update(data[rng.integers(0, len(data), 256)],
                    pol_train[rng.integers(0, len(pol_train), 256)])
    return disc, held_clips.features(), pol_held, time.perf_counter() - start


def test_discriminator_separation(criterion, separated_disc):
    disc, held_data, held_pol, elapsed = separated_disc
    ld, lp = disc.logits(held_data), disc.logits(held_pol)
    acc = 0.5 * (np.mean(ld > 0) + np.mean(lp < 0))
    gap = float(np.mean(disc.reward(held_data)) - np.mean(disc.reward(held_pol)))
    criterion(acc >= 0.95 and gap >= 0.5 and elapsed < 300.0,
              f"held-out accuracy {acc:.4f} (>= 0.95), style gap {gap:.3f} nats (>= 0.5), "
              f"{elapsed:.0f} s (< 300 s)")


def test_discriminator_uses_scene_block(separated_disc):
    disc, held_data, _, _ = separated_disc
    names = observation_layout(BODY)
    d = len(names)
    obj = [i for i, n in enumerate(names) if n.startswith("obj_")]
    cols = obj + [d + i for i in obj]
    rng = np.random.default_rng(6)
    a = held_data[rng.integers(0, len(held_data), 500)]
    b = held_data[rng.integers(0, len(held_data), 500)]
    swapped = a.copy()
    swapped[:, cols] = b[:, cols]
    changed = np.abs(disc.logits(swapped) - disc.logits(a)) > 1e-9
    same = np.all(a[:, cols] == b[:, cols], axis=1)
    assert np.mean(changed[~same]) >= 0.9


# ---------------------------------------------------------------------------
# desk-scale runs


def _run(name):
    out = RUNS / name
    ckpt = out / "checkpoint.npz"
    summary = out / "summary.json"
    if not (ckpt.exists() and summary.exists()):
        train(load_config(CONFIGS / f"acceptance_{name}.yaml"), out)
    agent, _, meta = load_agent(ckpt)
    return agent, meta, json.loads(summary.read_text())


_EVALS = {}


def _evaluate(name, perturb=None):
    key = (name, perturb is not None)
    if key not in _EVALS:
        agent, ckpt, summary = _run(name)
        cfg = TrainConfig(**ckpt.meta["config"])
        kw = dict(spec=T.default_spec(cfg.task), goal=cfg.goal(), out_dir=RUNS / name /
                  ("eval_perturbed" if perturb else "eval"))
        if perturb is None:
            metrics, _ = evaluate(PolicyController(agent), cfg.task, TRIALS, EVAL_SEED, BODY, **kw)
        else:
            metrics, _ = perturb_evaluate(PolicyController(agent), cfg.task, perturb, TRIALS,
                                          EVAL_SEED, BODY, **kw)
        _EVALS[key] = (metrics, summary)
    return _EVALS[key]


def _budget_note(summary):
    return f"{summary['env_steps']} env steps (<= {STEP_BUDGET})"


def test_sit_smoke(criterion):
    m, summary = _evaluate("sit")
    criterion(m.success_rate >= 85.0 and summary["env_steps"] <= STEP_BUDGET,
              f"success {m.success_rate:.1f}% of {m.n_trials} (>= 85%), {_budget_note(summary)}")


def test_carry_smoke(criterion):
    m, summary = _evaluate("carry")
    logged = sum(m.failures.values()) == m.n_trials - round(m.success_rate * m.n_trials / 100)
    criterion(m.success_rate >= 50.0 and summary["env_steps"] <= STEP_BUDGET and logged,
              f"success {m.success_rate:.1f}% of {m.n_trials} (>= 50%), failures {m.failures}, "
              f"{_budget_note(summary)}")


def test_robustness_trend(criterion):
    plain, _ = _evaluate("sit")
    hit, _ = _evaluate("sit", PerturbConfig())
    drop = plain.success_rate - hit.success_rate
    # a drop is only meaningful against a policy that solves the task
    criterion(plain.success_rate >= 85.0 and drop <= 15.0, f"sit {plain.success_rate:.1f}% -> {hit.success_rate:.1f}% under "
                            f"20 x 1.2 kg projectiles, drop {drop:.1f} pp (<= 15, base >= 85%)")


def test_bounding_box_ablation_trend(criterion):
    sit, _ = _evaluate("sit")
    sit_nobb, _ = _evaluate("sit_nobb")
    carry, _ = _evaluate("carry")
    carry_nobb, _ = _evaluate("carry_nobb")
    sit_drop = sit.success_rate - sit_nobb.success_rate
    ok = (carry_nobb.success_rate <= 10.0 and carry.success_rate >= 50.0
          and sit.success_rate >= 85.0 and sit_drop <= 15.0)
    criterion(ok, f"carry {carry.success_rate:.1f}% -> {carry_nobb.success_rate:.1f}% (<= 10%); "
                  f"sit {sit.success_rate:.1f}% -> {sit_nobb.success_rate:.1f}% "
                  f"(drop {sit_drop:.1f} pp <= 15, base >= 85%)")


def test_determinism(criterion, tmp_path):
    cfg = load_config(CONFIGS / "acceptance_sit.yaml", iterations=10)
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    same_train = ((tmp_path / "a" / "metrics.csv").read_bytes()
                  == (tmp_path / "b" / "metrics.csv").read_bytes())
    agent, _, _ = load_agent(tmp_path / "a" / "checkpoint.npz")
    for run in ("ea", "eb"):
        evaluate(PolicyController(agent), "sit", TRIALS, 7, BODY, goal=cfg.goal(),
                 out_dir=tmp_path / run)
    same_eval = all((tmp_path / "ea" / f).read_bytes() == (tmp_path / "eb" / f).read_bytes()
                    for f in ("metrics.csv", "trials.csv"))
    criterion(same_train and same_eval, f"train metrics identical: {same_train}; "
                                        f"evaluate ({TRIALS} trials) identical: {same_eval}")


def test_threshold_predicates(criterion):
    sit, lie, carry = (T.default_spec(k) for k in ("sit", "lie", "carry"))
    checks = {
        "sit hip 0.2 m": sit.hip_threshold == 0.2,
        "ground termination 0.2 m": sit.ground_clearance == 0.2,
        "lie hip+head 0.3 m": lie.head_threshold == 0.3,
        "box-low 0.3 m": carry.box_low == 0.3,
        "carry 0.2 m": carry.box_threshold == 0.2,
        "timeout 20 s": sit.timeout == lie.timeout == carry.timeout == 20.0,
        "episodes 10/15 s": (sit.episode_length, lie.episode_length,
                             carry.episode_length) == (10.0, 10.0, 15.0),
        "placement U[1,10] m": sit.distance_range == (1.0, 10.0),
        "orientation U[0,2pi)": sit.orientation_range == (0.0, 2.0 * math.pi),
        "scales 0.8-1.2 / 0.5-1.5": (sit.scale_range, lie.scale_range,
                                     carry.scale_range) == ((0.8, 1.2),) * 2 + ((0.5, 1.5),),
        "density 5-26 kg": carry.mass_range == (5.0, 26.0),
        "box 0.50x0.35x0.30": T.DEFAULT_BOX == (0.50, 0.35, 0.30),
    }
    # predicates switch exactly at the constants
    ctx = T.TaskContext("sit", T.make_seat(2.0))
    a = ctx.object.sit_anchor
    at = lambda dx: T.success(sit, T.TaskKinematics(a + [dx, 0.0], np.zeros(2), 1.6, 0.8,
                                                    None, None), ctx)
    checks["sit predicate edge"] = at(0.2 - 1e-9) and not at(0.2 + 1e-9)
    bad = [k for k, v in checks.items() if not v]
    criterion(not bad, f"{len(checks) - len(bad)}/{len(checks)} constants pinned"
                       + (f"; mismatched: {bad}" if bad else ""))
