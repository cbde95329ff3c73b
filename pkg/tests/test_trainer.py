import csv

import numpy as np
import pytest

from sceneamp import tasks as T
from sceneamp.amp import DiscConfig, Discriminator
from sceneamp.env import InitConfig
from sceneamp.numerics import NetParams, gaussian_logprob, mlp_forward
from sceneamp.physics import default_body
from sceneamp.trainer import (TERM_CODES, Agent, RolloutBatch, TrainConfig, build_dataset,
                              collect_rollouts, gae_advantages, load_agent, load_config,
                              make_envs, policy_loss_and_grads, ppo_update, train,
                              value_loss_and_grads)

from .gradcheck import fd_gradient, relative_error
from .oracles import gae_oracle

BODY = default_body()


def small_config(**kw):
    base = dict(task="sit", n_envs=2, horizon=8, hidden=(16, 16), minibatch=8, epochs=2,
                iterations=3, synthetic_clips=1, checkpoint_every=0,
                disc=DiscConfig(hidden=(16,), batch=8))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset():
    return build_dataset(small_config(), BODY, np.random.default_rng(0))


def make_agent(config, dataset, seed=0):
    envs = make_envs(config, BODY, dataset, np.random.SeedSequence(seed))
    for e in envs:
        e.reset()
    obs_dim, goal_dim = len(envs[0].obs), len(envs[0].goal())
    agent = Agent.create(obs_dim, goal_dim, BODY, config, np.random.default_rng(seed))
    return agent, envs


def zero_disc(dataset):
    disc = Discriminator.create(dataset.features(), dataset.layout, np.random.default_rng(0),
                                DiscConfig(hidden=(8,)))
    disc.params = NetParams([np.zeros_like(w) for w in disc.params.weights],
                            [np.zeros_like(b) for b in disc.params.biases])
    return disc


def test_style_weight_zero_gives_task_reward(dataset):
    cfg = small_config(w_task=1.0, w_style=0.0)
    agent, envs = make_agent(cfg, dataset)
    batch = collect_rollouts(agent, zero_disc(dataset), envs, cfg, np.random.default_rng(1))
    np.testing.assert_array_equal(batch.reward, batch.task_reward)


def test_task_weight_zero_gives_style_reward_of_uninformed_discriminator(dataset):
    cfg = small_config(w_task=0.0, w_style=0.7)
    agent, envs = make_agent(cfg, dataset)
    batch = collect_rollouts(agent, zero_disc(dataset), envs, cfg, np.random.default_rng(1))
    np.testing.assert_allclose(batch.reward, 0.7 * np.log(2.0), rtol=1e-12)


def test_combined_reward_is_weighted_sum(dataset):
    cfg = small_config(w_task=0.3, w_style=0.6)
    agent, envs = make_agent(cfg, dataset)
    disc = Discriminator.create(dataset.features(), dataset.layout, np.random.default_rng(2))
    batch = collect_rollouts(agent, disc, envs, cfg, np.random.default_rng(1))
    np.testing.assert_array_equal(batch.reward, 0.3 * batch.task_reward + 0.6 * batch.style_reward)


def test_rollout_bookkeeping_over_short_horizon(dataset):
    cfg = small_config(horizon=8, task_spec={"episode_length": 0.1},
                       init=InitConfig(rest_prob=1.0))
    agent, envs = make_agent(cfg, dataset)
    batch = collect_rollouts(agent, None, envs, cfg, np.random.default_rng(3))
    assert batch.obs.shape[:2] == (8, 2) and batch.n_steps == 16
    timeout = TERM_CODES[T.Termination.TIMEOUT]
    # 0.1 s is three policy steps: every third step times out
    for t in range(8):
        expect = (t + 1) % 3 == 0
        assert np.all(batch.done[t] == expect)
        assert np.all((batch.termination[t] == timeout) == expect)
    # after a reset the next observation row starts a new episode, not the pre-reset state
    assert not np.allclose(batch.obs[3], batch.next_obs[2])
    np.testing.assert_array_equal(batch.obs[1], batch.next_obs[0])
    assert np.all(batch.bootstrap[~batch.done] == 0.0)
    assert batch.transitions().shape == (16, 2 * batch.obs.shape[-1])


def random_batch(rng, H=12, E=3):
    D, G, J = 4, 2, 6
    done = rng.uniform(size=(H, E)) < 0.25
    term = np.where(done, rng.choice([1, 3], size=(H, E)), 0)
    return RolloutBatch(rng.normal(size=(H, E, D)), rng.normal(size=(H, E, G)),
                        rng.normal(size=(H, E, D)), rng.normal(size=(H, E, J)),
                        rng.normal(size=(H, E)), rng.normal(size=(H, E)), np.zeros((H, E)),
                        rng.normal(size=(H, E)), rng.normal(size=(H, E)), done, term,
                        np.where(term == 3, rng.normal(size=(H, E)), 0.0), rng.normal(size=E),
                        np.zeros((H, E), dtype=bool))


def test_gae_matches_nested_sum_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        b = random_batch(rng)
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.5, 1.0)
        adv, ret = gae_advantages(b, gamma, lam)
        for e in range(b.reward.shape[1]):
            ref = gae_oracle.advantages(list(b.reward[:, e]), list(b.value[:, e]),
                                        list(b.done[:, e]), b.last_value[e], gamma, lam,
                                        list(b.bootstrap[:, e]),
                                        list(b.termination[:, e] == 3))
            np.testing.assert_allclose(adv[:, e], ref, rtol=0, atol=1e-10)
        np.testing.assert_allclose(ret, adv + b.value, rtol=0, atol=1e-12)


def policy_setup(seed=5, n=32):
    rng = np.random.default_rng(seed)
    cfg = small_config(hidden=(8, 6))
    agent = Agent.create(5, 2, BODY, cfg, rng)
    agent.policy = NetParams([w * 50 for w in agent.policy.weights], agent.policy.biases)
    x = rng.normal(size=(n, 7))
    mean = agent.mean_action(x[:, :5], x[:, 5:])
    actions = mean + agent.sigma * rng.normal(size=mean.shape)
    return agent, agent.inputs(x[:, :5], x[:, 5:]), actions, rng


def test_zero_advantages_leave_policy_unchanged():
    agent, x, actions, rng = policy_setup()
    logp = np.zeros(len(x))
    _, grads, _ = policy_loss_and_grads(agent, x, actions, logp, np.zeros(len(x)), 0.2)
    assert np.all(grads.flat() == 0.0)
    before = agent.policy.flat().copy()
    H = 4
    batch = RolloutBatch(np.zeros((H, 8, 5)), np.zeros((H, 8, 2)), np.zeros((H, 8, 5)),
                         actions.reshape(H, 8, -1), np.zeros((H, 8)), np.zeros((H, 8)),
                         np.zeros((H, 8)), np.zeros((H, 8)), np.zeros((H, 8)),
                         np.zeros((H, 8), bool), np.zeros((H, 8), int), np.zeros((H, 8)),
                         np.zeros(8), np.zeros((H, 8), bool))
    zeros = np.zeros((H, 8))
    cfg = small_config(minibatch=8, bound_weight=0.0, kl_max=np.inf)
    agent, _ = ppo_update(agent, batch, cfg, rng, advantages=(zeros, zeros))
    np.testing.assert_array_equal(agent.policy.flat(), before)


def test_ratios_outside_clip_give_zero_gradient():
    agent, x, actions, _ = policy_setup()
    cur = gaussian_logprob(mlp_forward(agent.policy, x), agent.sigma, actions)
    adv = np.ones(len(x))
    # old log-probs far below current: ratio above 1 + clip with positive advantage
    _, grads, info = policy_loss_and_grads(agent, x, actions, cur - 5.0, adv, 0.2)
    assert np.all(grads.flat() == 0.0) and info["clip_frac"] == 1.0
    # far above with negative advantage: ratio below 1 - clip
    _, grads, _ = policy_loss_and_grads(agent, x, actions, cur + 5.0, -adv, 0.2)
    assert np.all(grads.flat() == 0.0)


def test_policy_and_value_gradients_match_finite_differences():
    agent, x, actions, rng = policy_setup(n=6)
    cur = mlp_forward(agent.policy, x)
    logp_old = gaussian_logprob(cur, agent.sigma, actions) + rng.normal(scale=0.05, size=len(x))
    adv = rng.normal(size=len(x))
    # push some means past the joint limits so the bound penalty is active
    _, hi = agent.action_bounds
    agent.policy.biases[-1][:] = hi * 1.2
    _, grads, _ = policy_loss_and_grads(agent, x, actions, logp_old, adv, 0.2, 3.0)

    def loss(flat):
        saved = agent.policy
        agent.policy = saved.with_flat(flat)
        out = policy_loss_and_grads(agent, x, actions, logp_old, adv, 0.2, 3.0)[0]
        agent.policy = saved
        return out

    assert relative_error(grads.flat(), fd_gradient(loss, agent.policy.flat())) < 1e-5
    ret = rng.normal(size=len(x))
    _, vg = value_loss_and_grads(agent, x, ret)

    def vloss(flat):
        saved = agent.value
        agent.value = saved.with_flat(flat)
        out = value_loss_and_grads(agent, x, ret)[0]
        agent.value = saved
        return out

    assert relative_error(vg.flat(), fd_gradient(vloss, agent.value.flat())) < 1e-5


def test_repeated_updates_fit_a_fixed_batch(dataset):
    cfg = small_config(horizon=32, minibatch=32, epochs=4, kl_max=np.inf)
    agent, envs = make_agent(cfg, dataset)
    rng = np.random.default_rng(6)
    batch = collect_rollouts(agent, None, envs, cfg, rng)
    adv = gae_advantages(batch, cfg.gamma, cfg.lam)
    losses = []
    for _ in range(10):
        agent, stats = ppo_update(agent, batch, cfg, rng, advantages=adv)
        losses.append(stats["value_loss"])
    assert losses[-1] < losses[0]


def read_rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_ten_iteration_run_writes_artifacts(tmp_path):
    cfg = small_config(iterations=10, checkpoint_every=5)
    summary = train(cfg, tmp_path)
    rows = read_rows(tmp_path / "metrics.csv")
    assert rows[0][:3] == ["iteration", "env_steps", "mean_task_reward"]
    assert len(rows) == 11 and summary["env_steps"] == 10 * 16
    agent, disc, ckpt = load_agent(tmp_path / "checkpoint.npz")
    assert ckpt.meta["iteration"] == 10 and disc is not None
    assert "hash=" in (tmp_path / "layout.txt").read_text()
    again = load_config(tmp_path / "config.yaml")
    assert again.to_dict() == cfg.to_dict()


def test_identical_seeds_give_identical_metrics(tmp_path):
    cfg = small_config(iterations=10)
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
        (tmp_path / "b" / "metrics.csv").read_bytes()
    train(small_config(iterations=10, seed=1), tmp_path / "c")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != \
        (tmp_path / "c" / "metrics.csv").read_bytes()


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  task: sit\n  flux: 3\n")
    with pytest.raises(ValueError, match="flux"):
        load_config(bad)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "none.yaml")


def test_first_minibatch_sees_the_collecting_policy(tmp_path):
    # an unchanged policy has zero KL, so even a tiny KL cap allows one step per iteration
    seen = []
    train(small_config(iterations=4, kl_max=1e-12), tmp_path, progress=seen.append)
    assert all(np.isfinite(s["policy_loss"]) for s in seen)
