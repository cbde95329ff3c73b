import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sceneamp import tasks as T
from sceneamp.physics import CharacterState, SceneObject, default_body, make_world, rest_state

from .oracles import reward_oracle

BODY = default_body()


def kin(root, vel=(0.0, 0.0), head=1.6, hand=0.8, box=None, box_vel=None):
    return T.TaskKinematics(np.array(root, float), np.array(vel, float), head, hand,
                            None if box is None else np.array(box, float),
                            None if box_vel is None else np.array(box_vel, float))


def sit_ctx(x=3.0, scale=1.0):
    return T.TaskContext("sit", T.make_seat(x, scale))


def rel(a, b):
    return abs(a - b) / max(1.0, abs(b))


def test_reward_oracle_agreement_on_1000_configs():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        ctx_s = sit_ctx(rng.uniform(-5, 5), rng.uniform(0.8, 1.2))
        ctx_l = T.TaskContext("lie", T.make_bed(rng.uniform(-5, 5), rng.uniform(0.8, 1.2)))
        ctx_c = T.carry_scene(rng.uniform(-3, 3), rng.uniform(-3, 6), rng.uniform(0.5, 1.5),
                              T.default_spec("carry"))
        # spread roots both near and far from the objects so every branch is hit
        root = np.array([rng.uniform(-6, 6), rng.uniform(0.3, 1.1)])
        vel = rng.normal(size=2)
        head, hand = rng.uniform(0.2, 1.7), rng.uniform(0.2, 1.5)
        box = np.array([root[0] + rng.normal(scale=1.0), rng.uniform(0.2, 1.5)])
        box_vel = rng.normal(size=2)
        k = kin(root, vel, head, hand, box, box_vel)
        seat, bed = ctx_s.object, ctx_l.object
        got = [T.reward_sit(k, ctx_s), T.reward_lie(k, ctx_l), T.reward_carry(k, ctx_c)]
        ref = [
            reward_oracle.sit(seat.position[0], *seat.sit_anchor, *root, vel[0]),
            reward_oracle.lie(bed.position[0], *bed.sit_anchor, bed.head_height, *root, head,
                              vel[0]),
            reward_oracle.carry(*box, box_vel[0], *ctx_c.carry_target, root[0], vel[0], hand),
        ]
        worst = max(worst, *(rel(g, r) for g, r in zip(got, ref)))
    assert worst < 1e-9
    assert time.perf_counter() - start < 10.0


def test_sit_reward_optimum_is_one():
    ctx = sit_ctx()
    assert T.reward_sit(kin(ctx.object.sit_anchor), ctx) == pytest.approx(1.0, abs=1e-15)


def test_sit_reward_one_metre_away_stationary():
    ctx = sit_ctx(3.0)
    anchor = ctx.object.sit_anchor
    # 1 m from the object centre along the ground, hip 1 m from the anchor
    root = (anchor[0] - 1.0, anchor[1])
    expect = 0.7 * math.exp(-10) + 0.3 * (0.5 * math.exp(-0.5) + 0.5 * math.exp(-4.5))
    assert T.reward_sit(kin(root), ctx) == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(0.09267, abs=1e-5)


def test_sit_reward_branches_agree_at_boundary():
    ctx = sit_ctx(3.0)
    x = ctx.object.position[0] - 0.5
    eps = 1e-9
    inside = T.reward_sit(kin((x + eps, 0.9)), ctx)
    # far branch with r_far -> 1 requires zero position error, which the 0.5 m boundary
    # cannot give; compare the near parts and the constant instead
    near = math.exp(-10.0 * ((ctx.object.sit_anchor[0] - x) ** 2 + (ctx.object.sit_anchor[1] - 0.9) ** 2))
    assert inside == pytest.approx(0.7 * near + 0.3, rel=1e-6)
    outside = T.reward_sit(kin((x - eps, 0.9), vel=(1.5, 0.0)), ctx)
    far = 0.5 * math.exp(-0.5 * 0.25) + 0.5
    assert outside == pytest.approx(0.7 * near + 0.3 * far, rel=1e-6)


def test_lie_near_reward_examples():
    bed = T.make_bed(2.0)
    ctx = T.TaskContext("lie", bed)
    on = kin(bed.sit_anchor, head=bed.head_height)
    assert T.reward_lie(on, ctx) == pytest.approx(1.0, abs=1e-15)
    off = kin(bed.sit_anchor + [0.1, 0.0], head=bed.head_height - 0.1)
    assert (T.reward_lie(off, ctx) - 0.3) / 0.7 == pytest.approx(math.exp(-0.2), abs=1e-12)
    assert math.exp(-0.2) == pytest.approx(0.818731, abs=1e-6)
    far = kin((bed.position[0] - 8.0, 0.95), head=1.6)
    assert T.reward_lie(far, ctx) < 0.3 + 1e-9


def test_carry_terminal_optimum():
    ctx = T.carry_scene(2.0, 5.0, 1.0, T.default_spec("carry"))
    target = ctx.carry_target
    k = kin((target[0] - 0.3, 0.95), box=target, box_vel=(0, 0), hand=target[1])
    terms = T.reward_carry_terms(k, ctx)
    assert terms["walk"] == pytest.approx(0.2)
    assert terms["carry"] == pytest.approx(0.4)
    assert T.reward_carry(k, ctx) == pytest.approx(0.6)


def test_carry_scripted_example():
    ctx = T.carry_scene(2.0, 5.0, 1.0, T.default_spec("carry"))
    box = ctx.object.position
    k = kin((box[0] - 2.0, 0.95), box=box, box_vel=(0, 0), hand=box[1] + 0.5)
    expect = reward_oracle.carry(box[0], box[1], 0.0, *ctx.carry_target, box[0] - 2.0, 0.0,
                                 box[1] + 0.5)
    walk = 0.1 * math.exp(-2.0) + 0.1 * math.exp(-4.5)
    dc = 3.0
    carry = (0.2 * math.exp(-0.5 * dc * dc) + 0.2 * math.exp(-4.5) + 0.1 * math.exp(-2.5)
             + 0.2 * math.exp(-10.0 * dc * dc))
    assert T.reward_carry(k, ctx) == pytest.approx(expect, rel=1e-12)
    assert expect == pytest.approx(walk + carry, rel=1e-12)


def test_rewards_are_bounded_by_coefficient_sums():
    rng = np.random.default_rng(1)
    ctx_s, ctx_c = sit_ctx(0.0), T.carry_scene(0.0, 3.0, 1.0, T.default_spec("carry"))
    for _ in range(2000):
        k = kin(rng.uniform(-4, 4, 2), rng.normal(scale=2, size=2), rng.uniform(0, 2),
                rng.uniform(0, 2), rng.uniform(-4, 4, 2), rng.normal(scale=2, size=2))
        assert 0.0 <= T.reward_sit(k, ctx_s) <= 1.0
        terms = T.reward_carry_terms(k, ctx_c)
        assert 0.0 <= terms["walk"] <= 0.2 + 1e-12
        assert 0.0 <= terms["carry"] <= 0.7 + 1e-12


def test_threshold_constants():
    sit, lie, carry = (T.default_spec(k) for k in ("sit", "lie", "carry"))
    assert sit.hip_threshold == 0.2
    assert lie.head_threshold == 0.3
    assert carry.box_threshold == 0.2
    assert sit.ground_clearance == 0.2 and carry.box_low == 0.3
    assert sit.timeout == lie.timeout == carry.timeout == 20.0
    assert sit.episode_length == lie.episode_length == 10.0 and carry.episode_length == 15.0
    assert sit.distance_range == (1.0, 10.0)
    assert sit.orientation_range == (0.0, 2.0 * np.pi)
    assert sit.scale_range == lie.scale_range == (0.8, 1.2)
    assert carry.scale_range == (0.5, 1.5)
    assert carry.mass_range == (5.0, 26.0)
    assert T.DEFAULT_BOX == (0.50, 0.35, 0.30)
    assert sit.walk_speed == 1.5 and carry.carry_speed == 1.5


def test_success_thresholds():
    ctx = sit_ctx(2.0)
    a = ctx.object.sit_anchor
    spec = T.default_spec("sit")
    assert T.success(spec, kin(a + [0.19, 0.0]), ctx)
    assert not T.success(spec, kin(a + [0.21, 0.0]), ctx)
    bed = T.make_bed(2.0)
    lctx = T.TaskContext("lie", bed)
    assert not T.success(T.default_spec("lie"), kin(bed.sit_anchor + [0.1, 0.0],
                                                   head=bed.head_height + 0.4), lctx)
    cctx = T.carry_scene(0.0, 3.0, 1.0, T.default_spec("carry"))
    box = cctx.carry_target + [0.21, 0.0]
    assert not T.success(T.default_spec("carry"), kin((0, 0.95), box=box, box_vel=(0, 0)), cctx)


@settings(max_examples=200)
@given(st.floats(0.0, 1.0), st.floats(0.0, 2 * np.pi), st.floats(0.0, 1.0))
def test_success_is_monotone_in_distance(r, angle, shrink):
    ctx = sit_ctx(2.0)
    spec = T.default_spec("sit")
    a = ctx.object.sit_anchor
    offset = r * np.array([np.cos(angle), np.sin(angle)])
    if T.success(spec, kin(a + offset), ctx):
        assert T.success(spec, kin(a + shrink * offset), ctx)


def fallen_world():
    q = np.zeros(9)
    q[1], q[2] = 0.15, np.pi / 2
    return make_world(BODY, CharacterState.from_q(q, np.zeros(9)))


def test_termination_fall_and_timeout():
    spec = T.default_spec("sit")
    assert T.should_terminate(spec, fallen_world(), 0.0) is T.Termination.FALL
    standing = make_world(BODY, rest_state(BODY))
    assert T.should_terminate(spec, standing, 1.0) is T.Termination.CONTINUE
    assert T.should_terminate(spec, standing, 10.0) is T.Termination.TIMEOUT
    assert T.should_terminate(spec, standing, 10.0, horizon=20.0) is T.Termination.CONTINUE


def test_box_low_termination_is_gated_on_first_lift():
    spec = T.default_spec("carry")
    box = SceneObject("box", (3.0, 0.25), 0.0, T.DEFAULT_BOX, 60.0)
    w = make_world(BODY, rest_state(BODY), [box])
    flags = T.EpisodeFlags()
    T.update_flags(spec, w, flags)
    assert T.should_terminate(spec, w, 0.0, flags) is T.Termination.CONTINUE
    w.box.position[1] = 0.8
    T.update_flags(spec, w, flags)
    assert flags.box_lifted
    w.box.position[1] = 0.25
    assert T.should_terminate(spec, w, 0.0, flags) is T.Termination.BOX_DROP


def test_randomize_scene_statistics():
    rng = np.random.default_rng(2)
    spec = T.default_spec("sit")
    xs = np.array([T.randomize_scene("sit", rng, spec).object.position[0] for _ in range(10_000)])
    assert xs.min() >= 1.0 and xs.max() <= 10.0
    sd = 9.0 / np.sqrt(12.0) / np.sqrt(len(xs))
    assert abs(xs.mean() - 5.5) < 3 * sd


def test_randomize_scene_is_reproducible_and_scales():
    a = [T.randomize_scene("carry", np.random.default_rng(3)).to_dict() for _ in range(2)]
    assert a[0] == a[1]
    assert T.make_box(0.0, 0.75, 1.0).size == (0.50, 0.35, 0.30)
    seat = T.make_seat(0.0, 1.2)
    assert seat.sit_anchor[1] == pytest.approx(1.2 * 0.45 + 0.04)


def test_randomized_mass_within_range():
    spec = T.TaskSpec.from_dict({**T.default_spec("carry").to_dict(), "randomize_mass": True})
    rng = np.random.default_rng(4)
    for _ in range(200):
        box = T.randomize_scene("carry", rng, spec).object
        assert 5.0 - 1e-9 <= box.mass <= 26.0 + 1e-9


def test_spec_validation():
    with pytest.raises(ValueError):
        T.TaskSpec("dance", 10.0)
    with pytest.raises(ValueError):
        T.TaskSpec("sit", 10.0, hip_threshold=0.0)
    with pytest.raises(ValueError):
        T.TaskSpec("sit", 10.0, distance_range=(3.0, 1.0))
