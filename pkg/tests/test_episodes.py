"""Episode sampling, serialization and environment reward semantics."""

from __future__ import annotations

import math

import numpy as np
import pytest

from navlab import episodes, world
from navlab.episodes import Episode, NavEnv
from navlab.world import Action, Pose

from _helpers import open_box_plan


def _plans(n=2, width=64):
    out = {}
    for seed in range(n):
        out[f"p{seed}"] = world.generate_floorplan(seed, width=width, height=width)
    return out


def _sample_some(plans, split="train", count=3):
    rng = np.random.default_rng(0)
    eps = []
    for pid, plan in plans.items():
        eps.extend(episodes.sample_episodes_for_plan(rng, plan, pid, split, count))
    return eps


# -- sampling -----------------------------------------------------------------

def test_sampled_episodes_satisfy_geodesic_band_and_free_poses():
    plans = _plans()
    eps = _sample_some(plans, count=4)
    for ep in eps:
        assert 1.5 <= ep.geodesic <= 8.0
        plan = plans[ep.plan]
        assert world.is_free(plan, ep.start.x, ep.start.y)
        assert world.is_free(plan, ep.goal.x, ep.goal.y)
        # stored geodesic is the field value at the start cell
        field = world.distance_field(plan, (ep.goal.x, ep.goal.y))
        iy, ix = world.cell_of(plan, ep.start.x, ep.start.y)
        assert ep.geodesic == field[iy, ix]


def test_face_goal_jitter_bounds_start_heading():
    plan = open_box_plan(30)
    rng = np.random.default_rng(4)
    eps = episodes.sample_episodes_for_plan(
        rng, plan, "box", "train", 20, 1.0, 4.0,
        face_goal_jitter=math.pi / 4)
    for ep in eps:
        bearing = math.atan2(ep.goal.y - ep.start.y, ep.goal.x - ep.start.x)
        off = abs((ep.start.theta - bearing + math.pi) % (2 * math.pi) - math.pi)
        assert off <= math.pi / 4 + 1e-9


def test_face_goal_jitter_none_uses_all_headings():
    plan = open_box_plan(30)
    rng = np.random.default_rng(5)
    eps = episodes.sample_episodes_for_plan(
        rng, plan, "box", "train", 40, 1.0, 4.0)
    offs = []
    for ep in eps:
        bearing = math.atan2(ep.goal.y - ep.start.y, ep.goal.x - ep.start.x)
        offs.append(abs((ep.start.theta - bearing + math.pi) % (2 * math.pi)
                        - math.pi))
    assert max(offs) > math.pi / 2


def test_generate_split_episodes_disjoint_and_deterministic():
    plans = _plans(4, width=48)
    split_plans = {"train": ["p0", "p1"], "holdout": ["p2"], "val": ["p3"]}
    per_plan = {"train": 3, "holdout": 2, "val": 2}
    a = episodes.generate_split_episodes(9, plans, split_plans, per_plan)
    b = episodes.generate_split_episodes(9, plans, split_plans, per_plan)
    assert [episodes.episode_to_json(e) for e in a] == \
           [episodes.episode_to_json(e) for e in b]
    assert len(a) == 3 * 2 + 2 + 2
    episodes.check_splits_disjoint(a)
    ids = [e.episode_id for e in a]
    assert len(set(ids)) == len(ids)


def test_generate_split_episodes_rejects_shared_plan():
    plans = _plans(2, width=48)
    with pytest.raises(ValueError):
        episodes.generate_split_episodes(
            0, plans, {"train": ["p0"], "val": ["p0"]},
            {"train": 1, "val": 1})


def test_check_splits_disjoint_raises_on_overlap():
    ep = Episode("a", "train", "p0", Pose(1, 1, 0), Pose(2, 2, 0), 1.0)
    ep2 = Episode("b", "val", "p0", Pose(1, 1, 0), Pose(2, 2, 0), 1.0)
    with pytest.raises(ValueError):
        episodes.check_splits_disjoint([ep, ep2])


# -- serialization ---------------------------------------------------------------

def test_jsonl_round_trip_exact(tmp_path):
    plans = _plans(1, width=48)
    eps = _sample_some(plans, count=5)
    path = tmp_path / "eps.jsonl"
    episodes.save_episodes(eps, path)
    back = episodes.load_episodes(path)
    assert len(back) == len(eps)
    for a, b in zip(eps, back):
        assert a.episode_id == b.episode_id and a.plan == b.plan
        assert (a.start.x, a.start.y, a.start.theta) == (b.start.x, b.start.y, b.start.theta)
        assert a.geodesic == b.geodesic  # exact float round trip


def test_load_filters_by_split(tmp_path):
    ep1 = Episode("a", "train", "p0", Pose(1, 1, 0), Pose(2, 2, 0), 1.0)
    ep2 = Episode("b", "val", "p1", Pose(1, 1, 0), Pose(2, 2, 0), 1.0)
    path = tmp_path / "eps.jsonl"
    episodes.save_episodes([ep1, ep2], path)
    assert [e.episode_id for e in episodes.load_episodes(path, split="val")] == ["b"]


# -- environment -------------------------------------------------------------------

def _box_env(**kw):
    plan = open_box_plan(40)  # 4 m walkable box
    plans = {"box": plan}
    ep = Episode("e0", "train", "box",
                 start=Pose(1.0, 2.0, 0.0),
                 goal=Pose(3.0, 2.0, 0.0),
                 geodesic=2.0)
    env = NavEnv(plans, **kw)
    return env, ep


def test_env_observation_shapes_and_goal_constancy():
    env, ep = _box_env()
    obs = env.reset(ep)
    assert obs["rgb"].shape == (3, 32, 32) and obs["rgb"].dtype == np.float32
    assert obs["goal"].shape == (3, 32, 32)
    g0 = obs["goal"].copy()
    obs2, _, _, _ = env.step(Action.FORWARD)
    np.testing.assert_array_equal(obs2["goal"], g0)
    assert np.abs(obs2["rgb"] - obs["rgb"]).max() > 0  # view changed


def test_forward_toward_goal_earns_positive_shaped_reward():
    env, ep = _box_env()
    env.reset(ep)
    _, reward, done, info = env.step(Action.FORWARD)
    assert not done
    assert reward == pytest.approx(0.25 - 0.01, abs=0.06)


def test_stop_near_goal_is_success_with_bonus():
    env, ep = _box_env()
    env.reset(ep)
    for _ in range(8):  # 8 x 0.25 m = 2 m straight at the goal
        _, _, done, _ = env.step(Action.FORWARD)
        assert not done
    _, reward, done, info = env.step(Action.STOP)
    assert done and info["outcome"] == episodes.OUTCOME_SUCCESS
    assert reward == pytest.approx(10.0 - 0.01)


def test_stop_far_from_goal_is_early_stop():
    env, ep = _box_env()
    env.reset(ep)
    _, reward, done, info = env.step(Action.STOP)
    assert done and info["outcome"] == episodes.OUTCOME_EARLY_STOP
    assert reward == pytest.approx(-0.01)


def test_budget_exhaustion_is_timeout():
    env, ep = _box_env(max_steps=5)
    env.reset(ep)
    outcome = None
    for _ in range(5):
        _, _, done, info = env.step(Action.TURN_LEFT)
        outcome = info["outcome"]
    assert done and outcome == episodes.OUTCOME_TIMEOUT


def test_reward_telescopes_to_distance_drop():
    rng = np.random.default_rng(1)
    plans = _plans(2, width=48)
    cache = episodes.FieldCache()
    env = NavEnv(plans, max_steps=60, field_cache=cache)
    for trial in range(20):
        pid = list(plans)[trial % 2]
        eps = episodes.sample_episodes_for_plan(
            rng, plans[pid], pid, "t", 1, start_index=trial)
        ep = eps[0]
        env.reset(ep)
        d0 = env.prev_distance
        total = 0.0
        n_steps = 0
        success_bonus = 0.0
        done = False
        while not done:
            action = int(rng.choice([Action.FORWARD, Action.TURN_LEFT,
                                     Action.TURN_RIGHT, Action.STOP],
                                    p=[0.5, 0.2, 0.2, 0.1]))
            _, r, done, info = env.step(action)
            total += r
            n_steps += 1
            if info["outcome"] == episodes.OUTCOME_SUCCESS:
                success_bonus = env.success_reward
        d_end = env.prev_distance
        residual = total + n_steps * env.step_penalty - success_bonus - (d0 - d_end)
        assert abs(residual) < 1e-6


def test_sliding_flag_changes_wall_behavior():
    plan = open_box_plan(40)
    ep = Episode("e", "t", "box", Pose(3.9, 2.0, math.pi / 4), Pose(1.0, 1.0, 0.0), 2.0)
    slide_env = NavEnv({"box": plan}, sliding=True)
    stick_env = NavEnv({"box": plan}, sliding=False)
    slide_env.reset(ep)
    stick_env.reset(ep)
    slide_env.step(Action.FORWARD)
    stick_env.step(Action.FORWARD)
    assert stick_env.pose.x == ep.start.x and stick_env.pose.y == ep.start.y
    assert slide_env.pose.y > ep.start.y


def test_field_cache_hits_on_repeat_goal():
    plans = _plans(1, width=48)
    cache = episodes.FieldCache()
    env = NavEnv(plans, field_cache=cache)
    eps = _sample_some(plans, count=1)
    env.reset(eps[0])
    assert cache.misses == 1
    env.reset(eps[0])
    assert cache.hits == 1
