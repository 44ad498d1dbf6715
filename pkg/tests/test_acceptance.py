"""Acceptance gate: one test per promised behavior, one printed line each.

Cheap properties re-run inline at their stated tolerances.  The training
studies assert from artifacts under results/ produced by the scripts in
experiments/; a missing artifact fails the test and names the command that
produces it.  Run with ``pytest tests/test_acceptance.py -v -s``.
"""
from __future__ import annotations

import heapq
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from navlab import autodiff as ad
from navlab import world
from navlab.agent import AgentConfig, build_agent
from navlab.autodiff import Tensor
from navlab.encoders import EncoderConfig
from navlab.episodes import NavEnv, FieldCache, sample_episodes_for_plan
from navlab.evaluation import EvalRecord, EvalReport, evaluate_oracle
from navlab.gradcheck_suite import run_gradcheck_suite
from navlab.probing import (compute_visibility, probe_loss,
                            generate_probe_dataset, pairs_to_array)
from navlab.rl import Adam, EnvPool, PPOConfig, collect_rollouts, ppo_update
from navlab.transfer import (FINETUNE, FROZEN, SCRATCH, GROUPS, GroupSpec,
                             assemble_agent, load_checkpoint, save_checkpoint,
                             transfer_study_specs)

from _helpers import (BanditEnv, BanditEpisode, bandit_expected_reward,
                      visibility_oracle)

RESULTS = Path(__file__).resolve().parent.parent / "results"


def ok(line: str) -> None:
    print(f"\nPASS {line}", flush=True)


def artifact(rel: str, producer: str) -> dict:
    path = RESULTS / rel
    if not path.exists():
        pytest.fail(f"missing artifact {path}; produce it with: {producer}")
    return json.loads(path.read_text())


def tiny_agent(seed=0, image_size=16):
    enc = EncoderConfig(kind="channel_cat", image_size=image_size,
                        embed_dim=32, cnn_widths=(8, 8, 16, 16))
    cfg = AgentConfig(encoder=enc, hidden_size=32, gru_layers=2,
                      action_embed_dim=8)
    return build_agent(cfg, seed=seed)


# ---------------------------------------------------------------------------
# autodiff
# ---------------------------------------------------------------------------

def test_autodiff_gradcheck_five_seeds_under_five_minutes():
    t0 = time.time()
    worst = run_gradcheck_suite(seeds=5, tolerance=1e-4)
    dt = time.time() - t0
    assert worst < 1e-4
    assert dt < 300.0
    ok(f"autodiff: every kernel and encoder, 5 seeds, worst relative error "
       f"{worst:.3e} < 1e-4 in {dt:.0f} s")


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _dijkstra_field(plan: world.FloorPlan, goal_xy) -> np.ndarray:
    """Textbook heap Dijkstra over (straight, diagonal) move counts.

    Independent of the library's search; shares only the conversion of move
    counts to meters.  Diagonal steps need both orthogonal neighbors free.
    """
    occ = plan.inflated()
    h, w = occ.shape
    giy, gix = world.cell_of(plan, *goal_xy)
    straight = np.full((h, w), -1, dtype=np.int64)
    diagonal = np.full((h, w), -1, dtype=np.int64)
    if occ[giy, gix]:
        return world.step_counts_to_meters(straight, diagonal, plan.cell_size)
    sqrt2 = math.sqrt(2.0)
    best: dict[tuple[int, int], float] = {(giy, gix): 0.0}
    heap = [(0.0, giy, gix, 0, 0)]
    while heap:
        cost, iy, ix, s, d = heapq.heappop(heap)
        if cost > best.get((iy, ix), math.inf):
            continue
        if straight[iy, ix] < 0:
            straight[iy, ix], diagonal[iy, ix] = s, d
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                ny, nx = iy + dy, ix + dx
                if not (0 <= ny < h and 0 <= nx < w) or occ[ny, nx]:
                    continue
                diag = dy != 0 and dx != 0
                if diag and (occ[iy + dy, ix] or occ[iy, ix + dx]):
                    continue
                ncost = cost + (sqrt2 if diag else 1.0)
                if ncost < best.get((ny, nx), math.inf):
                    best[(ny, nx)] = ncost
                    heapq.heappush(heap, (ncost, ny, nx,
                                          s + (0 if diag else 1),
                                          d + (1 if diag else 0)))
    return world.step_counts_to_meters(straight, diagonal, plan.cell_size)


def test_geodesic_field_matches_independent_dijkstra_on_100_plans():
    rng = np.random.default_rng(100)
    for i in range(100):
        plan = world.generate_floorplan(1000 + i, width=40, height=40)
        goal = world.sample_free_pose(rng, plan)
        got = world.distance_field(plan, (goal.x, goal.y))
        want = _dijkstra_field(plan, (goal.x, goal.y))
        assert np.array_equal(got, want), f"plan {1000 + i} disagrees"
    ok("geometry: geodesic distance equals heap-Dijkstra oracle exactly on "
       "100 random plans")


def test_step_dynamics_fuzz_never_embeds_10k_cases():
    rng = np.random.default_rng(101)
    cases = 0
    while cases < 10_000:
        plan = world.generate_floorplan(int(rng.integers(2000, 2020)),
                                        width=48, height=48)
        for sliding in (True, False):
            pose = world.sample_free_pose(rng, plan)
            for _ in range(250):
                action = int(rng.integers(0, world.NUM_ACTIONS))
                pose, _ = world.step_dynamics(plan, pose, action, sliding)
                assert world.is_free(plan, pose.x, pose.y), \
                    f"embedded at {pose} sliding={sliding}"
                cases += 1
    ok(f"geometry: step dynamics fuzz, {cases} cases over both sliding "
       f"modes, agent never embedded in an obstacle")


# ---------------------------------------------------------------------------
# reward telescoping
# ---------------------------------------------------------------------------

def test_reward_telescopes_over_100_random_episodes():
    rng = np.random.default_rng(102)
    plan = world.generate_floorplan(42, width=48, height=48)
    plans = {"p": plan}
    eps = sample_episodes_for_plan(rng, plan, "p", "t", 100, 1.0, 6.0)
    env = NavEnv(plans, sliding=True, field_cache=FieldCache())
    worst = 0.0
    for ep in eps:
        env.reset(ep)
        d0 = env.prev_distance
        total, steps, success = 0.0, 0, False
        done = False
        while not done:
            action = int(rng.integers(0, world.NUM_ACTIONS))
            _, r, done, info = env.step(action)
            total += r
            steps += 1
        success = info["outcome"] == "success"
        d_end = env.prev_distance
        closed = 10.0 * success - (d_end - d0) - 0.01 * steps
        worst = max(worst, abs(total - closed))
    assert worst < 1e-6
    ok(f"reward: telescoping identity over 100 random-policy episodes, "
       f"worst |drift| {worst:.2e} < 1e-6")


# ---------------------------------------------------------------------------
# SPL
# ---------------------------------------------------------------------------

def test_spl_bounded_by_sr_and_oracle_aces_200_corridors():
    rng = np.random.default_rng(103)
    for trial in range(50):
        n = int(rng.integers(1, 20))
        records = []
        for i in range(n):
            outcome = "success" if rng.random() < 0.5 else "timeout"
            records.append(EvalRecord(
                episode_id=f"e{trial}-{i}", outcome=outcome,
                success=int(outcome == "success"),
                path_length=float(rng.uniform(0, 9)),
                geodesic=float(rng.uniform(1, 8))))
        rep = EvalReport(report_id=f"r{trial}", records=records)
        assert rep.spl <= rep.sr + 1e-12

    episodes, plans = [], {}
    for i in range(20):
        pid = f"c{i}"
        plans[pid] = world.generate_corridor_plan(3000 + i,
                                                  length_m=rng.uniform(6, 10))
        episodes.extend(sample_episodes_for_plan(
            rng, plans[pid], pid, "val", 10, 1.5, 7.0, start_index=10 * i))
    report = evaluate_oracle(plans, episodes[:200], sliding=True)
    assert report.sr == 1.0
    assert report.spl >= 0.9
    ok(f"spl: SPL <= SR on randomized reports; oracle on 200 corridor "
       f"episodes SR {report.sr:.0%}, SPL {report.spl:.3f} >= 0.9")


# ---------------------------------------------------------------------------
# visibility
# ---------------------------------------------------------------------------

def test_visibility_equals_bruteforce_oracle_on_1000_pairs():
    rng = np.random.default_rng(104)
    done = 0
    plan_seed = 0
    while done < 1000:
        plan = world.generate_floorplan(4000 + plan_seed, width=48, height=48)
        plan_seed += 1
        for _ in range(100):
            a = world.sample_free_pose(rng, plan)
            b = world.sample_free_pose(rng, plan)
            got = compute_visibility(plan, a, b, image_width=32)
            want = visibility_oracle(plan, a, b, image_width=32)
            assert got == want, f"pair {done}: {got} != {want}"
            done += 1
            if done >= 1000:
                break
    ok("visibility: matches the brute-force per-column oracle exactly on "
       "1000 random pose pairs")


# ---------------------------------------------------------------------------
# loss gate
# ---------------------------------------------------------------------------

def test_pose_loss_ignores_records_at_or_below_tau_exactly():
    rng = np.random.default_rng(105)
    n, tau = 64, 0.25
    t_star = rng.normal(size=(n, 2))
    angles = rng.uniform(-np.pi, np.pi, size=n)
    r_star = np.stack([np.stack([np.cos(angles), -np.sin(angles)], axis=1),
                       np.stack([np.sin(angles), np.cos(angles)], axis=1)],
                      axis=1)
    v_star = rng.uniform(0.0, 1.0, size=n)
    v_star[: n // 2] = rng.uniform(0.0, tau, size=n // 2)  # gated half
    t_pred = rng.normal(size=(n, 2))
    r_pred = rng.normal(size=(n, 2, 2))
    v_pred = rng.uniform(0.01, 0.99, size=n)

    base = float(probe_loss(Tensor(t_pred), Tensor(r_pred), Tensor(v_pred),
                            t_star, r_star, v_star, tau).data)
    t_mod, r_mod = t_pred.copy(), r_pred.copy()
    gated = v_star <= tau
    t_mod[gated] += rng.normal(size=(gated.sum(), 2)) * 100.0
    r_mod[gated] += rng.normal(size=(gated.sum(), 2, 2)) * 100.0
    new = float(probe_loss(Tensor(t_mod), Tensor(r_mod), Tensor(v_pred),
                           t_star, r_star, v_star, tau).data)
    assert new - base == 0.0
    ok("loss gate: perturbing pose predictions on records with target "
       "visibility <= tau changes the loss by exactly 0")


# ---------------------------------------------------------------------------
# freeze / transfer semantics
# ---------------------------------------------------------------------------

def test_frozen_groups_bit_identical_across_1000_updates(tmp_path):
    donor = tiny_agent(seed=11)
    ckpt = tmp_path / "donor.ckpt"
    save_checkpoint(donor, {"init": "scratch"}, ckpt)
    spec = {"phi": GroupSpec(FROZEN, str(ckpt)),
            "zeta": GroupSpec(FROZEN, str(ckpt)),
            "h": GroupSpec(FINETUNE, str(ckpt)),
            "pi": GroupSpec(SCRATCH)}
    agent = assemble_agent(donor.config, spec, seed=12)
    frozen_bits = {p.name: p.data.copy()
                   for g in ("phi", "zeta")
                   for p in agent.parameter_groups()[g]}
    live_names = [p.name for p in agent.parameter_groups()["h"]]
    live_bits = {n: agent.named_parameters()[n].data.copy()
                 for n in live_names}

    config = PPOConfig(total_steps=10**9, num_lanes=4, rollout_length=8,
                       ppo_epochs=1, num_minibatches=1, segment_len=8,
                       lr=1e-3, eval_every=10**9, checkpoint_every=10**9)
    episodes = [BanditEpisode(0), BanditEpisode(1)]
    envs = [BanditEnv(16) for _ in range(config.num_lanes)]
    pool = EnvPool(envs, episodes, np.random.default_rng(13))
    pool.reset_all()
    state = [np.zeros((config.num_lanes, 32)) for _ in range(2)]
    prev = np.full(config.num_lanes, agent.START_ACTION, dtype=np.int64)
    opt = Adam(agent.parameters(), lr=config.lr, eps=config.adam_eps)
    act_rng = np.random.default_rng(14)
    shuffle_rng = np.random.default_rng(15)
    for _ in range(1000):
        buf = collect_rollouts(agent, pool, state, prev, config, act_rng)
        ppo_update(agent, opt, buf, config, shuffle_rng)
    params = agent.named_parameters()
    for name, bits in frozen_bits.items():
        assert np.array_equal(params[name].data, bits), f"{name} drifted"
    assert any(not np.array_equal(params[n].data, live_bits[n])
               for n in live_names), "finetuned group never moved"
    ok("transfer: frozen groups bit-identical across 1000 PPO updates while "
       "finetuned groups train")


def test_assemble_agent_reproduces_every_transfer_row(tmp_path):
    cfg_agent = tiny_agent(seed=21)
    ckpt_true = tmp_path / "true.ckpt"
    ckpt_false = tmp_path / "false.ckpt"
    save_checkpoint(cfg_agent, {"sliding": True}, ckpt_true)
    save_checkpoint(tiny_agent(seed=22), {"sliding": False}, ckpt_false)
    sources = {str(ckpt_true): load_checkpoint(ckpt_true),
               str(ckpt_false): load_checkpoint(ckpt_false)}

    rows = transfer_study_specs(ckpt_true, ckpt_false)
    assert len(rows) == 7
    for row_name, spec in rows.items():
        agent = assemble_agent(cfg_agent.config, spec, seed=23)
        groups = agent.parameter_groups()
        for gname, gspec in spec.items():
            group_params = {p.name: p for p in groups[gname]}
            if gspec.mode == SCRATCH:
                continue
            src = sources[str(gspec.source)].groups[gname]
            for pname, p in group_params.items():
                assert np.array_equal(p.data, src[pname]), \
                    f"{row_name}: {pname} not loaded"
                assert p.frozen == (gspec.mode == FROZEN), \
                    f"{row_name}: {pname} frozen flag wrong"
    ok("transfer: assemble_agent reproduces all 7 transfer-table rows with "
       "correct loads and frozen flags")


def test_checkpoint_save_load_roundtrip_bit_exact(tmp_path):
    agent = tiny_agent(seed=31)
    path = tmp_path / "agent.ckpt"
    save_checkpoint(agent, {"note": "roundtrip"}, path)
    ckpt = load_checkpoint(path)
    assert ckpt.config.to_json() == agent.config.to_json()
    params = agent.named_parameters()
    for gname, gparams in ckpt.groups.items():
        for pname, data in gparams.items():
            assert np.array_equal(data, params[pname].data)
            assert data.dtype == params[pname].data.dtype
    again = tmp_path / "again.ckpt"
    spec = {g: GroupSpec(FINETUNE, str(path)) for g in GROUPS}
    clone = assemble_agent(ckpt.config, spec, seed=0)
    save_checkpoint(clone, {"note": "roundtrip"}, again)
    assert again.read_bytes() == path.read_bytes()
    ok("transfer: checkpoint save/load round-trips bit-exact, including a "
       "byte-identical re-save")


# ---------------------------------------------------------------------------
# PPO sanity
# ---------------------------------------------------------------------------

def test_bandit_mean_reward_strictly_improves_over_50_updates():
    agent = tiny_agent(seed=3)
    config = PPOConfig(total_steps=10**9, num_lanes=16, rollout_length=16,
                       ppo_epochs=4, num_minibatches=4, segment_len=16,
                       lr=3e-4, entropy_coef=0.0, value_coef=0.5,
                       normalize_advantages=False,
                       eval_every=10**9, checkpoint_every=10**9)
    episodes = [BanditEpisode(0), BanditEpisode(1)]
    envs = [BanditEnv(16) for _ in range(config.num_lanes)]
    pool = EnvPool(envs, episodes, np.random.default_rng(5))
    pool.reset_all()
    state = [np.zeros((config.num_lanes, 32)) for _ in range(2)]
    prev = np.full(config.num_lanes, agent.START_ACTION, dtype=np.int64)
    opt = Adam(agent.parameters(), lr=config.lr, eps=config.adam_eps)
    act_rng = np.random.default_rng(6)
    shuffle_rng = np.random.default_rng(7)
    values = [bandit_expected_reward(agent)]
    for _ in range(50):
        buf = collect_rollouts(agent, pool, state, prev, config, act_rng)
        ppo_update(agent, opt, buf, config, shuffle_rng)
        values.append(bandit_expected_reward(agent))
    deltas = np.diff(values)
    assert np.all(deltas > 0), f"non-monotone at update {np.argmin(deltas)}"
    ok(f"ppo: two-state bandit expected reward strictly improves across all "
       f"50 updates ({values[0]:.3f} -> {values[-1]:.3f})")


def test_empty_room_sr_80_within_500k_steps():
    summary = artifact("sanity_empty_room/summary.json",
                       "python3 experiments/run_sanity.py")
    assert summary["env_steps"] <= 500_000
    best = summary["best"]
    assert best is not None, "no holdout checkpoint was recorded"
    sr = best["holdout_sr"]
    assert sr >= 0.80, f"best holdout SR {sr:.2%} < 80%"
    ok(f"ppo: goal-visible empty room reached holdout SR {sr:.0%} at "
       f"{best['env_steps']} env steps (budget 500k)")


# ---------------------------------------------------------------------------
# study artifacts
# ---------------------------------------------------------------------------

def test_fusion_sliding_ordering_at_2m_steps():
    summary = artifact("ordering/ordering_summary.json",
                       "bash experiments/run_ordering.sh")
    means = summary["means"]
    cc_true = means["channelcat_true"]
    late_true = means["late_true"]
    cc_false = means["channelcat_false"]
    for key in ("channelcat_true", "late_true", "channelcat_false"):
        assert len(summary["runs"][key]) == 3, f"{key} needs 3 seeds"
    assert cc_true >= late_true + 0.15, \
        f"ChannelCat {cc_true:.2%} vs LateFusion {late_true:.2%}: gap < 15"
    assert cc_false <= cc_true - 0.15, \
        f"sliding=false {cc_false:.2%} vs true {cc_true:.2%}: drop < 15"
    ok(f"ordering: ChannelCat {cc_true:.0%} >= LateFusion {late_true:.0%} "
       f"+ 15 and sliding=false {cc_false:.0%} <= ChannelCat - 15 "
       f"(3 seeds, 2M steps)")


def test_transfer_direction_loaded_finetuned_beats_scratch():
    summary = artifact("transfer/transfer_summary.json",
                       "bash experiments/run_transfer.sh")
    loaded = summary["means"]["load_all_true_finetune"]
    scratch = summary["means"]["scratch_false"]
    assert len(summary["runs"]["load_all_true_finetune"]) == 3
    assert loaded >= scratch, \
        f"loaded+finetuned {loaded:.2%} < scratch {scratch:.2%}"
    ok(f"transfer: loading the sliding=true agent and finetuning under "
       f"sliding=false scores {loaded:.0%} >= scratch {scratch:.0%} "
       f"(mean of 3 seeds)")


def test_probing_floor_and_supervised_emergence():
    summary = artifact("probing/probing_summary.json",
                       "bash experiments/run_probing.sh")
    floor = summary["baseline"]["pose_acc_2m_20deg"]
    untrained = summary["untrained"]["pose_acc_2m_20deg"]
    trained = summary["supervised_cross_attention"]["pose_acc_2m_20deg"]
    assert abs(untrained - floor) <= 0.05, \
        f"untrained probe {untrained:.2%} vs floor {floor:.2%}: outside 5"
    assert trained >= floor + 0.20, \
        f"supervised {trained:.2%} < floor {floor:.2%} + 20"
    ok(f"probing: untrained encoder {untrained:.0%} within 5 of floor "
       f"{floor:.0%}; supervised cross-attention {trained:.0%} >= floor + "
       f"20 at (2m, 20deg) on held-out plans")
