"""Navigation metrics, scripted-oracle baselines, and episode-flow accounting.

An evaluation rolls a policy greedily over a fixed episode set and records,
per episode, the outcome, whether it succeeded, the realized path length
(translation only; turns in place add nothing) and the shortest-path length.
SPL weights success rate by path optimality, so it can never exceed it.
A flow matrix counts, over episodes two reports share, how outcomes moved
when switching from one model to the other.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import world
from .agent import NavAgent
from .autodiff import no_grad
from .episodes import (
    DEFAULT_MAX_STEPS,
    OUTCOME_EARLY_STOP,
    OUTCOME_SUCCESS,
    OUTCOME_TIMEOUT,
    Episode,
    FieldCache,
    NavEnv,
)
from .world import Action, FloorPlan, Pose

OUTCOMES = (OUTCOME_SUCCESS, OUTCOME_EARLY_STOP, OUTCOME_TIMEOUT)


@dataclass
class EvalRecord:
    episode_id: str
    outcome: str
    success: int
    path_length: float
    geodesic: float

    def __post_init__(self) -> None:
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if self.geodesic <= 0.0:
            raise ValueError(f"episode {self.episode_id}: shortest-path "
                             f"length must be positive, got {self.geodesic}")
        if self.success not in (0, 1):
            raise ValueError("success must be 0 or 1")


def success_rate(records: list[EvalRecord]) -> float:
    if not records:
        raise ValueError("success rate over an empty record set is undefined")
    return float(np.mean([r.success for r in records]))


def spl(records: list[EvalRecord]) -> float:
    """Success weighted by path optimality: mean of S * l_opt / max(l, l_opt)."""
    if not records:
        raise ValueError("SPL over an empty record set is undefined")
    terms = [r.success * r.geodesic / max(r.path_length, r.geodesic)
             for r in records]
    return float(np.mean(terms))


def outcome_histogram(records: list[EvalRecord]) -> dict[str, int]:
    hist = {name: 0 for name in OUTCOMES}
    for r in records:
        hist[r.outcome] += 1
    return hist


@dataclass
class EvalReport:
    report_id: str
    records: list[EvalRecord]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [r.episode_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate episode ids in report")

    @property
    def sr(self) -> float:
        return success_rate(self.records)

    @property
    def spl(self) -> float:
        return spl(self.records)

    @property
    def histogram(self) -> dict[str, int]:
        return outcome_histogram(self.records)

    def to_json(self) -> dict:
        return {
            "report_id": self.report_id,
            "provenance": self.provenance,
            "records": [{
                "episode_id": r.episode_id,
                "outcome": r.outcome,
                "success": r.success,
                "path_length": r.path_length,
                "geodesic": r.geodesic,
            } for r in self.records],
            "aggregates": {
                "sr": self.sr,
                "spl": self.spl,
                "outcomes": self.histogram,
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> EvalReport:
        records = [EvalRecord(episode_id=r["episode_id"], outcome=r["outcome"],
                              success=int(r["success"]),
                              path_length=float(r["path_length"]),
                              geodesic=float(r["geodesic"]))
                   for r in obj["records"]]
        return cls(report_id=obj["report_id"], records=records,
                   provenance=obj.get("provenance", {}))


# ---------------------------------------------------------------------------
# policy evaluation
# ---------------------------------------------------------------------------

def evaluate(agent: NavAgent, plans: dict[str, FloorPlan],
             episodes: list[Episode], sliding: bool = True,
             report_id: str = "eval", batch_size: int = 16,
             max_steps: int = DEFAULT_MAX_STEPS,
             field_cache: FieldCache | None = None,
             provenance: dict | None = None) -> EvalReport:
    """Greedy rollout of every episode; lanes refill as episodes finish."""
    if not episodes:
        raise ValueError("no episodes to evaluate")
    cache = field_cache if field_cache is not None else FieldCache()
    image_size = agent.config.encoder.image_size
    lanes = min(batch_size, len(episodes))
    queue = deque(episodes)
    envs = [NavEnv(plans, sliding=sliding, image_size=image_size,
                   max_steps=max_steps, field_cache=cache)
            for _ in range(lanes)]
    obs = [env.reset(queue.popleft()) for env in envs]
    state = agent.initial_state(lanes)
    prev = np.full(lanes, NavAgent.START_ACTION, dtype=np.int64)
    active = [True] * lanes
    records: list[EvalRecord] = []
    with no_grad():
        while any(active):
            idx = [i for i in range(lanes) if active[i]]
            rgb = np.stack([obs[i]["rgb"] for i in idx])
            goal = np.stack([obs[i]["goal"] for i in idx])
            sub_state = [layer[idx] for layer in state]
            actions, _, _, new_state = agent.act(rgb, goal, prev[idx],
                                                 sub_state, greedy=True)
            for layer, new_layer in zip(state, new_state):
                layer[idx] = new_layer
            for k, i in enumerate(idx):
                env = envs[i]
                o, _, done, info = env.step(int(actions[k]))
                obs[i] = o
                prev[i] = int(actions[k])
                if not done:
                    continue
                records.append(EvalRecord(
                    episode_id=env.episode.episode_id,
                    outcome=info["outcome"],
                    success=int(info["outcome"] == OUTCOME_SUCCESS),
                    path_length=float(info["path_length"]),
                    geodesic=float(env.episode.geodesic)))
                if queue:
                    obs[i] = env.reset(queue.popleft())
                    for layer in state:
                        layer[i] = 0.0
                    prev[i] = NavAgent.START_ACTION
                else:
                    active[i] = False
    prov = dict(provenance or {})
    prov.setdefault("sliding", sliding)
    prov.setdefault("selection", "greedy")
    return EvalReport(report_id=report_id, records=records, provenance=prov)


# ---------------------------------------------------------------------------
# scripted oracle
# ---------------------------------------------------------------------------

def _wrap_angle(a: float) -> float:
    return float((a + np.pi) % (2.0 * np.pi) - np.pi)


class OracleAgent:
    """Shortest-path follower with full map access.

    Stops once the geodesic distance is inside the success radius.  Otherwise
    it aligns with the farthest directly-visible cell of the steepest-descent
    path before walking (turns add no path length, so aligning first keeps
    the walked length near the geodesic), and recovers from blocked forward
    steps by simulating turn-then-forward options with the real dynamics.
    Serves as the upper baseline: it should succeed on every reachable
    episode.
    """

    def __init__(self, plan: FloorPlan, field_to_goal: np.ndarray,
                 success_distance: float, sliding: bool, lookahead: int = 40):
        self.plan = plan
        self.field = field_to_goal
        self.success_distance = success_distance
        self.sliding = sliding
        self.lookahead = lookahead
        self._occ = plan.inflated()
        self._committed_heading: float | None = None

    def _waypoint(self, pose: Pose) -> tuple[float, float] | None:
        path = world.greedy_descent_path(self.plan, self.field,
                                         (pose.x, pose.y))
        if len(path) < 2:
            return None
        best = world.cell_center(self.plan, *path[1])
        for k in range(2, min(self.lookahead, len(path) - 1) + 1):
            target = world.cell_center(self.plan, *path[k])
            blocked, _ = world.segment_hits(self._occ, self.plan.cell_size,
                                            (pose.x, pose.y), target)
            if blocked:
                break
            best = target
        return best

    def _field_at(self, pose: Pose) -> float:
        iy, ix = world.cell_of(self.plan, pose.x, pose.y)
        return float(self.field[iy, ix])

    def _forward_works(self, pose: Pose, max_field: float) -> bool:
        nxt, _ = world.step_dynamics(self.plan, pose, Action.FORWARD,
                                     self.sliding)
        moved = float(np.hypot(nxt.x - pose.x, nxt.y - pose.y))
        return moved > 0.05 and self._field_at(nxt) <= max_field

    def _recovery_heading(self, pose: Pose) -> float:
        """Nearest heading from which a forward step descends."""
        f0 = self._field_at(pose)
        for accept_rise in (False, True):
            limit = f0 + (np.inf if accept_rise else 1e-9)
            for k in range(1, 18):
                for sign in (1, -1):
                    theta = pose.theta + sign * k * world.TURN_STEP
                    if self._forward_works(Pose(pose.x, pose.y, theta), limit):
                        return theta
        return pose.theta + np.pi

    def action_for(self, pose: Pose) -> int:
        if self._field_at(pose) <= self.success_distance:
            return int(Action.STOP)
        if self._committed_heading is not None:
            err = _wrap_angle(self._committed_heading - pose.theta)
            if abs(err) > 1e-6:
                return int(Action.TURN_LEFT if err > 0 else Action.TURN_RIGHT)
            self._committed_heading = None
            return int(Action.FORWARD)
        waypoint = self._waypoint(pose)
        if waypoint is None:
            return int(Action.STOP)
        err = _wrap_angle(np.arctan2(waypoint[1] - pose.y,
                                     waypoint[0] - pose.x) - pose.theta)
        if abs(err) > 0.5 * world.TURN_STEP + 1e-9:
            return int(Action.TURN_LEFT if err > 0 else Action.TURN_RIGHT)
        if self._forward_works(pose, self._field_at(pose) + 1e-9):
            return int(Action.FORWARD)
        self._committed_heading = self._recovery_heading(pose)
        return self.action_for(pose)


def evaluate_oracle(plans: dict[str, FloorPlan], episodes: list[Episode],
                    sliding: bool = True, report_id: str = "oracle",
                    max_steps: int = DEFAULT_MAX_STEPS,
                    field_cache: FieldCache | None = None) -> EvalReport:
    if not episodes:
        raise ValueError("no episodes to evaluate")
    cache = field_cache if field_cache is not None else FieldCache()
    env = NavEnv(plans, sliding=sliding, max_steps=max_steps,
                 field_cache=cache)
    records: list[EvalRecord] = []
    for ep in episodes:
        env.reset(ep)
        oracle = OracleAgent(env.plan, env.field, env.success_distance,
                             sliding=sliding)
        done = False
        info: dict = {}
        while not done:
            action = oracle.action_for(env.pose)
            _, _, done, info = env.step(action)
        records.append(EvalRecord(
            episode_id=ep.episode_id, outcome=info["outcome"],
            success=int(info["outcome"] == OUTCOME_SUCCESS),
            path_length=float(info["path_length"]),
            geodesic=float(ep.geodesic)))
    return EvalReport(report_id=report_id, records=records,
                      provenance={"sliding": sliding, "policy": "oracle"})


# ---------------------------------------------------------------------------
# episode flow between two models
# ---------------------------------------------------------------------------

@dataclass
class FlowMatrix:
    left_id: str
    right_id: str
    counts: np.ndarray  # [3, 3] int, indexed by OUTCOMES order

    @property
    def shared(self) -> int:
        return int(self.counts.sum())

    def to_json(self) -> dict:
        return {
            "left": self.left_id,
            "right": self.right_id,
            "outcomes": list(OUTCOMES),
            "counts": self.counts.astype(int).tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> FlowMatrix:
        if list(obj["outcomes"]) != list(OUTCOMES):
            raise ValueError("flow outcome order mismatch")
        counts = np.asarray(obj["counts"], dtype=np.int64)
        if counts.shape != (3, 3):
            raise ValueError("flow counts must be 3x3")
        return cls(left_id=obj["left"], right_id=obj["right"], counts=counts)


def flow(left: EvalReport, right: EvalReport) -> FlowMatrix:
    """Outcome-transition counts over the episodes both reports contain."""
    right_by_id = {r.episode_id: r for r in right.records}
    index = {name: i for i, name in enumerate(OUTCOMES)}
    counts = np.zeros((3, 3), dtype=np.int64)
    shared = 0
    for rec in left.records:
        other = right_by_id.get(rec.episode_id)
        if other is None:
            continue
        counts[index[rec.outcome], index[other.outcome]] += 1
        shared += 1
    if shared == 0:
        raise ValueError(
            f"reports {left.report_id!r} and {right.report_id!r} share no "
            f"episodes")
    return FlowMatrix(left_id=left.report_id, right_id=right.report_id,
                      counts=counts)


# ---------------------------------------------------------------------------
# report bundle
# ---------------------------------------------------------------------------

def _bundle_schema() -> dict:
    text = resources.files("navlab").joinpath(
        "schemas/report_bundle.schema.json").read_text()
    return json.loads(text)


def validate_bundle(bundle: dict) -> None:
    jsonschema.validate(bundle, _bundle_schema())


def build_bundle(reports: list[EvalReport],
                 flows: list[FlowMatrix] | None = None,
                 probes: dict[str, dict] | None = None) -> dict:
    """Assemble the single JSON artifact the figures component consumes.

    The scatter payload pairs each run's success rate with its pose-probing
    accuracy at the loose threshold; runs without probe metrics are left out
    rather than zero-filled.
    """
    flows = flows or []
    probes = probes or {}
    run_ids = [r.report_id for r in reports]
    if len(set(run_ids)) != len(run_ids):
        raise ValueError("duplicate report ids in bundle")
    for fm in flows:
        known = set(run_ids)
        if fm.left_id not in known or fm.right_id not in known:
            raise ValueError(f"flow references unknown report: "
                             f"{fm.left_id!r} -> {fm.right_id!r}")
    scatter = []
    for r in reports:
        metrics = probes.get(r.report_id)
        if not metrics:
            continue
        acc = metrics.get("pose_acc_2m_20deg")
        if acc is None:
            continue
        scatter.append({"model": r.report_id, "sr": r.sr,
                        "pose_acc_2m_20deg": float(acc)})
    bundle = {
        "version": 1,
        "runs": {r.report_id: r.to_json() for r in reports},
        "flows": [fm.to_json() for fm in flows],
        "probes": probes,
        "scatter": scatter,
    }
    validate_bundle(bundle)
    return bundle


def emit_report(reports: list[EvalReport], flows: list[FlowMatrix] | None,
                probes: dict[str, dict] | None, path: str | Path) -> dict:
    bundle = build_bundle(reports, flows, probes)
    Path(path).write_text(json.dumps(bundle, indent=2, sort_keys=True))
    return bundle


def load_bundle(path: str | Path) -> dict:
    bundle = json.loads(Path(path).read_text())
    validate_bundle(bundle)
    return bundle
