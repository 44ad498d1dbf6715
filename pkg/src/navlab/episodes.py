"""Episode sampling, serialization and the navigation environment.

An episode is a (plan, start pose, goal pose) triple with its geodesic
start-to-goal distance.  Episodes live in JSONL files split into disjoint
groups of floor plans, so no plan appears in more than one split.

The environment observes a first-person view and the goal view, and rewards
each step with the drop in geodesic distance to the goal minus a constant
slack, plus a terminal bonus for stopping near the goal.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import world
from .world import Action, FloorPlan, Pose

SUCCESS_DISTANCE = 1.0
SUCCESS_REWARD = 10.0
STEP_PENALTY = 0.01
DEFAULT_MAX_STEPS = 200

OUTCOME_SUCCESS = "success"
OUTCOME_EARLY_STOP = "early_stop"
OUTCOME_TIMEOUT = "timeout"
OUTCOMES = (OUTCOME_SUCCESS, OUTCOME_EARLY_STOP, OUTCOME_TIMEOUT)


@dataclass
class Episode:
    episode_id: str
    split: str
    plan: str
    start: Pose
    goal: Pose
    geodesic: float


def episode_to_json(ep: Episode) -> dict:
    return {
        "episode_id": ep.episode_id,
        "split": ep.split,
        "plan": ep.plan,
        "start": [ep.start.x, ep.start.y, ep.start.theta],
        "goal": [ep.goal.x, ep.goal.y, ep.goal.theta],
        "geodesic": ep.geodesic,
    }


def episode_from_json(obj: dict) -> Episode:
    return Episode(
        episode_id=str(obj["episode_id"]),
        split=str(obj["split"]),
        plan=str(obj["plan"]),
        start=Pose(*[float(v) for v in obj["start"]]),
        goal=Pose(*[float(v) for v in obj["goal"]]),
        geodesic=float(obj["geodesic"]),
    )


def save_episodes(episodes: list[Episode], path: str | Path) -> None:
    with open(path, "w") as f:
        for ep in episodes:
            f.write(json.dumps(episode_to_json(ep)) + "\n")


def load_episodes(path: str | Path, split: str | None = None) -> list[Episode]:
    episodes = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                episodes.append(episode_from_json(json.loads(line)))
    if split is not None:
        episodes = [ep for ep in episodes if ep.split == split]
    return episodes


def check_splits_disjoint(episodes: list[Episode]) -> None:
    """Raise when any floor plan appears in more than one split."""
    seen: dict[str, str] = {}
    for ep in episodes:
        prev = seen.get(ep.plan)
        if prev is not None and prev != ep.split:
            raise ValueError(f"plan {ep.plan} appears in splits {prev} and {ep.split}")
        seen[ep.plan] = ep.split


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_episodes_for_plan(rng: np.random.Generator, plan: FloorPlan,
                             plan_id: str, split: str, count: int,
                             min_geodesic: float = 1.5,
                             max_geodesic: float = 8.0,
                             start_index: int = 0,
                             face_goal_jitter: float | None = None) -> list[Episode]:
    """Draw goal poses, then starts whose geodesic falls in the target band.

    With face_goal_jitter the start heading is drawn within that half-angle
    of the start-to-goal bearing instead of uniformly; at or under half the
    field of view this puts the goal direction inside the first observation.
    """
    episodes: list[Episode] = []
    cs = plan.cell_size
    guard = 0
    while len(episodes) < count:
        guard += 1
        if guard > 50 * count:
            raise RuntimeError(f"cannot place episodes on plan {plan_id}")
        goal = world.sample_free_pose(rng, plan)
        field = world.distance_field(plan, (goal.x, goal.y))
        ok = np.isfinite(field) & (field >= min_geodesic) & (field <= max_geodesic)
        cells = np.argwhere(ok)
        if len(cells) < 10:
            continue
        iy, ix = cells[rng.integers(len(cells))]
        x = (ix + rng.uniform(0.05, 0.95)) * cs
        y = (iy + rng.uniform(0.05, 0.95)) * cs
        if face_goal_jitter is None:
            heading = rng.uniform(-np.pi, np.pi)
        else:
            bearing = math.atan2(goal.y - y, goal.x - x)
            heading = bearing + rng.uniform(-face_goal_jitter,
                                            face_goal_jitter)
        start = Pose(x, y, heading)
        idx = start_index + len(episodes)
        episodes.append(Episode(
            episode_id=f"{split}-{plan_id}-{idx:05d}",
            split=split,
            plan=plan_id,
            start=start,
            goal=goal,
            geodesic=float(field[iy, ix]),
        ))
    return episodes


def generate_split_episodes(seed: int, plans: dict[str, FloorPlan],
                            split_plans: dict[str, list[str]],
                            per_plan: dict[str, int],
                            min_geodesic: float = 1.5,
                            max_geodesic: float = 8.0,
                            face_goal_jitter: float | None = None) -> list[Episode]:
    """Episodes for every split; plan id sets must be pairwise disjoint."""
    ids = [set(v) for v in split_plans.values()]
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            both = ids[i] & ids[j]
            if both:
                raise ValueError(f"plans shared between splits: {sorted(both)}")
    episodes: list[Episode] = []
    for split, plan_ids in split_plans.items():
        for plan_id in plan_ids:
            rng = np.random.default_rng([seed, hash(split) & 0xFFFF,
                                         int(plans[plan_id].seed)])
            episodes.extend(sample_episodes_for_plan(
                rng, plans[plan_id], plan_id, split, per_plan[split],
                min_geodesic, max_geodesic,
                face_goal_jitter=face_goal_jitter))
    check_splits_disjoint(episodes)
    return episodes


# ---------------------------------------------------------------------------
# distance-field cache
# ---------------------------------------------------------------------------

class FieldCache:
    """LRU cache of goal distance fields keyed by (plan id, goal cell)."""

    def __init__(self, max_entries: int = 512):
        self.max_entries = max_entries
        self._store: OrderedDict[tuple, np.ndarray] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def get(self, plan: FloorPlan, plan_id: str,
            goal_xy: tuple[float, float]) -> np.ndarray:
        key = (plan_id, world.cell_of(plan, *goal_xy))
        if key in self._store:
            self._store.move_to_end(key)
            self.hits += 1
            return self._store[key]
        self.misses += 1
        field = world.distance_field(plan, goal_xy)
        self._store[key] = field
        if len(self._store) > self.max_entries:
            self._store.popitem(last=False)
        return field


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------

class NavEnv:
    """Single-episode navigation environment over a library of floor plans.

    Observations are {"rgb", "goal"} float32 images.  The reward of a step is
    the decrease in geodesic distance to the goal minus a constant slack; a
    stop action near the goal earns the terminal bonus.  An episode ends on
    stop or when the step budget runs out.
    """

    def __init__(self, plans: dict[str, FloorPlan], sliding: bool = True,
                 image_size: int = 32, max_steps: int = DEFAULT_MAX_STEPS,
                 success_distance: float = SUCCESS_DISTANCE,
                 success_reward: float = SUCCESS_REWARD,
                 step_penalty: float = STEP_PENALTY,
                 field_cache: FieldCache | None = None):
        self.plans = plans
        self.sliding = sliding
        self.image_size = image_size
        self.max_steps = max_steps
        self.success_distance = success_distance
        self.success_reward = success_reward
        self.step_penalty = step_penalty
        self.cache = field_cache if field_cache is not None else FieldCache()
        self.episode: Episode | None = None
        self.plan: FloorPlan | None = None
        self.pose: Pose | None = None
        self.field: np.ndarray | None = None
        self.goal_image: np.ndarray | None = None
        self.steps = 0
        self.prev_distance = 0.0
        self.path_length = 0.0

    def _distance(self) -> float:
        iy, ix = world.cell_of(self.plan, self.pose.x, self.pose.y)
        return float(self.field[iy, ix])

    def _observe(self) -> dict[str, np.ndarray]:
        rgb = world.render(self.plan, self.pose,
                           width=self.image_size, height=self.image_size)
        return {"rgb": rgb, "goal": self.goal_image}

    def reset(self, episode: Episode) -> dict[str, np.ndarray]:
        self.episode = episode
        self.plan = self.plans[episode.plan]
        self.pose = Pose(episode.start.x, episode.start.y, episode.start.theta)
        self.field = self.cache.get(self.plan, episode.plan,
                                    (episode.goal.x, episode.goal.y))
        self.goal_image = world.render(self.plan, episode.goal,
                                       width=self.image_size,
                                       height=self.image_size)
        self.steps = 0
        self.path_length = 0.0
        self.prev_distance = self._distance()
        return self._observe()

    def step(self, action: int) -> tuple[dict[str, np.ndarray], float, bool, dict]:
        if self.episode is None:
            raise RuntimeError("step before reset")
        self.steps += 1
        info: dict = {"collided": False, "outcome": None}
        if action == Action.STOP:
            dist = self.prev_distance
            success = dist <= self.success_distance
            reward = (self.success_reward if success else 0.0) - self.step_penalty
            info["outcome"] = OUTCOME_SUCCESS if success else OUTCOME_EARLY_STOP
            info["distance"] = dist
            info["path_length"] = self.path_length
            return self._observe(), reward, True, info
        before = self.pose
        self.pose, collided = world.step_dynamics(self.plan, self.pose,
                                                  action, self.sliding)
        self.path_length += float(np.hypot(self.pose.x - before.x,
                                           self.pose.y - before.y))
        dist = self._distance()
        reward = -(dist - self.prev_distance) - self.step_penalty
        self.prev_distance = dist
        done = self.steps >= self.max_steps
        info["collided"] = collided
        info["distance"] = dist
        info["path_length"] = self.path_length
        if done:
            info["outcome"] = OUTCOME_TIMEOUT
        return self._observe(), reward, done, info
