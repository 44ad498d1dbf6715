"""On-policy training of the recurrent navigator with clipped PPO.

Synchronous lanes collect a fixed-length rollout, then the policy updates
for a few epochs over (lane, segment) minibatches: each segment replays the
recurrent core from its stored entry state, zeroing the state wherever an
episode began.  Advantages come from GAE and are normalized per minibatch.
The loop logs one JSONL record per update and can checkpoint both immutable
parameter snapshots and a full resume bundle (parameters, optimizer moments,
RNG states, per-lane environment state), so a resumed run reproduces the
next update exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import transfer
from .agent import NavAgent
from .autodiff import Parameter, Tensor, no_grad
from .episodes import FieldCache, NavEnv
from .evaluation import evaluate


@dataclass
class PPOConfig:
    total_steps: int = 2_000_000
    num_lanes: int = 8
    rollout_length: int = 128
    ppo_epochs: int = 4
    num_minibatches: int = 4
    segment_len: int = 32
    clip_ratio: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr: float = 2.5e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    normalize_advantages: bool = True
    max_grad_norm: float = 0.5
    adam_eps: float = 1e-5
    eval_every: int = 100_000
    eval_episodes: int = 64
    checkpoint_every: int = 500_000

    def __post_init__(self) -> None:
        if self.rollout_length % self.segment_len != 0:
            raise ValueError("rollout_length must be a multiple of segment_len")
        segments = (self.rollout_length // self.segment_len) * self.num_lanes
        if segments % self.num_minibatches != 0:
            raise ValueError("minibatches must divide the (lane, segment) count")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> PPOConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown PPO config keys: {sorted(unknown)}")
        return cls(**obj)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam over named parameters; frozen parameters are excluded."""

    def __init__(self, params: list[Parameter], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-5):
        self.params = sorted((p for p in params if not p.frozen),
                             key=lambda p: p.name)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = grads.get(p.name)
            if g is None:
                continue
            m = self.m[p.name]
            v = self.v[p.name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            # Cast back to the live dtype: the snapshot stores exact copies,
            # so the round trip is lossless.
            self.m[k] = np.array(state["m"][k], dtype=self.m[k].dtype)
            self.v[k] = np.array(state["v"][k], dtype=self.v[k].dtype)


def global_norm_clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients together so their joint norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# rollout collection
# ---------------------------------------------------------------------------

class EnvPool:
    """Synchronous auto-resetting lanes over a shared episode list."""

    def __init__(self, envs: list, episodes: list, rng: np.random.Generator):
        if not episodes:
            raise ValueError("empty episode list")
        self.envs = envs
        self.episodes = episodes
        self.rng = rng
        self.num_lanes = len(envs)
        self.obs: list = [None] * self.num_lanes
        self.starts = np.ones(self.num_lanes, dtype=bool)
        self.finished_outcomes: list[str] = []

    def _next_episode(self):
        return self.episodes[int(self.rng.integers(len(self.episodes)))]

    def reset_all(self) -> None:
        for i, env in enumerate(self.envs):
            self.obs[i] = env.reset(self._next_episode())
        self.starts[:] = True

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Advance every lane; done lanes start a fresh episode immediately."""
        rewards = np.zeros(self.num_lanes, dtype=np.float64)
        dones = np.zeros(self.num_lanes, dtype=bool)
        for i, env in enumerate(self.envs):
            obs, reward, done, info = env.step(int(actions[i]))
            rewards[i] = reward
            dones[i] = done
            if done:
                outcome = info.get("outcome")
                if outcome is not None:
                    self.finished_outcomes.append(outcome)
                obs = env.reset(self._next_episode())
            self.obs[i] = obs
        self.starts = dones.copy()
        return rewards, dones

    def rgb_batch(self) -> np.ndarray:
        return np.stack([o["rgb"] for o in self.obs])

    def goal_batch(self) -> np.ndarray:
        return np.stack([o["goal"] for o in self.obs])


class RolloutBuffer:
    """Fixed-length on-policy storage, shaped [T, num_lanes, ...]."""

    def __init__(self, steps: int, lanes: int, image_size: int,
                 gru_layers: int, hidden_size: int):
        self.steps = steps
        self.lanes = lanes
        shape_img = (steps, lanes, 3, image_size, image_size)
        self.rgb = np.zeros(shape_img, dtype=np.float32)
        self.goal = np.zeros(shape_img, dtype=np.float32)
        self.prev_actions = np.zeros((steps, lanes), dtype=np.int64)
        self.actions = np.zeros((steps, lanes), dtype=np.int64)
        self.log_probs = np.zeros((steps, lanes), dtype=np.float64)
        self.values = np.zeros((steps, lanes), dtype=np.float64)
        self.rewards = np.zeros((steps, lanes), dtype=np.float64)
        self.dones = np.zeros((steps, lanes), dtype=np.float64)
        self.episode_starts = np.zeros((steps, lanes), dtype=np.float64)
        self.hidden = np.zeros((steps, gru_layers, lanes, hidden_size),
                               dtype=np.float64)
        self.bootstrap_value = np.zeros(lanes, dtype=np.float64)


def collect_rollouts(agent: NavAgent, pool: EnvPool, state: list[np.ndarray],
                     prev: np.ndarray, config: PPOConfig,
                     rng: np.random.Generator) -> RolloutBuffer:
    """Run the policy for one rollout; `state` and `prev` mutate in place."""
    buf = RolloutBuffer(config.rollout_length, pool.num_lanes,
                        agent.config.encoder.image_size,
                        agent.config.gru_layers, agent.config.hidden_size)
    with no_grad():
        for t in range(config.rollout_length):
            fresh = pool.starts
            for layer in state:
                layer[fresh] = 0.0
            prev[fresh] = NavAgent.START_ACTION
            rgb = pool.rgb_batch()
            goal = pool.goal_batch()
            buf.rgb[t] = rgb
            buf.goal[t] = goal
            buf.prev_actions[t] = prev
            buf.episode_starts[t] = fresh.astype(np.float64)
            for layer_idx, layer in enumerate(state):
                buf.hidden[t, layer_idx] = layer
            actions, log_probs, values, new_state = agent.act(
                rgb, goal, prev, state, rng=rng)
            for layer, new_layer in zip(state, new_state):
                layer[:] = new_layer
            rewards, dones = pool.step(actions)
            buf.actions[t] = actions
            buf.log_probs[t] = log_probs
            buf.values[t] = values
            buf.rewards[t] = rewards
            buf.dones[t] = dones.astype(np.float64)
            prev[:] = actions
        fresh = pool.starts
        for layer in state:
            layer[fresh] = 0.0
        prev[fresh] = NavAgent.START_ACTION
        _, _, boot_values, _ = agent.act(pool.rgb_batch(), pool.goal_batch(),
                                         prev, state, greedy=True)
        buf.bootstrap_value = np.where(pool.starts, 0.0, boot_values)
    return buf


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                bootstrap_value: np.ndarray, gamma: float,
                lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets, shaped [T, N].

    `dones[t]` marks that the episode ended with step t, so no value
    bootstraps across it.
    """
    steps = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1], dtype=np.float64)
    for t in range(steps - 1, -1, -1):
        next_value = values[t + 1] if t + 1 < steps else bootstrap_value
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        advantages[t] = last
    return advantages, advantages + values


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------

def _segment_starts(config: PPOConfig) -> list[tuple[int, int]]:
    pairs = []
    for lane in range(config.num_lanes):
        for t0 in range(0, config.rollout_length, config.segment_len):
            pairs.append((lane, t0))
    return pairs


def replay_segments(agent: NavAgent, buf: RolloutBuffer,
                    pairs: list[tuple[int, int]],
                    segment_len: int) -> tuple[Tensor, Tensor, Tensor]:
    """Recompute (log-prob of taken action, value, entropy) for segments.

    Each segment re-runs the recurrent core from its stored entry state; the
    state is zeroed at steps that began a new episode.  Returns flat tensors
    of length len(pairs) * segment_len.
    """
    lanes = np.array([p[0] for p in pairs])
    t0s = np.array([p[1] for p in pairs])
    n = len(pairs)
    t_index = (t0s[:, None] + np.arange(segment_len)[None, :])  # [n, seg]
    lane_index = np.repeat(lanes[:, None], segment_len, axis=1)
    rgb = buf.rgb[t_index, lane_index]        # [n, seg, 3, H, W]
    goal = buf.goal[t_index, lane_index]
    flat_rgb = rgb.reshape((n * segment_len,) + rgb.shape[2:])
    flat_goal = goal.reshape((n * segment_len,) + goal.shape[2:])
    embed = agent.embed(Tensor(flat_rgb), Tensor(flat_goal))
    embed = ad.reshape(embed, (n, segment_len, embed.data.shape[-1]))

    state = [Tensor(buf.hidden[t0s, layer, lanes])
             for layer in range(agent.config.gru_layers)]
    logp_steps, value_steps, entropy_steps = [], [], []
    rows = np.arange(n)
    for k in range(segment_len):
        t_k = t0s + k
        starts = buf.episode_starts[t_k, lanes]  # [n]
        keep = Tensor(1.0 - starts[:, None])
        state = [s * keep for s in state]
        emb_k = ad.index(embed, (rows, np.full(n, k)))
        prev_k = buf.prev_actions[t_k, lanes]
        logits, value, state = agent.recur(emb_k, prev_k, state)
        log_all = ad.log_softmax(logits, axis=1)
        taken = buf.actions[t_k, lanes]
        logp_steps.append(ad.index(log_all, (rows, taken)))
        value_steps.append(value)
        probs = ad.texp(log_all)
        entropy_steps.append(ad.tsum(probs * log_all * -1.0, axis=1))
    logp = ad.reshape(ad.stack(logp_steps, axis=1), (n * segment_len,))
    values = ad.reshape(ad.stack(value_steps, axis=1), (n * segment_len,))
    entropy = ad.reshape(ad.stack(entropy_steps, axis=1), (n * segment_len,))
    return logp, values, entropy


def ppo_update(agent: NavAgent, optimizer: Adam, buf: RolloutBuffer,
               config: PPOConfig, rng: np.random.Generator) -> dict:
    advantages, returns = compute_gae(buf.rewards, buf.values, buf.dones,
                                      buf.bootstrap_value, config.gamma,
                                      config.gae_lambda)
    pairs = _segment_starts(config)
    per_batch = len(pairs) // config.num_minibatches
    seg = config.segment_len
    totals: dict[str, float] = {"policy": 0.0, "value": 0.0, "entropy": 0.0,
                                "grad_norm": 0.0}
    batches = 0
    for _epoch in range(config.ppo_epochs):
        order = rng.permutation(len(pairs))
        for b in range(config.num_minibatches):
            chosen = [pairs[i] for i in order[b * per_batch:(b + 1) * per_batch]]
            lanes = np.array([p[0] for p in chosen])
            t0s = np.array([p[1] for p in chosen])
            t_index = t0s[:, None] + np.arange(seg)[None, :]
            lane_index = np.repeat(lanes[:, None], seg, axis=1)
            old_logp = buf.log_probs[t_index, lane_index].reshape(-1)
            adv = advantages[t_index, lane_index].reshape(-1)
            ret = returns[t_index, lane_index].reshape(-1)
            if config.normalize_advantages:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)

            logp, values, entropy = replay_segments(agent, buf, chosen, seg)
            ratio = ad.texp(logp - Tensor(old_logp))
            adv_t = Tensor(adv)
            surr = ad.minimum(ratio * adv_t,
                              ad.clip(ratio, 1.0 - config.clip_ratio,
                                      1.0 + config.clip_ratio) * adv_t)
            policy_loss = ad.tmean(surr) * -1.0
            value_err = values - Tensor(ret)
            value_loss = ad.tmean(value_err * value_err)
            entropy_mean = ad.tmean(entropy)
            loss = (policy_loss + value_loss * config.value_coef
                    + entropy_mean * -config.entropy_coef)
            if not np.isfinite(loss.data):
                raise RuntimeError("non-finite PPO loss; aborting update")
            grads = ad.backward(loss)
            norm = global_norm_clip(grads, config.max_grad_norm)
            optimizer.step(grads)
            totals["policy"] += float(policy_loss.data)
            totals["value"] += float(value_loss.data)
            totals["entropy"] += float(entropy_mean.data)
            totals["grad_norm"] += norm
            batches += 1
    return {k: v / batches for k, v in totals.items()}


# ---------------------------------------------------------------------------
# resume bundles
# ---------------------------------------------------------------------------

def save_train_state(path: str | Path, agent: NavAgent, optimizer: Adam,
                     pool: EnvPool, state: list[np.ndarray], prev: np.ndarray,
                     counters: dict, rngs: dict[str, np.random.Generator]) -> None:
    arrays: dict[str, np.ndarray] = {}
    for p in agent.parameters():
        arrays[f"param::{p.name}"] = np.asarray(p.data, dtype=np.float64)
    opt_state = optimizer.state_dict()
    for name, arr in opt_state["m"].items():
        arrays[f"adam_m::{name}"] = arr
    for name, arr in opt_state["v"].items():
        arrays[f"adam_v::{name}"] = arr
    for layer_idx, layer in enumerate(state):
        arrays[f"hidden::{layer_idx}"] = np.asarray(layer, dtype=np.float64)
    arrays["prev_actions"] = prev.astype(np.int64)
    arrays["lane_pose"] = np.array([[e.pose.x, e.pose.y, e.pose.theta]
                                    for e in pool.envs], dtype=np.float64)
    arrays["lane_steps"] = np.array([e.steps for e in pool.envs],
                                    dtype=np.int64)
    arrays["lane_prev_distance"] = np.array([e.prev_distance
                                             for e in pool.envs],
                                            dtype=np.float64)
    arrays["lane_path_length"] = np.array([e.path_length for e in pool.envs],
                                          dtype=np.float64)
    arrays["lane_starts"] = pool.starts.astype(np.int64)
    meta = {
        "counters": counters,
        "adam_t": opt_state["t"],
        "lane_episode_ids": [e.episode.episode_id for e in pool.envs],
        "rng_states": {k: r.bit_generator.state for k, r in rngs.items()},
    }
    np.savez(path, meta=np.frombuffer(
        json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_train_state(path: str | Path, agent: NavAgent, optimizer: Adam,
                     pool: EnvPool, state: list[np.ndarray], prev: np.ndarray,
                     rngs: dict[str, np.random.Generator]) -> dict:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        by_name = {p.name: p for p in agent.parameters()}
        for key in data.files:
            if key.startswith("param::"):
                target = by_name[key[len("param::"):]]
                # Write in place so the parameter keeps its own dtype; the
                # snapshot holds exact copies, so the cast is lossless.
                target.data[...] = data[key]
        opt_state = {"t": meta["adam_t"], "m": {}, "v": {}}
        for key in data.files:
            if key.startswith("adam_m::"):
                opt_state["m"][key[len("adam_m::"):]] = data[key].copy()
            elif key.startswith("adam_v::"):
                opt_state["v"][key[len("adam_v::"):]] = data[key].copy()
        optimizer.load_state_dict(opt_state)
        for layer_idx in range(len(state)):
            state[layer_idx][:] = data[f"hidden::{layer_idx}"]
        prev[:] = data["prev_actions"]
        episodes_by_id = {e.episode_id: e for e in pool.episodes}
        poses = data["lane_pose"]
        for i, env in enumerate(pool.envs):
            episode = episodes_by_id[meta["lane_episode_ids"][i]]
            env.reset(episode)
            env.pose = env.pose.__class__(poses[i, 0], poses[i, 1],
                                          poses[i, 2])
            env.steps = int(data["lane_steps"][i])
            env.prev_distance = float(data["lane_prev_distance"][i])
            env.path_length = float(data["lane_path_length"][i])
            pool.obs[i] = env._observe()
        pool.starts = data["lane_starts"].astype(bool)
        for key, rng in rngs.items():
            rng.bit_generator.state = meta["rng_states"][key]
        return meta["counters"]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train_loop(agent: NavAgent, plans: dict, train_episodes: list,
               eval_episodes: list, config: PPOConfig, sliding: bool,
               seed: int, out_dir: str | Path, resume: bool = False) -> dict:
    """Full training run; returns a summary with checkpoint paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    state_path = out_dir / "train_state.npz"
    best_path = out_dir / "best.json"

    rngs = {
        "actions": np.random.default_rng([seed, 11]),
        "episodes": np.random.default_rng([seed, 13]),
        "shuffle": np.random.default_rng([seed, 17]),
    }
    cache = FieldCache()
    envs = [NavEnv(plans, sliding=sliding,
                   image_size=agent.config.encoder.image_size,
                   field_cache=cache)
            for _ in range(config.num_lanes)]
    pool = EnvPool(envs, train_episodes, rngs["episodes"])
    optimizer = Adam(agent.parameters(), lr=config.lr, eps=config.adam_eps)
    state = [np.zeros((config.num_lanes, agent.config.hidden_size))
             for _ in range(agent.config.gru_layers)]
    prev = np.full(config.num_lanes, NavAgent.START_ACTION, dtype=np.int64)
    counters = {"env_steps": 0, "updates": 0, "best_sr": -1.0,
                "best_step": -1}

    if resume and state_path.exists():
        counters = load_train_state(state_path, agent, optimizer, pool,
                                    state, prev, rngs)
        log_file = open(log_path, "a")
    else:
        pool.reset_all()
        log_file = open(log_path, "w")

    steps_per_update = config.num_lanes * config.rollout_length

    def provenance() -> dict:
        return {
            "stage": "train",
            "fusion": agent.config.encoder.kind,
            "sliding": sliding,
            "seed": seed,
            "env_steps": counters["env_steps"],
            "updates": counters["updates"],
        }

    def crossed(period: int) -> bool:
        before = (counters["env_steps"] - steps_per_update) // period
        return counters["env_steps"] // period > before

    try:
        while counters["env_steps"] < config.total_steps:
            buf = collect_rollouts(agent, pool, state, prev, config,
                                   rngs["actions"])
            counters["env_steps"] += steps_per_update
            losses = ppo_update(agent, optimizer, buf, config,
                                rngs["shuffle"])
            counters["updates"] += 1

            holdout_sr = holdout_spl = None
            if eval_episodes and crossed(config.eval_every):
                report = evaluate(agent, plans,
                                  eval_episodes[:config.eval_episodes],
                                  sliding=sliding, report_id="holdout",
                                  field_cache=cache)
                holdout_sr, holdout_spl = report.sr, report.spl
                if holdout_sr > counters["best_sr"]:
                    counters["best_sr"] = holdout_sr
                    counters["best_step"] = counters["env_steps"]
                    ckpt = out_dir / f"best_{counters['env_steps']:09d}.ckpt"
                    transfer.save_checkpoint(agent, provenance(), ckpt)
                    best_path.write_text(json.dumps({
                        "checkpoint": str(ckpt),
                        "holdout_sr": holdout_sr,
                        "holdout_spl": holdout_spl,
                        "env_steps": counters["env_steps"],
                    }))

            record = {
                "step": counters["env_steps"],
                "mean_reward": float(buf.rewards.mean()),
                "holdout_sr": holdout_sr,
                "holdout_spl": holdout_spl,
                "losses": losses,
            }
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

            if crossed(config.checkpoint_every):
                ckpt = out_dir / f"ckpt_{counters['env_steps']:09d}.ckpt"
                if not ckpt.exists():
                    transfer.save_checkpoint(agent, provenance(), ckpt)
                save_train_state(state_path, agent, optimizer, pool, state,
                                 prev, counters, rngs)
    finally:
        log_file.close()

    final = out_dir / "final.ckpt"
    if not final.exists():
        transfer.save_checkpoint(agent, provenance(), final)
    save_train_state(state_path, agent, optimizer, pool, state, prev,
                     counters, rngs)
    return {
        "env_steps": counters["env_steps"],
        "updates": counters["updates"],
        "final_checkpoint": str(final),
        "best": json.loads(best_path.read_text()) if best_path.exists()
                else None,
        "log": str(log_path),
    }
