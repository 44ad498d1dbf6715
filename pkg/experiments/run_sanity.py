"""Empty-room sanity run: lean ChannelCat agent, 500k steps, eval every 25k.

The task is the goal-visible empty room: a 6 m square open room where every
start pose faces within half the field of view of the goal bearing, so the
goal direction is inside the first observation.  Episode geodesics span
0.8-4.0 m; the low end sits at the success radius so successful stops appear
in the earliest rollouts.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from navlab import world
from navlab.agent import AgentConfig, build_agent
from navlab.encoders import EncoderConfig
from navlab.episodes import sample_episodes_for_plan
from navlab.rl import PPOConfig, train_loop

OUT = Path(__file__).resolve().parent.parent / "results" / "sanity_empty_room"
FACE_JITTER = math.pi / 4  # half of the 90 degree field of view


def main() -> None:
    plan = world.generate_open_plan(0, size_m=6.0)
    plans = {"room": plan}
    train_eps = sample_episodes_for_plan(
        np.random.default_rng([21, 0]), plan, "room", "train", 400,
        min_geodesic=0.8, max_geodesic=4.0, face_goal_jitter=FACE_JITTER)
    heldout = sample_episodes_for_plan(
        np.random.default_rng([21, 1]), plan, "room", "heldout", 64,
        min_geodesic=0.8, max_geodesic=4.0, face_goal_jitter=FACE_JITTER)

    enc = EncoderConfig(kind="channel_cat", image_size=32, embed_dim=64,
                        cnn_widths=(16, 32, 64, 64))
    agent = build_agent(AgentConfig(encoder=enc, hidden_size=128), seed=1)
    config = PPOConfig(total_steps=500_000, num_lanes=16, rollout_length=64,
                       ppo_epochs=2, num_minibatches=4, segment_len=32,
                       lr=2.5e-4, entropy_coef=0.01, value_coef=0.5,
                       eval_every=25_000, eval_episodes=64,
                       checkpoint_every=250_000)
    summary = train_loop(agent, plans, train_eps, heldout, config,
                         sliding=True, seed=1, out_dir=OUT)
    (OUT / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
