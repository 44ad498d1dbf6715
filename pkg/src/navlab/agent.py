"""Recurrent navigation agent: fusion encoder, GRU core, actor and critic.

Parameters fall into four named groups, split on the first dot of each
parameter name:

  * ``phi``  -- the fusion encoder over (observation, goal),
  * ``h``    -- the stacked GRU,
  * ``zeta`` -- the previous-action embedding table,
  * ``pi``   -- the linear actor and critic heads.

These groups are the unit of checkpoint save/load, freezing and transfer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoders import EncoderConfig, Linear, Module, build_encoder
from .world import NUM_ACTIONS

GROUPS = ("phi", "h", "zeta", "pi")


@dataclass
class AgentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hidden_size: int = 128
    gru_layers: int = 2
    action_embed_dim: int = 32
    num_actions: int = NUM_ACTIONS

    def to_json(self) -> dict:
        return {
            "encoder": self.encoder.to_json(),
            "hidden_size": self.hidden_size,
            "gru_layers": self.gru_layers,
            "action_embed_dim": self.action_embed_dim,
            "num_actions": self.num_actions,
        }

    @staticmethod
    def from_json(obj: dict) -> "AgentConfig":
        cfg = AgentConfig()
        for k, v in obj.items():
            if k == "encoder":
                cfg.encoder = EncoderConfig.from_json(v)
            elif hasattr(cfg, k):
                setattr(cfg, k, v)
            else:
                raise ValueError(f"unknown agent config key {k!r}")
        return cfg


class GRULayer(Module):
    def __init__(self, name: str, rng: np.random.Generator, input_dim: int,
                 hidden: int):
        super().__init__(name)
        self.hidden = hidden
        wx = np.concatenate([ad.orthogonal(rng, (input_dim, hidden))
                             for _ in range(3)], axis=1)
        self.wx = self.param("wx", wx)
        wh = np.concatenate([ad.orthogonal(rng, (hidden, hidden))
                             for _ in range(3)], axis=1)
        self.wh = self.param("wh", wh)
        self.bx = self.param("bx", np.zeros(3 * hidden, dtype=np.float32))
        self.bh = self.param("bh", np.zeros(3 * hidden, dtype=np.float32))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return ad.gru_cell(x, h, self.wx, self.wh, self.bx, self.bh)


class NavAgent:
    """Policy over {stop, forward, turn left, turn right} given view pairs."""

    # row index in the action table for "no previous action yet"
    START_ACTION = NUM_ACTIONS

    def __init__(self, config: AgentConfig, rng: np.random.Generator):
        self.config = config
        self.provenance: dict = {"init": "scratch"}
        self.encoder = build_encoder(config.encoder, rng, name="phi")
        self.zeta = Module("zeta")
        self.action_table = self.zeta.param("table", ad.he_normal(
            rng, (config.num_actions + 1, config.action_embed_dim),
            fan_in=config.action_embed_dim))
        self.core = Module("h")
        in_dim = config.encoder.embed_dim + config.action_embed_dim
        self.gru: list[GRULayer] = []
        for i in range(config.gru_layers):
            layer = GRULayer(f"h.layer{i + 1}", rng, in_dim, config.hidden_size)
            self.core.child(layer)
            self.gru.append(layer)
            in_dim = config.hidden_size
        self.pi = Module("pi")
        self.actor = self.pi.child(Linear("pi.actor", rng, config.hidden_size,
                                          config.num_actions))
        # Near-uniform initial policy: tiny actor weights keep early updates
        # from committing to any action before the critic says anything.
        self.actor.w.data *= 0.01
        self.critic = self.pi.child(Linear("pi.critic", rng, config.hidden_size, 1))

    # -- parameter bookkeeping ------------------------------------------
    def modules(self) -> dict[str, Module]:
        return {"phi": self.encoder, "h": self.core, "zeta": self.zeta,
                "pi": self.pi}

    def parameters(self) -> list[Parameter]:
        out = []
        for m in self.modules().values():
            out.extend(m.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def parameter_groups(self) -> dict[str, list[Parameter]]:
        groups: dict[str, list[Parameter]] = {g: [] for g in GROUPS}
        for p in self.parameters():
            groups[p.name.split(".", 1)[0]].append(p)
        return groups

    def set_group_frozen(self, group: str, frozen: bool) -> None:
        for p in self.parameter_groups()[group]:
            p.set_frozen(frozen)

    # -- forward ----------------------------------------------------------
    def initial_state(self, batch: int) -> list[np.ndarray]:
        return [np.zeros((batch, self.config.hidden_size), dtype=np.float32)
                for _ in range(self.config.gru_layers)]

    def embed(self, obs: Tensor, goal: Tensor) -> Tensor:
        return self.encoder(obs, goal)

    def recur(self, embedding: Tensor, prev_action_ids: np.ndarray,
              state: list[Tensor]) -> tuple[Tensor, Tensor, list[Tensor]]:
        """One recurrent step from a precomputed fusion embedding."""
        act_emb = ad.embedding(self.action_table, np.asarray(prev_action_ids))
        x = ad.concat([embedding, act_emb], axis=1)
        new_state: list[Tensor] = []
        for layer, h in zip(self.gru, state):
            h = layer(x, h)
            new_state.append(h)
            x = h
        logits = self.actor(x)
        value = self.critic(x)
        return logits, value, new_state

    def step(self, obs: Tensor, goal: Tensor, prev_action_ids: np.ndarray,
             state: list[Tensor]) -> tuple[Tensor, Tensor, list[Tensor]]:
        return self.recur(self.embed(obs, goal), prev_action_ids, state)

    # -- numpy convenience used during rollout collection and evaluation ---
    def act(self, obs: np.ndarray, goal: np.ndarray, prev_action_ids: np.ndarray,
            state: list[np.ndarray], rng: np.random.Generator | None = None,
            greedy: bool = False):
        """Sample (or argmax) actions.  Returns numpy everywhere.

        Output: (actions [N], log_probs [N], values [N], new_state list).
        """
        logits, value, new_state = self.step(
            Tensor(obs), Tensor(goal), prev_action_ids,
            [Tensor(h) for h in state])
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        if greedy:
            actions = probs.argmax(axis=1)
        else:
            if rng is None:
                raise ValueError("sampling requires an rng")
            cum = probs.cumsum(axis=1)
            draws = rng.random((probs.shape[0], 1))
            actions = (draws > cum[:, :-1]).sum(axis=1) if probs.shape[1] > 1 \
                else np.zeros(probs.shape[0], dtype=np.int64)
        actions = actions.astype(np.int64)
        logp = np.log(probs[np.arange(len(actions)), actions] + 1e-12)
        return (actions, logp, value.data[:, 0].copy(),
                [h.data for h in new_state])


def build_agent(config: AgentConfig, seed: int) -> NavAgent:
    return NavAgent(config, np.random.default_rng([seed, 0xA6E17]))
