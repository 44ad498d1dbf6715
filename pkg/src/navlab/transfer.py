"""Component-granular checkpoints and cross-setting transfer.

A checkpoint stores the four parameter groups (phi, h, zeta, pi) with the
agent config and training provenance.  Loading an agent can source each
group independently from a checkpoint (frozen or finetunable) or leave it
freshly initialized, which is how the transfer study's rows are built.

File layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
header (config, provenance, group manifests, payload hash), then all tensors
as little-endian float32 in manifest order.  Identical parameters always
serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agent import GROUPS, AgentConfig, NavAgent, build_agent

MAGIC = b"NAVCKPT1"
VERSION = 1

FROZEN = "frozen"
FINETUNE = "finetune"
SCRATCH = "scratch"
MODES = (FROZEN, FINETUNE, SCRATCH)


@dataclass
class GroupSpec:
    """How one parameter group of a new agent is sourced."""
    mode: str
    source: str | None = None

    def validate(self, group: str) -> None:
        if self.mode not in MODES:
            raise ValueError(f"group {group}: unknown mode {self.mode!r}")
        if self.mode == SCRATCH and self.source is not None:
            raise ValueError(f"group {group}: scratch must not name a source")
        if self.mode in (FROZEN, FINETUNE) and not self.source:
            raise ValueError(f"group {group}: mode {self.mode} requires a source")


def load_spec_from_json(obj: dict) -> dict[str, GroupSpec]:
    spec = {}
    for group, entry in obj.items():
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        spec[group] = GroupSpec(mode=entry["mode"], source=entry.get("source"))
    return validate_load_spec(spec)


def validate_load_spec(spec: dict[str, GroupSpec]) -> dict[str, GroupSpec]:
    missing = set(GROUPS) - set(spec)
    if missing:
        raise ValueError(f"load spec missing groups: {sorted(missing)}")
    extra = set(spec) - set(GROUPS)
    if extra:
        raise ValueError(f"load spec has unknown groups: {sorted(extra)}")
    for group, gs in spec.items():
        gs.validate(group)
    return spec


@dataclass
class Checkpoint:
    version: int
    config: AgentConfig
    provenance: dict
    groups: dict[str, dict[str, np.ndarray]]


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------

def _grouped_names(agent: NavAgent) -> dict[str, list]:
    groups = agent.parameter_groups()
    return {g: sorted(groups[g], key=lambda p: p.name) for g in GROUPS}


def save_checkpoint(agent: NavAgent, provenance: dict, path: str | Path) -> None:
    """Write the agent's parameters.  Refuses to overwrite (checkpoints are
    immutable once written)."""
    path = Path(path)
    if path.exists():
        raise FileExistsError(f"checkpoint exists: {path}")
    manifests: dict[str, list[dict]] = {}
    blobs: list[bytes] = []
    for group, params in _grouped_names(agent).items():
        manifest = []
        for p in params:
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            manifest.append({"name": p.name, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
        manifests[group] = manifest
    payload = b"".join(blobs)
    header = {
        "config": agent.config.to_json(),
        "provenance": provenance,
        "groups": manifests,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    hlen = struct.unpack("<Q", raw[12:20])[0]
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    payload = raw[20 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ValueError(f"{path}: payload hash mismatch (corrupted file)")
    groups: dict[str, dict[str, np.ndarray]] = {}
    offset = 0
    for group in GROUPS:
        out = {}
        for entry in header["groups"][group]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f4", count=n,
                                offset=offset).reshape(shape)
            out[entry["name"]] = arr.astype(np.float32)
            offset += n * 4
        groups[group] = out
    if offset != len(payload):
        raise ValueError(f"{path}: trailing bytes in payload")
    return Checkpoint(version=version,
                      config=AgentConfig.from_json(header["config"]),
                      provenance=header["provenance"], groups=groups)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def restore_agent(path: str | Path) -> NavAgent:
    """Rebuild an agent exactly as checkpointed: stored config, all groups
    loaded, nothing frozen."""
    ckpt = load_checkpoint(path)
    spec = {g: GroupSpec(FINETUNE, str(path)) for g in GROUPS}
    agent = assemble_agent(ckpt.config, spec, seed=0)
    agent.provenance = {"init": "restored", "checkpoint": str(path),
                        "source_provenance": ckpt.provenance}
    return agent


def assemble_agent(config: AgentConfig, spec: dict[str, GroupSpec],
                   seed: int) -> NavAgent:
    """Build an agent sourcing each group per the spec.

    Loaded groups equal their source bit for bit; frozen groups carry the
    freeze flag into training.  Scratch groups keep the fresh seed init.
    """
    validate_load_spec(spec)
    agent = build_agent(config, seed)
    provenance: dict = {"init": "assembled", "seed": seed, "groups": {}}
    cache: dict[str, Checkpoint] = {}
    agent_groups = agent.parameter_groups()
    for group in GROUPS:
        gs = spec[group]
        if gs.mode == SCRATCH:
            provenance["groups"][group] = {"mode": SCRATCH}
            continue
        if gs.source not in cache:
            cache[gs.source] = load_checkpoint(gs.source)
        ckpt = cache[gs.source]
        stored = ckpt.groups[group]
        mine = {p.name: p for p in agent_groups[group]}
        if set(stored) != set(mine):
            raise ValueError(
                f"group {group}: parameter names differ between config and "
                f"source {gs.source}")
        for name, arr in stored.items():
            if mine[name].data.shape != arr.shape:
                raise ValueError(
                    f"group {group}: shape mismatch for {name}: "
                    f"{mine[name].data.shape} vs {arr.shape} in {gs.source}")
            mine[name].data = arr.copy()
        if gs.mode == FROZEN:
            for p in mine.values():
                p.set_frozen(True)
        provenance["groups"][group] = {
            "mode": gs.mode, "source": str(gs.source),
            "source_provenance": ckpt.provenance,
        }
    agent.provenance = provenance
    return agent


def transfer_study_specs(ckpt_true: str | Path,
                         ckpt_false: str | Path) -> dict[str, dict[str, GroupSpec]]:
    """The seven row structures of the cross-setting transfer table.

    Sources: an agent trained with sliding on ("true") and one trained with
    sliding off ("false"); each row mixes loading, freezing, finetuning and
    scratch reinit across the perception and action groups.
    """
    t, f = str(ckpt_true), str(ckpt_false)

    def row(phi, h, zeta, pi):
        return {"phi": phi, "h": h, "zeta": zeta, "pi": pi}

    return {
        "load_all_false_frozen": row(*[GroupSpec(FROZEN, f) for _ in range(4)]),
        "load_all_true_frozen": row(*[GroupSpec(FROZEN, t) for _ in range(4)]),
        "load_all_true_finetune": row(*[GroupSpec(FINETUNE, t) for _ in range(4)]),
        "load_action_true_frozen": row(GroupSpec(SCRATCH),
                                       GroupSpec(FROZEN, t),
                                       GroupSpec(FROZEN, t),
                                       GroupSpec(FROZEN, t)),
        "load_action_true_finetune": row(GroupSpec(SCRATCH),
                                         GroupSpec(FINETUNE, t),
                                         GroupSpec(FINETUNE, t),
                                         GroupSpec(FINETUNE, t)),
        "load_perception_true_frozen": row(GroupSpec(FROZEN, t),
                                           GroupSpec(SCRATCH),
                                           GroupSpec(SCRATCH),
                                           GroupSpec(SCRATCH)),
        "load_perception_true_finetune": row(GroupSpec(FINETUNE, t),
                                             GroupSpec(SCRATCH),
                                             GroupSpec(SCRATCH),
                                             GroupSpec(SCRATCH)),
    }


def run_transfer_experiment(specs: dict[str, dict[str, GroupSpec]],
                            config: AgentConfig, plans: dict,
                            train_episodes: list, eval_episodes: list,
                            sliding: bool, budget_steps: int, seed: int,
                            out_dir: str | Path,
                            ppo_overrides: dict | None = None) -> dict[str, dict]:
    """Finetune (or just evaluate, when everything is frozen) each cell under
    the target sliding setting, on identical episodes and seeds."""
    from . import rl
    from .evaluation import evaluate

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, dict] = {}
    for cell, spec in specs.items():
        try:
            agent = assemble_agent(config, spec, seed)
            trainable = [p for p in agent.parameters() if not p.frozen]
            if trainable and budget_steps > 0:
                ppo = rl.PPOConfig(total_steps=budget_steps,
                                   **(ppo_overrides or {}))
                rl.train_loop(agent, plans, train_episodes, eval_episodes,
                              ppo, sliding=sliding, seed=seed,
                              out_dir=out_dir / cell)
            report = evaluate(agent, plans, eval_episodes, sliding=sliding,
                              provenance={"cell": cell, **agent.provenance})
            results[cell] = {"sr": report.sr, "spl": report.spl}
        except FileNotFoundError as err:
            results[cell] = {"error": str(err)}
    return results
