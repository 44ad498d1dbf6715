"""Command line entry point: every experiment recipe behind one binary.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

FUSION_FLAGS = {
    "late": {"kind": "late_fusion", "space_to_depth": False},
    "channelcat": {"kind": "channel_cat", "space_to_depth": False},
    "channelcat-s2d": {"kind": "channel_cat", "space_to_depth": True},
    "crossatt": {"kind": "cross_attention", "space_to_depth": False},
}


def _bool_flag(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="navlab",
        description="Binocular-fusion navigation laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="dotted config override, repeatable")

    p = sub.add_parser("gen-worlds", help="generate a floor-plan library")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=40)
    p.add_argument("--height", type=int, default=40)

    p = sub.add_parser("gen-episodes", help="sample split episodes on a library")
    with_config(p)
    p.add_argument("--worlds", required=True, help="directory from gen-worlds")
    p.add_argument("--split", default=None,
                   help="emit only this split (default: all)")
    p.add_argument("--out", required=True, help="episodes JSON file")

    p = sub.add_parser("train", help="PPO training run")
    with_config(p)
    p.add_argument("--sliding", type=_bool_flag, required=True,
                   metavar="{true,false}")
    p.add_argument("--fusion", choices=sorted(FUSION_FLAGS), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--worlds", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--worlds", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--split", default="heldout")
    p.add_argument("--sliding", type=_bool_flag, required=True,
                   metavar="{true,false}")
    p.add_argument("--report-id", default="eval")
    p.add_argument("--out", required=True, help="report JSON file")

    p = sub.add_parser("gen-probe-data", help="render a probing dataset")
    with_config(p)
    p.add_argument("--worlds", required=True)
    p.add_argument("--plans", nargs="+", required=True,
                   help="plan ids to draw pairs from")
    p.add_argument("--out", required=True, help="binary dataset file")

    p = sub.add_parser("probe", help="fit a pose/visibility probe")
    with_config(p)
    p.add_argument("--train-data", required=True)
    p.add_argument("--val-data", required=True)
    p.add_argument("--fusion", choices=sorted(FUSION_FLAGS), default=None,
                   help="probe a freshly initialised encoder")
    p.add_argument("--checkpoint", default=None,
                   help="probe a trained agent's encoder")
    p.add_argument("--out", required=True, help="probe report JSON file")

    p = sub.add_parser("transfer", help="cross-setting transfer study")
    with_config(p)
    p.add_argument("--ckpt-true", required=True,
                   help="checkpoint trained with sliding on")
    p.add_argument("--ckpt-false", required=True,
                   help="checkpoint trained with sliding off")
    p.add_argument("--worlds", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--budget-steps", type=int, default=100_000)
    p.add_argument("--cells", nargs="*", default=None,
                   help="subset of table rows to run")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="bundle eval reports for the figures")
    p.add_argument("--reports", nargs="+", required=True,
                   help="eval report JSON files")
    p.add_argument("--flows", nargs="*", default=[],
                   metavar="LEFT:RIGHT", help="report id pairs to cross")
    p.add_argument("--probes", default=None,
                   help="JSON file mapping report id to probe metrics")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference audit of autodiff")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    return parser


def _load_worlds(path: str) -> dict:
    from . import world

    index = json.loads((Path(path) / "index.json").read_text())
    return {pid: world.load_plan(Path(path) / fname)
            for pid, fname in index["plans"].items()}


def cmd_gen_worlds(args) -> int:
    from . import world

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = {}
    for i in range(args.count):
        plan = world.generate_floorplan(args.seed + i, width=args.width,
                                        height=args.height)
        pid = f"plan{i:03d}"
        fname = f"{pid}.json"
        world.save_plan(plan, out / fname)
        index[pid] = fname
    (out / "index.json").write_text(json.dumps(
        {"seed": args.seed, "count": args.count, "plans": index}, indent=2))
    print(f"wrote {args.count} plans to {out}")
    return 0


def cmd_gen_episodes(args, cfg) -> int:
    from . import episodes

    plans = _load_worlds(args.worlds)
    missing = {pid for ids in cfg.episodes.split_plans.values()
               for pid in ids} - set(plans)
    if missing:
        raise ValueError(f"episode config names unknown plans: "
                         f"{sorted(missing)}")
    eps = episodes.generate_split_episodes(
        cfg.seed, plans, cfg.episodes.split_plans, cfg.episodes.per_split,
        cfg.episodes.min_geodesic, cfg.episodes.max_geodesic,
        face_goal_jitter=cfg.episodes.face_goal_jitter)
    if args.split is not None:
        if args.split not in cfg.episodes.split_plans:
            raise ValueError(f"unknown split {args.split!r}")
        eps = [e for e in eps if e.split == args.split]
    episodes.save_episodes(eps, args.out)
    counts = {s: sum(1 for e in eps if e.split == s)
              for s in cfg.episodes.split_plans}
    print(f"wrote {len(eps)} episodes to {args.out} {counts}")
    return 0


def cmd_train(args, cfg) -> int:
    from . import rl
    from .agent import build_agent
    from .encoders import EncoderConfig
    from .episodes import load_episodes

    enc_json = cfg.agent.encoder.to_json()
    enc_json.update(FUSION_FLAGS[args.fusion])
    cfg.agent.encoder = EncoderConfig.from_json(enc_json)
    seed = cfg.seed if args.seed is None else args.seed
    plans = _load_worlds(args.worlds)
    train_eps = load_episodes(args.episodes, split="train")
    heldout = load_episodes(args.episodes, split="heldout")
    agent = build_agent(cfg.agent, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2))
    summary = rl.train_loop(agent, plans, train_eps, heldout, cfg.ppo,
                            sliding=args.sliding, seed=seed, out_dir=out,
                            resume=args.resume)
    summary.update({"fusion": args.fusion, "sliding": args.sliding,
                    "seed": seed})
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return 0


def cmd_eval(args) -> int:
    from .episodes import load_episodes
    from .evaluation import evaluate
    from .transfer import restore_agent

    plans = _load_worlds(args.worlds)
    eps = load_episodes(args.episodes, split=args.split)
    agent = restore_agent(args.checkpoint)
    report = evaluate(agent, plans, eps, sliding=args.sliding,
                      report_id=args.report_id)
    Path(args.out).write_text(json.dumps(report.to_json(), indent=2))
    print(f"{args.report_id}: sr={report.sr:.3f} spl={report.spl:.3f} "
          f"({len(eps)} episodes)")
    return 0


def cmd_gen_probe_data(args, cfg) -> int:
    from . import probing

    plans = _load_worlds(args.worlds)
    missing = set(args.plans) - set(plans)
    if missing:
        raise ValueError(f"unknown plans: {sorted(missing)}")
    subset = {pid: plans[pid] for pid in args.plans}
    pairs = probing.generate_probe_dataset(
        subset, cfg.probe.pairs_per_plan, seed=cfg.seed,
        image_size=cfg.probe.image_size,
        min_geodesic=cfg.probe.min_geodesic,
        heading_jitter=cfg.probe.heading_jitter)
    records = probing.pairs_to_array(pairs, cfg.probe.image_size)
    probing.write_probe_dataset(args.out, records, seed=cfg.seed)
    print(f"wrote {len(records)} probe records to {args.out}")
    return 0


def cmd_probe(args, cfg) -> int:
    from . import probing
    from .encoders import EncoderConfig, build_encoder
    from .transfer import restore_agent

    if (args.fusion is None) == (args.checkpoint is None):
        raise ValueError("pass exactly one of --fusion or --checkpoint")
    train_records, _ = probing.read_probe_dataset(args.train_data)
    val_records, _ = probing.read_probe_dataset(args.val_data)
    if args.checkpoint is not None:
        encoder = restore_agent(args.checkpoint).encoder
        source = {"checkpoint": args.checkpoint}
    else:
        enc_json = cfg.agent.encoder.to_json()
        enc_json.update(FUSION_FLAGS[args.fusion])
        encoder = build_encoder(EncoderConfig.from_json(enc_json),
                                np.random.default_rng([cfg.seed, 0xE4C]))
        source = {"fusion": args.fusion}
    if not cfg.probe.train_encoder:
        for p in encoder.parameters():
            p.set_frozen(True)
    head_cfg = probing.ProbeHeadConfig(mlp_hidden=cfg.probe.mlp_hidden,
                                       target_params=cfg.probe.target_params)
    _, report = probing.train_probe(
        encoder, train_records, val_records, head_config=head_cfg,
        loss_config=probing.ProbeLossConfig(tau=cfg.probe.tau),
        epochs=cfg.probe.epochs, batch_size=cfg.probe.batch_size,
        lr=cfg.probe.lr, seed=cfg.seed,
        train_encoder=cfg.probe.train_encoder)
    report.update(source)
    Path(args.out).write_text(json.dumps(report, indent=2))
    val = report["val"]
    print(f"probe: acc2m20={val['pose_acc_2m_20deg']} "
          f"floor={report['baseline']['pose_acc_2m_20deg']}")
    return 0


def cmd_transfer(args, cfg) -> int:
    from .episodes import load_episodes
    from .transfer import run_transfer_experiment, transfer_study_specs

    plans = _load_worlds(args.worlds)
    train_eps = load_episodes(args.episodes, split="train")
    heldout = load_episodes(args.episodes, split="heldout")
    specs = transfer_study_specs(args.ckpt_true, args.ckpt_false)
    if args.cells:
        unknown = set(args.cells) - set(specs)
        if unknown:
            raise ValueError(f"unknown transfer cells: {sorted(unknown)}")
        specs = {cell: specs[cell] for cell in args.cells}
    ppo_overrides = cfg.ppo.to_json()
    ppo_overrides.pop("total_steps")
    results = run_transfer_experiment(
        specs, cfg.agent, plans, train_eps, heldout, sliding=cfg.sliding,
        budget_steps=args.budget_steps, seed=cfg.seed, out_dir=args.out,
        ppo_overrides=ppo_overrides)
    out = Path(args.out) / "transfer_results.json"
    out.write_text(json.dumps(results, indent=2))
    for cell, res in results.items():
        print(f"{cell}: sr={res['sr']:.3f} spl={res['spl']:.3f}")
    return 0


def cmd_report(args) -> int:
    from .evaluation import EvalReport, emit_report, flow

    reports = [EvalReport.from_json(json.loads(Path(p).read_text()))
               for p in args.reports]
    by_id = {r.report_id: r for r in reports}
    flows = []
    for pair in args.flows:
        left, _, right = pair.partition(":")
        if left not in by_id or right not in by_id:
            raise ValueError(f"flow {pair!r} references unknown report ids")
        flows.append(flow(by_id[left], by_id[right]))
    probes = (json.loads(Path(args.probes).read_text())
              if args.probes else None)
    emit_report(reports, flows, probes, args.out)
    print(f"wrote bundle with {len(reports)} runs, {len(flows)} flows "
          f"to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import run_gradcheck_suite

    worst = run_gradcheck_suite(seeds=args.seeds, tolerance=args.tolerance,
                                verbose=True)
    if worst > args.tolerance:
        print(f"FAIL: worst relative error {worst:.3e} > {args.tolerance}")
        return 1
    print(f"OK: worst relative error {worst:.3e} <= {args.tolerance}")
    return 0


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    needs_config = args.command in {"gen-episodes", "train",
                                    "gen-probe-data", "probe", "transfer"}
    try:
        if needs_config:
            from .config import load_config

            cfg = load_config(args.config, args.overrides)
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        if args.command == "gen-worlds":
            return cmd_gen_worlds(args)
        if args.command == "gen-episodes":
            return cmd_gen_episodes(args, cfg)
        if args.command == "train":
            return cmd_train(args, cfg)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "gen-probe-data":
            return cmd_gen_probe_data(args, cfg)
        if args.command == "probe":
            return cmd_probe(args, cfg)
        if args.command == "transfer":
            return cmd_transfer(args, cfg)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        raise AssertionError(f"unhandled command {args.command}")
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
