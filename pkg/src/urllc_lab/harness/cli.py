"""Command line entry point (``urllc-lab``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C

log = logging.getLogger("urllc_lab")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (defaults are built in)")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable); overrides the config list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config leaf by dotted path, e.g. env.n_users=5")


def _load(args, scenario: str | None = None) -> dict:
    over = list(args.overrides)
    if scenario:
        over.insert(0, f"scenario={json.dumps(scenario)}")
    cfg = C.load_config(args.config, over)
    if args.seed:
        cfg["seeds"] = list(args.seed)
    if args.out:
        cfg["out"] = args.out
    return cfg


def cmd_scenario(args):
    from .plots import emit_plot_data
    from .scenarios import run_scenario

    cfg = _load(args, args.id)
    if getattr(args, "checkpoint", None):
        cfg["checkpoint"] = args.checkpoint
    res = run_scenario(cfg)
    if not args.no_plots:
        emit_plot_data(cfg["out"])
    print(f"{cfg['scenario']}: {len(res.rows)} result rows written to {cfg['out']}")
    return 0


def cmd_simulate(args):
    """Run a fixed-rate policy through the environment and report reliability."""
    from ..env import OfdmaEnv, sample_positions
    from ..reducer import reduce
    from .scenarios import offered_rate, traffic_sources, write_csv

    cfg = _load(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in cfg["seeds"]:
        ec = C.env_config(cfg)
        src = traffic_sources(cfg, ec.n_users, seed)
        env = OfdmaEnv(ec, src, seed=seed, positions=sample_positions(ec, np.random.default_rng([seed, 5])))
        rd = offered_rate(src) * args.rate_factor
        rc = C.reducer_config(cfg, agent=True, power_cap=ec.max_bs_power_w)
        served = late = 0
        powers = []
        for _ in range(args.slots):
            alloc, _, _ = reduce(rd, env.channel, ec, rc)
            fb, _ = env.step(alloc)
            served += int(fb.served.sum())
            late += int(fb.late.sum())
            powers.append(fb.total_power)
        rows.append({"seed": seed, "slots": args.slots, "served": served, "late": late,
                     "reliability": 1 - late / served if served else 1.0,
                     "mean_power_w": float(np.mean(powers))})
        print(rows[-1])
    write_csv(out / "simulate.csv", rows)
    return 0


def cmd_train_refiner(args):
    from ..refiner import save_refiner
    from .scenarios import real_sessions, train_refiner_on

    cfg = _load(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg["seeds"]:
        result, scaler, real = train_refiner_on(cfg, real_sessions(cfg), seed)
        path = out / f"refiner_seed{seed}.json"
        save_refiner(path, result, scaler, C.refiner_config(cfg))
        real.to_csv(out / f"real_packets_seed{seed}.csv")
        print(f"seed {seed}: held-out accuracy {result.heldout_accuracy:.3f}, "
              f"mean similarity {result.mean_similarity:.4f}, floor {result.floor:.4f} -> {path}")
    return 0


def cmd_reduce(args):
    """One-shot solver: JSON file with ``gains`` (N x K) and ``rates`` (N)."""
    from ..reducer import reduce

    doc = json.loads(Path(args.problem).read_text())
    cfg = _load(args)
    H = np.asarray(doc["gains"], dtype=float)
    rd = np.asarray(doc["rates"], dtype=float)
    ec = C.env_config(cfg, n_users=H.shape[0], n_rbs=H.shape[1])
    alloc, r, dual = reduce(rd, H, ec, C.reducer_config(cfg))
    result = {"owner": alloc.owner.tolist(), "power_w": alloc.power.tolist(),
              "total_power_w": alloc.total_power, "achieved_bps": r.tolist(),
              "lambda": dual.lam.tolist(), "lower_bound_w": dual.lower_bound,
              "certified": bool(dual.certified), "iterations": dual.iteration}
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_emit(args):
    from .plots import emit_plot_data

    written = emit_plot_data(args.run, png=not args.no_png)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="urllc-lab", description="URLLC resource allocation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="fixed-rate policy through the environment")
    _common(s)
    s.add_argument("--slots", type=int, default=1000)
    s.add_argument("--rate-factor", type=float, default=2.0, help="requested rate / offered load")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-refiner", help="fit the GAN refiner on the (fixture) trace")
    _common(s)
    s.set_defaults(func=cmd_train_refiner)

    s = sub.add_parser("pretrain", help="pre-train an agent in the virtual environment")
    _common(s)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_scenario, id="pretrain")

    s = sub.add_parser("deploy", help="train/deploy an agent in the real environment")
    _common(s)
    s.add_argument("--checkpoint", help="agent checkpoint from `pretrain`")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_scenario, id="deploy")

    s = sub.add_parser("scenario", help="run a named scenario")
    s.add_argument("id", choices=C.SCENARIOS)
    _common(s)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("emit-plots", help="write per-figure CSV tables and PNGs")
    s.add_argument("run", help="run directory (or a parent of several)")
    s.add_argument("--no-png", action="store_true")
    s.set_defaults(func=cmd_emit)

    s = sub.add_parser("reduce", help="solve one min-power allocation problem")
    s.add_argument("problem", help="JSON with 'gains' (N x K) and 'rates' (bit/s)")
    _common(s)
    s.set_defaults(func=cmd_reduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
