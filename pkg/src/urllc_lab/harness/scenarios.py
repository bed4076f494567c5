"""Experiment loops behind ``urllc-lab scenario <id>``.

Each scenario returns a :class:`ScenarioResult`; :func:`run_scenario` writes it
to the output directory as per-epoch CSVs, a tidy ``results.csv`` and a
``summary.json`` that embeds the config hash.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..env import OfdmaEnv, TrafficSource, sample_positions
from ..ppo import Agent, EpochStats
from ..reducer import (Allocation, ReducerConfig, brute_force_min_power, reduce,
                       reducer_error)
from ..refiner import (FeatureScaler, Refiner, build_virtual_env,
                       synthetic_dataset, train_refiner)
from . import config as C
from .traces import (Session, extremeness, fixture_sessions, packet_dataset, read_trace,
                     sources_from_sessions)

EPOCH_COLUMNS = ("epoch", "phase", "mean_reward", "mean_delay_s", "mean_power_w", "mean_request_bps")


@dataclass
class ScenarioResult:
    scenario: str
    rows: list[dict]  # one per (seed, point) for results.csv
    curves: dict[str, list[dict]] = field(default_factory=dict)  # tag -> per-epoch rows
    extra: dict = field(default_factory=dict)


# building blocks ---------------------------------------------------------------------

def real_sessions(cfg: dict) -> list[Session]:
    t = cfg["traffic"]
    if t.get("trace"):
        return read_trace(t["trace"])
    return fixture_sessions(int(t["fixture_sessions"]), float(t["fixture_mean_iat_us"]),
                            float(t["fixture_mean_size_bytes"]), seed=11)


def extreme_sessions(cfg: dict) -> list[Session]:
    x = cfg["extreme"]
    return fixture_sessions(int(x["fixture_sessions"]), float(x["mean_iat_us"]),
                            float(x["mean_size_bytes"]), seed=12)


def traffic_sources(cfg: dict, n_users: int, seed: int, section: str = "traffic",
                    load_scale: float | None = None, size_scale: float | None = None) -> list[TrafficSource]:
    """Per-user sources for the ``traffic`` (real) or ``extreme`` section."""
    t = cfg["traffic"]
    sec = cfg[section]
    ls = float(t["load_scale"] if load_scale is None else load_scale)
    ss = float(t["size_scale"] if size_scale is None else size_scale)
    mode = sec["mode"]
    if mode == "trace":
        sessions = real_sessions(cfg) if section == "traffic" else extreme_sessions(cfg)
        return sources_from_sessions(sessions, n_users, seed, load_scale=ls, size_scale=ss)
    iat = float(sec["mean_iat_us"]) * 1e-6 / ls
    bits = float(sec["mean_size_bytes"]) * 8.0 * ss
    return [TrafficSource(u, mode, iat, bits, seed=int(seed) * 1000 + u) for u in range(n_users)]


def offered_rate(sources) -> np.ndarray:
    return np.array([s.mean_size_bits / s.mean_iat for s in sources])


def make_agent(cfg: dict, env: OfdmaEnv, seed: int, load_bps, alpha: float | None = None) -> Agent:
    ec = env.config
    rw = C.reward_config(cfg, ec)
    if alpha is not None:
        rw = type(rw)(float(alpha), rw.power_scale)
    init_rate = float(cfg["ppo"]["init_rate_factor"]) * float(np.mean(load_bps))
    return Agent(env, C.ppo_config(cfg), seed=seed,
                 reducer_cfg=C.reducer_config(cfg, agent=True, power_cap=ec.max_bs_power_w),
                 reward_cfg=rw, window=int(cfg["reward"]["window"]), init_rate=init_rate)


def epoch_row(st: EpochStats, phase: str, epoch: int | None = None) -> dict:
    row = {"epoch": st.epoch if epoch is None else epoch, "phase": phase,
           "mean_reward": st.mean_reward, "mean_delay_s": st.mean_delay, "mean_power_w": st.mean_power}
    for i, g in enumerate(st.gamma):
        row[f"gamma_{i}"] = float(g)
    row["mean_request_bps"] = float(np.mean(st.mean_request))
    return row


def pooled_reliability(stats: list[EpochStats]) -> float:
    served = sum(int(s.served.sum()) for s in stats)
    late = sum(int(s.late.sum()) for s in stats)
    return 1.0 - late / served if served else 1.0


def train_refiner_on(cfg: dict, sessions: list[Session], seed: int):
    """Fit the refiner: real packet records vs the M/M/1 synthetic base."""
    rc = C.refiner_config(cfg)
    spec = C.virtual_spec(cfg)
    n = int(cfg["refiner"]["dataset_size"])
    real = packet_dataset(sessions, seed)
    rng = np.random.default_rng([seed, 21])
    if len(real) > n:
        keep = np.sort(rng.choice(len(real), n, replace=False))
        real_logs = real.log_features()[keep]
    else:
        real_logs = real.log_features()
    syn = synthetic_dataset(n, spec.synth_mean_iat_s, spec.synth_mean_size_bytes, rng)
    scaler = FeatureScaler.fit(real_logs)
    result = train_refiner(scaler.transform(real_logs), scaler.transform(syn.log_features()), rc, seed)
    return result, scaler, real


def _identity_refiner(dim: int = 3) -> Refiner:
    ref = Refiner(dim)
    ref.zero_()
    return ref


# extreme switch ----------------------------------------------------------------------

AGENTS = ("experienced", "real_only", "synthetic", "vanilla")


def recovery_epochs(rewards, switch: int, window: int, band: float, abs_band: float = 0.0):
    """Epochs after ``switch`` until the reward re-enters the pre-switch band.

    The band is ``max(band * |m|, abs_band)`` around the trailing mean ``m`` of
    the last ``window`` pre-switch epochs. Returns ``None`` if never.
    """
    rewards = np.asarray(rewards, dtype=float)
    if switch < 1:
        raise ValueError("need at least one pre-switch epoch")
    ref = float(rewards[max(0, switch - window):switch].mean())
    tol = max(band * abs(ref), abs_band)
    for e in range(switch, len(rewards)):
        if abs(rewards[e] - ref) <= tol:
            return e - switch
    return None


def blend_load(cfg: dict, real_src) -> float:
    """Mean offered bit rate per user of the virtual mixture."""
    spec = C.virtual_spec(cfg)
    size_r = float(np.mean([s.mean_size_bits for s in real_src]))
    iat_r = float(np.mean([s.mean_iat for s in real_src]))
    size = spec.w_real * size_r + spec.w_synthetic * spec.synth_mean_size_bytes * 8.0
    iat = spec.w_real * iat_r + spec.w_synthetic * spec.synth_mean_iat_s
    return size / iat


def _pretrain_env(cfg, kind, ec, positions, seed, refiner_bundle):
    """Environment an agent is pre-trained in and its mean offered load.

    Returns ``(None, None)`` for the vanilla agent.
    """
    n = ec.n_users
    if kind == "vanilla":
        return None, None
    real_src = traffic_sources(cfg, n, seed + 7919)
    if kind == "real_only":
        return OfdmaEnv(ec, real_src, seed=seed + 1, positions=positions), float(offered_rate(real_src).mean())
    spec = C.virtual_spec(cfg)
    if kind == "experienced":
        result, scaler, real_data = refiner_bundle
        ve = build_virtual_env(spec, result.refiner, scaler, real_src, real_data, seed=seed + 2)
    else:
        # fully synthetic: M/M/1 at the real means stands in for the real share
        rng = np.random.default_rng([seed, 31])
        iat = float(np.mean([s.mean_iat for s in real_src]))
        size_bytes = float(np.mean([s.mean_size_bits for s in real_src])) / 8.0
        normal = synthetic_dataset(int(cfg["refiner"]["dataset_size"]), iat, size_bytes, rng)
        scaler = FeatureScaler.fit(normal.log_features())
        ve = build_virtual_env(spec, _identity_refiner(), scaler, real_src, normal, seed=seed + 2)
    env = OfdmaEnv(ec, ve.streams, seed=seed + 1, fading_sampler=ve.fading_sampler, positions=positions)
    return env, blend_load(cfg, real_src)


def extreme_switch_seed(cfg: dict, seed: int, agents=AGENTS) -> tuple[list[dict], dict]:
    sch = cfg["schedule"]
    ec = C.env_config(cfg)
    positions = sample_positions(ec, np.random.default_rng([seed, 5]))
    real_src = traffic_sources(cfg, ec.n_users, seed)
    ext_src = traffic_sources(cfg, ec.n_users, seed, section="extreme")
    load = offered_rate(real_src)
    bundle = train_refiner_on(cfg, real_sessions(cfg), seed) if "experienced" in agents else None
    rows, curves = [], {}
    pre, post = int(sch["pre_switch_epochs"]), int(sch["post_switch_epochs"])
    for kind in agents:
        env = OfdmaEnv(ec, real_src, seed=seed, positions=positions)
        agent = make_agent(cfg, env, seed, load)
        curve = []
        penv, pload = _pretrain_env(cfg, kind, ec, positions, seed, bundle)
        if penv is not None:
            pa = make_agent(cfg, penv, seed, pload)
            for k in range(int(sch["pretrain_epochs"])):
                curve.append(epoch_row(pa.run_epoch(), "pretrain", k - int(sch["pretrain_epochs"])))
            agent.adopt(pa.learner_state())
        rewards = []
        for e in range(pre + post):
            if e == pre:
                env.set_sources(ext_src)
            st = agent.run_epoch()
            rewards.append(st.mean_reward)
            curve.append(epoch_row(st, "pre_switch" if e < pre else "post_switch", e))
        rec = recovery_epochs(rewards, pre, int(sch["recovery_window"]),
                              float(sch["recovery_band"]), float(sch["recovery_abs_band"]))
        rows.append({"seed": seed, "agent": kind, "switch_epoch": pre,
                     "recovery_epochs": post if rec is None else rec, "recovered": rec is not None,
                     "pre_switch_reward": float(np.mean(rewards[max(0, pre - int(sch["recovery_window"])):pre]))})
        curves[f"seed{seed}_{kind}"] = curve
    extra = {}
    if bundle is not None:
        res = bundle[0]
        extra = {"refiner_heldout_accuracy": res.heldout_accuracy,
                 "refiner_mean_similarity": res.mean_similarity, "refiner_floor": res.floor,
                 "refiner_aborted": res.aborted}
    return rows, {"curves": curves, "extra": extra}


# sweeps ------------------------------------------------------------------------------

def train_and_eval(cfg: dict, seed: int, env_over: dict | None = None, load_scale=None,
                   size_scale=None, alpha=None) -> dict:
    """Train one agent at a design point, then evaluate it with the mean action."""
    sch = cfg["schedule"]
    ec = C.env_config(cfg, **(env_over or {}))
    positions = sample_positions(ec, np.random.default_rng([seed, 5]))
    src = traffic_sources(cfg, ec.n_users, seed, load_scale=load_scale, size_scale=size_scale)
    env = OfdmaEnv(ec, src, seed=seed, positions=positions)
    # every design point starts from the same absolute request unless told otherwise,
    # so the swept variable does not leak into the initial policy
    if cfg["sweep"].get("init_at_nominal", True):
        init_load = offered_rate(traffic_sources(cfg, ec.n_users, seed))
    else:
        init_load = offered_rate(src)
    agent = make_agent(cfg, env, seed, init_load, alpha=alpha)
    curve = [epoch_row(agent.run_epoch(), "train") for _ in range(int(sch["train_epochs"]))]
    ev = [agent.run_epoch(learn=False, deterministic=True) for _ in range(int(sch["eval_epochs"]))]
    curve += [epoch_row(s, "eval") for s in ev]
    delays = [s.mean_delay for s in ev if np.isfinite(s.mean_delay)]
    return {
        "reliability": pooled_reliability(ev),
        "mean_delay_s": float(np.mean(delays)) if delays else float("nan"),
        "mean_power_w": float(np.mean([s.mean_power for s in ev])),
        "offered_rate_bps": float(offered_rate(src).mean()),
        "mean_packet_bytes": float(np.mean([s.mean_size_bits for s in src]) / 8.0),
        "curve": curve,
        "env": env, "agent": agent,
    }


def _point(res: dict, seed: int, **labels) -> dict:
    row = {"seed": seed, **labels}
    for k in ("reliability", "mean_delay_s", "mean_power_w", "offered_rate_bps", "mean_packet_bytes"):
        row[k] = res[k]
    return row


def sweep_seed(cfg: dict, seed: int, scenario: str) -> tuple[list[dict], dict]:
    sw = cfg["sweep"]
    rows, curves = [], {}
    env_over = {}
    if sw.get("finite_blocklength"):
        env_over["rate_model"] = {"kind": "finite_blocklength", "blocklength": int(sw["blocklength"]),
                                  "decode_error": float(sw["decode_error"])}
    if scenario == "sweep_bandwidth":
        for k in sw["n_rbs"]:
            res = train_and_eval(cfg, seed, {**env_over, "n_rbs": int(k)})
            rows.append(_point(res, seed, n_rbs=int(k),
                               bandwidth_hz=int(k) * float(cfg["env"]["rb_bandwidth_hz"]),
                               d_max_s=float(cfg["env"]["d_max_s"])))
            curves[f"seed{seed}_k{k}"] = res["curve"]
    elif scenario == "sweep_rate":
        for ls in sw["load_scale"]:
            for dm in sw["d_max_s"]:
                res = train_and_eval(cfg, seed, {**env_over, "d_max_s": float(dm)}, load_scale=float(ls))
                rows.append(_point(res, seed, load_scale=float(ls), d_max_s=float(dm)))
                curves[f"seed{seed}_load{ls}_dmax{dm}"] = res["curve"]
    elif scenario == "sweep_packet_size":
        for ss in sw["size_scale"]:
            res = train_and_eval(cfg, seed, env_over, size_scale=float(ss))
            rows.append(_point(res, seed, size_scale=float(ss), d_max_s=float(cfg["env"]["d_max_s"])))
            curves[f"seed{seed}_size{ss}"] = res["curve"]
    else:
        raise ValueError(scenario)
    return rows, {"curves": curves}


# reducer error -----------------------------------------------------------------------

def reducer_error_seed(cfg: dict, seed: int) -> tuple[list[dict], dict]:
    """Error of the raw dual mapping at fixed total bandwidth, K doubling."""
    re = cfg["reducer_error"]
    rows = []
    n = int(re["n_users"])
    base = C.env_config(cfg, n_users=n)
    positions = sample_positions(base, np.random.default_rng([seed, 5]))
    rc = C.reducer_config(cfg)
    rc = ReducerConfig(**{**rc.__dict__, "recovery": "none"})
    for k in re["n_rbs"]:
        k = int(k)
        ec = C.env_config(cfg, n_users=n, n_rbs=k, rb_bandwidth_hz=float(re["total_bandwidth_hz"]) / k)
        env = OfdmaEnv(ec, [TrafficSource(u, "deterministic", 1.0, 1.0) for u in range(n)],
                       seed=seed, positions=positions)
        rd = np.full(n, float(re["rate_bps"]))
        alloc, r, dual = reduce(rd, env.channel, ec, rc)
        rows.append({"seed": seed, "n_rbs": k, "rb_bandwidth_hz": ec.rb_bandwidth_hz,
                     "E": reducer_error(r, rd), "total_power_w": alloc.total_power,
                     "dual_iterations": dual.iteration})
    return rows, {}


# power vs delay ----------------------------------------------------------------------

def drain_baseline(env: OfdmaEnv, budget_w: float, n_slots: int, exhaustive_limit: int = 4096) -> dict:
    """Queue-aware baseline with the same average power as the agent.

    Each slot it asks for the rate that empties every queue, finds the
    minimum-power allocation (exhaustive search when ``N**K`` is small,
    otherwise the reducer) and scales power down to ``budget_w`` if needed.
    """
    ec = env.config
    env.reset()
    delays, powers = [], []
    rc = ReducerConfig(power_cap=budget_w)
    for _ in range(n_slots):
        rd = env.backlog_bits / ec.slot_duration_s
        if np.all(rd <= 0):
            alloc = None
        elif ec.rate_model.is_shannon and ec.n_users ** ec.n_rbs <= exhaustive_limit:
            active = rd > 0
            alloc, p = brute_force_min_power(np.where(active, rd, 0.0), env.channel, ec,
                                             limit=exhaustive_limit)
            if p > budget_w:
                alloc = type(alloc)(alloc.rb_assignment, alloc.power * (budget_w / p))
        else:
            alloc, _, _ = reduce(rd, env.channel, ec, rc)
        if alloc is None:
            owner = np.zeros(ec.n_rbs, dtype=int)
            alloc = Allocation.from_owner(owner, np.zeros((ec.n_users, ec.n_rbs)))
        fb, _ = env.step(alloc)
        powers.append(fb.total_power)
        d = fb.all_delays()
        if d.size:
            delays.append(d)
    d = np.concatenate(delays) if delays else np.empty(0)
    return {"mean_delay_s": float(d.mean()) if d.size else float("nan"),
            "mean_power_w": float(np.mean(powers))}


def power_delay_seed(cfg: dict, seed: int) -> tuple[list[dict], dict]:
    rows, curves = [], {}
    slots = int(cfg["schedule"]["eval_epochs"]) * int(cfg["ppo"]["slots_per_rollout"])
    for a in cfg["power_delay"]["alpha"]:
        res = train_and_eval(cfg, seed, alpha=float(a))
        env = res["env"]
        fresh = OfdmaEnv(env.config, traffic_sources(cfg, env.config.n_users, seed), seed=seed,
                         positions=env.positions)
        base = drain_baseline(fresh, res["mean_power_w"], slots)
        rows.append({"seed": seed, "alpha": float(a), "rl_power_w": res["mean_power_w"],
                     "rl_delay_s": res["mean_delay_s"], "baseline_power_w": base["mean_power_w"],
                     "baseline_delay_s": base["mean_delay_s"]})
        curves[f"seed{seed}_alpha{a}"] = res["curve"]
    return rows, {"curves": curves}


# pretrain / deploy -------------------------------------------------------------------

def pretrain_seed(cfg: dict, seed: int, out: Path | None = None) -> tuple[list[dict], dict]:
    """Pre-train in the refined virtual environment and checkpoint the learner."""
    from ..ppo import save_agent
    ec = C.env_config(cfg)
    positions = sample_positions(ec, np.random.default_rng([seed, 5]))
    bundle = train_refiner_on(cfg, real_sessions(cfg), seed)
    penv, pload = _pretrain_env(cfg, "experienced", ec, positions, seed, bundle)
    agent = make_agent(cfg, penv, seed, pload)
    curve = [epoch_row(agent.run_epoch(), "pretrain") for _ in range(int(cfg["schedule"]["pretrain_epochs"]))]
    if out is not None:
        save_agent(out / f"agent_seed{seed}.json", agent, {"config_hash": C.config_hash(cfg), "seed": seed})
    row = {"seed": seed, "final_reward": curve[-1]["mean_reward"] if curve else float("nan"),
           "refiner_heldout_accuracy": bundle[0].heldout_accuracy}
    return [row], {"curves": {f"seed{seed}_pretrain": curve}}


def deploy_seed(cfg: dict, seed: int, checkpoint=None) -> tuple[list[dict], dict]:
    from ..ppo import load_agent_state
    ec = C.env_config(cfg)
    positions = sample_positions(ec, np.random.default_rng([seed, 5]))
    src = traffic_sources(cfg, ec.n_users, seed)
    env = OfdmaEnv(ec, src, seed=seed, positions=positions)
    agent = make_agent(cfg, env, seed, offered_rate(src))
    if checkpoint:
        agent.adopt(load_agent_state(checkpoint)[0])
    stats = [agent.run_epoch() for _ in range(int(cfg["schedule"]["train_epochs"]))]
    row = {"seed": seed, "reliability": pooled_reliability(stats[-int(cfg["schedule"]["eval_epochs"]):]),
           "final_reward": stats[-1].mean_reward if stats else float("nan")}
    return [row], {"curves": {f"seed{seed}_deploy": [epoch_row(s, "deploy") for s in stats]}}


# driver ------------------------------------------------------------------------------

def _one_seed(args):
    cfg, seed, out = args
    sc = cfg["scenario"]
    try:
        if sc == "extreme_switch":
            return extreme_switch_seed(cfg, seed)
        if sc in ("sweep_bandwidth", "sweep_rate", "sweep_packet_size"):
            return sweep_seed(cfg, seed, sc)
        if sc == "reducer_error":
            return reducer_error_seed(cfg, seed)
        if sc == "power_delay":
            return power_delay_seed(cfg, seed)
        if sc == "pretrain":
            return pretrain_seed(cfg, seed, out)
        if sc == "deploy":
            return deploy_seed(cfg, seed, cfg.get("checkpoint"))
    except Exception as exc:
        raise RuntimeError(f"scenario {sc!r}, seed {seed}: {exc}") from exc
    raise ValueError(f"unknown scenario {sc!r}")


def worker_count(n_tasks: int) -> int:
    cap = os.environ.get("URLLC_LAB_THREADS")
    n = int(cap) if cap else 1
    return max(1, min(n, n_tasks))


def run_scenario(cfg: dict, out=None) -> ScenarioResult:
    """Run every seed (in worker processes if allowed) and write artifacts."""
    C.validate(cfg)
    out = Path(out or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in cfg["seeds"]]
    tasks = [(cfg, s, out) for s in seeds]
    workers = worker_count(len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_one_seed, tasks))
    else:
        parts = [_one_seed(t) for t in tasks]
    # deterministic fold, ordered by seed
    result = ScenarioResult(cfg["scenario"], [])
    for seed, (rows, more) in zip(seeds, parts):
        result.rows += rows
        result.curves.update(more.get("curves", {}))
        if more.get("extra"):
            result.extra[f"seed{seed}"] = more["extra"]
    if cfg["scenario"] == "extreme_switch":
        spec = C.virtual_spec(cfg)
        result.extra["extremeness"] = extremeness(real_sessions(cfg), spec.synth_mean_iat_s,
                                                  spec.synth_mean_size_bytes)
    write_result(result, cfg, out)
    return result


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, rows: list[dict], columns=None):
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def write_result(result: ScenarioResult, cfg: dict, out: Path):
    write_csv(out / "results.csv", result.rows)
    if result.curves:
        ep = out / "epochs"
        ep.mkdir(exist_ok=True)
        for tag, rows in result.curves.items():
            gcols = sorted((k for k in rows[0] if k.startswith("gamma_")), key=lambda s: int(s[6:])) if rows else []
            write_csv(ep / f"{tag}.csv", rows, list(EPOCH_COLUMNS[:3]) + gcols + list(EPOCH_COLUMNS[3:]))
    summary = {
        "scenario": result.scenario,
        "config_hash": C.config_hash(cfg),
        "seeds": [int(s) for s in cfg["seeds"]],
        "config": cfg,
        "extra": result.extra,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
