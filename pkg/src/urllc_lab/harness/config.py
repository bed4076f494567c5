"""Run configuration: one JSON document, overridable leaf by leaf."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from ..env import EnvConfig
from ..metrics import RewardConfig
from ..ppo import PPOConfig
from ..radio import RateModel, dbm_to_watt
from ..reducer import ReducerConfig
from ..refiner import RefinerConfig, VirtualEnvSpec

SCENARIOS = (
    "pretrain", "deploy", "extreme_switch", "sweep_bandwidth", "sweep_rate",
    "sweep_packet_size", "reducer_error", "power_delay",
)

DEFAULTS: dict = {
    "scenario": "deploy",
    "seeds": [0],
    "out": "runs/default",
    "env": {
        "n_users": 20,
        "n_rbs": 250,
        "rb_bandwidth_hz": 180e3,
        "noise_psd_dbm_hz": -173.9,
        "slot_duration_s": 1e-3,
        "max_bs_power_w": 4.0,
        "cell_side_m": 500.0,
        "pathloss_exponent": 3.0,
        "carrier_hz": 2e9,
        "d_max_s": 10e-3,
        "target_reliability": 0.99,
        "fading": True,
        "rate_model": {"kind": "shannon", "blocklength": None, "decode_error": None},
    },
    "traffic": {
        "trace": None,  # path to a session CSV; None -> synthetic fixture sessions
        "fixture_sessions": 200,
        "fixture_mean_iat_us": 2000.0,
        "fixture_mean_size_bytes": 150.0,
        "mode": "trace",  # trace | poisson | deterministic
        "mean_iat_us": 2000.0,
        "mean_size_bytes": 150.0,
        "load_scale": 1.0,  # multiplies every IAT by 1/load_scale
        "size_scale": 1.0,  # multiplies every packet size
    },
    "extreme": {
        "mode": "trace",
        "mean_iat_us": 200.0,
        "mean_size_bytes": 350.0,
        "fixture_sessions": 200,
    },
    "reward": {"alpha": 0.1, "window": 100},
    "ppo": {
        "clip": 0.2, "discount": 0.99, "gae_lambda": 0.95, "epochs": 4, "minibatch": 64,
        "lr_policy": 3e-4, "lr_value": 1e-3, "slots_per_rollout": 512, "entropy_coef": 0.0,
        "hidden": [64, 64], "init_log_std": -0.5, "reward_ema": 0.99,
        "init_rate_factor": 2.0,
    },
    "reducer": {
        "rate_tol": 1e-2, "max_iter": 500, "method": "subgradient", "recovery": "polish",
        "step_scale": 1.0, "gap_tol": 1e-2, "local_search_evals": 4000, "max_candidates": 16,
        "patience": None,
    },
    "agent_reducer": {"max_iter": 30, "local_search_evals": 0, "gap_tol": 0.02, "patience": 5},
    "refiner": {
        "lambda_r": 1.0, "epsilon_r": 0.5, "batch": 128, "lr_refiner": 1e-4, "lr_disc": 1e-4,
        "steps": 20000, "hidden": [32, 32], "dataset_size": 4000,
    },
    "virtual": {"w_real": 0.5, "w_synthetic": 0.5, "synth_mean_iat_us": 200.0, "synth_mean_size_bytes": 350.0},
    "schedule": {
        "pretrain_epochs": 100,
        "pre_switch_epochs": 100,
        "post_switch_epochs": 150,
        "recovery_window": 20,
        "recovery_band": 0.10,
        "recovery_abs_band": 0.0,
        "train_epochs": 100,
        "eval_epochs": 10,
    },
    "sweep": {
        "n_rbs": [4, 8, 16, 32],
        "load_scale": [0.5, 1.0, 2.0, 4.0],
        "d_max_s": [2e-3, 5e-3, 10e-3, 20e-3],
        "size_scale": [0.5, 1.0, 2.0, 4.0],
        "init_at_nominal": True,
        "finite_blocklength": False,
        "blocklength": 200,
        "decode_error": 1e-5,
    },
    "reducer_error": {
        "total_bandwidth_hz": 45e6,
        "n_rbs": [16, 32, 64, 128, 256],
        "n_users": 20,
        "rate_bps": 1e6,
    },
    "power_delay": {"alpha": [0.05, 0.2, 1.0, 5.0]},
}


def deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings to a copy of ``cfg``."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise KeyError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = parse_value(text)
    return cfg


def load_config(path=None, overrides=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = deep_merge(cfg, json.loads(Path(path).read_text()))
    cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    if cfg["scenario"] not in SCENARIOS:
        raise ValueError(f"unknown scenario {cfg['scenario']!r}")
    if not cfg["seeds"]:
        raise ValueError("seed list is empty")
    trace = cfg["traffic"].get("trace")
    if trace is not None and not Path(trace).exists():
        raise FileNotFoundError(trace)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# builders ---------------------------------------------------------------------------

def env_config(cfg: dict, **over) -> EnvConfig:
    e = deep_merge(cfg["env"], over)
    rm = e["rate_model"]
    model = RateModel(rm["kind"], rm.get("blocklength"), rm.get("decode_error"))
    d_max = e["d_max_s"]
    tgt = e["target_reliability"]
    return EnvConfig(
        n_users=int(e["n_users"]), n_rbs=int(e["n_rbs"]),
        rb_bandwidth_hz=float(e["rb_bandwidth_hz"]),
        noise_psd_w_per_hz=dbm_to_watt(float(e["noise_psd_dbm_hz"])),
        slot_duration_s=float(e["slot_duration_s"]), max_bs_power_w=float(e["max_bs_power_w"]),
        cell_side_m=float(e["cell_side_m"]), pathloss_exponent=float(e["pathloss_exponent"]),
        carrier_hz=float(e["carrier_hz"]),
        d_max_s=tuple(d_max) if isinstance(d_max, list) else float(d_max),
        target_reliability=tuple(tgt) if isinstance(tgt, list) else float(tgt),
        fading=bool(e["fading"]), rate_model=model,
    )


def ppo_config(cfg: dict) -> PPOConfig:
    p = {k: v for k, v in cfg["ppo"].items() if k != "init_rate_factor"}
    p["hidden"] = tuple(p["hidden"])
    return PPOConfig(**p)


def reducer_config(cfg: dict, agent: bool = False, power_cap=None) -> ReducerConfig:
    r = dict(cfg["reducer"])
    if agent:
        r.update(cfg["agent_reducer"])
    return ReducerConfig(power_cap=power_cap, **r)


def reward_config(cfg: dict, ec: EnvConfig) -> RewardConfig:
    return RewardConfig(float(cfg["reward"]["alpha"]), ec.max_bs_power_w)


def refiner_config(cfg: dict) -> RefinerConfig:
    r = {k: v for k, v in cfg["refiner"].items() if k != "dataset_size"}
    r["hidden"] = tuple(r["hidden"])
    return RefinerConfig(**r)


def virtual_spec(cfg: dict) -> VirtualEnvSpec:
    v = cfg["virtual"]
    return VirtualEnvSpec(float(v["w_real"]), float(v["w_synthetic"]),
                          float(v["synth_mean_iat_us"]) * 1e-6, float(v["synth_mean_size_bytes"]))
