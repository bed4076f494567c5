"""Tidy per-figure tables (and PNG renderings) from finished run directories."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from .scenarios import write_csv

# column order of every emitted table; changing one is a schema change
SCHEMAS = {
    "fig6_recovery": ("agent", "median_recovery_epochs", "mean_recovery_epochs", "n_recovered", "seeds"),
    "fig6_reward_curves": ("agent", "epoch", "median_reward", "seeds"),
    "fig7_bandwidth": ("n_rbs", "bandwidth_hz", "median_reliability", "mean_reliability",
                       "median_delay_s", "seeds"),
    "fig8_power_delay": ("alpha", "rl_power_w", "rl_delay_s", "baseline_power_w", "baseline_delay_s", "seeds"),
    "fig9_surface": ("load_scale", "offered_rate_bps", "d_max_s", "median_reliability",
                     "mean_reliability", "seeds"),
    "fig10_packetsize": ("size_scale", "mean_packet_bytes", "median_reliability", "mean_reliability",
                         "median_delay_s", "seeds"),
    "fig11_reducer_error": ("rb_bandwidth_hz", "mean_E", "std_E", "seeds"),
}

AGENT_ORDER = ("experienced", "real_only", "synthetic", "vanilla")


class MissingArtifacts(FileNotFoundError):
    pass


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _f(rows, key):
    return np.array([float(r[key]) for r in rows])


def _groups(rows, *keys):
    g = defaultdict(list)
    for r in rows:
        g[tuple(float(r[k]) for k in keys)].append(r)
    return dict(sorted(g.items()))


def _med(x):
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    return float(np.median(x)) if x.size else float("nan")


def table_fig6(run: Path, rows):
    by_agent = defaultdict(list)
    for r in rows:
        by_agent[r["agent"]].append(r)
    agents = [a for a in AGENT_ORDER if a in by_agent] + sorted(set(by_agent) - set(AGENT_ORDER))
    summary = []
    for a in agents:
        rs = by_agent[a]
        rec = _f(rs, "recovery_epochs")
        summary.append({"agent": a, "median_recovery_epochs": float(np.median(rec)),
                        "mean_recovery_epochs": float(rec.mean()),
                        "n_recovered": sum(r["recovered"] == "true" for r in rs), "seeds": len(rs)})
    curves = []
    for a in agents:
        per_epoch = defaultdict(list)
        for r in by_agent[a]:
            f = run / "epochs" / f"seed{r['seed']}_{a}.csv"
            if not f.exists():
                continue
            for e in read_rows(f):
                if e["phase"] != "pretrain":
                    per_epoch[int(e["epoch"])].append(float(e["mean_reward"]))
        for ep in sorted(per_epoch):
            curves.append({"agent": a, "epoch": ep, "median_reward": float(np.median(per_epoch[ep])),
                           "seeds": len(per_epoch[ep])})
    return {"fig6_recovery": summary, "fig6_reward_curves": curves}


def table_fig7(rows):
    out = []
    for (k,), rs in _groups(rows, "n_rbs").items():
        out.append({"n_rbs": int(k), "bandwidth_hz": float(rs[0]["bandwidth_hz"]),
                    "median_reliability": _med(_f(rs, "reliability")),
                    "mean_reliability": float(_f(rs, "reliability").mean()),
                    "median_delay_s": _med(_f(rs, "mean_delay_s")), "seeds": len(rs)})
    return {"fig7_bandwidth": out}


def table_fig9(rows):
    out = []
    for (ls, dm), rs in _groups(rows, "load_scale", "d_max_s").items():
        out.append({"load_scale": ls, "offered_rate_bps": float(_f(rs, "offered_rate_bps").mean()),
                    "d_max_s": dm, "median_reliability": _med(_f(rs, "reliability")),
                    "mean_reliability": float(_f(rs, "reliability").mean()), "seeds": len(rs)})
    return {"fig9_surface": out}


def table_fig10(rows):
    out = []
    for (ss,), rs in _groups(rows, "size_scale").items():
        out.append({"size_scale": ss, "mean_packet_bytes": float(_f(rs, "mean_packet_bytes").mean()),
                    "median_reliability": _med(_f(rs, "reliability")),
                    "mean_reliability": float(_f(rs, "reliability").mean()),
                    "median_delay_s": _med(_f(rs, "mean_delay_s")), "seeds": len(rs)})
    return {"fig10_packetsize": out}


def table_fig11(rows):
    out = []
    for (bw,), rs in _groups(rows, "rb_bandwidth_hz").items():
        e = _f(rs, "E")
        out.append({"rb_bandwidth_hz": bw, "mean_E": float(e.mean()), "std_E": float(e.std()),
                    "seeds": len(rs)})
    return {"fig11_reducer_error": out}


def table_fig8(rows):
    out = []
    for (a,), rs in _groups(rows, "alpha").items():
        out.append({"alpha": a, "rl_power_w": _med(_f(rs, "rl_power_w")),
                    "rl_delay_s": _med(_f(rs, "rl_delay_s")),
                    "baseline_power_w": _med(_f(rs, "baseline_power_w")),
                    "baseline_delay_s": _med(_f(rs, "baseline_delay_s")), "seeds": len(rs)})
    return {"fig8_power_delay": out}


def _plot(name: str, rows: list[dict], path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    if name == "fig6_reward_curves":
        for a in dict.fromkeys(r["agent"] for r in rows):
            rs = [r for r in rows if r["agent"] == a]
            y = -np.array([r["median_reward"] for r in rs])
            ax.semilogy([r["epoch"] for r in rs], np.maximum(y, 1e-6), label=a)
        ax.set_xlabel("epoch")
        ax.set_ylabel("-median reward")
        ax.legend()
    elif name == "fig6_recovery":
        ax.bar([r["agent"] for r in rows], [r["median_recovery_epochs"] for r in rows])
        ax.set_ylabel("epochs to recovery (median)")
    elif name == "fig7_bandwidth":
        ax.plot([r["bandwidth_hz"] / 1e6 for r in rows], [r["median_reliability"] for r in rows], "o-")
        ax.set_xlabel("bandwidth (MHz)")
        ax.set_ylabel("reliability")
    elif name == "fig9_surface":
        for dm in sorted({r["d_max_s"] for r in rows}):
            rs = [r for r in rows if r["d_max_s"] == dm]
            ax.plot([r["offered_rate_bps"] / 1e6 for r in rs], [r["median_reliability"] for r in rs],
                    "o-", label=f"D_max={dm * 1e3:g} ms")
        ax.set_xlabel("offered rate per user (Mbit/s)")
        ax.set_ylabel("reliability")
        ax.legend()
    elif name == "fig10_packetsize":
        ax.plot([r["mean_packet_bytes"] for r in rows], [r["median_reliability"] for r in rows], "o-")
        ax.set_xlabel("mean packet size (bytes)")
        ax.set_ylabel("reliability")
    elif name == "fig11_reducer_error":
        x = [r["rb_bandwidth_hz"] / 1e3 for r in rows]
        ax.errorbar(x, [r["mean_E"] for r in rows], yerr=[r["std_E"] for r in rows], fmt="o-")
        ax.set_xscale("log")
        ax.set_xlabel("RB bandwidth (kHz)")
        ax.set_ylabel("mean error E")
    elif name == "fig8_power_delay":
        ax.plot([r["rl_power_w"] for r in rows], [r["rl_delay_s"] * 1e3 for r in rows], "o-", label="RL agent")
        ax.plot([r["rl_power_w"] for r in rows], [r["baseline_delay_s"] * 1e3 for r in rows], "s--",
                label="drain baseline")
        ax.set_xlabel("mean power (W)")
        ax.set_ylabel("mean delay (ms)")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def run_dirs(path) -> list[Path]:
    path = Path(path)
    if (path / "summary.json").exists():
        return [path]
    found = sorted(p.parent for p in path.glob("*/summary.json"))
    if not found:
        raise MissingArtifacts(f"no summary.json under {path}")
    return found


def emit_plot_data(path, png: bool = True) -> dict[str, Path]:
    """Write ``plots/<table>.csv`` (and ``.png``) for every run under ``path``."""
    written = {}
    for run in run_dirs(path):
        summary = json.loads((run / "summary.json").read_text())
        res = run / "results.csv"
        if not res.exists():
            raise MissingArtifacts(f"{res} is missing")
        rows = read_rows(res)
        sc = summary["scenario"]
        if sc == "extreme_switch":
            tables = table_fig6(run, rows)
        elif sc == "sweep_bandwidth":
            tables = table_fig7(rows)
        elif sc == "sweep_rate":
            tables = table_fig9(rows)
        elif sc == "sweep_packet_size":
            tables = table_fig10(rows)
        elif sc == "reducer_error":
            tables = table_fig11(rows)
        elif sc == "power_delay":
            tables = table_fig8(rows)
        else:
            tables = {}
        out = run / "plots"
        out.mkdir(exist_ok=True)
        for name, trs in tables.items():
            write_csv(out / f"{name}.csv", trs, list(SCHEMAS[name]))
            written[name] = out / f"{name}.csv"
            if png and trs:
                _plot(name, trs, out / f"{name}.png")
    return written
