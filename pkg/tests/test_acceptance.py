"""Acceptance suite: one test per numbered criterion.

Each test records a one-line detail string before asserting, and
``conftest.py`` prints a PASS/FAIL line per criterion at the end of the run.
The desk-scale training scenarios (8 and 9) read their settings from
``configs/desk_*.json`` and take several minutes each.
"""

import time
from pathlib import Path

import numpy as np

from urllc_lab.env import EnvConfig, OfdmaEnv, TrafficSource, generate_channel, sample_positions
from urllc_lab.harness import config as C
from urllc_lab.harness.scenarios import reducer_error_seed, run_scenario
from urllc_lab.metrics import update_weights
from urllc_lab.nnet import DenseNetwork, numeric_gradient
from urllc_lab.ppo import PolicyNet, policy_loss
from urllc_lab.reducer import (LN2, Allocation, ReducerConfig, assign_rb, brute_force_min_power,
                               per_rb_power, reduce)
from urllc_lab.refiner import (Refiner, RefinerConfig, epsilon_floor, gan_losses, make_discriminator,
                               train_refiner)

CONFIGS = Path(__file__).parent.parent / "configs"


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def _instance(n, k, seed, load=0.5):
    """Random cell instance with per-user demand ``load`` x the fair bandwidth share at 4 W."""
    ec = EnvConfig(n_users=n, n_rbs=k)
    rng = np.random.default_rng(seed)
    ch = generate_channel(ec, sample_positions(ec, rng), 0, rng)
    rd = np.full(n, load * ec.total_bandwidth_hz * 4 / n)
    return ec, ch, rd


# 1 -----------------------------------------------------------------------------------------

def test_criterion_1_reducer_matches_oracle(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_gap, worst_short = 0.0, 0.0
    for trial in range(50):
        # exclusive RBs: with K < N some user is left without one, so K >= N
        n = int(rng.integers(1, 4))
        k = int(rng.integers(max(2, n), 6))
        ec = EnvConfig(n_users=n, n_rbs=k)
        ch = generate_channel(ec, sample_positions(ec, rng), 0, rng)
        # 0.2 to 2 bit/s/Hz over the user's fair share of the band
        rd = rng.uniform(0.2, 2.0, n) * ec.rb_bandwidth_hz * k / n
        alloc, r, _ = reduce(rd, ch, ec)
        _, p_opt = brute_force_min_power(rd, ch, ec)
        worst_gap = max(worst_gap, alloc.total_power / p_opt - 1.0)
        worst_short = max(worst_short, float(np.max((rd - r) / rd)))

    # fixed lambda: closed-form per-RB optimum against a power grid with step 1e-4 of its range
    ec = EnvConfig(n_users=3, n_rbs=1)
    bw, s2 = ec.rb_bandwidth_hz, ec.noise_power
    p_hi = 1.2
    grid = np.linspace(0.0, p_hi, 10_001)
    step = grid[1]
    owner_mismatch, worst_p = 0, 0.0
    for trial in range(50):
        h = generate_channel(ec, sample_positions(ec, rng), 0, rng).gains[:, 0]
        lam = (s2 / h + rng.uniform(-0.2, 1.0, 3)) * LN2 / bw
        lam = np.maximum(lam, 0.0)
        obj = grid[None, :] - lam[:, None] * bw * np.log2(1.0 + grid[None, :] * h[:, None] / s2)
        best = obj.min(axis=1)
        u_grid = int(np.argmin(best))
        p_grid = grid[np.argmin(obj[u_grid])]
        u = assign_rb(lam, h, bw, s2)
        p = per_rb_power(lam[u], h[u], bw, s2)
        owner_mismatch += u != u_grid
        worst_p = max(worst_p, abs(p - p_grid) / step)
    dt = time.perf_counter() - t0
    record_property("detail", f"worst power gap {worst_gap:.4%}, worst shortfall {worst_short:.4%}, "
                              f"per-RB owner mismatches {owner_mismatch}, worst |p - p_grid| "
                              f"{worst_p:.2f} grid steps, {dt:.1f} s")
    assert worst_gap <= 0.02
    assert worst_short <= 0.01
    assert owner_mismatch == 0 and worst_p <= 1.0
    assert dt < 60


# 2 -----------------------------------------------------------------------------------------

def test_criterion_2_reducer_error_trend(record_property):
    t0 = time.perf_counter()
    cfg = C.load_config(None)
    ks = [16, 32, 64, 128, 256]
    cfg["reducer_error"]["n_rbs"] = ks + [250]
    errs: dict[int, list[float]] = {}
    for seed in range(20):
        rows, _ = reducer_error_seed(cfg, seed)
        for row in rows:
            errs.setdefault(row["n_rbs"], []).append(row["E"])
    med = [float(np.median(errs[k])) for k in ks]
    mean_250 = float(np.mean(errs[250]))
    dt = time.perf_counter() - t0
    record_property("detail", "median E " + " ".join(f"K={k}:{m:.4f}" for k, m in zip(ks, med))
                    + f"; mean E at 180 kHz {mean_250:.4%}, {dt:.0f} s")
    assert all(a > b for a, b in zip(med, med[1:]))
    assert mean_250 < 0.02  # 1% within a factor of two
    assert dt < 600


# 3 -----------------------------------------------------------------------------------------

def test_criterion_3_weight_fixed_point(record_property):
    rng = np.random.default_rng(3)
    checked = stalls = violations = 0
    for _ in range(10_000):
        n, t = int(rng.integers(1, 6)), int(rng.integers(1, 40))
        target = rng.choice([0.9, 0.99, 0.999, 0.99999], size=n)
        w = rng.choice([0.0, 1e-12, 1.0, 1e6], size=n) * rng.random(n)
        for _ in range(t):
            kind = rng.integers(0, 4)
            if kind == 0:
                g = target.copy()  # exactly on target
            elif kind == 1:
                g = np.clip(target + rng.choice([-1, 1], size=n) * 1e-15, 0, 1)
            elif kind == 2:
                g = rng.random(n)
            else:
                g = np.floor(rng.random(n) * 100) / 100  # window-style fractions
            w_next = update_weights(w, g, target)
            stalled = (w_next == w) & (w > 0)
            checked += n
            stalls += int(stalled.sum())
            violations += int(np.sum(stalled & (g < target)))
            w = w_next
    record_property("detail", f"{checked} weight updates, {stalls} positive stalls, {violations} violations")
    assert violations == 0


# 4 -----------------------------------------------------------------------------------------

def test_criterion_4_similarity_floor(record_property):
    rng = np.random.default_rng(4)
    worst = np.inf
    for _ in range(100):
        ref = Refiner(3, tuple(int(h) for h in rng.integers(2, 33, size=int(rng.integers(1, 4)))), rng)
        for w in ref.net.weights:
            w *= rng.uniform(0.1, 10.0)
        for b in ref.net.biases:
            b += rng.standard_normal(b.shape)
        z = rng.standard_normal((256, 3)) * rng.uniform(0.1, 5.0) + rng.uniform(-3, 3, 3)
        fz = ref(z)
        worst = min(worst, float(np.linalg.norm(fz - z, axis=1).mean() - epsilon_floor(fz, z)))
    record_property("detail", f"min (mean similarity - floor) over 100 nets {worst:.3e}")
    assert worst >= -1e-9


# 5 -----------------------------------------------------------------------------------------

def test_criterion_5_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = {"nnet": 0.0, "ppo": 0.0, "gan_d": 0.0, "gan_r": 0.0}
    acts = ["tanh", "relu", "sigmoid", "identity"]
    for _ in range(20):
        depth = int(rng.integers(1, 4))
        widths = [int(rng.integers(1, 6))] + [int(rng.integers(2, 8)) for _ in range(depth)] + \
                 [int(rng.integers(1, 4))]
        net = DenseNetwork(widths, [str(rng.choice(acts)) for _ in range(len(widths) - 1)], rng)
        x = rng.standard_normal((6, widths[0]))
        c = rng.standard_normal((6, widths[-1]))
        out, cache = net.forward(x, keep_cache=True)
        grads, gx = net.backward(cache, c)
        for p, g in zip(net.params + [x], grads + [gx]):
            num = numeric_gradient(lambda: float(np.sum(net(x) * c)), p)
            worst["nnet"] = max(worst["nnet"], _rel(g, num))

        pol = PolicyNet(4, 3, r_max=1e6, hidden=(6,), rng=rng)
        pol.mean_net.weights[-1] *= 50
        feats = rng.random((8, 4))
        raw = pol.mean(feats) + 0.3 * rng.standard_normal((8, 3))
        logp_old = pol.log_prob(feats, raw) + 0.1 * rng.standard_normal(8)
        adv = rng.standard_normal(8)
        _, g_pol, _ = policy_loss(pol, feats, raw, logp_old, adv, 0.2, 0.01)
        for p, g in zip(pol.params, g_pol):
            num = numeric_gradient(lambda: policy_loss(pol, feats, raw, logp_old, adv, 0.2, 0.01)[0], p)
            worst["ppo"] = max(worst["ppo"], _rel(g, num))

        ref = Refiner(3, (6,), rng)
        for w in ref.net.weights:
            w *= 3.0
        disc = make_discriminator(3, (6,), rng)
        xr, z = rng.standard_normal((12, 3)) + 0.5, rng.standard_normal((12, 3))
        lam = float(rng.uniform(0, 2))
        _, g_d, g_r = gan_losses(ref, disc, xr, z, lam, with_grads=True)
        for p, g in zip(disc.params, g_d):
            num = numeric_gradient(lambda: gan_losses(ref, disc, xr, z, lam).d_loss, p)
            worst["gan_d"] = max(worst["gan_d"], _rel(g, num))
        for p, g in zip(ref.params, g_r):
            num = numeric_gradient(lambda: gan_losses(ref, disc, xr, z, lam).r_loss, p)
            worst["gan_r"] = max(worst["gan_r"], _rel(g, num))
    dt = time.perf_counter() - t0
    record_property("detail", "worst relative error " + " ".join(f"{k}:{v:.1e}" for k, v in worst.items())
                    + f", {dt:.0f} s")
    assert max(worst.values()) < 1e-4
    assert dt < 60


# 6 -----------------------------------------------------------------------------------------

def test_criterion_6_mm1_delay_tail(record_property):
    """Poisson arrivals, exponential sizes, one RB at a fixed rate: an M/M/1 queue.

    Slots are 1 us long so the service is effectively continuous; every
    10th departure is kept to thin the correlation between successive delays.
    """
    t0 = time.perf_counter()
    B, rate = 180e3, 1e6
    ec = EnvConfig(n_users=1, n_rbs=1, rb_bandwidth_hz=B, slot_duration_s=1e-6, fading=False, d_max_s=1.0)
    env = OfdmaEnv(ec, [TrafficSource(0, "poisson", 2e-3, 1000.0, seed=3)], seed=0, positions=np.zeros((1, 2)))
    p = (2 ** (rate / B) - 1) * ec.noise_power / env.channel.gains[0, 0]
    alloc = Allocation(np.ones((1, 1), bool), np.array([[p]]))
    parts, n = [], 0
    while n < 1_200_000:
        d = env.hold(alloc, 10_000_000).delays(0)
        parts.append(d)
        n += len(d)
    delays = np.concatenate(parts)[1000::10]
    mu_minus_lam = rate / 1000.0 - 1 / 2e-3
    zs = []
    for x in (0.25, 0.5, 1.0, 2.0, 3.0):
        d = x / mu_minus_lam
        p_hat = float(np.mean(delays > d))
        p_true = float(np.exp(-x))
        zs.append((p_hat - p_true) / np.sqrt(p_true * (1 - p_true) / len(delays)))
    dt = time.perf_counter() - t0
    record_property("detail", f"{len(delays)} departures, z-scores " + " ".join(f"{z:+.2f}" for z in zs)
                    + f", {dt:.0f} s")
    assert len(delays) >= 100_000
    assert max(abs(z) for z in zs) < 3.0
    assert dt < 120


# 7 -----------------------------------------------------------------------------------------

def test_criterion_7_gan_sanity(record_property):
    t0 = time.perf_counter()
    accs, means, sims = [], [], []
    for seed in range(5):
        rng = np.random.default_rng([seed, 99])
        real = 0.5 * rng.standard_normal((4000, 1)) + 1.0
        syn = rng.standard_normal((4000, 1))
        zo = np.random.default_rng([seed, 7]).standard_normal((20_000, 1))
        base = dict(steps=6000, lr_refiner=3e-4, lr_disc=3e-4, batch=512, hidden=(8,))
        res = train_refiner(real, syn, RefinerConfig(lambda_r=0.0, **base), seed=seed)
        accs.append(res.heldout_accuracy)
        means.append(float(res.refiner(zo).mean()))
        pinned = train_refiner(real, syn, RefinerConfig(lambda_r=1e3, **base), seed=seed)
        sims.append(pinned.mean_similarity)
    acc, mean, sim = (float(np.median(v)) for v in (accs, means, sims))
    dt = time.perf_counter() - t0
    record_property("detail", f"median held-out accuracy {acc:.3f}, refined mean {mean:.3f} (real 1.0), "
                              f"similarity at lambda_r=1e3 {sim:.4f}, {dt:.0f} s")
    assert 0.4 <= acc <= 0.6
    assert abs(mean - 1.0) <= 0.1
    assert sim < 0.05
    assert dt < 300


# 8 -----------------------------------------------------------------------------------------

def test_criterion_8_experienced_agent_recovers_first(record_property, tmp_path):
    t0 = time.perf_counter()
    cfg = C.load_config(CONFIGS / "desk_extreme_switch.json")
    assert len(cfg["seeds"]) >= 5 and cfg["env"]["n_users"] == 5
    res = run_scenario(cfg, tmp_path)
    by_agent: dict[str, list[int]] = {}
    for row in res.rows:
        by_agent.setdefault(row["agent"], []).append(int(row["recovery_epochs"]))
    med = {a: float(np.median(v)) for a, v in by_agent.items()}
    recovered = sum(bool(r["recovered"]) for r in res.rows)
    dt = time.perf_counter() - t0
    record_property("detail", "median recovery epochs " + " ".join(f"{a}:{m:g}" for a, m in med.items())
                    + f" ({recovered}/{len(res.rows)} runs recovered, censored at "
                    f"{cfg['schedule']['post_switch_epochs']}), {dt / 60:.0f} min")
    assert med["experienced"] < med["real_only"] <= med["synthetic"] < med["vanilla"]
    assert dt < 3600


# 9 -----------------------------------------------------------------------------------------

def _median_curve(rows, key, value="reliability", where=None):
    pts: dict[float, list[float]] = {}
    for r in rows:
        if where and any(r[k] != v for k, v in where.items()):
            continue
        pts.setdefault(float(r[key]), []).append(float(r[value]))
    xs = sorted(pts)
    return xs, [float(np.median(pts[x])) for x in xs]


def _nondecreasing(ys):
    return all(b >= a for a, b in zip(ys, ys[1:]))


def test_criterion_9_monotone_tradeoffs(record_property, tmp_path):
    t0 = time.perf_counter()
    out = {}
    for sc in ("bandwidth", "rate", "packet_size"):
        cfg = C.load_config(CONFIGS / f"desk_sweep_{sc}.json")
        assert len(cfg["seeds"]) >= 5
        out[sc] = run_scenario(cfg, tmp_path / sc).rows
    checks, lines = [], []
    _, y = _median_curve(out["bandwidth"], "n_rbs")
    checks.append(_nondecreasing(y))
    lines.append("bandwidth " + "/".join(f"{v:.3f}" for v in y))
    loads = sorted({r["load_scale"] for r in out["rate"]})
    dmaxes = sorted({r["d_max_s"] for r in out["rate"]})
    for dm in dmaxes:
        _, y = _median_curve(out["rate"], "load_scale", where={"d_max_s": dm})
        checks.append(_nondecreasing(y[::-1]))
        lines.append(f"load@Dmax={dm * 1e3:g}ms " + "/".join(f"{v:.3f}" for v in y))
    for ls in loads:
        _, y = _median_curve(out["rate"], "d_max_s", where={"load_scale": ls})
        checks.append(_nondecreasing(y))
        lines.append(f"Dmax@load={ls:g} " + "/".join(f"{v:.3f}" for v in y))
    _, y = _median_curve(out["packet_size"], "size_scale")
    checks.append(_nondecreasing(y[::-1]))
    lines.append("size " + "/".join(f"{v:.3f}" for v in y))
    dt = time.perf_counter() - t0
    record_property("detail", f"{sum(checks)}/{len(checks)} curves monotone; median reliability "
                    + "; ".join(lines) + f"; {dt / 60:.0f} min")
    assert all(checks)
    assert dt < 3600


# 10 ----------------------------------------------------------------------------------------

def _slope(ns, cfg, seeds=range(5)):
    times = []
    for n in ns:
        ts = []
        for s in seeds:
            ec, ch, rd = _instance(n, 250, s)
            t = time.perf_counter()
            reduce(rd, ch, ec, cfg)
            ts.append(time.perf_counter() - t)
        times.append(float(np.median(ts)))
    return float(np.polyfit(np.log(ns), np.log(times), 1)[0]), times


def test_criterion_10_reducer_performance(record_property):
    ec, ch, rd = _instance(20, 250, 0)
    reduce(rd, ch, ec)  # warm caches
    ts = []
    for s in range(10):
        ec, ch, rd = _instance(20, 250, s)
        t = time.perf_counter()
        reduce(rd, ch, ec)
        ts.append(time.perf_counter() - t)
    ns = [4, 8, 16, 32, 64]
    # equal iteration budget at every N isolates the per-iteration cost
    fixed = ReducerConfig(max_iter=60, rate_tol=0.0, gap_tol=0.0, local_search_evals=0)
    slope_fixed, _ = _slope(ns, fixed)
    slope_default, _ = _slope(ns, ReducerConfig())
    record_property("detail", f"N=20 K=250 reduce max {max(ts) * 1e3:.0f} ms (median "
                              f"{np.median(ts) * 1e3:.0f} ms); log-log slope vs N {slope_fixed:.2f} at a fixed "
                              f"iteration budget, {slope_default:.2f} end to end")
    assert max(ts) < 0.1
    assert slope_fixed <= 3.0 and slope_default <= 3.0
