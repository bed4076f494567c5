"""Map a desired-rate vector to a minimum-power RB and power allocation.

The problem ``min sum p  s.t.  r_i(rho, p) >= r_i^d`` is attacked through its
Lagrangian dual: for fixed multipliers ``lam`` every RB decouples into a
closed-form power level and an argmin over users, and ``lam`` is driven by
the rate shortfall.  Two ways of turning dual iterates into an allocation
are offered:

``polish``
    keep each visited RB assignment, water-fill every user on its own RBs to
    hit its target exactly, then improve the best few assignments by local
    search.  Stops early once the dual bound certifies the result.
``none``
    return the raw per-RB dual solution of the least-violating iterate.
    Rates then only approximately match the targets, which is what the
    reducer-error metric measures.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .radio import LN2, SHANNON, RateModel, rate_of

_TINY = 1e-12
# keeps lam * B * h / sigma^2 finite in float64
_LAM_MIN, _LAM_MAX = 1e-300, 1e100


@dataclass
class Allocation:
    rb_assignment: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        self.rb_assignment = np.asarray(self.rb_assignment, dtype=bool)
        self.power = np.asarray(self.power, dtype=float)
        if self.rb_assignment.shape != self.power.shape or self.power.ndim != 2:
            raise ValueError("rho and P must be matching N x K matrices")
        if not np.all(self.rb_assignment.sum(axis=0) == 1):
            raise ValueError("every RB must be assigned to exactly one user")
        if np.any(self.power < 0):
            raise ValueError("power must be nonnegative")
        if np.any(self.power[~self.rb_assignment] != 0):
            raise ValueError("power on unassigned (user, RB) pairs")

    @classmethod
    def from_owner(cls, owner, power_rows) -> "Allocation":
        owner = np.asarray(owner)
        n, k = power_rows.shape
        rho = np.zeros((n, k), dtype=bool)
        rho[owner, np.arange(k)] = True
        return cls(rho, np.where(rho, power_rows, 0.0))

    @property
    def owner(self) -> np.ndarray:
        return self.rb_assignment.argmax(axis=0)

    @property
    def total_power(self) -> float:
        return float(self.power.sum())


@dataclass
class DualState:
    lam: np.ndarray
    iteration: int = 0
    residual: float = np.inf
    lower_bound: float = -np.inf
    certified: bool = False
    cap_exceeded: bool = False

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        if np.any(self.lam < 0):
            raise ValueError("multipliers must be nonnegative")


@dataclass(frozen=True)
class ReducerConfig:
    rate_tol: float = 1e-2
    max_iter: int = 500
    method: str = "subgradient"  # or "ellipsoid"
    recovery: str = "polish"  # or "none"
    step_scale: float = 1.0
    gap_tol: float = 1e-2  # certified: within 1% of the dual bound, hence of the optimum
    local_search_evals: int = 4000
    max_candidates: int = 16
    power_cap: float | None = None
    patience: int | None = None  # polish: stop after this many iterations without improvement

    def __post_init__(self):
        if self.method not in ("subgradient", "ellipsoid"):
            raise ValueError(f"unknown dual method {self.method!r}")
        if self.recovery not in ("polish", "none"):
            raise ValueError(f"unknown recovery {self.recovery!r}")
        if self.rate_tol < 0 or self.max_iter < 1:
            raise ValueError("bad tolerance or iteration cap")


# per-RB subproblem ---------------------------------------------------------

def _inv_gain(h, noise_power):
    h = np.asarray(h, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(h > 0, noise_power / np.where(h > 0, h, 1.0), np.inf)


def per_rb_power(lam, h, bandwidth: float, noise_power: float):
    """Lagrangian-optimal power ``max(lam B / ln2 - sigma^2 / h, 0)`` (Shannon)."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0) or np.any(np.asarray(h) < 0):
        raise ValueError("lam and h must be nonnegative")
    p = np.maximum(lam * bandwidth / LN2 - _inv_gain(h, noise_power), 0.0)
    return p if p.ndim else float(p)


def per_rb_power_fb(lam, h, bandwidth, noise_power, model: RateModel,
                    grid: int = 32, iters: int = 45):
    """Numerical maximizer of ``lam * rate(p) - p`` for a non-Shannon model.

    The finite-blocklength rate is zero below an SNR threshold, so the
    objective is not unimodal on ``[0, p_shannon]``: a log grid locates the
    bump and golden-section search refines it.  Shannon's level is an upper
    bound since the dispersion term only lowers the marginal rate.
    """
    lam, h = np.broadcast_arrays(np.asarray(lam, float), np.asarray(h, float))
    hi = np.maximum(lam * bandwidth / LN2 - _inv_gain(h, noise_power), 0.0)
    hf, lf, hif = h.ravel(), lam.ravel(), hi.ravel()
    out = np.zeros_like(hf)
    live = hif > 0
    if not np.any(live):
        return out.reshape(h.shape)
    snr_per_w = hf[live] / noise_power
    gain = lf[live] * bandwidth
    top = hif[live]
    pen = model.backoff / LN2

    def obj(p):
        # p has a trailing axis; rows line up with the live entries
        x = 1.0 + p * snr_per_w[:, None]
        se = np.maximum(np.log2(x) - np.sqrt(1.0 - x ** -2) * pen, 0.0)
        return gain[:, None] * se - p

    frac = np.concatenate([[0.0], np.geomspace(1e-6, 1.0, grid - 1)])
    pts = top[:, None] * frac[None, :]
    k = np.argmax(obj(pts), axis=1)
    rows = np.arange(len(top))
    a = pts[rows, np.maximum(k - 1, 0)][:, None]
    b = pts[rows, np.minimum(k + 1, grid - 1)][:, None]
    g = (np.sqrt(5.0) - 1.0) / 2.0
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = obj(c), obj(d)
    for _ in range(iters):
        left = fc > fd
        c0, d0 = c, d
        b = np.where(left, d0, b)
        a = np.where(left, a, c0)
        c = np.where(left, b - g * (b - a), d0)
        d = np.where(left, c0, a + g * (b - a))
        fc, fd = np.where(left, obj(c), fd), np.where(left, fc, obj(d))
    p = 0.5 * (a + b)
    out[live] = np.where(obj(p) > 0.0, p, 0.0)[:, 0]
    return out.reshape(h.shape)


def _per_rb_solution(lam, H, bandwidth, noise_power, model):
    lam_col = np.asarray(lam, float)[:, None]
    if model.is_shannon:
        # at the optimum 1 + p h / s2 = lam B h / (s2 ln2) whenever p > 0
        with np.errstate(divide="ignore"):
            lvl = np.log2(lam_col * (bandwidth / (LN2 * noise_power)) * H)
        se = np.maximum(lvl, 0.0)
        p = np.maximum(lam_col * bandwidth / LN2 - _inv_gain(H, noise_power), 0.0)
        rate = bandwidth * se
    else:
        p = per_rb_power_fb(np.broadcast_to(lam_col, H.shape), H, bandwidth, noise_power, model)
        rate = rate_of(p, H, bandwidth, noise_power, model)
    return p, rate, p - lam_col * rate


def assign_rb(lam, h_col, bandwidth: float, noise_power: float, model: RateModel = SHANNON) -> int:
    """User minimizing the per-RB Lagrangian; ties go to the lowest index."""
    lam = np.asarray(lam, dtype=float)
    h_col = np.asarray(h_col, dtype=float)
    if lam.size == 0:
        raise ValueError("need at least one user")
    _, _, obj = _per_rb_solution(lam, h_col[:, None], bandwidth, noise_power, model)
    return int(np.argmin(obj[:, 0]))


def lagrangian_primal(lam, H, bandwidth, noise_power, model: RateModel = SHANNON):
    """Per-RB optimum at fixed ``lam``: (owner, power row matrix, rates, sum of minima)."""
    p, rate, obj = _per_rb_solution(lam, H, bandwidth, noise_power, model)
    k = H.shape[1]
    owner = np.argmin(obj, axis=0)
    cols = np.arange(k)
    mine = np.zeros_like(p, dtype=bool)
    mine[owner, cols] = True
    r = np.where(mine, rate, 0.0).sum(axis=1)
    return owner, np.where(mine, p, 0.0), r, float(obj[owner, cols].sum())


def dual_bound(lam, r_desired, H, bandwidth, noise_power, model: RateModel = SHANNON) -> float:
    """Dual function value; a lower bound on the minimum total power."""
    _, _, _, g = lagrangian_primal(lam, H, bandwidth, noise_power, model)
    return g + float(np.dot(lam, r_desired))


# water-filling ---------------------------------------------------------------

def waterfill_rows(masks, H, r_desired, bandwidth, noise_power):
    """Closed-form minimum-power water-filling for every user at once.

    Returns an ``N x K`` power matrix, or ``None`` when some user with a
    positive target has no usable RB.
    """
    masks = np.asarray(masks, dtype=bool)
    n, k = H.shape
    g = np.where(masks, H, 0.0)
    order = np.argsort(-g, axis=1, kind="stable")
    gs = np.take_along_axis(g, order, axis=1)
    count = (gs > 0).sum(axis=1)
    need = np.asarray(r_desired, dtype=float) > 0
    if np.any(need & (count == 0)):
        return None
    inv = _inv_gain(gs, noise_power)
    with np.errstate(invalid="ignore"):
        cum = np.cumsum(np.where(np.isfinite(inv), np.log2(inv), 0.0), axis=1)
        m = np.arange(1, k + 1)[None, :]
        log_lvl = (np.asarray(r_desired, float)[:, None] / bandwidth + cum) / m
        ok = (m <= count[:, None]) & (log_lvl > np.log2(inv))
    mstar = np.where(ok.any(axis=1), k - 1 - np.argmax(ok[:, ::-1], axis=1), 0)
    lvl = 2.0 ** log_lvl[np.arange(n), mstar]
    p = np.maximum(lvl[:, None] - _inv_gain(g, noise_power), 0.0)
    p = np.where(masks & (g > 0) & need[:, None], p, 0.0)
    return p


def _waterfill_cost(h, r, bandwidth, noise_power) -> float:
    """Total power of the single-user water-filling solution (Shannon)."""
    g = np.sort(h[h > 0])[::-1]
    if g.size == 0:
        return np.inf
    log_inv = np.log2(noise_power / g)
    log_lvl = (r / bandwidth + np.cumsum(log_inv)) / np.arange(1, g.size + 1)
    ok = np.flatnonzero(log_lvl > log_inv)
    m = ok[-1] if ok.size else 0
    return float(np.sum(np.maximum(2.0 ** log_lvl[m] - noise_power / g[: m + 1], 0.0)))


def _fb_user_power(mask, h, r, bandwidth, noise_power, model, rel_tol=1e-10):
    """Minimum power for one user on its RBs under a non-Shannon model.

    The user's rate is nondecreasing in its multiplier, so Brent's method on
    ``log lam`` finds the smallest multiplier that meets ``r``.
    """
    if r <= 0:
        return np.zeros_like(h)
    hm = np.where(mask, h, 0.0)
    if not np.any(hm > 0):
        return None

    def powers(log_lam):
        return per_rb_power_fb(np.full_like(hm, np.exp(log_lam)), hm, bandwidth, noise_power, model)

    def gap(log_lam):
        return float(rate_of(powers(log_lam), hm, bandwidth, noise_power, model).sum()) - r

    lo = np.log(LN2 / bandwidth * noise_power / hm.max())
    hi = lo + 1.0
    while gap(hi) < 0:
        lo, hi = hi, hi + 2.0
        if hi > 700:
            return None
    root = brentq(gap, lo, hi, xtol=1e-13, rtol=rel_tol)
    # step up until feasible so the target is never undershot
    x = root
    while gap(x) < 0:
        x += max(abs(x) * rel_tol, 1e-12)
    return powers(x)


def _user_powers(owner, H, r_desired, bandwidth, noise_power, model):
    n = H.shape[0]
    masks = owner[None, :] == np.arange(n)[:, None]
    if model.is_shannon:
        return waterfill_rows(masks, H, r_desired, bandwidth, noise_power)
    rows = []
    for i in range(n):
        p = _fb_user_power(masks[i], H[i], r_desired[i], bandwidth, noise_power, model)
        if p is None:
            return None
        rows.append(p)
    return np.array(rows)


class _Polisher:
    """Caches per-user water-filling costs for a fixed instance."""

    def __init__(self, H, r_desired, bandwidth, noise_power, model):
        self.H, self.rd = H, r_desired
        self.args = (bandwidth, noise_power, model)
        self.evals = 0

    def user_cost(self, i, mask) -> float:
        self.evals += 1
        r = self.rd[i]
        if r <= 0:
            return 0.0
        if not mask.any():
            return np.inf
        bw, s2, model = self.args
        if model.is_shannon:
            return _waterfill_cost(self.H[i][mask], r, bw, s2)
        p = _fb_user_power(mask, self.H[i], r, bw, s2, model)
        return np.inf if p is None else float(p.sum())

    def costs(self, owner) -> np.ndarray:
        return np.array([self.user_cost(i, owner == i) for i in range(len(self.rd))])

    def repair(self, owner):
        """Hand an RB to every starving user, taking it where it hurts least."""
        owner = owner.copy()
        n, k = self.H.shape
        for u in range(n):
            if self.rd[u] <= 0 or np.any(owner == u):
                continue
            best = None
            for j in range(k):
                a = owner[j]
                if self.rd[a] > 0 and np.count_nonzero(owner == a) < 2:
                    continue
                trial = owner.copy()
                trial[j] = u
                delta = (self.user_cost(a, trial == a) - self.user_cost(a, owner == a)
                         + self.user_cost(u, trial == u))
                if best is None or delta < best[0]:
                    best = (delta, j)
            if best is None:
                return owner
            owner[best[1]] = u
        return owner

    def local_search(self, owner, budget: int):
        """First-improvement search over single-RB moves and pairwise swaps."""
        n, k = self.H.shape
        cost = self.costs(owner)
        stop = self.evals + budget
        improved = True
        while improved and self.evals < stop:
            improved = False
            for j in range(k):
                a = owner[j]
                for b in range(n):
                    if b == a or self.evals >= stop:
                        continue
                    trial = owner.copy()
                    trial[j] = b
                    ca, cb = self.user_cost(a, trial == a), self.user_cost(b, trial == b)
                    if ca + cb < (cost[a] + cost[b]) * (1 - _TINY):
                        owner, cost[a], cost[b], improved = trial, ca, cb, True
                        break
            for j, l in itertools.combinations(range(k), 2):
                if self.evals >= stop:
                    break
                a, b = owner[j], owner[l]
                if a == b:
                    continue
                trial = owner.copy()
                trial[j], trial[l] = b, a
                ca, cb = self.user_cost(a, trial == a), self.user_cost(b, trial == b)
                if ca + cb < (cost[a] + cost[b]) * (1 - _TINY):
                    owner, cost[a], cost[b], improved = trial, ca, cb, True
        return owner, float(cost.sum())


# dual drivers -----------------------------------------------------------------

def initial_multipliers(r_desired, H, bandwidth, noise_power) -> np.ndarray:
    """Water level as if each user owned its best ``max(1, K // N)`` RBs."""
    n, k = H.shape
    m = max(1, k // n)
    lam = np.zeros(n)
    for i in range(n):
        if r_desired[i] <= 0:
            continue
        best = np.sort(H[i])[::-1][:m]
        best = best[best > 0]
        if best.size == 0:
            continue
        lvl = 2.0 ** ((r_desired[i] / bandwidth + np.sum(np.log2(noise_power / best))) / best.size)
        lam[i] = lvl * LN2 / bandwidth
    return lam


class _Subgradient:
    """Multiplicative (log-space) subgradient ascent with a 1/sqrt(k) step.

    The subgradient is scaled per user by ``max(r_d, r)`` and clipped to
    ``[-1, 1]`` so a starving user cannot blow its multiplier up in one step.
    """

    def __init__(self, lam0, r_desired, scale):
        self.lam = lam0.copy()
        self.rd = np.asarray(r_desired, float)
        self.scale, self.k = scale, 0

    def update(self, r):
        self.k += 1
        rel = (self.rd - r) / np.maximum(np.maximum(self.rd, r), _TINY)
        self.lam = self.lam * np.exp(np.clip(rel, -1.0, 1.0) * self.scale / np.sqrt(self.k))
        np.clip(self.lam, _LAM_MIN, _LAM_MAX, out=self.lam)
        return self.lam


class _Ellipsoid:
    """Central-cut ellipsoid ascent on ``lam / lam0`` (needs N >= 2)."""

    def __init__(self, lam0, r_desired, scale):
        n = len(lam0)
        self.rd = np.asarray(r_desired, float)
        self.unit = np.where(lam0 > 0, lam0, 1.0)
        self.c = np.where(lam0 > 0, 1.0, 0.0)
        self.A = np.eye(n) * (4.0 * n)
        self.n = n
        self.lam = lam0.copy()

    def update(self, r):
        sub = self.rd - r
        n = self.n
        neg = self.c < 0
        # feasibility cut for lam >= 0, else the (scaled) dual subgradient
        g = -np.eye(n)[np.argmax(neg)] if np.any(neg) else -sub * self.unit
        ag = self.A @ g
        gag = float(g @ ag)
        if gag <= 0 or not np.isfinite(gag):
            return self.lam
        b = ag / np.sqrt(gag)
        if n == 1:
            self.c = self.c - 0.5 * b
            self.A = self.A / 4.0
        else:
            self.c = self.c - b / (n + 1)
            self.A = (n * n / (n * n - 1.0)) * (self.A - (2.0 / (n + 1)) * np.outer(b, b))
        self.lam = np.maximum(self.c, 0.0) * self.unit
        return self.lam


def _shortfall(r, rd) -> float:
    rd = np.asarray(rd, float)
    return float(np.max(np.maximum(rd - r, 0.0) / np.maximum(rd, _TINY), initial=0.0))


class _ShannonInstance:
    """Per-call constants so each dual iteration is a handful of array ops."""

    def __init__(self, H, rd, bandwidth, noise_power):
        n, k = H.shape
        pos = H > 0
        safe = np.where(pos, H, 1.0)
        self.bw, self.rd = bandwidth, rd
        self.inv = np.where(pos, noise_power / safe, np.inf)
        self.log_unit = np.where(pos, np.log2(safe * (bandwidth / (LN2 * noise_power))), -np.inf)
        self.order = np.argsort(-H, axis=1, kind="stable")
        self.log_inv_s = np.take_along_axis(np.log2(self.inv), self.order, axis=1)
        self.users = np.arange(n)
        self.cols = np.arange(k)
        self.need = rd > 0

    def primal(self, lam):
        with np.errstate(divide="ignore"):
            se = np.maximum(np.log2(lam)[:, None] + self.log_unit, 0.0)
        lam_c = lam[:, None]
        p = np.maximum(lam_c * (self.bw / LN2) - self.inv, 0.0)
        obj = p - lam_c * self.bw * se
        owner = np.argmin(obj, axis=0)
        cols = self.cols
        P = np.zeros_like(p)
        P[owner, cols] = p[owner, cols]
        r = np.bincount(owner, weights=self.bw * se[owner, cols], minlength=len(lam))
        return owner, P, r, float(obj[owner, cols].sum())

    def waterfill(self, owner):
        mask_s = owner[self.order] == self.users[:, None]
        cnt = np.cumsum(mask_s, axis=1)
        if np.any(self.need & (cnt[:, -1] == 0)):
            return None
        cum = np.cumsum(np.where(mask_s, self.log_inv_s, 0.0), axis=1)
        with np.errstate(invalid="ignore"):
            log_lvl = (self.rd[:, None] / self.bw + cum) / np.maximum(cnt, 1)
            ok = mask_s & (log_lvl > self.log_inv_s)
        last = ok.shape[1] - 1 - np.argmax(ok[:, ::-1], axis=1)
        lvl = 2.0 ** log_lvl[self.users, last]
        mine = (owner[None, :] == self.users[:, None]) & self.need[:, None]
        return np.where(mine, np.maximum(lvl[:, None] - self.inv, 0.0), 0.0)


def reduce(r_desired, channel, env_config, config: ReducerConfig = ReducerConfig(), lam0=None):
    """Minimum-power allocation meeting ``r_desired`` (bit/s per user).

    Args:
        r_desired: target rate per user.
        channel: :class:`~urllc_lab.env.ChannelState` or an ``N x K`` gain array.
        env_config: supplies RB bandwidth, noise power and rate model.
        config: solver settings.
        lam0: optional warm start for the multipliers.

    Returns:
        ``(Allocation, achieved rates, DualState)``.
    """
    H = np.asarray(getattr(channel, "gains", channel), dtype=float)
    rd = np.asarray(r_desired, dtype=float)
    n, k = H.shape
    if rd.shape != (n,):
        raise ValueError("one desired rate per user")
    if np.any(rd < 0) or not np.all(np.isfinite(rd)):
        raise ValueError("desired rates must be finite and nonnegative")
    bw = env_config.rb_bandwidth_hz
    s2 = env_config.noise_power
    model = getattr(env_config, "rate_model", SHANNON)
    if np.any((rd > 0) & ~np.any(H > 0, axis=1)):
        raise ValueError("a user with positive demand has no usable RB")

    if not np.any(rd > 0):
        alloc = Allocation.from_owner(np.zeros(k, int), np.zeros((n, k)))
        return alloc, np.zeros(n), DualState(np.zeros(n), 0, 0.0, 0.0, True)

    lam = initial_multipliers(rd, H, bw, s2) if lam0 is None else np.asarray(lam0, float).copy()
    driver_cls = _Ellipsoid if config.method == "ellipsoid" and n > 1 else _Subgradient
    driver = driver_cls(lam, rd, config.step_scale)
    polisher = _Polisher(H, rd, bw, s2, model) if config.recovery == "polish" else None
    if model.is_shannon:
        fast = _ShannonInstance(H, rd, bw, s2)
        primal, powers_for = fast.primal, fast.waterfill
    else:
        def primal(lam_):
            return lagrangian_primal(lam_, H, bw, s2, model)

        def powers_for(owner_):
            return _user_powers(owner_, H, rd, bw, s2, model)

    lb = -np.inf
    raw_best = None  # (shortfall, power, owner, P, r, iteration, lam)
    seen: dict[bytes, tuple[float, np.ndarray]] = {}
    best = None  # (power, owner)
    stale = 0
    it = 0
    for it in range(1, config.max_iter + 1):
        owner, P, r, gsum = primal(lam)
        lb = max(lb, gsum + float(lam @ rd))
        short = _shortfall(r, rd)
        if raw_best is None or (short, P.sum()) < raw_best[:2]:
            raw_best = (short, float(P.sum()), owner, P, r, it, lam.copy())
        if polisher is None:
            if short <= config.rate_tol:
                break
        else:
            key = owner.tobytes()
            if key not in seen:
                rows = powers_for(owner)
                cost = np.inf if rows is None else float(rows.sum())
                seen[key] = (cost, owner)
                if best is None or cost < best[0]:
                    best = (cost, owner)
                    stale = -1
            stale += 1
            if config.patience is not None and stale > config.patience and np.isfinite(best[0]):
                break
            if best is not None and np.isfinite(best[0]) and best[0] <= (1 + config.gap_tol) * lb:
                break
        lam = driver.update(r)

    if polisher is None:
        short, _, owner, P, r, _, lam_b = raw_best
        alloc = Allocation.from_owner(owner, P)
        state = DualState(lam_b, it, short, lb, False)
        return _apply_cap(alloc, r, state, H, rd, env_config, config)

    certified = best is not None and np.isfinite(best[0]) and best[0] <= (1 + config.gap_tol) * lb
    if not certified:
        ranked = sorted(seen.values(), key=lambda x: x[0])[: config.max_candidates]
        budget = config.local_search_evals if model.is_shannon else 0
        per_start = max(budget // max(len(ranked), 1), 4 * n)
        for _, cand in ranked:
            if np.isfinite(best[0]) and polisher.evals >= budget:
                break
            start = polisher.repair(cand)
            if budget > 0:
                owner, cost = polisher.local_search(start, per_start)
            else:
                owner, cost = start, float(polisher.costs(start).sum())
            if cost < best[0]:
                best = (cost, owner)
        certified = bool(best[0] <= (1 + config.gap_tol) * lb)
    if best is None or not np.isfinite(best[0]):
        # no assignment gave every user an RB: fall back to the raw mapping
        short, _, owner, P, r, _, lam_b = raw_best
        alloc = Allocation.from_owner(owner, P)
        return _apply_cap(alloc, r, DualState(lam_b, it, short, lb, False), H, rd, env_config, config)
    owner = best[1]
    rows = _user_powers(owner, H, rd, bw, s2, model)
    alloc = Allocation.from_owner(owner, rows)
    r = achieved_rates(alloc, H, bw, s2, model)
    state = DualState(np.maximum(lam, 0.0), it, _shortfall(r, rd), lb, bool(certified))
    return _apply_cap(alloc, r, state, H, rd, env_config, config)


def _apply_cap(alloc, r, state, H, rd, env_config, config):
    cap = config.power_cap
    if cap is None or alloc.total_power <= cap:
        return alloc, r, state
    scaled = Allocation(alloc.rb_assignment, alloc.power * (cap / alloc.total_power))
    model = getattr(env_config, "rate_model", SHANNON)
    r2 = achieved_rates(scaled, H, env_config.rb_bandwidth_hz, env_config.noise_power, model)
    state.cap_exceeded = True
    state.residual = _shortfall(r2, rd)
    return scaled, r2, state


def achieved_rates(alloc: Allocation, H, bandwidth, noise_power, model: RateModel = SHANNON):
    per = rate_of(alloc.power, H, bandwidth, noise_power, model)
    return np.where(alloc.rb_assignment, per, 0.0).sum(axis=1)


def reducer_error(r, r_desired) -> float:
    """Per-user error ``||r - r_d|| / (N ||r||)``."""
    r = np.asarray(r, dtype=float)
    rd = np.asarray(r_desired, dtype=float)
    nr = np.linalg.norm(r)
    if nr == 0:
        if np.linalg.norm(rd) == 0:
            return 0.0
        raise ValueError("error undefined for zero achieved rate and nonzero target")
    return float(np.linalg.norm(r - rd) / (len(r) * nr))


# oracle -----------------------------------------------------------------------

def bisect_waterfill(h, r, bandwidth, noise_power, tol_w: float = 1e-9) -> np.ndarray:
    """Single-user minimum power by bisection on the water level."""
    h = np.asarray(h, dtype=float)
    if r <= 0:
        return np.zeros_like(h)
    usable = h > 0
    if not usable.any():
        raise ValueError("no usable RB")
    inv = _inv_gain(h, noise_power)

    def rate(level):
        return bandwidth * np.sum(np.log2(np.maximum(level / inv[usable], 1.0)))

    lo = float(inv[usable].min())
    hi = lo * 2.0
    while rate(hi) < r:
        lo, hi = hi, hi * 2.0
    while True:
        p_gap = np.sum(np.maximum(hi - inv[usable], 0)) - np.sum(np.maximum(lo - inv[usable], 0))
        if p_gap <= tol_w or hi - lo <= 4 * np.spacing(hi):
            break
        mid = 0.5 * (lo + hi)
        if rate(mid) >= r:
            hi = mid
        else:
            lo = mid
    return np.where(usable, np.maximum(hi - inv, 0.0), 0.0)


def brute_force_min_power(r_desired, channel, env_config, tol_w: float = 1e-9, limit: int = 10**6):
    """Exhaustive search over RB owners with water-filling per user."""
    H = np.asarray(getattr(channel, "gains", channel), dtype=float)
    rd = np.asarray(r_desired, dtype=float)
    n, k = H.shape
    if not getattr(env_config, "rate_model", SHANNON).is_shannon:
        raise ValueError("oracle supports the Shannon model only")
    if n ** k > limit:
        raise ValueError(f"{n}^{k} assignments exceed the enumeration limit")
    bw, s2 = env_config.rb_bandwidth_hz, env_config.noise_power
    best_p, best_owner, best_rows = np.inf, None, None
    cache: dict[tuple[int, bytes], np.ndarray] = {}
    for cols in itertools.product(range(n), repeat=k):
        owner = np.array(cols)
        rows = np.zeros((n, k))
        total = 0.0
        for i in range(n):
            mask = owner == i
            if rd[i] <= 0:
                continue
            if not np.any(mask & (H[i] > 0)):
                total = np.inf
                break
            key = (i, mask.tobytes())
            if key not in cache:
                cache[key] = bisect_waterfill(np.where(mask, H[i], 0.0), rd[i], bw, s2, tol_w)
            rows[i] = cache[key]
            total += rows[i].sum()
        if total < best_p:
            best_p, best_owner, best_rows = total, owner, rows
    if best_owner is None:
        raise ValueError("no feasible assignment")
    return Allocation.from_owner(best_owner, best_rows), float(best_p)
