"""Adversarial refiner that pulls synthetic traffic/channel samples toward real data.

Samples live in a standardized log-feature space
``[log IAT (s), log size (bits), log gain factor]``.  The refiner ``F`` is
trained against a discriminator ``D`` with the usual two-player objective
plus a penalty ``lambda_r * E||F(z) - z||`` that keeps refined samples close
to their inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import ArrivalStream, TrafficSource
from .nnet import DenseNetwork, OptimizerState, apply_update

D_CLAMP = 1e-7
_NORM_EPS = 1e-12


# feature space ------------------------------------------------------------------

@dataclass
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, logs) -> "FeatureScaler":
        logs = np.atleast_2d(np.asarray(logs, dtype=float))
        std = logs.std(axis=0)
        if np.any(std <= 0):
            raise ValueError("degenerate dataset: a feature has zero variance")
        return cls(logs.mean(axis=0), std)

    def transform(self, logs):
        return (np.asarray(logs, dtype=float) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], float), np.array(d["std"], float))


def to_log_features(iat_s, size_bits, gain) -> np.ndarray:
    cols = [np.asarray(c, dtype=float) for c in (iat_s, size_bits, gain)]
    if any(np.any(c <= 0) for c in cols):
        raise ValueError("IAT, size and gain must be positive")
    return np.log(np.stack(cols, axis=-1))


@dataclass
class PacketDataset:
    """Per-packet records in physical units."""

    iat_s: np.ndarray
    size_bits: np.ndarray
    gain: np.ndarray

    def __len__(self):
        return len(self.iat_s)

    def log_features(self) -> np.ndarray:
        return to_log_features(self.iat_s, self.size_bits, self.gain)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iat_us", "size_bytes", "gain_linear"])
            for a, s, g in zip(self.iat_s * 1e6, self.size_bits / 8.0, self.gain):
                w.writerow([repr(float(a)), repr(float(s)), repr(float(g))])

    @classmethod
    def from_csv(cls, path) -> "PacketDataset":
        iat, size, gain = [], [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                iat.append(float(row["iat_us"]) * 1e-6)
                size.append(float(row["size_bytes"]) * 8.0)
                gain.append(float(row["gain_linear"]))
        return cls(np.array(iat), np.array(size), np.array(gain))


def synthetic_dataset(n: int, mean_iat_s: float, mean_size_bytes: float,
                      rng: np.random.Generator) -> PacketDataset:
    """M/M/1-style samples: exponential IAT and size, Rayleigh power gain."""
    return PacketDataset(
        rng.exponential(mean_iat_s, n),
        np.maximum(np.ceil(rng.exponential(mean_size_bytes * 8.0, n)), 1.0),
        rng.exponential(1.0, n),
    )


# networks and losses --------------------------------------------------------------

@dataclass(frozen=True)
class RefinerConfig:
    lambda_r: float = 0.0
    epsilon_r: float = 0.5
    batch: int = 128
    lr_refiner: float = 1e-4
    lr_disc: float = 1e-4
    steps: int = 20000
    hidden: tuple[int, ...] = (32, 32)
    holdout_frac: float = 0.2
    collapse_var: float = 1e-6
    collapse_patience: int = 100
    log_every: int = 100

    def __post_init__(self):
        if self.lambda_r < 0:
            raise ValueError("lambda_r must be nonnegative")
        if self.epsilon_r <= 0:
            raise ValueError("epsilon_r must be positive")
        if self.batch < 1 or self.steps < 0:
            raise ValueError("bad batch size or step budget")


class Refiner:
    """Residual map ``F(z) = z + g(z)`` with ``g`` a tanh MLP."""

    def __init__(self, dim: int, hidden=(32, 32), rng=None):
        self.net = DenseNetwork([dim, *hidden, dim], ["tanh"] * len(hidden) + ["identity"], rng)

    @property
    def params(self):
        return self.net.params

    def __call__(self, z):
        return np.asarray(z, float) + self.net(z)

    def forward(self, z):
        out, cache = self.net.forward(z, keep_cache=True)
        return np.asarray(z, float) + out, cache

    def zero_(self):
        """Make F the identity."""
        self.net.weights[-1][...] = 0.0
        self.net.biases[-1][...] = 0.0
        return self


def make_discriminator(dim: int, hidden=(32, 32), rng=None) -> DenseNetwork:
    return DenseNetwork([dim, *hidden, 1], ["tanh"] * len(hidden) + ["sigmoid"], rng)


@dataclass
class GanLosses:
    d_objective: float  # E log D(x) + E log(1 - D(F(z))), maximized by D
    d_loss: float  # -d_objective
    r_loss: float  # E log(1 - D(F(z))) + lambda_r * similarity
    similarity: float  # E ||F(z) - z||


def _clamped_log_grads(a, sign_one_minus: bool):
    """log of clamped D output and its derivative w.r.t. the raw output."""
    inside = (a > D_CLAMP) & (a < 1 - D_CLAMP)
    c = np.clip(a, D_CLAMP, 1 - D_CLAMP)
    if sign_one_minus:
        return np.log1p(-c), np.where(inside, -1.0 / (1.0 - c), 0.0)
    return np.log(c), np.where(inside, 1.0 / c, 0.0)


def gan_losses(refiner: Refiner, disc: DenseNetwork, real, z, lambda_r: float,
               with_grads: bool = False):
    """Loss values and, optionally, exact gradients for both players.

    Gradients are returned for ``d_loss`` (w.r.t. ``disc.params``) and for
    ``r_loss`` (w.r.t. ``refiner.params``).
    """
    real = np.atleast_2d(np.asarray(real, float))
    z = np.atleast_2d(np.asarray(z, float))
    if len(real) == 0 or len(z) == 0:
        raise ValueError("empty batch")
    fz, rcache = refiner.forward(z)
    d_real, c_real = disc.forward(real, keep_cache=True)
    d_fake, c_fake = disc.forward(fz, keep_cache=True)
    log_r, dlog_r = _clamped_log_grads(d_real, False)
    log_f, dlog_f = _clamped_log_grads(d_fake, True)
    diff = fz - z
    norms = np.linalg.norm(diff, axis=1)
    sim = float(norms.mean())
    d_obj = float(log_r.mean() + log_f.mean())
    r_loss = float(log_f.mean()) + lambda_r * sim
    losses = GanLosses(d_obj, -d_obj, r_loss, sim)
    if not with_grads:
        return losses
    nr, nf = len(real), len(z)
    # discriminator: minimize -(mean log D(x) + mean log(1 - D(F(z))))
    g_real, _ = disc.backward(c_real, -dlog_r / nr)
    g_fake, _ = disc.backward(c_fake, -dlog_f / nf)
    g_disc = [a + b for a, b in zip(g_real, g_fake)]
    # refiner: chain through D into F(z), plus the similarity penalty
    _, g_in = disc.backward(c_fake, dlog_f / nf)
    g_fz = g_in + lambda_r * diff / np.maximum(norms, _NORM_EPS)[:, None] / nf
    g_ref, _ = refiner.net.backward(rcache, g_fz)
    return losses, g_disc, g_ref


def epsilon_floor(refined, z) -> float:
    """``||mean F(z) - mean z||``: no refiner can have a smaller mean similarity."""
    refined = np.atleast_2d(np.asarray(refined, float))
    z = np.atleast_2d(np.asarray(z, float))
    return float(np.linalg.norm(refined.mean(axis=0) - z.mean(axis=0)))


def discriminator_accuracy(disc: DenseNetwork, real, fake) -> float:
    """Balanced accuracy of ``D > 0.5`` as the real/fake decision."""
    acc_r = float(np.mean(disc(np.atleast_2d(real))[:, 0] > 0.5))
    acc_f = float(np.mean(disc(np.atleast_2d(fake))[:, 0] <= 0.5))
    return 0.5 * (acc_r + acc_f)


@dataclass
class RefinerResult:
    refiner: Refiner
    disc: DenseNetwork
    heldout_accuracy: float
    mean_similarity: float
    floor: float
    steps_run: int
    aborted: str | None = None
    history: list = field(default_factory=list)


def train_refiner(real, synthetic, cfg: RefinerConfig = RefinerConfig(), seed: int = 0) -> RefinerResult:
    """Alternating 1:1 discriminator / refiner Adam updates.

    ``real`` and ``synthetic`` are standardized feature arrays ``(n, dim)``;
    a held-out slice of each is kept for the final diagnostics.
    """
    real = np.atleast_2d(np.asarray(real, float))
    synthetic = np.atleast_2d(np.asarray(synthetic, float))
    if real.shape[1] != synthetic.shape[1]:
        raise ValueError("real and synthetic dimensions differ")
    for arr in (real, synthetic):
        if len(arr) < 2 or np.any(arr.var(axis=0) <= 0):
            raise ValueError("dataset is degenerate (zero variance)")
    rng = np.random.default_rng(seed)
    dim = real.shape[1]
    refiner = Refiner(dim, cfg.hidden, np.random.default_rng([seed, 1]))
    disc = make_discriminator(dim, cfg.hidden, np.random.default_rng([seed, 2]))
    opt_r = OptimizerState("adam", cfg.lr_refiner)
    opt_d = OptimizerState("adam", cfg.lr_disc)

    def split(arr):
        idx = rng.permutation(len(arr))
        n_hold = max(1, int(len(arr) * cfg.holdout_frac))
        return arr[idx[n_hold:]], arr[idx[:n_hold]]

    real_tr, real_ho = split(real)
    syn_tr, syn_ho = split(synthetic)
    history = []
    low_var = 0
    aborted = None
    step = 0
    for step in range(1, cfg.steps + 1):
        xb = real_tr[rng.integers(0, len(real_tr), cfg.batch)]
        zb = syn_tr[rng.integers(0, len(syn_tr), cfg.batch)]
        _, g_d, _ = gan_losses(refiner, disc, xb, zb, cfg.lambda_r, with_grads=True)
        apply_update(disc.params, g_d, opt_d)
        losses, _, g_r = gan_losses(refiner, disc, xb, zb, cfg.lambda_r, with_grads=True)
        apply_update(refiner.params, g_r, opt_r)
        fz = refiner(zb)
        if np.all(fz.var(axis=0) < cfg.collapse_var):
            low_var += 1
            if low_var >= cfg.collapse_patience:
                aborted = "mode_collapse"
                break
        else:
            low_var = 0
        if cfg.log_every and step % cfg.log_every == 0:
            history.append({"step": step, "d_objective": losses.d_objective,
                            "r_loss": losses.r_loss, "similarity": losses.similarity})
    refined_ho = refiner(syn_ho)
    return RefinerResult(
        refiner, disc,
        heldout_accuracy=discriminator_accuracy(disc, real_ho, refined_ho),
        mean_similarity=float(np.linalg.norm(refined_ho - syn_ho, axis=1).mean()),
        floor=epsilon_floor(refined_ho, syn_ho),
        steps_run=step, aborted=aborted, history=history,
    )


# virtual environment ----------------------------------------------------------------

@dataclass(frozen=True)
class VirtualEnvSpec:
    w_real: float = 0.5
    w_synthetic: float = 0.5
    synth_mean_iat_s: float = 200e-6
    synth_mean_size_bytes: float = 350.0

    def __post_init__(self):
        if self.w_real < 0 or self.w_synthetic < 0 or abs(self.w_real + self.w_synthetic - 1) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")


class RefinedSampler:
    """Draws refined synthetic samples in physical units."""

    def __init__(self, refiner: Refiner, scaler: FeatureScaler, spec: VirtualEnvSpec,
                 rng: np.random.Generator):
        self.refiner, self.scaler, self.spec, self.rng = refiner, scaler, spec, rng
        self.drawn = 0
        self.resampled = 0

    def draw(self, n: int) -> np.ndarray:
        """``(n, 3)`` array of positive ``[iat_s, size_bits, gain]``."""
        out = np.empty((0, 3))
        while len(out) < n:
            m = n - len(out)
            syn = synthetic_dataset(m, self.spec.synth_mean_iat_s, self.spec.synth_mean_size_bytes, self.rng)
            z = self.scaler.transform(syn.log_features())
            with np.errstate(over="ignore"):
                phys = np.exp(self.scaler.inverse(self.refiner(z)))
            ok = np.all(np.isfinite(phys) & (phys > 0), axis=1)
            self.drawn += m
            self.resampled += int(np.count_nonzero(~ok))
            out = np.vstack([out, phys[ok]])
        return out

    @property
    def resample_rate(self) -> float:
        return self.resampled / self.drawn if self.drawn else 0.0


class VirtualStream:
    """Arrival stream that mixes real-trace gaps with refined synthetic gaps.

    Each packet independently comes from the real trace (next record, cyclic)
    with probability ``w_real``; otherwise from the refined sampler.
    """

    def __init__(self, user_id: int, real: PacketDataset | None, sampler: RefinedSampler,
                 spec: VirtualEnvSpec, rng: np.random.Generator, chunk: int = 1024):
        if spec.w_real > 0 and (real is None or len(real) == 0):
            raise ValueError("real mixture weight needs a real dataset")
        self.source = TrafficSource(user_id, "poisson", spec.synth_mean_iat_s, spec.synth_mean_size_bytes * 8)
        self.real, self.sampler, self.spec, self.rng = real, sampler, spec, rng
        self.chunk = chunk
        self._times = np.empty(0)
        self._sizes = np.empty(0, dtype=np.int64)
        self._clock = 0.0
        self._pos = 0

    def _extend(self):
        n = self.chunk
        use_real = self.rng.random(n) < self.spec.w_real
        iat = np.empty(n)
        size = np.empty(n)
        k = int(use_real.sum())
        if k:
            idx = (self._pos + np.arange(k)) % len(self.real)
            self._pos = (self._pos + k) % len(self.real)
            iat[use_real] = self.real.iat_s[idx]
            size[use_real] = self.real.size_bits[idx]
        if n - k:
            s = self.sampler.draw(n - k)
            iat[~use_real] = s[:, 0]
            size[~use_real] = s[:, 1]
        times = self._clock + np.cumsum(iat)
        self._clock = float(times[-1])
        self._times = np.concatenate([self._times, times])
        self._sizes = np.concatenate([self._sizes, np.maximum(np.ceil(size), 1).astype(np.int64)])

    def take(self, t0: float, t1: float):
        while self._clock < t1:
            self._extend()
        lo = np.searchsorted(self._times, t0, side="left")
        hi = np.searchsorted(self._times, t1, side="left")
        times, sizes = self._times[lo:hi], self._sizes[lo:hi]
        self._times, self._sizes = self._times[hi:], self._sizes[hi:]
        return times, sizes


@dataclass
class VirtualEnv:
    streams: list
    fading_sampler: object
    sampler: RefinedSampler


def build_virtual_env(spec: VirtualEnvSpec, refiner: Refiner, scaler: FeatureScaler,
                      real_sources: list[TrafficSource], real_data: PacketDataset | None,
                      seed: int = 0) -> VirtualEnv:
    """Per-user traffic streams and a fading sampler for pre-training.

    With ``w_real == 1`` the streams are exactly the real trace replays.
    Channel gain factors mix bootstrap draws from the real dataset with
    refined synthetic gains in the same proportions.
    """
    base = np.random.default_rng(seed)
    sampler = RefinedSampler(refiner, scaler, spec, np.random.default_rng([seed, 7]))
    if spec.w_real == 1.0:
        streams = [ArrivalStream(src) for src in real_sources]
    else:
        streams = [VirtualStream(src.user_id, real_data, sampler, spec,
                                 np.random.default_rng([seed, 100 + i]))
                   for i, src in enumerate(real_sources)]
    gains_real = None if real_data is None else np.asarray(real_data.gain, float)

    def fading(rng, shape):
        n = int(np.prod(shape))
        pick_real = base.random(n) < spec.w_real
        out = np.empty(n)
        k = int(pick_real.sum())
        if k:
            out[pick_real] = gains_real[base.integers(0, len(gains_real), k)]
        if n - k:
            out[~pick_real] = sampler.draw(n - k)[:, 2]
        return out.reshape(shape)

    return VirtualEnv(streams, fading, sampler)


def save_refiner(path, result: RefinerResult, scaler: FeatureScaler, cfg: RefinerConfig):
    from .nnet import save_checkpoint
    save_checkpoint(path, {"refiner": result.refiner.net, "discriminator": result.disc},
                    extra={"scaler": scaler.to_dict(), "lambda_r": cfg.lambda_r,
                           "heldout_accuracy": result.heldout_accuracy,
                           "mean_similarity": result.mean_similarity})


def load_refiner(path) -> tuple[Refiner, DenseNetwork, FeatureScaler]:
    from .nnet import load_checkpoint
    nets, _, extra = load_checkpoint(Path(path))
    ref = Refiner.__new__(Refiner)
    ref.net = nets["refiner"]
    return ref, nets["discriminator"], FeatureScaler.from_dict(extra["scaler"])
