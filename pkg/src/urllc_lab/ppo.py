"""Clipped-surrogate policy optimization for the desired-rate controller.

The policy is a diagonal Gaussian over raw actions; desired rates are
``r_max * sigmoid(raw)``.  Log-probabilities and all learning happen in raw
space, so the squashing needs no Jacobian correction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import OfdmaEnv, SlotState
from .metrics import ReliabilityWindow, RewardConfig, reward, update_weights
from .nnet import DenseNetwork, OptimizerState, apply_update
from .reducer import ReducerConfig, reduce

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch: int = 64
    lr_policy: float = 3e-4
    lr_value: float = 1e-3
    slots_per_rollout: int = 512
    entropy_coef: float = 0.0
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = -0.5
    reward_ema: float = 0.99

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.epochs < 1 or self.minibatch < 1 or self.slots_per_rollout < 1:
            raise ValueError("epochs, minibatch and rollout length must be positive")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _logit(p):
    return float(np.log(p) - np.log1p(-p))


class Featurizer:
    """Per-user ``[arrivals, mean size, mean log-SNR, max log-SNR]`` blocks.

    Every feature is divided by its running maximum (per feature kind,
    pooled over users) so inputs stay in ``[0, 1]``.
    """

    def __init__(self, n_users: int, p_ref: float, noise_power: float):
        self.n_users = n_users
        self.p_ref = p_ref
        self.noise_power = noise_power
        self.scale = np.zeros(4)

    @property
    def dim(self) -> int:
        return 4 * self.n_users

    def raw(self, state: SlotState) -> np.ndarray:
        snr = np.log1p(state.gains.gains * self.p_ref / self.noise_power)
        return np.stack([
            np.asarray(state.arrival_counts, dtype=float),
            np.asarray(state.mean_packet_bits, dtype=float),
            snr.mean(axis=1),
            snr.max(axis=1),
        ], axis=1)

    def __call__(self, state: SlotState, update: bool = True) -> np.ndarray:
        f = self.raw(state)
        if f.shape[0] != self.n_users:
            raise ValueError("state has the wrong number of users")
        if update:
            self.scale = np.maximum(self.scale, np.abs(f).max(axis=0))
        return (f / np.where(self.scale > 0, self.scale, 1.0)).ravel()


def featurize(state: SlotState, featurizer: Featurizer) -> np.ndarray:
    return featurizer(state)


class PolicyNet:
    def __init__(self, n_in: int, n_users: int, r_max: float, hidden=(64, 64),
                 init_log_std: float = -0.5, init_rate: float | None = None,
                 rng: np.random.Generator | None = None, out_gain: float = 0.01):
        if r_max <= 0:
            raise ValueError("r_max must be positive")
        widths = [n_in, *hidden, n_users]
        acts = ["tanh"] * len(hidden) + ["identity"]
        self.mean_net = DenseNetwork(widths, acts, rng)
        # small output layer: every user starts near the same mean action
        self.mean_net.weights[-1] *= out_gain
        self.log_std = np.full(n_users, float(np.clip(init_log_std, LOG_STD_MIN, LOG_STD_MAX)))
        self.r_max = float(r_max)
        if init_rate is not None:
            # start the mean action at a sensible rate instead of r_max / 2
            frac = np.clip(init_rate / r_max, 1e-12, 1 - 1e-12)
            self.mean_net.biases[-1][:] = _logit(frac)

    @property
    def params(self) -> list[np.ndarray]:
        return self.mean_net.params + [self.log_std]

    def clamp(self):
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def mean(self, feats):
        return self.mean_net(feats)

    def squash(self, raw):
        return self.r_max * _sigmoid(raw)

    def log_prob(self, feats, raw) -> np.ndarray:
        mu = self.mean(feats)
        return gaussian_log_prob(raw, mu, self.log_std)

    def act(self, feats, rng: np.random.Generator, deterministic: bool = False):
        mu = self.mean(feats)
        if deterministic:
            raw = mu.copy()
        else:
            raw = mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)
        return raw, self.squash(raw), float(gaussian_log_prob(raw, mu, self.log_std))

    def to_dict(self) -> dict:
        return {"mean_net": self.mean_net.to_dict(), "log_std": self.log_std.tolist(), "r_max": self.r_max}

    @classmethod
    def from_dict(cls, d) -> "PolicyNet":
        pol = cls.__new__(cls)
        pol.mean_net = DenseNetwork.from_dict(d["mean_net"])
        pol.log_std = np.array(d["log_std"], dtype=float)
        pol.r_max = float(d["r_max"])
        return pol

    def copy(self) -> "PolicyNet":
        return PolicyNet.from_dict(self.to_dict())


def act(policy: PolicyNet, feats, rng, deterministic: bool = False):
    return policy.act(feats, rng, deterministic)


def gaussian_log_prob(raw, mu, log_std):
    z = (np.asarray(raw) - mu) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=-1)


def gae_advantages(rewards, values, last_value: float, discount: float, gae_lambda: float,
                   normalize: bool = True):
    """Generalized advantage estimates and bootstrapped returns."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must align")
    nxt = np.append(values[1:], last_value)
    delta = rewards + discount * nxt - values
    adv = np.zeros_like(delta)
    acc = 0.0
    for t in range(len(delta) - 1, -1, -1):
        acc = delta[t] + discount * gae_lambda * acc
        adv[t] = acc
    returns = adv + values
    if normalize and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


def clipped_surrogate(ratio, adv, clip: float):
    """Per-sample ``min(ratio * A, clip(ratio, 1 +- eps) * A)``."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)


def policy_loss(policy: PolicyNet, feats, raw, logp_old, adv, clip: float, entropy_coef: float = 0.0):
    """Negative clipped surrogate minus entropy bonus, with exact gradients.

    Returns ``(loss, grads aligned with policy.params, diagnostics)``.
    """
    feats = np.atleast_2d(feats)
    raw = np.atleast_2d(raw)
    adv = np.asarray(adv, dtype=float)
    b = len(adv)
    mu, cache = policy.mean_net.forward(feats, keep_cache=True)
    ls = policy.log_std
    inv_var = np.exp(-2.0 * ls)
    diff = raw - mu
    logp = np.sum(-0.5 * diff * diff * inv_var - ls - 0.5 * _LOG_2PI, axis=1)
    ratio = np.exp(logp - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * adv
    surr = np.minimum(unclipped, clipped)
    entropy = float(np.sum(ls + 0.5 * (1.0 + _LOG_2PI)))
    loss = -float(surr.mean()) - entropy_coef * entropy

    # d loss / d logp: only where the unclipped branch is the active minimum
    active = unclipped <= clipped
    dlogp = np.where(active, -ratio * adv, 0.0) / b
    g_mu = dlogp[:, None] * diff * inv_var
    g_ls = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - entropy_coef
    grads, _ = policy.mean_net.backward(cache, g_mu)
    diag = {
        "mean_ratio": float(ratio.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip)),
        "entropy": entropy,
    }
    return loss, grads + [g_ls], diag


def value_loss(value_net: DenseNetwork, feats, returns):
    v, cache = value_net.forward(np.atleast_2d(feats), keep_cache=True)
    err = v[:, 0] - np.asarray(returns, dtype=float)
    loss = float(np.mean(err * err))
    grads, _ = value_net.backward(cache, (2.0 * err / len(err))[:, None])
    return loss, grads


@dataclass
class Trajectory:
    features: list = field(default_factory=list)
    raw: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def add(self, f, raw, a, logp, r, v):
        if not np.isfinite(logp):
            raise ValueError("non-finite log-probability")
        self.features.append(f)
        self.raw.append(raw)
        self.actions.append(a)
        self.log_probs.append(logp)
        self.rewards.append(r)
        self.values.append(v)

    def __len__(self):
        return len(self.rewards)


def ppo_update(policy: PolicyNet, value_net: DenseNetwork, traj: Trajectory, last_value: float,
               cfg: PPOConfig, opt_pi: OptimizerState, opt_v: OptimizerState,
               rng: np.random.Generator) -> dict:
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    feats = np.array(traj.features)
    raw = np.array(traj.raw)
    logp_old = np.array(traj.log_probs)
    adv, ret = gae_advantages(traj.rewards, traj.values, last_value, cfg.discount, cfg.gae_lambda)
    backup = (policy.copy(), value_net.copy())
    ratios, clips, vlosses = [], [], []
    n = len(adv)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.minibatch):
            idx = order[s:s + cfg.minibatch]
            lp, gp, diag = policy_loss(policy, feats[idx], raw[idx], logp_old[idx], adv[idx],
                                       cfg.clip, cfg.entropy_coef)
            lv, gv = value_loss(value_net, feats[idx], ret[idx])
            if not (np.isfinite(lp) and np.isfinite(lv)):
                _restore(policy, value_net, backup)
                return {"aborted": True}
            apply_update(policy.params, gp, opt_pi)
            policy.clamp()
            apply_update(value_net.params, gv, opt_v)
            ratios.append(diag["mean_ratio"])
            clips.append(diag["clip_fraction"])
            vlosses.append(lv)
    return {"aborted": False, "mean_ratio": float(np.mean(ratios)),
            "clip_fraction": float(np.mean(clips)), "value_loss": float(np.mean(vlosses))}


def _restore(policy, value_net, backup):
    pol, val = backup
    for dst, src in zip(policy.params, pol.params):
        dst[...] = src
    for dst, src in zip(value_net.params, val.params):
        dst[...] = src


def default_r_max(env_cfg, gains) -> float:
    """Total bandwidth times the spectral efficiency of full power on the best RB."""
    snr = env_cfg.max_bs_power_w * float(np.max(gains)) / env_cfg.noise_power
    return env_cfg.total_bandwidth_hz * float(np.log2(1.0 + snr))


@dataclass
class EpochStats:
    epoch: int
    mean_reward: float
    gamma: np.ndarray
    mean_delay: float
    mean_power: float
    diagnostics: dict
    served: np.ndarray | None = None
    late: np.ndarray | None = None
    mean_request: np.ndarray | None = None


class Agent:
    """Closed control loop: features -> policy -> reducer -> env -> reward.

    The agent owns the networks, optimizers, the reliability window and the
    per-user weights; :meth:`run_epoch` collects one rollout and updates.
    """

    def __init__(self, env: OfdmaEnv, cfg: PPOConfig = PPOConfig(), seed: int = 0,
                 reducer_cfg: ReducerConfig | None = None, reward_cfg: RewardConfig | None = None,
                 window: int = 100, r_max: float | None = None, init_rate: float | None = None,
                 policy: PolicyNet | None = None, value_net: DenseNetwork | None = None,
                 warm_start: bool = True):
        self.env = env
        self.cfg = cfg
        ec = env.config
        self.rng = np.random.default_rng(seed)
        n = ec.n_users
        self.featurizer = Featurizer(n, ec.max_bs_power_w / ec.n_rbs, ec.noise_power)
        if r_max is None:
            r_max = default_r_max(ec, env.channel.gains)
        init_rng = np.random.default_rng([seed, 1])
        self.policy = policy if policy is not None else PolicyNet(
            self.featurizer.dim, n, r_max, cfg.hidden, cfg.init_log_std, init_rate, init_rng)
        self.value_net = value_net if value_net is not None else DenseNetwork(
            [self.featurizer.dim, *cfg.hidden, 1], ["tanh"] * len(cfg.hidden) + ["identity"], init_rng)
        self.opt_pi = OptimizerState("adam", cfg.lr_policy)
        self.opt_v = OptimizerState("adam", cfg.lr_value)
        self.reducer_cfg = reducer_cfg or ReducerConfig(
            power_cap=ec.max_bs_power_w, max_iter=30, local_search_evals=0, gap_tol=0.02, patience=5)
        self._lam = None
        self.warm_start = warm_start
        self.reward_cfg = reward_cfg or RewardConfig(0.1, ec.max_bs_power_w)
        self.window = ReliabilityWindow(n, window)
        self.weights = np.zeros(n)
        self.targets = ec.targets
        self.reward_scale = 0.0
        self.state = env.state
        self.epoch = 0

    def _normalize(self, r: float) -> float:
        a = self.cfg.reward_ema
        self.reward_scale = a * self.reward_scale + (1 - a) * abs(r) if self.reward_scale else abs(r)
        return r / max(self.reward_scale, 1e-8)

    def rollout(self, n_slots: int, learn: bool = True, deterministic: bool = False):
        traj = Trajectory()
        ec = self.env.config
        rewards, powers, delays = [], [], []
        gamma = np.ones(ec.n_users)
        served = np.zeros(ec.n_users, dtype=np.int64)
        late = np.zeros(ec.n_users, dtype=np.int64)
        requested = np.zeros(ec.n_users)
        for _ in range(n_slots):
            feats = self.featurizer(self.state)
            raw, rd, logp = self.policy.act(feats, self.rng, deterministic)
            requested += rd
            alloc, _, dual = reduce(rd, self.state.gains, ec, self.reducer_cfg,
                                    lam0=self._lam if self.warm_start else None)
            self._lam = dual.lam if np.all(dual.lam > 0) and dual.residual <= 0.5 else None
            fb, self.state = self.env.step(alloc)
            served += fb.served
            late += fb.late
            est = self.window.push(fb.served, fb.late)
            gamma = est.gamma
            r = reward(self.weights, gamma, fb.total_power, self.reward_cfg)
            self.weights = update_weights(self.weights, gamma, self.targets)
            rewards.append(r)
            powers.append(fb.total_power)
            d = fb.all_delays()
            if d.size:
                delays.append(d)
            if learn:
                v = float(self.value_net(feats)[0])
                traj.add(feats, raw, rd, logp, self._normalize(r), v)
        all_d = np.concatenate(delays) if delays else np.empty(0)
        summary = (float(np.mean(rewards)), gamma.copy(),
                   float(all_d.mean()) if all_d.size else float("nan"), float(np.mean(powers)),
                   served, late, requested / max(n_slots, 1))
        return traj, summary

    def learner_state(self) -> dict:
        """Everything that should survive a move to another environment."""
        return {
            "policy": self.policy.to_dict(),
            "value_net": self.value_net.to_dict(),
            "opt_pi": self.opt_pi.to_dict(),
            "opt_v": self.opt_v.to_dict(),
            "feature_scale": self.featurizer.scale.tolist(),
            "reward_scale": self.reward_scale,
            "epoch": self.epoch,
        }

    def adopt(self, state: dict):
        """Continue from a learner state (e.g. after pre-training elsewhere).

        Reliability window and weights are tied to the environment and restart.
        """
        self.policy = PolicyNet.from_dict(state["policy"])
        self.value_net = DenseNetwork.from_dict(state["value_net"])
        self.opt_pi = OptimizerState.from_dict(state["opt_pi"])
        self.opt_v = OptimizerState.from_dict(state["opt_v"])
        self.featurizer.scale = np.array(state["feature_scale"], dtype=float)
        self.reward_scale = float(state["reward_scale"])

    def run_epoch(self, learn: bool = True, deterministic: bool = False) -> EpochStats:
        traj, (mr, gamma, md, mp, served, late, req) = self.rollout(
            self.cfg.slots_per_rollout, learn, deterministic)
        diag = {}
        if learn:
            last_v = float(self.value_net(self.featurizer(self.state, update=False))[0])
            diag = ppo_update(self.policy, self.value_net, traj, last_v, self.cfg,
                              self.opt_pi, self.opt_v, self.rng)
        stats = EpochStats(self.epoch, mr, gamma, md, mp, diag, served, late, req)
        self.epoch += 1
        return stats


def train(agent: Agent, n_epochs: int, learn: bool = True) -> list[EpochStats]:
    return [agent.run_epoch(learn) for _ in range(n_epochs)]


def save_agent(path, agent: Agent, manifest: dict | None = None):
    """JSON checkpoint: learner state plus a manifest (config, seed, ...)."""
    doc = {"learner": agent.learner_state(), "manifest": manifest or {}}
    Path(path).write_text(json.dumps(doc))


def load_agent_state(path) -> tuple[dict, dict]:
    doc = json.loads(Path(path).read_text())
    return doc["learner"], doc.get("manifest", {})
