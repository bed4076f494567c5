"""Empirical reliability, weight dynamics and the slot reward."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np


@dataclass
class ReliabilityEstimate:
    gamma: np.ndarray
    window_slots: int
    counted_packets: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        if np.any(self.gamma < 0) or np.any(self.gamma > 1):
            raise ValueError("reliability must lie in [0, 1]")


@dataclass
class WeightVector:
    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if np.any(self.w < 0):
            raise ValueError("weights must be nonnegative")


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.1
    power_scale: float = 1.0  # divide P by this (max BS power) before weighting

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.power_scale <= 0:
            raise ValueError("power_scale must be positive")


def measure_reliability(served, late, window: int | None = None) -> ReliabilityEstimate:
    """Pooled ``1 - sum(late) / sum(served)`` over the last ``window`` slots.

    ``served`` and ``late`` are ``(slots, N)`` count histories (a single
    slot may be passed as a 1-D vector).  Users with no departures in the
    window get reliability 1.
    """
    mu = np.atleast_2d(np.asarray(served, dtype=float))
    mu_late = np.atleast_2d(np.asarray(late, dtype=float))
    if mu.shape != mu_late.shape:
        raise ValueError("served and late histories differ in shape")
    if window is not None:
        if window < 1:
            raise ValueError("window must be >= 1")
        mu, mu_late = mu[-window:], mu_late[-window:]
    tot = mu.sum(axis=0)
    bad = mu_late.sum(axis=0)
    if np.any(bad > tot):
        raise ValueError("more late packets than departures")
    gamma = np.ones_like(tot)
    has = tot > 0
    gamma[has] = 1.0 - bad[has] / tot[has]
    return ReliabilityEstimate(gamma, len(mu), tot.astype(np.int64))


class ReliabilityWindow:
    """Sliding-window accumulator feeding :func:`measure_reliability` per slot."""

    def __init__(self, n_users: int, window: int = 100):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self._slots: deque[tuple[np.ndarray, np.ndarray]] = deque(maxlen=window)
        self._served = np.zeros(n_users, dtype=np.int64)
        self._late = np.zeros(n_users, dtype=np.int64)

    def push(self, served, late) -> ReliabilityEstimate:
        served = np.asarray(served, dtype=np.int64)
        late = np.asarray(late, dtype=np.int64)
        if len(self._slots) == self.window:
            s0, l0 = self._slots[0]
            self._served -= s0
            self._late -= l0
        self._slots.append((served.copy(), late.copy()))
        self._served += served
        self._late += late
        return self.estimate()

    def estimate(self) -> ReliabilityEstimate:
        gamma = np.ones(len(self._served))
        has = self._served > 0
        gamma[has] = 1.0 - self._late[has] / self._served[has]
        return ReliabilityEstimate(gamma, len(self._slots), self._served.copy())


def update_weights(w, gamma, target) -> np.ndarray:
    """``w <- max(w + target - gamma, 0)`` elementwise.

    When a nonzero increment is lost to rounding (``w + d == w``) the result
    is nudged one ulp in the direction of ``d`` so that a reliability gap
    always moves the weight.
    """
    w = np.asarray(getattr(w, "w", w), dtype=float)
    g = np.asarray(getattr(gamma, "gamma", gamma), dtype=float)
    d = np.asarray(target, dtype=float) - g
    out = w + d
    stuck = (out == w) & (d != 0)
    if np.any(stuck):
        out = np.where(stuck, np.nextafter(w, np.where(d > 0, np.inf, -np.inf)), out)
    return np.maximum(out, 0.0)


def reward(w, gamma, total_power: float, cfg: RewardConfig = RewardConfig()) -> float:
    w = np.asarray(getattr(w, "w", w), dtype=float)
    g = np.asarray(getattr(gamma, "gamma", gamma), dtype=float)
    if total_power < 0:
        raise ValueError("power must be nonnegative")
    return float(-np.sum(w * (1.0 - g)) - cfg.alpha * total_power / cfg.power_scale)


class Verdict(str, Enum):
    CONVERGED_AND_FEASIBLE = "converged_and_feasible"
    CONVERGED_INFEASIBLE_VIOLATION = "converged_infeasible_violation"
    NOT_CONVERGED = "not_converged"


def check_fixed_point(w_history, gamma_history, target, tol: float, window: int) -> Verdict:
    """Classify the tail of a weight trajectory.

    ``w_history`` is ``(T+1, N)`` and ``gamma_history`` is ``(T, N)`` with
    ``w[t+1]`` produced from ``gamma[t]``.  Converged means every weight
    moved by less than ``tol`` per step over the last ``window`` steps; the
    pooled reliability over that span must then reach ``target - tol``.
    """
    w = np.atleast_2d(np.asarray(w_history, dtype=float))
    g = np.atleast_2d(np.asarray(gamma_history, dtype=float))
    if len(g) < window or len(w) < window + 1:
        raise ValueError("history shorter than window")
    drift = np.abs(np.diff(w[-(window + 1):], axis=0))
    if np.any(drift >= tol):
        return Verdict.NOT_CONVERGED
    pooled = g[-window:].mean(axis=0)
    if np.all(pooled >= np.asarray(target, dtype=float) - tol):
        return Verdict.CONVERGED_AND_FEASIBLE
    return Verdict.CONVERGED_INFEASIBLE_VIOLATION
