"""Session trace files: parsing, expansion into packets, fixtures."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..env import TrafficSource
from ..refiner import PacketDataset

TRACE_COLUMNS = ("session_id", "packet_count", "mean_size_bytes", "mean_iat_us")


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class Session:
    session_id: str
    packet_count: int
    mean_size_bytes: float
    mean_iat_us: float


def read_trace(path) -> list[Session]:
    """Parse a session CSV; any bad row rejects the whole file."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceError(f"{path}: empty trace file") from None
        if tuple(h.strip() for h in header) != TRACE_COLUMNS:
            raise TraceError(f"{path}:1: expected header {','.join(TRACE_COLUMNS)}")
        sessions = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise TraceError(f"{path}:{line_no}: expected 4 fields, got {len(row)}")
            try:
                count = int(row[1])
                size = float(row[2])
                iat = float(row[3])
            except ValueError as exc:
                raise TraceError(f"{path}:{line_no}: {exc}") from None
            if count < 1 or not (size > 0 and np.isfinite(size)) or not (iat > 0 and np.isfinite(iat)):
                raise TraceError(f"{path}:{line_no}: counts must be >= 1 and means > 0")
            sessions.append(Session(row[0].strip(), count, size, iat))
    if not sessions:
        raise TraceError(f"{path}: trace has no sessions")
    return sessions


def write_trace(path, sessions: list[Session]):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for s in sessions:
            w.writerow([s.session_id, s.packet_count, repr(float(s.mean_size_bytes)), repr(float(s.mean_iat_us))])


def fixture_sessions(n: int, mean_iat_us: float, mean_size_bytes: float, seed: int = 0,
                     mean_count: float = 60.0, spread: float = 0.5) -> list[Session]:
    """Synthetic stand-in for a real session log.

    Per-session means are log-normal around the requested values so sessions
    differ in load, as they would in a captured trace.
    """
    rng = np.random.default_rng(seed)
    mu_shift = -0.5 * spread ** 2  # keeps the population mean on target
    counts = 1 + rng.poisson(mean_count - 1, n)
    sizes = mean_size_bytes * np.exp(mu_shift + spread * rng.standard_normal(n))
    iats = mean_iat_us * np.exp(mu_shift + spread * rng.standard_normal(n))
    return [Session(f"s{k:04d}", int(c), float(s), float(i))
            for k, (c, s, i) in enumerate(zip(counts, sizes, iats))]


def expand_sessions(sessions: list[Session], seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Packets of every session in file order.

    Returns ``(iat_s, size_bits, session_index)``; IATs and sizes are
    exponential with the session means.
    """
    rng = np.random.default_rng(seed)
    counts = np.array([s.packet_count for s in sessions])
    idx = np.repeat(np.arange(len(sessions)), counts)
    iat_mean = np.array([s.mean_iat_us for s in sessions])[idx] * 1e-6
    size_mean = np.array([s.mean_size_bytes for s in sessions])[idx]
    iat = rng.exponential(1.0, idx.size) * iat_mean
    # guard against a zero gap so replay times stay strictly increasing
    iat = np.maximum(iat, 1e-9)
    size_bits = np.maximum(np.ceil(rng.exponential(1.0, idx.size) * size_mean * 8.0), 1.0)
    return iat, size_bits, idx


def sources_from_sessions(sessions: list[Session], n_users: int, seed: int = 0,
                          load_scale: float = 1.0, size_scale: float = 1.0) -> list[TrafficSource]:
    """Round-robin sessions over users; each user replays its packets in order."""
    if n_users < 1:
        raise ValueError("need at least one user")
    if load_scale <= 0 or size_scale <= 0:
        raise ValueError("scales must be positive")
    iat, bits, idx = expand_sessions(sessions, seed)
    iat = iat / load_scale
    bits = np.maximum(np.ceil(bits * size_scale), 1.0)
    owner = idx % n_users
    out = []
    for u in range(n_users):
        m = owner == u
        if not m.any():
            raise TraceError(f"trace has {len(sessions)} sessions, fewer than {n_users} users")
        times = np.cumsum(iat[m])
        out.append(TrafficSource(u, "trace", float(iat[m].mean()), float(bits[m].mean()),
                                 trace_times=times, trace_sizes=bits[m]))
    return out


def ingest_trace(path, n_users: int, seed: int = 0, **scales) -> list[TrafficSource]:
    return sources_from_sessions(read_trace(path), n_users, seed, **scales)


def packet_dataset(sessions: list[Session], seed: int = 0, fading: bool = True) -> PacketDataset:
    """Per-packet records (gap, size, small-scale gain) for refiner training."""
    iat, bits, _ = expand_sessions(sessions, seed)
    rng = np.random.default_rng([seed, 3])
    gain = rng.exponential(1.0, iat.size) if fading else np.ones(iat.size)
    return PacketDataset(iat, bits, np.maximum(gain, 1e-12))


def extremeness(sessions: list[Session], iat_s: float, size_bytes: float, seed: int = 0) -> dict:
    """Percentile ranks of a synthetic (IAT, size) pair within the real data.

    Computed both over session means and over expanded packets.
    """
    s_iat = np.array([s.mean_iat_us for s in sessions]) * 1e-6
    s_size = np.array([s.mean_size_bytes for s in sessions])
    p_iat, p_bits, _ = expand_sessions(sessions, seed)
    return {
        "iat_percentile_sessions": float(np.mean(s_iat < iat_s) * 100),
        "size_percentile_sessions": float(np.mean(s_size < size_bytes) * 100),
        "iat_percentile_packets": float(np.mean(p_iat < iat_s) * 100),
        "size_percentile_packets": float(np.mean(p_bits < size_bytes * 8) * 100),
    }
