"""Discrete-slot OFDMA downlink simulator.

The base station sits at the centre of a square cell and serves ``N`` users
over ``K`` resource blocks.  Each slot the caller supplies an allocation
(RB indicator and power matrices); users drain their FIFO queues at the
resulting rate and every departing packet is stamped with the end of the
slot that carried its last bit.  Packets arriving during slot ``t`` become
servable in slot ``t + 1``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .radio import SHANNON, RateModel, dbm_to_watt, path_gain, rate_of

# Slack for floating products such as r * dt that are integral in exact arithmetic.
_BIT_EPS = 1e-9
_CHUNK = 4096


@dataclass(slots=True)
class Packet:
    user_id: int
    arrival_time: float
    size_bits: int
    departure_time: float | None = None

    def __post_init__(self):
        if self.size_bits <= 0:
            raise ValueError("packet size must be positive")

    @property
    def delay(self) -> float | None:
        if self.departure_time is None:
            return None
        return self.departure_time - self.arrival_time


@dataclass
class TrafficSource:
    """Description of one user's packet stream.

    ``trace_times``/``trace_sizes`` hold an expanded packet stream (arrival
    offsets in seconds, sizes in bits) and are only used in ``trace`` mode.
    """

    user_id: int
    mode: str
    mean_iat: float
    mean_size_bits: float
    seed: int = 0
    trace_times: np.ndarray | None = field(default=None, repr=False)
    trace_sizes: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("trace", "poisson", "deterministic"):
            raise ValueError(f"unknown traffic mode {self.mode!r}")
        if self.mean_iat <= 0 or self.mean_size_bits <= 0:
            raise ValueError("mean_iat and mean_size_bits must be positive")
        if self.mode == "trace":
            if self.trace_times is None or self.trace_sizes is None or len(self.trace_times) == 0:
                raise ValueError("trace mode needs a non-empty expanded stream")
            if len(self.trace_times) != len(self.trace_sizes):
                raise ValueError("trace times and sizes differ in length")
            if self.trace_times[0] <= 0 or np.any(np.diff(self.trace_times) < 0):
                raise ValueError("trace times must be positive and sorted")

    def stream(self) -> "ArrivalStream":
        return ArrivalStream(self)


class ArrivalStream:
    """Stateful packet generator for one :class:`TrafficSource`.

    Windows passed to :meth:`take` must be contiguous and increasing.
    Random draws happen in fixed-size chunks so a seed fixes the stream
    independently of how it is sliced into windows.
    """

    def __init__(self, source: TrafficSource):
        self.source = source
        self.rng = np.random.default_rng(source.seed)
        self._times = np.empty(0)
        self._sizes = np.empty(0, dtype=np.int64)
        self._clock = 0.0
        self._count = 0
        if source.mode == "trace":
            # times are cumulative gaps, so one replay period is the last arrival time
            self._period = float(source.trace_times[-1])
            self._cycle = 0

    def _extend(self):
        src = self.source
        if src.mode == "poisson":
            iat = self.rng.exponential(src.mean_iat, _CHUNK)
            raw = self.rng.exponential(src.mean_size_bits, _CHUNK)
            times = self._clock + np.cumsum(iat)
            sizes = np.maximum(np.ceil(raw), 1).astype(np.int64)
        elif src.mode == "deterministic":
            k = np.arange(self._count, self._count + _CHUNK)
            times = (k + 0.5) * src.mean_iat
            sizes = np.full(_CHUNK, max(int(round(src.mean_size_bits)), 1), dtype=np.int64)
        else:
            times = np.asarray(src.trace_times, dtype=float) + self._cycle * self._period
            sizes = np.asarray(src.trace_sizes, dtype=np.int64)
            self._cycle += 1
        self._count += len(times)
        self._clock = float(times[-1])
        self._times = np.concatenate([self._times, times])
        self._sizes = np.concatenate([self._sizes, sizes])

    def take(self, t0: float, t1: float) -> tuple[np.ndarray, np.ndarray]:
        """Arrival times and sizes in ``[t0, t1)``."""
        if t1 < t0:
            raise ValueError("window must be well ordered")
        while self._clock < t1:
            self._extend()
        lo = np.searchsorted(self._times, t0, side="left")
        hi = np.searchsorted(self._times, t1, side="left")
        times, sizes = self._times[lo:hi], self._sizes[lo:hi]
        self._times, self._sizes = self._times[hi:], self._sizes[hi:]
        return times, sizes


def generate_arrivals(stream: ArrivalStream, window: tuple[float, float]) -> list[Packet]:
    times, sizes = stream.take(*window)
    uid = stream.source.user_id
    return [Packet(uid, float(t), int(s)) for t, s in zip(times, sizes)]


@dataclass(frozen=True)
class EnvConfig:
    n_users: int = 20
    n_rbs: int = 250
    rb_bandwidth_hz: float = 180e3
    noise_psd_w_per_hz: float = dbm_to_watt(-173.9)
    slot_duration_s: float = 1e-3
    max_bs_power_w: float = 4.0
    cell_side_m: float = 500.0
    pathloss_exponent: float = 3.0
    carrier_hz: float = 2e9
    d_max_s: float | tuple[float, ...] = 10e-3
    target_reliability: float | tuple[float, ...] = 0.99
    fading: bool = True
    rate_model: RateModel = SHANNON

    def __post_init__(self):
        if self.n_users < 1 or self.n_rbs < 1:
            raise ValueError("need at least one user and one RB")
        if self.rb_bandwidth_hz <= 0 or self.slot_duration_s <= 0:
            raise ValueError("bandwidth and slot duration must be positive")
        if np.any(self.d_max <= 0):
            raise ValueError("d_max must be positive")
        tgt = self.targets
        if np.any(tgt <= 0) or np.any(tgt >= 1):
            raise ValueError("target reliability must lie in (0, 1)")

    def _per_user(self, value) -> np.ndarray:
        arr = np.broadcast_to(np.asarray(value, dtype=float), (self.n_users,))
        return arr.copy()

    @property
    def d_max(self) -> np.ndarray:
        return self._per_user(self.d_max_s)

    @property
    def targets(self) -> np.ndarray:
        return self._per_user(self.target_reliability)

    @property
    def noise_power(self) -> float:
        return self.rb_bandwidth_hz * self.noise_psd_w_per_hz

    @property
    def total_bandwidth_hz(self) -> float:
        return self.rb_bandwidth_hz * self.n_rbs


@dataclass
class ChannelState:
    gains: np.ndarray
    slot_index: int = 0

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=float)
        if self.gains.ndim != 2:
            raise ValueError("gains must be an N x K matrix")
        if np.any(self.gains < 0):
            raise ValueError("channel gains must be nonnegative")


@dataclass
class SlotState:
    arrival_counts: np.ndarray
    mean_packet_bits: np.ndarray
    gains: ChannelState


@dataclass
class SlotFeedback:
    slot: int
    served: np.ndarray
    late: np.ndarray
    rates: np.ndarray
    total_power: float
    served_bits: np.ndarray
    delays: list[np.ndarray]

    def all_delays(self) -> np.ndarray:
        return np.concatenate(self.delays) if self.delays else np.empty(0)


@dataclass
class HoldRecord:
    """Per-user departures produced by :meth:`OfdmaEnv.hold`."""

    start_slot: int
    n_slots: int
    arrival_times: list[np.ndarray]
    departure_times: list[np.ndarray]
    sizes: list[np.ndarray]
    served: np.ndarray
    late: np.ndarray

    def delays(self, user: int) -> np.ndarray:
        return self.departure_times[user] - self.arrival_times[user]


FadingSampler = Callable[[np.random.Generator, tuple[int, int]], np.ndarray]


def rayleigh_power(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.exponential(1.0, shape)


def sample_positions(config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    half = config.cell_side_m / 2.0
    return rng.uniform(-half, half, size=(config.n_users, 2))


def generate_channel(
    config: EnvConfig,
    user_positions,
    slot: int,
    rng: np.random.Generator,
    fading_sampler: FadingSampler | None = None,
) -> ChannelState:
    """Block-fading gains ``PL(d_i) * X_ij`` for one slot (BS at the origin)."""
    pos = np.asarray(user_positions, dtype=float)
    half = config.cell_side_m / 2.0
    if pos.shape != (config.n_users, 2):
        raise ValueError("need one 2-D position per user")
    if np.any(np.abs(pos) > half + 1e-9):
        raise ValueError("user outside the cell")
    pl = path_gain(np.hypot(pos[:, 0], pos[:, 1]), config.carrier_hz, config.pathloss_exponent)
    shape = (config.n_users, config.n_rbs)
    if config.fading:
        x = (fading_sampler or rayleigh_power)(rng, shape)
    else:
        x = np.ones(shape)
    return ChannelState(pl[:, None] * x, slot)


class UserQueue:
    """FIFO of packets with bit-level service of the head packet."""

    __slots__ = ("packets", "head_served", "backlog_bits")

    def __init__(self):
        self.packets: deque[Packet] = deque()
        self.head_served = 0
        self.backlog_bits = 0

    def __len__(self):
        return len(self.packets)

    def push(self, packet: Packet):
        if self.packets and packet.arrival_time < self.packets[-1].arrival_time:
            raise ValueError("FIFO order violated")
        self.packets.append(packet)
        self.backlog_bits += packet.size_bits

    def serve(self, capacity_bits: int, t_end: float) -> tuple[list[Packet], int]:
        """Serve up to ``capacity_bits``; returns departed packets and bits served."""
        departed = []
        budget = int(capacity_bits)
        served = 0
        q = self.packets
        while q and budget > 0:
            head = q[0]
            need = head.size_bits - self.head_served
            if need <= budget:
                budget -= need
                served += need
                q.popleft()
                head.departure_time = t_end
                departed.append(head)
                self.head_served = 0
            else:
                self.head_served += budget
                served += budget
                budget = 0
        self.backlog_bits -= served
        return departed, served


def _as_stream(src) -> ArrivalStream:
    if isinstance(src, TrafficSource):
        return src.stream()
    return src


class OfdmaEnv:
    """Single-cell OFDMA downlink with per-user FIFO queues.

    Args:
        config: static system parameters.
        sources: one :class:`TrafficSource` (or any object with a compatible
            ``take(t0, t1)`` method) per user.
        seed: seeds user positions and fading.
        fading_sampler: optional replacement for the unit-mean exponential
            small-scale power gain.
    """

    def __init__(self, config: EnvConfig, sources: Sequence, seed: int = 0,
                 fading_sampler: FadingSampler | None = None, positions=None):
        if len(sources) != config.n_users:
            raise ValueError("need one traffic source per user")
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.positions = (sample_positions(config, self.rng) if positions is None
                          else np.asarray(positions, dtype=float))
        self.fading_sampler = fading_sampler
        self.streams = [_as_stream(s) for s in sources]
        self.reset()

    def reset(self) -> SlotState:
        n = self.config.n_users
        self.t = 0
        self.queues = [UserQueue() for _ in range(n)]
        self.arrived_bits = np.zeros(n, dtype=np.int64)
        self.served_bits = np.zeros(n, dtype=np.int64)
        self.channel = self._draw_channel(0)
        self.state = SlotState(np.zeros(n), np.zeros(n), self.channel)
        return self.state

    def set_sources(self, sources: Sequence):
        """Swap traffic sources mid-run; queued packets are kept."""
        if len(sources) != self.config.n_users:
            raise ValueError("need one traffic source per user")
        self.streams = [_as_stream(s) for s in sources]

    def _draw_channel(self, slot: int) -> ChannelState:
        return generate_channel(self.config, self.positions, slot, self.rng, self.fading_sampler)

    @property
    def backlog_bits(self) -> np.ndarray:
        return np.array([q.backlog_bits for q in self.queues], dtype=np.int64)

    def _rates(self, alloc) -> np.ndarray:
        cfg = self.config
        rho = np.asarray(alloc.rb_assignment, dtype=bool)
        power = np.asarray(alloc.power, dtype=float)
        shape = (cfg.n_users, cfg.n_rbs)
        if rho.shape != shape or power.shape != shape:
            raise ValueError(f"allocation must be {shape}, got {rho.shape}/{power.shape}")
        per_rb = rate_of(np.where(rho, power, 0.0), self.channel.gains,
                         cfg.rb_bandwidth_hz, cfg.noise_power, cfg.rate_model)
        return np.where(rho, per_rb, 0.0).sum(axis=1)

    def _capacity_bits(self, rates: np.ndarray) -> np.ndarray:
        return np.floor(rates * self.config.slot_duration_s + _BIT_EPS).astype(np.int64)

    def step(self, alloc) -> tuple[SlotFeedback, SlotState]:
        cfg = self.config
        dt = cfg.slot_duration_s
        rates = self._rates(alloc)
        cap = self._capacity_bits(rates)
        t_start, t_end = self.t * dt, (self.t + 1) * dt
        d_max = cfg.d_max
        n = cfg.n_users
        served = np.zeros(n, dtype=np.int64)
        late = np.zeros(n, dtype=np.int64)
        bits = np.zeros(n, dtype=np.int64)
        delays = []
        counts = np.zeros(n)
        mean_bits = np.zeros(n)
        for i, q in enumerate(self.queues):
            departed, b = q.serve(cap[i], t_end)
            d = np.fromiter((t_end - p.arrival_time for p in departed), float, len(departed))
            delays.append(d)
            served[i] = len(departed)
            late[i] = int(np.count_nonzero(d > d_max[i]))
            bits[i] = b
            times, sizes = self.streams[i].take(t_start, t_end)
            for t, s in zip(times.tolist(), sizes.tolist()):
                q.push(Packet(i, t, s))
            counts[i] = len(sizes)
            if len(sizes):
                mean_bits[i] = float(sizes.mean())
                self.arrived_bits[i] += int(sizes.sum())
        self.served_bits += bits
        power = float(np.sum(np.where(np.asarray(alloc.rb_assignment, bool), alloc.power, 0.0)))
        fb = SlotFeedback(self.t, served, late, rates, power, bits, delays)
        self.t += 1
        self.channel = self._draw_channel(self.t)
        self.state = SlotState(counts, mean_bits, self.channel)
        return fb, self.state

    def hold(self, alloc, n_slots: int) -> HoldRecord:
        """Run ``n_slots`` slots with a fixed allocation on a static channel.

        Equivalent to calling :meth:`step` ``n_slots`` times with ``alloc``
        but solved per packet: with a constant capacity of ``c`` bits per
        slot the FIFO finishes packet ``k`` at cumulative service
        ``W_k = max(W_{k-1}, e_k * c) + s_k`` where ``e_k`` is the first slot
        in which the packet is servable.
        """
        cfg = self.config
        if cfg.fading:
            raise ValueError("hold() needs a static channel (fading=False)")
        if n_slots < 1:
            raise ValueError("n_slots must be >= 1")
        dt = cfg.slot_duration_s
        rates = self._rates(alloc)
        cap = self._capacity_bits(rates)
        t0 = self.t
        t1 = t0 + n_slots
        bounds = (t0 + np.arange(n_slots + 1)) * dt
        d_max = cfg.d_max
        n = cfg.n_users
        rec = HoldRecord(t0, n_slots, [], [], [], np.zeros(n, np.int64), np.zeros(n, np.int64))
        counts = np.zeros(n)
        mean_bits = np.zeros(n)
        for i, q in enumerate(self.queues):
            old = list(q.packets)
            times, sizes = self.streams[i].take(bounds[0], bounds[-1])
            slot_of = np.searchsorted(bounds, times, side="right") - 1
            last = slot_of == n_slots - 1
            counts[i] = np.count_nonzero(last)
            if counts[i]:
                mean_bits[i] = float(sizes[last].mean())
            self.arrived_bits[i] += int(sizes.sum())

            arr = np.concatenate([[p.arrival_time for p in old], times]).astype(float)
            size = np.concatenate([[p.size_bits for p in old], sizes]).astype(np.int64)
            work = size.copy()
            if old:
                work[0] -= q.head_served
            ready = np.concatenate([np.full(len(old), t0, np.int64), t0 + slot_of + 1])
            c = int(cap[i])
            if c > 0 and len(work):
                cum = np.cumsum(work)
                start = np.maximum.accumulate(ready * c - (cum - work))
                finish = cum + start
                begin = finish - work
                dep_slot = -(-finish // c)
                gone = dep_slot <= t1
            else:
                begin = np.zeros(len(work), np.int64)
                gone = np.zeros(len(work), bool)
            n_gone = int(np.count_nonzero(gone))
            dep = dep_slot[:n_gone] * dt if n_gone else np.empty(0)
            rec.arrival_times.append(arr[:n_gone])
            rec.departure_times.append(dep)
            rec.sizes.append(size[:n_gone])
            rec.served[i] = n_gone
            rec.late[i] = int(np.count_nonzero(dep - arr[:n_gone] > d_max[i]))

            before = q.backlog_bits + int(sizes.sum())
            pending = [old[k] if k < len(old) else Packet(i, float(arr[k]), int(size[k]))
                       for k in range(n_gone, len(size))]
            for k, p in enumerate(old[:n_gone]):
                p.departure_time = float(dep[k])
            q.packets = deque(pending)
            q.backlog_bits = int(size[n_gone:].sum())
            q.head_served = 0
            if pending:
                k = n_gone
                already = size[k] - work[k]
                progress = min(max(t1 * c - int(begin[k]), 0), int(work[k])) if c > 0 else 0
                q.head_served = int(already + progress)
                q.backlog_bits -= q.head_served
            self.served_bits[i] += before - q.backlog_bits
        self.t = t1
        self.channel = ChannelState(self.channel.gains, self.t)
        self.state = SlotState(counts, mean_bits, self.channel)
        return rec
