"""Fluid-queue simulation of a single bottleneck link.

Background traffic is replayed from a :class:`BackgroundTrace`; attack
traffic enters as UDP bursts.  The link is advanced in short sub-steps and
aggregated into one :class:`TrafficSample` per controller interval, which is
what the detector and the attacker observe.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_BETA_TCP = 0.8


@dataclass(frozen=True)
class LinkProfile:
    capacity_bmax: float = 10.0  # Mbps
    base_delay: float = 0.02  # s
    queue_limit: float = 5.0  # Mbit
    hop_count: int = 1

    def __post_init__(self):
        if not self.capacity_bmax > 0:
            raise ValueError("capacity_bmax must be positive")
        if not self.base_delay >= 0:
            raise ValueError("base_delay must be non-negative")
        if not self.queue_limit > 0:
            raise ValueError("queue_limit must be positive")
        if int(self.hop_count) < 1:
            raise ValueError("hop_count must be a positive integer")

    @property
    def max_queue_delay(self) -> float:
        return self.queue_limit / self.capacity_bmax


# Capacity/delay presets standing in for the larger topologies.  Capacities
# follow the ratio of LDoS attack rates used on each topology relative to the
# simple dumbbell (15-30 Mbps there); base delay grows with hop count.
SCENARIOS: dict[str, LinkProfile] = {
    "simple": LinkProfile(10.0, 0.02, 5.0, 1),
    "aarnet": LinkProfile(155.0, 0.06, 77.5, 6),
    "ansnet": LinkProfile(50.0, 0.04, 25.0, 4),
    "yorknet": LinkProfile(150.0, 0.08, 75.0, 8),
}


def scenario_profile(name: str) -> LinkProfile:
    try:
        return SCENARIOS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None


@dataclass
class BackgroundTrace:
    interval: float
    samples: np.ndarray  # shape (T, 2): tcp_mbit, udp_mbit per interval

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).reshape(-1, 2)
        if not self.interval > 0:
            raise ValueError("trace interval must be positive")
        if len(self.samples) == 0:
            raise ValueError("trace must be non-empty")
        if not np.all(np.isfinite(self.samples)) or np.any(self.samples < 0):
            raise ValueError("trace volumes must be finite and non-negative")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) * self.interval

    def rates_at(self, t: float) -> tuple[float, float]:
        """Offered (tcp, udp) rate in Mbps at time t; wraps past the end."""
        i = int(math.floor(t / self.interval + 1e-9)) % len(self.samples)
        tcp, udp = self.samples[i]
        return tcp / self.interval, udp / self.interval

    @classmethod
    def flat(cls, tcp_rate: float, udp_rate: float, interval: float = 0.5, n: int = 1):
        return cls(interval, np.tile([tcp_rate * interval, udp_rate * interval], (n, 1)))


def read_trace_csv(path) -> BackgroundTrace:
    """Load a ``t_s,tcp_mbit,udp_mbit`` trace file."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["t_s", "tcp_mbit", "udp_mbit"]:
            raise ValueError(f"{path}: expected header t_s,tcp_mbit,udp_mbit, got {reader.fieldnames}")
        rows = [(float(r["t_s"]), float(r["tcp_mbit"]), float(r["udp_mbit"])) for r in reader]
    if not rows:
        raise ValueError(f"{path}: trace has no rows")
    t = np.array([r[0] for r in rows])
    interval = float(t[1] - t[0]) if len(t) > 1 else 0.5
    if len(t) > 2 and not np.allclose(np.diff(t), interval, rtol=1e-6, atol=1e-9):
        raise ValueError(f"{path}: rows must be evenly spaced")
    return BackgroundTrace(interval, np.array([r[1:] for r in rows]))


def write_trace_csv(trace: BackgroundTrace, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_s", "tcp_mbit", "udp_mbit"])
        for i, (tcp, udp) in enumerate(trace.samples):
            w.writerow([f"{i * trace.interval:.6g}", f"{tcp:.9g}", f"{udp:.9g}"])


def synthetic_trace(
    mean_load: float = 5.0,
    n_intervals: int = 2000,
    interval: float = 0.5,
    tcp_fraction: float = 0.8,
    burstiness: float = 0.25,
    diurnal_amplitude: float = 0.2,
    diurnal_period: float | None = None,
    seed: int = 0,
) -> BackgroundTrace:
    """Generate a background trace with a given mean offered load (Mbps).

    Per-interval load is ``mean_load * (1 + A sin(2 pi t / period)) * g`` where
    ``g`` is a mean-one gamma variate with coefficient of variation
    ``burstiness``.  The diurnal period defaults to the whole trace, so the
    ramp averages out.  Deterministic per seed.
    """
    if mean_load < 0 or n_intervals < 1 or interval <= 0:
        raise ValueError("mean_load >= 0, n_intervals >= 1 and interval > 0 required")
    if not 0 <= tcp_fraction <= 1:
        raise ValueError("tcp_fraction must lie in [0, 1]")
    if burstiness < 0 or not 0 <= diurnal_amplitude < 1:
        raise ValueError("burstiness >= 0 and 0 <= diurnal_amplitude < 1 required")
    rng = np.random.default_rng(seed)
    t = np.arange(n_intervals) * interval
    period = diurnal_period or n_intervals * interval
    ramp = 1.0 + diurnal_amplitude * np.sin(2 * np.pi * t / period)
    if burstiness > 0:
        shape = 1.0 / burstiness**2
        g = rng.gamma(shape, 1.0 / shape, size=(n_intervals, 2))
    else:
        g = np.ones((n_intervals, 2))
    load = mean_load * ramp * interval
    tcp = load * tcp_fraction * g[:, 0]
    udp = load * (1 - tcp_fraction) * g[:, 1]
    return BackgroundTrace(interval, np.column_stack([tcp, udp]))


@dataclass(frozen=True)
class AttackBurst:
    start: float
    duration: float
    rate: float  # Mbps

    def __post_init__(self):
        if self.duration < 0 or self.rate < 0:
            raise ValueError("burst duration and rate must be non-negative")

    @property
    def end(self) -> float:
        return self.start + self.duration

    @property
    def volume(self) -> float:
        return self.duration * self.rate


@dataclass(frozen=True)
class TrafficSample:
    t: float  # end of the measurement interval
    v_tcp: float  # Mbit delivered into the link during the interval
    v_udp: float
    b: float  # available bandwidth, Mbps
    tau: float  # one-way delay, s
    dropped: float = 0.0  # Mbit


@dataclass
class SimClock:
    now: float = 0.0
    controller_interval: float = 0.5
    decision_slot: float = 1.0

    def __post_init__(self):
        if self.controller_interval <= 0 or self.decision_slot <= 0:
            raise ValueError("intervals must be positive")
        ratio = self.decision_slot / self.controller_interval
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("controller_interval must divide decision_slot exactly")

    @property
    def ticks_per_slot(self) -> int:
        return int(round(self.decision_slot / self.controller_interval))


def tcp_backoff(offered_tcp: float, congestion: float, beta_tcp: float = DEFAULT_BETA_TCP) -> float:
    """Scale the offered TCP rate down in proportion to congestion."""
    if not 0 <= beta_tcp <= 1:
        raise ValueError("beta_tcp must lie in [0, 1]")
    congestion = min(max(congestion, 0.0), 1.0)
    return offered_tcp * (1.0 - beta_tcp * congestion)


def step_link(
    profile: LinkProfile,
    queue: float,
    offered_tcp: float,
    offered_udp: float,
    dt: float,
    t: float = 0.0,
) -> tuple[float, TrafficSample]:
    """Advance the fluid queue by ``dt`` seconds.

    Returns the new queue content and a sample whose volumes are the offered
    volumes minus what overflowed the buffer (drops charged to TCP first).
    """
    if not all(math.isfinite(x) for x in (queue, offered_tcp, offered_udp, dt)):
        raise ValueError("step_link inputs must be finite")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if offered_tcp < 0 or offered_udp < 0:
        raise ValueError("offered rates must be non-negative")
    cap = profile.capacity_bmax
    if queue < 0 or queue > profile.queue_limit + 1e-9:
        raise ValueError("queue outside [0, queue_limit]")

    in_tcp = offered_tcp * dt
    in_udp = offered_udp * dt
    raw = queue + in_tcp + in_udp - cap * dt
    new_queue = min(max(raw, 0.0), profile.queue_limit)
    dropped = max(raw - profile.queue_limit, 0.0)
    drop_tcp = min(dropped, in_tcp)
    drop_udp = dropped - drop_tcp

    served_rate = min(offered_tcp + offered_udp + queue / dt, cap)
    sample = TrafficSample(
        t=t,
        v_tcp=in_tcp - drop_tcp,
        v_udp=in_udp - drop_udp,
        b=max(0.0, cap - served_rate),
        tau=profile.base_delay + new_queue / cap,
        dropped=dropped,
    )
    return new_queue, sample


def _overlap(a0, a1, b0, b1):
    return max(0.0, min(a1, b1) - max(a0, b0))


@dataclass
class LinkSimulator:
    """Stateful link simulation advanced one controller interval at a time.

    ``trace_offset`` shifts where in the background trace the run starts, so
    episodes can replay different parts of one trace.
    """

    profile: LinkProfile
    trace: BackgroundTrace
    clock: SimClock = field(default_factory=SimClock)
    beta_tcp: float = DEFAULT_BETA_TCP
    substeps: int = 5
    trace_offset: float = 0.0
    queue: float = 0.0
    _wrapped: bool = field(default=False, repr=False)

    def tick(self, bursts=()) -> TrafficSample:
        """Simulate one controller interval and return its aggregate sample."""
        ci = self.clock.controller_interval
        t0 = self.clock.now
        dt = ci / self.substeps
        v_tcp = v_udp = dropped = b_sum = tau_sum = 0.0
        active = [bu for bu in bursts if bu.rate > 0 and bu.duration > 0 and bu.start < t0 + ci and bu.end > t0]
        for k in range(self.substeps):
            s0 = t0 + k * dt
            tt = self.trace_offset + s0 + 0.5 * dt
            if not self._wrapped and tt >= self.trace.duration:
                logger.info("background trace shorter than run; wrapping around")
                self._wrapped = True
            bg_tcp, bg_udp = self.trace.rates_at(tt)
            atk = 0.0
            for bu in active:
                atk += bu.rate * _overlap(s0, s0 + dt, bu.start, bu.end) / dt
            tcp = tcp_backoff(bg_tcp, self.queue / self.profile.queue_limit, self.beta_tcp)
            self.queue, s = step_link(self.profile, self.queue, tcp, bg_udp + atk, dt)
            v_tcp += s.v_tcp
            v_udp += s.v_udp
            dropped += s.dropped
            b_sum += s.b
            tau_sum += s.tau
        self.clock.now = t0 + ci
        return TrafficSample(
            t=self.clock.now,
            v_tcp=v_tcp,
            v_udp=v_udp,
            b=b_sum / self.substeps,
            tau=tau_sum / self.substeps,
            dropped=dropped,
        )

    def advance(self, bursts, duration: float) -> list[TrafficSample]:
        n = duration / self.clock.controller_interval
        if abs(n - round(n)) > 1e-9:
            raise ValueError("duration must be a multiple of the controller interval")
        return [self.tick(bursts) for _ in range(int(round(n)))]


def run_window(
    trace: BackgroundTrace,
    bursts,
    clock: SimClock,
    horizon: float,
    profile: LinkProfile = LinkProfile(),
    beta_tcp: float = DEFAULT_BETA_TCP,
    substeps: int = 5,
) -> list[TrafficSample]:
    """Simulate ``horizon`` seconds and return one sample per controller interval."""
    sim = LinkSimulator(profile, trace, SimClock(clock.now, clock.controller_interval, clock.decision_slot),
                        beta_tcp=beta_tcp, substeps=substeps)
    return sim.advance(list(bursts), horizon)


def measure_delay(
    sample: TrafficSample,
    noise_sigma: float,
    rng: np.random.Generator | None = None,
    base_delay: float = 0.0,
) -> float:
    """Delay as seen by a ping probe: true delay plus Gaussian noise, floored at ``base_delay``."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if noise_sigma == 0:
        return sample.tau
    if rng is None:
        raise ValueError("a seeded rng is required when noise_sigma > 0")
    return max(base_delay, sample.tau + rng.normal(0.0, noise_sigma))
