"""Attacker environment: full state and delay-only observations, attack
actions, deferred rewards and per-episode metrics."""
from __future__ import annotations

import copy
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import featurize, gasf, gram_moments
from .netsim import AttackBurst, LinkProfile, LinkSimulator, SimClock, TrafficSample, measure_delay

_EPS = 1e-9
GRAM_DIM = 3
TRAFFIC_DIM = 3


@dataclass(frozen=True)
class AttackAction:
    a_dec: int = 0
    a_rate: float = 0.0  # Mbps
    a_dur: float = 0.0  # s

    def __post_init__(self):
        if self.a_dec not in (0, 1):
            raise ValueError("a_dec must be 0 or 1")
        if self.a_rate < 0 or self.a_dur < 0:
            raise ValueError("a_rate and a_dur must be non-negative")

    @property
    def volume(self) -> float:
        """Mbit sent by this action, ``a_dec * a_dur * a_rate``."""
        return self.a_dec * self.a_dur * self.a_rate


IDLE = AttackAction()


@dataclass(frozen=True)
class RewardParams:
    r_c: float = 80.0
    p: float = 100.0
    kappa: float = 5.0
    z0: float = 1.0
    b_max: float = 10.0
    b_th: float | None = None  # defaults to 0.1 * b_max
    c_max: float | None = None  # defaults to b_max * 1 s
    gamma: float = 0.95

    def __post_init__(self):
        if self.b_th is None:
            object.__setattr__(self, "b_th", 0.1 * self.b_max)
        if self.c_max is None:
            object.__setattr__(self, "c_max", self.b_max * 1.0)
        for name in ("r_c", "p", "kappa", "z0", "b_max", "b_th", "c_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.b_th < self.b_max:
            raise ValueError("b_th must be below b_max")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    @classmethod
    def for_link(cls, profile: LinkProfile, decision_slot: float = 1.0, **overrides):
        kw = {"b_max": profile.capacity_bmax, "c_max": profile.capacity_bmax * decision_slot}
        kw.update(overrides)
        return cls(**kw)


def congestion_rate(b: float, params: RewardParams) -> float:
    if b > params.b_max + _EPS:
        raise ValueError(f"available bandwidth {b} exceeds b_max {params.b_max}")
    if b < -_EPS:
        raise ValueError("available bandwidth must be non-negative")
    if b > params.b_th:
        return 1.0 - min(b, params.b_max) / params.b_max
    return params.z0


def relative_cost(action: AttackAction, params: RewardParams) -> float:
    return action.a_dur * action.a_rate / params.c_max


def reward(action: AttackAction, b: float, f_d: int, params: RewardParams) -> float:
    """Per-action reward given the available bandwidth ``b`` in the reward
    snapshot and the detector flag ``f_d``."""
    if f_d not in (0, 1):
        raise ValueError("f_d must be 0 or 1")
    if action.a_dec == 1:
        if f_d:
            return -params.p
        c = relative_cost(action, params)
        return (congestion_rate(b, params) - c * c) * params.r_c
    return -params.p - params.kappa if f_d else -params.kappa


@dataclass(frozen=True)
class FullState:
    s_gram: tuple
    s_traffic: tuple
    s_delay: tuple

    def as_array(self) -> np.ndarray:
        return np.array([*self.s_gram, *self.s_traffic, *self.s_delay], dtype=float)

    @property
    def m(self) -> int:
        return len(self.s_gram) + len(self.s_traffic)

    @property
    def n(self) -> int:
        return len(self.s_delay)


@dataclass(frozen=True)
class PartialObservation:
    delays: tuple

    def as_array(self) -> np.ndarray:
        return np.array(self.delays, dtype=float)


def observe_partial(state: FullState, n_prime: int, noise_sigma: float = 0.0,
                    rng: np.random.Generator | None = None, base_delay: float = 0.0) -> PartialObservation:
    """Last ``n_prime`` delays of ``state``, each passed through the probe noise."""
    if not 1 <= n_prime <= state.n:
        raise ValueError(f"n_prime must lie in [1, {state.n}]")
    tail = state.s_delay[-n_prime:]
    return PartialObservation(tuple(
        measure_delay(TrafficSample(0.0, 0.0, 0.0, 0.0, tau), noise_sigma, rng, base_delay) for tau in tail))


@dataclass
class PendingReward:
    slot: int
    t: float
    action: AttackAction
    state: FullState
    observation: PartialObservation
    due: float
    b: float | None = None
    f_d: int | None = None


@dataclass
class DeferredQueue:
    """FIFO of actions waiting for their reward snapshot."""

    delay_d: float = 0.5
    pending: deque = field(default_factory=deque)

    def push(self, item: PendingReward) -> None:
        self.pending.append(item)

    def awaiting_snapshot(self, now: float):
        return [p for p in self.pending if p.b is None and p.due <= now + _EPS]

    def release(self, now: float, force: bool = False) -> list[PendingReward]:
        out = []
        while self.pending and (force or (self.pending[0].due <= now + _EPS and self.pending[0].b is not None)):
            out.append(self.pending.popleft())
        return out

    def __len__(self):
        return len(self.pending)


@dataclass(frozen=True)
class StepRecord:
    slot: int
    t: float
    state: FullState
    observation: PartialObservation
    action: AttackAction
    reward: float
    next_state: FullState
    f_d: int
    done: bool
    b: float  # available bandwidth in the reward snapshot
    released_at: float

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True)


@dataclass(frozen=True)
class StepResult:
    state: FullState
    observation: PartialObservation
    released: list
    f_d: int
    done: bool


class EpisodeFinishedError(RuntimeError):
    pass


def episode_offset(trace, controller_interval: float, seed: int) -> float:
    """Where in ``trace`` the episode seeded ``seed`` starts (a whole number of controller ticks)."""
    n_ticks = int(trace.duration / controller_interval)
    return float(np.random.default_rng([seed, 0]).integers(0, max(n_ticks, 1))) * controller_interval


class AttackEnv:
    """One attacker episode against a frozen detector on a bottleneck link.

    Each :meth:`step` launches the action as a burst at the start of the
    decision slot and simulates the slot.  The reward snapshot (available
    bandwidth plus one detector verdict) is taken at the first controller
    tick at least ``delay_d`` after the action, and the reward is released at
    the first slot boundary after that.
    """

    def __init__(self, profile: LinkProfile, trace, detector=None, params: RewardParams | None = None, *,
                 controller_interval=0.5, decision_slot=1.0, n_delay=10, n_partial=3, window_len=10,
                 delay_d=0.5, episode_slots=100, noise_sigma=0.0, rate_max=None, beta_tcp=0.8,
                 substeps=5, warmup=None, random_offset=True, seed=0):
        SimClock(0.0, controller_interval, decision_slot)  # validates divisibility
        if not 1 <= n_partial <= n_delay:
            raise ValueError("need 1 <= n_partial <= n_delay")
        if noise_sigma < 0 or delay_d < 0:
            raise ValueError("noise_sigma and delay_d must be non-negative")
        self.profile = profile
        self.trace = trace
        self.detector = detector
        self.params = params or RewardParams.for_link(profile, decision_slot)
        self.controller_interval = controller_interval
        self.decision_slot = decision_slot
        self.n_delay = n_delay
        self.n_partial = n_partial
        self.window_len = window_len
        self.delay_d = delay_d
        self.episode_slots = episode_slots
        self.noise_sigma = noise_sigma
        self.rate_max = rate_max if rate_max is not None else 3 * profile.capacity_bmax
        self.beta_tcp = beta_tcp
        self.substeps = substeps
        n_hist = max(window_len, n_delay)
        self.warmup = warmup if warmup is not None else n_hist * controller_interval
        self.random_offset = random_offset
        self.seed = seed
        self._episode = 0
        self.done = True

    # -- episode lifecycle --------------------------------------------------

    @property
    def state_dim(self) -> int:
        return GRAM_DIM + TRAFFIC_DIM + self.n_delay

    def reset(self, seed: int | None = None):
        if seed is None:
            seed = self.seed * 100003 + self._episode
        self._episode += 1
        self.obs_rng = np.random.default_rng([seed, 1])
        offset = episode_offset(self.trace, self.controller_interval, seed) if self.random_offset else 0.0
        clock = SimClock(-self.warmup, self.controller_interval, self.decision_slot)
        self.sim = LinkSimulator(self.profile, self.trace, clock, beta_tcp=self.beta_tcp,
                                 substeps=self.substeps, trace_offset=offset + self.warmup)
        self.samples: list[TrafficSample] = []
        self.measured: list[float] = []
        n_warm = int(round(self.warmup / self.controller_interval))
        for _ in range(n_warm):
            self._record(self.sim.tick(()))
        self.queue = DeferredQueue(self.delay_d)
        self.records: list[StepRecord] = []
        self.slot = 0
        self.done = False
        self.last_fd = 0
        self.n_detections = 0
        self._refresh()
        return self.state, self.observation

    def _record(self, s: TrafficSample):
        self.samples.append(s)
        self.measured.append(measure_delay(s, self.noise_sigma, self.obs_rng, self.profile.base_delay))

    def _pad(self, xs, n):
        xs = list(xs[-n:])
        return [xs[0]] * (n - len(xs)) + xs if xs else [self.profile.base_delay] * n

    def true_state(self) -> FullState:
        win = self.samples[-self.window_len:]
        if len(win) >= 2:
            vol = [s.v_tcp + s.v_udp for s in win]
            gram = gram_moments(gasf(vol))
        else:
            gram = (0.0, 0.0, 0.0)
        last = self.samples[-1] if self.samples else TrafficSample(0, 0, 0, self.profile.capacity_bmax, self.profile.base_delay)
        taus = self._pad([s.tau for s in self.samples], self.n_delay)
        return FullState(tuple(gram), (last.v_tcp, last.v_udp, last.b), tuple(taus))

    def _refresh(self):
        true = self.true_state()
        delays = tuple(self._pad(self.measured, self.n_delay))
        self.state = FullState(true.s_gram, true.s_traffic, delays)
        self.observation = PartialObservation(delays[-self.n_partial:])

    def detect(self) -> int:
        if self.detector is None or len(self.samples) < self.window_len:
            return 0
        return int(self.detector.predict(featurize(self.samples, self.window_len)))

    @property
    def now(self) -> float:
        return self.sim.clock.now

    def step(self, action: AttackAction) -> StepResult:
        if self.done:
            raise EpisodeFinishedError("episode finished; call reset()")
        if action.a_dur > self.decision_slot + _EPS:
            raise ValueError("a_dur exceeds the decision slot")
        t0 = self.now
        bursts = []
        if action.a_dec and action.a_dur > 0 and action.a_rate > 0:
            bursts.append(AttackBurst(t0, action.a_dur, action.a_rate))
        self.queue.push(PendingReward(self.slot, t0, action, self.state, self.observation, t0 + self.delay_d))
        ticks = int(round(self.decision_slot / self.controller_interval))
        f_d = self.last_fd
        for _ in range(ticks):
            self._record(self.sim.tick(bursts))
            due = self.queue.awaiting_snapshot(self.now)
            if due:
                f_d = self.detect()
                self.n_detections += 1
                for p in due:
                    p.b, p.f_d = self.samples[-1].b, f_d
        self.slot += 1
        self.done = self.slot >= self.episode_slots
        self.last_fd = f_d
        self._refresh()
        released = self.queue.release(self.now)
        if self.done and len(self.queue):
            for p in self.queue.pending:
                if p.b is None:
                    p.b, p.f_d = self.samples[-1].b, self.detect()
            released += self.queue.release(self.now, force=True)
        recs = [
            StepRecord(p.slot, p.t, p.state, p.observation, p.action,
                       reward(p.action, p.b, p.f_d, self.params), self.state, p.f_d,
                       self.done, p.b, self.now)
            for p in released
        ]
        self.records.extend(recs)
        return StepResult(self.state, self.observation, recs, f_d, self.done)

    # -- synchronisation ----------------------------------------------------

    def save_state(self) -> dict:
        return {
            "queue_mbit": self.sim.queue,
            "clock": self.sim.clock.now,
            "trace_offset": self.sim.trace_offset,
            "samples": list(self.samples),
            "measured": list(self.measured),
            "pending": copy.deepcopy(self.queue),
            "records": list(self.records),
            "slot": self.slot,
            "done": self.done,
            "last_fd": self.last_fd,
            "obs_rng": copy.deepcopy(self.obs_rng.bit_generator.state),
        }

    def load_state(self, st: dict) -> None:
        clock = SimClock(st["clock"], self.controller_interval, self.decision_slot)
        self.sim = LinkSimulator(self.profile, self.trace, clock, beta_tcp=self.beta_tcp, substeps=self.substeps,
                                 trace_offset=st["trace_offset"], queue=st["queue_mbit"])
        self.samples = list(st["samples"])
        self.measured = list(st["measured"])
        self.queue = copy.deepcopy(st["pending"])
        self.records = list(st["records"])
        self.slot = st["slot"]
        self.done = st["done"]
        self.last_fd = st["last_fd"]
        if not hasattr(self, "obs_rng"):
            self.obs_rng = np.random.default_rng()
        self.obs_rng.bit_generator.state = copy.deepcopy(st["obs_rng"])
        self.n_detections = getattr(self, "n_detections", 0)
        self._refresh()

    def sync_from(self, other: "AttackEnv") -> None:
        self.load_state(other.save_state())

    # -- network-input encoding --------------------------------------------

    def encode_state(self, state: FullState) -> np.ndarray:
        """Scale a full state to O(1) ranges for the policy networks."""
        cap, ci = self.profile.capacity_bmax, self.controller_interval
        vol = cap * ci
        x = state.as_array()
        x[3] /= vol
        x[4] /= vol
        x[5] /= cap
        x[6:] = self._scale_delays(x[6:])
        return x

    def encode_observation(self, obs: PartialObservation) -> np.ndarray:
        return self._scale_delays(obs.as_array())

    def _scale_delays(self, d):
        return (np.asarray(d, dtype=float) - self.profile.base_delay) / self.profile.max_queue_delay


@dataclass(frozen=True)
class EpisodeMetrics:
    asr: float
    avg_bandwidth: float
    attack_cost: float
    trigger_rate: float
    avg_duration: float
    avg_rate: float
    n_attacks: int
    n_slots: int
    zero_attacks: bool = False


def metrics(records, samples=None) -> EpisodeMetrics:
    """Attack success rate, mean available bandwidth, total attack volume,
    trigger rate and mean burst shape of one episode.

    With no attacks the success rate is reported as 1.0 and ``zero_attacks``
    is set.  ``avg_bandwidth`` averages ``samples`` when given, else the
    bandwidth stored in each record's reward snapshot.
    """
    records = list(records)
    attacks = [r for r in records if r.action.a_dec == 1]
    n_att = len(attacks)
    undetected = sum(1 for r in attacks if r.f_d == 0)
    if samples:
        bw = float(np.mean([s.b for s in samples]))
    elif records:
        bw = float(np.mean([r.b for r in records]))
    else:
        bw = math.nan
    return EpisodeMetrics(
        asr=undetected / n_att if n_att else 1.0,
        avg_bandwidth=bw,
        attack_cost=float(sum(r.action.volume for r in records)),
        trigger_rate=n_att / len(records) if records else 0.0,
        avg_duration=float(np.mean([r.action.a_dur for r in attacks])) if n_att else 0.0,
        avg_rate=float(np.mean([r.action.a_rate for r in attacks])) if n_att else 0.0,
        n_attacks=n_att,
        n_slots=len(records),
        zero_attacks=n_att == 0,
    )


def episode_samples(env: AttackEnv) -> list[TrafficSample]:
    """Samples of the current episode, excluding warm-up."""
    return [s for s in env.samples if s.t > _EPS]


def write_episode_log(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_episode_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
