"""Experiment building blocks shared by the command line and the demos:
configuration, detector corpora, LDoS baselines, teacher/student training,
the detector matrix and the observation-noise sweep."""
from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .agents import (Attacker, LdosSchedule, PpoConfig, ldos_bursts, ldos_cycle_cost,
                     ldos_grid, run_episode, train_attacker)
from .detector import DetectorModel, evaluate, label_windows, train
from .env import AttackEnv, RewardParams, episode_offset, metrics
from .features import featurize
from .netsim import (AttackBurst, BackgroundTrace, LinkProfile, LinkSimulator, SimClock, read_trace_csv,
                     scenario_profile, synthetic_trace)
from .reciprocal import PolicyPair, ReciprocalParams, train_student

SOURCES = ("ldos", "adados", "mixed")
CURVE_COLUMNS = ("episode", "asr", "bandwidth", "cost", "mean_reward", "trigger_rate")

_ENV_KEYS = ("controller_interval", "decision_slot", "n_delay", "n_partial", "window_len", "delay_d",
             "episode_slots", "rate_max", "beta_tcp", "substeps", "warmup")


def _default_trace():
    return {"mean_load": 2.0, "n_intervals": 4000, "seed": 1}


def _default_detector():
    return {"kind": "gbdt", "source": "ldos", "hyperparams": {}}


def _default_corpus():
    return {"train_offsets": [0.0, 300.0, 600.0], "test_offsets": [1000.0, 1300.0, 1600.0],
            "benign_runs": 3, "run_seconds": 100.0, "attack_stride": 3, "benign_stride": 1,
            "adados_episodes": 6}


def _default_ldos():
    return {"variant": "single", "scale": 1.0, "schedules": None}


@dataclass
class ExperimentConfig:
    """Everything one experiment needs.  Unspecified sections keep library defaults."""

    scenario: str = "simple"
    link: dict = field(default_factory=dict)  # LinkProfile overrides
    trace_path: str | None = None
    trace: dict = field(default_factory=_default_trace)  # synthetic_trace arguments
    reward: dict = field(default_factory=dict)  # RewardParams overrides
    env: dict = field(default_factory=dict)  # AttackEnv keyword overrides
    ppo: dict = field(default_factory=dict)
    reciprocal: dict = field(default_factory=dict)
    detector: dict = field(default_factory=_default_detector)
    corpus: dict = field(default_factory=_default_corpus)
    ldos: dict = field(default_factory=_default_ldos)
    noise_sigmas: list | None = None  # None: multiples of the link's base delay
    noise_agent: str = "teacher"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    teacher_episodes: int = 600
    student_episodes: int = 500
    matrix_episodes: int = 300
    eval_episodes: int = 20

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for k, v in d.items():
            default = getattr(cfg, k)
            if isinstance(default, dict) and isinstance(v, dict):
                merged = dict(default)
                merged.update(v)
                v = merged
            setattr(cfg, k, v)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def validate(self) -> None:
        """Reject inconsistent settings before anything runs."""
        profile = self.profile()
        params = self.reward_params()  # checks b_th < b_max
        env_kw = self.env_kwargs()
        unknown = set(self.env) - set(_ENV_KEYS)
        if unknown:
            raise ValueError(f"unknown env keys: {sorted(unknown)}")
        n, n_p = env_kw.get("n_delay", 10), env_kw.get("n_partial", 3)
        if not 1 <= n_p <= n:
            raise ValueError(f"n_partial ({n_p}) must lie in [1, n_delay ({n})]")
        SimClock(0.0, env_kw.get("controller_interval", 0.5), env_kw.get("decision_slot", 1.0))
        self.schedules()  # checks duration <= period
        if self.trace_path is not None and not Path(self.trace_path).is_file():
            raise FileNotFoundError(f"trace file not found: {self.trace_path}")
        if self.detector.get("kind") not in ("knn", "gbdt"):
            raise ValueError(f"unknown detector kind {self.detector.get('kind')!r}")
        if self.detector.get("source") not in SOURCES:
            raise ValueError(f"unknown detector source {self.detector.get('source')!r}")
        if self.noise_agent not in ("teacher", "student"):
            raise ValueError("noise_agent must be 'teacher' or 'student'")
        if any(s < 0 for s in self.sigmas()):
            raise ValueError("noise sigmas must be non-negative")
        if not self.seeds or any(not isinstance(s, int) for s in self.seeds):
            raise ValueError("seeds must be a non-empty list of integers")
        for name in ("teacher_episodes", "student_episodes", "matrix_episodes", "eval_episodes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        PpoConfig(**self.ppo_kwargs())
        ReciprocalParams(**self.reciprocal)
        del profile, params

    # -- builders -----------------------------------------------------------

    def profile(self) -> LinkProfile:
        base = asdict(scenario_profile(self.scenario))
        base.update(self.link)
        return LinkProfile(**base)

    def build_trace(self) -> BackgroundTrace:
        if self.trace_path is not None:
            return read_trace_csv(self.trace_path)
        return synthetic_trace(**self.trace)

    def reward_params(self) -> RewardParams:
        slot = self.env.get("decision_slot", 1.0)
        return RewardParams.for_link(self.profile(), slot, **self.reward)

    def env_kwargs(self) -> dict:
        return dict(self.env)

    def ppo_kwargs(self) -> dict:
        kw = dict(self.ppo)
        if "hidden" in kw:
            kw["hidden"] = tuple(kw["hidden"])
        return kw

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(**self.ppo_kwargs())

    def reciprocal_params(self) -> ReciprocalParams:
        return ReciprocalParams(**self.reciprocal)

    def schedules(self) -> list[LdosSchedule]:
        variant = self.ldos.get("variant", "single")
        if self.ldos.get("schedules"):
            return [LdosSchedule(float(d), float(p), float(r), variant) for d, p, r in self.ldos["schedules"]]
        return ldos_grid(variant, self.ldos.get("scale", 1.0))

    def sigmas(self) -> list[float]:
        if self.noise_sigmas is not None:
            return [float(s) for s in self.noise_sigmas]
        base = self.profile().base_delay
        return [0.0, 0.1 * base, 0.5 * base, 1.0 * base]


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def make_env(cfg: ExperimentConfig, detector=None, seed: int = 0, noise_sigma: float = 0.0,
             trace: BackgroundTrace | None = None) -> AttackEnv:
    return AttackEnv(cfg.profile(), trace or cfg.build_trace(), detector, cfg.reward_params(),
                     noise_sigma=noise_sigma, seed=seed, **cfg.env_kwargs())


def new_attacker(cfg: ExperimentConfig, env: AttackEnv, seed: int, observe: str = "full") -> Attacker:
    in_dim = env.state_dim if observe == "full" else env.n_partial
    return Attacker(in_dim, env.rate_max, env.decision_slot, cfg.ppo_config().hidden, seed=seed)


# --- detector corpora -------------------------------------------------------

def _simulate(cfg, trace, bursts, offset, horizon):
    env_kw = cfg.env_kwargs()
    clock = SimClock(0.0, env_kw.get("controller_interval", 0.5), env_kw.get("decision_slot", 1.0))
    sim = LinkSimulator(cfg.profile(), trace, clock, beta_tcp=env_kw.get("beta_tcp", 0.8),
                        substeps=env_kw.get("substeps", 5), trace_offset=offset)
    return sim.advance(bursts, horizon)


def _window_len(cfg):
    return cfg.env_kwargs().get("window_len", 10)


def benign_corpus(cfg: ExperimentConfig, trace, offsets):
    c = cfg.corpus
    out = []
    for off in offsets:
        for j in range(c["benign_runs"]):
            s = _simulate(cfg, trace, [], off + j * c["run_seconds"], c["run_seconds"])
            out += label_windows(s, [], _window_len(cfg), stride=c["benign_stride"])
    return out


def ldos_corpus(cfg: ExperimentConfig, trace, offsets, include_benign=True):
    """Windows from every LDoS schedule in the grid, plus benign runs."""
    c = cfg.corpus
    out = benign_corpus(cfg, trace, offsets) if include_benign else []
    for off in offsets:
        start = off + c["benign_runs"] * c["run_seconds"]
        for sch in cfg.schedules():
            bursts = ldos_bursts(sch, c["run_seconds"])
            s = _simulate(cfg, trace, bursts, start, c["run_seconds"])
            out += label_windows(s, bursts, _window_len(cfg), stride=c["attack_stride"])
    return out


def record_bursts(records) -> list[AttackBurst]:
    return [AttackBurst(r.t, r.action.a_dur, r.action.a_rate) for r in records if r.action.a_dec]


def adados_corpus(cfg: ExperimentConfig, agent: Attacker, trace, seeds, offsets=(), observe="full"):
    """Windows from episodes played by a trained agent, plus benign runs at ``offsets``."""
    out = benign_corpus(cfg, trace, offsets) if offsets else []
    env = make_env(cfg, None, trace=trace)
    for s in seeds:
        rng = np.random.default_rng([s, 17])
        records, _ = run_episode(env, agent, rng, observe=observe, seed=s)
        samples = env.samples  # includes warm-up so early windows are complete
        out += label_windows(samples, record_bursts(records), _window_len(cfg), stride=cfg.corpus["attack_stride"])
    return out


def build_detector(cfg: ExperimentConfig, source: str | None = None, agent: Attacker | None = None,
                   seed: int = 0):
    """Train a detector on ``source`` data; returns ``(model, held-out report, training examples)``.

    ``adados`` and ``mixed`` need a trained attacker to generate attack traffic.
    """
    source = source or cfg.detector["source"]
    if source not in SOURCES:
        raise ValueError(f"unknown detector source {source!r}")
    if source != "ldos" and agent is None:
        raise ValueError(f"a trained attacker checkpoint is required for a {source!r} detector")
    trace = cfg.build_trace()
    c = cfg.corpus
    n_ep = c["adados_episodes"]
    train_ex, test_ex = [], []
    if source in ("ldos", "mixed"):
        train_ex += ldos_corpus(cfg, trace, c["train_offsets"])
        test_ex += ldos_corpus(cfg, trace, c["test_offsets"])
    if source in ("adados", "mixed"):
        base = 50_000 + 1000 * seed
        train_ex += adados_corpus(cfg, agent, trace, range(base, base + n_ep),
                                  c["train_offsets"] if source == "adados" else ())
        test_ex += adados_corpus(cfg, agent, trace, range(base + n_ep, base + 2 * n_ep),
                                 c["test_offsets"] if source == "adados" else ())
    model = train(train_ex, cfg.detector["kind"], cfg.detector.get("hyperparams") or {}, seed=seed)
    return model, evaluate(model, test_ex), train_ex


# --- LDoS baselines -----------------------------------------------------------

def run_schedule(cfg: ExperimentConfig, schedule: LdosSchedule, detector: DetectorModel, seed: int,
                 trace: BackgroundTrace | None = None) -> dict:
    """One episode of a periodic attacker at the trace position an agent
    episode seeded ``seed`` would use.

    Each burst is one attack; it succeeds when the detector, run on the
    window ending at the first controller tick ``delay_d`` after the burst
    starts, does not fire.
    """
    trace = trace or cfg.build_trace()
    env = make_env(cfg, detector, seed, trace=trace)  # for defaults only
    ci = env.controller_interval
    horizon = env.episode_slots * env.decision_slot
    offset = episode_offset(trace, ci, seed)
    bursts = ldos_bursts(schedule, horizon)
    tail = math.ceil(env.delay_d / ci) * ci
    sim = LinkSimulator(env.profile, trace, SimClock(-env.warmup, ci, env.decision_slot),
                        beta_tcp=env.beta_tcp, substeps=env.substeps, trace_offset=offset + env.warmup)
    samples = sim.advance(bursts, env.warmup + horizon + tail)
    ts = np.array([s.t for s in samples])
    undetected = 0
    for b in bursts:
        i = int(np.searchsorted(ts, b.start + env.delay_d - 1e-9))
        undetected += 1 - detector.predict(featurize(samples[: i + 1], env.window_len))
    in_ep = [s.b for s in samples if 0 < s.t <= horizon + 1e-9]
    if schedule.variant == "randomised":
        cycles = len(bursts)
        fired = cycles
    else:
        cycles = math.ceil(horizon / schedule.period - 1e-9)
        fired = len({math.floor(b.start / schedule.period + 1e-9) for b in bursts})
    return {
        "asr": undetected / len(bursts) if bursts else 1.0,
        "bandwidth": float(np.mean(in_ep)),
        "cost": float(sum(b.volume for b in bursts)),
        "trigger_rate": fired / cycles if cycles else 0.0,
        "n_attacks": len(bursts),
    }


BASELINE_COLUMNS = ("row", "variant", "duration", "period", "rate", "asr", "asr_std", "bandwidth",
                    "bandwidth_std", "cost_per_cycle", "trigger_rate")


def baseline_table(cfg: ExperimentConfig, detector: DetectorModel, seeds=None, episodes=None) -> list[dict]:
    """Per-schedule mean metrics over ``episodes`` episodes for each seed."""
    seeds = cfg.seeds if seeds is None else seeds
    episodes = cfg.eval_episodes if episodes is None else episodes
    trace = cfg.build_trace()
    rows = []
    for i, sch in enumerate(cfg.schedules(), start=1):
        res = [run_schedule(cfg, sch, detector, eval_seed(s, e), trace) for s in seeds for e in range(episodes)]
        asr = [r["asr"] for r in res]
        bw = [r["bandwidth"] for r in res]
        rows.append({"row": i, "variant": sch.variant, "duration": sch.duration, "period": sch.period,
                     "rate": sch.rate, "asr": float(np.mean(asr)), "asr_std": float(np.std(asr)),
                     "bandwidth": float(np.mean(bw)), "bandwidth_std": float(np.std(bw)),
                     "cost_per_cycle": ldos_cycle_cost(sch),
                     "trigger_rate": float(np.mean([r["trigger_rate"] for r in res]))})
    return rows


def eval_seed(seed: int, episode: int) -> int:
    """Episode seeds used for evaluation; disjoint from training seeds."""
    return 900_000_000 + seed * 10_000 + episode


# --- agents -----------------------------------------------------------------

def train_teacher(cfg: ExperimentConfig, detector, seed: int, episodes: int | None = None, on_episode=None):
    episodes = cfg.teacher_episodes if episodes is None else episodes
    env = make_env(cfg, detector, seed)
    agent = new_attacker(cfg, env, seed)
    curves = train_attacker(env, agent, cfg.ppo_config(), episodes, seed=seed, on_episode=on_episode)
    return agent, curves


def evaluate_agent(cfg: ExperimentConfig, agent: Attacker, detector, seed: int, episodes: int | None = None,
                   observe: str = "full", noise_sigma: float = 0.0, trace=None) -> list[dict]:
    """Per-episode metrics of a frozen agent (stochastic policy, fixed seeds)."""
    episodes = cfg.eval_episodes if episodes is None else episodes
    env = make_env(cfg, detector, seed, noise_sigma, trace=trace)
    rng = np.random.default_rng([seed, 23])
    rows = []
    for e in range(episodes):
        records, samples = run_episode(env, agent, rng, observe=observe, seed=eval_seed(seed, e))
        m = metrics(records, samples)
        rows.append({"episode": e, "asr": m.asr, "bandwidth": m.avg_bandwidth, "cost": m.attack_cost,
                     "trigger_rate": m.trigger_rate, "avg_duration": m.avg_duration, "avg_rate": m.avg_rate})
    return rows


def run_reciprocal(cfg: ExperimentConfig, teacher: Attacker, detector, seed: int, episodes: int | None = None,
                   on_episode=None):
    """Reciprocal training of a fresh student alongside ``teacher`` (updated in place)."""
    episodes = cfg.student_episodes if episodes is None else episodes
    trace = cfg.build_trace()
    env_s = make_env(cfg, detector, seed, trace=trace)
    env_t = make_env(cfg, detector, seed, trace=trace)
    student = new_attacker(cfg, env_s, seed + 1, observe="partial")
    pair = PolicyPair(teacher, student)
    s_curves, t_curves = train_student(pair, env_s, env_t, cfg.reciprocal_params(), episodes, seed=seed,
                                       ppo=cfg.ppo_config(), on_episode=on_episode)
    return student, s_curves, t_curves


def detector_matrix(cfg: ExperimentConfig, adados_agent: Attacker, seed: int, episodes: int | None = None):
    """Train one fresh attacker against each of the ldos, adados and mixed
    detectors; returns ``(curve rows with a 'detector' column, reports)``."""
    episodes = cfg.matrix_episodes if episodes is None else episodes
    rows, reports = [], {}
    for source in SOURCES:
        model, report, _ = build_detector(cfg, source, adados_agent, seed)
        reports[source] = report
        _, curves = train_teacher(cfg, model, seed, episodes)
        rows += [{"detector": source, **r} for r in curves]
    return rows, reports


def noise_sweep(cfg: ExperimentConfig, agent: Attacker, detector, seed: int, observe: str = "full",
                sigmas=None, episodes: int | None = None) -> list[dict]:
    """The same frozen agent evaluated under each delay-noise level."""
    sigmas = cfg.sigmas() if sigmas is None else sigmas
    trace = cfg.build_trace()
    rows = []
    for sigma in sigmas:
        for r in evaluate_agent(cfg, agent, detector, seed, episodes, observe, sigma, trace):
            rows.append({"sigma": sigma, **r})
    return rows


# --- output -------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def write_rows(rows, path, columns) -> None:
    """Write dict rows as CSV with a fixed column order (LF line endings)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def summarize(rows, key="asr") -> tuple[float, float]:
    v = np.array([float(r[key]) for r in rows])
    return float(v.mean()), float(v.std())


def tool_version() -> str:
    return f"dosgame {__version__}"
