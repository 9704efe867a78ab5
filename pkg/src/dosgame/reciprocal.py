"""Teacher-student reciprocal learning.

A full-state teacher and a delay-only student play paired copies of the
same environment.  Each slot the lower-earning agent has its reward pulled
toward the other via a KL-weighted term and the teacher's environment is
reset to the student's so the pair keeps seeing the same network.  The
rectified rewards drive either PPO updates (the default) or a one-step
actor-critic update after every slot.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .agents import ActSample, Attacker, PpoConfig, PpoTrainer, Rollout, curve_row
from .env import AttackEnv, episode_samples
from .nn import clip_by_norm

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReciprocalParams:
    lambda_s: float = 0.2  # student transfer rate
    lambda_t: float = 0.1  # teacher transfer rate
    k: float = 0.9  # teacher reward scale
    alpha_s: float = 1e-3  # critic learning rates
    alpha_t: float = 1e-3
    beta_s: float = 1e-3  # actor learning rates
    beta_t: float = 1e-4
    gamma: float = 0.95
    kl_half_life: float = 10.0  # slots
    reward_scale: float = 0.01
    max_grad_norm: float = 1.0
    # "ppo": clipped PPO on rectified rewards; "ac": one actor-critic step per slot
    mode: str = "ppo"

    def __post_init__(self):
        if not 0 <= self.k <= 1:
            raise ValueError("k must lie in [0, 1]")
        for name in ("lambda_s", "lambda_t", "alpha_s", "alpha_t", "beta_s", "beta_t"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.kl_half_life <= 0:
            raise ValueError("kl_half_life must be positive")
        if self.mode not in ("ac", "ppo"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def kl_decay(self) -> float:
        return 0.5 ** (1.0 / self.kl_half_life)


@dataclass
class PolicyPair:
    teacher: Attacker  # full state
    student: Attacker  # last n' delays

    def check_dims(self, env: AttackEnv) -> None:
        if self.teacher.in_dim != env.state_dim:
            raise ValueError(f"teacher expects {self.teacher.in_dim} inputs, environment state has {env.state_dim}")
        if self.student.in_dim != env.n_partial:
            raise ValueError(f"student expects {self.student.in_dim} inputs, environment observation has {env.n_partial}")


@dataclass
class PairedStep:
    slot: int
    x_t: np.ndarray  # encoded teacher state
    a_t: ActSample
    r_t: float
    x_s: np.ndarray  # encoded student observation
    a_s: ActSample
    r_s: float
    kl_st: float  # smoothed KL(student || teacher)
    kl_ts: float  # smoothed KL(teacher || student)
    r_s_rec: float
    r_t_rec: float
    x_t_next: np.ndarray
    x_s_next: np.ndarray
    done: bool


def kl_policy(p, q, samples) -> float:
    """Sampled KL(p || q) = mean of log p(a|o) - log q(a|o), clamped at 0.

    ``p`` and ``q`` are callables ``(obs, action) -> log-probability``;
    ``samples`` are ``(obs, action)`` pairs drawn from ``p``.
    """
    total, n = 0.0, 0
    for o, a in samples:
        lp, lq = float(p(o, a)), float(q(o, a))
        if not (math.isfinite(lp) and math.isfinite(lq)):
            raise ValueError("non-finite log-probability in KL estimate")
        total += lp - lq
        n += 1
    if n == 0:
        raise ValueError("need at least one sample")
    return max(0.0, total / n)


def rectify(r_s: float, r_t: float, r_d: float, r_d_rev: float, params: ReciprocalParams):
    """Rectified (student, teacher) rewards.

    When the teacher earns at least as much, the student is penalised in
    proportion to how far its policy is from the teacher's; otherwise the
    student gets a bonus and the teacher is penalised by its distance from
    the student.
    """
    if r_t >= r_s:
        return r_s - params.lambda_s * (r_t - r_s) * r_d, params.k * r_t
    gap = r_s - r_t
    return r_s + params.lambda_s * gap, params.k * r_t - params.lambda_t * gap * r_d_rev


def student_view(x_t: np.ndarray, n_prime: int) -> np.ndarray:
    """The student's input carved out of an encoded teacher state: its last ``n'`` delays."""
    return np.asarray(x_t, dtype=float)[-n_prime:]


def _log_ratio(p: Attacker, xp, q: Attacker, xq, sample: ActSample) -> float:
    return p.log_prob(xp, sample) - q.log_prob(xq, sample)


class KlTracker:
    """Exponential moving average of one-sample KL estimates, clamped at 0."""

    def __init__(self, decay: float):
        self.decay = decay
        self.value = None

    def update(self, x: float) -> float:
        self.value = x if self.value is None else self.decay * self.value + (1 - self.decay) * x
        return max(0.0, self.value)


def _grad_log_pi(agent: Attacker, x, sample: ActSample):
    x = np.atleast_2d(x)
    g_dec = agent.decider.grad_log_prob(x, [sample.action.a_dec], [1.0])
    g_shape = None
    if sample.action.a_dec:
        g_shape = agent.shaper.grad_log_prob(x, np.atleast_2d(sample.raw), [1.0])
    return g_dec, g_shape


def _ac_update(agent: Attacker, x, sample, x_next, r, done, alpha, beta, params: ReciprocalParams) -> float:
    v = float(agent.critic.value(x))
    v_next = 0.0 if done else float(agent.critic.value(x_next))
    delta = params.reward_scale * r + params.gamma * v_next - v
    if delta == 0.0:
        return delta
    # critic moves toward the TD target: omega += alpha * delta * grad V
    gv = agent.critic.grad_value(x, [1.0])
    agent.critic.net.params += alpha * clip_by_norm(delta * gv, params.max_grad_norm)
    g_dec, g_shape = _grad_log_pi(agent, x, sample)
    agent.decider.net.params += beta * clip_by_norm(delta * g_dec, params.max_grad_norm)
    if g_shape is not None:
        agent.shaper.net.params += beta * clip_by_norm(delta * g_shape, params.max_grad_norm)
    return delta


def reciprocal_update(step: PairedStep, pair: PolicyPair, params: ReciprocalParams) -> tuple[float, float]:
    """One actor-critic step for each agent on its rectified reward; returns the TD errors."""
    d_s = _ac_update(pair.student, step.x_s, step.a_s, step.x_s_next, step.r_s_rec, step.done,
                     params.alpha_s, params.beta_s, params)
    d_t = _ac_update(pair.teacher, step.x_t, step.a_t, step.x_t_next, step.r_t_rec, step.done,
                     params.alpha_t, params.beta_t, params)
    return d_s, d_t


def paired_step(pair: PolicyPair, env_s: AttackEnv, env_t: AttackEnv, params: ReciprocalParams, rng,
                kl_st: KlTracker | None = None, kl_ts: KlTracker | None = None,
                teacher_log: tuple[list, list] | None = None) -> PairedStep:
    """Both agents act on the shared network state; returns raw and rectified rewards."""
    if abs(env_s.now - env_t.now) > 1e-9 or env_s.slot != env_t.slot:
        raise RuntimeError(f"environments out of sync: t={env_s.now} vs {env_t.now}")
    kl_st = kl_st or KlTracker(params.kl_decay)
    kl_ts = kl_ts or KlTracker(params.kl_decay)
    n_prime = env_s.n_partial
    x_s = env_s.encode_observation(env_s.observation)
    x_t = env_t.encode_state(env_t.state)
    x_proj = student_view(x_t, n_prime)
    a_s = pair.student.act(x_s, rng)
    a_t = pair.teacher.act(x_t, rng)
    d_st = kl_st.update(_log_ratio(pair.student, x_proj, pair.teacher, x_t, a_s))
    d_ts = kl_ts.update(_log_ratio(pair.teacher, x_t, pair.student, x_proj, a_t))
    slot = env_s.slot
    res_s = env_s.step(a_s.action)
    n_before = len(env_t.samples)
    res_t = env_t.step(a_t.action)
    r_s = float(sum(r.reward for r in res_s.released))
    r_t = float(sum(r.reward for r in res_t.released))
    if teacher_log is not None:
        teacher_log[0].extend(res_t.released)
        teacher_log[1].extend(env_t.samples[n_before:])
    r_s_rec, r_t_rec = rectify(r_s, r_t, d_st, d_ts, params)
    x_s_next = env_s.encode_observation(res_s.observation)
    x_t_next = env_t.encode_state(res_t.state)
    return PairedStep(slot, x_t, a_t, r_t, x_s, a_s, r_s, d_st, d_ts, r_s_rec, r_t_rec,
                      x_t_next, x_s_next, res_s.done)


def run_paired_episode(pair: PolicyPair, env_s: AttackEnv, env_t: AttackEnv, params: ReciprocalParams, rng,
                       seed=None, update=True, rollouts: tuple[Rollout, Rollout] | None = None, episode_id=0):
    """Play one paired episode.

    In ``ac`` mode (``update=True``) both agents learn after every slot.  When
    ``rollouts`` is given, rectified rewards are stored for a later PPO update
    instead.  Returns ``(steps, student records, student samples, teacher
    records, teacher samples)``.
    """
    pair.check_dims(env_s)
    env_s.reset(seed)
    env_t.sync_from(env_s)
    kl_st, kl_ts = KlTracker(params.kl_decay), KlTracker(params.kl_decay)
    t_log = ([], [])
    steps = []
    while not env_s.done:
        st = paired_step(pair, env_s, env_t, params, rng, kl_st, kl_ts, t_log)
        steps.append(st)
        if rollouts is not None:
            ro_s, ro_t = rollouts
            ro_s.add(st.x_s, st.a_s, episode_id)
            ro_s.rewards[-1] = st.r_s_rec
            ro_t.add(st.x_t, st.a_t, episode_id)
            ro_t.rewards[-1] = st.r_t_rec
        elif update:
            reciprocal_update(st, pair, params)
        # the teacher restarts each slot from the student's network
        env_t.sync_from(env_s)
    return steps, env_s.records, episode_samples(env_s), t_log[0], [s for s in t_log[1] if s.t > 0]


def train_student(pair: PolicyPair, env_s: AttackEnv, env_t: AttackEnv, params: ReciprocalParams,
                  episodes: int, seed=0, ppo: PpoConfig | None = None, on_episode=None):
    """Reciprocal training; returns ``(student curves, teacher curves)``, one row per episode."""
    pair.check_dims(env_s)
    rng = np.random.default_rng([seed, 13])
    s_curves, t_curves = [], []
    trainers = None
    ro = None
    if params.mode == "ppo":
        ppo = ppo or PpoConfig()
        trainers = (PpoTrainer(pair.student, ppo, seed), PpoTrainer(pair.teacher, ppo, seed + 1))
        ro = (Rollout(), Rollout())
    for ep in range(episodes):
        _, s_rec, s_smp, t_rec, t_smp = run_paired_episode(
            pair, env_s, env_t, params, rng, seed=seed * 1_000_003 + ep, rollouts=ro, episode_id=ep)
        s_row, t_row = curve_row(ep, s_rec, s_smp), curve_row(ep, t_rec, t_smp)
        s_curves.append(s_row)
        t_curves.append(t_row)
        if on_episode:
            on_episode(s_row, t_row)
        if trainers and ((ep + 1) % ppo.episodes_per_update == 0 or ep == episodes - 1):
            trainers[0].update(ro[0])
            trainers[1].update(ro[1])
            ro = (Rollout(), Rollout())
    return s_curves, t_curves


def reciprocal_params_dict(params: ReciprocalParams) -> dict:
    return asdict(params)
