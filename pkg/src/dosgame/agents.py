"""Two-stage PPO attacker (decider + shaper + critic) and periodic LDoS baselines."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import IDLE, AttackAction, AttackEnv, episode_samples, metrics
from .netsim import AttackBurst
from .nn import Adam, MlpNet, clip_by_norm

logger = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG2 = math.log(2.0)
_LOG_2PI = math.log(2.0 * math.pi)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


class DeciderPolicy:
    """Bernoulli policy over ``a_dec`` (1 = attack this slot)."""

    def __init__(self, in_dim, hidden=(64, 64), seed=0, init_bias=0.0):
        self.net = MlpNet([in_dim, *hidden, 1], seed=seed, out_scale=0.01)
        self.net.b[-1][...] = init_bias

    def logits(self, x):
        return self.net.forward(x)[..., 0]

    def prob(self, x):
        return _sigmoid(self.logits(x))

    def log_prob(self, x, a):
        l = self.logits(x)
        a = np.asarray(a, dtype=float)
        return -(a * _softplus(-l) + (1 - a) * _softplus(l))

    def grad_log_prob(self, x, a, weights):
        """Gradient of ``sum(weights * log_prob(x, a))``."""
        l = self.logits(np.atleast_2d(x))
        up = (np.asarray(a, dtype=float).reshape(-1) - _sigmoid(l)) * np.asarray(weights, dtype=float).reshape(-1)
        return self.net.backward(up[:, None])

    def entropy(self, x):
        l = self.logits(x)
        p = _sigmoid(l)
        return _softplus(l) - p * l

    def grad_entropy(self, x, weights):
        l = self.logits(np.atleast_2d(x))
        p = _sigmoid(l)
        up = -l * p * (1 - p) * np.asarray(weights, dtype=float).reshape(-1)
        return self.net.backward(up[:, None])


class ShaperPolicy:
    """Squashed Gaussian over ``(a_rate, a_dur)``.

    The network outputs a mean and a log standard deviation per dimension
    for a pre-squash variable ``u``; the action is
    ``bound * (tanh(u) + 1) / 2``.  Log-probabilities include the tanh
    Jacobian and are evaluated from the stored ``u``.
    """

    def __init__(self, in_dim, rate_max, dur_max, hidden=(64, 64), seed=0, init_log_std=-0.5, init_mean=0.0):
        self.net = MlpNet([in_dim, *hidden, 4], seed=seed, out_scale=0.01)
        self.net.b[-1][:2] = init_mean
        self.net.b[-1][2:] = init_log_std
        self.bounds = np.array([rate_max, dur_max], dtype=float)

    def dist(self, x):
        out = self.net.forward(x)
        mean = out[..., :2]
        log_std = np.clip(out[..., 2:], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def squash(self, u):
        return self.bounds * (np.tanh(u) + 1.0) * 0.5

    def unsquash(self, a):
        y = np.clip(2.0 * np.asarray(a, dtype=float) / self.bounds - 1.0, -1 + 1e-12, 1 - 1e-12)
        return np.arctanh(y)

    def _log_jacobian(self, u):
        # log |d a / d u| = log(bound / 2) + log(1 - tanh(u)^2)
        return np.log(self.bounds / 2.0) + 2.0 * (_LOG2 - u - _softplus(-2.0 * u))

    def log_prob(self, x, u):
        mean, log_std = self.dist(x)
        u = np.asarray(u, dtype=float)
        z = (u - mean) * np.exp(-log_std)
        lp = -0.5 * z * z - log_std - 0.5 * _LOG_2PI - self._log_jacobian(u)
        return lp.sum(axis=-1)

    def grad_log_prob(self, x, u, weights):
        x = np.atleast_2d(x)
        out = self.net.forward(x)
        mean, raw = out[:, :2], out[:, 2:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        inv_var = np.exp(-2.0 * log_std)
        d = np.atleast_2d(u) - mean
        w = np.asarray(weights, dtype=float).reshape(-1, 1)
        g_mean = d * inv_var * w
        g_log_std = (d * d * inv_var - 1.0) * w
        g_log_std = np.where((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX), g_log_std, 0.0)
        return self.net.backward(np.hstack([g_mean, g_log_std]))

    def grad_entropy(self, x, weights):
        # entropy of the pre-squash Gaussian: sum(log_std) + const
        x = np.atleast_2d(x)
        out = self.net.forward(x)
        raw = out[:, 2:]
        w = np.asarray(weights, dtype=float).reshape(-1, 1)
        g = np.where((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX), w, 0.0) * np.ones_like(raw)
        return self.net.backward(np.hstack([np.zeros_like(raw), g]))

    def sample(self, x, rng):
        mean, log_std = self.dist(x)
        u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return u, self.squash(u), float(self.log_prob(x, u))


class Critic:
    def __init__(self, in_dim, hidden=(64, 64), seed=0):
        self.net = MlpNet([in_dim, *hidden, 1], seed=seed, out_scale=1.0)

    def value(self, x):
        return self.net.forward(x)[..., 0]

    def grad_value(self, x, weights):
        self.net.forward(np.atleast_2d(x))
        return self.net.backward(np.asarray(weights, dtype=float).reshape(-1, 1))


@dataclass(frozen=True)
class PpoConfig:
    clip_ratio: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.95
    epochs: int = 4
    minibatch: int = 32
    lr: float = 3e-4
    critic_lr: float = 1e-3
    ent_coef: float = 0.01
    max_grad_norm: float = 0.5
    hidden: tuple = (64, 64)
    episodes_per_update: int = 2
    reward_scale: float = 0.01

    def __post_init__(self):
        if not self.clip_ratio > 0:
            raise ValueError("clip_ratio must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")


@dataclass
class ActSample:
    action: AttackAction
    logp_dec: float
    logp_shape: float | None  # None when the shaper was not sampled
    raw: np.ndarray | None = None  # pre-squash shaper sample


class Attacker:
    """Decider, shaper and critic sharing one input encoding."""

    def __init__(self, in_dim, rate_max, dur_max=1.0, hidden=(64, 64), seed=0, init_attack_bias=0.0):
        self.in_dim = in_dim
        self.rate_max = rate_max
        self.dur_max = dur_max
        self.hidden = tuple(hidden)
        self.decider = DeciderPolicy(in_dim, hidden, seed=seed * 3 + 1, init_bias=init_attack_bias)
        self.shaper = ShaperPolicy(in_dim, rate_max, dur_max, hidden, seed=seed * 3 + 2)
        self.critic = Critic(in_dim, hidden, seed=seed * 3 + 3)

    def act(self, x, rng) -> ActSample:
        return act(self.decider, self.shaper, x, rng)

    def log_prob(self, x, sample: ActSample) -> float:
        """Joint log-probability of a two-stage action (decider times shaper)."""
        a = sample.action.a_dec
        lp = float(self.decider.log_prob(x, a))
        if a:
            u = sample.raw if sample.raw is not None else self.shaper.unsquash([sample.action.a_rate, sample.action.a_dur])
            lp += float(self.shaper.log_prob(x, u))
        return lp

    def nets(self):
        return {"decider": self.decider.net, "shaper": self.shaper.net, "critic": self.critic.net}


def act(decider: DeciderPolicy, shaper: ShaperPolicy, x, rng) -> ActSample:
    """Sample the attack decision, then (only when attacking) the burst shape."""
    p = float(decider.prob(x))
    a_dec = int(rng.random() < p)
    logp_dec = math.log(p) if a_dec else math.log1p(-p)
    if not a_dec:
        return ActSample(IDLE, logp_dec, None, None)
    u, (rate, dur), lp = shaper.sample(x, rng)
    return ActSample(AttackAction(1, float(rate), float(dur)), logp_dec, lp, u)


def gae(rewards, values, gamma: float, lam: float, last_value: float = 0.0):
    """Generalised advantage estimates and returns for one trajectory."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape:
        raise ValueError("rewards and values must align")
    adv = np.zeros_like(r)
    acc = 0.0
    next_v = last_value
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * next_v - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        next_v = v[t]
    return adv, adv + v


@dataclass
class Rollout:
    """Per-slot training data, possibly spanning several episodes."""

    x: list = field(default_factory=list)
    a_dec: list = field(default_factory=list)
    raw: list = field(default_factory=list)
    logp_dec: list = field(default_factory=list)
    logp_shape: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    episode: list = field(default_factory=list)

    def add(self, x, sample: ActSample, episode: int):
        self.x.append(np.asarray(x, dtype=float))
        self.a_dec.append(sample.action.a_dec)
        self.raw.append(sample.raw if sample.raw is not None else np.zeros(2))
        self.logp_dec.append(sample.logp_dec)
        self.logp_shape.append(sample.logp_shape if sample.logp_shape is not None else np.nan)
        self.rewards.append(0.0)
        self.episode.append(episode)

    def __len__(self):
        return len(self.x)


def _ppo_weights(ratio, adv, clip):
    """d/d(log pi) of min(ratio A, clip(ratio) A), per sample."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * adv
    use_unclipped = unclipped <= clipped
    return np.where(use_unclipped, ratio * adv, 0.0), np.minimum(unclipped, clipped), unclipped


def _normalise(a):
    return (a - a.mean()) / (a.std() + 1e-8) if a.size > 1 else a


class PpoTrainer:
    """Collects episodes and applies decoupled PPO updates to an :class:`Attacker`."""

    def __init__(self, agent: Attacker, cfg: PpoConfig = PpoConfig(), seed=0):
        self.agent = agent
        self.cfg = cfg
        self.rng = np.random.default_rng([seed, 7])
        self.opt = {
            "decider": Adam(agent.decider.net.n_params, cfg.lr),
            "shaper": Adam(agent.shaper.net.n_params, cfg.lr),
            "critic": Adam(agent.critic.net.n_params, cfg.critic_lr),
        }

    def update(self, ro: Rollout) -> dict:
        return update_decoupled(ro, self.agent, self.cfg, self.opt, self.rng)


def _advantages(ro: Rollout, agent: Attacker, cfg: PpoConfig):
    X = np.array(ro.x)
    r = np.array(ro.rewards) * cfg.reward_scale
    ep = np.array(ro.episode)
    a = np.array(ro.a_dec)
    values = agent.critic.value(X)
    adv = np.zeros(len(r))
    ret = np.zeros(len(r))
    s_idx, s_adv = [], []
    for e in np.unique(ep):
        idx = np.nonzero(ep == e)[0]
        adv[idx], ret[idx] = gae(r[idx], values[idx], cfg.gamma, cfg.gae_lambda)
        att = idx[a[idx] == 1]
        if att.size:
            sa, _ = gae(r[att], values[att], cfg.gamma, cfg.gae_lambda)
            s_idx.append(att)
            s_adv.append(sa)
    s_idx = np.concatenate(s_idx) if s_idx else np.zeros(0, dtype=int)
    s_adv = np.concatenate(s_adv) if s_adv else np.zeros(0)
    return X, adv, ret, s_idx, s_adv


def update_decoupled(ro: Rollout, agent: Attacker, cfg: PpoConfig, opt: dict, rng) -> dict:
    """One PPO update.

    The decider and critic train on every slot with whole-trajectory
    advantages.  The shaper trains only on attack slots, with advantages
    computed over the attack-slot subsequence so idle-slot rewards never
    enter its objective.
    """
    X, adv, ret, s_idx, s_adv = _advantages(ro, agent, cfg)
    a = np.array(ro.a_dec, dtype=float)
    old_dec = np.array(ro.logp_dec)
    raw = np.array(ro.raw)
    old_shape = np.array(ro.logp_shape)
    adv_n = _normalise(adv)
    s_adv_n = _normalise(s_adv)
    diag = {"first_epoch_max_ratio_dev": 0.0, "clip_frac_dec": 0.0, "clip_frac_shape": 0.0,
            "clipped_le_unclipped": True, "shaper_updated": bool(s_idx.size), "value_loss": 0.0,
            "n_steps": len(a), "n_attack_steps": int(s_idx.size)}
    if not s_idx.size:
        logger.debug("no attack slots in rollout; shaper update skipped")
    # before any parameter moves the new policy is the old one
    dev = np.abs(np.exp(agent.decider.log_prob(X, a) - old_dec) - 1)
    if s_idx.size:
        dev = np.concatenate([dev, np.abs(np.exp(agent.shaper.log_prob(X[s_idx], raw[s_idx]) - old_shape[s_idx]) - 1)])
    diag["first_epoch_max_ratio_dev"] = float(dev.max()) if dev.size else 0.0
    T = len(a)
    mb = cfg.minibatch
    n_mb = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(T)
        for start in range(0, T, mb):
            idx = perm[start:start + mb]
            m = len(idx)
            xb = X[idx]
            ratio = np.exp(agent.decider.log_prob(xb, a[idx]) - old_dec[idx])
            w, clipped_obj, unclipped_obj = _ppo_weights(ratio, adv_n[idx], cfg.clip_ratio)
            diag["clipped_le_unclipped"] &= bool(np.all(clipped_obj <= unclipped_obj + 1e-12))
            diag["clip_frac_dec"] += float(np.mean(np.abs(ratio - 1) > cfg.clip_ratio))
            g = agent.decider.grad_log_prob(xb, a[idx], w / m)
            if cfg.ent_coef:
                g += cfg.ent_coef * agent.decider.grad_entropy(xb, np.full(m, 1.0 / m))
            opt["decider"].step(agent.decider.net.params, -clip_by_norm(g, cfg.max_grad_norm))
            v = agent.critic.value(xb)
            diag["value_loss"] += float(0.5 * np.mean((v - ret[idx]) ** 2))
            gc = agent.critic.grad_value(xb, (v - ret[idx]) / m)
            opt["critic"].step(agent.critic.net.params, clip_by_norm(gc, cfg.max_grad_norm))
            n_mb += 1
        if s_idx.size:
            sperm = rng.permutation(s_idx.size)
            for start in range(0, s_idx.size, mb):
                j = sperm[start:start + mb]
                idx = s_idx[j]
                m = len(idx)
                xb = X[idx]
                ratio = np.exp(agent.shaper.log_prob(xb, raw[idx]) - old_shape[idx])
                w, clipped_obj, unclipped_obj = _ppo_weights(ratio, s_adv_n[j], cfg.clip_ratio)
                diag["clipped_le_unclipped"] &= bool(np.all(clipped_obj <= unclipped_obj + 1e-12))
                diag["clip_frac_shape"] += float(np.mean(np.abs(ratio - 1) > cfg.clip_ratio))
                g = agent.shaper.grad_log_prob(xb, raw[idx], w / m)
                if cfg.ent_coef:
                    g += cfg.ent_coef * agent.shaper.grad_entropy(xb, np.full(m, 1.0 / m))
                opt["shaper"].step(agent.shaper.net.params, -clip_by_norm(g, cfg.max_grad_norm))
    if n_mb:
        diag["value_loss"] /= n_mb
        diag["clip_frac_dec"] /= n_mb
    return diag


def run_episode(env: AttackEnv, agent: Attacker, rng, *, observe="full", rollout: Rollout | None = None,
                episode_id=0, seed=None, greedy=False):
    """Play one episode; optionally append training data to ``rollout``."""
    state, obs = env.reset(seed)
    start = len(rollout) if rollout is not None else 0
    while not env.done:
        x = env.encode_state(state) if observe == "full" else env.encode_observation(obs)
        if greedy:
            sample = greedy_act(agent, x)
        else:
            sample = agent.act(x, rng)
        if rollout is not None:
            rollout.add(x, sample, episode_id)
        res = env.step(sample.action)
        if rollout is not None:
            for rec in res.released:
                rollout.rewards[start + rec.slot] += rec.reward
        state, obs = res.state, res.observation
    return env.records, episode_samples(env)


def greedy_act(agent: Attacker, x) -> ActSample:
    p = float(agent.decider.prob(x))
    if p < 0.5:
        return ActSample(IDLE, math.log1p(-p), None, None)
    mean, _ = agent.shaper.dist(x)
    rate, dur = agent.shaper.squash(mean)
    return ActSample(AttackAction(1, float(rate), float(dur)), math.log(p), None, mean)


def curve_row(episode: int, records, samples) -> dict:
    m = metrics(records, samples)
    return {"episode": episode, "asr": m.asr, "bandwidth": m.avg_bandwidth, "cost": m.attack_cost,
            "mean_reward": float(np.mean([r.reward for r in records])) if records else 0.0,
            "trigger_rate": m.trigger_rate}


def train_attacker(env: AttackEnv, agent: Attacker, cfg: PpoConfig, episodes: int, seed=0, observe="full",
                   trainer: PpoTrainer | None = None, on_episode=None) -> list[dict]:
    """PPO training; returns one curve row per episode."""
    trainer = trainer or PpoTrainer(agent, cfg, seed)
    rng = np.random.default_rng([seed, 11])
    curves = []
    ro = Rollout()
    for ep in range(episodes):
        records, samples = run_episode(env, agent, rng, observe=observe, rollout=ro, episode_id=ep,
                                       seed=seed * 1_000_003 + ep)
        row = curve_row(ep, records, samples)
        curves.append(row)
        if on_episode:
            on_episode(row)
        if (ep + 1) % cfg.episodes_per_update == 0 or ep == episodes - 1:
            trainer.update(ro)
            ro = Rollout()
    return curves


# --- periodic LDoS baselines ----------------------------------------------

@dataclass(frozen=True)
class LdosSchedule:
    duration: float
    period: float
    rate: float
    variant: str = "single"  # single | double | randomised
    durations: tuple = (0.1, 0.15, 0.2)
    periods: tuple = (1.0, 1.5, 2.0)
    rates: tuple = (15.0, 20.0, 25.0, 30.0)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("single", "double", "randomised"):
            raise ValueError(f"unknown LDoS variant {self.variant!r}")
        if self.rate < 0 or self.duration < 0 or self.period <= 0:
            raise ValueError("rate, duration must be >= 0 and period > 0")
        if self.duration > self.period:
            raise ValueError("duration must not exceed period")
        if self.variant == "double" and self.duration > self.period / 2:
            raise ValueError("double LDoS needs duration <= period / 2")


# Table of single-train schedules (duration s, period s, rate Mbps)
LDOS_GRID = (
    (0.15, 1.0, 15.0), (0.15, 1.5, 15.0), (0.20, 1.5, 15.0),
    (0.15, 1.0, 20.0), (0.15, 1.5, 20.0), (0.20, 1.5, 20.0),
    (0.15, 2.0, 25.0), (0.15, 2.0, 30.0), (0.10, 2.0, 30.0),
)
DOUBLE_LDOS_GRID = (
    (0.15, 1.0, 15.0), (0.15, 1.5, 20.0), (0.20, 1.5, 20.0),
    (0.15, 1.0, 20.0), (0.15, 1.5, 15.0), (0.20, 1.5, 15.0),
    (0.20, 1.5, 25.0), (0.15, 2.0, 30.0), (0.10, 2.0, 30.0),
)


def ldos_grid(variant="single", scale: float = 1.0):
    grid = LDOS_GRID if variant == "single" else DOUBLE_LDOS_GRID
    return [LdosSchedule(d, p, r * scale, variant) for d, p, r in grid]


def ldos_bursts(schedule: LdosSchedule, horizon: float, start: float = 0.0):
    """All bursts of ``schedule`` starting in ``[start, start + horizon)``."""
    out = []
    if schedule.variant == "randomised":
        rng = np.random.default_rng([schedule.seed, 3])
        t = 0.0
        while t < start + horizon - 1e-9:
            d = float(rng.choice(schedule.durations))
            p = float(rng.choice(schedule.periods))
            r = float(rng.choice(schedule.rates))
            if t >= start - 1e-9:
                out.append(AttackBurst(t, min(d, p), r))
            t += p
        return out
    offsets = (0.0,) if schedule.variant == "single" else (0.0, schedule.period / 2)
    k0 = math.floor(start / schedule.period + 1e-9)
    k = k0
    while k * schedule.period < start + horizon - 1e-9:
        for off in offsets:
            t = k * schedule.period + off
            if start - 1e-9 <= t < start + horizon - 1e-9:
                out.append(AttackBurst(t, schedule.duration, schedule.rate))
        k += 1
    return out


def ldos_actions(schedule: LdosSchedule, t: float) -> AttackAction:
    """The action an LDoS attacker takes at time ``t``: a burst if one starts then, else idle."""
    if t < 0:
        raise ValueError("t must be non-negative")
    for b in ldos_bursts(schedule, 1e-6, start=t):
        if abs(b.start - t) < 1e-6:
            return AttackAction(1, b.rate, b.duration)
    return IDLE


def ldos_cycle_cost(schedule: LdosSchedule) -> float:
    """Mbit sent per attack period."""
    per = schedule.duration * schedule.rate
    return 2 * per if schedule.variant == "double" else per


# --- checkpoints ------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(agent: Attacker, path, config: dict | None = None) -> None:
    meta = {"in_dim": agent.in_dim, "rate_max": agent.rate_max, "dur_max": agent.dur_max,
            "hidden": list(agent.hidden), "config": config or {}, "config_hash": config_hash(config or {})}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, decider=agent.decider.net.params, shaper=agent.shaper.net.params,
                 critic=agent.critic.net.params, meta=np.array(json.dumps(meta, sort_keys=True)))


def load_checkpoint(path) -> tuple[Attacker, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        agent = Attacker(meta["in_dim"], meta["rate_max"], meta["dur_max"], tuple(meta["hidden"]))
        agent.decider.net.set_params(z["decider"])
        agent.shaper.net.set_params(z["shaper"])
        agent.critic.net.set_params(z["critic"])
    return agent, meta


def ppo_config_dict(cfg: PpoConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
