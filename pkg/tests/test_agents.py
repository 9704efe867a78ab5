import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dosgame.agents import (ActSample, Attacker, Critic, DeciderPolicy, LdosSchedule, PpoConfig, PpoTrainer,
                            Rollout, ShaperPolicy, act, gae, ldos_actions, ldos_bursts, ldos_cycle_cost, ldos_grid,
                            load_checkpoint, save_checkpoint, update_decoupled)
from dosgame.env import IDLE, AttackAction
from dosgame.nn import MlpNet


def central_diff(f, params, h=1e-5):
    g = np.zeros_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + h
        up = f()
        params[i] = old - h
        down = f()
        params[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    # relative error on the vector, tolerant of coordinates that are ~0
    err = np.abs(analytic - numeric)
    assert np.all(err <= atol + rtol * np.maximum(np.abs(numeric), np.abs(analytic))), err.max()


def test_forward_zero_weights_gives_half():
    d = DeciderPolicy(4, (8,), seed=0)
    d.net.params[:] = 0
    assert d.prob(np.ones(4)) == 0.5


def test_forward_hand_computed_affine():
    net = MlpNet([2, 2])
    net.W[0][...] = [[1.0, 2.0], [3.0, 4.0]]
    net.b[0][...] = [0.5, -0.5]
    np.testing.assert_allclose(net.forward(np.array([1.0, -1.0])), [1 - 3 + 0.5, 2 - 4 - 0.5])


def test_forward_batch_equals_items_and_dimension_check():
    net = MlpNet([3, 5, 2], seed=1)
    X = np.random.default_rng(0).normal(size=(6, 3))
    np.testing.assert_allclose(net.forward(X), np.array([net.forward(x) for x in X]))
    with pytest.raises(ValueError):
        net.forward(np.ones(4))


def test_backward_linearity_and_zero_upstream():
    net = MlpNet([3, 4, 2], seed=2)
    X = np.random.default_rng(1).normal(size=(5, 3))
    G = np.random.default_rng(2).normal(size=(5, 2))
    net.forward(X)
    total = net.backward(G)
    parts = []
    for x, g in zip(X, G):
        net.forward(x[None])
        parts.append(net.backward(g[None]))
    np.testing.assert_allclose(total, np.sum(parts, axis=0), atol=1e-12)
    net.forward(X)
    assert not np.any(net.backward(np.zeros((5, 2))))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    for trial in range(5):
        net = MlpNet([3, 6, 5, 2], seed=trial)
        x = rng.normal(size=(4, 3))
        up = rng.normal(size=(4, 2))
        net.forward(x)
        analytic = net.backward(up)
        numeric = central_diff(lambda: float(np.sum(net.forward(x) * up)), net.params)
        assert_grad_close(analytic, numeric)


def _heads(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    dec = DeciderPolicy(4, (6,), seed=seed)
    dec.net.params[:] = rng.normal(scale=0.5, size=dec.net.n_params)
    sh = ShaperPolicy(4, 30.0, 1.0, (6,), seed=seed)
    sh.net.params[:] = rng.normal(scale=0.3, size=sh.net.n_params)
    cr = Critic(4, (6,), seed=seed)
    cr.net.params[:] = rng.normal(scale=0.5, size=cr.net.n_params)
    return rng, x, dec, sh, cr


@pytest.mark.parametrize("seed", range(50))
def test_head_gradients_match_finite_differences(seed):
    rng, x, dec, sh, cr = _heads(seed)
    w = rng.normal(size=3)
    a = rng.integers(0, 2, 3)
    assert_grad_close(dec.grad_log_prob(x, a, w),
                      central_diff(lambda: float(np.sum(w * dec.log_prob(x, a))), dec.net.params))
    u = rng.normal(size=(3, 2))
    assert_grad_close(sh.grad_log_prob(x, u, w),
                      central_diff(lambda: float(np.sum(w * sh.log_prob(x, u))), sh.net.params))
    assert_grad_close(cr.grad_value(x, w), central_diff(lambda: float(np.sum(w * cr.value(x))), cr.net.params))


def test_squashed_gaussian_density_integrates_to_one():
    sh = ShaperPolicy(2, 30.0, 1.0, (4,), seed=0, init_log_std=0.3)
    sh.net.b[-1][:2] = [0.4, -0.7]
    x = np.zeros(2)
    mean, log_std = sh.dist(x)
    for dim, bound in enumerate(sh.bounds):
        a = np.linspace(0, bound, 200_001)[1:-1]
        u = np.arctanh(2 * a / bound - 1)
        z = (u - mean[dim]) / np.exp(log_std[dim])
        dens = np.exp(-0.5 * z * z) / (np.sqrt(2 * np.pi) * np.exp(log_std[dim])) / (bound / 2 * (1 - np.tanh(u) ** 2))
        assert np.trapezoid(dens, a) == pytest.approx(1.0, abs=1e-3)


def test_joint_log_prob_consistent_with_own_density():
    sh = ShaperPolicy(2, 30.0, 1.0, (4,), seed=0)
    u = np.array([0.3, -0.2])
    mean, log_std = sh.dist(np.zeros(2))
    z = (u - mean) / np.exp(log_std)
    expected = np.sum(-0.5 * z**2 - log_std - 0.5 * np.log(2 * np.pi) - np.log(sh.bounds / 2 * (1 - np.tanh(u) ** 2)))
    assert sh.log_prob(np.zeros(2), u) == pytest.approx(expected, rel=1e-10)


def test_act_limits_and_determinism():
    ag = Attacker(4, 30.0, 1.0, (8,), seed=0)
    x = np.ones(4)
    ag.decider.net.b[-1][...] = 50.0
    s = act(ag.decider, ag.shaper, x, np.random.default_rng(0))
    assert s.action.a_dec == 1 and 0 <= s.action.a_rate <= 30 and 0 <= s.action.a_dur <= 1
    ag.decider.net.b[-1][...] = -50.0

    class NoSample:
        def sample(self, *a):
            raise AssertionError("shaper must not be sampled when idle")

    s = act(ag.decider, NoSample(), x, np.random.default_rng(0))
    assert s.action == IDLE and s.logp_shape is None
    ag.decider.net.b[-1][...] = 0.0
    seq = [act(ag.decider, ag.shaper, x, r).action for r in [np.random.default_rng(5)] * 10]
    again = [act(ag.decider, ag.shaper, x, r).action for r in [np.random.default_rng(5)] * 10]
    assert seq == again


def _brute_gae(r, v, last, gamma, lam):
    T = len(r)
    deltas = [r[t] + gamma * (v[t + 1] if t + 1 < T else last) - v[t] for t in range(T)]
    return [sum((gamma * lam) ** (k - t) * deltas[k] for k in range(t, T)) for t in range(T)]


def test_gae_oracle_all_short_trajectories():
    rng = np.random.default_rng(0)
    for T in range(1, 6):
        for lam in (0.0, 0.5, 1.0):
            for _ in range(20):
                r, v, last = rng.normal(size=T), rng.normal(size=T), float(rng.normal())
                adv, ret = gae(r, v, 0.95, lam, last)
                np.testing.assert_allclose(adv, _brute_gae(r, v, last, 0.95, lam), atol=1e-10)
                np.testing.assert_allclose(ret, adv + v, atol=1e-12)


def test_gae_examples():
    assert gae([1.0], [0.0], 0.95, 0.95)[0][0] == 1.0
    r, v = np.array([1.0, 2.0, 3.0]), np.array([0.5, -0.2, 0.1])
    mc = [1 + 0.95 * 2 + 0.95**2 * 3, 2 + 0.95 * 3, 3.0]
    np.testing.assert_allclose(gae(r, v, 0.95, 1.0)[0], np.array(mc) - v, atol=1e-12)
    td = r + 0.95 * np.append(v[1:], 0.0) - v
    np.testing.assert_allclose(gae(r, v, 0.95, 0.0)[0], td, atol=1e-12)


def _rollout(agent, n, rng, attack=True):
    ro = Rollout()
    for i in range(n):
        x = rng.normal(size=agent.in_dim)
        s = agent.act(x, rng) if attack else ActSample(IDLE, math.log(0.5), None, None)
        ro.add(x, s, episode=i // 10)
        ro.rewards[-1] = float(rng.normal(10, 30))
    return ro


def test_update_decoupled_diagnostics():
    agent = Attacker(5, 30.0, 1.0, (16,), seed=0)
    trainer = PpoTrainer(agent, PpoConfig(minibatch=8))
    diag = trainer.update(_rollout(agent, 40, np.random.default_rng(0)))
    assert diag["first_epoch_max_ratio_dev"] < 1e-12
    assert diag["clipped_le_unclipped"]
    assert diag["shaper_updated"]


def test_zero_attack_rollout_leaves_shaper_unchanged():
    agent = Attacker(5, 30.0, 1.0, (16,), seed=0)
    before = agent.shaper.net.params.copy()
    dec_before = agent.decider.net.params.copy()
    diag = PpoTrainer(agent).update(_rollout(agent, 30, np.random.default_rng(1), attack=False))
    assert not diag["shaper_updated"]
    np.testing.assert_array_equal(agent.shaper.net.params, before)
    assert not np.array_equal(agent.decider.net.params, dec_before)


def test_idle_steps_contribute_no_shaper_gradient():
    agent = Attacker(5, 30.0, 1.0, (16,), seed=0)
    rng = np.random.default_rng(2)
    ro = _rollout(agent, 30, rng)
    # attach large rewards to idle steps only: the shaper's subsequence must not see them
    ro2 = Rollout(**{k: list(v) for k, v in ro.__dict__.items()})
    for i, a in enumerate(ro2.a_dec):
        if not a:
            ro2.rewards[i] += 1e4
    cfg = PpoConfig(epochs=1, minibatch=64, ent_coef=0.0)
    a1, a2 = Attacker(5, 30.0, 1.0, (16,), seed=0), Attacker(5, 30.0, 1.0, (16,), seed=0)
    update_decoupled(ro, a1, cfg, PpoTrainer(a1, cfg).opt, np.random.default_rng(0))
    update_decoupled(ro2, a2, cfg, PpoTrainer(a2, cfg).opt, np.random.default_rng(0))
    np.testing.assert_allclose(a1.shaper.net.params, a2.shaper.net.params, atol=1e-12)


def test_ldos_examples():
    s = LdosSchedule(0.15, 1.0, 15.0)
    assert ldos_actions(s, 0.0) == AttackAction(1, 15.0, 0.15)
    assert ldos_actions(s, 0.5) == IDLE
    assert ldos_cycle_cost(s) == pytest.approx(2.25)
    assert ldos_cycle_cost(LdosSchedule(0.15, 1.0, 15.0, "double")) == pytest.approx(4.5)
    with pytest.raises(ValueError):
        LdosSchedule(2.0, 1.0, 10.0)


@given(st.sampled_from(ldos_grid()), st.floats(0, 50))
def test_ldos_exactly_periodic(s, t):
    t = round(t / 0.05) * 0.05
    assert ldos_actions(s, t) == ldos_actions(s, t + s.period)


@pytest.mark.parametrize("variant", ["single", "double"])
def test_ldos_one_cycle_per_period(variant):
    for s in ldos_grid(variant):
        bursts = ldos_bursts(s, 100.0)
        cycles = {math.floor(b.start / s.period + 1e-9) for b in bursts}
        assert len(cycles) == math.ceil(100.0 / s.period - 1e-9)
        per = 2 if variant == "double" else 1
        assert len(bursts) == per * len(cycles)


def test_randomised_ldos_draws_from_choice_sets():
    s = LdosSchedule(0.1, 1.0, 15.0, "randomised", seed=4)
    bursts = ldos_bursts(s, 60.0)
    assert {b.duration for b in bursts} <= set(s.durations)
    assert {b.rate for b in bursts} <= set(s.rates)
    assert bursts == ldos_bursts(s, 60.0)


def test_checkpoint_round_trip(tmp_path):
    agent = Attacker(7, 30.0, 1.0, (8, 8), seed=3)
    p = tmp_path / "a.npz"
    save_checkpoint(agent, p, {"role": "test"})
    back, meta = load_checkpoint(p)
    assert meta["config"] == {"role": "test"} and len(meta["config_hash"]) == 16
    for k, net in agent.nets().items():
        np.testing.assert_array_equal(back.nets()[k].params, net.params)
