import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dosgame.agents import Attacker
from dosgame.env import IDLE, AttackEnv
from dosgame.netsim import BackgroundTrace, LinkProfile
from dosgame.reciprocal import (KlTracker, PairedStep, PolicyPair, ReciprocalParams, kl_policy, paired_step,
                                rectify, reciprocal_update, run_paired_episode, student_view, train_student)


def _norm_logpdf(mu):
    return lambda o, a: -0.5 * (a - mu) ** 2 - 0.5 * np.log(2 * np.pi)


def test_kl_identical_policies_is_zero():
    p = _norm_logpdf(0.0)
    samples = [(None, a) for a in np.random.default_rng(0).normal(size=100)]
    assert kl_policy(p, p, samples) == 0.0


def _gaussian_kl_error(n, seed):
    a = np.random.default_rng(seed).normal(size=n)
    return abs(kl_policy(_norm_logpdf(0.0), _norm_logpdf(1.0), [(None, x) for x in a]) - 0.5)


def test_kl_gaussian_closed_form():
    assert _gaussian_kl_error(10_000, 0) < 0.05


def test_kl_error_shrinks_with_samples():
    small = np.mean([_gaussian_kl_error(1_000, s) for s in range(20)])
    large = np.mean([_gaussian_kl_error(10_000, s) for s in range(20)])
    assert large < small


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20))
def test_kl_clamped_non_negative(xs):
    assert kl_policy(_norm_logpdf(2.0), _norm_logpdf(-1.0), [(None, x) for x in xs]) >= 0.0


def test_kl_rejects_non_finite():
    with pytest.raises(ValueError):
        kl_policy(lambda o, a: -np.inf, _norm_logpdf(0.0), [(None, 0.0)])


def test_rectify_worked_examples():
    p = ReciprocalParams(lambda_s=0.2, lambda_t=0.1, k=0.9)
    r_s, r_t = rectify(4.0, 10.0, 0.5, 0.0, p)
    assert r_s == pytest.approx(3.4) and r_t == pytest.approx(9.0)
    r_s, r_t = rectify(10.0, 4.0, 0.0, 0.5, p)
    assert r_s == pytest.approx(11.2) and r_t == pytest.approx(3.3)
    assert rectify(7.0, 7.0, 0.3, 0.3, p) == (7.0, pytest.approx(6.3))


@given(st.floats(-200, 200), st.floats(-200, 200), st.floats(0, 5), st.floats(0, 5), st.floats(0, 1))
def test_rectify_branches(r_s, r_t, d, d_rev, k):
    p = ReciprocalParams(lambda_s=0.3, lambda_t=0.2, k=k)
    s, t = rectify(r_s, r_t, d, d_rev, p)
    if r_t >= r_s:
        assert s == pytest.approx(r_s - 0.3 * (r_t - r_s) * d)
        assert t == pytest.approx(k * r_t)
    else:
        assert s == pytest.approx(r_s + 0.3 * (r_s - r_t))
        assert t == pytest.approx(k * r_t - 0.2 * (r_s - r_t) * d_rev)


def test_params_validation():
    with pytest.raises(ValueError):
        ReciprocalParams(k=1.5)
    with pytest.raises(ValueError):
        ReciprocalParams(mode="sgd")


def test_kl_tracker_half_life():
    tr = KlTracker(ReciprocalParams(kl_half_life=10).kl_decay)
    tr.update(1.0)
    for _ in range(10):
        v = tr.update(0.0)
    assert v == pytest.approx(0.5)
    assert KlTracker(0.5).update(-3.0) == 0.0


def _envs(**kw):
    trace = BackgroundTrace(0.5, np.random.default_rng(0).gamma(4, 0.25, (600, 2)) * [2.0, 0.5])
    mk = lambda: AttackEnv(LinkProfile(), trace, None, episode_slots=8, **kw)
    return mk(), mk()


def _pair(env, seed=0):
    return PolicyPair(Attacker(env.state_dim, env.rate_max, 1.0, (8,), seed=seed),
                      Attacker(env.n_partial, env.rate_max, 1.0, (8,), seed=seed + 1))


def test_identical_policies_give_zero_kl():
    env_s, env_t = _envs(n_delay=3, n_partial=3)
    shared = Attacker(3, env_s.rate_max, 1.0, (8,), seed=0)
    # a teacher fed only the delays behaves exactly like the student
    pair = PolicyPair(shared, shared)
    env_s.reset(seed=0)
    env_t.sync_from(env_s)
    p = ReciprocalParams()
    pair.check_dims = lambda env: None
    orig = env_t.encode_state
    env_t.encode_state = lambda s: student_view(orig(s), 3)
    st_ = paired_step(pair, env_s, env_t, p, np.random.default_rng(0))
    assert st_.kl_st == 0.0 and st_.kl_ts == 0.0
    assert st_.r_t_rec == pytest.approx(p.k * st_.r_t)


def test_paired_step_replay_is_deterministic():
    out = []
    for _ in range(2):
        env_s, env_t = _envs()
        pair = _pair(env_s)
        env_s.reset(seed=5)
        env_t.sync_from(env_s)
        s = paired_step(pair, env_s, env_t, ReciprocalParams(), np.random.default_rng(3))
        out.append((s.r_s, s.r_t, s.kl_st, s.kl_ts, s.r_s_rec, s.r_t_rec, s.a_s.action, s.a_t.action))
    assert out[0] == out[1]


def test_desync_detected():
    env_s, env_t = _envs()
    pair = _pair(env_s)
    env_s.reset(seed=1)
    env_t.reset(seed=1)
    env_s.step(IDLE)
    with pytest.raises(RuntimeError):
        paired_step(pair, env_s, env_t, ReciprocalParams(), np.random.default_rng(0))


def test_sync_makes_states_equal():
    env_s, env_t = _envs(noise_sigma=0.01)
    pair = _pair(env_s)
    env_s.reset(seed=2)
    env_t.sync_from(env_s)
    paired_step(pair, env_s, env_t, ReciprocalParams(), np.random.default_rng(0))
    env_t.sync_from(env_s)
    assert env_t.state == env_s.state and env_t.observation == env_s.observation


def _step(pair, r_s_rec, r_t_rec, done=True):
    rng = np.random.default_rng(0)
    x_t, x_s = rng.normal(size=pair.teacher.in_dim), rng.normal(size=pair.student.in_dim)
    a_t, a_s = pair.teacher.act(x_t, rng), pair.student.act(x_s, rng)
    return PairedStep(0, x_t, a_t, 0.0, x_s, a_s, 0.0, 0.0, 0.0, r_s_rec, r_t_rec, x_t, x_s, done)


def test_zero_td_error_leaves_parameters():
    env_s, _ = _envs()
    pair = _pair(env_s)
    p = ReciprocalParams()
    st_ = _step(pair, 0.0, 0.0)
    # choose rewards so that delta = r * scale - V(x) = 0 for both agents
    st_.r_s_rec = float(pair.student.critic.value(st_.x_s)) / p.reward_scale
    st_.r_t_rec = float(pair.teacher.critic.value(st_.x_t)) / p.reward_scale
    before = [n.params.copy() for a in (pair.student, pair.teacher) for n in a.nets().values()]
    d_s, d_t = reciprocal_update(st_, pair, p)
    assert abs(d_s) < 1e-12 and abs(d_t) < 1e-12
    after = [n.params for a in (pair.student, pair.teacher) for n in a.nets().values()]
    for b, a in zip(before, after):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_td_error_single_step_zero_critic():
    env_s, _ = _envs()
    pair = _pair(env_s)
    for a in (pair.student, pair.teacher):
        a.critic.net.params[:] = 0.0
    p = ReciprocalParams(k=0.0)
    st_ = _step(pair, 42.0, rectify(1.0, 5.0, 0.0, 0.0, p)[1])
    assert st_.r_t_rec == 0.0
    d_s, d_t = reciprocal_update(st_, pair, p)
    assert d_s == pytest.approx(42.0 * p.reward_scale)
    assert d_t == 0.0


def test_update_moves_critic_toward_td_target():
    env_s, _ = _envs()
    pair = _pair(env_s)
    p = ReciprocalParams(alpha_s=0.05, alpha_t=0.05, beta_s=0.0, beta_t=0.0)
    st_ = _step(pair, 30.0, -30.0)
    before = reciprocal_update(st_, pair, ReciprocalParams(alpha_s=0.0, alpha_t=0.0, beta_s=0.0, beta_t=0.0))
    reciprocal_update(st_, pair, p)
    after = reciprocal_update(st_, pair, ReciprocalParams(alpha_s=0.0, alpha_t=0.0, beta_s=0.0, beta_t=0.0))
    assert abs(after[0]) < abs(before[0])
    assert abs(after[1]) < abs(before[1])


def test_teacher_changes_only_through_reciprocal_update():
    env_s, env_t = _envs()
    pair = _pair(env_s)
    before = pair.teacher.decider.net.params.copy()
    run_paired_episode(pair, env_s, env_t, ReciprocalParams(), np.random.default_rng(0), seed=1, update=False)
    np.testing.assert_array_equal(pair.teacher.decider.net.params, before)
    run_paired_episode(pair, env_s, env_t, ReciprocalParams(), np.random.default_rng(0), seed=1, update=True)
    assert not np.array_equal(pair.teacher.decider.net.params, before)


@pytest.mark.parametrize("mode", ["ac", "ppo"])
def test_train_student_curves_and_zero_episodes(mode):
    env_s, env_t = _envs()
    pair = _pair(env_s)
    before = pair.student.decider.net.params.copy()
    s, t = train_student(pair, env_s, env_t, ReciprocalParams(mode=mode), 0)
    assert s == [] and t == []
    np.testing.assert_array_equal(pair.student.decider.net.params, before)
    s, t = train_student(pair, env_s, env_t, ReciprocalParams(mode=mode), 3)
    assert len(s) == 3 == len(t)


def test_dimension_mismatch_rejected():
    env_s, env_t = _envs()
    pair = PolicyPair(Attacker(5, 30.0), Attacker(3, 30.0))
    with pytest.raises(ValueError):
        train_student(pair, env_s, env_t, ReciprocalParams(), 1)
