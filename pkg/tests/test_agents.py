import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import constant_agent, linear_surrogate
from pgsearch.agents import (
    CqlConfig,
    _actor_pass,
    _critic_pass,
    agents_equal,
    cql_critic_loss,
    cql_train,
    init_agent,
    load_agent,
    policy_act,
    q_value,
    sac_train,
    save_agent,
)
from pgsearch.numerics import DimensionError, Mlp, polyak
from pgsearch.tasks import make_dataset
from pgsearch.trajectories import ActionBound, build_transition_set, synthesize_trajectories

TINY = CqlConfig(epochs=1, steps_per_epoch=3, batch_size=16, hidden=8, layers=2, n_actions=4)


def small_ts(n=40, m=10, T=11, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 3))
    y = -np.sum(x**2, axis=1)
    ds = make_dataset("quadratic-bowl", x, y, y.min(), y.max(), -2, 2)
    traj = synthesize_trajectories(np.arange(n), m, T, seed)
    return build_transition_set(traj, linear_surrogate([0.5, -1.0, 2.0], -2, 2), ds, ActionBound(0.05))


def random_batch(B=6, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return (
        rng.normal(size=(B, d)),
        rng.uniform(-0.05, 0.05, size=(B, d)),
        rng.normal(size=(B, d)),
        rng.normal(size=B),
    )


def test_constant_critic_logsumexp_offset():
    agent = constant_agent(3, 0.0, q_const=2.0)
    cfg = CqlConfig(w_cons=5.0, n_actions=10, hidden=4, layers=1)
    loss, diag = cql_critic_loss(random_batch(), agent, cfg, np.random.default_rng(0))
    # logsumexp over 10 equal values c is c + log 10, so the gap is log 10
    assert diag["gap"] == pytest.approx(math.log(10), abs=1e-12)
    assert diag["lse"] == pytest.approx(2.0 + math.log(10), abs=1e-12)


def test_constant_critic_td_hand_value():
    agent = constant_agent(3, 0.0, q_const=1.0, gamma=0.0)
    s, a, sn, _ = random_batch()
    batch = (s, a, sn, np.zeros(len(s)))
    cfg = CqlConfig(w_cons=0.0, hidden=4, layers=1)
    loss, diag = cql_critic_loss(batch, agent, cfg, np.random.default_rng(0))
    assert diag["td"] == 1.0
    assert loss == 1.0
    loss5, _ = cql_critic_loss(batch, agent, replace(cfg, w_cons=5.0), np.random.default_rng(0))
    assert loss5 == pytest.approx(1.0 + 5.0 * math.log(cfg.n_actions), abs=1e-12)


def test_zero_weight_loss_is_td_only():
    agent = init_agent(3, TINY, 1)
    batch = random_batch()
    loss, diag = cql_critic_loss(batch, agent, replace(TINY, w_cons=0.0), np.random.default_rng(4))
    assert loss == diag["td"] and diag["gap"] == 0.0


def test_empty_batch():
    agent = init_agent(3, TINY, 0)
    empty = tuple(np.zeros((0, 3)) for _ in range(3)) + (np.zeros(0),)
    with pytest.raises(ValueError):
        cql_critic_loss(empty, agent, TINY, np.random.default_rng(0))


def _numeric(f, params, k, idx, h=1e-6):
    plus = [p.copy() for p in params]
    minus = [p.copy() for p in params]
    plus[k][idx] += h
    minus[k][idx] -= h
    return (f(plus) - f(minus)) / (2 * h)


@pytest.mark.parametrize("w_cons", [0.0, 3.0])
def test_critic_gradient_matches_finite_differences(w_cons):
    cfg = replace(TINY, w_cons=w_cons)
    agent = init_agent(3, cfg, 2)
    batch = random_batch(seed=1)
    _, _, (g1, _) = _critic_pass(agent, batch, cfg, np.random.default_rng(9), True)

    def loss(params):
        a = replace(agent, q1=Mlp.from_params(agent.q1.layer_dims, params))
        return _critic_pass(a, batch, cfg, np.random.default_rng(9), False)[0]

    params = agent.q1.params()
    for k in range(len(params)):
        for idx in list(np.ndindex(params[k].shape))[:5]:
            assert _numeric(loss, params, k, idx) == pytest.approx(g1[k][idx], rel=1e-4, abs=1e-8)


def test_actor_gradient_matches_finite_differences():
    agent = init_agent(3, TINY, 3)
    agent = replace(agent, log_alpha=math.log(0.3))
    states = np.random.default_rng(2).normal(size=(8, 3))
    _, grads, _, _ = _actor_pass(agent, states, -3.0, np.random.default_rng(5))

    def loss(params):
        a = replace(agent, actor=Mlp.from_params(agent.actor.layer_dims, params))
        return _actor_pass(a, states, -3.0, np.random.default_rng(5))[0]

    params = agent.actor.params()
    for k in range(len(params)):
        for idx in list(np.ndindex(params[k].shape))[:6]:
            assert _numeric(loss, params, k, idx) == pytest.approx(grads[k][idx], rel=1e-4, abs=1e-8)


def test_temperature_gradient_sign():
    agent = init_agent(3, TINY, 0)
    states = np.zeros((4, 3))
    _, _, g, mean_logp = _actor_pass(agent, states, -3.0, np.random.default_rng(0))
    assert g == pytest.approx(-(mean_logp - 3.0))


def test_one_epoch_smoke_and_checkpoints():
    ts = small_ts(n=30, m=10, T=11)
    assert len(ts) == 100
    res = cql_train(ts, TINY, seed=0)
    assert res.checkpoints == []
    assert len(res.history) == 1 and math.isfinite(res.history[0]["critic_loss"])
    res = cql_train(ts, replace(TINY, epochs=4, checkpoint_interval=2), seed=0)
    assert [e for e, _ in res.checkpoints] == [2, 4]
    assert agents_equal(res.checkpoints[-1][1], res.agent)
    assert not agents_equal(res.checkpoints[0][1], res.agent)
    sac_train(ts, TINY, seed=0)


def test_training_deterministic_per_seed():
    ts = small_ts()
    a = cql_train(ts, TINY, seed=3).agent
    b = cql_train(ts, TINY, seed=3).agent
    c = cql_train(ts, TINY, seed=4).agent
    assert agents_equal(a, b)
    assert not agents_equal(a, c)


def test_zero_weight_matches_sac_bitwise():
    ts = small_ts()
    cfg = replace(TINY, epochs=2)
    a = cql_train(ts, replace(cfg, w_cons=0.0), seed=1).agent
    b = sac_train(ts, cfg, seed=1).agent
    assert agents_equal(a, b)


def test_target_critics_trail():
    ts = small_ts()
    agent = cql_train(ts, TINY, seed=0).agent
    init = init_agent(3, TINY, 0)
    for t, q, q0 in zip(agent.q1_targ.params(), agent.q1.params(), init.q1.params()):
        # targets move towards the critics but only a small part of the way
        assert np.max(np.abs(t - q0)) <= np.max(np.abs(q - q0))
    assert not np.array_equal(agent.q1_targ.weights[0], agent.q1.weights[0])


def test_polyak_formula():
    a, b = init_agent(3, TINY, 0).q1, init_agent(3, TINY, 1).q1
    mixed = polyak(a, b, 0.25)
    for m, x, y in zip(mixed.params(), a.params(), b.params()):
        assert np.allclose(m, 0.75 * x + 0.25 * y, rtol=0, atol=1e-15)


def test_policy_act_closed_forms():
    zero = constant_agent(4, 0.0)
    assert np.all(policy_act(zero, np.ones(4)) == 0.0)
    sat = constant_agent(4, 50.0, a_max=0.07)
    assert np.all(policy_act(sat, np.ones(4)) == 0.07)
    neg = constant_agent(4, -50.0, a_max=0.07)
    assert np.all(policy_act(neg, np.zeros((3, 4))) == -0.07)
    with pytest.raises(DimensionError):
        policy_act(zero, np.ones(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(-1e3, 1e3))
def test_policy_act_bounded(seed, scale):
    agent = init_agent(3, TINY, seed)
    x = np.random.default_rng(seed).normal(size=(5, 3)) * scale
    a = policy_act(agent, x)
    b = policy_act(agent, x)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= agent.a_max)
    stoch = policy_act(agent, x, deterministic=False, rng=np.random.default_rng(seed))
    assert np.all(np.abs(stoch) <= agent.a_max)


def test_q_value_which():
    agent = init_agent(3, TINY, 0)
    s, a, _, _ = random_batch()
    q1, q2 = q_value(agent, s, a, "q1"), q_value(agent, s, a, "q2")
    assert np.array_equal(q_value(agent, s, a), np.minimum(q1, q2))


def test_config_validation():
    with pytest.raises(ValueError):
        CqlConfig(n_actions=3)
    with pytest.raises(ValueError):
        CqlConfig(tau=1.0)
    with pytest.raises(ValueError):
        CqlConfig(w_cons=-1)


def test_agent_round_trip(tmp_path):
    agent = cql_train(small_ts(), TINY, seed=0).agent
    save_agent(agent, tmp_path / "a.ckpt")
    assert agents_equal(load_agent(tmp_path / "a.ckpt"), agent)
