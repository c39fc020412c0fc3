"""Hand-built surrogates and agents with known closed forms."""

import numpy as np

from pgsearch.agents import CqlConfig, init_agent
from pgsearch.numerics import Mlp, mlp_zeros
from pgsearch.surrogate import Surrogate


def linear_surrogate(w, lo=-5.0, hi=5.0, bias=0.0):
    """f(x) = w . x + bias, exact gradient w."""
    w = np.asarray(w, dtype=np.float64)
    d = w.size
    net = Mlp((d, 1), [w[None, :].copy()], [np.array([bias])])
    return Surrogate(net, np.zeros(d), np.ones(d), 0.0, 1.0, np.full(d, lo), np.full(d, hi))


def constant_agent(dim, unit_action, a_max=0.05, hidden=4, q_const=0.0, gamma=0.99):
    """Agent whose deterministic action is a_max * tanh(mean bias) and whose critics output q_const."""
    cfg = CqlConfig(hidden=hidden, layers=1, a_max=a_max, gamma=gamma)
    a = init_agent(dim, cfg, 0)
    actor = mlp_zeros([dim, hidden, 2 * dim])
    actor.biases[-1][:dim] = unit_action
    q = mlp_zeros([2 * dim, hidden, 1])
    q.biases[-1][:] = q_const
    a.actor = actor
    a.q1, a.q2, a.q1_targ, a.q2_targ = q, q.copy(), q.copy(), q.copy()
    return a
