"""Soft actor-critic with an optional conservative (CQL) critic penalty.

The policy outputs a per-dimension step size in ``[-a_max, a_max]`` as
``a_max * tanh(u)``, ``u ~ N(mean(s), std(s))``. Networks see z-scored
states and actions rescaled to ``[-1, 1]``; entropy and log-probabilities
are measured in that rescaled action space.

Setting ``w_cons = 0`` skips the conservative term entirely, including its
random draws, so CQL training collapses onto plain SAC bit-for-bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import (
    AdamState,
    DimensionError,
    Mlp,
    NumericFailureError,
    adam_update,
    backward,
    forward_cached,
    load_checkpoint,
    mlp_forward,
    mlp_init,
    polyak,
    save_checkpoint,
)
from .trajectories import TransitionSet

log = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
TANH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CqlConfig:
    epochs: int = 100
    # an "epoch" is a fixed number of gradient updates, not a pass over the data
    steps_per_epoch: int = 100
    batch_size: int = 256
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.005
    w_cons: float = 5.0
    n_actions: int = 10
    hidden: int = 256
    layers: int = 2
    checkpoint_interval: int = 50
    init_temperature: float = 1.0
    a_max: float = 0.05

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "batch_size", "hidden", "layers", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_actions < 2 or self.n_actions % 2:
            raise ValueError("n_actions must be a positive even number")
        if self.w_cons < 0:
            raise ValueError("w_cons must be non-negative")
        if not 0 < self.tau < 1:
            raise ValueError("tau must be in (0, 1)")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        for name in ("actor_lr", "critic_lr", "alpha_lr", "init_temperature", "a_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Agent:
    actor: Mlp
    q1: Mlp
    q2: Mlp
    q1_targ: Mlp
    q2_targ: Mlp
    log_alpha: float
    a_max: float
    gamma: float
    state_mean: np.ndarray
    state_std: np.ndarray

    @property
    def dim(self) -> int:
        return self.state_mean.shape[0]

    @property
    def temperature(self) -> float:
        return math.exp(self.log_alpha)

    def snapshot(self) -> "Agent":
        # parameters are never updated in place, so a shallow copy is a snapshot
        return replace(self)


@dataclass
class TrainResult:
    agent: Agent
    checkpoints: list[tuple[int, Agent]]
    history: list[dict] = field(default_factory=list)


class AgentTrainingError(NumericFailureError):
    def __init__(self, msg: str, last_good: Agent, checkpoints: list[tuple[int, Agent]]):
        super().__init__(msg)
        self.last_good = last_good
        self.checkpoints = checkpoints


def _seed_for(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def init_agent(dim: int, cfg: CqlConfig, seed: int, state_mean=None, state_std=None) -> Agent:
    hidden = [cfg.hidden] * cfg.layers
    actor = mlp_init([dim, *hidden, 2 * dim], _seed_for(seed, 0))
    q1 = mlp_init([2 * dim, *hidden, 1], _seed_for(seed, 1))
    q2 = mlp_init([2 * dim, *hidden, 1], _seed_for(seed, 2))
    return Agent(
        actor=actor,
        q1=q1,
        q2=q2,
        q1_targ=q1.copy(),
        q2_targ=q2.copy(),
        log_alpha=math.log(cfg.init_temperature),
        a_max=cfg.a_max,
        gamma=cfg.gamma,
        state_mean=np.zeros(dim) if state_mean is None else np.asarray(state_mean, dtype=np.float64),
        state_std=np.ones(dim) if state_std is None else np.asarray(state_std, dtype=np.float64),
    )


# ------------------------------------------------------------------ policy


def _norm_states(agent: Agent, s: np.ndarray) -> np.ndarray:
    return (s - agent.state_mean) / agent.state_std


def _policy_heads(agent: Agent, s_norm: np.ndarray):
    out, acts = forward_cached(agent.actor, s_norm)
    d = agent.dim
    mean = out[:, :d]
    raw_ls = out[:, d:]
    log_std = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    return mean, raw_ls, log_std, acts


def _squash(mean, log_std, eps):
    """Reparameterized sample in the unit action box and its log-density."""
    std = np.exp(log_std)
    u = mean + std * eps
    t = np.tanh(u)
    one_minus = 1.0 - t * t
    logp = np.sum(-0.5 * eps * eps - log_std - HALF_LOG_2PI - np.log(one_minus + TANH_EPS), axis=-1)
    return t, logp, std, one_minus


def policy_act(agent: Agent, x, deterministic: bool = True, rng: np.random.Generator | None = None) -> np.ndarray:
    """Step-size vector for state(s) ``x``; always inside ``[-a_max, a_max]``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != agent.dim:
        raise DimensionError(f"agent expects dimension {agent.dim}, got {xb.shape[1]}")
    mean, _, log_std, _ = _policy_heads(agent, _norm_states(agent, xb))
    if deterministic:
        t = np.tanh(mean)
    else:
        rng = rng if rng is not None else np.random.default_rng()
        t, _, _, _ = _squash(mean, log_std, rng.standard_normal(mean.shape))
    a = agent.a_max * t
    return a[0] if single else a


# ------------------------------------------------------------------ critics


def _critic_input(agent: Agent, s_norm: np.ndarray, a_unit: np.ndarray) -> np.ndarray:
    return np.concatenate([s_norm, a_unit], axis=-1)


def q_value(agent: Agent, s, a, which: str = "min") -> np.ndarray:
    """Critic estimate for raw states and raw step-size actions."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    z = _critic_input(agent, _norm_states(agent, s), a / agent.a_max)
    if which == "q1":
        return mlp_forward(agent.q1, z)[:, 0]
    if which == "q2":
        return mlp_forward(agent.q2, z)[:, 0]
    return np.minimum(mlp_forward(agent.q1, z), mlp_forward(agent.q2, z))[:, 0]


def _logsumexp_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mx = x.max(axis=1, keepdims=True)
    e = np.exp(x - mx)
    tot = e.sum(axis=1, keepdims=True)
    return (mx + np.log(tot))[:, 0], e / tot


def _critic_pass(agent: Agent, batch, cfg: CqlConfig, rng: np.random.Generator, want_grads: bool):
    states, actions, next_states, rewards = batch
    B = states.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    d = agent.dim
    alpha = agent.temperature
    s_norm = _norm_states(agent, states)
    sn_norm = _norm_states(agent, next_states)

    # soft twin-min bootstrap target; every transition is non-terminal
    mean_n, _, ls_n, _ = _policy_heads(agent, sn_norm)
    t_n, logp_n, _, _ = _squash(mean_n, ls_n, rng.standard_normal((B, d)))
    zn = _critic_input(agent, sn_norm, t_n)
    q_next = np.minimum(mlp_forward(agent.q1_targ, zn), mlp_forward(agent.q2_targ, zn))[:, 0]
    target = rewards + agent.gamma * (q_next - alpha * logp_n)

    rows = _critic_input(agent, s_norm, actions / agent.a_max)
    M = cfg.n_actions
    conservative = cfg.w_cons > 0
    if conservative:
        half = M // 2
        a_unif = rng.uniform(-1.0, 1.0, size=(B, half, d))
        mean_s, _, ls_s, _ = _policy_heads(agent, s_norm)
        eps = rng.standard_normal((B, half, d))
        t_pi, _, _, _ = _squash(mean_s[:, None, :], ls_s[:, None, :], eps)
        sampled = np.concatenate([a_unif, t_pi], axis=1)  # (B, M, d)
        s_rep = np.repeat(s_norm[:, None, :], M, axis=1)
        rows = np.concatenate([rows, _critic_input(agent, s_rep, sampled).reshape(B * M, 2 * d)], axis=0)

    diag = {"td": 0.0, "gap": 0.0, "q_data": 0.0, "lse": 0.0}
    total = 0.0
    grads = []
    for q in (agent.q1, agent.q2):
        out, acts = forward_cached(q, rows)
        q_data = out[:B, 0]
        diff = q_data - target
        td = float(np.mean(diff * diff))
        g_out = np.zeros_like(out)
        g_out[:B, 0] = 0.5 * 2.0 * diff / B
        loss = td
        if conservative:
            q_samp = out[B:, 0].reshape(B, M)
            lse, soft = _logsumexp_rows(q_samp)
            gap = float(np.mean(lse) - np.mean(q_data))
            loss += cfg.w_cons * gap
            g_out[B:, 0] = 0.5 * cfg.w_cons * (soft / B).ravel()
            g_out[:B, 0] -= 0.5 * cfg.w_cons / B
            diag["gap"] += 0.5 * gap
            diag["lse"] += 0.5 * float(np.mean(lse))
        diag["td"] += 0.5 * td
        diag["q_data"] += 0.5 * float(np.mean(q_data))
        total += 0.5 * loss
        if want_grads:
            grads.append(backward(q, acts, g_out)[0])
    return total, diag, grads


def cql_critic_loss(batch, agent: Agent, cfg: CqlConfig, rng: np.random.Generator) -> tuple[float, dict]:
    """Critic objective averaged over the twin critics.

    Per critic: ``w_cons * (mean_s logsumexp_M Q(s, a_j) - mean Q(s, a_data)) + TD``,
    with half of the M sampled actions uniform over the action box and half
    from the current policy at s. ``batch`` is ``(s, a, s_next, r)``.
    """
    loss, diag, _ = _critic_pass(agent, batch, cfg, rng, want_grads=False)
    return loss, diag


def _actor_pass(agent: Agent, states: np.ndarray, target_entropy: float, rng: np.random.Generator):
    B, d = states.shape
    alpha = agent.temperature
    s_norm = _norm_states(agent, states)
    mean, raw_ls, log_std, acts = _policy_heads(agent, s_norm)
    eps = rng.standard_normal((B, d))
    t, logp, std, one_minus = _squash(mean, log_std, eps)

    z = _critic_input(agent, s_norm, t)
    o1, c1 = forward_cached(agent.q1, z)
    o2, c2 = forward_cached(agent.q2, z)
    use1 = (o1 <= o2)[:, 0]
    q_min = np.where(use1, o1[:, 0], o2[:, 0])
    loss = float(np.mean(alpha * logp - q_min))

    g_min = np.full((B, 1), -1.0 / B)
    _, gz1 = backward(agent.q1, c1, g_min * use1[:, None], param_grads=False)
    _, gz2 = backward(agent.q2, c2, g_min * ~use1[:, None], param_grads=False)
    g_t = (gz1 + gz2)[:, d:]
    # d logp / du = 2 t (1 - t^2) / (1 - t^2 + eps)
    g_u = g_t * one_minus + (alpha / B) * 2.0 * t * one_minus / (one_minus + TANH_EPS)
    g_mean = g_u
    g_ls = g_u * std * eps - alpha / B
    g_ls = np.where((raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX), g_ls, 0.0)
    grads, _ = backward(agent.actor, acts, np.concatenate([g_mean, g_ls], axis=1))
    alpha_grad = -float(np.mean(logp + target_entropy))
    return loss, grads, alpha_grad, float(np.mean(logp))


class _Trainer:
    def __init__(self, agent: Agent, cfg: CqlConfig):
        self.agent = agent
        self.cfg = cfg
        self.opt_actor = AdamState.for_params(agent.actor.params(), lr=cfg.actor_lr)
        self.opt_q1 = AdamState.for_params(agent.q1.params(), lr=cfg.critic_lr)
        self.opt_q2 = AdamState.for_params(agent.q2.params(), lr=cfg.critic_lr)
        self.opt_alpha = AdamState.for_params([np.zeros(1)], lr=cfg.alpha_lr)
        self.target_entropy = -float(agent.dim)

    def step(self, batch, rng: np.random.Generator) -> dict:
        a, cfg = self.agent, self.cfg
        closs, diag, (g1, g2) = _critic_pass(a, batch, cfg, rng, want_grads=True)
        if not math.isfinite(closs):
            raise NumericFailureError(f"critic loss {closs}")
        p1, self.opt_q1 = adam_update(a.q1.params(), g1, self.opt_q1)
        p2, self.opt_q2 = adam_update(a.q2.params(), g2, self.opt_q2)
        a = replace(a, q1=Mlp.from_params(a.q1.layer_dims, p1), q2=Mlp.from_params(a.q2.layer_dims, p2))

        aloss, ga, alpha_grad, mean_logp = _actor_pass(a, batch[0], self.target_entropy, rng)
        if not math.isfinite(aloss):
            raise NumericFailureError(f"actor loss {aloss}")
        pa, self.opt_actor = adam_update(a.actor.params(), ga, self.opt_actor)
        (la,), self.opt_alpha = adam_update([np.array([a.log_alpha])], [np.array([alpha_grad])], self.opt_alpha)
        a = replace(
            a,
            actor=Mlp.from_params(a.actor.layer_dims, pa),
            log_alpha=float(la[0]),
            q1_targ=polyak(a.q1_targ, a.q1, cfg.tau),
            q2_targ=polyak(a.q2_targ, a.q2, cfg.tau),
        )
        self.agent = a
        diag.update(critic_loss=closs, actor_loss=aloss, logp=mean_logp, temperature=a.temperature)
        return diag


def cql_train(ts: TransitionSet, cfg: CqlConfig = CqlConfig(), seed: int = 0) -> TrainResult:
    """Train an agent on ``ts``; snapshots are kept at every ``checkpoint_interval`` epochs.

    On a numeric failure, raises ``AgentTrainingError`` carrying the last
    agent that completed a step without error.
    """
    if len(ts) == 0:
        raise ValueError("empty transition set")
    state_std = ts.states.std(axis=0)
    state_std = np.where(state_std < 1e-12, 1.0, state_std)
    agent = init_agent(ts.dim, cfg, seed, ts.states.mean(axis=0), state_std)
    trainer = _Trainer(agent, cfg)
    rng = np.random.default_rng(_seed_for(seed, 3))
    checkpoints: list[tuple[int, Agent]] = []
    history: list[dict] = []
    n = len(ts)
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        for _ in range(cfg.steps_per_epoch):
            idx = rng.integers(0, n, size=cfg.batch_size)
            batch = (ts.states[idx], ts.actions[idx], ts.next_states[idx], ts.rewards[idx])
            last_good = trainer.agent
            try:
                diag = trainer.step(batch, rng)
            except (NumericFailureError, FloatingPointError) as exc:
                raise AgentTrainingError(f"epoch {epoch}: {exc}", last_good, checkpoints) from exc
            for k, v in diag.items():
                sums[k] = sums.get(k, 0.0) + v
        history.append({k: v / cfg.steps_per_epoch for k, v in sums.items()} | {"epoch": epoch})
        log.debug("agent epoch %d %s", epoch, history[-1])
        if epoch % cfg.checkpoint_interval == 0:
            checkpoints.append((epoch, trainer.agent.snapshot()))
    return TrainResult(trainer.agent, checkpoints, history)


def sac_train(ts: TransitionSet, cfg: CqlConfig = CqlConfig(), seed: int = 0) -> TrainResult:
    """Plain SAC: ``cql_train`` with the conservative weight switched off."""
    return cql_train(ts, replace(cfg, w_cons=0.0), seed)


# -------------------------------------------------------------- persistence


def save_agent(agent: Agent, path: str | Path, meta: dict | None = None) -> None:
    save_checkpoint(
        path,
        {"actor": agent.actor, "q1": agent.q1, "q2": agent.q2, "q1_targ": agent.q1_targ, "q2_targ": agent.q2_targ},
        {
            "log_alpha": np.array(agent.log_alpha),
            "a_max": np.array(agent.a_max),
            "gamma": np.array(agent.gamma),
            "state_mean": agent.state_mean,
            "state_std": agent.state_std,
        },
        meta,
    )


def load_agent(path: str | Path) -> Agent:
    nets, arrays, _ = load_checkpoint(path)
    return Agent(
        actor=nets["actor"],
        q1=nets["q1"],
        q2=nets["q2"],
        q1_targ=nets["q1_targ"],
        q2_targ=nets["q2_targ"],
        log_alpha=float(arrays["log_alpha"]),
        a_max=float(arrays["a_max"]),
        gamma=float(arrays["gamma"]),
        state_mean=arrays["state_mean"],
        state_std=arrays["state_std"],
    )


def agents_equal(a: Agent, b: Agent) -> bool:
    """Bit-exact comparison of every parameter and scalar."""
    for name in ("actor", "q1", "q2", "q1_targ", "q2_targ"):
        for x, y in zip(getattr(a, name).params(), getattr(b, name).params()):
            if not np.array_equal(x, y):
                return False
    return (
        a.log_alpha == b.log_alpha
        and a.a_max == b.a_max
        and a.gamma == b.gamma
        and np.array_equal(a.state_mean, b.state_mean)
        and np.array_equal(a.state_std, b.state_std)
    )
