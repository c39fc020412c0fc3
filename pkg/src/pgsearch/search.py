"""Policy-guided gradient search, the fixed-step baseline, and the evaluation harness."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .agents import Agent, CqlConfig, cql_train, policy_act, sac_train
from .surrogate import Surrogate, SurrogateConfig, surrogate_grad, surrogate_value, train_surrogate
from .tasks import OfflineDataset, Task, d_best, generate_offline_dataset, get_task, normalize_score, oracle_eval
from .trajectories import ActionBound, build_transition_set, select_top_p, synthesize_trajectories

log = logging.getLogger(__name__)

METHODS = ("pgs-cql", "pgs-sac", "grad")


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


@dataclass
class SearchTrace:
    """States x_0..x_T (rows), surrogate values at each state, and ||alpha_k||_2 per step.

    Batched traces carry a leading start-point axis: states (N, T+1, d).
    """

    states: np.ndarray
    values: np.ndarray
    action_norms: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[..., -1, :]


def _run_steps(X0: np.ndarray, s: Surrogate, step_size: Callable[[np.ndarray], np.ndarray], T: int) -> SearchTrace:
    X0 = np.asarray(X0, dtype=np.float64)
    single = X0.ndim == 1
    x = s.clamp(X0[None, :] if single else X0)
    states = [x]
    norms = []
    for _ in range(T):
        alpha = step_size(x)
        norms.append(np.linalg.norm(np.broadcast_to(alpha, x.shape), axis=1))
        x = s.clamp(x + alpha * surrogate_grad(s, x))
        states.append(x)
    st = np.stack(states, axis=1)  # (N, T+1, d)
    vals = surrogate_value(s, st.reshape(-1, st.shape[-1])).reshape(st.shape[:2])
    an = np.stack(norms, axis=1) if norms else np.zeros((st.shape[0], 0))
    if single:
        return SearchTrace(st[0], vals[0], an[0])
    return SearchTrace(st, vals, an)


def pgs_search(
    x0, s: Surrogate, agent: Agent, T: int, deterministic: bool = True, rng: np.random.Generator | None = None
) -> SearchTrace:
    """T steps of x <- x + pi(x) * grad f_hat(x).

    ``x0`` may be a single point or a batch of start points. Policy actions
    are the squashed mean unless ``deterministic`` is False.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    return _run_steps(x0, s, lambda x: policy_act(agent, x, deterministic=deterministic, rng=rng), T)


def grad_baseline(x0, s: Surrogate, T: int, eta: float = 0.05) -> SearchTrace:
    """Fixed-step gradient ascent on the surrogate."""
    if T < 0:
        raise ValueError("T must be non-negative")
    return _run_steps(x0, s, lambda x: np.full_like(x, eta), T)


def pick_starts(ds: OfflineDataset, N: int = 128) -> np.ndarray:
    """The N highest-scoring offline inputs (stable ties)."""
    if not 1 <= N <= ds.n:
        raise ValueError(f"N={N} must be in [1, {ds.n}]")
    order = np.lexsort((np.arange(ds.n), -ds.outputs))
    return ds.inputs[np.sort(order[:N])]


def evaluate_candidates(task: Task, ds: OfflineDataset, X) -> tuple[float, float]:
    """Normalized (100th, 50th) percentile oracle scores of a candidate set."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("no candidates")
    scores = normalize_score(np.asarray(oracle_eval(task, X)).reshape(-1), ds)
    return float(np.max(scores)), float(np.median(scores))


# ---------------------------------------------------------------- experiments


@dataclass(frozen=True)
class RunConfig:
    task: str = "quadratic-bowl"
    method: str = "pgs-cql"
    # dataset
    pool_size: int = 5000
    keep_percentile: float = 40.0
    # surrogate
    surrogate: SurrogateConfig = SurrogateConfig()
    # trajectories
    p: float = 40.0
    m: int = 2000
    T: int = 50
    monotonic: bool = False
    full_data: bool = False
    alpha_scale: float = 0.05
    eps_g: float = 1e-6
    # agent
    agent: CqlConfig = CqlConfig()
    # search
    N: int = 128
    T_test: int = 50
    eta: float = 0.05
    deterministic: bool = True
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        get_task(self.task)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not 0 < self.p <= 100 or not 0 < self.keep_percentile <= 100:
            raise ValueError("percentiles must be in (0, 100]")
        if self.m < 1 or self.T < 2 or self.N < 1 or self.T_test < 0:
            raise ValueError("m >= 1, T >= 2, N >= 1, T_test >= 0 required")
        if not self.seeds:
            raise ValueError("at least one seed required")


@dataclass
class Report:
    task: str
    method: str
    seed: int | str
    p: float
    epochs: int
    T_test: int
    m_traj: int
    score100: float
    score50: float
    d_best: float
    action_norms: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    wall_seconds: float = 0.0
    score100_std: float = 0.0
    score50_std: float = 0.0

    @property
    def first_norm(self) -> float:
        return float(self.action_norms[0]) if self.action_norms.size else 0.0

    @property
    def last_norm(self) -> float:
        return float(self.action_norms[-1]) if self.action_norms.size else 0.0


@dataclass
class SeedArtifacts:
    """Everything trained for one seed; reused across test-time ablations."""

    ds: OfflineDataset
    surrogate: Surrogate
    agent: Agent | None
    seconds: float


def _stage(name: str, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kw)
    except Exception as exc:  # noqa: BLE001
        raise StageError(name, exc) from exc
    log.info("stage %-18s %.2fs", name, time.perf_counter() - t0)
    return out


def train_seed(
    cfg: RunConfig,
    seed: int,
    dataset: OfflineDataset | None = None,
    surrogate: Surrogate | None = None,
) -> SeedArtifacts:
    t0 = time.perf_counter()
    task = get_task(cfg.task)
    ds = dataset or _stage("dataset", generate_offline_dataset, task, cfg.pool_size, cfg.keep_percentile, seed)
    s = surrogate or _stage("surrogate", train_surrogate, ds, replace(cfg.surrogate, seed=seed))
    agent = None
    if cfg.method == "grad":
        log.info("method grad: agent training skipped")
    else:
        top = _stage("select_top_p", select_top_p, ds, 100.0 if cfg.full_data else cfg.p)
        sort_by = ds.outputs if cfg.monotonic else None
        traj = _stage("trajectories", synthesize_trajectories, top, cfg.m, cfg.T, seed, sort_by=sort_by)
        bound = ActionBound.from_scale(cfg.alpha_scale, ds.dim)
        ts = _stage("transitions", build_transition_set, traj, s, ds, bound, cfg.eps_g)
        log.info("transitions %s", ts.stats())
        acfg = replace(cfg.agent, a_max=bound.a_max)
        trainer = cql_train if cfg.method == "pgs-cql" else sac_train
        agent = _stage("agent", trainer, ts, acfg, seed).agent
    return SeedArtifacts(ds, s, agent, time.perf_counter() - t0)


def search_and_report(cfg: RunConfig, seed: int, art: SeedArtifacts, T_test: int | None = None) -> Report:
    t0 = time.perf_counter()
    T_test = cfg.T_test if T_test is None else T_test
    task = get_task(cfg.task)
    starts = pick_starts(art.ds, min(cfg.N, art.ds.n))
    if cfg.method == "grad" or art.agent is None:
        trace = grad_baseline(starts, art.surrogate, T_test, cfg.eta)
    else:
        rng = None if cfg.deterministic else np.random.default_rng([seed, T_test])
        trace = pgs_search(starts, art.surrogate, art.agent, T_test, cfg.deterministic, rng)
    s100, s50 = evaluate_candidates(task, art.ds, trace.final)
    return Report(
        task=cfg.task,
        method=cfg.method,
        seed=seed,
        p=100.0 if cfg.full_data else cfg.p,
        epochs=0 if cfg.method == "grad" else cfg.agent.epochs,
        T_test=T_test,
        m_traj=cfg.m,
        score100=s100,
        score50=s50,
        d_best=d_best(art.ds)[1],
        action_norms=trace.action_norms.mean(axis=0),
        wall_seconds=art.seconds + time.perf_counter() - t0,
    )


def aggregate(reports: list[Report]) -> Report:
    r0 = reports[0]
    s100 = np.array([r.score100 for r in reports])
    s50 = np.array([r.score50 for r in reports])
    return Report(
        task=r0.task,
        method=r0.method,
        seed="agg",
        p=r0.p,
        epochs=r0.epochs,
        T_test=r0.T_test,
        m_traj=r0.m_traj,
        score100=float(s100.mean()),
        score50=float(s50.mean()),
        d_best=float(np.mean([r.d_best for r in reports])),
        action_norms=np.mean([r.action_norms for r in reports], axis=0),
        wall_seconds=float(sum(r.wall_seconds for r in reports)),
        score100_std=float(s100.std()),
        score50_std=float(s50.std()),
    )


def run_experiment(cfg: RunConfig, T_tests: tuple[int, ...] | None = None) -> list[Report]:
    """Per-seed reports followed by one aggregate (mean, std) report per test-time T.

    Agents are trained once per seed and reused for every entry of ``T_tests``.
    """
    T_tests = T_tests or (cfg.T_test,)
    per_T: dict[int, list[Report]] = {T: [] for T in T_tests}
    for seed in cfg.seeds:
        art = train_seed(cfg, seed)
        for T in T_tests:
            per_T[T].append(_stage("search", search_and_report, cfg, seed, art, T))
    out: list[Report] = []
    for T in T_tests:
        out.extend(per_T[T])
        out.append(aggregate(per_T[T]))
    return out
