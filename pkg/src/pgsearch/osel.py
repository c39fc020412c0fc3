"""Offline scoring of designs through a learned latent space, and the (p, epochs) grid search.

The encoder is pre-trained on random trajectories over the whole offline
dataset to predict, from a state's embedding, the z-scored reward summed
over the next w steps for every w in 1..window. A candidate is scored by
the mean raw output of its k nearest dataset points in that latent space.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .agents import Agent, CqlConfig, cql_train
from .numerics import (
    AdamState,
    Mlp,
    NumericFailureError,
    adam_update,
    backward,
    forward_cached,
    load_checkpoint,
    mlp_forward,
    mlp_init,
    mlp_zeros,
    mse_and_grad,
    save_checkpoint,
)
from .search import pgs_search, pick_starts
from .surrogate import Surrogate
from .tasks import OfflineDataset
from .trajectories import (
    ActionBound,
    InfeasibleTrajectoryError,
    build_transition_set,
    select_top_p,
    synthesize_trajectories,
)

log = logging.getLogger(__name__)

TIE_TOL = 1e-9


@dataclass(frozen=True)
class EncoderConfig:
    latent_dim: int = 32
    window: int = 8
    hidden: int = 256
    layers: int = 2
    n_traj: int = 2000
    T: int = 50
    epochs: int = 5
    batch_size: int = 128
    lr: float = 3e-4


@dataclass
class Encoder:
    net: Mlp
    heads: Mlp
    in_mean: np.ndarray
    in_std: np.ndarray
    loss_log: list[float] = field(default_factory=list)

    @property
    def window(self) -> int:
        return self.heads.out_dim


def embed(enc: Encoder, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return mlp_forward(enc.net, (X - enc.in_mean) / enc.in_std)


def horizon_examples(traj: np.ndarray, z: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """(state index, window-vector of w-step summed rewards) for every usable trajectory position."""
    m, T = traj.shape
    if T <= window:
        raise InfeasibleTrajectoryError(f"trajectory length {T} must exceed window {window}")
    starts = traj[:, : T - window]
    targets = np.stack([z[traj[:, w : T - window + w]] - z[starts] for w in range(1, window + 1)], axis=-1)
    return starts.ravel(), targets.reshape(-1, window)


def _encoder_loss_grads(enc_net: Mlp, heads: Mlp, xn: np.ndarray, y: np.ndarray, want_grads: bool = True):
    e, acts_e = forward_cached(enc_net, xn)
    pred, acts_h = forward_cached(heads, e)
    loss, g = mse_and_grad(pred, y)
    if not want_grads:
        return loss, None, None
    gh, ge = backward(heads, acts_h, g)
    gn, _ = backward(enc_net, acts_e, ge)
    return loss, gn, gh


def encoder_loss(enc: Encoder, ds: OfflineDataset, traj: np.ndarray) -> float:
    idx, y = horizon_examples(traj, ds.z_outputs(), enc.window)
    xn = (ds.inputs[idx] - enc.in_mean) / enc.in_std
    return _encoder_loss_grads(enc.net, enc.heads, xn, y, want_grads=False)[0]


def train_encoder(ds: OfflineDataset, cfg: EncoderConfig = EncoderConfig(), seed: int = 0) -> Encoder:
    """Fit the embedding with multi-horizon reward regression (MSE, Adam)."""
    T = min(cfg.T, ds.n)
    traj = synthesize_trajectories(np.arange(ds.n), cfg.n_traj, T, seed)
    idx, y = horizon_examples(traj, ds.z_outputs(), cfg.window)
    xn_all = (ds.inputs - ds.in_mean) / ds.in_std

    ss = np.random.SeedSequence([seed, 7])
    net_seed, rng_seed = (int(v) for v in ss.generate_state(2))
    net = mlp_init([ds.dim] + [cfg.hidden] * cfg.layers + [cfg.latent_dim], net_seed)
    # zero heads: an untrained encoder predicts zero reward everywhere
    heads = mlp_zeros([cfg.latent_dim, cfg.window])
    opt = AdamState.for_params(net.params() + heads.params(), lr=cfg.lr)
    n_net = len(net.params())
    rng = np.random.default_rng(rng_seed)
    log_: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(idx.size)
        total = 0.0
        for start in range(0, idx.size, cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            loss, gn, gh = _encoder_loss_grads(net, heads, xn_all[idx[b]], y[b])
            if not math.isfinite(loss):
                raise NumericFailureError(f"encoder loss {loss} at epoch {epoch}")
            params, opt = adam_update(net.params() + heads.params(), gn + gh, opt)
            net = Mlp.from_params(net.layer_dims, params[:n_net])
            heads = Mlp.from_params(heads.layer_dims, params[n_net:])
            total += loss * b.size
        log_.append(total / idx.size)
        log.debug("encoder epoch %d loss %.6g", epoch + 1, log_[-1])
    return Encoder(net, heads, ds.in_mean.copy(), ds.in_std.copy(), log_)


def embed_dataset(enc: Encoder, ds: OfflineDataset) -> np.ndarray:
    return embed(enc, ds.inputs)


def knn_estimate(enc: Encoder, ds: OfflineDataset, x, k: int = 10, bank: np.ndarray | None = None):
    """Mean raw output of the k dataset points nearest to ``x`` in latent space.

    Euclidean distance; equal distances resolve to the lower dataset index.
    ``bank`` is an optional precomputed ``embed_dataset`` result.
    """
    if not 1 <= k <= ds.n:
        raise ValueError(f"k={k} must be in [1, {ds.n}]")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    q = embed(enc, x[None, :] if single else x)
    bank = embed_dataset(enc, ds) if bank is None else bank
    dist = np.sum((q[:, None, :] - bank[None, :, :]) ** 2, axis=-1)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    est = ds.outputs[nearest].mean(axis=1)
    return float(est[0]) if single else est


def final_designs(s: Surrogate, agent: Agent, ds: OfflineDataset, N: int = 128, T: int = 50) -> np.ndarray:
    return pgs_search(pick_starts(ds, min(N, ds.n)), s, agent, T).final


def osel_score(
    enc: Encoder,
    ds: OfflineDataset,
    s: Surrogate,
    agent: Agent,
    N: int = 128,
    T: int = 50,
    k: int = 10,
    bank: np.ndarray | None = None,
) -> float:
    """Mean latent-KNN estimate over the end points of N policy-guided searches."""
    X = final_designs(s, agent, ds, N, T)
    return float(np.mean(knn_estimate(enc, ds, X, k, bank)))


# ------------------------------------------------------------------ grid


@dataclass(frozen=True)
class GridSpec:
    p_values: tuple[float, ...] = (10.0, 20.0, 30.0, 40.0)
    max_epochs: int = 400
    interval: int = 50

    @property
    def epoch_values(self) -> tuple[int, ...]:
        return tuple(range(self.interval, self.max_epochs + 1, self.interval))


@dataclass
class GridResult:
    scores: dict[tuple[float, int], float]
    selected: tuple[float, int]
    missing: list[float] = field(default_factory=list)
    tie_scores: dict[tuple[float, int], float] = field(default_factory=dict)


def select_cell(
    scores: dict[tuple[float, int], float],
    rescore: Callable[[tuple[float, int]], float] | None = None,
) -> tuple[tuple[float, int], dict[tuple[float, int], float]]:
    """Argmax of ``scores``; cells within 1e-9 of the best are re-ranked by ``rescore``,
    then by fewer epochs, then by smaller p."""
    if not scores:
        raise ValueError("empty score map")
    best = max(scores.values())
    tied = sorted(c for c, v in scores.items() if v >= best - TIE_TOL)
    tie_scores: dict[tuple[float, int], float] = {}
    if len(tied) > 1 and rescore is not None:
        tie_scores = {c: rescore(c) for c in tied}
        top = max(tie_scores.values())
        tied = [c for c in tied if tie_scores[c] >= top - TIE_TOL]
        log.info("OSEL tie between %d cells broken by re-scoring: %s", len(tie_scores), tie_scores)
    return min(tied, key=lambda c: (c[1], c[0])), tie_scores


def hyperparameter_select(
    ds: OfflineDataset,
    s: Surrogate,
    enc: Encoder,
    grid: GridSpec = GridSpec(),
    seeds: Iterable[int] = (0,),
    agent_cfg: CqlConfig = CqlConfig(),
    m: int = 2000,
    T: int = 50,
    N: int = 128,
    k: int = 10,
    k_tie: int = 100,
    alpha_scale: float = 0.05,
) -> GridResult:
    """Score every (p, checkpoint-epoch) cell by mean OSEL estimate, averaged over seeds."""
    seeds = tuple(seeds)
    bank = embed_dataset(enc, ds)
    bound = ActionBound.from_scale(alpha_scale, ds.dim)
    cfg = replace(agent_cfg, epochs=grid.max_epochs, checkpoint_interval=grid.interval, a_max=bound.a_max)
    per_cell: dict[tuple[float, int], list[np.ndarray]] = {}
    missing: list[float] = []
    for p in grid.p_values:
        try:
            top = select_top_p(ds, p)
            if top.size < T:
                raise InfeasibleTrajectoryError(f"top {p}% has {top.size} points < T={T}")
        except InfeasibleTrajectoryError as exc:
            log.warning("grid cell p=%s skipped: %s", p, exc)
            missing.append(p)
            continue
        for seed in seeds:
            ts = build_transition_set(synthesize_trajectories(top, m, T, seed), s, ds, bound)
            result = cql_train(ts, cfg, seed)
            for epoch, agent in result.checkpoints:
                per_cell.setdefault((p, epoch), []).append(final_designs(s, agent, ds, N, T))
    if not per_cell:
        raise ValueError("every grid cell was infeasible")

    def score_with(cell, kk):
        kk = min(kk, ds.n)
        return float(np.mean([np.mean(knn_estimate(enc, ds, X, kk, bank)) for X in per_cell[cell]]))

    scores = {cell: score_with(cell, k) for cell in per_cell}
    selected, tie_scores = select_cell(scores, lambda c: score_with(c, k_tie))
    return GridResult(scores, selected, missing, tie_scores)


def save_grid(result: GridResult, path: str | Path, config_hash: str = "") -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "epochs", "osel_score", "selected", "config_hash"])
        for (p, e), v in sorted(result.scores.items()):
            w.writerow([repr(float(p)), e, repr(v), (p, e) == result.selected, config_hash])


def save_encoder(enc: Encoder, path: str | Path, meta: dict | None = None) -> None:
    save_checkpoint(
        path,
        {"net": enc.net, "heads": enc.heads},
        {"in_mean": enc.in_mean, "in_std": enc.in_std, "loss_log": np.array(enc.loss_log)},
        meta,
    )


def load_encoder(path: str | Path) -> Encoder:
    nets, arrays, _ = load_checkpoint(path)
    return Encoder(nets["net"], nets["heads"], arrays["in_mean"], arrays["in_std"], list(arrays["loss_log"]))
