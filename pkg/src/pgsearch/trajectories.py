"""Reduction of an offline dataset to offline-RL transitions.

Trajectories are random orderings of high-scoring dataset points; each
consecutive pair becomes a (state, action, next_state, reward) tuple whose
action is the per-dimension step size that moves the state onto the next
state along the surrogate gradient.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .surrogate import Surrogate, surrogate_grad
from .tasks import OfflineDataset, read_kv

DEFAULT_EPS_G = 1e-6


class InfeasibleTrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class ActionBound:
    a_max: float = 0.05

    def __post_init__(self):
        if not self.a_max > 0:
            raise ValueError("a_max must be positive")

    @classmethod
    def from_scale(cls, scale: float, dim: int) -> "ActionBound":
        """Per-dimension bound for an L2 budget of ``scale * sqrt(d)`` spread evenly."""
        del dim  # scale*sqrt(d) / sqrt(d)
        return cls(scale)


def select_top_p(ds: OfflineDataset, p: float) -> np.ndarray:
    """Indices (ascending) of the ceil(p*n/100) highest outputs; ties favour lower index."""
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    k = math.ceil(p * ds.n / 100.0 - 1e-9)
    if k < 2:
        raise InfeasibleTrajectoryError(f"top {p}% of {ds.n} points leaves {k} (< 2)")
    order = np.lexsort((np.arange(ds.n), -ds.outputs))
    return np.sort(order[:k])


def synthesize_trajectories(
    top: np.ndarray,
    m: int,
    T: int,
    seed: int,
    sort_by: np.ndarray | None = None,
) -> np.ndarray:
    """``m`` rows of ``T`` distinct indices drawn from ``top`` without replacement.

    Each row uses its own generator spawned from ``seed``. With ``sort_by``
    (the dataset outputs) every row is reordered ascending in that value,
    which gives the monotonic-trajectory variant.
    """
    top = np.asarray(top)
    if T < 2:
        raise InfeasibleTrajectoryError("trajectories need T >= 2")
    if T > top.size:
        raise InfeasibleTrajectoryError(f"T={T} exceeds subset size {top.size}")
    if m < 1:
        raise ValueError("m must be positive")
    children = np.random.SeedSequence(seed).spawn(m)
    out = np.empty((m, T), dtype=np.int64)
    for i, child in enumerate(children):
        out[i] = np.random.default_rng(child).choice(top, size=T, replace=False)
    if sort_by is not None:
        keys = np.asarray(sort_by)[out]
        out = np.take_along_axis(out, np.argsort(keys, axis=1, kind="stable"), axis=1)
    return out


def recover_action(x, x_next, g, bound: ActionBound, eps_g: float = DEFAULT_EPS_G):
    """Elementwise step size taking ``x`` to ``x_next`` along gradient ``g``.

    Returns ``(alpha, masked, clipped)``: dimensions with ``|g| <= eps_g`` get
    alpha 0 and are flagged in ``masked``; the rest are clipped to
    ``[-a_max, a_max]`` and flagged in ``clipped`` when that changed them.
    Works on single vectors or row batches.
    """
    x = np.asarray(x, dtype=np.float64)
    x_next = np.asarray(x_next, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    masked = np.abs(g) <= eps_g
    safe_g = np.where(masked, 1.0, g)
    raw = np.where(masked, 0.0, (x_next - x) / safe_g)
    alpha = np.clip(raw, -bound.a_max, bound.a_max)
    clipped = (alpha != raw) & ~masked
    return alpha, masked, clipped


def transition(x, alpha, s: Surrogate) -> np.ndarray:
    """One preconditioned gradient step ``x + alpha * grad``, projected onto the box."""
    x = np.asarray(x, dtype=np.float64)
    return s.clamp(x + np.asarray(alpha) * surrogate_grad(s, x))


@dataclass
class TransitionSet:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    mask_count: np.ndarray
    # per-dimension flags; absent for sets read back from disk
    masked: np.ndarray | None = None
    clipped: np.ndarray | None = None
    traj_id: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def stats(self) -> dict[str, float]:
        out = {"n": len(self), "mean_abs_action": float(np.mean(np.abs(self.actions)))}
        if self.masked is not None:
            out["mask_rate"] = float(self.masked.mean())
            out["clip_rate"] = float(self.clipped.mean())
        return out


def build_transition_set(
    trajectories: np.ndarray,
    s: Surrogate,
    ds: OfflineDataset,
    bound: ActionBound,
    eps_g: float = DEFAULT_EPS_G,
) -> TransitionSet:
    trajectories = np.asarray(trajectories)
    if trajectories.size == 0 or trajectories.ndim != 2:
        raise ValueError("no trajectories")
    m, T = trajectories.shape
    # every state is a dataset point, so the gradients can be computed once
    used = np.unique(trajectories)
    grads = np.zeros((ds.n, ds.dim))
    grads[used] = surrogate_grad(s, ds.inputs[used])
    z = ds.z_outputs()

    src = trajectories[:, :-1].ravel()
    dst = trajectories[:, 1:].ravel()
    states = ds.inputs[src]
    next_states = ds.inputs[dst]
    actions, masked, clipped = recover_action(states, next_states, grads[src], bound, eps_g)
    rewards = z[dst] - z[src]
    return TransitionSet(
        states=states,
        actions=actions,
        next_states=next_states,
        rewards=rewards,
        mask_count=masked.sum(axis=1),
        masked=masked,
        clipped=clipped,
        traj_id=np.repeat(np.arange(m), T - 1),
        meta={"m": m, "T": T, "a_max": bound.a_max, "eps_g": eps_g},
    )


def surrogate_hash(s: Surrogate) -> str:
    h = hashlib.sha256()
    for a in s.net.params() + [s.in_mean, s.in_std, np.array([s.out_mean, s.out_std])]:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def save_transition_set(ts: TransitionSet, path: str | Path) -> None:
    """CSV with columns s0.., a0.., sn0.., r, mask_count plus a ``.meta`` sidecar."""
    path = Path(path)
    d = ts.dim
    header = [f"s{j}" for j in range(d)] + [f"a{j}" for j in range(d)] + [f"sn{j}" for j in range(d)]
    header += ["r", "mask_count"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ts)):
            row = [repr(float(v)) for v in ts.states[i]]
            row += [repr(float(v)) for v in ts.actions[i]]
            row += [repr(float(v)) for v in ts.next_states[i]]
            row += [repr(float(ts.rewards[i])), str(int(ts.mask_count[i]))]
            w.writerow(row)
    path.with_suffix(".meta").write_text("".join(f"{k}={v}\n" for k, v in sorted(ts.meta.items())))


def load_transition_set(path: str | Path) -> TransitionSet:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    d = (data.shape[1] - 2) // 3
    meta = read_kv(path.with_suffix(".meta")) if path.with_suffix(".meta").exists() else {}
    return TransitionSet(
        states=data[:, :d].copy(),
        actions=data[:, d : 2 * d].copy(),
        next_states=data[:, 2 * d : 3 * d].copy(),
        rewards=data[:, 3 * d].copy(),
        mask_count=data[:, 3 * d + 1].astype(np.int64),
        meta=meta,
    )
