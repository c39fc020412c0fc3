"""Synthetic black-box objectives and truncated offline datasets."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

STD_FLOOR = 1e-12


class TooSmallDatasetError(ValueError):
    pass


# objectives are written for a batch of points, shape (n, d) -> (n,)


def neg_ackley(x: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    r = np.sqrt(np.sum(x * x, axis=-1) / d)
    c = np.sum(np.cos(2.0 * np.pi * x), axis=-1) / d
    return -(-20.0 * np.exp(-0.2 * r) - np.exp(c) + 20.0 + math.e)


def neg_rastrigin(x: np.ndarray) -> np.ndarray:
    return -np.sum(x * x - 10.0 * np.cos(2.0 * np.pi * x) + 10.0, axis=-1)


def neg_rosenbrock(x: np.ndarray) -> np.ndarray:
    a, b = x[..., :-1], x[..., 1:]
    return -np.sum(100.0 * (b - a * a) ** 2 + (1.0 - a) ** 2, axis=-1)


def quadratic_bowl(x: np.ndarray) -> np.ndarray:
    return -np.sum(x * x, axis=-1)


@dataclass(frozen=True)
class Task:
    name: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray]
    lo: float
    hi: float
    # documentation only, never handed to a learner
    optimum_value: float = 0.0

    @property
    def lower(self) -> np.ndarray:
        return np.full(self.dim, self.lo)

    @property
    def upper(self) -> np.ndarray:
        return np.full(self.dim, self.hi)

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)


TASKS: dict[str, Task] = {
    "neg-ackley": Task("neg-ackley", 10, neg_ackley, -5.0, 5.0),
    "neg-rastrigin": Task("neg-rastrigin", 10, neg_rastrigin, -5.12, 5.12),
    "neg-rosenbrock": Task("neg-rosenbrock", 8, neg_rosenbrock, -2.048, 2.048),
    "quadratic-bowl": Task("quadratic-bowl", 5, quadratic_bowl, -2.0, 2.0),
}


def get_task(name: str) -> Task:
    try:
        return TASKS[name]
    except KeyError:
        raise KeyError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


def oracle_eval(task: Task, x) -> float | np.ndarray:
    """Raw objective value(s). Points outside the box are clamped first."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != task.dim:
        raise ValueError(f"{task.name} expects dimension {task.dim}, got {x.shape[-1]}")
    if np.isnan(x).any():
        raise ValueError("NaN in oracle input")
    clamped = task.clamp(x)
    if not np.array_equal(clamped, x):
        log.debug("oracle_eval: clamped %d coordinates into the box", int(np.sum(clamped != x)))
    y = task.fn(clamped)
    return float(y) if np.ndim(y) == 0 else y


@dataclass(frozen=True)
class OfflineDataset:
    task_name: str
    inputs: np.ndarray
    outputs: np.ndarray
    pool_min: float
    pool_max: float
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: float
    out_std: float
    lo: np.ndarray
    hi: np.ndarray
    seed: int = 0
    keep_percentile: float = 100.0

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def z_outputs(self) -> np.ndarray:
        return (self.outputs - self.out_mean) / self.out_std


def _safe_std(s):
    # a degenerate column gets unit scale instead of a zero divisor
    return np.where(s < STD_FLOOR, 1.0, s)


def make_dataset(
    task_name: str,
    inputs: np.ndarray,
    outputs: np.ndarray,
    pool_min: float,
    pool_max: float,
    lo,
    hi,
    seed: int = 0,
    keep_percentile: float = 100.0,
) -> OfflineDataset:
    """Build a dataset from arrays, computing z-score statistics on ``inputs``/``outputs``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    outputs = np.asarray(outputs, dtype=np.float64).ravel()
    if inputs.shape[0] < 2 or inputs.shape[0] != outputs.shape[0]:
        raise TooSmallDatasetError("a dataset needs at least two matching rows")
    d = inputs.shape[1]
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (d,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (d,)).copy()
    return OfflineDataset(
        task_name=task_name,
        inputs=inputs,
        outputs=outputs,
        pool_min=float(pool_min),
        pool_max=float(pool_max),
        in_mean=inputs.mean(axis=0),
        in_std=_safe_std(inputs.std(axis=0)),
        out_mean=float(outputs.mean()),
        out_std=float(_safe_std(outputs.std())),
        lo=lo,
        hi=hi,
        seed=seed,
        keep_percentile=keep_percentile,
    )


def generate_offline_dataset(task: Task, pool_size: int, keep_percentile: float, seed: int) -> OfflineDataset:
    """Sample a uniform pool, then keep its lowest-scoring ``keep_percentile`` percent.

    Pool min/max are recorded for score normalization; everything else the
    learner sees comes from the kept subset. Ties at the cut go to the
    earlier sample.
    """
    if pool_size < 100:
        raise ValueError("pool_size must be at least 100")
    if not 0 < keep_percentile <= 100:
        raise ValueError("keep_percentile must be in (0, 100]")
    rng = np.random.default_rng(seed)
    pool = rng.uniform(task.lo, task.hi, size=(pool_size, task.dim))
    y = task.fn(pool)
    keep = int(round(pool_size * keep_percentile / 100.0))
    if keep < 50:
        raise TooSmallDatasetError(f"only {keep} points survive keep_percentile={keep_percentile}")
    order = np.argsort(y, kind="stable")
    kept = np.sort(order[:keep])
    return make_dataset(
        task.name,
        pool[kept],
        y[kept],
        float(y.min()),
        float(y.max()),
        task.lo,
        task.hi,
        seed=seed,
        keep_percentile=keep_percentile,
    )


def normalize_score(y, ds: OfflineDataset):
    span = ds.pool_max - ds.pool_min
    if not span > 0:
        raise ValueError("degenerate pool range")
    if np.ndim(y) == 0:
        return (float(y) - ds.pool_min) / span
    return (np.asarray(y, dtype=np.float64) - ds.pool_min) / span


def d_best(ds: OfflineDataset) -> tuple[float, float]:
    """Best offline value, raw and normalized."""
    raw = float(np.max(ds.outputs))
    return raw, float(normalize_score(raw, ds))


# ---------------------------------------------------------------- file io


def save_dataset(ds: OfflineDataset, csv_path: str | Path, extra_meta: dict | None = None) -> Path:
    """Write ``<name>.csv`` plus a ``<name>.meta`` key=value sidecar. Returns the sidecar path."""
    csv_path = Path(csv_path)
    d = ds.dim
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(d)] + ["y"])
        for x, y in zip(ds.inputs, ds.outputs):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])
    meta = {
        "task": ds.task_name,
        "d": d,
        "n": ds.n,
        "pool_min": repr(ds.pool_min),
        "pool_max": repr(ds.pool_max),
        "in_mean": ",".join(repr(float(v)) for v in ds.in_mean),
        "in_std": ",".join(repr(float(v)) for v in ds.in_std),
        "out_mean": repr(ds.out_mean),
        "out_std": repr(ds.out_std),
        "lo": ",".join(repr(float(v)) for v in ds.lo),
        "hi": ",".join(repr(float(v)) for v in ds.hi),
        "seed": ds.seed,
        "keep_percentile": repr(float(ds.keep_percentile)),
    }
    meta.update(extra_meta or {})
    meta_path = csv_path.with_suffix(".meta")
    meta_path.write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return meta_path


def read_kv(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_dataset(csv_path: str | Path) -> OfflineDataset:
    csv_path = Path(csv_path)
    meta = read_kv(csv_path.with_suffix(".meta"))
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    vec = lambda s: np.array([float(v) for v in s.split(",")])  # noqa: E731
    return OfflineDataset(
        task_name=meta["task"],
        inputs=data[:, :-1].copy(),
        outputs=data[:, -1].copy(),
        pool_min=float(meta["pool_min"]),
        pool_max=float(meta["pool_max"]),
        in_mean=vec(meta["in_mean"]),
        in_std=vec(meta["in_std"]),
        out_mean=float(meta["out_mean"]),
        out_std=float(meta["out_std"]),
        lo=vec(meta["lo"]),
        hi=vec(meta["hi"]),
        seed=int(meta["seed"]),
        keep_percentile=float(meta["keep_percentile"]),
    )
