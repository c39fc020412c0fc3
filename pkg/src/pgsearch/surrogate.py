"""MSE-regression surrogate of the objective, with raw-coordinate gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    AdamState,
    DimensionError,
    Mlp,
    NumericFailureError,
    load_checkpoint,
    mlp_forward,
    mlp_init,
    mlp_input_gradient,
    save_checkpoint,
    train_step,
)
from .tasks import OfflineDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SurrogateConfig:
    hidden: int = 256
    layers: int = 2
    epochs: int = 50
    batch_size: int = 128
    lr: float = 3e-4
    seed: int = 0


@dataclass
class Surrogate:
    net: Mlp
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: float
    out_std: float
    lo: np.ndarray
    hi: np.ndarray
    mse_log: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.net.in_dim

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.in_mean) / self.in_std

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)


class SurrogateTrainingError(NumericFailureError):
    def __init__(self, msg: str, mse_log: list[float]):
        super().__init__(msg)
        self.mse_log = mse_log


def train_surrogate(ds: OfflineDataset, cfg: SurrogateConfig = SurrogateConfig()) -> Surrogate:
    """Fit a ReLU MLP to z-scored (x, y) with shuffled mini-batch Adam for a fixed epoch count."""
    xs = (ds.inputs - ds.in_mean) / ds.in_std
    ys = ((ds.outputs - ds.out_mean) / ds.out_std)[:, None]
    dims = [ds.dim] + [cfg.hidden] * cfg.layers + [1]
    net = mlp_init(dims, cfg.seed)
    opt = AdamState.for_params(net.params(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    mse_log: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(ds.n)
        total = 0.0
        for start in range(0, ds.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                net, opt, loss = train_step(net, opt, (xs[idx], ys[idx]))
            except NumericFailureError as exc:
                raise SurrogateTrainingError(f"epoch {epoch}: {exc}", mse_log) from exc
            total += loss * idx.size
        mse_log.append(total / ds.n)
        log.debug("surrogate epoch %d mse %.6g", epoch + 1, mse_log[-1])
    return Surrogate(net, ds.in_mean.copy(), ds.in_std.copy(), ds.out_mean, ds.out_std, ds.lo.copy(), ds.hi.copy(), mse_log)


def training_mse(s: Surrogate, ds: OfflineDataset) -> float:
    """Mean squared error in z-scored output units over the whole dataset."""
    pred = mlp_forward(s.net, s.normalize(ds.inputs))[:, 0]
    z = (ds.outputs - s.out_mean) / s.out_std
    return float(np.mean((pred - z) ** 2))


def _check(s: Surrogate, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != s.dim:
        raise DimensionError(f"surrogate expects dimension {s.dim}, got {x.shape[-1]}")
    return x


def surrogate_value(s: Surrogate, x_raw) -> float | np.ndarray:
    x = _check(s, x_raw)
    out = s.out_mean + s.out_std * mlp_forward(s.net, s.normalize(x))[..., 0]
    return float(out) if out.ndim == 0 else out


def surrogate_grad(s: Surrogate, x_raw) -> np.ndarray:
    """Gradient of ``surrogate_value`` w.r.t. raw x (rows of a batch are independent)."""
    x = _check(s, x_raw)
    return (s.out_std / s.in_std) * mlp_input_gradient(s.net, s.normalize(x))


def save_surrogate(s: Surrogate, path: str | Path, meta: dict | None = None) -> None:
    save_checkpoint(
        path,
        {"net": s.net},
        {
            "in_mean": s.in_mean,
            "in_std": s.in_std,
            "out_mean": np.array(s.out_mean),
            "out_std": np.array(s.out_std),
            "lo": s.lo,
            "hi": s.hi,
            "mse_log": np.array(s.mse_log),
        },
        meta,
    )


def load_surrogate(path: str | Path) -> Surrogate:
    nets, arrays, _ = load_checkpoint(path)
    return Surrogate(
        nets["net"],
        arrays["in_mean"],
        arrays["in_std"],
        float(arrays["out_mean"]),
        float(arrays["out_std"]),
        arrays["lo"],
        arrays["hi"],
        list(arrays["mse_log"]),
    )
