"""Feed-forward ReLU networks with hand-written backprop and Adam.

Everything is float64 numpy. Networks are treated as values: updates
return fresh arrays and never write into an existing parameter array, so
a reference to an old ``Mlp`` is a valid snapshot.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_VERSION = "pgs-ckpt/1"


class InvalidArchitectureError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class NumericFailureError(FloatingPointError):
    pass


@dataclass
class Mlp:
    """Dense network: ReLU on hidden layers, identity on the output.

    ``weights[k]`` has shape ``(layer_dims[k+1], layer_dims[k])``.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_params(cls, layer_dims: Sequence[int], params: Sequence[np.ndarray]) -> "Mlp":
        return cls(tuple(layer_dims), list(params[0::2]), list(params[1::2]))

    def copy(self) -> "Mlp":
        return Mlp(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def _check_dims(layer_dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise InvalidArchitectureError(f"need at least two positive layer sizes, got {list(layer_dims)}")
    return dims


def mlp_init(layer_dims: Sequence[int], seed: int) -> Mlp:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    dims = _check_dims(layer_dims)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(dims, weights, biases)


def mlp_zeros(layer_dims: Sequence[int]) -> Mlp:
    dims = _check_dims(layer_dims)
    return Mlp(
        dims,
        [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
        [np.zeros(o) for o in dims[1:]],
    )


def _as_batch(m: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != m.in_dim:
        raise DimensionError(f"expected input width {m.in_dim}, got shape {x.shape}")
    return x, single


def forward_cached(m: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batch forward pass; returns the output and the per-layer inputs for backprop."""
    acts = [x]
    h = x
    last = len(m.weights) - 1
    for k, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ w.T + b
        h = z if k == last else np.maximum(z, 0.0)
        if k != last:
            acts.append(h)
    return h, acts


def backward(
    m: Mlp, acts: list[np.ndarray], grad_out: np.ndarray, param_grads: bool = True
) -> tuple[list[np.ndarray], np.ndarray]:
    """Backprop ``grad_out`` (dL/d output, batch-shaped) through the network.

    Returns parameter gradients in ``Mlp.params()`` order (empty when
    ``param_grads`` is False) and dL/d input.
    The ReLU derivative at a pre-activation of exactly 0 is taken as 0;
    a hidden activation is zero iff its pre-activation was <= 0, so the
    mask ``act > 0`` implements that convention.
    """
    grads: list[np.ndarray] = [None] * (2 * len(m.weights)) if param_grads else []  # type: ignore[list-item]
    g = grad_out
    for k in range(len(m.weights) - 1, -1, -1):
        a_in = acts[k]
        if param_grads:
            grads[2 * k] = g.T @ a_in
            grads[2 * k + 1] = g.sum(axis=0)
        g = g @ m.weights[k]
        if k > 0:
            g = g * (a_in > 0.0)
    return grads, g


def mlp_forward(m: Mlp, x) -> np.ndarray:
    xb, single = _as_batch(m, x)
    out, _ = forward_cached(m, xb)
    return out[0] if single else out


def mlp_input_gradient(m: Mlp, x) -> np.ndarray:
    """d(output)/d(input) for a scalar-output network; batched inputs give per-row gradients."""
    if m.out_dim != 1:
        raise DimensionError("input gradient needs a scalar-output network")
    xb, single = _as_batch(m, x)
    out, acts = forward_cached(m, xb)
    _, gx = backward(m, acts, np.ones_like(out))
    return gx[0] if single else gx


def finite_diff_check(m: Mlp, x, h: float = 1e-4) -> float:
    """Max relative error between central differences and ``mlp_input_gradient``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    analytic = mlp_input_gradient(m, x)
    numeric = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        numeric[j] = (mlp_forward(m, x + e)[0] - mlp_forward(m, x - e)[0]) / (2.0 * h)
    denom = np.maximum(np.abs(analytic), 1e-8)
    return float(np.max(np.abs(numeric - analytic) / denom))


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 3e-4, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_update(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], opt: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam step. Returns new parameter arrays and a new state."""
    t = opt.step + 1
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
        new_p.append(p - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(opt.lr, opt.beta1, opt.beta2, opt.eps, t, new_m, new_v)


def mse_and_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def train_step(m: Mlp, opt: AdamState, batch: tuple[np.ndarray, np.ndarray]) -> tuple[Mlp, AdamState, float]:
    """One Adam step on mean squared error; the returned loss is pre-update."""
    inputs, targets = batch
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape[0] == 0:
        raise ValueError("empty batch")
    xb, _ = _as_batch(m, inputs)
    targets = targets.reshape(xb.shape[0], m.out_dim)
    out, acts = forward_cached(m, xb)
    loss, g = mse_and_grad(out, targets)
    if not math.isfinite(loss):
        raise NumericFailureError(f"non-finite loss {loss}")
    grads, _ = backward(m, acts, g)
    if not opt.m:
        opt = AdamState.for_params(m.params(), lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
    new_params, opt = adam_update(m.params(), grads, opt)
    return Mlp.from_params(m.layer_dims, new_params), opt, loss


def polyak(target: Mlp, source: Mlp, tau: float) -> Mlp:
    return Mlp.from_params(
        target.layer_dims, [(1.0 - tau) * t + tau * s for t, s in zip(target.params(), source.params())]
    )


# --------------------------------------------------------------------------
# checkpoint container
#
# line 1: version tag; line 2: JSON header; then raw little-endian float64.
# Each network is written as its layer_dims (in the header) followed by every
# layer's weight matrix (row-major) and then its bias vector, layer by layer.
# Extra named arrays follow the networks in header order.


def save_checkpoint(
    path: str | Path,
    nets: dict[str, Mlp],
    arrays: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    arrays = arrays or {}
    header = {
        "nets": {name: list(net.layer_dims) for name, net in nets.items()},
        "arrays": {name: list(np.shape(a)) for name, a in arrays.items()},
        "meta": meta or {},
    }
    buf = io.BytesIO()
    buf.write((CHECKPOINT_VERSION + "\n").encode())
    buf.write((json.dumps(header, sort_keys=True) + "\n").encode())
    # payload follows the (sorted) header order
    for _, net in sorted(nets.items()):
        for w, b in zip(net.weights, net.biases):
            buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    for _, a in sorted(arrays.items()):
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, Mlp], dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl1 = raw.index(b"\n")
    tag = raw[:nl1].decode()
    if tag != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {tag!r}")
    nl2 = raw.index(b"\n", nl1 + 1)
    header = json.loads(raw[nl1 + 1 : nl2])
    payload = memoryview(raw)[nl2 + 1 :]
    pos = 0

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(payload, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * count
        return a

    nets = {}
    for name, dims in header["nets"].items():
        dims = _check_dims(dims)
        ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            ws.append(take((fan_out, fan_in)))
            bs.append(take((fan_out,)))
        nets[name] = Mlp(dims, ws, bs)
    arrays = {name: take(tuple(shape)) for name, shape in header["arrays"].items()}
    if pos != len(payload):
        raise ValueError("checkpoint payload length mismatch")
    return nets, arrays, header["meta"]
