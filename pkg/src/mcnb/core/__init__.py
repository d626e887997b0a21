"""Fully-connected ReLU network on flat float64 parameter vectors.

The network is ``f(x) = W_L relu(W_{L-1} ... relu(W_1 x))`` with no biases.
Parameters live in one contiguous vector (``W_1`` row-major, then the
hidden ``m x m`` blocks, then ``W_L``); :func:`unflatten` returns views.

The hot kernels come from the compiled ``_kernels`` extension when it is
importable, otherwise from the numpy twins in ``_fallback``.  Set
``MCNB_FORCE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import _fallback

if os.environ.get("MCNB_FORCE_PYTHON") == "1":
    _k = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _k

        BACKEND = "compiled"
    except ImportError:
        _k = _fallback
        BACKEND = "python"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DimensionError(ValueError):
    """Input vector length does not match the network's input dimension."""

    def __init__(self, expected: int, actual: int):
        super().__init__(f"input dimension mismatch: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class LayoutError(ValueError):
    """Two vectors that should share a parameter layout do not."""


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    width: int
    depth: int = 2

    def __post_init__(self):
        if self.input_dim < 1 or self.width < 1 or self.depth < 2:
            raise ValueError(
                f"invalid network shape (input_dim={self.input_dim}, "
                f"width={self.width}, depth={self.depth}); need input_dim>=1, width>=1, depth>=2"
            )

    @property
    def n_params(self) -> int:
        m, d, L = self.width, self.input_dim, self.depth
        return m * d + (L - 2) * m * m + m

    @property
    def layer_shapes(self) -> list[tuple[int, ...]]:
        m = self.width
        return [(m, self.input_dim)] + [(m, m)] * (self.depth - 2) + [(1, m)]

    def _dims(self):
        return self.input_dim, self.width, self.depth


def unflatten(shape: NetworkShape, theta: np.ndarray) -> list[np.ndarray]:
    """Views of ``theta`` as the weight matrices W_1 .. W_L."""
    _check_len(shape, theta)
    out, off = [], 0
    for rows, cols in shape.layer_shapes:
        out.append(theta[off : off + rows * cols].reshape(rows, cols))
        off += rows * cols
    return out


def flatten(layers: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(w, dtype=np.float64).ravel() for w in layers])


def init_params(shape: NetworkShape, seed) -> np.ndarray:
    """Gaussian init: hidden layers N(0, 2/m), output layer N(0, 1/m)."""
    rng = np.random.default_rng(seed)
    m = shape.width
    parts = []
    for i, (rows, cols) in enumerate(shape.layer_shapes):
        var = 1.0 / m if i == shape.depth - 1 else 2.0 / m
        parts.append(rng.normal(0.0, np.sqrt(var), size=rows * cols))
    return np.concatenate(parts)


def _check_len(shape, theta):
    if theta.shape != (shape.n_params,):
        raise LayoutError(f"parameter vector has shape {theta.shape}, expected ({shape.n_params},)")


def _as_input(shape, x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != shape.input_dim:
        raise DimensionError(shape.input_dim, x.shape[-1] if x.ndim else 0)
    return x


def forward(shape: NetworkShape, theta: np.ndarray, x) -> float:
    _check_len(shape, theta)
    return _k.forward(theta, _as_input(shape, x), *shape._dims())


def backward(shape: NetworkShape, theta: np.ndarray, x) -> np.ndarray:
    """Gradient of f(x; theta) with respect to every weight."""
    return value_and_grad(shape, theta, x)[1]


def value_and_grad(shape: NetworkShape, theta: np.ndarray, x) -> tuple[float, np.ndarray]:
    _check_len(shape, theta)
    g = np.empty(shape.n_params)
    f = _k.gradient(theta, _as_input(shape, x), *shape._dims(), g)
    return f, g


def loss_and_grad(shape: NetworkShape, theta: np.ndarray, x, r: float) -> tuple[float, np.ndarray]:
    """Squared loss (f - r)^2 / 2 and its gradient (f - r) * grad f."""
    f, g = value_and_grad(shape, theta, x)
    res = f - r
    g *= res
    return 0.5 * res * res, g


def forward_many(shape: NetworkShape, thetas: np.ndarray, x) -> np.ndarray:
    """f(x; theta_i) for each row theta_i of a (n, p) array."""
    thetas = np.ascontiguousarray(thetas, dtype=np.float64)
    if thetas.ndim != 2 or thetas.shape[1] != shape.n_params:
        raise LayoutError(f"expected (n, {shape.n_params}) parameter rows, got {thetas.shape}")
    out = np.empty(thetas.shape[0])
    _k.forward_many(thetas, _as_input(shape, x), *shape._dims(), out)
    return out


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


@dataclass
class Optimizer:
    """Plain SGD or Adam with fixed constants (0.9, 0.999, 1e-8)."""

    mode: str = "adam"
    lr: float = 1e-3
    state: AdamState | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("plain-sgd", "adam"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def copy(self) -> "Optimizer":
        return Optimizer(self.mode, self.lr, None if self.state is None else self.state.copy())


def apply_step(theta: np.ndarray, grad: np.ndarray, state: AdamState | None, mode: str, lr: float) -> np.ndarray:
    """One first-order step; returns new parameters and updates ``state`` in place for adam."""
    if theta.shape != grad.shape:
        raise LayoutError(f"parameter shape {theta.shape} vs gradient shape {grad.shape}")
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if mode == "plain-sgd":
        return theta - lr * grad
    if mode != "adam":
        raise ValueError(f"unknown optimizer mode {mode!r}")
    if state is None or state.m.shape != theta.shape:
        raise LayoutError("adam step requires an AdamState matching the parameters")
    state.t += 1
    state.m *= ADAM_BETA1
    state.m += (1.0 - ADAM_BETA1) * grad
    state.v *= ADAM_BETA2
    state.v += (1.0 - ADAM_BETA2) * grad * grad
    c1 = 1.0 - ADAM_BETA1 ** state.t
    c2 = 1.0 - ADAM_BETA2 ** state.t
    return theta - lr * (state.m / c1) / (np.sqrt(state.v / c2) + ADAM_EPS)


def optimizer_step(theta: np.ndarray, grad: np.ndarray, opt: Optimizer) -> np.ndarray:
    if opt.mode == "adam" and opt.state is None:
        opt.state = AdamState.zeros(theta.shape[0])
    return apply_step(theta, grad, opt.state, opt.mode, opt.lr)


def train_pass(shape: NetworkShape, theta: np.ndarray, X: np.ndarray, r: np.ndarray, order, opt: Optimizer) -> None:
    """Per-sample steps over ``X[order]`` in sequence; updates theta in place."""
    _check_len(shape, theta)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != shape.input_dim:
        raise DimensionError(shape.input_dim, X.shape[-1])
    r = np.ascontiguousarray(r, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    if opt.mode == "plain-sgd":
        _k.sgd_pass(theta, X, r, order, opt.lr, *shape._dims())
        return
    if opt.state is None:
        opt.state = AdamState.zeros(theta.shape[0])
    st = opt.state
    st.t = _k.adam_pass(
        theta, st.m, st.v, st.t, X, r, order, opt.lr,
        ADAM_BETA1, ADAM_BETA2, ADAM_EPS, *shape._dims(),
    )


def mean_loss_grad(shape: NetworkShape, theta: np.ndarray, X: np.ndarray, r: np.ndarray, idx) -> tuple[float, np.ndarray]:
    """Mean of (f - r)^2 / 2 over rows ``X[idx]`` and its parameter gradient."""
    _check_len(shape, theta)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != shape.input_dim:
        raise DimensionError(shape.input_dim, X.shape[-1])
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("mean_loss_grad needs at least one sample")
    out = np.empty(shape.n_params)
    loss = _k.mean_loss_grad(theta, X, np.ascontiguousarray(r, dtype=np.float64), idx, *shape._dims(), out)
    return loss, out


def grad_l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise LayoutError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


__all__ = [
    "BACKEND", "AdamState", "DimensionError", "LayoutError", "NetworkShape", "Optimizer",
    "apply_step", "backward", "flatten", "forward", "forward_many", "grad_l2_distance",
    "init_params", "loss_and_grad", "mean_loss_grad", "optimizer_step", "train_pass", "unflatten", "value_and_grad",
]
