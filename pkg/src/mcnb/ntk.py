"""Neural tangent kernel of the bias-free ReLU network, plus complexity terms.

The layer recursion uses the closed-form arc-cosine moments of a bivariate
normal, so no sampling is involved in :func:`ntk_matrix`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import core

EIG_TOL = 1e-8
UNIT_TOL = 1e-8


class SingularKernelError(ValueError):
    """H is numerically singular, so h^T H^-1 h is unbounded."""


def relu_moments(sigma_ii, sigma_ij, sigma_jj):
    """E[relu(a) relu(b)] and E[step(a) step(b)] for (a, b) ~ N(0, [[s_ii, s_ij], [s_ij, s_jj]]).

    Works elementwise on arrays.  Returns ``(m1, m2)``.
    """
    sii = np.asarray(sigma_ii, dtype=np.float64)
    sjj = np.asarray(sigma_jj, dtype=np.float64)
    if np.any(sii <= 0) or np.any(sjj <= 0):
        raise ValueError("relu_moments needs strictly positive variances")
    norm = np.sqrt(sii * sjj)
    cos = np.clip(np.asarray(sigma_ij, dtype=np.float64) / norm, -1.0, 1.0)
    theta = np.arccos(cos)
    m1 = norm * (np.sin(theta) + (np.pi - theta) * cos) / (2 * np.pi)
    m2 = (np.pi - theta) / (2 * np.pi)
    if m1.ndim == 0:
        return float(m1), float(m2)
    return m1, m2


@dataclass
class NtkMatrix:
    H: np.ndarray
    contexts: np.ndarray
    depth: int

    def __array__(self, dtype=None, copy=None):
        return self.H if dtype is None else self.H.astype(dtype)


def ntk_matrix(contexts, depth: int) -> NtkMatrix:
    X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("need at least one context")
    if depth < 2:
        raise ValueError("depth must be >= 2")
    norms = np.linalg.norm(X, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError("ntk_matrix expects unit-norm contexts")
    sigma = X @ X.T
    H = sigma.copy()
    # one recursion step per hidden layer
    for _ in range(depth - 1):
        diag = np.diag(sigma).copy()
        m1, m2 = relu_moments(diag[:, None], sigma, diag[None, :])
        sigma_next = 2.0 * m1
        H = 2.0 * H * m2 + sigma_next
        sigma = sigma_next
    out = (H + sigma) / 2.0
    out = (out + out.T) / 2.0
    return NtkMatrix(out, X, depth)


def min_eigenvalue(H) -> float:
    H = np.asarray(H, dtype=np.float64)
    if not np.all(np.isfinite(H)):
        raise ValueError("matrix has non-finite entries")
    return float(linalg.eigvalsh(H, subset_by_index=[0, 0])[0])


def effective_dimension(H, t_times_k: int) -> float:
    """log det(I + H) / log(1 + TK), via a Cholesky factor of I + H."""
    H = np.asarray(H, dtype=np.float64)
    try:
        c = linalg.cholesky(np.eye(H.shape[0]) + H, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("I + H is not positive definite; the kernel matrix is corrupt") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    return logdet / math.log1p(t_times_k)


def s_complexity(H, h) -> float:
    """sqrt(h^T H^{-1} h); raises SingularKernelError when H is singular."""
    H = np.asarray(H, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if not np.any(h):
        return 0.0
    lam = min_eigenvalue(H)
    if lam <= EIG_TOL:
        raise SingularKernelError(f"S unbounded: min eigenvalue {lam:.3e} <= {EIG_TOL:g}")
    y = linalg.solve(H, h, assume_a="pos")
    return math.sqrt(max(float(h @ y), 0.0))


def empirical_gram(contexts, shape: core.NetworkShape, seed) -> tuple[np.ndarray, float]:
    """Gradient Gram matrix at a fresh init and its Frobenius gap to the analytic NTK.

    The network's output layer has variance 1/m rather than 2/m, which is
    where the final halving in :func:`ntk_matrix` comes from; as the width
    grows the gradient inner products converge to that matrix.
    """
    X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    theta = core.init_params(shape, seed)
    G = np.stack([core.backward(shape, theta, x) for x in X])
    gram = G @ G.T
    H = ntk_matrix(X, shape.depth).H
    return gram, float(np.linalg.norm(gram - H))


@dataclass
class ComplexityReport:
    min_eigenvalue: float
    effective_dimension: float
    s_complexity: float | None
    frobenius_gap: float | None = None
    condition_number: float | None = None

    def to_json(self) -> dict:
        out = {
            "min_eigenvalue": self.min_eigenvalue,
            "effective_dimension": self.effective_dimension,
            "s_complexity": "unbounded" if self.s_complexity is None else self.s_complexity,
        }
        if self.frobenius_gap is not None:
            out["frobenius_gap"] = self.frobenius_gap
        if self.condition_number is not None:
            out["condition_number"] = self.condition_number
        return out


def complexity_report(contexts, h, depth: int, t_times_k: int | None = None,
                      width: int | None = None, seed=0) -> ComplexityReport:
    K = ntk_matrix(contexts, depth)
    H = K.H
    lam = min_eigenvalue(H)
    tk = H.shape[0] if t_times_k is None else t_times_k
    try:
        s = s_complexity(H, h)
    except SingularKernelError:
        s = None
    lam_max = float(linalg.eigvalsh(H)[-1])
    cond = lam_max / lam if lam > EIG_TOL else None
    gap = None
    if width is not None:
        shape = core.NetworkShape(K.contexts.shape[1], width, depth)
        gap = empirical_gram(K.contexts, shape, seed)[1]
    return ComplexityReport(lam, effective_dimension(H, tk), s, gap, cond)
