"""Quadratic regularizers for propagation and classification weights."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .numerics import ContractError
from .propagation import NetworkWeights, WeightGradient

REG_MODES = ("time_smooth", "weight_decay")


@dataclass
class RegConfig:
    """Regularization weights.

    ``mode`` selects the propagation regularizer; the classification weights
    get ``0.5 * ||L W||^2`` when ``operator_L`` is set and plain weight decay
    otherwise. ``precond_shift`` is the shift used by both preconditioners.
    """

    alpha_time: float = 0.0
    alpha_classifier: float = 0.0
    operator_L: Optional[sp.spmatrix] = None
    mode: str = "time_smooth"
    precond_shift: float = 1e-3

    def __post_init__(self):
        if self.alpha_time < 0 or self.alpha_classifier < 0:
            raise ContractError("regularization weights must be nonnegative")
        if self.mode not in REG_MODES:
            raise ContractError(f"unknown regularization mode {self.mode!r}")


def _layer_matrix(weights: NetworkWeights, theta: np.ndarray) -> np.ndarray:
    """Per-layer rows ``[vec(K_j), b_j]`` of a flat parameter vector."""
    N = weights.N
    p = weights.n_params // N - 1
    return np.hstack([theta[: N * p].reshape(N, p), theta[N * p:].reshape(N, 1)])


def _flatten_layers(P: np.ndarray) -> np.ndarray:
    return np.concatenate([P[:, :-1].reshape(-1), P[:, -1]])


def _time_laplacian(P: np.ndarray) -> np.ndarray:
    """``D^T D P`` for the first-difference operator ``D`` along layers."""
    out = np.zeros_like(P)
    if P.shape[0] > 1:
        dP = np.diff(P, axis=0)
        out[:-1] -= dP
        out[1:] += dP
    return out


def time_smooth(weights: NetworkWeights) -> tuple[float, WeightGradient]:
    """``1/(2h) sum_j (||K_j - K_{j-1}||^2 + (b_j - b_{j-1})^2)`` and its gradient."""
    P = _layer_matrix(weights, weights.flat_params())
    value = 0.5 / weights.h * float(np.sum(np.diff(P, axis=0) ** 2))
    grad = _flatten_layers(_time_laplacian(P) / weights.h)
    return value, WeightGradient.from_flat(weights, grad)


def weight_decay(weights: NetworkWeights) -> tuple[float, WeightGradient]:
    """``0.5 * sum_j ||K_j||_F^2``; biases are not penalized."""
    K = weights.kernel_stack()
    grad = WeightGradient([k.params.copy() for k in weights.kernels], np.zeros(weights.N))
    return 0.5 * float(np.sum(K * K)), grad


def propagation_reg(weights: NetworkWeights, mode: str = "time_smooth") -> tuple[float, np.ndarray]:
    """Value and flat gradient of the selected propagation regularizer."""
    fn = time_smooth if mode == "time_smooth" else weight_decay
    value, grad = fn(weights)
    return value, grad.flat()


def propagation_reg_hessian(weights: NetworkWeights, v: np.ndarray, mode: str = "time_smooth") -> np.ndarray:
    if mode == "time_smooth":
        return _flatten_layers(_time_laplacian(_layer_matrix(weights, v)) / weights.h)
    out = np.array(v, dtype=float)
    out[weights.N * (weights.n_params // weights.N - 1):] = 0.0
    return out


class TimePreconditioner:
    """Applies ``(alpha * Hess R + shift * I)^{-1}`` to flat parameter vectors."""

    def __init__(self, weights: NetworkWeights, alpha: float, mode: str = "time_smooth", shift: float = 1e-3):
        if shift <= 0:
            raise ContractError("preconditioner shift must be positive")
        self.weights = weights
        self.mode = mode
        N = weights.N
        if mode == "time_smooth":
            c = alpha / weights.h
            diag = np.full(N, 2.0 * c)
            if N > 1:
                diag[0] = diag[-1] = c
            else:
                diag[0] = 0.0
            ab = np.zeros((2, N))
            ab[1] = diag + shift
            ab[0, 1:] = -c
            self._cho = scipy.linalg.cholesky_banded(ab)
        else:
            self._kernel_scale = 1.0 / (alpha + shift)
            self._bias_scale = 1.0 / shift

    def __call__(self, v: np.ndarray) -> np.ndarray:
        P = _layer_matrix(self.weights, v)
        if self.mode == "time_smooth":
            P = scipy.linalg.cho_solve_banded((self._cho, False), P)
        else:
            P = P.copy()
            P[:, :-1] *= self._kernel_scale
            P[:, -1] *= self._bias_scale
        return _flatten_layers(P)


def _second_difference_1d(n: int) -> sp.csr_matrix:
    if n == 1:
        return sp.csr_matrix((1, 1))
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    off = -np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


@lru_cache(maxsize=8)
def neumann_laplacian(height: int, width: int, channels: int = 1) -> sp.csr_matrix:
    """5-point Laplacian (positive semidefinite sign) with Neumann boundaries.

    Pixels are ordered ``(row, column, channel)`` with the channel fastest,
    matching the layout of :class:`~stable_dnn.numerics.Conv3x3`. Each
    channel is smoothed independently. Constant images lie in the null space.
    """
    Ih, Iw, Ic = sp.identity(height), sp.identity(width), sp.identity(channels)
    L = sp.kron(_second_difference_1d(height), sp.kron(Iw, Ic)) + sp.kron(Ih, sp.kron(_second_difference_1d(width), Ic))
    return sp.csr_matrix(L)


def spatial_smooth(W, L):
    """``0.5 * sum_k ||L w_k||^2`` over the columns of ``W``.

    Returns the value, the gradient ``L^T L W`` and a Hessian-matvec callable.
    """
    W = np.asarray(W, dtype=float)
    if L.shape[1] != W.shape[0]:
        raise ContractError(f"operator with {L.shape[1]} columns applied to {W.shape[0]}-row weights")
    LW = L @ W
    value = 0.5 * float(np.sum(LW * LW))

    def hess(V):
        return L.T @ (L @ np.asarray(V, dtype=float))

    return value, L.T @ LW, hess


def classifier_reg(W, L=None):
    """Spatial smoothness when ``L`` is given, weight decay otherwise."""
    if L is not None:
        return spatial_smooth(W, L)
    W = np.asarray(W, dtype=float)
    return 0.5 * float(np.sum(W * W)), W.copy(), lambda V: np.asarray(V, dtype=float)


class SpatialPreconditioner:
    """``(L^T L + shift I)^{-1}`` applied column-wise via a cached sparse LU."""

    def __init__(self, L, shift: float = 1e-3):
        n = L.shape[1]
        self._solve = spla.factorized(sp.csc_matrix(L.T @ L + shift * sp.identity(n)))

    def __call__(self, V):
        V = np.asarray(V, dtype=float)
        if V.ndim == 1:
            return self._solve(V)
        return np.column_stack([self._solve(V[:, k]) for k in range(V.shape[1])])
