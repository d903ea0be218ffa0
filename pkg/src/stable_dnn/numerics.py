"""Linear operators and a preconditioned conjugate gradient solver.

All operators act on row-stacked data by right multiplication: for a batch
``X`` of shape ``(s, rows)`` the product ``op.apply(X)`` is ``X @ A`` with
``A`` of shape ``(rows, cols)``, and ``op.apply_transpose(G)`` is ``G @ A.T``.
This matches the row-wise storage of features used throughout the package.

Every operator owns a parameter array (``op.params``) and can report the
gradient of ``<G, X @ A(params)>`` with respect to it, which is what the
adjoint sweeps in :mod:`stable_dnn.propagation` consume.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Union

import numpy as np


class ContractError(ValueError):
    """Raised when arguments violate a documented shape or value contract."""


class NumericalBreakdown(ArithmeticError):
    """Raised when a computation produces non-finite values."""


def _check_rows(X: np.ndarray, rows: int, what: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != rows:
        raise ContractError(f"{what}: expected (s, {rows}) input, got {X.shape}")
    return X


class LinearOperator:
    """Base class; subclasses fill in the linear action and parametrization."""

    shape: tuple[int, int]

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    @property
    def params(self) -> np.ndarray:
        raise NotImplementedError

    def with_params(self, params: np.ndarray) -> "LinearOperator":
        raise NotImplementedError

    def apply(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_transpose(self, G: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def param_grad(self, X: np.ndarray, G: np.ndarray) -> np.ndarray:
        """Gradient of ``<G, X @ A>`` with respect to ``self.params``."""
        raise NotImplementedError

    def param_tangent(self, dparams: np.ndarray) -> "LinearOperator":
        """Operator ``dA`` such that ``A(p + e dp) = A(p) + e dA + O(e^2)``."""
        raise NotImplementedError

    def materialize(self) -> np.ndarray:
        """Dense ``(rows, cols)`` matrix of the operator."""
        return self.apply(np.eye(self.rows))

    def frobenius_norm(self) -> float:
        return float(np.linalg.norm(self.materialize()))

    def kind(self) -> str:
        return type(self).__name__


class Dense(LinearOperator):
    def __init__(self, K):
        K = np.array(K, dtype=float)
        if K.ndim != 2:
            raise ContractError(f"Dense kernel must be 2-D, got shape {K.shape}")
        self.K = K
        self.shape = K.shape

    @property
    def params(self) -> np.ndarray:
        return self.K

    def with_params(self, params):
        return Dense(np.reshape(params, self.shape))

    def apply(self, X):
        return _check_rows(X, self.rows, "Dense.apply") @ self.K

    def apply_transpose(self, G):
        return _check_rows(G, self.cols, "Dense.apply_transpose") @ self.K.T

    def param_grad(self, X, G):
        return X.T @ G

    def param_tangent(self, dparams):
        return Dense(np.reshape(dparams, self.shape))

    def materialize(self):
        return self.K.copy()

    def frobenius_norm(self):
        return float(np.linalg.norm(self.K))


class AntisymmetricView(LinearOperator):
    """Applies ``(B - B^T - gamma I) / 2`` for a square base operator ``B``.

    The base is usually :class:`Dense`, but any square operator works
    (a :class:`Conv3x3` base gives the antisymmetric convolution network).
    """

    def __init__(self, base, gamma: float = 0.0):
        if not isinstance(base, LinearOperator):
            base = Dense(base)
        if base.rows != base.cols:
            raise ContractError(f"antisymmetric view needs a square base, got {base.shape}")
        if gamma < 0:
            raise ContractError("gamma must be nonnegative")
        self.base = base
        self.gamma = float(gamma)
        self.shape = base.shape
        self._fused = self._fuse() if isinstance(base, Conv3x3) else None

    def _fuse(self):
        # the transpose of a zero-padded 3x3 convolution is the convolution with the
        # flipped, channel-swapped stencil, so the whole view is a single convolution
        S = self.base.S
        A = 0.5 * (S - _flip_stencil(S))
        A[1, 1] -= 0.5 * self.gamma * np.eye(S.shape[2])
        At = -A
        At[1, 1] -= self.gamma * np.eye(S.shape[2])
        H, W = self.base.height, self.base.width
        return Conv3x3(A, H, W), Conv3x3(At, H, W)

    @property
    def params(self):
        return self.base.params

    def with_params(self, params):
        return AntisymmetricView(self.base.with_params(params), self.gamma)

    def apply(self, X):
        X = _check_rows(X, self.rows, "AntisymmetricView.apply")
        if self._fused is not None:
            return self._fused[0].apply(X)
        out = 0.5 * (self.base.apply(X) - self.base.apply_transpose(X))
        if self.gamma:
            out -= 0.5 * self.gamma * X
        return out

    def apply_transpose(self, G):
        G = _check_rows(G, self.cols, "AntisymmetricView.apply_transpose")
        if self._fused is not None:
            return self._fused[1].apply(G)
        out = 0.5 * (self.base.apply_transpose(G) - self.base.apply(G))
        if self.gamma:
            out -= 0.5 * self.gamma * G
        return out

    def param_grad(self, X, G):
        # <G, X B^T> equals base.param_grad(G, X)
        P = self.base.param_grad(X, G)
        if isinstance(self.base, Dense):
            return 0.5 * (P - P.T)
        if isinstance(self.base, Conv3x3):
            return 0.5 * (P - _flip_stencil(P))
        return 0.5 * (P - self.base.param_grad(G, X))

    def param_tangent(self, dparams):
        return AntisymmetricView(self.base.param_tangent(dparams), 0.0)

    def materialize(self):
        B = self.base.materialize()
        M = (B - B.T) / 2
        M[np.diag_indices_from(M)] -= self.gamma / 2
        return M


class NegDef(LinearOperator):
    """Applies ``-C^T C``; symmetric negative semidefinite for every ``C``."""

    def __init__(self, C):
        C = np.array(C, dtype=float)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ContractError(f"NegDef factor must be square, got {C.shape}")
        self.C = C
        self.shape = C.shape

    @property
    def params(self):
        return self.C

    def with_params(self, params):
        return NegDef(np.reshape(params, self.shape))

    def apply(self, X):
        X = _check_rows(X, self.rows, "NegDef.apply")
        # A is symmetric: X A = -(X C^T) C
        return -(X @ self.C.T) @ self.C

    def apply_transpose(self, G):
        return self.apply(G)

    def param_grad(self, X, G):
        M = X.T @ G
        return -self.C @ (M + M.T)

    def param_tangent(self, dparams):
        dC = np.reshape(dparams, self.shape)
        return Dense(-(dC.T @ self.C + self.C.T @ dC))

    def materialize(self):
        return -self.C.T @ self.C


class Conv3x3(LinearOperator):
    """Zero-padded 3x3 convolution, fully connected across channels.

    Rows of the input are images flattened in ``(height, width, channel)``
    order. ``stencils`` has shape ``(3, 3, channels_in, channels_out)`` and

        out[i, j, o] = sum_{a, b, c} S[a, b, c, o] * x[i + a - 1, j + b - 1, c]

    with pixels outside the image treated as zero.
    """

    def __init__(self, stencils, image_height: int, image_width: int):
        S = np.array(stencils, dtype=float)
        if S.ndim != 4 or S.shape[:2] != (3, 3):
            raise ContractError(f"stencils must have shape (3, 3, cin, cout), got {S.shape}")
        self.S = S
        self.height = int(image_height)
        self.width = int(image_width)
        self.channels_in, self.channels_out = S.shape[2], S.shape[3]
        pix = self.height * self.width
        self.shape = (pix * self.channels_in, pix * self.channels_out)

    @property
    def params(self):
        return self.S

    def with_params(self, params):
        return Conv3x3(np.reshape(params, self.S.shape), self.height, self.width)

    def param_tangent(self, dparams):
        return self.with_params(dparams)

    def _images(self, X, channels):
        return X.reshape(X.shape[0], self.height, self.width, channels)

    def apply(self, X):
        X = _check_rows(X, self.rows, "Conv3x3.apply")
        H, W = self.height, self.width
        xp = np.pad(self._images(X, self.channels_in), ((0, 0), (1, 1), (1, 1), (0, 0)))
        out = np.zeros((X.shape[0], H, W, self.channels_out))
        for a in range(3):
            for b in range(3):
                out += xp[:, a:a + H, b:b + W, :] @ self.S[a, b]
        return out.reshape(X.shape[0], -1)

    def apply_transpose(self, G):
        G = _check_rows(G, self.cols, "Conv3x3.apply_transpose")
        H, W = self.height, self.width
        g = self._images(G, self.channels_out)
        buf = np.zeros((G.shape[0], H + 2, W + 2, self.channels_in))
        for a in range(3):
            for b in range(3):
                buf[:, a:a + H, b:b + W, :] += g @ self.S[a, b].T
        return buf[:, 1:H + 1, 1:W + 1, :].reshape(G.shape[0], -1)

    def param_grad(self, X, G):
        H, W = self.height, self.width
        xp = np.pad(self._images(X, self.channels_in), ((0, 0), (1, 1), (1, 1), (0, 0)))
        g = self._images(G, self.channels_out).reshape(-1, self.channels_out)
        grad = np.empty_like(self.S)
        for a in range(3):
            for b in range(3):
                patch = xp[:, a:a + H, b:b + W, :].reshape(-1, self.channels_in)
                grad[a, b] = patch.T @ g
        return grad


def _flip_stencil(S):
    """Stencil of the transposed convolution: spatially flipped, channels swapped."""
    return np.ascontiguousarray(S[::-1, ::-1].transpose(0, 1, 3, 2))


def operator_apply(op: LinearOperator, X) -> np.ndarray:
    return op.apply(X)


def operator_apply_transpose(op: LinearOperator, X) -> np.ndarray:
    return op.apply_transpose(X)


Preconditioner = Union[LinearOperator, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class PcgConfig:
    max_iterations: int = 20
    relative_tolerance: float = 1e-2
    preconditioner: Optional[Preconditioner] = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ContractError("max_iterations must be at least 1")
        if not 0.0 < self.relative_tolerance < 1.0:
            raise ContractError("relative_tolerance must lie in (0, 1)")


class PcgResult(NamedTuple):
    solution: np.ndarray
    iterations: int
    residual: float
    converged: bool
    breakdown: bool


def _as_callable(M: Optional[Preconditioner]) -> Optional[Callable[[np.ndarray], np.ndarray]]:
    if M is None or callable(M) and not isinstance(M, LinearOperator):
        return M
    return lambda r: M.apply(r[None, :])[0]


def pcg_solve(matvec: Callable[[np.ndarray], np.ndarray], rhs, config: PcgConfig = PcgConfig()) -> PcgResult:
    """Solve ``A x = rhs`` for symmetric positive semidefinite ``A``.

    Starts from ``x = 0``. Iteration stops when ``||r|| <= tol * ||rhs||``, when
    ``max_iterations`` is reached, or when a direction of non-positive
    curvature shows up; in the last case the current iterate is returned with
    ``breakdown=True`` (truncated CG).
    """
    b = np.asarray(rhs, dtype=float)
    if b.ndim != 1:
        raise ContractError(f"rhs must be a vector, got shape {b.shape}")
    precond = _as_callable(config.preconditioner)
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return PcgResult(x, 0, 0.0, True, False)
    r = b.copy()
    z = precond(r) if precond else r
    p = z.copy()
    rz = r @ z
    rel = 1.0
    for it in range(1, config.max_iterations + 1):
        Ap = np.asarray(matvec(p), dtype=float)
        if Ap.shape != b.shape:
            raise ContractError(f"matvec returned shape {Ap.shape}, expected {b.shape}")
        if not np.all(np.isfinite(Ap)):
            raise NumericalBreakdown(f"non-finite matvec in PCG iteration {it}")
        curv = p @ Ap
        if curv <= 0.0:
            return PcgResult(x, it - 1, rel, False, True)
        alpha = rz / curv
        x = x + alpha * p
        r = r - alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        if not np.isfinite(rel):
            raise NumericalBreakdown(f"non-finite residual in PCG iteration {it}")
        if rel <= config.relative_tolerance:
            return PcgResult(x, it, float(rel), True, False)
        z = precond(r) if precond else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return PcgResult(x, config.max_iterations, float(rel), False, False)
