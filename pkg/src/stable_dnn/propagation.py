"""Forward propagation schemes and their exact first derivatives.

Four schemes are supported, all written for row-stacked features ``Y``
(one example per row) and per-layer operators ``K_j`` acting by right
multiplication, see :mod:`stable_dnn.numerics`:

``euler``     ``Y+ = Y + h s(Y K + b)``
``antisym``   the same recurrence with ``K`` an :class:`AntisymmetricView`,
              i.e. ``Y+ = Y + h s(Y (K - K^T - gI)/2 + b)``
``leapfrog``  ``Y+ = 2Y - Y- + h^2 s(Y K + b)`` with ``Y_{-1} = 0``
``verlet``    ``Z+ = Z - h s(Y K + b)``, ``Y+ = Y + h s(Z+ K^T + b)``, ``Z_{-1/2} = 0``

Gradients are computed by a backward sweep through the stored trace
(:func:`vjp`), directional derivatives by a forward sweep (:func:`jvp`).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .activations import Activation, TanH, get_activation
from .numerics import (AntisymmetricView, ContractError, Dense, LinearOperator, NegDef,
                       NumericalBreakdown)

SCHEMES = ("euler", "antisym", "leapfrog", "verlet")


class DivergenceError(NumericalBreakdown):
    """Forward propagation produced non-finite states."""

    def __init__(self, layer: int, scheme: str):
        super().__init__(f"{scheme} forward propagation diverged at layer {layer}")
        self.layer = layer
        self.scheme = scheme


@dataclass
class NetworkWeights:
    scheme: str
    h: float
    kernels: list[LinearOperator]
    biases: np.ndarray
    gamma: float = 0.0
    activation: Activation = field(default_factory=TanH)

    def __post_init__(self):
        self.biases = np.array(self.biases, dtype=float).reshape(-1)
        self.activation = get_activation(self.activation)
        self.kernels = list(self.kernels)
        self.validate()

    def validate(self):
        if self.scheme not in SCHEMES:
            raise ContractError(f"unknown scheme {self.scheme!r}; choose from {', '.join(SCHEMES)}")
        if self.N < 1:
            raise ContractError("a network needs at least one layer")
        if len(self.biases) != self.N:
            raise ContractError(f"{self.N} kernels but {len(self.biases)} biases")
        if not self.h > 0:
            raise ContractError("step size h must be positive")
        shape = self.kernels[0].shape
        if any(k.shape != shape for k in self.kernels):
            raise ContractError("all kernels must have the same shape")
        if self.scheme != "verlet" and shape[0] != shape[1]:
            raise ContractError(f"{self.scheme} requires square kernels, got {shape}")
        if self.scheme == "antisym":
            if self.gamma < 0:
                raise ContractError("gamma must be nonnegative")
            for k in self.kernels:
                if not isinstance(k, AntisymmetricView) or k.gamma != self.gamma:
                    raise ContractError("antisym kernels must be AntisymmetricView with the network's gamma")

    @property
    def N(self) -> int:
        return len(self.kernels)

    @property
    def final_time(self) -> float:
        return self.h * self.N

    @property
    def width(self) -> int:
        return self.kernels[0].rows

    @property
    def kernel_param_shape(self) -> tuple[int, ...]:
        return self.kernels[0].params.shape

    @classmethod
    def from_arrays(cls, scheme: str, kernels: Sequence, biases=None, h: float = 0.1,
                    gamma: float = 0.0, activation="tanh", parametrization: Optional[str] = None):
        """Build weights from raw parameter arrays.

        ``parametrization`` selects how each array is interpreted: ``dense``
        (default), ``negdef`` (leapfrog with ``K = -C^T C``). For ``antisym``
        the arrays are always wrapped in an :class:`AntisymmetricView`.
        Arrays may also already be operators.
        """
        ops = []
        for k in kernels:
            op = k if isinstance(k, LinearOperator) else None
            if scheme == "antisym":
                if not isinstance(op, AntisymmetricView):
                    op = AntisymmetricView(op if op is not None else Dense(k), gamma)
            elif op is None:
                op = NegDef(k) if parametrization == "negdef" else Dense(k)
            ops.append(op)
        if biases is None:
            biases = np.zeros(len(ops))
        return cls(scheme, h, ops, biases, gamma, activation)

    @classmethod
    def constant(cls, scheme: str, K, N: int, h: float, b: float = 0.0, **kw):
        return cls.from_arrays(scheme, [np.array(K, dtype=float)] * N, np.full(N, b), h, **kw)

    # flat parameter vectors: all kernel parameters layer by layer, then biases

    def kernel_stack(self) -> np.ndarray:
        return np.stack([np.asarray(k.params, dtype=float).reshape(-1) for k in self.kernels])

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.kernel_stack().reshape(-1), self.biases])

    @property
    def n_params(self) -> int:
        return self.N * int(np.prod(self.kernel_param_shape)) + self.N

    def with_flat_params(self, theta: np.ndarray) -> "NetworkWeights":
        p = int(np.prod(self.kernel_param_shape))
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} parameters, got {theta.shape}")
        K = theta[: self.N * p].reshape(self.N, p)
        kernels = [k.with_params(K[j].reshape(self.kernel_param_shape)) for j, k in enumerate(self.kernels)]
        return replace(self, kernels=kernels, biases=theta[self.N * p:].copy())

    def with_stack(self, K: np.ndarray, biases: np.ndarray, h: Optional[float] = None) -> "NetworkWeights":
        """New weights (possibly with a different layer count) from a kernel stack."""
        proto = self.kernels[0]
        kernels = [proto.with_params(row.reshape(self.kernel_param_shape)) for row in K]
        return replace(self, kernels=kernels, biases=np.array(biases, dtype=float),
                       h=self.h if h is None else h)


@dataclass
class PropagationTrace:
    """States retained by :func:`forward` for derivative computations.

    ``derivs[j]`` holds the activation derivative at the pre-activation of
    layer ``j`` (the z-update for Verlet); ``aux_derivs[j]`` the one of the
    Verlet y-update. ``aux[j]`` is ``Z_{j-1/2}``, so ``aux[j + 1]`` is the
    auxiliary state used by layer ``j``'s y-update.
    """

    scheme: str
    states: list[np.ndarray]
    derivs: list[np.ndarray] = field(default_factory=list)
    aux: list[np.ndarray] = field(default_factory=list)
    aux_derivs: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.states[-1]

    @property
    def n_examples(self) -> int:
        return self.states[0].shape[0]

    @property
    def complete(self) -> bool:
        return len(self.derivs) > 0

    def subset(self, idx) -> "PropagationTrace":
        """Trace restricted to the examples ``idx``."""
        pick = lambda arrs: [a[idx] for a in arrs]  # noqa: E731
        return PropagationTrace(self.scheme, pick(self.states), pick(self.derivs),
                                pick(self.aux), pick(self.aux_derivs))


@dataclass
class WeightGradient:
    """Gradient (or tangent) in parameter space, mirroring :class:`NetworkWeights`."""

    kernels: list[np.ndarray]
    biases: np.ndarray
    inputs: Optional[np.ndarray] = None

    def flat(self) -> np.ndarray:
        return np.concatenate([np.asarray(k).reshape(-1) for k in self.kernels] + [self.biases])

    @classmethod
    def from_flat(cls, weights: NetworkWeights, theta: np.ndarray, inputs=None) -> "WeightGradient":
        shape = weights.kernel_param_shape
        p = int(np.prod(shape))
        N = weights.N
        kernels = [theta[j * p:(j + 1) * p].reshape(shape) for j in range(N)]
        return cls(kernels, np.asarray(theta[N * p:N * p + N], dtype=float), inputs)

    @classmethod
    def zeros_like(cls, weights: NetworkWeights, inputs=None) -> "WeightGradient":
        return cls.from_flat(weights, np.zeros(weights.n_params), inputs)


def _check_finite(Y, layer, scheme):
    if not np.isfinite(Y).all():
        raise DivergenceError(layer, scheme)


def forward(weights: NetworkWeights, Y0, keep_trace: bool = True) -> PropagationTrace:
    """Propagate ``Y0`` through the network.

    With ``keep_trace=False`` only the input and output states are retained,
    which is enough for evaluation but not for :func:`vjp`/:func:`jvp`.
    """
    Y = np.array(Y0, dtype=float)
    if Y.ndim != 2 or Y.shape[1] != weights.width:
        raise ContractError(f"features of shape {Y.shape} do not match kernel rows {weights.width}")
    # overflow is reported through DivergenceError instead of numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(weights, Y, keep_trace)


def _forward(weights, Y, keep_trace):
    scheme, h, sig = weights.scheme, weights.h, weights.activation
    states, derivs, aux, aux_derivs = [Y], [], [], []
    if scheme in ("euler", "antisym"):
        for j, (K, b) in enumerate(zip(weights.kernels, weights.biases)):
            A = K.apply(Y) + b
            Y = Y + h * sig.eval(A)
            _check_finite(Y, j + 1, scheme)
            if keep_trace:
                derivs.append(sig.deriv(A))
                states.append(Y)
    elif scheme == "leapfrog":
        Yprev = np.zeros_like(Y)
        for j, (K, b) in enumerate(zip(weights.kernels, weights.biases)):
            A = K.apply(Y) + b
            Yprev, Y = Y, 2.0 * Y - Yprev + h * h * sig.eval(A)
            _check_finite(Y, j + 1, scheme)
            if keep_trace:
                derivs.append(sig.deriv(A))
                states.append(Y)
    elif scheme == "verlet":
        Z = np.zeros((Y.shape[0], weights.kernels[0].cols))
        if keep_trace:
            aux.append(Z)
        for j, (K, b) in enumerate(zip(weights.kernels, weights.biases)):
            A = K.apply(Y) + b
            Z = Z - h * sig.eval(A)
            B = K.apply_transpose(Z) + b
            Y = Y + h * sig.eval(B)
            _check_finite(Y, j + 1, scheme)
            _check_finite(Z, j + 1, scheme)
            if keep_trace:
                derivs.append(sig.deriv(A))
                aux.append(Z)
                aux_derivs.append(sig.deriv(B))
                states.append(Y)
    if not keep_trace:
        states.append(Y)
    return PropagationTrace(scheme, states, derivs, aux, aux_derivs)


def _check_trace(weights: NetworkWeights, trace: PropagationTrace):
    if trace.scheme != weights.scheme:
        raise ContractError(f"trace from scheme {trace.scheme!r} used with {weights.scheme!r} weights")
    if not trace.complete or len(trace.derivs) != weights.N or len(trace.states) != weights.N + 1:
        raise ContractError("trace does not match the weights (was it produced with keep_trace=True?)")


def vjp(weights: NetworkWeights, trace: PropagationTrace, cotangent, input_grad: bool = True) -> WeightGradient:
    """Gradient of ``<cotangent, Y_N>`` with respect to all parameters and ``Y_0``."""
    _check_trace(weights, trace)
    lam = np.array(cotangent, dtype=float)
    if lam.shape != trace.output.shape:
        raise ContractError(f"cotangent shape {lam.shape} does not match output {trace.output.shape}")
    N, h, scheme = weights.N, weights.h, weights.scheme
    gK: list = [None] * N
    gb = np.zeros(N)
    Y = trace.states

    if scheme in ("euler", "antisym"):
        for j in range(N - 1, -1, -1):
            K = weights.kernels[j]
            D = h * trace.derivs[j] * lam
            gK[j] = K.param_grad(Y[j], D)
            gb[j] = D.sum()
            if j or input_grad:
                lam = lam + K.apply_transpose(D)
    elif scheme == "leapfrog":
        # lam holds the complete cotangent of Y_{j+1}; lam_partial the part of
        # Y_j's cotangent coming from the step that produced Y_{j+2}
        lam_partial = np.zeros_like(lam)
        for j in range(N - 1, -1, -1):
            K = weights.kernels[j]
            D = (h * h) * trace.derivs[j] * lam
            gK[j] = K.param_grad(Y[j], D)
            gb[j] = D.sum()
            lam_j = lam_partial + 2.0 * lam
            if j or input_grad:
                lam_j = lam_j + K.apply_transpose(D)
            lam, lam_partial = lam_j, -lam
    else:
        Z = trace.aux
        zlam = np.zeros_like(Z[0])
        for j in range(N - 1, -1, -1):
            K = weights.kernels[j]
            # y-update: Y_{j+1} = Y_j + h s(Z_{j+1/2} K^T + b)
            E = h * trace.aux_derivs[j] * lam
            g = K.param_grad(E, Z[j + 1])
            gbj = E.sum()
            zlam = zlam + K.apply(E)
            # z-update: Z_{j+1/2} = Z_{j-1/2} - h s(Y_j K + b)
            D = -h * trace.derivs[j] * zlam
            gK[j] = g + K.param_grad(Y[j], D)
            gb[j] = gbj + D.sum()
            if j or input_grad:
                lam = lam + K.apply_transpose(D)
    return WeightGradient(gK, gb, lam if input_grad else None)


def jvp(weights: NetworkWeights, trace: PropagationTrace, tangent: WeightGradient) -> np.ndarray:
    """Directional derivative of ``Y_N`` along a parameter (and input) tangent."""
    _check_trace(weights, trace)
    N, h, scheme = weights.N, weights.h, weights.scheme
    if len(tangent.kernels) != N or len(tangent.biases) != N:
        raise ContractError("tangent does not match the number of layers")
    Y = trace.states
    dY = np.zeros_like(Y[0]) if tangent.inputs is None else np.array(tangent.inputs, dtype=float)
    dKs = [K.param_tangent(dk) for K, dk in zip(weights.kernels, tangent.kernels)]
    db = np.asarray(tangent.biases, dtype=float)

    if scheme in ("euler", "antisym"):
        for j in range(N):
            K = weights.kernels[j]
            dA = K.apply(dY) + dKs[j].apply(Y[j]) + db[j]
            dY = dY + h * trace.derivs[j] * dA
    elif scheme == "leapfrog":
        dprev = np.zeros_like(dY)
        for j in range(N):
            K = weights.kernels[j]
            dA = K.apply(dY) + dKs[j].apply(Y[j]) + db[j]
            dprev, dY = dY, 2.0 * dY - dprev + (h * h) * trace.derivs[j] * dA
    else:
        Z = trace.aux
        dZ = np.zeros_like(Z[0])
        for j in range(N):
            K = weights.kernels[j]
            dA = K.apply(dY) + dKs[j].apply(Y[j]) + db[j]
            dZ = dZ - h * trace.derivs[j] * dA
            dB = K.apply_transpose(dZ) + dKs[j].apply_transpose(Z[j + 1]) + db[j]
            dY = dY + h * trace.aux_derivs[j] * dB
    return dY


def gauss_newton_matvec(weights: NetworkWeights, trace: PropagationTrace,
                        curvature: Callable[[np.ndarray], np.ndarray],
                        direction: WeightGradient) -> WeightGradient:
    """``J^T H J v`` where ``J = dY_N/dparams`` and ``H`` is given by ``curvature``."""
    dY = jvp(weights, trace, WeightGradient(direction.kernels, direction.biases))
    return vjp(weights, trace, curvature(dY), input_grad=False)
