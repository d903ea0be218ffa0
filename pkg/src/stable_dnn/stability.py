"""Spectral stability diagnostics for trained or hand-built networks.

For the first-order schemes the right-hand side of layer ``j`` is
``f(y) = s(K_j^T y + b_j)`` (column convention) with Jacobian
``J = diag(s'(K_j^T y + b_j)) K_j^T``. Continuous stability asks for
``max Re lambda(J) <= 0``; forward Euler additionally needs
``max |1 + h lambda(J)| <= 1``. Both verdicts are reported, since an
imaginary spectrum passes the first and fails the second.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .numerics import ContractError
from .propagation import NetworkWeights, PropagationTrace, forward

REAL_TOL = 1e-8
AMP_TOL = 1e-12


def effective_kernel(weights: NetworkWeights, j: int) -> np.ndarray:
    """Dense matrix ``K_j`` such that layer ``j`` computes ``s(Y K_j + b_j)``."""
    return weights.kernels[j].materialize()


def jacobian_at(weights: NetworkWeights, j: int, y) -> np.ndarray:
    """``diag(s'(K_j^T y + b_j)) K_j^T`` for a single state ``y``."""
    if weights.scheme == "verlet":
        raise ContractError("use hamiltonian_jacobian_at for the verlet scheme")
    K = effective_kernel(weights, j)
    if K.shape[0] != K.shape[1]:
        raise ContractError(f"Jacobian needs a square kernel, got {K.shape}")
    y = np.asarray(y, dtype=float).reshape(-1)
    d = weights.activation.deriv(K.T @ y + weights.biases[j])
    return d[:, None] * K.T


def hamiltonian_jacobian_at(weights: NetworkWeights, j: int, y, z) -> np.ndarray:
    """Jacobian of ``(y, z) -> (s(K z + b), -s(K^T y + b))`` at ``(y, z)``."""
    K = effective_kernel(weights, j)
    n, m = K.shape
    b = weights.biases[j]
    y, z = np.asarray(y, dtype=float).reshape(-1), np.asarray(z, dtype=float).reshape(-1)
    J = np.zeros((n + m, n + m))
    J[:n, n:] = weights.activation.deriv(K @ z + b)[:, None] * K
    J[n:, :n] = -weights.activation.deriv(K.T @ y + b)[:, None] * K.T
    return J


def eigvals_2x2(A) -> np.ndarray:
    """Closed-form eigenvalues of a 2x2 matrix (used as an independent check)."""
    A = np.asarray(A, dtype=float)
    tr = A[0, 0] + A[1, 1]
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    root = np.sqrt(complex(tr * tr / 4 - det))
    return np.array([tr / 2 + root, tr / 2 - root])


@dataclass
class LayerStability:
    layer: int
    kernel_eigs: np.ndarray
    jacobian_eigs: np.ndarray
    max_real_kernel: float
    max_real_jacobian: float
    amplification: float
    kernel_amplification: float
    error: Optional[str] = None

    @property
    def continuous_stable(self) -> bool:
        return self.error is None and self.max_real_jacobian <= REAL_TOL

    @property
    def kernel_condition(self) -> bool:
        """``max Re lambda(K_j) <= 0`` within the tolerance band."""
        return self.error is None and self.max_real_kernel <= REAL_TOL

    @property
    def marginal(self) -> bool:
        return self.error is None and abs(self.max_real_jacobian) <= REAL_TOL

    @property
    def discrete_stable(self) -> bool:
        return self.error is None and self.amplification <= 1.0 + AMP_TOL


@dataclass
class StabilityReport:
    scheme: str
    h: float
    layers: list[LayerStability] = field(default_factory=list)
    max_kernel_rate: float = 0.0

    @property
    def continuous_stable(self) -> bool:
        return all(l.continuous_stable for l in self.layers)

    @property
    def discrete_stable(self) -> bool:
        return all(l.discrete_stable for l in self.layers)

    @property
    def kernel_condition(self) -> bool:
        return all(l.kernel_condition for l in self.layers)

    @property
    def verdicts(self) -> list[str]:
        return ["ContinuousStable" if self.continuous_stable else "ContinuousUnstable",
                "DiscreteStable" if self.discrete_stable else "DiscreteUnstable"]

    @property
    def max_real_part(self) -> float:
        return max(l.max_real_jacobian for l in self.layers)

    @property
    def max_amplification(self) -> float:
        return max(l.amplification for l in self.layers)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "max_re_kernel", "max_re_jacobian", "amplification",
                        "kernel_amplification", "continuous_stable", "discrete_stable", "error"])
            for l in self.layers:
                w.writerow([l.layer, repr(l.max_real_kernel), repr(l.max_real_jacobian), repr(l.amplification),
                            repr(l.kernel_amplification), int(l.continuous_stable), int(l.discrete_stable),
                            l.error or ""])

    def write_spectra(self, path, which: str = "jacobian") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "re", "im"])
            for l in self.layers:
                eigs = l.jacobian_eigs if which == "jacobian" else l.kernel_eigs
                for lam in eigs:
                    w.writerow([l.layer, repr(float(lam.real)), repr(float(lam.imag))])


def _spectrum_summary(eigs, h):
    return float(np.max(eigs.real)), float(np.max(np.abs(1.0 + h * eigs)))


def assess(weights: NetworkWeights, trace: PropagationTrace, per_example: bool = False) -> StabilityReport:
    """Per-layer spectra of the kernels and of the layer Jacobians.

    Jacobians are evaluated at the batch-mean state of each layer; with
    ``per_example`` the worst case over all examples is reported instead
    (the listed Jacobian eigenvalues then belong to the worst example).
    """
    if len(trace.states) != weights.N + 1:
        raise ContractError("trace does not match the weights")
    h = weights.h
    report = StabilityReport(weights.scheme, h)
    for j in range(weights.N):
        try:
            K = effective_kernel(weights, j)
            keigs = np.linalg.eigvals(K) if K.shape[0] == K.shape[1] else np.linalg.eigvals(
                hamiltonian_jacobian_at(weights, j, np.zeros(K.shape[0]), np.zeros(K.shape[1])))
            Ys = trace.states[j] if per_example else trace.states[j].mean(axis=0, keepdims=True)
            if weights.scheme == "verlet":
                Zs = trace.aux[j + 1] if per_example else trace.aux[j + 1].mean(axis=0, keepdims=True)
                jacs = [hamiltonian_jacobian_at(weights, j, y, z) for y, z in zip(Ys, Zs)]
            else:
                jacs = [jacobian_at(weights, j, y) for y in Ys]
            worst = None
            for J in jacs:
                e = np.linalg.eigvals(J)
                summ = _spectrum_summary(e, h)
                if worst is None or summ[1] > worst[1][1]:
                    worst = (e, summ)
            jeigs, (mre, amp) = worst
            kre, kamp = _spectrum_summary(keigs, h)
            report.layers.append(LayerStability(j, keigs, jeigs, kre, mre, amp, kamp))
        except np.linalg.LinAlgError as exc:
            nan = float("nan")
            report.layers.append(LayerStability(j, np.array([]), np.array([]), nan, nan, nan, nan, str(exc)))
    if weights.N > 1:
        Ks = weights.kernel_stack()
        report.max_kernel_rate = float(np.max(np.linalg.norm(np.diff(Ks, axis=0), axis=1)) / h)
    return report


def leapfrog_kernels_admissible(weights: NetworkWeights, tol: float = REAL_TOL) -> bool:
    """True when every kernel has real, non-positive eigenvalues."""
    for j in range(weights.N):
        e = np.linalg.eigvals(effective_kernel(weights, j))
        if np.any(np.abs(e.imag) > tol) or np.any(e.real > tol):
            return False
    return True


def force_field(weights: NetworkWeights, points, layer: int = 0) -> np.ndarray:
    """Layer force field on 2-D points: ``s(y K + b)`` (Verlet: the z-force ``-s(y K + b)``)."""
    points = np.asarray(points, dtype=float)
    K = weights.kernels[layer]
    f = weights.activation.eval(K.apply(points) + weights.biases[layer])
    return -f if weights.scheme == "verlet" else f


def phase_trace(weights: NetworkWeights, Y0, path, field_path=None, grid_points: int = 15,
                bounds: Optional[tuple[float, float, float, float]] = None, header_comment: Optional[str] = None):
    """Write per-layer trajectories (and the layer-0 force field) as CSV."""
    Y0 = np.asarray(Y0, dtype=float)
    if Y0.ndim != 2 or Y0.shape[1] != 2:
        raise ContractError(f"phase plane traces need 2-D features, got shape {Y0.shape}")
    trace = forward(weights, Y0)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point_id", "layer", "t", "y1", "y2"])
        for j, Y in enumerate(trace.states):
            for i, y in enumerate(Y):
                w.writerow([i, j, repr(j * weights.h), repr(float(y[0])), repr(float(y[1]))])
    if field_path is not None:
        states = np.vstack(trace.states)
        if bounds is None:
            lo, hi = states.min(axis=0), states.max(axis=0)
            pad = 0.1 * np.maximum(hi - lo, 1e-3)
            bounds = (lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1])
        g1 = np.linspace(bounds[0], bounds[1], grid_points)
        g2 = np.linspace(bounds[2], bounds[3], grid_points)
        P = np.array([(a, b) for b in g2 for a in g1])
        F = force_field(weights, P) if weights.kernels[0].cols == 2 else np.zeros_like(P)
        with open(field_path, "w", newline="", encoding="utf-8") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x1", "x2", "f1", "f2"])
            for p, f in zip(P, F):
                w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(f[0])), repr(float(f[1]))])
    return trace
