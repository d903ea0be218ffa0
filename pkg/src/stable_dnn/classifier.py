"""Hypothesis functions, cross-entropy losses and the Newton-PCG classifier fit."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .numerics import ContractError, NumericalBreakdown, PcgConfig, pcg_solve
from .regularization import classifier_reg


def logistic_hyp(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    out = np.empty_like(X)
    pos = X >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    ex = np.exp(X[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_hyp(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    E = np.exp(X - X.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def _logsumexp(X):
    mx = X.max(axis=1, keepdims=True)
    return (mx + np.log(np.exp(X - mx).sum(axis=1, keepdims=True)))[:, 0]


def cross_entropy(Cpred, C, kind: str = "softmax") -> float:
    """Mean cross-entropy of predicted probabilities against labels.

    ``softmax``: ``-(1/s) sum_i sum_k c_ik log p_ik``; ``logistic``: the
    element-wise Bernoulli entropy summed over columns, averaged over rows.
    Use :class:`Hypothesis` losses on logits where overflow matters.
    """
    P, C = np.asarray(Cpred, dtype=float), np.asarray(C, dtype=float)
    if P.shape != C.shape:
        raise ContractError(f"prediction shape {P.shape} != label shape {C.shape}")
    tiny = np.finfo(float).tiny
    if kind == "softmax":
        return float(-np.sum(C * np.log(np.maximum(P, tiny))) / len(C))
    return float(-np.sum(C * np.log(np.maximum(P, tiny)) + (1 - C) * np.log(np.maximum(1 - P, tiny))) / len(C))


class Hypothesis:
    """Loss fused with a hypothesis function, evaluated on logits ``X``.

    ``loss`` averages over examples; ``grad`` and ``hess_matvec`` carry the
    same ``1/s`` scaling. The Hessian products are positive semidefinite.
    """

    name = ""

    def predict(self, X) -> np.ndarray:
        raise NotImplementedError

    def loss(self, X, C) -> float:
        raise NotImplementedError

    def grad(self, X, C) -> np.ndarray:
        raise NotImplementedError

    def hess_matvec(self, X, dX) -> np.ndarray:
        raise NotImplementedError


class Logistic(Hypothesis):
    name = "logistic"

    def predict(self, X):
        return logistic_hyp(X)

    def loss(self, X, C):
        _same_shape(X, C)
        return float(np.sum(np.logaddexp(0.0, X) - C * X) / len(X))

    def grad(self, X, C):
        return (logistic_hyp(X) - C) / len(X)

    def hess_matvec(self, X, dX):
        p = logistic_hyp(X)
        return p * (1.0 - p) * dX / len(X)


class Softmax(Hypothesis):
    name = "softmax"

    def predict(self, X):
        return softmax_hyp(X)

    def loss(self, X, C):
        _same_shape(X, C)
        return float(np.sum(C.sum(axis=1) * _logsumexp(X) - np.sum(C * X, axis=1)) / len(X))

    def grad(self, X, C):
        return (softmax_hyp(X) * C.sum(axis=1, keepdims=True) - C) / len(X)

    def hess_matvec(self, X, dX):
        # rows of C are assumed to sum to one
        p = softmax_hyp(X)
        return p * (dX - np.sum(p * dX, axis=1, keepdims=True)) / len(X)


class LeastSquares(Hypothesis):
    """``0.5/s ||X - C||^2`` with the identity hypothesis; for testing only."""

    name = "squares"

    def predict(self, X):
        return np.array(X, dtype=float)

    def loss(self, X, C):
        _same_shape(X, C)
        return 0.5 * float(np.sum((X - C) ** 2)) / len(X)

    def grad(self, X, C):
        return (X - C) / len(X)

    def hess_matvec(self, X, dX):
        return dX / len(X)


def _same_shape(X, C):
    if np.shape(X) != np.shape(C):
        raise ContractError(f"logits shape {np.shape(X)} != label shape {np.shape(C)}")


HYPOTHESES = {cls.name: cls for cls in (Logistic, Softmax, LeastSquares)}


def get_hypothesis(name) -> Hypothesis:
    if isinstance(name, Hypothesis):
        return name
    return HYPOTHESES[name]()


def default_hypothesis(n_classes: int) -> Hypothesis:
    """Bernoulli for two classes, multinomial otherwise."""
    return Logistic() if n_classes <= 2 else Softmax()


@dataclass
class ClassifierParams:
    W: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.W = np.array(self.W, dtype=float)
        self.mu = np.array(self.mu, dtype=float).reshape(-1)
        if self.W.ndim != 2 or self.W.shape[1] != self.mu.shape[0]:
            raise ContractError(f"W {self.W.shape} and mu {self.mu.shape} are inconsistent")

    @classmethod
    def zeros(cls, n_features: int, n_classes: int) -> "ClassifierParams":
        return cls(np.zeros((n_features, n_classes)), np.zeros(n_classes))

    def logits(self, Y) -> np.ndarray:
        return np.asarray(Y) @ self.W + self.mu

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.reshape(-1), self.mu])

    def with_flat(self, theta) -> "ClassifierParams":
        k = self.W.size
        return ClassifierParams(theta[:k].reshape(self.W.shape), theta[k:].copy())


def predict_labels(Y, clf: ClassifierParams, hyp: Hypothesis) -> np.ndarray:
    return np.argmax(hyp.predict(clf.logits(Y)), axis=1)


def error_rate(Y, C, clf: ClassifierParams, hyp: Hypothesis) -> float:
    """Fraction of rows whose predicted class differs from the label."""
    if len(Y) == 0:
        return 0.0
    return float(np.mean(predict_labels(Y, clf, hyp) != np.argmax(C, axis=1)))


def armijo(f: Callable[[float], float], f0: float, slope: float, c: float = 1e-4,
           max_backtracks: int = 10) -> tuple[float, float]:
    """Backtracking by halving from a unit step.

    Returns ``(t, f(t))``; ``t = 0`` with ``f0`` when no step satisfies the
    sufficient-decrease condition. Non-finite trial values count as failures.
    """
    t = 1.0
    for _ in range(max_backtracks + 1):
        try:
            ft = f(t)
        except NumericalBreakdown:
            ft = np.inf
        if np.isfinite(ft) and ft <= f0 + c * t * slope:
            return t, ft
        t *= 0.5
    return 0.0, f0


class ClassifierObjective:
    """``loss(h(Y W + e mu^T), C) + alpha * R(W)`` as a function of ``(W, mu)``."""

    def __init__(self, Y, C, hyp: Hypothesis, alpha: float = 0.0, L=None):
        self.Y = np.asarray(Y, dtype=float)
        self.C = np.asarray(C, dtype=float)
        if len(self.Y) != len(self.C):
            raise ContractError(f"{len(self.Y)} feature rows but {len(self.C)} label rows")
        self.hyp, self.alpha, self.L = hyp, alpha, L

    def value(self, clf: ClassifierParams) -> float:
        v = self.hyp.loss(clf.logits(self.Y), self.C)
        if self.alpha:
            v += self.alpha * classifier_reg(clf.W, self.L)[0]
        return v

    def value_grad(self, clf: ClassifierParams):
        X = clf.logits(self.Y)
        G = self.hyp.grad(X, self.C)
        gW = self.Y.T @ G
        v = self.hyp.loss(X, self.C)
        if self.alpha:
            r, rg, _ = classifier_reg(clf.W, self.L)
            v += self.alpha * r
            gW = gW + self.alpha * rg
        return v, np.concatenate([gW.reshape(-1), G.sum(axis=0)])

    def hess_matvec(self, clf: ClassifierParams):
        X = clf.logits(self.Y)
        n, m = clf.W.shape
        _, _, rhess = classifier_reg(clf.W, self.L) if self.alpha else (0, 0, None)

        def mv(v):
            dW, dmu = v[: n * m].reshape(n, m), v[n * m:]
            HX = self.hyp.hess_matvec(X, self.Y @ dW + dmu)
            HW = self.Y.T @ HX
            if self.alpha:
                HW = HW + self.alpha * rhess(dW)
            return np.concatenate([HW.reshape(-1), HX.sum(axis=0)])

        return mv


def newton_pcg_classify(Yout, C, init: ClassifierParams, hyp: Hypothesis = None,
                        alpha: float = 0.0, L=None, newton_iters: int = 2,
                        pcg: PcgConfig = PcgConfig(max_iterations=2, relative_tolerance=1e-1),
                        history: Optional[list] = None) -> ClassifierParams:
    """Approximately minimize the convex classification objective.

    Each iteration solves the Newton system with PCG and applies an Armijo
    line search, so the recorded objective values never increase.
    ``history`` (if given) receives the objective before each iteration and
    after the last one.
    """
    hyp = hyp if hyp is not None else default_hypothesis(np.shape(C)[1])
    obj = ClassifierObjective(Yout, C, hyp, alpha, L)
    if init.W.shape != (obj.Y.shape[1], obj.C.shape[1]):
        raise ContractError(f"classifier W {init.W.shape} incompatible with features {obj.Y.shape} / labels {obj.C.shape}")
    clf = init
    f, g = obj.value_grad(clf)
    if not np.isfinite(f):
        raise NumericalBreakdown("non-finite classification objective")
    if history is not None:
        history.append(f)
    for _ in range(newton_iters):
        if not np.any(g):
            break
        res = pcg_solve(obj.hess_matvec(clf), -g, pcg)
        d = res.solution
        slope = g @ d
        if not slope < 0:
            d, slope = -g, -(g @ g)
        theta = clf.flat()
        phi = lambda t: obj.value(clf.with_flat(theta + t * d))
        t, f_new = armijo(phi, f, slope)
        if t == 0.0 and slope != -(g @ g):
            # saturated logits can make the Newton step useless; retry along -g
            d, slope = -g, -(g @ g)
            t, f_new = armijo(phi, f, slope)
        if t == 0.0:
            break
        clf = clf.with_flat(theta + t * d)
        f, g = obj.value_grad(clf)
        if history is not None:
            history.append(f)
    return clf
