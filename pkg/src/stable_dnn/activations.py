"""Element-wise activation functions."""

from __future__ import annotations

import numpy as np


class Activation:
    name: str = ""

    def __call__(self, X):
        return self.eval(X)

    def eval(self, X) -> np.ndarray:
        raise NotImplementedError

    def deriv(self, X) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(self.name)


class TanH(Activation):
    name = "tanh"

    def eval(self, X):
        return np.tanh(X)

    def deriv(self, X):
        t = np.tanh(X)
        return 1.0 - t * t


class ReLU(Activation):
    """``max(0, x)``; the derivative at exactly zero is taken to be 0."""

    name = "relu"

    def eval(self, X):
        return np.maximum(0.0, X)

    def deriv(self, X):
        return (np.asarray(X) > 0).astype(float)


class Identity(Activation):
    """Linear activation, used to build exactly quadratic test problems."""

    name = "identity"

    def eval(self, X):
        return np.array(X, dtype=float)

    def deriv(self, X):
        return np.ones_like(X, dtype=float)


ACTIVATIONS = {cls.name: cls for cls in (TanH, ReLU, Identity)}


def get_activation(name) -> Activation:
    if isinstance(name, Activation):
        return name
    try:
        return ACTIVATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def act_eval(a: Activation, X) -> np.ndarray:
    return a.eval(X)


def act_deriv(a: Activation, X) -> np.ndarray:
    return a.deriv(X)
