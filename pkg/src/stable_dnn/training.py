"""Block coordinate descent training with multi-level layer refinement.

Each BCD iteration alternates

1. a Newton-PCG update of the classifier ``(W, mu)`` with the propagated
   features held fixed, and
2. a Gauss-Newton-PCG update of the propagation parameters with the
   classifier held fixed; the gradient uses the whole batch, the curvature
   products a random subsample of it.

The validation error is recorded after every iteration and the parameters
with the lowest validation error are returned.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .classifier import (ClassifierParams, Hypothesis, armijo, default_hypothesis, get_hypothesis,
                         newton_pcg_classify)
from .datasets import LabeledSet
from .numerics import AntisymmetricView, ContractError, Conv3x3, Dense, NegDef, PcgConfig, pcg_solve
from .propagation import DivergenceError, NetworkWeights, WeightGradient, forward, vjp, gauss_newton_matvec
from .regularization import (RegConfig, SpatialPreconditioner, TimePreconditioner, propagation_reg,
                             propagation_reg_hessian)

log = logging.getLogger(__name__)


@dataclass
class NetworkSpec:
    """Architecture of the propagation network.

    ``kernel`` is ``dense``, ``negdef`` (leapfrog only) or ``conv``; for
    convolutions ``image_shape`` is ``(height, width)`` and the width must be
    ``height * width * channels``. ``aux_width`` is the Verlet auxiliary
    dimension (defaults to ``width``).
    """

    scheme: str = "verlet"
    width: int = 2
    activation: str = "tanh"
    gamma: float = 1e-3
    kernel: str = "dense"
    aux_width: Optional[int] = None
    image_shape: Optional[tuple[int, int]] = None

    @property
    def channels(self) -> int:
        H, W = self.image_shape
        return self.width // (H * W)


@dataclass
class TrainConfig:
    bcd_iterations: int = 50
    batch_size: Optional[int] = None
    hessian_subsample: int = 1000
    gn_pcg: PcgConfig = field(default_factory=lambda: PcgConfig(max_iterations=20, relative_tolerance=1e-2))
    newton_iters: int = 2
    newton_pcg: PcgConfig = field(default_factory=lambda: PcgConfig(max_iterations=2, relative_tolerance=1e-1))
    reg: RegConfig = field(default_factory=RegConfig)
    rng_seed: int = 0
    final_time: float = 20.0
    hypothesis: Optional[str] = None
    chunk_size: Optional[int] = None
    gn_preconditioner: str = "reg"
    init_scale: float = 1.0

    def __post_init__(self):
        if self.final_time <= 0:
            raise ContractError("final time must be positive")
        if self.batch_size is not None and self.hessian_subsample > self.batch_size:
            raise ContractError("hessian_subsample cannot exceed batch_size")


@dataclass
class IterationRecord:
    level: int
    layers: int
    iteration: int
    train_error: float
    val_error: float
    objective: float
    best_id: int


@dataclass
class TrainReport:
    records: list[IterationRecord] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def level_records(self, level: int) -> list[IterationRecord]:
        return [r for r in self.records if r.level == level]

    def levels(self) -> list[int]:
        return sorted({r.level for r in self.records})

    def best(self, level: Optional[int] = None) -> Optional[IterationRecord]:
        recs = self.records if level is None else self.level_records(level)
        return min(recs, key=lambda r: (r.val_error, r.objective)) if recs else None

    def best_val_accuracy(self) -> dict[int, float]:
        """Best validation accuracy per layer count."""
        out = {}
        for lev in self.levels():
            b = self.best(lev)
            out[b.layers] = 1.0 - b.val_error
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "layers", "iteration", "train_error", "val_error", "objective", "best_id"])
        for r in self.records:
            w.writerow([r.level, r.layers, r.iteration, repr(r.train_error), repr(r.val_error),
                        repr(r.objective), r.best_id])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str, notes: Sequence[str] = ()) -> "TrainReport":
        """Inverse of :meth:`to_csv`; ``#`` comment lines are skipped."""
        rows = csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#"))
        recs = [IterationRecord(int(r["level"]), int(r["layers"]), int(r["iteration"]), float(r["train_error"]),
                                float(r["val_error"]), float(r["objective"]), int(r["best_id"])) for r in rows]
        return cls(recs, list(notes))

    def extend(self, other: "TrainReport"):
        self.records.extend(other.records)
        self.notes.extend(other.notes)


def init_weights(spec: NetworkSpec, N: int, final_time: float, rng: np.random.Generator,
                 scale: float = 1.0) -> NetworkWeights:
    """Gaussian kernels with std ``scale * min(1, 1/sqrt(fan_in))`` and zero biases."""
    n = spec.width
    if spec.kernel == "conv":
        if spec.image_shape is None:
            raise ContractError("convolution kernels need image_shape")
        H, W = spec.image_shape
        c = spec.channels
        std = scale * min(1.0, 1.0 / np.sqrt(9 * c))
        kernels = [Conv3x3(rng.normal(0.0, std, (3, 3, c, c)), H, W) for _ in range(N)]
    else:
        std = scale * min(1.0, 1.0 / np.sqrt(n))
        m = (spec.aux_width or n) if spec.scheme == "verlet" else n
        kernels = [rng.normal(0.0, std, (n, m)) for _ in range(N)]
        if spec.kernel == "negdef":
            kernels = [NegDef(k) for k in kernels]
        else:
            kernels = [Dense(k) for k in kernels]
    if spec.scheme == "antisym":
        kernels = [AntisymmetricView(k, spec.gamma) for k in kernels]
    return NetworkWeights(spec.scheme, final_time / N, kernels, np.zeros(N),
                          spec.gamma if spec.scheme == "antisym" else 0.0, spec.activation)


def prolongate(weights: NetworkWeights, new_N: int) -> NetworkWeights:
    """Interpolate parameters to ``new_N`` layers over the same time interval.

    Layer ``j`` parameters are samples at the cell centre ``(j + 1/2) h``;
    values between centres are linear, beyond the outer centres constant.
    """
    if new_N < weights.N:
        raise ContractError(f"cannot prolongate {weights.N} layers to {new_N}")
    T = weights.final_time
    P = np.hstack([weights.kernel_stack(), weights.biases[:, None]])
    P_new = interpolate_in_time(P, T, (np.arange(new_N) + 0.5) * T / new_N)
    return weights.with_stack(P_new[:, :-1], P_new[:, -1], h=T / new_N)


def interpolate_in_time(P: np.ndarray, final_time: float, t) -> np.ndarray:
    """Evaluate the piecewise-linear path through the rows of ``P`` at times ``t``."""
    N = P.shape[0]
    centers = (np.arange(N) + 0.5) * final_time / N
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if N == 1:
        return np.repeat(P, len(t), axis=0)
    return np.column_stack([np.interp(t, centers, P[:, k]) for k in range(P.shape[1])])


def _chunks(n: int, size: Optional[int]):
    size = n if not size else size
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


class PropagationObjective:
    """Regularized batch objective as a function of the propagation weights."""

    def __init__(self, Y0, C, clf: ClassifierParams, hyp: Hypothesis, reg: RegConfig,
                 chunk_size: Optional[int] = None):
        self.Y0, self.C = np.asarray(Y0, dtype=float), np.asarray(C, dtype=float)
        self.clf, self.hyp, self.reg = clf, hyp, reg
        self.chunk_size = chunk_size
        self.s = len(self.Y0)

    def _reg(self, weights):
        if not self.reg.alpha_time:
            return 0.0, 0.0
        v, g = propagation_reg(weights, self.reg.mode)
        return self.reg.alpha_time * v, self.reg.alpha_time * g

    def evaluate(self, weights: NetworkWeights) -> tuple[float, float]:
        """Objective value and error rate on the batch."""
        loss, wrong = 0.0, 0
        for sl in _chunks(self.s, self.chunk_size):
            YN = forward(weights, self.Y0[sl], keep_trace=False).output
            X = self.clf.logits(YN)
            loss += self.hyp.loss(X, self.C[sl]) * (sl.stop - sl.start)
            wrong += int(np.sum(np.argmax(X, axis=1) != np.argmax(self.C[sl], axis=1)))
        return loss / self.s + self._reg(weights)[0], wrong / self.s

    def value_grad(self, weights: NetworkWeights, keep_trace: bool = False):
        """Value, flat gradient, error rate and (optionally) the full-batch trace."""
        loss, wrong = 0.0, 0
        grad = np.zeros(weights.n_params)
        trace = None
        for sl in _chunks(self.s, self.chunk_size):
            tr = forward(weights, self.Y0[sl])
            X = self.clf.logits(tr.output)
            frac = (sl.stop - sl.start) / self.s
            loss += self.hyp.loss(X, self.C[sl]) * frac
            wrong += int(np.sum(np.argmax(X, axis=1) != np.argmax(self.C[sl], axis=1)))
            cot = (self.hyp.grad(X, self.C[sl]) * frac) @ self.clf.W.T
            grad += vjp(weights, tr, cot, input_grad=False).flat()
            if keep_trace and sl.start == 0 and sl.stop == self.s:
                trace = tr
        rv, rg = self._reg(weights)
        return loss + rv, grad + rg, wrong / self.s, trace

    def curvature(self, YN_sub: np.ndarray):
        X = self.clf.logits(YN_sub)
        W = self.clf.W
        return lambda dY: self.hyp.hess_matvec(X, dY @ W) @ W.T


@dataclass
class StepInfo:
    objective_before: float
    objective_after: float
    step: float
    pcg_iterations: int
    pcg_breakdown: bool
    gradient_fallback: bool
    train_error: float


def gauss_newton_update(Y0, C, weights: NetworkWeights, clf: ClassifierParams, cfg: TrainConfig,
                        rng: np.random.Generator, hyp: Optional[Hypothesis] = None):
    """One damped Gauss-Newton step on the propagation parameters.

    Returns the new weights and a :class:`StepInfo`. The regularized batch
    objective does not increase: if the line search fails the step is 0.
    """
    hyp = hyp or _hypothesis(cfg, C)
    obj = PropagationObjective(Y0, C, clf, hyp, cfg.reg, cfg.chunk_size)
    f0, g, err0, trace = obj.value_grad(weights, keep_trace=cfg.chunk_size is None)
    if not np.any(g):
        return weights, StepInfo(f0, f0, 0.0, 0, False, False, err0)

    s = obj.s
    k = min(cfg.hessian_subsample, s)
    sub = np.sort(rng.choice(s, size=k, replace=False)) if k < s else np.arange(s)
    sub_trace = trace.subset(sub) if trace is not None else forward(weights, obj.Y0[sub])
    curv = obj.curvature(sub_trace.output)
    alpha = cfg.reg.alpha_time

    def matvec(v):
        Gv = gauss_newton_matvec(weights, sub_trace, curv, WeightGradient.from_flat(weights, v)).flat()
        if alpha:
            Gv = Gv + alpha * propagation_reg_hessian(weights, v, cfg.reg.mode)
        return Gv

    precond = None
    if cfg.gn_preconditioner == "reg":
        precond = TimePreconditioner(weights, alpha, cfg.reg.mode, cfg.reg.precond_shift)
    pcg_cfg = PcgConfig(cfg.gn_pcg.max_iterations, cfg.gn_pcg.relative_tolerance, precond)
    res = pcg_solve(matvec, -g, pcg_cfg)
    d = res.solution
    slope = g @ d
    fallback = False
    if not slope < 0:
        d, slope, fallback = -g, -(g @ g), True

    theta = weights.flat_params()
    last = {}

    def phi(t):
        f, err = obj.evaluate(weights.with_flat_params(theta + t * d))
        last["err"] = err
        return f

    t, f1 = armijo(phi, f0, slope)
    if t == 0.0 and not fallback:
        d, slope, fallback = -g, -(g @ g), True
        t, f1 = armijo(phi, f0, slope)
    if t == 0.0:
        return weights, StepInfo(f0, f0, 0.0, res.iterations, res.breakdown, fallback, err0)
    return (weights.with_flat_params(theta + t * d),
            StepInfo(f0, f1, t, res.iterations, res.breakdown, fallback, last["err"]))


def _hypothesis(cfg: TrainConfig, C) -> Hypothesis:
    return get_hypothesis(cfg.hypothesis) if cfg.hypothesis else default_hypothesis(np.shape(C)[1])


def _classifier_pcg(cfg: TrainConfig, clf: ClassifierParams) -> PcgConfig:
    L = cfg.reg.operator_L
    if L is None or not cfg.reg.alpha_classifier:
        return cfg.newton_pcg
    spatial = SpatialPreconditioner(L, cfg.reg.precond_shift)
    n, m = clf.W.shape
    scale = 1.0 / cfg.reg.alpha_classifier

    def precond(v):
        out = v.copy()
        out[: n * m] = scale * spatial(v[: n * m].reshape(n, m)).reshape(-1)
        return out

    return PcgConfig(cfg.newton_pcg.max_iterations, cfg.newton_pcg.relative_tolerance, precond)


def propagate_all(weights: NetworkWeights, Y0, chunk_size: Optional[int] = None) -> np.ndarray:
    Y0 = np.asarray(Y0, dtype=float)
    return np.vstack([forward(weights, Y0[sl], keep_trace=False).output for sl in _chunks(len(Y0), chunk_size)])


def evaluate_error(weights: NetworkWeights, clf: ClassifierParams, data: LabeledSet, hyp: Hypothesis,
                   chunk_size: Optional[int] = None) -> float:
    if len(data.Y0) == 0:
        return 0.0
    wrong = 0
    for sl in _chunks(len(data.Y0), chunk_size):
        YN = forward(weights, data.Y0[sl], keep_trace=False).output
        wrong += int(np.sum(np.argmax(clf.logits(YN), axis=1) != np.argmax(data.C[sl], axis=1)))
    return wrong / len(data.Y0)


def bcd_train(data: LabeledSet, val: LabeledSet, weights: NetworkWeights, clf: ClassifierParams,
              cfg: TrainConfig, rng: Optional[np.random.Generator] = None, level: int = 0):
    """Block coordinate descent; returns the lowest-validation-error snapshot."""
    if data.Y0.shape[1] != weights.width or clf.W.shape[0] != weights.width:
        raise ContractError("data, weights and classifier dimensions disagree")
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    hyp = _hypothesis(cfg, data.C)
    report = TrainReport()
    s = len(data.Y0)
    batch = cfg.batch_size if cfg.batch_size and cfg.batch_size < s else None
    newton_pcg = _classifier_pcg(cfg, clf)
    best = None
    for it in range(1, cfg.bcd_iterations + 1):
        idx = np.sort(rng.choice(s, size=batch, replace=False)) if batch else slice(None)
        Yb, Cb = data.Y0[idx], data.C[idx]
        try:
            YN = propagate_all(weights, Yb, cfg.chunk_size)
            clf = newton_pcg_classify(YN, Cb, clf, hyp, cfg.reg.alpha_classifier, cfg.reg.operator_L,
                                      cfg.newton_iters, newton_pcg)
            del YN
            weights, info = gauss_newton_update(Yb, Cb, weights, clf, cfg, rng, hyp)
            val_err = evaluate_error(weights, clf, val, hyp, cfg.chunk_size)
        except DivergenceError as exc:
            report.notes.append(f"level {level} (N={weights.N}) aborted at iteration {it}: {exc}")
            log.warning("%s", report.notes[-1])
            if best is None:
                raise
            break
        rec_key = (val_err, info.objective_after)
        if best is None or rec_key <= best[0]:
            best = (rec_key, it, weights, clf)
        report.records.append(IterationRecord(level, weights.N, it, info.train_error, val_err,
                                              info.objective_after, best[1]))
        log.debug("level %d N=%d it %d obj %.6g TE %.4f VE %.4f step %g pcg %d", level, weights.N, it,
                  info.objective_after, info.train_error, val_err, info.step, info.pcg_iterations)
    if best is None:
        return weights, clf, report
    return best[2], best[3], report


@dataclass
class LevelSchedule:
    layer_counts: Sequence[int]

    def __post_init__(self):
        self.layer_counts = [int(n) for n in self.layer_counts]
        if not self.layer_counts:
            raise ContractError("schedule must contain at least one level")
        if any(n < 1 for n in self.layer_counts):
            raise ContractError("layer counts must be positive")
        if any(b < a for a, b in zip(self.layer_counts, self.layer_counts[1:])):
            raise ContractError("layer counts must not decrease")

    @classmethod
    def doubling(cls, start: int, stop: int) -> "LevelSchedule":
        counts = [start]
        while counts[-1] * 2 <= stop:
            counts.append(counts[-1] * 2)
        return cls(counts)


def multilevel_train(data: LabeledSet, val: LabeledSet, schedule: LevelSchedule, cfg: TrainConfig,
                     spec: NetworkSpec, weights: Optional[NetworkWeights] = None,
                     clf: Optional[ClassifierParams] = None, start_level: int = 0,
                     rng_state: Optional[dict] = None, report: Optional[TrainReport] = None,
                     on_level_end: Optional[Callable] = None):
    """Train on each level of ``schedule``, prolongating between levels.

    Returns ``(weights, clf, report)`` where the model is the last level's
    best snapshot. ``weights``/``clf`` override the random initialization
    (the weights are prolongated to the first level if needed).

    Resuming: pass the checkpointed model of level ``start_level - 1`` as
    ``weights``/``clf`` together with its ``rng_state`` and ``report``; the
    result is bit-identical to an uninterrupted run.
    ``on_level_end(level, weights, clf, report, rng_state)`` is called after
    every level.
    """
    if isinstance(schedule, (list, tuple)):
        schedule = LevelSchedule(schedule)
    counts = schedule.layer_counts
    if not 0 <= start_level <= len(counts):
        raise ContractError(f"start level {start_level} outside schedule of {len(counts)} levels")
    if start_level and (weights is None or clf is None or rng_state is None):
        raise ContractError("resuming needs the checkpointed weights, classifier and rng state")
    rng = np.random.default_rng(cfg.rng_seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    if weights is None:
        weights = init_weights(spec, counts[0], cfg.final_time, rng, cfg.init_scale)
    elif start_level == 0 and weights.N != counts[0]:
        weights = prolongate(weights, counts[0])
    if clf is None:
        clf = ClassifierParams.zeros(spec.width, data.C.shape[1])
    report = report if report is not None else TrainReport()
    for level in range(start_level, len(counts)):
        N = counts[level]
        if N != weights.N:
            weights = prolongate(weights, N)
        weights, clf, rep = bcd_train(data, val, weights, clf, cfg, rng, level)
        report.extend(rep)
        b = rep.best(level)
        if b is not None:
            log.info("level %d N=%d best VE %.4f (TE %.4f)", level, N, b.val_error, b.train_error)
        if on_level_end is not None:
            on_level_end(level, weights, clf, report, rng.bit_generator.state)
    return weights, clf, report
