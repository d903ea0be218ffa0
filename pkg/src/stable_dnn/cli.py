"""Command-line interface: ``stable-dnn {train,analyze,eval}``.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error.
Every command writes ``manifest.json`` into ``--out``; the other output
files carry the manifest's run id (a first-line ``#`` comment in CSV
files, ``meta.run_id`` in the model container).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .classifier import ClassifierParams, default_hypothesis, error_rate, get_hypothesis
from .datasets import DATASETS, LabeledSet, duplicate_features, find_mnist, generate, load_mnist_idx
from .model_io import ModelFormatError, load_model, save_model
from .numerics import ContractError, NumericalBreakdown, PcgConfig
from .plotting import scatter_svg
from .propagation import SCHEMES, NetworkWeights, forward
from .regularization import RegConfig, neumann_laplacian
from .stability import assess, phase_trace
from .training import NetworkSpec, TrainConfig, TrainReport, multilevel_train, propagate_all

EXAMPLE_POINTS = "0.1,0.1;-0.1,-0.1;0,0.5"
MNIST_ENV = "STABLE_DNN_MNIST_DIR"
THREADS_ENV = "STABLE_DNN_THREADS"

log = logging.getLogger("stable_dnn")


class UsageError(Exception):
    """Invalid flags or unusable input files (exit code 2)."""


# ----------------------------------------------------------------------------- helpers

def _parse_levels(text: str) -> list[int]:
    try:
        levels = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated integers, got {text!r}") from None
    if not levels or any(n < 1 for n in levels) or levels != sorted(levels):
        raise argparse.ArgumentTypeError(f"levels must be positive and non-decreasing, got {text!r}")
    return levels


def parse_matrix(text: str) -> np.ndarray:
    """``"a,b;c,d"`` -> 2x2 array (rows separated by ``;``)."""
    try:
        rows = [[float(x) for x in row.split(",")] for row in text.split(";")]
        M = np.array(rows, dtype=float)
    except ValueError:
        raise UsageError(f"cannot parse matrix {text!r}; expected rows like '1,0;0,1'") from None
    if M.ndim != 2:
        raise UsageError(f"ragged matrix {text!r}")
    return M


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _dataset_bytes(*sets: LabeledSet) -> bytes:
    return b"".join(np.ascontiguousarray(s.Y0).tobytes() + np.ascontiguousarray(s.C).tobytes() for s in sets)


class Run:
    """Collects outputs and writes the manifest."""

    def __init__(self, command: str, config: dict, seed: Optional[int], out: Path, input_bytes: bytes):
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": command,
            "config": config,
            "seed": seed,
            "input_hash": git_blob_hash(input_bytes + json.dumps(config, sort_keys=True).encode()),
            "version": __version__,
            "outputs": [],
        }
        self.run_id = self.manifest["input_hash"][:16]
        self.manifest["run_id"] = self.run_id

    @property
    def stamp(self) -> str:
        return f"run {self.run_id} manifest.json"

    def path(self, name: str) -> Path:
        self.manifest["outputs"].append(name)
        return self.out / name

    def write_manifest(self, **extra):
        self.manifest.update(extra)
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")


def _stamp_csv(path: Path, stamp: str):
    text = path.read_text(encoding="utf-8")
    path.write_text(f"# {stamp}\n" + text, encoding="utf-8")


@contextlib.contextmanager
def thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        yield
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


def load_dataset(args, width: Optional[int] = None):
    """Return ``(train, val, image_shape_or_None)``."""
    if args.dataset == "mnist":
        directory = args.mnist_dir or os.environ.get(MNIST_ENV)
        if not directory:
            raise UsageError(f"--dataset mnist needs --mnist-dir or ${MNIST_ENV}")
        try:
            images, labels = find_mnist(directory)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from None
        try:
            train, val = load_mnist_idx(images, labels, args.seed, args.n_train, args.n_val, args.channels)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        return train, val, (28, 28)
    train, val = generate(args.dataset, args.seed)
    if width is not None and width != train.n_features:
        if width < train.n_features:
            raise UsageError(f"width {width} is smaller than the {train.n_features} input features")
        train, val = duplicate_features(train, width), duplicate_features(val, width)
    return train, val, None


def prediction_grid(weights: NetworkWeights, clf: ClassifierParams, hyp, data: LabeledSet, resolution: int):
    """Class probabilities on a raster over the (original 2-D) data domain."""
    P = data.Y0[:, :2]
    lo, hi = P.min(axis=0), P.max(axis=0)
    pad = 0.05 * (hi - lo)
    g1 = np.linspace(lo[0] - pad[0], hi[0] + pad[0], resolution)
    g2 = np.linspace(lo[1] - pad[1], hi[1] + pad[1], resolution)
    pts = np.array([(a, b) for b in g2 for a in g1])
    cols = np.arange(weights.width) % 2
    probs = hyp.predict(clf.logits(propagate_all(weights, pts[:, cols], chunk_size=10000)))
    return g1, g2, pts, probs


def _write_grid(path: Path, pts, probs, stamp):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2"] + [f"p{k}" for k in range(probs.shape[1])])
        for p, q in zip(pts, probs):
            w.writerow([repr(float(p[0])), repr(float(p[1]))] + [repr(float(v)) for v in q])


# ----------------------------------------------------------------------------- commands

def _load_checkpoint(ckpt_dir: Path, run_id: str, n_levels: int) -> dict:
    """Keyword arguments for :func:`multilevel_train` from the newest checkpoint."""
    levels = sorted(int(p.stem.split("_")[1]) for p in ckpt_dir.glob("level_*.json"))
    levels = [k for k in levels if k < n_levels]
    if not levels:
        return {}
    k = levels[-1]
    try:
        weights, clf, _, meta = load_model(ckpt_dir / f"level_{k}.json")
        text = (ckpt_dir / f"level_{k}_report.csv").read_text(encoding="utf-8")
    except (ModelFormatError, OSError) as exc:
        raise UsageError(f"unusable checkpoint for level {k}: {exc}") from None
    if meta.get("run_id") != run_id:
        raise UsageError(f"checkpoint in {ckpt_dir} belongs to run {meta.get('run_id')}, not {run_id}")
    return {"weights": weights, "clf": clf, "start_level": k + 1, "rng_state": meta["rng_state"],
            "report": TrainReport.from_csv(text, meta.get("notes", []))}


def cmd_train(args) -> int:
    train, val, image_shape = load_dataset(args, None if args.dataset == "mnist" else args.width)
    width = train.n_features
    kernel = args.kernel or ("conv" if args.dataset == "mnist" else "dense")
    if kernel == "conv" and image_shape is None:
        raise UsageError("convolution kernels need an image dataset")
    if kernel == "negdef" and args.scheme != "leapfrog":
        raise UsageError("--kernel negdef is only meaningful with --scheme leapfrog")
    L = neumann_laplacian(*image_shape, args.channels) if image_shape and args.alpha_w else None
    batch = args.batch
    hess = args.hess_subsample if args.hess_subsample is not None else min(len(train), 1000)
    if batch is not None and hess > batch:
        hess = batch
    reg = RegConfig(alpha_time=args.alpha_time, alpha_classifier=args.alpha_w, operator_L=L,
                    mode=args.reg_mode)
    cfg = TrainConfig(
        bcd_iterations=args.iterations, batch_size=batch, hessian_subsample=hess,
        gn_pcg=PcgConfig(args.gn_pcg_iters, 1e-2),
        newton_iters=args.newton_iters, newton_pcg=PcgConfig(args.newton_pcg_iters, 1e-1),
        reg=reg, rng_seed=args.seed, final_time=args.final_time, chunk_size=args.chunk,
        init_scale=args.init_scale,
    )
    if args.aux_width is not None and args.scheme != "verlet":
        raise UsageError("--aux-width is only meaningful with --scheme verlet")
    spec = NetworkSpec(scheme=args.scheme, width=width, activation=args.activation, gamma=args.gamma,
                       kernel=kernel, aux_width=args.aux_width, image_shape=image_shape)
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "mnist_dir", "resume")}
    config.update(kernel=kernel, hessian_subsample=hess, width=width)
    run = Run("train", config, args.seed, Path(args.out), _dataset_bytes(train, val))

    ckpt_dir = run.out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    resume = _load_checkpoint(ckpt_dir, run.run_id, len(args.levels)) if args.resume else {}
    if resume:
        print(f"resuming after level {resume['start_level'] - 1}")

    def checkpoint(level, w, c, rep, rng_state):
        meta = {"run_id": run.run_id, "level": level, "rng_state": rng_state, "notes": rep.notes}
        save_model(ckpt_dir / f"level_{level}.json", w, c, meta=meta)
        rep.to_csv(ckpt_dir / f"level_{level}_report.csv")

    weights, clf, report = multilevel_train(train, val, args.levels, cfg, spec, on_level_end=checkpoint, **resume)
    hyp = default_hypothesis(train.n_classes)

    save_model(run.path("model.json"), weights, clf, hyp.name, meta={"run_id": run.run_id})
    rp = run.path("report.csv")
    report.to_csv(rp)
    _stamp_csv(rp, run.stamp)
    te = error_rate(propagate_all(weights, train.Y0, args.chunk), train.C, clf, hyp)
    ve = error_rate(propagate_all(weights, val.Y0, args.chunk), val.C, clf, hyp)
    if image_shape is None:
        g1, g2, pts, probs = prediction_grid(weights, clf, hyp, train, args.grid_resolution)
        _write_grid(run.path("grid.csv"), pts, probs, run.stamp)
        if args.svg:
            cls = np.argmax(probs, axis=1).reshape(len(g2), len(g1))
            scatter_svg(val.Y0[:, :2], val.labels, run.path("validation.svg"), background=(g1, g2, cls),
                        title=f"{args.dataset} {args.scheme} N={weights.N}")
        if args.phase:
            if width != 2:
                raise UsageError("--phase needs width 2")
            pts0 = val.Y0[: args.phase_points]
            phase_trace(weights, pts0, run.path("trajectories.csv"), run.path("field.csv"),
                        header_comment=run.stamp)
    for note in report.notes:
        print(f"note: {note}")
    for N, acc in report.best_val_accuracy().items():
        print(f"N={N:5d}  best VA {100 * acc:.2f}%")
    print(f"TE {100 * te:.2f}% VE {100 * ve:.2f}%")
    run.write_manifest(train_error=te, val_error=ve, layers=weights.N)
    return 0


def _analysis_inputs(args, weights: NetworkWeights):
    if args.points:
        Y0 = parse_matrix(args.points)
    elif args.dataset:
        _, val, _ = load_dataset(args, weights.width)
        Y0 = val.Y0[: args.max_points]
    elif weights.width == 2:
        Y0 = parse_matrix(EXAMPLE_POINTS)
    else:
        Y0 = np.zeros((1, weights.width))
    if Y0.shape[1] != weights.width:
        raise UsageError(f"inputs have {Y0.shape[1]} features but the network has width {weights.width}")
    return Y0


def cmd_analyze(args) -> int:
    if (args.model is None) == (args.kernel is None):
        raise UsageError("give exactly one of --model or --kernel")
    if args.model is not None:
        try:
            weights, _, _, _ = load_model(args.model)
        except ModelFormatError as exc:
            raise UsageError(str(exc)) from None
        source = Path(args.model).read_bytes()
    else:
        K = parse_matrix(args.kernel)
        try:
            weights = NetworkWeights.constant(args.scheme, K, args.layers, args.h, args.bias,
                                              gamma=args.gamma if args.scheme == "antisym" else 0.0,
                                              activation=args.activation)
        except ContractError as exc:
            raise UsageError(str(exc)) from None
        source = K.tobytes()
    Y0 = _analysis_inputs(args, weights)
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "mnist_dir")}
    run = Run("analyze", config, args.seed, Path(args.out), source + Y0.tobytes())
    trace = forward(weights, Y0)
    rep = assess(weights, trace, per_example=args.per_example)
    for name, write in (("stability.csv", rep.write_csv),
                        ("spectra.csv", lambda p: rep.write_spectra(p, "jacobian")),
                        ("kernel_spectra.csv", lambda p: rep.write_spectra(p, "kernel"))):
        p = run.path(name)
        write(p)
        _stamp_csv(p, run.stamp)
    if weights.width == 2:
        phase_trace(weights, Y0, run.path("trajectories.csv"), run.path("field.csv"), header_comment=run.stamp)
    print(f"scheme {weights.scheme}  N={weights.N}  h={weights.h!r}")
    print(f"max Re lambda(K) {max(l.max_real_kernel for l in rep.layers):.6g}  "
          f"max Re lambda(J) {rep.max_real_part:.6g}  max |1+h lambda(J)| {rep.max_amplification:.6g}")
    print(f"max ||K_(j+1) - K_j||_F / h {rep.max_kernel_rate:.6g}")
    for l in rep.layers:
        if l.error:
            print(f"layer {l.layer}: eigensolver failed: {l.error}")
    print("verdict: " + " ".join(rep.verdicts))
    run.write_manifest(verdicts=rep.verdicts)
    return 0


def cmd_eval(args) -> int:
    try:
        weights, clf, hyp_name, _ = load_model(args.model)
    except ModelFormatError as exc:
        raise UsageError(str(exc)) from None
    train, val, _ = load_dataset(args, None if args.dataset == "mnist" else weights.width)
    if train.n_features != weights.width:
        raise UsageError(f"dataset has {train.n_features} features but the model has width {weights.width}")
    if clf is None:
        clf = ClassifierParams.zeros(weights.width, train.n_classes)
    if clf.W.shape[1] != train.n_classes:
        raise UsageError(f"model predicts {clf.W.shape[1]} classes but the dataset has {train.n_classes}")
    hyp = get_hypothesis(hyp_name) if hyp_name else default_hypothesis(train.n_classes)
    te = error_rate(propagate_all(weights, train.Y0, args.chunk), train.C, clf, hyp)
    ve = error_rate(propagate_all(weights, val.Y0, args.chunk), val.C, clf, hyp)
    print(f"TE {100 * te:.2f}% VE {100 * ve:.2f}%")
    if args.out:
        config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "mnist_dir")}
        run = Run("eval", config, args.seed, Path(args.out), Path(args.model).read_bytes())
        run.write_manifest(train_error=te, val_error=ve)
    return 0


# ----------------------------------------------------------------------------- parser

def _dataset_flags(p, required: bool):
    p.add_argument("--dataset", choices=sorted(DATASETS) + ["mnist"], required=required)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mnist-dir", default=None, help=f"directory with MNIST IDX files (or ${MNIST_ENV})")
    p.add_argument("--n-train", type=int, default=50000)
    p.add_argument("--n-val", type=int, default=10000)
    p.add_argument("--channels", type=int, default=6, help="MNIST channels (image replicated)")
    p.add_argument("--chunk", type=int, default=None, help="examples per forward chunk")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stable-dnn", description="Stable ODE-inspired network training and analysis")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="multi-level BCD training")
    _dataset_flags(t, required=True)
    t.add_argument("--scheme", choices=SCHEMES, default="verlet")
    t.add_argument("--levels", type=_parse_levels, default=[4, 8, 16])
    t.add_argument("--width", type=int, default=2)
    t.add_argument("--aux-width", type=int, default=None, help="Verlet auxiliary dimension (default: width)")
    t.add_argument("--final-time", type=float, default=20.0)
    t.add_argument("--alpha-time", type=float, default=1e-3)
    t.add_argument("--alpha-w", type=float, default=0.0)
    t.add_argument("--reg-mode", choices=("time_smooth", "weight_decay"), default="time_smooth")
    t.add_argument("--gamma", type=float, default=1e-3)
    t.add_argument("--activation", choices=("tanh", "relu"), default="tanh")
    t.add_argument("--kernel", choices=("dense", "negdef", "conv"), default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--hess-subsample", type=int, default=None)
    t.add_argument("--iterations", type=int, default=50, help="BCD iterations per level")
    t.add_argument("--gn-pcg-iters", type=int, default=20)
    t.add_argument("--newton-iters", type=int, default=2)
    t.add_argument("--newton-pcg-iters", type=int, default=2)
    t.add_argument("--init-scale", type=float, default=TrainConfig.init_scale)
    t.add_argument("--grid-resolution", type=int, default=100)
    t.add_argument("--phase", action="store_true", help="write phase-plane trajectories")
    t.add_argument("--phase-points", type=int, default=40)
    t.add_argument("--svg", action="store_true")
    t.add_argument("--out", default="out")
    t.add_argument("--resume", action="store_true", help="continue from the newest level checkpoint in --out")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="spectral stability report")
    a.add_argument("--model", default=None)
    a.add_argument("--kernel", default=None, help="constant kernel, e.g. '2,-2;0,2'")
    a.add_argument("--scheme", choices=SCHEMES, default="euler")
    a.add_argument("--h", type=float, default=0.1)
    a.add_argument("--layers", type=int, default=10)
    a.add_argument("--bias", type=float, default=0.0)
    a.add_argument("--gamma", type=float, default=0.0)
    a.add_argument("--activation", choices=("tanh", "relu", "identity"), default="tanh")
    a.add_argument("--points", default=None, help="input states, e.g. '0.1,0.1;0,0.5'")
    a.add_argument("--max-points", type=int, default=200)
    a.add_argument("--per-example", action="store_true")
    _dataset_flags(a, required=False)
    a.add_argument("--out", default="analysis")
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("eval", help="training/validation error of a saved model")
    e.add_argument("--model", required=True)
    _dataset_flags(e, required=True)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except (UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalBreakdown as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
