"""Versioned JSON model container (propagation weights + classifier).

Floats are stored with ``repr`` precision, so a save/load round trip is
exact and identical models serialize to identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .classifier import ClassifierParams
from .numerics import AntisymmetricView, ContractError, Conv3x3, Dense, LinearOperator, NegDef
from .propagation import NetworkWeights

FORMAT = "stable-dnn-model"
VERSION = 1


class ModelFormatError(ValueError):
    """Unreadable or inconsistent model container."""


def _array(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(x) for x in a.reshape(-1)]}


def _unarray(d) -> np.ndarray:
    return np.array(d["data"], dtype=float).reshape(d["shape"])


def _encode_kernel(op: LinearOperator) -> dict:
    if isinstance(op, AntisymmetricView):
        return {"type": "antisym", "gamma": op.gamma, "base": _encode_kernel(op.base)}
    if isinstance(op, NegDef):
        return {"type": "negdef", "factor": _array(op.C)}
    if isinstance(op, Conv3x3):
        return {"type": "conv3x3", "height": op.height, "width": op.width, "stencils": _array(op.S)}
    if isinstance(op, Dense):
        return {"type": "dense", "matrix": _array(op.K)}
    raise ContractError(f"cannot serialize operator {type(op).__name__}")


def _decode_kernel(d) -> LinearOperator:
    kind = d["type"]
    if kind == "antisym":
        return AntisymmetricView(_decode_kernel(d["base"]), d["gamma"])
    if kind == "negdef":
        return NegDef(_unarray(d["factor"]))
    if kind == "conv3x3":
        return Conv3x3(_unarray(d["stencils"]), d["height"], d["width"])
    if kind == "dense":
        return Dense(_unarray(d["matrix"]))
    raise ModelFormatError(f"unknown kernel type {kind!r}")


def to_dict(weights: NetworkWeights, clf: Optional[ClassifierParams] = None, hypothesis: Optional[str] = None,
            meta: Optional[dict] = None) -> dict:
    out = {
        "format": FORMAT,
        "version": VERSION,
        "network": {
            "scheme": weights.scheme,
            "N": weights.N,
            "h": weights.h,
            "gamma": weights.gamma,
            "activation": weights.activation.name,
            "kernels": [_encode_kernel(k) for k in weights.kernels],
            "biases": [float(b) for b in weights.biases],
        },
    }
    if clf is not None:
        out["classifier"] = {"W": _array(clf.W), "mu": _array(clf.mu), "hypothesis": hypothesis}
    if meta:
        out["meta"] = meta
    return out


def from_dict(d: dict):
    """Return ``(weights, clf_or_None, hypothesis_name_or_None, meta)``."""
    if d.get("format") != FORMAT:
        raise ModelFormatError("not a stable-dnn model container")
    if d.get("version") != VERSION:
        raise ModelFormatError(f"unsupported container version {d.get('version')!r}")
    try:
        net = d["network"]
        kernels = [_decode_kernel(k) for k in net["kernels"]]
        if len(kernels) != net["N"]:
            raise ModelFormatError(f"container declares N={net['N']} but holds {len(kernels)} kernels")
        weights = NetworkWeights(net["scheme"], net["h"], kernels, net["biases"], net["gamma"], net["activation"])
        clf, hyp = None, None
        if "classifier" in d:
            c = d["classifier"]
            clf = ClassifierParams(_unarray(c["W"]), _unarray(c["mu"]))
            hyp = c.get("hypothesis")
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed model container: {exc}") from exc
    except ContractError as exc:
        raise ModelFormatError(f"inconsistent model container: {exc}") from exc
    return weights, clf, hyp, d.get("meta", {})


def dumps(weights, clf=None, hypothesis=None, meta=None) -> str:
    return json.dumps(to_dict(weights, clf, hypothesis, meta), sort_keys=True, separators=(",", ":")) + "\n"


def save_model(path, weights: NetworkWeights, clf: Optional[ClassifierParams] = None,
               hypothesis: Optional[str] = None, meta: Optional[dict] = None) -> None:
    Path(path).write_text(dumps(weights, clf, hypothesis, meta), encoding="utf-8")


def load_model(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc.strerror}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc.msg} at offset {exc.pos})") from exc
    return from_dict(d)
