"""Prediction procedures: goodness aggregation, last-layer readout, and the
label-scanning multi-pass used by goodness-threshold training.

All routines are read-only on the model and deterministic; argmax ties break
to the lowest class index. `model.passes` counts full traversals of the
input, regardless of internal chunking: the two projection-based modes cost
exactly one pass, the scanning mode costs one pass per candidate label.
"""

from __future__ import annotations

import csv

import numpy as np

from .layers import conv_block_forward, dense_forward, projection_goodness
from .matrix import DenseMatrix, _wrap, l2_normalize_rows, row_sumsq, take_rows
from .model import Model
from .trainers import embed_labels

EVAL_CHUNK = 4096


def _chunks(n: int, size: int = EVAL_CHUNK):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def _layer_inputs(model: Model, x: DenseMatrix):
    """Yield (layer, activation) pairs walking the stack once."""
    if model.kind == "conv":
        chw = model.chw
        a = x
        for p in model.layers:
            rec = conv_block_forward(a, chw, p)
            yield p, rec.a_flat
            a = rec.a_flat
            chw = (p.out_ch, chw[1] // 2, chw[2] // 2)
    else:
        a = x
        for p in model.layers:
            rec = dense_forward(a, p)
            yield p, rec.a
            a = rec.a


def goodness_stack(model: Model, X: DenseMatrix) -> list[DenseMatrix]:
    """Per-layer goodness scores G_i (samples x classes), one forward pass."""
    if model.heads != "all":
        raise ValueError("goodness_stack needs a projection on every layer")
    parts = [[] for _ in model.layers]
    for lo, hi in _chunks(X.rows):
        x = take_rows(X, range(lo, hi))
        for i, (p, a) in enumerate(_layer_inputs(model, x)):
            parts[i].append(projection_goodness(a, p.M).data)
    model.passes += 1
    return [_wrap(np.concatenate(ps, axis=0)) for ps in parts]


def mf_predict_ff(model: Model, X: DenseMatrix) -> np.ndarray:
    """Sum the per-layer goodness scores and take the best class."""
    stack = goodness_stack(model, X)
    total = stack[0].data.copy()
    for g in stack[1:]:
        total += g.data
    return np.argmax(total, axis=1).astype(np.int64)


def mf_predict_bp(model: Model, X: DenseMatrix) -> np.ndarray:
    """Read only the last layer's goodness; earlier projections are unread."""
    out = np.empty(X.rows, dtype=np.int64)
    for lo, hi in _chunks(X.rows):
        a = take_rows(X, range(lo, hi))
        if model.kind == "conv":
            chw = model.chw
            for p in model.layers:
                a = conv_block_forward(a, chw, p).a_flat
                chw = (p.out_ch, chw[1] // 2, chw[2] // 2)
        else:
            for p in model.layers:
                a = dense_forward(a, p).a
        G = projection_goodness(a, model.layers[-1].M)
        out[lo:hi] = np.argmax(G.data, axis=1)
    model.passes += 1
    return out


def per_layer_predict(model: Model, X: DenseMatrix) -> list[np.ndarray]:
    """Independent argmax per layer; the last entry equals mf_predict_bp."""
    stack = goodness_stack(model, X)
    return [np.argmax(g.data, axis=1).astype(np.int64) for g in stack]


def ff_predict_multipass(model: Model, X: DenseMatrix, m: int,
                         include_first: bool = False) -> np.ndarray:
    """Scan every candidate label: embed it, run forward, sum the squared
    activations over layers, and pick the best-scoring label.

    The first layer's goodness is excluded by default since it is dominated
    by the embedded label itself.
    """
    n = X.rows
    totals = np.zeros((m, n), dtype=np.float64)
    for c in range(m):
        for lo, hi in _chunks(n):
            x = take_rows(X, range(lo, hi))
            h = embed_labels(x, np.full(hi - lo, c, dtype=np.int64), m)
            for i, p in enumerate(model.layers):
                rec = dense_forward(h, p)
                if include_first or i > 0:
                    totals[c, lo:hi] += row_sumsq(rec.a)
                h = l2_normalize_rows(rec.a)
        model.passes += 1
    return np.argmax(totals, axis=0).astype(np.int64)


def accuracy(pred: np.ndarray, y) -> float:
    y = np.asarray(y).reshape(-1)
    return float(np.mean(pred == y)) if y.size else 0.0


def eval_csv(path, model: Model, X: DenseMatrix, y_true) -> None:
    """Per-sample predictions: aggregated mode, last-layer mode, per layer."""
    per_layer = per_layer_predict(model, X)
    pred_ff = mf_predict_ff(model, X)
    pred_bp = per_layer[-1]
    y = np.asarray(y_true, dtype=np.int64).reshape(-1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_index", "true_label", "pred_ffmode", "pred_bpmode"]
                   + [f"pred_layer{i}" for i in range(model.depth)])
        for i in range(X.rows):
            w.writerow([i, y[i], pred_ff[i], pred_bp[i]]
                       + [int(p[i]) for p in per_layer])
