"""One-batch and full-epoch training loops for the five algorithms.

All trainers share the same model container and config surface and emit
RunReports with an identical schema. The layerwise trainer updates each
layer from purely local information: forward, project to per-class goodness,
cross-entropy against the labels, closed-form gradients, optimizer step,
then hand the pre-update activation to the next layer. Nothing is ever read
from a deeper layer while updating a shallower one.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .layers import dense_forward, local_grads, projection_goodness
from .matrix import (
    DenseMatrix,
    LabelError,
    NumericError,
    ShapeError,
    _wrap,
    col_sums,
    cross_entropy_with_grad,
    hadamard,
    l2_normalize_rows,
    matmul,
    relu_mask,
    row_sumsq,
    take_rows,
    tracker_peak,
)
from .model import STREAM_FF_NEG, STREAM_SHUFFLE, FeedbackMatrices, Model, stream
from .optim import AdamState, Updater

ALGORITHMS = ("mf", "bp", "ff", "fa", "dfa")


@dataclass
class TrainConfig:
    algorithm: str = "mf"
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    theta: float = 2.0          # goodness threshold, only read by ff
    bias: bool = False
    optimizer: str = "adam"
    precision: str = "single"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ReportRow:
    epoch: int
    layer_index: int            # -1 = aggregate
    train_loss: float | None
    train_acc: float | None
    test_acc: float | None
    peak_bytes: int
    epoch_seconds: float

    def core(self):
        """Row without wall time, for determinism comparisons."""
        return (self.epoch, self.layer_index, self.train_loss,
                self.train_acc, self.test_acc, self.peak_bytes)


CSV_HEADER = ["epoch", "layer_index", "train_loss", "train_acc", "test_acc",
              "peak_bytes", "epoch_seconds"]


@dataclass
class RunReport:
    rows: list = field(default_factory=list)

    def append(self, row: ReportRow):
        self.rows.append(row)

    def core_rows(self):
        return [r.core() for r in self.rows]

    def aggregate_rows(self):
        return [r for r in self.rows if r.layer_index == -1]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([
                    r.epoch, r.layer_index,
                    "" if r.train_loss is None else repr(r.train_loss),
                    "" if r.train_acc is None else repr(r.train_acc),
                    "" if r.test_acc is None else repr(r.test_acc),
                    r.peak_bytes, repr(r.epoch_seconds),
                ])

    @classmethod
    def from_csv(cls, path):
        rep = cls()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header != CSV_HEADER:
                raise ValueError(f"unexpected report header {header}")
            for row in reader:
                rep.append(ReportRow(
                    int(row[0]), int(row[1]),
                    float(row[2]) if row[2] else None,
                    float(row[3]) if row[3] else None,
                    float(row[4]) if row[4] else None,
                    int(row[5]), float(row[6])))
        return rep


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow on either tail
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


def embed_labels(X: DenseMatrix, labels, m: int, intensity: float = 1.0
                 ) -> DenseMatrix:
    """Overwrite the first m features of each row with a one-hot label.

    The hot entry is written at the data's maximum intensity (1.0 for the
    pixel pipelines here); remaining features are untouched.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if X.cols < m:
        raise ShapeError(f"need >= {m} features to embed labels, have {X.cols}")
    if y.size and (y.min() < 0 or y.max() >= m):
        raise LabelError(f"label out of range [0, {m})")
    out = X.data.copy()
    out[:, :m] = 0
    out[np.arange(out.shape[0]), y] = X.data.dtype.type(intensity)
    return _wrap(out)


def embed_label(x, label: int, m: int, intensity: float = 1.0) -> DenseMatrix:
    """Single-sample convenience wrapper around embed_labels."""
    xm = x if isinstance(x, DenseMatrix) else DenseMatrix(np.asarray(x))
    return embed_labels(xm, [label], m, intensity)


def ff_goodness(a: DenseMatrix) -> np.ndarray:
    """Per-sample sum of squared activations."""
    return row_sumsq(a)


def ff_losses(g_pos, g_neg, theta: float):
    """Softplus losses pushing positive goodness above theta and negative
    goodness below it; total is their mean."""
    g_pos = np.asarray(g_pos, dtype=np.float64)
    g_neg = np.asarray(g_neg, dtype=np.float64)
    l_pos = _softplus(theta - g_pos)
    l_neg = _softplus(g_neg - theta)
    return l_pos, l_neg, 0.5 * (l_pos + l_neg)


def _check_finite(loss: float, where: str):
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at {where}")


def ensure_opt_states(model: Model, cfg: TrainConfig):
    """Allocate Adam moments up front for every tensor the algorithm trains.

    Eager allocation keeps the tracked memory footprint constant across
    epochs, which the memory-scaling experiments rely on.
    """
    if cfg.optimizer != "adam":
        return
    last = model.depth - 1
    for i, p in enumerate(model.layers):
        if hasattr(p, "kernels"):
            if cfg.algorithm == "mf" and p.opt_state_K is None:
                p.opt_state_K = AdamState(p.kernels)
        else:
            # every algorithm trains W; only the projections differ
            if p.opt_state_W is None:
                p.opt_state_W = AdamState(p.W)
            if p.b is not None and p.opt_state_b is None:
                p.opt_state_b = AdamState(p.b)
        if p.M is not None and p.opt_state_M is None:
            trains_m = (cfg.algorithm == "mf"
                        or (cfg.algorithm in ("bp", "fa", "dfa") and i == last))
            if trains_m:
                p.opt_state_M = AdamState(p.M)


def mf_train_batch(model: Model, Xb: DenseMatrix, yb, cfg: TrainConfig):
    """One layerwise pass: each layer is updated from its own local loss and
    forwards the activation it computed before the update."""
    upd = Updater(cfg.optimizer, cfg.lr)
    a_prev = Xb
    losses = []
    for i, p in enumerate(model.layers):
        rec = dense_forward(a_prev, p)
        G = projection_goodness(rec.a, p.M)
        loss, dG = cross_entropy_with_grad(G, yb)
        _check_finite(loss, f"layer {i}")
        dW, db, dM = local_grads(a_prev, rec, dG, p)
        upd.step(p, "opt_state_W", p.W, dW)
        if db is not None:
            upd.step(p, "opt_state_b", p.b, db)
        upd.step(p, "opt_state_M", p.M, dM)
        losses.append(loss)
        a_prev = rec.a
    return losses


def _forward_all(model: Model, Xb: DenseMatrix):
    recs = []
    a = Xb
    for p in model.layers:
        rec = dense_forward(a, p)
        recs.append(rec)
        a = rec.a
    return recs


def bp_train_batch(model: Model, Xb: DenseMatrix, yb, cfg: TrainConfig) -> float:
    """End-to-end backprop with the last projection as the output head.

    Each layer's weights are stepped as soon as its gradient is known, after
    the error has been transported past it; the transport always uses the
    pre-update weights.
    """
    upd = Updater(cfg.optimizer, cfg.lr)
    recs = _forward_all(model, Xb)
    head = model.layers[-1]
    G = projection_goodness(recs[-1].a, head.M)
    loss, dG = cross_entropy_with_grad(G, yb)
    _check_finite(loss, "output")
    dM = _wrap(dG.data.T @ recs[-1].a.data)
    da = _wrap(dG.data @ head.M.data)
    upd.step(head, "opt_state_M", head.M, dM)
    for i in range(model.depth - 1, -1, -1):
        p = model.layers[i]
        dz = hadamard(da, relu_mask(recs[i].z))
        a_in = Xb if i == 0 else recs[i - 1].a
        dW = _wrap(a_in.data.T @ dz.data)
        db = col_sums(dz) if p.b is not None else None
        if i > 0:
            da = _wrap(dz.data @ p.W.data.T)
        upd.step(p, "opt_state_W", p.W, dW)
        if db is not None:
            upd.step(p, "opt_state_b", p.b, db)
        recs[i] = None
    return loss


def fa_train_batch(model: Model, Xb: DenseMatrix, yb, cfg: TrainConfig,
                   fb: FeedbackMatrices) -> float:
    """Like bp_train_batch but the backward transport uses the fixed random
    feedback matrices instead of the transposed forward weights."""
    upd = Updater(cfg.optimizer, cfg.lr)
    recs = _forward_all(model, Xb)
    head = model.layers[-1]
    G = projection_goodness(recs[-1].a, head.M)
    loss, dG = cross_entropy_with_grad(G, yb)
    _check_finite(loss, "output")
    dM = _wrap(dG.data.T @ recs[-1].a.data)
    da = _wrap(dG.data @ fb.head.data)
    upd.step(head, "opt_state_M", head.M, dM)
    for i in range(model.depth - 1, -1, -1):
        p = model.layers[i]
        dz = hadamard(da, relu_mask(recs[i].z))
        a_in = Xb if i == 0 else recs[i - 1].a
        dW = _wrap(a_in.data.T @ dz.data)
        db = col_sums(dz) if p.b is not None else None
        if i > 0:
            da = _wrap(dz.data @ fb.hidden[i].data.T)
        upd.step(p, "opt_state_W", p.W, dW)
        if db is not None:
            upd.step(p, "opt_state_b", p.b, db)
        recs[i] = None
    return loss


def dfa_train_batch(model: Model, Xb: DenseMatrix, yb, cfg: TrainConfig,
                    fb: FeedbackMatrices) -> float:
    """Direct feedback alignment: every layer receives the output error
    through its own fixed random projection; the head uses the true
    gradient."""
    upd = Updater(cfg.optimizer, cfg.lr)
    recs = _forward_all(model, Xb)
    head = model.layers[-1]
    G = projection_goodness(recs[-1].a, head.M)
    loss, dG = cross_entropy_with_grad(G, yb)
    _check_finite(loss, "output")
    dM = _wrap(dG.data.T @ recs[-1].a.data)
    upd.step(head, "opt_state_M", head.M, dM)
    for i, p in enumerate(model.layers):
        da = _wrap(dG.data @ fb.direct[i].data)
        dz = hadamard(da, relu_mask(recs[i].z))
        a_in = Xb if i == 0 else recs[i - 1].a
        dW = _wrap(a_in.data.T @ dz.data)
        upd.step(p, "opt_state_W", p.W, dW)
        if p.b is not None:
            upd.step(p, "opt_state_b", p.b, col_sums(dz))
    return loss


def ff_train_batch(model: Model, Xb: DenseMatrix, yb, cfg: TrainConfig,
                   neg_rng=None):
    """Paired positive/negative passes within one step.

    The positive input embeds the true label, the negative input a uniformly
    chosen wrong one. Each layer minimizes the softplus goodness losses with
    a closed-form gradient on its own weights only; activations are
    L2-normalized per sample before feeding the next layer.
    """
    if model.m < 2:
        raise LabelError("ff needs at least 2 classes to draw a wrong label")
    upd = Updater(cfg.optimizer, cfg.lr)
    y = np.asarray(yb, dtype=np.int64).reshape(-1)
    if neg_rng is None:
        neg_rng = stream(cfg.seed, STREAM_FF_NEG)
    wrong = (y + 1 + neg_rng.integers(0, model.m - 1, size=y.size)) % model.m
    h_pos = embed_labels(Xb, y, model.m)
    h_neg = embed_labels(Xb, wrong, model.m)
    n = Xb.rows
    losses = []
    for i, p in enumerate(model.layers):
        rec_p = dense_forward(h_pos, p)
        rec_n = dense_forward(h_neg, p)
        g_pos = row_sumsq(rec_p.a)
        g_neg = row_sumsq(rec_n.a)
        _, _, l_total = ff_losses(g_pos, g_neg, cfg.theta)
        loss = float(l_total.mean())
        _check_finite(loss, f"layer {i}")
        dt = rec_p.a.data.dtype
        # dL/dg_pos = -sigmoid(theta - g) / (2n); dg/da = 2a
        coef_p = (-_sigmoid(cfg.theta - g_pos) / n).astype(dt)
        coef_n = (_sigmoid(g_neg - cfg.theta) / n).astype(dt)
        dz_p = rec_p.a.data * coef_p[:, None] * (rec_p.z.data > 0)
        dz_n = rec_n.a.data * coef_n[:, None] * (rec_n.z.data > 0)
        dW = _wrap(h_pos.data.T @ dz_p + h_neg.data.T @ dz_n)
        upd.step(p, "opt_state_W", p.W, dW)
        if p.b is not None:
            db = _wrap(dz_p.sum(axis=0, keepdims=True)
                       + dz_n.sum(axis=0, keepdims=True))
            upd.step(p, "opt_state_b", p.b, db)
        losses.append(loss)
        h_pos = l2_normalize_rows(rec_p.a)
        h_neg = l2_normalize_rows(rec_n.a)
    return losses


def conv_mf_train_batch(model: Model, Xb: DenseMatrix, yb, cfg: TrainConfig):
    """Layerwise step for the conv-block stack (same local rule)."""
    from .layers import conv_block_forward, conv_local_grads

    upd = Updater(cfg.optimizer, cfg.lr)
    c, h, w = model.chw
    a_prev, chw = Xb, (c, h, w)
    losses = []
    for i, p in enumerate(model.layers):
        rec = conv_block_forward(a_prev, chw, p)
        G = projection_goodness(rec.a_flat, p.M)
        loss, dG = cross_entropy_with_grad(G, yb)
        _check_finite(loss, f"conv block {i}")
        dK, dM = conv_local_grads(rec, dG, p)
        upd.step(p, "opt_state_K", p.kernels, dK)
        upd.step(p, "opt_state_M", p.M, dM)
        losses.append(loss)
        a_prev = rec.a_flat
        chw = (p.out_ch, chw[1] // 2, chw[2] // 2)
    return losses


def batch_index_lists(n: int, batch_size: int, rng) -> list[np.ndarray]:
    """Shuffled index chunks for one epoch; the final partial batch is kept.

    Both the sequential and the staged engine consume exactly this sequence,
    which is what makes their parameter trajectories comparable.
    """
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _train_batch_dispatch(model, Xb, yb, cfg, fb, neg_rng):
    if cfg.algorithm == "mf":
        if model.kind == "conv":
            return conv_mf_train_batch(model, Xb, yb, cfg)
        return mf_train_batch(model, Xb, yb, cfg)
    if cfg.algorithm == "bp":
        return [bp_train_batch(model, Xb, yb, cfg)]
    if cfg.algorithm == "ff":
        return ff_train_batch(model, Xb, yb, cfg, neg_rng)
    if cfg.algorithm == "fa":
        return [fa_train_batch(model, Xb, yb, cfg, fb)]
    return [dfa_train_batch(model, Xb, yb, cfg, fb)]


def _evaluate(model: Model, ds, cfg: TrainConfig):
    """Test-set accuracy: per layer where heads exist, plus the aggregate."""
    from . import predict

    if cfg.algorithm == "ff":
        labels = predict.ff_predict_multipass(model, ds.X, ds.m)
        return None, predict.accuracy(labels, ds.y)
    if cfg.algorithm == "mf" and model.heads == "all":
        per_layer = predict.per_layer_predict(model, ds.X)
        agg = predict.accuracy(predict.mf_predict_ff(model, ds.X), ds.y)
        return [predict.accuracy(p, ds.y) for p in per_layer], agg
    labels = predict.mf_predict_bp(model, ds.X)
    return None, predict.accuracy(labels, ds.y)


def train_epochs(model: Model, train_ds, cfg: TrainConfig, test_ds=None,
                 eval_every: int = 1, eval_train: bool = False, hooks=(),
                 pipelined: bool = False, stage_capacity: int = 2) -> RunReport:
    """Shuffled mini-batch epochs with per-epoch reporting.

    eval_every=0 disables per-epoch evaluation (test_acc left blank).
    With pipelined=True the layerwise algorithm runs as concurrent stages;
    the batch sequence and the resulting parameters are unchanged.
    """
    report = RunReport()
    if cfg.epochs == 0 or train_ds.size == 0:
        return report
    shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE)
    neg_rng = stream(cfg.seed, STREAM_FF_NEG)
    fb = None
    if cfg.algorithm == "fa":
        fb = FeedbackMatrices.for_fa(model, cfg.seed)
    elif cfg.algorithm == "dfa":
        fb = FeedbackMatrices.for_dfa(model, cfg.seed)
    ensure_opt_states(model, cfg)
    n_layers = model.depth
    per_layer_report = cfg.algorithm in ("mf", "ff")
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        idx_lists = batch_index_lists(train_ds.size, cfg.batch_size, shuffle_rng)
        sums = np.zeros(n_layers if per_layer_report else 1)
        count = 0
        if pipelined:
            if cfg.algorithm != "mf" or model.kind != "mlp":
                raise ValueError("pipelined training is defined for the "
                                 "layerwise mlp algorithm only")
            from .pipeline import run_pipelined_epoch

            batches = ((take_rows(train_ds.X, idx), train_ds.y[idx])
                       for idx in idx_lists)
            sums, count = run_pipelined_epoch(model, batches, cfg,
                                              stage_capacity)
        else:
            for b, idx in enumerate(idx_lists):
                Xb = take_rows(train_ds.X, idx)
                yb = train_ds.y[idx]
                try:
                    losses = _train_batch_dispatch(model, Xb, yb, cfg, fb,
                                                   neg_rng)
                except NumericError as e:
                    raise NumericError(f"epoch {epoch} batch {b}: {e}") from e
                sums += np.asarray(losses) * len(idx)
                count += len(idx)
        mean_losses = sums / count
        secs = time.perf_counter() - t0
        peak = tracker_peak()
        do_eval = (test_ds is not None and eval_every
                   and (epoch + 1) % eval_every == 0)
        per_layer_acc, agg_acc = (None, None)
        train_acc = None
        if do_eval:
            per_layer_acc, agg_acc = _evaluate(model, test_ds, cfg)
            if eval_train:
                _, train_acc = _evaluate(model, train_ds, cfg)
        if per_layer_report:
            for i in range(n_layers):
                report.append(ReportRow(
                    epoch, i, float(mean_losses[i]), None,
                    None if per_layer_acc is None else per_layer_acc[i],
                    peak, secs))
        report.append(ReportRow(epoch, -1, float(mean_losses.mean()),
                                train_acc, agg_acc, peak, secs))
        for hook in hooks:
            hook(epoch, model, report)
    return report


def single_epoch_cfg(cfg: TrainConfig) -> TrainConfig:
    return replace(cfg, epochs=1)
