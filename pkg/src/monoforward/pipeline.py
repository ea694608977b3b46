"""Staged concurrent layerwise training.

Each layer runs in its own thread as a pipeline stage, owning its parameters
exclusively. Stages exchange immutable (batch_id, activation, labels)
messages through bounded FIFOs, so at most `capacity` activation batches per
stage are in flight. Because the dataflow per batch is exactly the dataflow
of the sequential loop, the trained parameters come out bit-identical to a
sequential run over the same batch sequence, provided both runs use the same
arithmetic environment. To that end the whole staged epoch executes with
BLAS pinned to one thread per call (stage overlap supplies the parallelism),
and bit-level comparisons against a sequential run should pin it the same
way, e.g. with `single_thread_blas()`.
"""

from __future__ import annotations

import queue
import threading
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from .layers import dense_forward, local_grads, projection_goodness
from .matrix import NumericError, cross_entropy_with_grad, take_rows
from .model import Model, reinit_layer, stream
from .optim import Updater

_SENTINEL = None


class PipelineError(RuntimeError):
    def __init__(self, stage: int, batch_id: int, cause: BaseException):
        super().__init__(f"stage {stage} failed on batch {batch_id}: {cause}")
        self.stage = stage
        self.batch_id = batch_id
        self.cause = cause


@contextmanager
def single_thread_blas():
    """Pin BLAS to one thread per call; stage threads supply parallelism."""
    with threadpool_limits(limits=1):
        yield


def _forward_sentinel(out_q, abort):
    if out_q is None:
        return
    if abort.is_set():
        # downstream may already be gone; never block on a dead queue
        try:
            out_q.put_nowait(_SENTINEL)
        except queue.Full:
            pass
    else:
        out_q.put(_SENTINEL)


def _stage_loop(i, layer, cfg, in_q, out_q, loss_sink, failure, abort):
    upd = Updater(cfg.optimizer, cfg.lr)
    while True:
        item = in_q.get()
        if item is _SENTINEL:
            _forward_sentinel(out_q, abort)
            return
        batch_id, a_prev, yb = item
        if abort.is_set():
            continue  # drain remaining items, sentinel still to come
        try:
            rec = dense_forward(a_prev, layer)
            G = projection_goodness(rec.a, layer.M)
            loss, dG = cross_entropy_with_grad(G, yb)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at layer {i}")
            dW, db, dM = local_grads(a_prev, rec, dG, layer)
            upd.step(layer, "opt_state_W", layer.W, dW)
            if db is not None:
                upd.step(layer, "opt_state_b", layer.b, db)
            upd.step(layer, "opt_state_M", layer.M, dM)
            loss_sink.append((loss, len(yb)))
            if out_q is not None:
                out_q.put((batch_id, rec.a, yb))
        except BaseException as e:  # propagate across the thread boundary
            failure.append((i, batch_id, e))
            abort.set()
            _forward_sentinel(out_q, abort)
            # keep draining so upstream puts cannot block forever


def run_pipelined_epoch(model: Model, batches, cfg, stage_capacity: int = 2):
    """Drive one epoch of batches through the layer stages.

    Returns (per-layer loss sums weighted by batch size, total samples),
    matching what the sequential epoch loop accumulates.
    """
    if stage_capacity < 1:
        raise ValueError("stage capacity must be >= 1")
    depth = model.depth
    queues = [queue.Queue(maxsize=stage_capacity) for _ in range(depth)]
    loss_sinks = [[] for _ in range(depth)]
    failure: list = []
    abort = threading.Event()
    threads = []
    with single_thread_blas():
        for i in range(depth):
            out_q = queues[i + 1] if i + 1 < depth else None
            t = threading.Thread(
                target=_stage_loop,
                args=(i, model.layers[i], cfg, queues[i], out_q,
                      loss_sinks[i], failure, abort),
                name=f"stage-{i}", daemon=True)
            t.start()
            threads.append(t)
        for batch_id, (Xb, yb) in enumerate(batches):
            if abort.is_set():
                break
            queues[0].put((batch_id, Xb, yb))
        queues[0].put(_SENTINEL)
        for t in threads:
            t.join()
    if failure:
        stage, batch_id, cause = failure[0]
        raise PipelineError(stage, batch_id, cause)
    sums = np.array([sum(l * n for l, n in sink) for sink in loss_sinks])
    count = sum(n for _, n in loss_sinks[0]) if loss_sinks[0] else 0
    return sums, count


def pipelined_train_epoch(model: Model, dataset, cfg, stage_capacity: int = 2,
                          test_ds=None):
    """One staged epoch over the dataset, reported like a sequential epoch."""
    from .trainers import train_epochs

    one = replace(cfg, epochs=1)
    return train_epochs(model, dataset, one, test_ds=test_ds,
                        eval_every=1 if test_ds is not None else 0,
                        pipelined=True, stage_capacity=stage_capacity)


def damage_and_retrain(model: Model, layer_index: int, train_ds, test_ds,
                       cfg, retrain_epochs: int | None = None):
    """Re-randomize one layer, then retrain only that layer in place.

    Predecessor layers are never touched (their bytes are compared before
    and after), successors keep their stale parameters; the report carries
    accuracies before damage, after damage, and after the local retrain.
    """
    from . import predict
    from .trainers import ensure_opt_states

    if not 0 <= layer_index < model.depth:
        raise IndexError(f"layer index {layer_index} out of range")
    acc_before_ff = predict.accuracy(predict.mf_predict_ff(model, test_ds.X),
                                     test_ds.y)
    acc_before_bp = predict.accuracy(predict.mf_predict_bp(model, test_ds.X),
                                     test_ds.y)
    pred_bytes = [model.layers[j].W.tobytes() + model.layers[j].M.tobytes()
                  for j in range(layer_index)]
    reinit_layer(model, layer_index, salt=1)
    acc_damaged_ff = predict.accuracy(predict.mf_predict_ff(model, test_ds.X),
                                      test_ds.y)
    acc_damaged_bp = predict.accuracy(predict.mf_predict_bp(model, test_ds.X),
                                      test_ds.y)
    epochs = cfg.epochs if retrain_epochs is None else retrain_epochs
    upd = Updater(cfg.optimizer, cfg.lr)
    ensure_opt_states(model, cfg)
    shuffle = stream(cfg.seed, 3001, layer_index)
    from .trainers import batch_index_lists

    layer = model.layers[layer_index]
    for _ in range(epochs):
        for idx in batch_index_lists(train_ds.size, cfg.batch_size, shuffle):
            a = take_rows(train_ds.X, idx)
            for j in range(layer_index):
                a = dense_forward(a, model.layers[j]).a
            rec = dense_forward(a, layer)
            G = projection_goodness(rec.a, layer.M)
            loss, dG = cross_entropy_with_grad(G, train_ds.y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss retraining layer "
                                   f"{layer_index}")
            dW, db, dM = local_grads(a, rec, dG, layer)
            upd.step(layer, "opt_state_W", layer.W, dW)
            if db is not None:
                upd.step(layer, "opt_state_b", layer.b, db)
            upd.step(layer, "opt_state_M", layer.M, dM)
    unchanged = all(
        model.layers[j].W.tobytes() + model.layers[j].M.tobytes() == blob
        for j, blob in enumerate(pred_bytes))
    acc_after_ff = predict.accuracy(predict.mf_predict_ff(model, test_ds.X),
                                    test_ds.y)
    acc_after_bp = predict.accuracy(predict.mf_predict_bp(model, test_ds.X),
                                    test_ds.y)
    return {
        "before_ff": acc_before_ff, "before_bp": acc_before_bp,
        "damaged_ff": acc_damaged_ff, "damaged_bp": acc_damaged_bp,
        "after_ff": acc_after_ff, "after_bp": acc_after_bp,
        "predecessors_unchanged": unchanged,
    }
