"""Memory-vs-depth experiments, live-memory traces, epoch timing ratios,
and per-layer accuracy tables.

Memory is measured with the payload-byte tracker from the matrix module,
not OS RSS: the tracker counts exactly the matrices the algorithms decide
to keep alive, which makes the slopes portable and assertable. Closed-form
models of the expected per-layer growth are provided alongside as an
independent check on the measured slopes.
"""

from __future__ import annotations

import gc
import os
import statistics
import tempfile
from dataclasses import dataclass, replace

import numpy as np

from .container import read_container, write_container
from .layers import LayerParams
from .matrix import DenseMatrix, tracker, tracker_peak, tracker_reset
from .model import STREAM_SHUFFLE, Model, init_mlp, stream
from .optim import AdamState
from .trainers import (
    TrainConfig,
    batch_index_lists,
    ensure_opt_states,
    train_epochs,
)

ELEM = {"single": 4, "double": 8}


@dataclass
class MemoryProfile:
    algorithm: str
    depth: int
    peak_bytes: int
    trace: list | None = None


def analytic_bp_slope_bytes(batch: int, width: int, elem_size: int = 4,
                            optimizer: str = "adam") -> float:
    """Expected tracked-bytes growth per extra layer for end-to-end training:
    z and a are retained for every layer until the backward pass, plus the
    layer's weights and (for adam) two moment buffers."""
    opt = 3 if optimizer == "adam" else 1
    return (2 * batch * width + opt * width * width) * elem_size


def analytic_mf_slope_bytes(width: int, m: int, elem_size: int = 4,
                            optimizer: str = "adam") -> float:
    """Expected growth per extra layer for layerwise training: only the
    parameters and their optimizer state scale with depth; activations are
    released before the next layer runs."""
    opt = 3 if optimizer == "adam" else 1
    return opt * (width * width + m * width) * elem_size


def _heads_for(algorithm: str) -> str:
    return "all" if algorithm == "mf" else ("none" if algorithm == "ff"
                                            else "last")


def memory_vs_depth(algorithm: str, depths, width: int, dataset, cfg,
                    persist_weights: bool = False, spill_dir=None):
    """Train one epoch per depth under the tracker; fit peak bytes vs depth.

    Returns (profiles, slope); slope is None when fewer than two depths are
    given. With persist_weights the layerwise trainer keeps at most one
    layer's parameters in memory, spilling the rest to disk.
    """
    depths = list(depths)
    if not depths:
        raise ValueError("need at least one depth")
    profiles = []
    for depth in depths:
        gc.collect()
        tracker_reset()
        model = init_mlp(dataset.features, [width] * depth, dataset.m,
                         cfg.seed, bias=cfg.bias,
                         heads=_heads_for(algorithm))
        run_cfg = replace(cfg, algorithm=algorithm, epochs=1)
        if persist_weights:
            if algorithm != "mf":
                raise ValueError("weight persistence applies to the "
                                 "layerwise trainer only")
            mf_persisted_epoch(model, dataset, run_cfg, spill_dir)
        else:
            train_epochs(model, dataset, run_cfg, eval_every=0)
        profiles.append(MemoryProfile(algorithm, depth, tracker_peak()))
        del model
        gc.collect()
    slope = None
    if len(depths) >= 2:
        slope = float(np.polyfit(depths, [p.peak_bytes for p in profiles],
                                 1)[0])
    return profiles, slope


# -- weight-persistence mode -------------------------------------------------

def _spill_layer(path, p: LayerParams):
    tensors = {"W": p.W.data, "M": p.M.data}
    meta = {"t_W": 0, "t_M": 0, "bias": p.b is not None}
    if p.b is not None:
        tensors["b"] = p.b.data
    for slot, name in (("opt_state_W", "W"), ("opt_state_b", "b"),
                       ("opt_state_M", "M")):
        st = getattr(p, slot)
        if st is not None:
            tensors[f"m_{name}"] = st.m.data
            tensors[f"v_{name}"] = st.v.data
            meta[f"t_{name}"] = st.t
    write_container(path, tensors, meta)


def _unspill_layer(path) -> LayerParams:
    tensors, meta = read_container(path)
    p = LayerParams(DenseMatrix(tensors["W"]),
                    DenseMatrix(tensors["b"]) if meta["bias"] else None,
                    DenseMatrix(tensors["M"]))
    for slot, name, param in (("opt_state_W", "W", p.W),
                              ("opt_state_b", "b", p.b),
                              ("opt_state_M", "M", p.M)):
        if f"m_{name}" in tensors:
            st = AdamState(param)
            st.m.data[:] = tensors[f"m_{name}"]
            st.v.data[:] = tensors[f"v_{name}"]
            st.t = meta[f"t_{name}"]
            setattr(p, slot, st)
    return p


def mf_persisted_epoch(model: Model, dataset, cfg: TrainConfig,
                       spill_dir=None):
    """One layerwise epoch with layer parameters persisted to storage.

    Only the layer currently being updated resides in memory, so the peak
    footprint is independent of network depth. Parameters (with optimizer
    state) round-trip through the spill files and end up back in the model.
    """
    own_dir = spill_dir is None
    spill_dir = spill_dir or tempfile.mkdtemp(prefix="mf-spill-")
    paths = [os.path.join(spill_dir, f"layer{i}.bin")
             for i in range(model.depth)]
    ensure_opt_states(model, cfg)
    for i, p in enumerate(model.layers):
        _spill_layer(paths[i], p)
        model.layers[i] = None
    shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE)
    losses = np.zeros(model.depth)
    count = 0
    from .matrix import take_rows  # local import keeps module deps flat

    for idx in batch_index_lists(dataset.size, cfg.batch_size, shuffle_rng):
        Xb = take_rows(dataset.X, idx)
        yb = dataset.y[idx]
        a_prev = Xb
        for i in range(model.depth):
            p = _unspill_layer(paths[i])
            loss, a_prev = _single_layer_step(p, a_prev, yb, cfg)
            losses[i] += loss * len(idx)
            _spill_layer(paths[i], p)
        count += len(idx)
    for i in range(model.depth):
        model.layers[i] = _unspill_layer(paths[i])
        if own_dir:
            os.remove(paths[i])
    if own_dir:
        os.rmdir(spill_dir)
    return losses / count


def _single_layer_step(p: LayerParams, a_prev, yb, cfg):
    # one layer of the layerwise batch step; returns (loss, activation out)
    from .layers import dense_forward, local_grads, projection_goodness
    from .matrix import cross_entropy_with_grad
    from .optim import Updater

    upd = Updater(cfg.optimizer, cfg.lr)
    rec = dense_forward(a_prev, p)
    G = projection_goodness(rec.a, p.M)
    loss, dG = cross_entropy_with_grad(G, yb)
    dW, db, dM = local_grads(a_prev, rec, dG, p)
    upd.step(p, "opt_state_W", p.W, dW)
    if db is not None:
        upd.step(p, "opt_state_b", p.b, db)
    upd.step(p, "opt_state_M", p.M, dM)
    return loss, rec.a


# -- live-memory traces ------------------------------------------------------

def memory_trace(algorithm: str, dataset, cfg, width: int, depth: int):
    """Per-allocation live-bytes samples over one epoch, model excluded.

    The model and its optimizer state are allocated before tracing starts,
    so the trace shows the per-batch dynamics: a peak while activations and
    gradients are alive, a valley between batches.
    """
    model = init_mlp(dataset.features, [width] * depth, dataset.m, cfg.seed,
                     bias=cfg.bias, heads=_heads_for(algorithm))
    run_cfg = replace(cfg, algorithm=algorithm, epochs=1 if cfg.epochs else 0)
    ensure_opt_states(model, run_cfg)
    tr = tracker()
    tr.start_trace()
    train_epochs(model, dataset, run_cfg, eval_every=0)
    events = tr.stop_trace()
    trace = [(seq, live) for seq, _t, live in events]
    lives = [live for _, live in trace] or [0]
    peak, valley = max(lives), min(lives)
    summary = {
        "peak": peak,
        "valley": valley,
        "ptv": peak / valley if valley else float("inf"),
    }
    return trace, summary


def count_trace_peaks(trace) -> int:
    """Local maxima above the midline; one per batch for end-to-end runs."""
    lives = np.array([live for _, live in trace], dtype=np.float64)
    if lives.size < 3:
        return 0
    mid = lives.min() + 0.5 * (lives.max() - lives.min())
    above = lives > mid
    # count rising edges of the above-midline regions
    return int(np.sum(above[1:] & ~above[:-1]))


# -- wall-time ratios ---------------------------------------------------------

def epoch_time_ratio(dataset, cfg, widths, epochs: int = 5,
                     stage_capacity: int = 2):
    """Median epoch wall time for end-to-end vs layerwise (staged and
    sequential) training; reports the end-to-end / staged ratio."""
    run = replace(cfg, epochs=max(epochs, 5))

    def timed(algorithm: str, pipelined: bool):
        model = init_mlp(dataset.features, list(widths), dataset.m, cfg.seed,
                         bias=cfg.bias, heads=_heads_for(algorithm))
        rep = train_epochs(model, dataset, replace(run, algorithm=algorithm),
                           eval_every=0, pipelined=pipelined,
                           stage_capacity=stage_capacity)
        return statistics.median(r.epoch_seconds for r in rep.aggregate_rows())

    bp = timed("bp", False)
    mf_seq = timed("mf", False)
    mf_pipe = timed("mf", True)
    return {
        "bp_epoch_seconds": bp,
        "mf_sequential_epoch_seconds": mf_seq,
        "mf_pipelined_epoch_seconds": mf_pipe,
        "ratio_bp_over_mf_pipelined": bp / mf_pipe,
        "ratio_bp_over_mf_sequential": bp / mf_seq,
        "ratio_mf_sequential_over_pipelined": mf_seq / mf_pipe,
    }


# -- per-layer accuracy table --------------------------------------------------

def per_layer_report(model: Model, test_ds):
    """Accuracy per layer plus the aggregated goodness-sum row (L+1 rows)."""
    from . import predict

    per_layer = predict.per_layer_predict(model, test_ds.X)
    rows = [(f"layer_{i}", predict.accuracy(p, test_ds.y))
            for i, p in enumerate(per_layer)]
    agg = predict.accuracy(predict.mf_predict_ff(model, test_ds.X), test_ds.y)
    rows.append(("aggregate", agg))
    return rows


def write_rows_csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def write_columns(path, names, columns):
    """Plain whitespace-separated columns (gnuplot-friendly)."""
    with open(path, "w") as f:
        f.write("# " + " ".join(names) + "\n")
        for row in zip(*columns):
            f.write(" ".join(str(v) for v in row) + "\n")
