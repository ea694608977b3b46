import csv

import numpy as np
import pytest

from monoforward.data import synth_blobs
from monoforward.layers import LayerParams
from monoforward.matrix import DenseMatrix, matrix, zeros
from monoforward.model import Model, init_mlp, stream, STREAM_FF_NEG
from monoforward.predict import (
    accuracy,
    eval_csv,
    ff_predict_multipass,
    goodness_stack,
    mf_predict_bp,
    mf_predict_ff,
    per_layer_predict,
)
from monoforward.trainers import TrainConfig, ff_train_batch


def _hand_model(layer_specs, input_dim, m):
    layers = [LayerParams(matrix(W), None, matrix(M)) for W, M in layer_specs]
    return Model(layers, input_dim, m, "all", np.float32, seed=0)


def test_single_layer_ff_equals_bp(rng):
    model = init_mlp(8, [6], 3, seed=1, heads="all")
    X = DenseMatrix(rng.random((20, 8), dtype=np.float32))
    assert np.array_equal(mf_predict_ff(model, X), mf_predict_bp(model, X))


def test_zero_projections_tie_break_to_class_zero(rng):
    model = init_mlp(5, [4, 4], 3, seed=2, heads="all")
    for l in model.layers:
        l.M.data[:] = 0
    X = DenseMatrix(rng.random((7, 5), dtype=np.float32))
    assert (mf_predict_ff(model, X) == 0).all()
    assert (mf_predict_bp(model, X) == 0).all()


def test_three_layer_hand_set_scores_sum_and_tie_break():
    # passthrough weights on a single unit; per-layer scores [1,0],[0,2],[1,0]
    specs = [([[1.0]], [[1.0], [0.0]]),
             ([[1.0]], [[0.0], [2.0]]),
             ([[1.0]], [[1.0], [0.0]])]
    model = _hand_model(specs, 1, 2)
    X = matrix([[1.0]])
    stack = goodness_stack(model, X)
    assert [tuple(g.data[0]) for g in stack] == [(1, 0), (0, 2), (1, 0)]
    # sums to [2, 2]: tie resolves to class 0
    assert mf_predict_ff(model, X)[0] == 0


def test_bp_mode_ignores_earlier_projections(rng):
    model = init_mlp(6, [5, 5], 4, seed=3, heads="all")
    X = DenseMatrix(rng.random((10, 6), dtype=np.float32))
    before = mf_predict_bp(model, X)
    model.layers[0].M.data[:] = rng.standard_normal((4, 5))
    assert np.array_equal(before, mf_predict_bp(model, X))


def test_batch_of_one_matches_batch_of_many(rng):
    model = init_mlp(6, [5], 3, seed=4, heads="all")
    X = DenseMatrix(rng.random((9, 6), dtype=np.float32))
    batched = mf_predict_bp(model, X)
    singles = [mf_predict_bp(model, DenseMatrix(X.data[i:i + 1].copy()))[0]
               for i in range(9)]
    assert np.array_equal(batched, singles)


def test_per_layer_predict_shape_and_last_equals_bp(rng):
    model = init_mlp(7, [6, 6, 6], 4, seed=5, heads="all")
    X = DenseMatrix(rng.random((11, 7), dtype=np.float32))
    per = per_layer_predict(model, X)
    assert len(per) == 3
    assert np.array_equal(per[-1], mf_predict_bp(model, X))


def test_prediction_pure_and_single_pass_counters(rng):
    model = init_mlp(6, [5, 5], 3, seed=6, heads="all")
    X = DenseMatrix(rng.random((30, 6), dtype=np.float32))
    model.passes = 0
    a = mf_predict_ff(model, X)
    assert model.passes == 1
    b = mf_predict_bp(model, X)
    assert model.passes == 2
    assert np.array_equal(mf_predict_ff(model, X), a)
    assert np.array_equal(mf_predict_bp(model, X), b)


@pytest.mark.parametrize("m", [2, 10])
def test_multipass_pass_count(m, rng):
    model = init_mlp(max(12, m + 2), [8], m, seed=7, heads="none")
    X = DenseMatrix(rng.random((6, max(12, m + 2)), dtype=np.float32))
    model.passes = 0
    ff_predict_multipass(model, X, m)
    assert model.passes == m


def test_multipass_m_equal_one_degenerate(rng):
    model = init_mlp(8, [6], 1, seed=8, heads="none")
    X = DenseMatrix(rng.random((5, 8), dtype=np.float32))
    model.passes = 0
    labels = ff_predict_multipass(model, X, 1)
    assert (labels == 0).all()
    assert model.passes == 1


def test_multipass_recovers_memorized_toy_labels():
    rng = np.random.default_rng(11)
    m, feats = 4, 16
    X = DenseMatrix(rng.random((10, feats), dtype=np.float32))
    y = np.arange(10, dtype=np.int64) % m
    model = init_mlp(feats, [32, 32], m, seed=9, heads="none")
    cfg = TrainConfig(algorithm="ff", lr=3e-3, theta=2.0, seed=9)
    neg = stream(9, STREAM_FF_NEG)
    for _ in range(500):
        ff_train_batch(model, X, y, cfg, neg_rng=neg)
    pred = ff_predict_multipass(model, X, m)
    assert accuracy(pred, y) == 1.0


def test_eval_csv_layout(tmp_path, rng):
    ds = synth_blobs(3, 8, 20, 6.0, seed=3)
    model = init_mlp(8, [6, 6], 3, seed=10, heads="all")
    path = tmp_path / "eval.csv"
    eval_csv(path, model, ds.X, ds.y)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["sample_index", "true_label", "pred_ffmode",
                       "pred_bpmode", "pred_layer0", "pred_layer1"]
    assert len(rows) == ds.size + 1
