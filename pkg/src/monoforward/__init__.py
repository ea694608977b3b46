"""Layerwise local-learning training engine with reference baselines.

Five trainers (layerwise goodness-projection, end-to-end backprop,
goodness-threshold forward-forward, feedback alignment, direct feedback
alignment) share one model container, plus memory profiling, a staged
concurrent training engine, and a CLI.
"""

from .data import Dataset, load_cifar10, load_idx, load_named, split, synth_blobs
from .layers import (
    ActivationRecord,
    ConvLayerParams,
    LayerParams,
    conv_block_forward,
    conv_local_grads,
    count_parameters,
    dense_forward,
    local_grads,
    projection_goodness,
)
from .matrix import (
    DOUBLE,
    SINGLE,
    AllocationTracker,
    DenseMatrix,
    LabelError,
    NumericError,
    ShapeError,
    cross_entropy_with_grad,
    matmul,
    matrix,
    relu,
    relu_mask,
    softmax_rows,
    tracker,
    tracker_peak,
    tracker_reset,
    transpose,
    zeros,
)
from .model import (
    FeedbackMatrices,
    Model,
    init_conv,
    init_mlp,
    load_model,
    save_model,
)
from .optim import AdamState, adam_step, sgd_step
from .pipeline import (
    PipelineError,
    damage_and_retrain,
    pipelined_train_epoch,
    single_thread_blas,
)
from .predict import (
    accuracy,
    ff_predict_multipass,
    goodness_stack,
    mf_predict_bp,
    mf_predict_ff,
    per_layer_predict,
)
from .trainers import (
    RunReport,
    TrainConfig,
    bp_train_batch,
    dfa_train_batch,
    embed_label,
    embed_labels,
    fa_train_batch,
    ff_goodness,
    ff_losses,
    ff_train_batch,
    mf_train_batch,
    train_epochs,
)

__version__ = "0.1.0"
