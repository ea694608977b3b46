"""Layer forward passes and their closed-form local gradients.

A dense layer owns a weight matrix W (fan_in x fan_out), an optional bias
row b, and an optional projection matrix M (classes x fan_out) that maps the
layer's activations to per-class goodness scores. Gradients here are local:
nothing is ever produced with respect to the layer's input, so no error
signal crosses a layer boundary.
"""

from __future__ import annotations

import numpy as np

from .matrix import (
    DenseMatrix,
    ShapeError,
    _wrap,
    col_sums,
    hadamard,
    matmul,
    relu,
    relu_mask,
    transpose,
)


class LayerParams:
    """One dense layer's parameters plus per-parameter optimizer slots."""

    def __init__(self, W: DenseMatrix, b: DenseMatrix | None = None,
                 M: DenseMatrix | None = None):
        if M is not None and M.cols != W.cols:
            raise ShapeError(f"projection cols {M.cols} != fan_out {W.cols}")
        if b is not None and (b.rows != 1 or b.cols != W.cols):
            raise ShapeError(f"bias shape {b.shape} != (1, {W.cols})")
        self.W = W
        self.b = b
        self.M = M
        self.opt_state_W = None
        self.opt_state_b = None
        self.opt_state_M = None

    @property
    def fan_in(self) -> int:
        return self.W.rows

    @property
    def fan_out(self) -> int:
        return self.W.cols


class ActivationRecord:
    """Pre-activation z and activation a = relu(z) for one layer, one batch."""

    __slots__ = ("z", "a")

    def __init__(self, z: DenseMatrix, a: DenseMatrix):
        self.z = z
        self.a = a


def dense_forward(a_prev: DenseMatrix, p: LayerParams) -> ActivationRecord:
    """z = a_prev @ W (+ b broadcast), a = relu(z)."""
    if a_prev.cols != p.W.rows:
        raise ShapeError(f"dense_forward: input {a_prev.shape} vs W {p.W.shape}")
    z = matmul(a_prev, p.W)
    if p.b is not None:
        z = _wrap(z.data + p.b.data)
    return ActivationRecord(z, relu(z))


def projection_goodness(a: DenseMatrix, M: DenseMatrix) -> DenseMatrix:
    """G = a @ M^T; each row holds the per-class goodness scores of a sample."""
    if a.cols != M.cols:
        raise ShapeError(f"projection_goodness: a {a.shape} vs M {M.shape}")
    return _wrap(a.data @ M.data.T)


def local_grads(
    a_prev: DenseMatrix,
    rec: ActivationRecord,
    dG: DenseMatrix,
    p: LayerParams,
):
    """Gradients of the layer's local loss w.r.t. W, b and M.

    dM = dG^T @ a            (through the projection)
    dz = (dG @ M) * [z > 0]  (back through projection and relu)
    dW = a_prev^T @ dz
    db = column sums of dz   (when bias is enabled)

    Returns (dW, db_or_None, dM). No gradient w.r.t. a_prev exists.
    """
    if p.M is None:
        raise ShapeError("local_grads requires a projection matrix")
    dM = _wrap(dG.data.T @ rec.a.data)
    da = _wrap(dG.data @ p.M.data)
    dz = hadamard(da, relu_mask(rec.z))
    dW = _wrap(a_prev.data.T @ dz.data)
    db = col_sums(dz) if p.b is not None else None
    return dW, db, dM


# ---------------------------------------------------------------------------
# small convolutional blocks: 3x3 same-padding conv -> relu -> 2x2 avg pool


class ConvLayerParams:
    """3x3 conv kernels stored as (out_ch, in_ch*9) plus a projection M."""

    def __init__(self, kernels: DenseMatrix, in_ch: int, out_ch: int,
                 M: DenseMatrix | None = None):
        if kernels.shape != (out_ch, in_ch * 9):
            raise ShapeError(f"kernels {kernels.shape} != ({out_ch}, {in_ch * 9})")
        self.kernels = kernels
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.M = M
        self.opt_state_K = None
        self.opt_state_M = None


class ConvActivationRecord:
    """Intermediates retained for the conv block's local gradients."""

    __slots__ = ("patches", "z_cols", "a_flat", "in_hw", "out_ch")

    def __init__(self, patches, z_cols, a_flat, in_hw, out_ch):
        self.patches = patches      # (N*H*W, in_ch*9)
        self.z_cols = z_cols        # (N*H*W, out_ch)
        self.a_flat = a_flat        # (N, out_ch*(H/2)*(W/2)), channel-major
        self.in_hw = in_hw
        self.out_ch = out_ch


def _im2col(x: np.ndarray) -> np.ndarray:
    # x: (N, C, H, W) -> (N*H*W, C*9) with zero padding of 1
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((n, h, w, c, 9), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[..., k] = xp[:, :, dy:dy + h, dx:dx + w].transpose(0, 2, 3, 1)
            k += 1
    return cols.reshape(n * h * w, c * 9)


def conv_block_forward(x: DenseMatrix, chw: tuple[int, int, int],
                       p: ConvLayerParams) -> ConvActivationRecord:
    """Same-padding 3x3 conv -> relu -> 2x2 average pool (stride 2).

    x holds one image per row, channel-major (C*H*W). The flattened output
    view has out_ch*(H/2)*(W/2) columns, also channel-major.
    """
    c, h, w = chw
    if c != p.in_ch:
        raise ShapeError(f"conv input channels {c} != kernels {p.in_ch}")
    if x.cols != c * h * w:
        raise ShapeError(f"conv input cols {x.cols} != {c}*{h}*{w}")
    if h % 2 or w % 2:
        raise ShapeError(f"spatial dims must be even for 2x2 pooling, got {h}x{w}")
    n = x.rows
    patches = _wrap(_im2col(x.data.reshape(n, c, h, w)))
    z_cols = _wrap(patches.data @ p.kernels.data.T)            # (N*H*W, out)
    a4 = np.maximum(z_cols.data, 0).reshape(n, h, w, p.out_ch).transpose(0, 3, 1, 2)
    pooled = a4.reshape(n, p.out_ch, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    a_flat = _wrap(np.ascontiguousarray(pooled.reshape(n, -1)))
    return ConvActivationRecord(patches, z_cols, a_flat, (h, w), p.out_ch)


def conv_local_grads(rec: ConvActivationRecord, dG: DenseMatrix,
                     p: ConvLayerParams):
    """Local gradients (dK, dM) through projection, pool, relu and conv.

    The average-pool backward hands each pooled-cell gradient back as g/4 to
    its 2x2 window. No gradient w.r.t. the block input is produced.
    """
    if p.M is None:
        raise ShapeError("conv_local_grads requires a projection matrix")
    h, w = rec.in_hw
    n = rec.a_flat.rows
    dM = _wrap(dG.data.T @ rec.a_flat.data)
    dflat = dG.data @ p.M.data                                  # (N, out*h2*w2)
    dpool = dflat.reshape(n, rec.out_ch, h // 2, w // 2)
    dup = np.repeat(np.repeat(dpool, 2, axis=2), 2, axis=3) * dflat.dtype.type(0.25)
    dz4 = dup * (rec.z_cols.data.reshape(n, h, w, rec.out_ch)
                 .transpose(0, 3, 1, 2) > 0)
    dz_cols = np.ascontiguousarray(dz4.transpose(0, 2, 3, 1)).reshape(n * h * w,
                                                                      rec.out_ch)
    dK = _wrap(dz_cols.T @ rec.patches.data)
    return dK, dM


def count_parameters(model, prediction_mode: str = "ff") -> int:
    """Exact count of trainable scalars retained for a prediction mode.

    In "bp" mode the projection matrices of all but the last layer are
    dropped, so the count matches a plain backprop network of the same shape.
    """
    if prediction_mode not in ("ff", "bp"):
        raise ValueError(f"unknown prediction mode {prediction_mode!r}")
    total = 0
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        if isinstance(layer, ConvLayerParams):
            total += layer.kernels.rows * layer.kernels.cols
        else:
            total += layer.W.rows * layer.W.cols
            if layer.b is not None:
                total += layer.b.cols
        if layer.M is not None and (prediction_mode == "ff" or i == last):
            total += layer.M.rows * layer.M.cols
    return total
