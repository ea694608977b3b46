"""Model containers, reproducible initialization, and checkpointing.

Every tensor is drawn from its own RNG stream keyed by (seed, layer index,
tensor role). Layer 1's initialization is therefore identical no matter how
deep the network is, which is what makes layers pluggable: a depth-2 and a
depth-3 run share bit-identical early layers.
"""

from __future__ import annotations

import numpy as np

from .container import CheckpointError, read_container, write_container
from .layers import ConvLayerParams, LayerParams
from .matrix import DOUBLE, SINGLE, DenseMatrix, _wrap, zeros

ROLE_W = 1
ROLE_B = 2
ROLE_M = 3
ROLE_FEEDBACK = 4
ROLE_DAMAGE = 5
STREAM_SHUFFLE = 1001
STREAM_FF_NEG = 1002


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for one (seed, ...) key."""
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), *key]))


def _uniform(rng, rows, cols, bound, precision):
    return _wrap(rng.uniform(-bound, bound, size=(rows, cols))
                 .astype(np.dtype(precision)))


class Model:
    """A stack of layers sharing one input dim and one class count.

    heads selects which projection matrices exist: "all" (layerwise
    training), "last" (plain backprop head only) or "none" (goodness-only
    training). `passes` counts full forward traversals of a dataset and is
    incremented by the prediction routines.
    """

    def __init__(self, layers, input_dim, m, heads, precision, seed,
                 kind="mlp", chw=None):
        self.layers = layers
        self.input_dim = input_dim
        self.m = m
        self.heads = heads
        self.precision = np.dtype(precision)
        self.seed = seed
        self.kind = kind
        self.chw = chw
        self.passes = 0

    @property
    def depth(self) -> int:
        return len(self.layers)

    def widths(self):
        return [l.fan_out for l in self.layers]

    def param_bytes(self) -> bytes:
        """Concatenated raw parameter payloads, for bit-level comparisons."""
        chunks = []
        for l in self.layers:
            if isinstance(l, ConvLayerParams):
                chunks.append(l.kernels.tobytes())
            else:
                chunks.append(l.W.tobytes())
                if l.b is not None:
                    chunks.append(l.b.tobytes())
            if l.M is not None:
                chunks.append(l.M.tobytes())
        return b"".join(chunks)


def _head_wanted(heads: str, i: int, depth: int) -> bool:
    if heads == "all":
        return True
    if heads == "last":
        return i == depth - 1
    if heads == "none":
        return False
    raise ValueError(f"unknown heads mode {heads!r}")


def init_mlp(input_dim: int, widths, m: int, seed: int, bias: bool = False,
             precision=SINGLE, heads: str = "all") -> Model:
    """ReLU MLP with Kaiming-uniform weights and uniform(+-1/sqrt(n)) heads."""
    widths = list(widths)
    layers = []
    fan_in = input_dim
    for i, fan_out in enumerate(widths):
        w_rng = stream(seed, i + 1, ROLE_W)
        W = _uniform(w_rng, fan_in, fan_out, np.sqrt(6.0 / fan_in), precision)
        b = zeros(1, fan_out, precision) if bias else None
        M = None
        if _head_wanted(heads, i, len(widths)):
            m_rng = stream(seed, i + 1, ROLE_M)
            M = _uniform(m_rng, m, fan_out, 1.0 / np.sqrt(fan_out), precision)
        layers.append(LayerParams(W, b, M))
        fan_in = fan_out
    return Model(layers, input_dim, m, heads, precision, seed)


def reinit_layer(model: Model, layer_index: int, salt: int = 0):
    """Re-randomize one layer in place (fresh damage stream), leaving
    every other layer untouched."""
    if not 0 <= layer_index < model.depth:
        raise IndexError(f"layer index {layer_index} out of range")
    old = model.layers[layer_index]
    if isinstance(old, ConvLayerParams):
        rng = stream(model.seed, layer_index + 1, ROLE_DAMAGE, salt)
        bound = np.sqrt(6.0 / (old.in_ch * 9))
        k = _uniform(rng, old.out_ch, old.in_ch * 9, bound, model.precision)
        new = ConvLayerParams(k, old.in_ch, old.out_ch, M=None)
        if old.M is not None:
            mb = 1.0 / np.sqrt(old.M.cols)
            new.M = _uniform(rng, old.M.rows, old.M.cols, mb, model.precision)
    else:
        rng = stream(model.seed, layer_index + 1, ROLE_DAMAGE, salt)
        W = _uniform(rng, old.fan_in, old.fan_out, np.sqrt(6.0 / old.fan_in),
                     model.precision)
        b = zeros(1, old.fan_out, model.precision) if old.b is not None else None
        M = None
        if old.M is not None:
            M = _uniform(rng, old.M.rows, old.M.cols,
                         1.0 / np.sqrt(old.fan_out), model.precision)
        new = LayerParams(W, b, M)
    model.layers[layer_index] = new


CONV_PRESET_CHANNELS = [64, 128, 256, 512]


def init_conv(chw, channels, m: int, seed: int, precision=SINGLE,
              heads: str = "all") -> Model:
    """Stack of 3x3 conv -> relu -> 2x2 avg-pool blocks with projections on
    each block's flattened pooled output; the last projection is the
    fully connected classifier stage."""
    c, h, w = chw
    layers = []
    in_ch = c
    for i, out_ch in enumerate(channels):
        if h % 2 or w % 2:
            raise ValueError(f"spatial dims {h}x{w} not divisible for block {i}")
        rng = stream(seed, i + 1, ROLE_W)
        bound = np.sqrt(6.0 / (in_ch * 9))
        K = _uniform(rng, out_ch, in_ch * 9, bound, precision)
        h, w = h // 2, w // 2
        flat = out_ch * h * w
        M = None
        if _head_wanted(heads, i, len(channels)):
            m_rng = stream(seed, i + 1, ROLE_M)
            M = _uniform(m_rng, m, flat, 1.0 / np.sqrt(flat), precision)
        layers.append(ConvLayerParams(K, in_ch, out_ch, M))
        in_ch = out_ch
    return Model(layers, c * chw[1] * chw[2], m, heads, precision, seed,
                 kind="conv", chw=chw)


class FeedbackMatrices:
    """Fixed random feedback for FA/DFA, drawn once and never updated.

    FA replaces each transposed forward matrix on the backward path:
    `head` stands in for the last projection, `hidden[i]` (same shape as
    W_i) stands in for W_i on the edge into layer i-1. DFA instead projects
    the output error straight to every layer: `direct[i]` has shape
    (classes, width_i).
    """

    def __init__(self, head=None, hidden=None, direct=None):
        self.head = head
        self.hidden = hidden or {}
        self.direct = direct or {}

    @classmethod
    def for_fa(cls, model: Model, seed: int) -> "FeedbackMatrices":
        n_last = model.layers[-1].fan_out
        rng = stream(seed, model.depth, ROLE_FEEDBACK)
        head = _uniform(rng, model.m, n_last, 1.0 / np.sqrt(n_last),
                        model.precision)
        hidden = {}
        for i in range(1, model.depth):
            l = model.layers[i]
            rng = stream(seed, i, ROLE_FEEDBACK)
            hidden[i] = _uniform(rng, l.fan_in, l.fan_out,
                                 np.sqrt(6.0 / l.fan_in), model.precision)
        return cls(head=head, hidden=hidden)

    @classmethod
    def for_dfa(cls, model: Model, seed: int) -> "FeedbackMatrices":
        direct = {}
        for i, l in enumerate(model.layers):
            rng = stream(seed, i + 1, ROLE_FEEDBACK)
            direct[i] = _uniform(rng, model.m, l.fan_out,
                                 1.0 / np.sqrt(model.m), model.precision)
        return cls(direct=direct)

    @classmethod
    def fa_snapshot(cls, model: Model) -> "FeedbackMatrices":
        """FA feedback frozen to the current forward weights; with this
        choice a single FA step coincides with a BP step."""
        head = model.layers[-1].M.copy()
        hidden = {i: model.layers[i].W.copy() for i in range(1, model.depth)}
        return cls(head=head, hidden=hidden)


# ---------------------------------------------------------------------------
# checkpointing

_PREC_NAMES = {np.dtype(np.float32): "single", np.dtype(np.float64): "double"}
_PREC_FROM = {"single": SINGLE, "double": DOUBLE}


def save_model(path, model: Model):
    tensors = {}
    for i, l in enumerate(model.layers):
        if isinstance(l, ConvLayerParams):
            tensors[f"layer{i}/K"] = l.kernels.data
        else:
            tensors[f"layer{i}/W"] = l.W.data
            if l.b is not None:
                tensors[f"layer{i}/b"] = l.b.data
        if l.M is not None:
            tensors[f"layer{i}/M"] = l.M.data
    meta = {
        "kind": model.kind,
        "input_dim": model.input_dim,
        "m": model.m,
        "heads": model.heads,
        "precision": _PREC_NAMES[model.precision],
        "seed": model.seed,
        "depth": model.depth,
        "chw": list(model.chw) if model.chw else None,
        "conv_channels": [l.out_ch for l in model.layers]
        if model.kind == "conv" else None,
    }
    write_container(path, tensors, meta)


def load_model(path) -> Model:
    tensors, meta = read_container(path)
    try:
        precision = _PREC_FROM[meta["precision"]]
        depth = meta["depth"]
        layers = []
        for i in range(depth):
            M = tensors.get(f"layer{i}/M")
            M = DenseMatrix(M, precision) if M is not None else None
            if meta["kind"] == "conv":
                K = DenseMatrix(tensors[f"layer{i}/K"], precision)
                out_ch = meta["conv_channels"][i]
                in_ch = K.cols // 9
                layers.append(ConvLayerParams(K, in_ch, out_ch, M))
            else:
                W = DenseMatrix(tensors[f"layer{i}/W"], precision)
                b = tensors.get(f"layer{i}/b")
                b = DenseMatrix(b, precision) if b is not None else None
                layers.append(LayerParams(W, b, M))
        return Model(layers, meta["input_dim"], meta["m"], meta["heads"],
                     precision, meta["seed"], kind=meta["kind"],
                     chw=tuple(meta["chw"]) if meta.get("chw") else None)
    except (KeyError, IndexError, TypeError) as e:
        raise CheckpointError(f"incomplete checkpoint {path}: {e}") from e
