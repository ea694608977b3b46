"""Dense 2-D float matrices plus a process-global allocation tracker.

Every DenseMatrix owns a fresh C-contiguous numpy buffer. Its payload size
(rows * cols * itemsize) is registered with the tracker at construction and
released when the wrapper is collected; CPython refcounting makes the release
deterministic, which the memory-profiling experiments rely on. Only matrix
payload bytes are counted, never container or interpreter overhead, so the
profiled memory slopes depend on the algorithm and not on the host.

Matrices returned by the functions here are treated as immutable. Optimizer
code mutates parameter buffers it owns (see optim.py); nothing else writes
into an existing buffer.
"""

from __future__ import annotations

import threading
import time
import weakref

import numpy as np

SINGLE = np.dtype(np.float32)
DOUBLE = np.dtype(np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class LabelError(ValueError):
    """A class label is outside the valid range."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class AllocationTracker:
    """Counts live payload bytes of every DenseMatrix in the process.

    peak_bytes is monotone nondecreasing between resets. reset_peak() sets
    the peak to the current live count, so with nothing live the peak reads
    zero. An optional event log records (seq, wall_time, live_bytes) after
    every allocate/release for memory-over-time traces.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.live_bytes = 0
        self.peak_bytes = 0
        self._events = None
        self._seq = 0

    def allocate(self, nbytes: int):
        with self._lock:
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes
            self._record()

    def release(self, nbytes: int):
        with self._lock:
            self.live_bytes -= nbytes
            self._record()

    def _record(self):
        if self._events is not None:
            self._events.append((self._seq, time.perf_counter(), self.live_bytes))
            self._seq += 1

    def reset_peak(self):
        with self._lock:
            self.peak_bytes = self.live_bytes

    def start_trace(self):
        with self._lock:
            self._events = []
            self._seq = 0

    def stop_trace(self):
        with self._lock:
            events, self._events = self._events, None
        return events or []


_TRACKER = AllocationTracker()


def tracker() -> AllocationTracker:
    return _TRACKER


def tracker_peak() -> int:
    return _TRACKER.peak_bytes


def tracker_reset():
    _TRACKER.reset_peak()


class DenseMatrix:
    """Row-major 2-D real matrix, float32 or float64."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, values, precision=None, _own: bool = False):
        arr = np.asarray(values)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"DenseMatrix must be 2-D, got shape {arr.shape}")
        if precision is not None:
            arr = arr.astype(np.dtype(precision), copy=not _own)
        elif arr.dtype not in (SINGLE, DOUBLE):
            arr = arr.astype(SINGLE)
        elif not _own:
            arr = arr.copy()
        arr = np.ascontiguousarray(arr)
        self.data = arr
        _TRACKER.allocate(arr.nbytes)
        weakref.finalize(self, _TRACKER.release, arr.nbytes)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    @property
    def precision(self):
        return self.data.dtype

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def copy(self) -> "DenseMatrix":
        return DenseMatrix(self.data.copy(), _own=True)

    def astype(self, precision) -> "DenseMatrix":
        return DenseMatrix(self.data.astype(np.dtype(precision)), _own=True)

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    def __repr__(self):
        return f"DenseMatrix({self.rows}x{self.cols}, {self.data.dtype})"


def _wrap(arr: np.ndarray) -> DenseMatrix:
    # internal: takes ownership of a freshly computed array, no copy
    return DenseMatrix(arr, _own=True)


def matrix(values, precision=SINGLE) -> DenseMatrix:
    """Build a DenseMatrix from nested lists or an array."""
    return DenseMatrix(np.asarray(values, dtype=np.dtype(precision)))


def zeros(rows: int, cols: int, precision=SINGLE) -> DenseMatrix:
    return _wrap(np.zeros((rows, cols), dtype=np.dtype(precision)))


def _check_same_precision(a: DenseMatrix, b: DenseMatrix):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"precision mismatch: {a.data.dtype} vs {b.data.dtype}"
        )


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """C = A @ B with C[r,c] = sum_k A[r,k] * B[k,c].

    Results are reproducible for a fixed BLAS thread count; runs that must
    agree bit-for-bit are executed under the same threading (see pipeline).
    """
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    _check_same_precision(a, b)
    return _wrap(a.data @ b.data)


def transpose(a: DenseMatrix) -> DenseMatrix:
    return _wrap(np.ascontiguousarray(a.data.T))


def relu(z: DenseMatrix) -> DenseMatrix:
    return _wrap(np.maximum(z.data, 0))


def relu_mask(z: DenseMatrix) -> DenseMatrix:
    """1 where z > 0 else 0; the derivative at exactly 0 is taken as 0."""
    return _wrap((z.data > 0).astype(z.data.dtype))


def softmax_rows(g: DenseMatrix) -> DenseMatrix:
    """Row-wise softmax with per-row max subtraction for stability."""
    shifted = g.data - g.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return _wrap(e / e.sum(axis=1, keepdims=True))


def cross_entropy_with_grad(g: DenseMatrix, labels) -> tuple[float, DenseMatrix]:
    """Softmax cross-entropy over rows of g.

    Returns (loss, dG) where loss is the batch mean of -log softmax(g)[label]
    and dG = (softmax(g) - onehot) / batch, the gradient of the loss w.r.t. g.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != g.rows:
        raise ShapeError(f"labels length {y.shape[0]} != batch {g.rows}")
    if y.size and (y.min() < 0 or y.max() >= g.cols):
        raise LabelError(f"label out of range [0, {g.cols})")
    x = g.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    loss = float(np.mean(lse - x[np.arange(x.shape[0]), y]))
    p = np.exp(x - m)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(x.shape[0]), y] -= 1.0
    p /= x.shape[0]
    return loss, _wrap(p.astype(x.dtype))


def add(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    _check_same_precision(a, b)
    return _wrap(a.data + b.data)


def scale(a: DenseMatrix, s: float) -> DenseMatrix:
    return _wrap(a.data * a.data.dtype.type(s))


def hadamard(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: {a.shape} vs {b.shape}")
    _check_same_precision(a, b)
    return _wrap(a.data * b.data)


def col_sums(a: DenseMatrix) -> DenseMatrix:
    """1 x cols matrix of column sums (used for bias gradients)."""
    return _wrap(a.data.sum(axis=0, keepdims=True))


def row_sumsq(a: DenseMatrix) -> np.ndarray:
    """Per-row sum of squares as a plain 1-D array."""
    return np.einsum("ij,ij->i", a.data, a.data)


def l2_normalize_rows(a: DenseMatrix, eps: float = 1e-8) -> DenseMatrix:
    norms = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))[:, None]
    return _wrap(a.data / (norms + a.data.dtype.type(eps)))


def take_rows(a: DenseMatrix, idx) -> DenseMatrix:
    """Copy the selected rows into a new matrix (batch slicing)."""
    return _wrap(np.ascontiguousarray(a.data[np.asarray(idx)]))
