"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation takes and returns `Tensor` values.  When a `Tape` is active
and an input requires gradients, the op records a backward closure; closures
run in exact reverse order on `backward(loss)`.  Tensors are immutable once
created and the tape is single-writer, so independent tapes may run on
separate threads.

Broadcasting is deliberately restricted: same-shape elementwise ops, a
trailing-vector `bias_add`, and scalar multiples.  Everything the point
networks need is expressible with these plus the gather/group primitives.
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import DimensionError, TapeError

_local = threading.local()


def _current_tape():
    return getattr(_local, "tape", None)


class Tape:
    """Append-only record of backward closures for one forward pass."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        if _current_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tape = None
        return False

    def record(self, backward_fn):
        self._nodes.append(backward_fn)

    def run_backward(self, loss: "Tensor"):
        if self._consumed:
            raise TapeError("backward already ran on this tape; build a new graph")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._nodes):
            fn()
        self._nodes = []


class Tensor:
    """Row-major float64 value with an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic; y may be a Tensor, ndarray constant, or scalar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_const(value) -> Tensor:
    """Wrap an array as a non-differentiable Tensor."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _make_output(data, *inputs):
    """Create the op output; returns (out, tape) with tape None if not recording.

    Op outputs allocate their gradient buffer lazily on first accumulation,
    so branches that never receive a gradient cost nothing in backward.
    """
    tape = _current_tape()
    needs = tape is not None and any(
        isinstance(x, Tensor) and (x.requires_grad or x._tape is not None) for x in inputs
    )
    out = Tensor(data, requires_grad=False)
    if needs:
        out.requires_grad = True
        out._tape = tape
        return out, tape
    return out, None


def _acc(x, delta):
    """Accumulate into x.grad when x participates in the graph."""
    if delta is None or not (isinstance(x, Tensor) and x.requires_grad):
        return
    if x.grad is None:
        x.grad = np.array(delta, dtype=np.float64)
    else:
        x.grad += delta


def _acc_own(x, delta):
    """Like _acc for a delta the closure owns: the first accumulation may
    adopt the buffer instead of copying.  Safe because an op output's grad is
    never read again after its own backward node ran."""
    if delta is None or not (isinstance(x, Tensor) and x.requires_grad):
        return
    if x.grad is None:
        x.grad = delta
    else:
        x.grad += delta


def _ensure_grad(x) -> np.ndarray:
    if x.grad is None:
        x.grad = np.zeros_like(x.data)
    return x.grad


def backward(loss: Tensor):
    """Populate gradients of every tensor reachable from a scalar loss."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss is not attached to a live tape")
    loss._tape.run_backward(loss)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a = as_const(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"add: shape {a.shape} vs {b.shape}")
        out, tape = _make_output(a.data + b.data, a, b)
        if tape:
            def bwd():
                _acc(a, out.grad)
                _acc(b, out.grad)
            tape.record(bwd)
        return out
    const = np.asarray(b, dtype=np.float64)
    if const.ndim != 0 and const.shape != a.shape:
        raise DimensionError(f"add: shape {a.shape} vs constant {const.shape}")
    out, tape = _make_output(a.data + const, a)
    if tape:
        tape.record(lambda: _acc(a, out.grad))
    return out


def sub(a, b):
    a = as_const(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"sub: shape {a.shape} vs {b.shape}")
        out, tape = _make_output(a.data - b.data, a, b)
        if tape:
            def bwd():
                g = out.grad
                if g is None:
                    return
                _acc_own(a, g)
                _acc_own(b, -g)
            tape.record(bwd)
        return out
    return add(a, -np.asarray(b, dtype=np.float64))


def mul(a, b):
    a = as_const(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"mul: shape {a.shape} vs {b.shape}")
        out, tape = _make_output(a.data * b.data, a, b)
        if tape:
            def bwd():
                g = out.grad
                if g is None:
                    return
                _acc_own(a, g * b.data)
                _acc_own(b, g * a.data)
            tape.record(bwd)
        return out
    const = np.asarray(b, dtype=np.float64)
    if const.ndim != 0 and const.shape != a.shape:
        raise DimensionError(f"mul: shape {a.shape} vs constant {const.shape}")
    out, tape = _make_output(a.data * const, a)
    if tape:
        def bwd():
            g = out.grad
            if g is None:
                return
            _acc_own(a, g * const)
        tape.record(bwd)
    return out


def matmul(a, b):
    """Matrix product a[..., m, k] @ b[k, n]; batch dims on the left only.

    Gradients: dA = dC @ B^T, dB = A^T dC summed over batch dims.
    """
    a, b = as_const(a), as_const(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shape {a.shape} vs {b.shape}")
    out, tape = _make_output(a.data @ b.data, a, b)
    if tape:
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _acc_own(a, g @ b.data.T)
            if b.requires_grad:
                k = a.shape[-1]
                n = b.shape[1]
                _acc_own(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
        tape.record(bwd)
    return out


def bias_add(x, b):
    """x[..., n] + b[n]; gradient of b sums over the leading dims."""
    x, b = as_const(x), as_const(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add: shape {x.shape} vs {b.shape}")
    out, tape = _make_output(x.data + b.data, x, b)
    if tape:
        def bwd():
            g = out.grad
            if g is None:
                return
            _acc_own(x, g)
            if b.requires_grad:
                _acc_own(b, g.reshape(-1, b.shape[0]).sum(axis=0))
        tape.record(bwd)
    return out


def relu(x):
    x = as_const(x)
    out, tape = _make_output(np.maximum(x.data, 0.0), x)
    if tape:
        mask = x.data > 0.0
        def bwd():
            g = out.grad
            if g is None:
                return
            _acc_own(x, g * mask)
        tape.record(bwd)
    return out


def _sigmoid_raw(v):
    # clipping at 709 keeps exp() inside float64 range for any finite input;
    # array/array divide (the scalar-broadcast path is far slower here)
    e = np.exp(np.minimum(-v, 709.0))
    return 1.0 - np.divide(e, 1.0 + e)


def sigmoid(x):
    x = as_const(x)
    sig = _sigmoid_raw(x.data)
    out, tape = _make_output(sig, x)
    if tape:
        def bwd():
            g = out.grad
            if g is None:
                return
            _acc_own(x, g * (sig * (1.0 - sig)))
        tape.record(bwd)
    return out


def swish(x):
    """x * sigmoid(x)."""
    x = as_const(x)
    sig = _sigmoid_raw(x.data)
    out, tape = _make_output(x.data * sig, x)
    if tape:
        def bwd():
            g = out.grad
            if g is None:
                return
            # d/dx = sig + x sig (1 - sig) = sig (1 + x (1 - sig))
            _acc_own(x, g * (sig * (1.0 + x.data * (1.0 - sig))))
        tape.record(bwd)
    return out


def softmax_lastdim(x):
    """Softmax along the last axis; rows sum to 1."""
    x = as_const(x)
    if x.shape[-1] == 0:
        raise DimensionError("softmax_lastdim: empty reduction axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e.sum(axis=-1, keepdims=True)
    w = e * np.divide(1.0, s)
    out, tape = _make_output(w, x)
    if tape:
        def bwd():
            g = out.grad
            if g is None:
                return
            inner = (g * w).sum(axis=-1, keepdims=True)
            _acc_own(x, w * (g - inner))
        tape.record(bwd)
    return out


def masked_softmax_neighbors(scores, real_mask):
    """Per-channel softmax over the neighbor axis with dummy slots forced to 0.

    Input:
        scores: (M, K, d) attention logits
        real_mask: (M, K) bool, False marks a dummy slot
    Return:
        (M, K, d) weights; real slots of each (center, channel) row sum to 1,
        dummy slots are exactly 0, all-dummy centers yield all-zero rows.
    """
    scores = as_const(scores)
    if scores.ndim != 3 or real_mask.shape != scores.shape[:2]:
        raise DimensionError(
            f"masked_softmax_neighbors: scores {scores.shape} vs mask {real_mask.shape}"
        )
    # maxing over all slots (dummies included) only shrinks the exponents;
    # the mask multiply afterwards zeroes the dummy slots exactly
    mask3 = real_mask[:, :, None]
    e = scores.data - scores.data.max(axis=1, keepdims=True)
    np.exp(e, out=e)
    e *= mask3
    ssum = e.sum(axis=1, keepdims=True)
    inv = np.zeros_like(ssum)
    np.divide(1.0, ssum, out=inv, where=ssum > 0.0)
    e *= inv
    out, tape = _make_output(e, scores)
    if tape:
        w = e
        def bwd():
            g = out.grad
            if g is None:
                return
            inner = (g * w).sum(axis=1, keepdims=True)
            _acc_own(scores, w * (g - inner))
        tape.record(bwd)
    return out


def concat_lastdim(parts):
    """Concatenate tensors along the last axis."""
    parts = [as_const(p) for p in parts]
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead for p in parts):
        raise DimensionError(
            "concat_lastdim: leading dims differ: " + ", ".join(str(p.shape) for p in parts)
        )
    out, tape = _make_output(np.concatenate([p.data for p in parts], axis=-1), *parts)
    if tape:
        widths = [p.shape[-1] for p in parts]
        def bwd():
            g = out.grad
            if g is None:
                return
            off = 0
            for p, w in zip(parts, widths):
                _acc_own(p, g[..., off:off + w])
                off += w
        tape.record(bwd)
    return out


def slice_lastdim(x, start, stop):
    x = as_const(x)
    if not (0 <= start < stop <= x.shape[-1]):
        raise DimensionError(f"slice_lastdim: [{start}:{stop}] outside width {x.shape[-1]}")
    out, tape = _make_output(np.ascontiguousarray(x.data[..., start:stop]), x)
    if tape:
        def bwd():
            g = out.grad
            if g is None or not x.requires_grad:
                return
            _ensure_grad(x)[..., start:stop] += g
        tape.record(bwd)
    return out


def max_lastdim(x):
    """Max over the last axis; gradient flows only to the first argmax slot."""
    x = as_const(x)
    if x.shape[-1] == 0:
        raise DimensionError("max_lastdim: empty reduction axis")
    arg = x.data.argmax(axis=-1)
    out, tape = _make_output(np.take_along_axis(x.data, arg[..., None], axis=-1)[..., 0], x)
    if tape:
        def bwd():
            g = out.grad
            if g is None or not x.requires_grad:
                return
            np.add.at(
                _ensure_grad(x).reshape(-1, x.shape[-1]),
                (np.arange(arg.size), arg.reshape(-1)),
                g.reshape(-1),
            )
        tape.record(bwd)
    return out


def weighted_sum(values, weights, axis: int = 1):
    """Sum of values * weights over one axis (default: the neighbor axis)."""
    values, weights = as_const(values), as_const(weights)
    if values.shape != weights.shape:
        raise DimensionError(f"weighted_sum: shape {values.shape} vs {weights.shape}")
    out, tape = _make_output((values.data * weights.data).sum(axis=axis), values, weights)
    if tape:
        def bwd():
            g = out.grad
            if g is None:
                return
            g = np.expand_dims(g, axis)
            _acc_own(values, g * weights.data)
            _acc_own(weights, g * values.data)
        tape.record(bwd)
    return out


def add_rows(x, v):
    """x[r, k, w] + v[r, w] broadcast over the middle axis."""
    x, v = as_const(x), as_const(v)
    if x.ndim != 3 or v.shape != (x.shape[0], x.shape[2]):
        raise DimensionError(f"add_rows: shape {x.shape} vs {v.shape}")
    out, tape = _make_output(x.data + v.data[:, None, :], x, v)
    if tape:
        def bwd():
            g = out.grad
            if g is None:
                return
            _acc_own(x, g)
            _acc_own(v, g.sum(axis=1))
        tape.record(bwd)
    return out


def reshape(x, shape):
    x = as_const(x)
    out, tape = _make_output(x.data.reshape(shape), x)
    if tape:
        orig = x.shape
        def bwd():
            g = out.grad
            if g is None:
                return
            _acc_own(x, g.reshape(orig))
        tape.record(bwd)
    return out


def transpose_last2(x):
    x = as_const(x)
    out, tape = _make_output(np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), x)
    if tape:
        def bwd():
            g = out.grad
            if g is None:
                return
            _acc_own(x, np.swapaxes(g, -1, -2))
        tape.record(bwd)
    return out


def tile_axis1(x, k: int):
    """Repeat rows: (M, d) -> (M, k, d); gradient sums over the new axis."""
    x = as_const(x)
    if x.ndim != 2:
        raise DimensionError(f"tile_axis1 expects 2-d input, got {x.shape}")
    data = np.ascontiguousarray(np.broadcast_to(x.data[:, None, :], (x.shape[0], k, x.shape[1])))
    out, tape = _make_output(data, x)
    if tape:
        def bwd():
            g = out.grad
            if g is None:
                return
            _acc_own(x, g.sum(axis=1))
        tape.record(bwd)
    return out


def take_rows(x, idx):
    """Gather rows: (N, d) indexed by idx (M,) -> (M, d)."""
    x = as_const(x)
    idx = np.asarray(idx, dtype=np.int64)
    out, tape = _make_output(x.data[idx], x)
    if tape:
        def bwd():
            g = out.grad
            if g is None or not x.requires_grad:
                return
            _acc_own(x, _scatter_rows(g, idx, x.shape[0]))
        tape.record(bwd)
    return out


def group_slots(x, idx, real_mask):
    """Gather neighbor slots with dummy masking: (N, d), (M, K) -> (M, K, d).

    Dummy slots (real_mask False; index value ignored) come out exactly zero
    and receive no gradient.
    """
    x = as_const(x)
    idx = np.asarray(idx, dtype=np.int64)
    safe = np.where(real_mask, idx, 0)
    mask3 = real_mask[:, :, None]
    out, tape = _make_output(x.data[safe] * mask3, x)
    if tape:
        def bwd():
            g = out.grad
            if g is None or not x.requires_grad:
                return
            g = g * mask3
            _acc_own(x, _scatter_rows(g.reshape(-1, x.shape[-1]), safe.reshape(-1), x.shape[0]))
        tape.record(bwd)
    return out


def _scatter_rows(grads2d, idx, n_rows):
    """Row scatter-add via bincount (much faster than np.add.at here)."""
    d = grads2d.shape[-1]
    flat = (idx[:, None] * d + np.arange(d)[None, :]).ravel()
    return np.bincount(flat, weights=grads2d.ravel(), minlength=n_rows * d).reshape(n_rows, d)


def sum_all(x):
    x = as_const(x)
    out, tape = _make_output(np.float64(x.data.sum()), x)
    if tape:
        def bwd():
            g = out.grad
            if g is None:
                return
            _acc(x, np.broadcast_to(g, x.shape))
        tape.record(bwd)
    return out


def mean_all(x):
    x = as_const(x)
    n = x.data.size
    out, tape = _make_output(np.float64(x.data.mean()), x)
    if tape:
        def bwd():
            g = out.grad
            if g is None:
                return
            _acc(x, np.broadcast_to(g / n, x.shape))
        tape.record(bwd)
    return out


def mse_loss(pred, target):
    """Mean squared error over all entries; gradient 2 (pred - target) / n."""
    pred = as_const(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise DimensionError(f"mse_loss: shape {pred.shape} vs {tgt.shape}")
    diff = pred.data - tgt
    out, tape = _make_output(np.float64((diff * diff).mean()), pred)
    if tape:
        n = diff.size
        def bwd():
            g = out.grad
            if g is None:
                return
            _acc_own(pred, (2.0 / n) * g * diff)
        tape.record(bwd)
    return out


def linear(x, w, b):
    """bias_add(matmul(x, w), b) convenience."""
    return bias_add(matmul(x, w), b)
