"""Dense f32 tensors with tape-recorded reverse-mode differentiation.

The engine is deliberately small: numpy holds the data, a Tape records
primitive operations in execution order (which is a topological order by
construction), and backward() replays the tape once in reverse, pushing
vector-Jacobian products from each output to its inputs. Tensors are
written once; adjoints are accumulated in a scratch map and only added
into .grad at the end, so calling backward twice without zeroing exactly
doubles every gradient.

Recording only happens inside a `recording(tape)` block and only for
operations whose inputs require gradients; evaluation outside a block is
plain numpy.
"""

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, DomainError, IndexRangeError, ConfigError
from .rng import stream_rng

F32 = np.float32


class Tensor:
    """A dense float32 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=F32)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # np.ndarray with the same shape, once backward ran
        self.tape = None  # Tape that produced this tensor, if any

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self._entries = []  # (output, inputs, vjp)

    def __len__(self):
        return len(self._entries)

    def record(self, output: Tensor, inputs, vjp):
        """vjp(out_adjoint) -> tuple of input adjoints (arrays or None)."""
        self._entries.append((output, tuple(inputs), vjp))

    def backward(self, loss: Tensor, params=None):
        """Accumulate d(loss)/dx into x.grad for every requires_grad tensor.

        `params`, when given, is an iterable of tensors whose .grad is
        zero-filled if the loss does not reach them.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not self._entries:
            raise ContractError("backward on an empty tape")

        adjoint = {id(loss): np.ones_like(loss.data)}
        holder = {id(loss): loss}
        for output, inputs, vjp in reversed(self._entries):
            out_adj = adjoint.get(id(output))
            if out_adj is None:
                continue
            for inp, g in zip(inputs, vjp(out_adj)):
                if g is None:
                    continue
                key = id(inp)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + g
                else:
                    adjoint[key] = g
                    holder[key] = inp

        for key, t in holder.items():
            if t.requires_grad:
                g = adjoint[key].astype(F32, copy=False).reshape(t.data.shape)
                t.grad = g.copy() if t.grad is None else t.grad + g

        if params is not None:
            for p in params:
                if p.requires_grad and p.grad is None:
                    p.zero_grad()


_ACTIVE_TAPE = None


@contextmanager
def recording(tape: Tape):
    """Route primitive recording to `tape` inside the block."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = prev


def backward(loss: Tensor, params=None):
    """Reverse pass over the tape that produced `loss`."""
    if loss.tape is None:
        raise ContractError("backward on a tensor with no recorded tape")
    loss.tape.backward(loss, params=params)


def _emit(data, inputs, vjp) -> Tensor:
    """Wrap a result array; record on the active tape if gradients flow."""
    out = Tensor(data)
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = _ACTIVE_TAPE
        _ACTIVE_TAPE.record(out, inputs, vjp)
    return out


def _as_2d(t: Tensor, op: str) -> np.ndarray:
    if t.data.ndim != 2:
        raise DimensionError(f"{op} expects a 2-D tensor, got shape {t.data.shape}")
    return t.data


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = _as_2d(a, "matmul"), _as_2d(b, "matmul")
    if ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {ad.shape} x {bd.shape}")

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op} operand shapes differ: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(x: Tensor) -> Tensor:
    return _emit(-x.data, (x,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # gradient at exactly 0 is defined as 0
    return _emit(np.where(mask, x.data, F32(0)), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = F32(1) / (F32(1) + np.exp(-x.data))
    return _emit(s, (x,), lambda g: (g * s * (F32(1) - s),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive input; clamp before calling")
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _emit(e, (x,), lambda g: (g * e,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is passed through inside, zero outside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = F32(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def mul_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element by a learnable 1-element tensor."""
    if s.data.size != 1:
        raise DimensionError(f"mul_scalar needs a 1-element scalar, got shape {s.data.shape}")
    xd, sv = x.data, s.data.reshape(())

    def vjp(g):
        return g * sv, np.sum(g * xd).reshape(s.data.shape)

    return _emit(xd * sv, (x, s), vjp)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: [n, d] + [d]."""
    xd = _as_2d(x, "add_bias")
    if b.data.shape != (xd.shape[1],):
        raise DimensionError(f"add_bias bias shape {b.data.shape} does not match columns of {xd.shape}")
    return _emit(xd + b.data[None, :], (x, b), lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# normalization, dropout
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with biased variance (denominator d)."""
    xd = _as_2d(x, "layer_norm")
    d = xd.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias shapes {gain.data.shape}/{bias.data.shape} do not match d={d}"
        )
    mean = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = F32(1) / np.sqrt(var + F32(eps))
    xhat = (xd - mean) * inv
    out = xhat * gain.data[None, :] + bias.data[None, :]

    def vjp(g):
        gh = g * gain.data[None, :]  # dL/dxhat
        m1 = gh.mean(axis=1, keepdims=True)
        m2 = (gh * xhat).mean(axis=1, keepdims=True)
        dx = inv * (gh - m1 - xhat * m2)
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit(out, (x, gain, bias), vjp)


def dropout(x: Tensor, rate: float, training: bool, seed, *labels) -> Tensor:
    """Inverted dropout: scale survivors by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return _emit(x.data, (x,), lambda g: (g,))
    keep = stream_rng(seed, "dropout", *labels).random(x.data.shape) >= rate
    factor = F32(1.0 / (1.0 - rate))
    mask = keep.astype(F32) * factor
    return _emit(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# segment / pooling / shape ops
# ---------------------------------------------------------------------------


def _check_index(index: np.ndarray, limit: int, op: str):
    if index.size and (index.min() < 0 or index.max() >= limit):
        raise IndexRangeError(f"{op} index out of range [0, {limit})")


def segment_aggregate(values: Tensor, target_index, num_targets: int, mode: str = "mean") -> Tensor:
    """Scatter rows of values into num_targets buckets by sum or mean.

    Targets with no incoming rows are zero vectors.
    """
    if mode not in ("mean", "sum"):
        raise ConfigError(f"segment_aggregate mode must be 'mean' or 'sum', got {mode!r}")
    vd = _as_2d(values, "segment_aggregate")
    idx = np.asarray(target_index, dtype=np.int64).reshape(-1)
    if idx.shape[0] != vd.shape[0]:
        raise DimensionError(f"segment_aggregate got {vd.shape[0]} rows but {idx.shape[0]} indices")
    _check_index(idx, num_targets, "segment_aggregate")

    out = np.zeros((num_targets, vd.shape[1]), dtype=F32)
    np.add.at(out, idx, vd)
    if mode == "mean":
        counts = np.bincount(idx, minlength=num_targets).astype(F32)
        denom = np.maximum(counts, F32(1))[:, None]
        out = out / denom

        def vjp(g):
            return ((g / denom)[idx],)

    else:

        def vjp(g):
            return (g[idx],)

    return _emit(out, (values,), vjp)


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows by index; the gradient scatter-adds back."""
    xd = _as_2d(x, "gather_rows")
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    _check_index(idx, xd.shape[0], "gather_rows")

    def vjp(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(xd[idx], (x,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    xd = _as_2d(x, "softmax_rows")
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (x,), vjp)


def segment_softmax(scores: Tensor, target_index, num_targets: int) -> Tensor:
    """Column-wise softmax within each target's group of rows."""
    sd = _as_2d(scores, "segment_softmax")
    idx = np.asarray(target_index, dtype=np.int64).reshape(-1)
    if idx.shape[0] != sd.shape[0]:
        raise DimensionError(f"segment_softmax got {sd.shape[0]} rows but {idx.shape[0]} indices")
    _check_index(idx, num_targets, "segment_softmax")

    seg_max = np.full((num_targets, sd.shape[1]), -np.inf, dtype=F32)
    np.maximum.at(seg_max, idx, sd)
    e = np.exp(sd - seg_max[idx])
    denom = np.zeros((num_targets, sd.shape[1]), dtype=F32)
    np.add.at(denom, idx, e)
    p = e / denom[idx]

    def vjp(g):
        dot = np.zeros((num_targets, sd.shape[1]), dtype=F32)
        np.add.at(dot, idx, g * p)
        return (p * (g - dot[idx]),)

    return _emit(p, (scores,), vjp)


def max_pool_rows(x: Tensor) -> Tensor:
    """Column-wise maxima of a [n, d] tensor; gradient goes to the first argmax."""
    xd = _as_2d(x, "max_pool_rows")
    if xd.shape[0] == 0:
        raise DomainError("max_pool_rows on an empty tensor")
    arg = xd.argmax(axis=0)  # first index on ties
    cols = np.arange(xd.shape[1])

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[arg, cols] = g
        return (gx,)

    return _emit(xd[arg, cols], (x,), vjp)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DomainError("concat of zero tensors")
    if axis not in (0, 1):
        raise ConfigError(f"concat axis must be 0 or 1, got {axis}")
    datas = [_as_2d(t, "concat") for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(datas)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(datas)))

    return _emit(np.concatenate(datas, axis=axis), tuple(tensors), vjp)


def stack_rows(vectors) -> Tensor:
    """Stack 1-D tensors of equal length into a [n, d] tensor."""
    vectors = list(vectors)
    if not vectors:
        raise DomainError("stack_rows of zero tensors")
    for v in vectors:
        if v.data.ndim != 1:
            raise DimensionError(f"stack_rows expects 1-D tensors, got shape {v.data.shape}")

    def vjp(g):
        return tuple(g[i] for i in range(len(vectors)))

    return _emit(np.stack([v.data for v in vectors], axis=0), tuple(vectors), vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    xd = _as_2d(x, "slice_rows")
    if not 0 <= start <= stop <= xd.shape[0]:
        raise IndexRangeError(f"slice_rows [{start}:{stop}] out of range for {xd.shape[0]} rows")

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[start:stop] = g
        return (gx,)

    return _emit(xd[start:stop].copy(), (x,), vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    xd = _as_2d(x, "slice_cols")
    if not 0 <= start <= stop <= xd.shape[1]:
        raise IndexRangeError(f"slice_cols [{start}:{stop}] out of range for {xd.shape[1]} columns")

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[:, start:stop] = g
        return (gx,)

    return _emit(xd[:, start:stop].copy(), (x,), vjp)


def repeat_cols(x: Tensor, times: int) -> Tensor:
    """Repeat each column `times` times: [n, h] -> [n, h*times]."""
    xd = _as_2d(x, "repeat_cols")
    n, h = xd.shape

    def vjp(g):
        return (g.reshape(n, h, times).sum(axis=2),)

    return _emit(np.repeat(xd, times, axis=1), (x,), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(xd.sum(dtype=F32).reshape(()), (x,), lambda g: (np.broadcast_to(g, xd.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    xd = x.data
    if xd.size == 0:
        raise DomainError("mean_all on an empty tensor")
    inv = F32(1.0 / xd.size)
    return _emit(xd.mean(dtype=F32).reshape(()), (x,), lambda g: (np.broadcast_to(g * inv, xd.shape).copy(),))
