"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = cross_entropy(model_logits, targets)
        backward(loss, tape)

Outside a tape every op is a plain numpy computation and its result carries
no gradient bookkeeping, which is what inference and benchmarking use.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, LabelError, VocabularyError

RMSNORM_EPS = 1e-6

_active_tapes: list["Tape"] = []


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of the ops executed while the tape is active."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.visits = 0

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Optional[Tape]:
    return _active_tapes[-1] if _active_tapes else None


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _not_scalar(t):
    raise ContractError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and put it on the active tape.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` of every grad-requiring tensor that ``loss`` depends on.

    Nodes are replayed once each, newest first. Leaf gradients accumulate
    across calls until cleared with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None or loss._tape is not tape:
        raise ContractError("loss was not recorded on the given tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        tape.visits += 1
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi, dtype=np.float64), inp.shape)
            inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("silu", x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "silu":
        return silu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    return record("softplus", out, (x,), lambda g: (g * _sigmoid(x.data),))


# ---------------------------------------------------------------- shape ops

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes, when present, are batch axes of equal size."""
    a, b = as_tensor(a), as_tensor(b)
    if (a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]
            or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2])):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return record("matmul", a.data @ b.data, (a, b), bw)


def tsum(x: Tensor, axis=None) -> Tensor:
    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return record("sum", np.sum(x.data, axis=axis), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return record("getitem", x.data[idx], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


# ---------------------------------------------------------------- nn kernels

def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - np.sum(g * p, axis=-1, keepdims=True))


def softmax_lastaxis(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    p = _softmax(x.data)
    return record("softmax", p, (x,), lambda g: (_softmax_backward(p, g),))


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis where ``mask`` is False entries get zero weight."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        rows = np.nonzero(~mask.any(axis=-1))[0].tolist()
        raise ContractError(f"query rows {rows} have no attendable key")
    p = _softmax(np.where(mask, x.data, -np.inf))
    return record("masked_softmax", p, (x,), lambda g: (_softmax_backward(p, g),))


def rmsnorm(x: Tensor, weight: Tensor, eps: float = RMSNORM_EPS) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.shape != x.shape[-1:]:
        raise DimensionError(f"rmsnorm weight {weight.shape} does not match input {x.shape}")
    r = np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xh = x.data / r

    def bw(g):
        gxh = g * weight.data
        gx = (gxh - xh * np.mean(gxh * xh, axis=-1, keepdims=True)) / r
        gw = (g * xh).reshape(-1, xh.shape[-1]).sum(axis=0)
        return gx, gw

    return record("rmsnorm", xh * weight.data, (x, weight), bw)


def causal_depthwise_conv1d(x: Tensor, kernels: Tensor, max_width: Optional[int] = None) -> Tensor:
    """out[t, c] = sum_j kernels[j, c] * x[t - k + 1 + j, c] with zero left padding."""
    k = kernels.shape[0]
    if k < 1 or (max_width is not None and k > max_width):
        raise ConfigurationError(f"conv kernel width {k} outside [1, {max_width}]")
    if x.ndim != 2 or kernels.ndim != 2 or kernels.shape[1] != x.shape[1]:
        raise DimensionError(f"conv shape mismatch: x {x.shape}, kernels {kernels.shape}")
    T = x.shape[0]
    xp = np.concatenate([np.zeros((k - 1, x.shape[1])), x.data], axis=0)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += kernels.data[j] * xp[j:j + T]

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernels.data)
        for j in range(k):
            gxp[j:j + T] += kernels.data[j] * g
            gk[j] = np.sum(g * xp[j:j + T], axis=0)
        return gxp[k - 1:], gk

    return record("conv1d", out, (x, kernels), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    bad = ids[(ids < 0) | (ids >= V)]
    if bad.size:
        raise VocabularyError(int(bad[0]), V)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return record("embedding", table.data[ids], (table,), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    B, K = logits.shape
    if targets.shape != (B,):
        raise DimensionError(f"{targets.shape[0]} targets for {B} logit rows")
    if ((targets < 0) | (targets >= K)).any():
        raise LabelError(f"target outside [0, {K}): {targets.tolist()}")
    z = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    rows = np.arange(B)
    loss = -np.mean(logp[rows, targets])

    def bw(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g / B),)

    return record("cross_entropy", np.asarray(loss), (logits,), bw)


def rope_angles(positions, d_head: int, base: float) -> np.ndarray:
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    return np.outer(np.asarray(positions, dtype=np.float64), inv_freq)


def rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate interleaved pairs (x[2i], x[2i+1]) of the last axis by pos * base^(-2i/d)."""
    d = x.shape[-1]
    if d % 2:
        raise ConfigurationError(f"rotary embedding needs an even head size, got {d}")
    if x.shape[-2] != len(positions):
        raise DimensionError(f"{len(positions)} positions for sequence of {x.shape[-2]}")
    ang = rope_angles(positions, d, base)
    cos, sin = np.cos(ang), np.sin(ang)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bw(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        return (gx,)

    return record("rope", out, (x,), bw)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


__all__ = [
    "RMSNORM_EPS", "Tape", "Tensor", "activation", "add", "as_tensor", "backward",
    "causal_depthwise_conv1d", "concat", "cross_entropy", "current_tape",
    "embedding_lookup", "exp", "getitem", "masked_softmax", "matmul", "mean", "mul",
    "parameter", "record", "reshape", "rmsnorm", "rope", "rope_angles", "sigmoid",
    "silu", "softmax_lastaxis", "softplus", "stack", "sub", "tsum", "transpose",
]
