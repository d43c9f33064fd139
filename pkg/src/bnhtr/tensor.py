"""Minimal dense tensor library with reverse-mode autodiff.

Arrays are plain numpy; differentiation is handled by an explicit ``Tape``
that records one backward closure per op in execution order and replays them
in reverse, accumulating gradients additively on every tensor that
``requires_grad``. There is no graph retention beyond the tape, no
higher-order gradients, and no device abstraction — just enough machinery for
a transformer trained on one CPU.

Float precision is a module-level switch (:func:`set_default_dtype`):
float32 for training throughput, float64 for gradient checking.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_TAPE_STACK: list["Tape"] = []

_GELU_C = math.sqrt(2.0 / math.pi)


def set_default_dtype(name: str) -> None:
    global _DEFAULT_DTYPE
    if name in ("float32", "f32"):
        _DEFAULT_DTYPE = np.float32
    elif name in ("float64", "f64"):
        _DEFAULT_DTYPE = np.float64
    else:
        raise ValueError(f"unsupported dtype {name!r}")


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


class Tensor:
    """A numpy array plus a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


class Tape:
    """Records ops while active (``with Tape() as t:``); replays in reverse."""

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes exited out of order"

    def record(self, output: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._entries.append((output, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Seed ``loss`` (with ones unless ``grad`` given) and back-propagate."""
        if grad is None:
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=loss.data.dtype)
        for output, backward in reversed(self._entries):
            if output.grad is not None:
                backward(output.grad)

    def __len__(self) -> int:
        return len(self._entries)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    grad = np.asarray(grad, dtype=t.data.dtype)
    t.grad = grad.copy() if t.grad is None else t.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * a.data.dtype.type(s)

    def backward(g):
        _accumulate(a, g * a.data.dtype.type(s))

    return _make(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(data, (a, b), backward)


def tsum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(data, (a,), backward)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(data, (a,), backward)


def transpose_last(a: Tensor) -> Tensor:
    data = np.swapaxes(a.data, -1, -2)

    def backward(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _make(data, (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index]

    def backward(g):
        if not a.requires_grad:
            return
        full = np.zeros(a.shape, dtype=a.data.dtype)
        full[index] = g
        _accumulate(a, full)

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            _accumulate(t, g[tuple(index)])
            offset += size

    return _make(data, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    data = exp / exp.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(a, data * (g - dot))

    return _make(data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner))

    return _make(data, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def backward(g):
        _accumulate(beta, g.reshape(-1, g.shape[-1]).sum(axis=0))
        _accumulate(gamma, (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, inv_std * (gx - m1 - xhat * m2))

    return _make(data, (a, gamma, beta), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0. ``rng`` makes it reproducible."""
    if p < 0.0 or p >= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p).astype(a.data.dtype) / a.data.dtype.type(1.0 - p)
    data = a.data * mask

    def backward(g):
        _accumulate(a, g * mask)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# embedding and loss


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range for table of {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return
        full = np.zeros(table.shape, dtype=table.data.dtype)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _make(data, (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions where target != ignore_index.

    ``logits`` has shape (..., V); ``targets`` matches the leading shape.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(
            f"targets shape {targets.shape} does not match logits {logits.shape[:-1]}"
        )
    flat_logits = logits.data.reshape(-1, logits.shape[-1])
    flat_targets = targets.reshape(-1)
    valid = flat_targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: every target position is ignored")

    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    picked = log_probs[np.arange(len(flat_targets)), np.where(valid, flat_targets, 0)]
    data = np.asarray(-(picked * valid).sum() / n_valid, dtype=logits.data.dtype)

    def backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(len(flat_targets)), np.where(valid, flat_targets, 0)] -= 1.0
        probs *= (valid / n_valid)[:, None]
        _accumulate(logits, (g * probs).reshape(logits.shape))

    return _make(data, (logits,), backward)
