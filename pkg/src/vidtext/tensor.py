"""Dense tensors with a reverse-mode tape.

Every differentiable computation goes through :func:`apply_primitive`, which
runs a registered primitive's forward rule and, when a :class:`Tape` is active
and some input requires gradients, appends a node holding the primitive kind,
the input node ids and whatever activations the backward rule needs. Node ids
are handed out in creation order, so the tape is topologically sorted by
construction and :func:`backpropagate` simply walks it in reverse.

Shape rules (no general broadcasting):

==========================  ==================================================
kind                        rule
==========================  ==================================================
matmul                      ``(..., m, k) @ (..., k, n)`` with equal leading
                            dims, or ``(..., m, k) @ (k, n)`` (shared weight)
add                         equal shapes, or ``(..., n) + (n,)`` (bias-add)
mul                         equal shapes, or ``(..., n) * (n,)``
concat(axis)                equal shapes except along ``axis``
slice(axis, start, stop)    ``0 <= start <= stop <= shape[axis]``
transpose(perm)             ``perm`` is a permutation of the axes
reshape(shape)              same number of elements
embedding_gather(ids)       table ``(V, D)``, integer ids in ``[0, V)``
softmax(axis)               any shape
layer_norm(eps)             ``x (..., n)``, gain ``(n,)``, bias ``(n,)``
gelu, scale(factor), sum    any shape
masked_fill(mask, value)    mask broadcastable to the input shape
cross_entropy_from_logits   logits ``(..., V)``, targets ``(...)``
==========================  ==================================================
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "apply_primitive",
    "backpropagate",
    "get_dtype",
    "set_precision",
    "precision",
    "PRIMITIVES",
]

_DTYPE = np.float32
_ids = itertools.count(1)
_active: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when a primitive receives inputs that violate its shape rule."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


def get_dtype():
    return _DTYPE


def set_precision(name: str) -> None:
    """Select the global float type: ``"float32"`` (training) or ``"float64"``."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unsupported precision {name!r}")
    _DTYPE = np.dtype(name).type


@contextlib.contextmanager
def precision(name: str):
    previous = np.dtype(_DTYPE).name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """An n-dimensional float array that may take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, *, _copy: bool = True):
        arr = np.array(data, dtype=_DTYPE) if _copy else data
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = next(_ids) if requires_grad else None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; everything routes through apply_primitive
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return apply_primitive("matmul", [self, other])

    def __add__(self, other: "Tensor") -> "Tensor":
        return apply_primitive("add", [self, other])

    def __mul__(self, other: "Tensor") -> "Tensor":
        return apply_primitive("mul", [self, other])

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], {"shape": tuple(shape)})

    def transpose(self, *perm: int) -> "Tensor":
        return apply_primitive("transpose", [self], {"perm": tuple(perm)})


@dataclass
class TapeNode:
    kind: str
    input_ids: tuple[int | None, ...]
    output_id: int
    saved: Any
    backward: Callable[[np.ndarray, Any], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications; use as a context manager."""

    nodes: list[TapeNode] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def clear(self) -> None:
        self.nodes.clear()


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[[np.ndarray, Any], Sequence[np.ndarray | None]]
    arity: int | None  # None = variadic


PRIMITIVES: dict[str, Primitive] = {}


def _register(kind: str, arity: int | None):
    def wrap(cls):
        PRIMITIVES[kind] = Primitive(cls.forward, cls.backward, arity)
        return cls

    return wrap


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Run primitive ``kind`` on ``inputs`` and record it on the active tape."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    if prim.arity is not None and len(inputs) != prim.arity:
        raise ShapeError(kind, f"expected {prim.arity} inputs, got {len(inputs)}")
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{kind}: inputs must be Tensor, got {type(t).__name__}")
    attrs = attrs or {}
    out_data, saved = prim.forward(*(t.data for t in inputs), **attrs)
    out = Tensor(out_data, _copy=False)
    tape = _active[-1] if _active else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = next(_ids)
        out._tape = tape
        tape.nodes.append(
            TapeNode(
                kind,
                tuple(t.node_id if t.requires_grad else None for t in inputs),
                out.node_id,
                saved,
                prim.backward,
            )
        )
    return out


def backpropagate(loss: Tensor, leaves: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
    """Return gradients of the scalar ``loss`` keyed by node id.

    Every tensor in ``leaves`` gets an entry; leaves the loss does not reach
    receive zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad and loss._tape is not None:
        grads[loss.node_id] = np.ones_like(loss.data)
        for node in reversed(loss._tape.nodes):
            if node.output_id > loss.node_id:
                continue
            g = grads.pop(node.output_id, None)
            if g is None:
                continue
            in_grads = node.backward(g, node.saved)
            for nid, ig in zip(node.input_ids, in_grads):
                if nid is None or ig is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + ig
                else:
                    grads[nid] = ig
    for leaf in leaves:
        if leaf.node_id is not None and leaf.node_id not in grads:
            grads[leaf.node_id] = np.zeros_like(leaf.data)
    return grads


# ---------------------------------------------------------------------------
# primitives


@_register("matmul", 2)
class _MatMul:
    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul", f"operands need >= 2 dims, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", f"inner dims differ: {a.shape[-1]} vs {b.shape[-2]}")
        if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError("matmul", f"leading dims differ: {a.shape[:-2]} vs {b.shape[:-2]}")
        return a @ b, (a, b)

    @staticmethod
    def backward(g, saved):
        a, b = saved
        ga = g @ np.swapaxes(b, -1, -2)
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ g
        return ga, gb


@_register("add", 2)
class _Add:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape and not (b.ndim == 1 and a.shape[-1:] == b.shape):
            raise ShapeError("add", f"cannot add {b.shape} to {a.shape}")
        return a + b, b.shape != a.shape

    @staticmethod
    def backward(g, bias):
        if bias:
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)
        return g, g


@_register("mul", 2)
class _Mul:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape and not (b.ndim == 1 and a.shape[-1:] == b.shape):
            raise ShapeError("mul", f"cannot multiply {a.shape} by {b.shape}")
        return a * b, (a, b)

    @staticmethod
    def backward(g, saved):
        a, b = saved
        gb = g * a
        if b.shape != a.shape:
            gb = gb.reshape(-1, gb.shape[-1]).sum(axis=0)
        return g * b, gb


@_register("concat", None)
class _Concat:
    @staticmethod
    def forward(*xs, axis=0):
        if not xs:
            raise ShapeError("concat", "no inputs")
        ref = xs[0].shape
        ax = axis % len(ref)
        for x in xs[1:]:
            if x.ndim != len(ref) or any(d != r for i, (d, r) in enumerate(zip(x.shape, ref)) if i != ax):
                raise ShapeError("concat", f"shapes {ref} and {x.shape} differ off axis {axis}")
        sizes = [x.shape[ax] for x in xs]
        return np.concatenate(xs, axis=ax), (ax, sizes)

    @staticmethod
    def backward(g, saved):
        ax, sizes = saved
        return np.split(g, np.cumsum(sizes)[:-1], axis=ax)


@_register("slice", 1)
class _Slice:
    @staticmethod
    def forward(x, axis=0, start=0, stop=None):
        ax = axis % x.ndim
        stop = x.shape[ax] if stop is None else stop
        if not 0 <= start <= stop <= x.shape[ax]:
            raise ShapeError("slice", f"[{start}:{stop}] out of range for dim {x.shape[ax]}")
        index = (slice(None),) * ax + (slice(start, stop),)
        return x[index], (x.shape, index)

    @staticmethod
    def backward(g, saved):
        shape, index = saved
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)


@_register("transpose", 1)
class _Transpose:
    @staticmethod
    def forward(x, perm=None):
        perm = tuple(range(x.ndim))[::-1] if perm is None else tuple(perm)
        if sorted(perm) != list(range(x.ndim)):
            raise ShapeError("transpose", f"{perm} is not a permutation of {x.ndim} axes")
        return np.transpose(x, perm), perm

    @staticmethod
    def backward(g, perm):
        return (np.transpose(g, np.argsort(perm)),)


@_register("reshape", 1)
class _Reshape:
    @staticmethod
    def forward(x, shape=()):
        shape = tuple(shape)
        if -1 not in shape and math.prod(shape) != x.size:
            raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}")
        try:
            return x.reshape(shape), x.shape
        except ValueError:
            raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}") from None

    @staticmethod
    def backward(g, shape):
        return (g.reshape(shape),)


@_register("embedding_gather", 1)
class _Gather:
    @staticmethod
    def forward(table, ids=None):
        ids = np.asarray(ids)
        if table.ndim != 2:
            raise ShapeError("embedding_gather", f"table must be 2-D, got {table.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError("embedding_gather", f"ids outside [0, {table.shape[0]})")
        return table[ids], (table.shape, ids)

    @staticmethod
    def backward(g, saved):
        shape, ids = saved
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)


@_register("softmax", 1)
class _Softmax:
    @staticmethod
    def forward(x, axis=-1):
        m = np.max(x, axis=axis, keepdims=True)
        e = np.exp(x - m)
        y = e / e.sum(axis=axis, keepdims=True)
        return y, (y, axis)

    @staticmethod
    def backward(g, saved):
        y, axis = saved
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@_register("layer_norm", 3)
class _LayerNorm:
    @staticmethod
    def forward(x, gain, bias, eps=1e-5):
        n = x.shape[-1]
        if gain.shape != (n,) or bias.shape != (n,):
            raise ShapeError("layer_norm", f"gain/bias {gain.shape}/{bias.shape} vs features {n}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        return xhat * gain + bias, (xhat, inv, gain)

    @staticmethod
    def backward(g, saved):
        xhat, inv, gain = saved
        n = xhat.shape[-1]
        dxhat = g * gain
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, n)
        return dx, (g2 * xhat.reshape(-1, n)).sum(axis=0), g2.sum(axis=0)


_GELU_C = math.sqrt(2.0 / math.pi)


@_register("gelu", 1)
class _Gelu:
    # tanh approximation
    @staticmethod
    def forward(x):
        t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
        return 0.5 * x * (1.0 + t), (x, t)

    @staticmethod
    def backward(g, saved):
        x, t = saved
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


@_register("scale", 1)
class _Scale:
    @staticmethod
    def forward(x, factor=1.0):
        f = x.dtype.type(factor)
        return x * f, f

    @staticmethod
    def backward(g, f):
        return (g * f,)


@_register("sum", 1)
class _Sum:
    @staticmethod
    def forward(x):
        return np.asarray(x.sum(), dtype=x.dtype), x.shape

    @staticmethod
    def backward(g, shape):
        return (np.full(shape, g.reshape(()), dtype=g.dtype),)


@_register("masked_fill", 1)
class _MaskedFill:
    @staticmethod
    def forward(x, mask=None, value=-np.inf):
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError:
            raise ShapeError("masked_fill", f"mask {mask.shape} vs input {x.shape}") from None
        return np.where(mask, x.dtype.type(value), x), mask

    @staticmethod
    def backward(g, mask):
        return (np.where(mask, 0, g).astype(g.dtype, copy=False),)


@_register("cross_entropy_from_logits", 1)
class _CrossEntropy:
    """Token-level negative log-likelihood.

    ``reduction="mean"`` averages over non-ignored positions. ``weights``
    (same shape as targets) multiplies each position's loss; with
    ``reduction="sum"`` the weighted losses are summed.
    """

    @staticmethod
    def forward(logits, targets=None, ignore_index=-100, weights=None, reduction="mean"):
        targets = np.asarray(targets)
        v = logits.shape[-1]
        if logits.shape[:-1] != targets.shape:
            raise ShapeError(
                "cross_entropy_from_logits", f"logits {logits.shape} vs targets {targets.shape}"
            )
        flat = logits.reshape(-1, v)
        t = targets.reshape(-1)
        keep = t != ignore_index
        if reduction == "mean" and not keep.any():
            raise ValueError("cross_entropy_from_logits: every target is ignore_index")
        tt = np.where(keep, t, 0)
        if (tt < 0).any() or (tt >= v).any():
            raise ShapeError("cross_entropy_from_logits", f"targets outside [0, {v})")
        m = flat.max(axis=1, keepdims=True)
        shifted = flat - m
        lse = np.log(np.exp(shifted).sum(axis=1))
        nll = lse - shifted[np.arange(len(tt)), tt]
        w = keep.astype(flat.dtype)
        if weights is not None:
            w = w * np.asarray(weights, dtype=flat.dtype).reshape(-1)
        denom = float(keep.sum()) if reduction == "mean" else 1.0
        loss = np.asarray((nll * w).sum() / denom, dtype=flat.dtype)
        return loss, (shifted, lse, tt, w / denom, logits.shape)

    @staticmethod
    def backward(g, saved):
        shifted, lse, tt, w, shape = saved
        p = np.exp(shifted - lse[:, None])
        p[np.arange(len(tt)), tt] -= 1.0
        p *= (w * g.reshape(()))[:, None]
        return (p.reshape(shape),)
