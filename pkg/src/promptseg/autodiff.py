"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (attention blocks, decoder, losses) is built from the
primitive operations defined here. Design constraints:

* double precision only, row-major numpy storage;
* define-by-run tape: each op records its parents and a vector-Jacobian
  closure on the produced tensor, `backward` replays them in reverse
  topological order, visiting each node exactly once;
* deterministic: no nondeterministic reductions, so identical inputs give
  bit-identical outputs and gradients;
* a tensor and the graph hanging off it are confined to one thread.

Gradients only accumulate into leaves with ``requires_grad=True``; frozen
parameters are wrapped as plain constants and cost nothing during backward.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """The differentiation contract was violated (e.g. non-scalar loss)."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # sum away prepended axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array participating in a reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _vjp: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._vjp = _vjp

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- graph plumbing ------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self._vjp is None and not self.requires_grad:
            return  # frozen leaf: gradient is not tracked
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def detach(self) -> "Tensor":
        """A constant copy sharing no graph history."""
        return Tensor(self.data.copy())

    # operators defined below module-level functions

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _needs_graph(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in ts)


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _needs_graph(*parents):
        return Tensor(out_data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(out_data)


# -- elementwise arithmetic (limited broadcasting with gradient fold-back) ----


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def vjp(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def vjp(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def vjp(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def vjp(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def vjp(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.shape}")
    out_data = a.data.T.copy()

    def vjp(g):
        a._accumulate(g.T)

    return _make(out_data, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)
    old = a.shape

    def vjp(g):
        a._accumulate(g.reshape(old))

    return _make(out_data, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def vjp(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), vjp)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def vjp(g):
        a._accumulate(g / a.data)

    return _make(out_data, (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def vjp(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), vjp)


def maximum_scalar(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)
    out_data = np.maximum(a.data, floor)
    mask = a.data > floor

    def vjp(g):
        a._accumulate(g * mask)

    return _make(out_data, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    out_data = a.data * mask

    def vjp(g):
        a._accumulate(g * mask)

    return _make(out_data, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow; smooth rectifier."""
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        a._accumulate(g * sig)

    return _make(out_data, (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by row-max subtraction.

    Every output row is nonnegative and sums to 1 (within 1e-12).
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-d tensor, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        # dx = y * (g - sum(g*y, axis=1))
        dot = (g * out_data).sum(axis=1, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), vjp)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows needs matching widths, got {a.shape} and {b.shape}")
    out_data = np.concatenate([a.data, b.data], axis=0)
    na = a.shape[0]

    def vjp(g):
        a._accumulate(g[:na])
        b._accumulate(g[na:])

    return _make(out_data, (a, b), vjp)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice a[start:stop]."""
    a = as_tensor(a)
    out_data = a.data[start:stop].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a._accumulate(full)

    return _make(out_data, (a,), vjp)


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice a[:, start:stop]."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"cols expects a 2-d tensor, got shape {a.shape}")
    out_data = a.data[:, start:stop].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a._accumulate(full)

    return _make(out_data, (a,), vjp)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if any(p.ndim != 2 or p.shape[0] != parts[0].shape[0] for p in parts):
        raise ShapeError(f"concat_cols needs matching heights, got {[p.shape for p in parts]}")
    out_data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accumulate(g[:, lo:hi])

    return _make(out_data, tuple(parts), vjp)


# -- backward pass -----------------------------------------------------------


def _topo_order(loss: Tensor) -> list[Tensor]:
    """Iterative post-order DFS over parents; creation order is respected."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._vjp is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) to every trainable leaf under `loss`.

    The loss must be a scalar. Each recorded node is visited exactly once in
    reverse topological order. Leaf gradients accumulate, so callers zero
    them between steps (see `zero_grad`).
    """
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._vjp is None:
        return  # constant loss: nothing depends on any leaf
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.grad is None:
            continue  # did not contribute to the loss
        node._vjp(node.grad)
        if node is not loss:
            node.grad = None  # free intermediate buffers as we go


def zero_grad(params: Iterable[Tensor]) -> None:
    """Reset leaf gradients to exact zeros."""
    for p in params:
        p.grad = np.zeros_like(p.data)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` rebuilds the scalar loss from the current contents of `params` and
    must be deterministic and smooth at the given point. The error for each
    entry is |analytic - central| / max(1, |central|); the max over all
    entries of all params is returned.
    """
    zero_grad(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            fp = f().item()
            flat[i] = saved - step
            fm = f().item()
            flat[i] = saved
            central = (fp - fm) / (2.0 * step)
            err = abs(gflat[i] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst


# -- serialization -----------------------------------------------------------
#
# Tensor record (little endian): magic b"DT64", uint32 rank, uint64 extents,
# then raw float64 values in row-major order. Archives concatenate named
# records after a JSON manifest and are used for checkpoints and episodes.

_RECORD_MAGIC = b"DT64"
_ARCHIVE_MAGIC = b"DTAR1\n"


def write_record(fh, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype=np.float64)
    fh.write(_RECORD_MAGIC)
    fh.write(struct.pack("<I", a.ndim))
    for extent in a.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(a.astype("<f8", copy=False).tobytes())


def read_record(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _RECORD_MAGIC:
        raise ValueError(f"bad tensor record magic: {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64)
    return data.reshape(shape)


def save_archive(path, tensors: dict[str, np.ndarray], manifest: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(_ARCHIVE_MAGIC)
        blob = json.dumps(manifest or {}, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            write_record(fh, arr)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_ARCHIVE_MAGIC))
        if magic != _ARCHIVE_MAGIC:
            raise ValueError(f"bad archive magic: {magic!r}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            tensors[name] = read_record(fh)
    return tensors, manifest
