"""Minimal reverse-mode autodiff over dense numpy arrays.

Covers exactly what the denoiser, the view classifier, and the volume
renderer need: broadcasting elementwise ops, 2-D matmul, reductions, cumsum,
concat, row gathers, and a bias-corrected Adam step. Graphs are built
dynamically (each op links results to parents); `backward` walks the tape in
reverse topological order with a deterministic accumulation order.

All data is float64 by default. set_default_dtype("float32") switches runtime
precision; gradient checks are only meaningful in double.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable

import numpy as np

from .errors import InvalidBackward, ShapeMismatch

_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(name: str) -> None:
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError("dtype must be 'float32' or 'float64'")
    _DTYPE = np.dtype(name).type


def default_dtype():
    return _DTYPE


class no_grad:
    """Context manager suppressing tape recording (pure forward passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense array plus optional links into the autodiff tape."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=_DTYPE))
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Callable | None = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Checked constructor; rejects non-finite entries."""
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._backward_done = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _broadcast_check(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeMismatch(f"incompatible shapes {shapes}") from exc


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def vjp(g):
        return (g * s,)

    return _make(a.data * s, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def vjp(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _make(out, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    # stable: log1p(exp(-|x|)) + max(x, 0)
    out = np.log1p(np.exp(-np.abs(a.data))) + np.maximum(a.data, 0.0)
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * sig,)

    return _make(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _make(out, (a,), vjp)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "silu": silu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "scale": scale,
}


def elementwise(op_kind: str, *inputs):
    """Dispatch by name; binary kinds take two tensors, scale takes (x, s)."""
    if op_kind not in _ELEMENTWISE:
        raise ShapeMismatch(f"unknown elementwise op {op_kind!r}")
    return _ELEMENTWISE[op_kind](*inputs)


# ---------------------------------------------------------------------------
# matmul, reductions, structure ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _make(out, (a, b), vjp)


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim if -ndim <= ax < ndim else ax for ax in axes)
    if any(ax < 0 or ax >= ndim for ax in axes):
        raise ShapeMismatch(f"axis out of range for ndim {ndim}")
    return axes


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        gk = g if keepdims else g.reshape([1 if i in axes else s for i, s in enumerate(shape)])
        return (np.broadcast_to(gk, shape).copy(),)

    return _make(np.asarray(out), (a,), vjp)


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    s = reduce_sum(a, axes=axes, keepdims=keepdims)
    return scale(s, 1.0 / count)


def reduce(op_kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if op_kind == "sum":
        return reduce_sum(a, axes, keepdims)
    if op_kind == "mean":
        return reduce_mean(a, axes, keepdims)
    raise ShapeMismatch(f"unknown reduce op {op_kind!r}")


def cumsum(a: Tensor, axis: int) -> Tensor:
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _make(out, (a,), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def vjp(g):
        pieces = []
        start = 0
        for sz in sizes:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + sz)
            pieces.append(g[tuple(sl)])
            start += sz
        return tuple(pieces)

    return _make(out, tuple(ts), vjp)


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup table[idx]; gradient scatter-adds into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]
    vshape = table.shape

    def vjp(g):
        acc = np.zeros(vshape, dtype=g.dtype)
        np.add.at(acc, idx, g)
        return (acc,)

    return _make(out, (table,), vjp)


def weighted_gather(table: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted combination of table rows: out[p] = sum_k w[p,k] * table[idx[p,k]].

    idx and weights have shape (P, K) and are treated as constants; this is
    the workhorse behind trilinear grid interpolation.
    """
    idx = np.asarray(idx, dtype=np.int64)
    weights = np.asarray(weights, dtype=table.data.dtype)
    gathered = table.data[idx]  # (P, K, F)
    out = np.einsum("pk,pkf->pf", weights, gathered)
    rows, feats = table.shape
    # (point, corner, feature) scattered through one flat bincount; this is
    # the rendering-backward hot path, so the combined index is precomputed
    comb_idx = (idx.reshape(-1, 1) * feats + np.arange(feats)).ravel()

    def vjp(g):
        contrib = (weights[:, :, None] * g[:, None, :]).ravel()
        return (np.bincount(comb_idx, weights=contrib, minlength=rows * feats).reshape(rows, feats),)

    return _make(out, (table,), vjp)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------

class Tape:
    """Reverse-topological view of the graph reachable from a root tensor."""

    def __init__(self, nodes: list):
        self.nodes = nodes  # topological: parents precede children

    @staticmethod
    def from_root(root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return Tape(order)


def backward(loss: Tensor) -> dict:
    """Populate gradients for every requires_grad leaf reachable from `loss`.

    Returns a map keyed by leaf Tensor identity. Running backward twice on
    the same root raises InvalidBackward rather than double-accumulating.
    """
    if loss.data.size != 1:
        raise InvalidBackward(f"loss must be scalar, got shape {loss.shape}")
    if loss._backward_done:
        raise InvalidBackward("backward already ran on this tape; rebuild the graph first")
    loss._backward_done = True

    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                leaf_grads[node] = g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaf_grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_update(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam step applied in place to params[name].data."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoint format: "OGRAD1", little-endian
# ---------------------------------------------------------------------------

_MAGIC = b"OGRAD1"


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays: magic, count, then per-tensor
    (u32 name length, UTF-8 name, u32 rank, u64 dims, float64 payload)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not an OGRAD1 checkpoint")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            n = 1
            for d in dims:
                n *= d
            payload = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
            out[name] = payload.astype(np.float64)
    return out
