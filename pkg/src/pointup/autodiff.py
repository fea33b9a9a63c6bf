"""Reverse-mode autodiff over dense numpy arrays.

A deliberately small primitive set: exactly the operations the upsampling
networks and their Chamfer objective need. Nodes record creation order, which
is always a valid topological order because values are computed eagerly.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    """A primitive received inputs that violate its shape rule."""


class UnknownKindError(ValueError):
    """Requested primitive kind is not registered."""


# Optional per-op finiteness validation; off by default because the scan is
# wasted work inside tight training loops.
CHECK_FINITE = False

_node_ids = itertools.count()


class ValueNode:
    """One eagerly-evaluated node of the computation graph."""

    __slots__ = ("id", "op", "inputs", "attrs", "value", "grad")

    def __init__(self, op: str, inputs: list["ValueNode"], value: np.ndarray, attrs: dict | None = None):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.attrs = attrs or {}
        self.value = value
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"ValueNode(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    # Sugar so model code reads like array math.
    def __add__(self, other: "ValueNode") -> "ValueNode":
        return apply_primitive("add", [self, other])

    def __sub__(self, other: "ValueNode") -> "ValueNode":
        return apply_primitive("subtract", [self, other])

    def __mul__(self, other) -> "ValueNode":
        if isinstance(other, ValueNode):
            return apply_primitive("multiply", [self, other])
        return apply_primitive("scalar_mul", [self], {"c": float(other)})

    __rmul__ = __mul__

    def __matmul__(self, other: "ValueNode") -> "ValueNode":
        return apply_primitive("matmul", [self, other])

    def relu(self) -> "ValueNode":
        return apply_primitive("relu", [self])

    def tanh(self) -> "ValueNode":
        return apply_primitive("tanh", [self])

    def reshape(self, shape) -> "ValueNode":
        return apply_primitive("reshape", [self], {"shape": tuple(shape)})

    def transpose(self, perm) -> "ValueNode":
        return apply_primitive("transpose", [self], {"perm": tuple(perm)})


def constant(x, dtype=None) -> ValueNode:
    """Wrap an array as a leaf node."""
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return ValueNode("const", [], arr)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (undo trailing-axis numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, (got, want) in enumerate(zip(g.shape, shape)) if got != want)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


def _suffix_compatible(a_shape, b_shape) -> bool:
    if len(b_shape) > len(a_shape):
        return False
    return a_shape[len(a_shape) - len(b_shape):] == b_shape


# ---------------------------------------------------------------------------
# Primitive registry: kind -> (forward, backward). backward receives the
# output gradient plus the input values and must return one gradient per input.
# ---------------------------------------------------------------------------

def _fw_matmul(vals, attrs):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    elif b.ndim == a.ndim:
        if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            raise ShapeMismatchError(f"matmul batch shapes incompatible: {a.shape} @ {b.shape}")
    else:
        raise ShapeMismatchError(f"matmul supports 2-d or equal-rank right operand: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def _bw_matmul(g, vals, out, attrs):
    a, b = vals
    if b.ndim == 2:
        k, m = b.shape
        da = np.matmul(g, b.T)
        db = np.matmul(a.reshape(-1, k).T, g.reshape(-1, m))
    else:
        da = np.matmul(g, b.swapaxes(-1, -2))
        db = np.matmul(a.swapaxes(-1, -2), g)
    return [da, db]


def _ew_rule(kind, a, b):
    ok = (
        a.shape == b.shape
        or _suffix_compatible(a.shape, b.shape)
        or a.size == 1
        or b.size == 1
    )
    if not ok:
        raise ShapeMismatchError(f"{kind} shapes incompatible: {a.shape} vs {b.shape}")


def _fw_add(vals, attrs):
    a, b = vals
    _ew_rule("add", a, b)
    return a + b


def _bw_add(g, vals, out, attrs):
    a, b = vals
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _fw_subtract(vals, attrs):
    a, b = vals
    _ew_rule("subtract", a, b)
    return a - b


def _bw_subtract(g, vals, out, attrs):
    a, b = vals
    return [_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)]


def _fw_multiply(vals, attrs):
    a, b = vals
    _ew_rule("multiply", a, b)
    return a * b


def _bw_multiply(g, vals, out, attrs):
    a, b = vals
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _fw_concat(vals, attrs):
    axis = attrs["axis"]
    ranks = {v.ndim for v in vals}
    if len(ranks) != 1:
        raise ShapeMismatchError(f"concat rank mismatch: {[v.shape for v in vals]}")
    base = list(vals[0].shape)
    for v in vals[1:]:
        other = list(v.shape)
        other[axis] = base[axis]
        if other != base:
            raise ShapeMismatchError(f"concat off-axis extents differ: {[v.shape for v in vals]}")
    return np.concatenate(vals, axis=axis)


def _bw_concat(g, vals, out, attrs):
    axis = attrs["axis"]
    splits = np.cumsum([v.shape[axis] for v in vals[:-1]])
    return list(np.split(g, splits, axis=axis))


def _fw_relu(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _bw_relu(g, vals, out, attrs):
    return [g * (vals[0] > 0)]


def _fw_tanh(vals, attrs):
    return np.tanh(vals[0])


def _bw_tanh(g, vals, out, attrs):
    return [g * (1.0 - out * out)]


def _fw_softmax(vals, attrs):
    x = vals[0]
    axis = attrs["axis"]
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _bw_softmax(g, vals, out, attrs):
    axis = attrs["axis"]
    return [out * (g - (g * out).sum(axis=axis, keepdims=True))]


def _fw_reduce_max(vals, attrs):
    return vals[0].max(axis=attrs["axis"], keepdims=attrs.get("keepdims", False))


def _bw_reduce_max(g, vals, out, attrs):
    x = vals[0]
    axis = attrs["axis"]
    # np.argmax picks the first occurrence, which is the tie rule we promise.
    am = np.argmax(x, axis=axis)
    gx = np.zeros_like(x)
    ge = g if attrs.get("keepdims", False) else np.expand_dims(g, axis)
    np.put_along_axis(gx, np.expand_dims(am, axis), ge, axis=axis)
    return [gx]


def _fw_reduce_sum(vals, attrs):
    return vals[0].sum(axis=attrs["axis"], keepdims=attrs.get("keepdims", False))


def _bw_reduce_sum(g, vals, out, attrs):
    x = vals[0]
    ge = g if attrs.get("keepdims", False) else np.expand_dims(g, attrs["axis"])
    return [np.ascontiguousarray(np.broadcast_to(ge, x.shape))]


def _fw_reduce_mean(vals, attrs):
    return vals[0].mean(axis=attrs["axis"], keepdims=attrs.get("keepdims", False))


def _bw_reduce_mean(g, vals, out, attrs):
    x = vals[0]
    n = x.shape[attrs["axis"]]
    ge = g if attrs.get("keepdims", False) else np.expand_dims(g, attrs["axis"])
    return [np.ascontiguousarray(np.broadcast_to(ge, x.shape)) / n]


def _fw_tile(vals, attrs):
    return np.concatenate([vals[0]] * attrs["factor"], axis=attrs["axis"])


def _bw_tile(g, vals, out, attrs):
    parts = np.split(g, attrs["factor"], axis=attrs["axis"])
    acc = parts[0].copy()
    for p in parts[1:]:
        acc += p
    return [acc]


def _fw_gather(vals, attrs):
    x = vals[0]
    idx = attrs["indices"]
    axis = attrs.get("axis", 0)
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeMismatchError(f"gather index out of range for extent {n} on axis {axis}")
    return np.take(x, idx, axis=axis)


def _bw_gather(g, vals, out, attrs):
    x = vals[0]
    idx = attrs["indices"]
    axis = attrs.get("axis", 0)
    # Move the indexed dims to the front, scatter-add via bincount (much
    # faster than np.add.at), then move the axis back.
    g_front = np.moveaxis(g, range(axis, axis + idx.ndim), range(idx.ndim))
    rest = x.shape[:axis] + x.shape[axis + 1:]
    cols = int(np.prod(rest)) if rest else 1
    g2 = g_front.reshape(idx.size, cols)
    lin = (idx.reshape(-1, 1) * cols + np.arange(cols)).ravel()
    acc = np.bincount(lin, weights=g2.ravel(), minlength=x.shape[axis] * cols)
    gx = acc.reshape((x.shape[axis],) + rest).astype(x.dtype, copy=False)
    return [np.moveaxis(gx, 0, axis)]


def _fw_reshape(vals, attrs):
    shape = attrs["shape"]
    if int(np.prod(shape)) != vals[0].size:
        raise ShapeMismatchError(f"reshape {vals[0].shape} -> {shape} changes element count")
    return vals[0].reshape(shape)


def _bw_reshape(g, vals, out, attrs):
    return [g.reshape(vals[0].shape)]


def _fw_transpose(vals, attrs):
    return np.transpose(vals[0], attrs["perm"])


def _bw_transpose(g, vals, out, attrs):
    return [np.transpose(g, np.argsort(attrs["perm"]))]


def _fw_scalar_mul(vals, attrs):
    return vals[0] * attrs["c"]


def _bw_scalar_mul(g, vals, out, attrs):
    return [g * attrs["c"]]


PRIMITIVES = {
    "matmul": (_fw_matmul, _bw_matmul),
    "add": (_fw_add, _bw_add),
    "subtract": (_fw_subtract, _bw_subtract),
    "multiply": (_fw_multiply, _bw_multiply),
    "concat": (_fw_concat, _bw_concat),
    "relu": (_fw_relu, _bw_relu),
    "tanh": (_fw_tanh, _bw_tanh),
    "softmax": (_fw_softmax, _bw_softmax),
    "reduce_max": (_fw_reduce_max, _bw_reduce_max),
    "reduce_sum": (_fw_reduce_sum, _bw_reduce_sum),
    "reduce_mean": (_fw_reduce_mean, _bw_reduce_mean),
    "tile": (_fw_tile, _bw_tile),
    "gather": (_fw_gather, _bw_gather),
    "reshape": (_fw_reshape, _bw_reshape),
    "transpose": (_fw_transpose, _bw_transpose),
    "scalar_mul": (_fw_scalar_mul, _bw_scalar_mul),
}


def apply_primitive(kind: str, inputs: list[ValueNode], attrs: dict | None = None) -> ValueNode:
    """Evaluate `kind` on the input nodes and record the result node."""
    if kind not in PRIMITIVES:
        raise UnknownKindError(f"unknown primitive kind {kind!r}")
    attrs = attrs or {}
    fw, _ = PRIMITIVES[kind]
    value = fw([n.value for n in inputs], attrs)
    if CHECK_FINITE and not np.isfinite(value).all():
        raise FloatingPointError(f"non-finite value produced by {kind}")
    return ValueNode(kind, list(inputs), value, attrs)


# Functional aliases used throughout the model code.
def concat(nodes, axis: int) -> ValueNode:
    return apply_primitive("concat", list(nodes), {"axis": axis})


def gather(x: ValueNode, indices: np.ndarray, axis: int = 0) -> ValueNode:
    return apply_primitive("gather", [x], {"indices": np.asarray(indices), "axis": axis})


def softmax(x: ValueNode, axis: int) -> ValueNode:
    return apply_primitive("softmax", [x], {"axis": axis})


def reduce_max(x: ValueNode, axis: int, keepdims: bool = False) -> ValueNode:
    return apply_primitive("reduce_max", [x], {"axis": axis, "keepdims": keepdims})


def reduce_sum(x: ValueNode, axis: int, keepdims: bool = False) -> ValueNode:
    return apply_primitive("reduce_sum", [x], {"axis": axis, "keepdims": keepdims})


def reduce_mean(x: ValueNode, axis: int, keepdims: bool = False) -> ValueNode:
    return apply_primitive("reduce_mean", [x], {"axis": axis, "keepdims": keepdims})


def tile(x: ValueNode, axis: int, factor: int) -> ValueNode:
    return apply_primitive("tile", [x], {"axis": axis, "factor": factor})


def backward(root: ValueNode) -> dict[int, np.ndarray]:
    """Accumulate gradients of a scalar root into every reachable node.

    Returns node id -> gradient. Creation order doubles as topological order,
    so one reverse sweep over the reachable set suffices.
    """
    if root.value.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar root, got shape {root.value.shape}")

    reachable: dict[int, ValueNode] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in reachable:
            continue
        reachable[node.id] = node
        stack.extend(node.inputs)

    for node in reachable.values():
        node.grad = None
    root.grad = np.ones_like(root.value)

    for node in sorted(reachable.values(), key=lambda n: n.id, reverse=True):
        if node.grad is None or not node.inputs:
            continue
        _, bw = PRIMITIVES[node.op]
        input_grads = bw(node.grad, [n.value for n in node.inputs], node.value, node.attrs)
        for inp, g in zip(node.inputs, input_grads):
            inp.grad = g if inp.grad is None else inp.grad + g
    return {nid: node.grad for nid, node in reachable.items()}


def grad_check(builder, x: np.ndarray, step: float = 1e-5) -> float:
    """Compare analytic and central-difference gradients of builder(x).

    `builder` maps a leaf node to a scalar root. Returns the max over input
    coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    leaf = constant(x)
    root = builder(leaf)
    backward(root)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] += step
        hi = builder(constant(bump.reshape(x.shape))).value.item()
        bump[i] -= 2 * step
        lo = builder(constant(bump.reshape(x.shape))).value.item()
        numeric.ravel()[i] = (hi - lo) / (2 * step)

    denom = np.maximum(1.0, np.abs(numeric))
    return float((np.abs(analytic - numeric) / denom).max())


# ---------------------------------------------------------------------------
# Parameter storage and the binary checkpoint format.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DISPU001"


@dataclass
class ParamStore:
    """Named parameter arrays plus the seed that initialized them."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    rng_seed: int = 0

    def scalar_count(self) -> int:
        return int(sum(arr.size for arr in self.entries.values()))

    def sorted_names(self) -> list[str]:
        return sorted(self.entries)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.entries.items()}, self.rng_seed)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self.entries.items()}, self.rng_seed)


def save_checkpoint(store: ParamStore, path, config: dict | None = None) -> None:
    """Write magic + length-prefixed JSON header + float32 LE payloads.

    Header entries are (name, dtype, shape) in sorted name order; the config
    dict rides along so a checkpoint is self-describing for inference.
    """
    names = store.sorted_names()
    header = {
        "entries": [[n, str(store.entries[n].dtype), list(store.entries[n].shape)] for n in names],
        "rng_seed": store.rng_seed,
        "config": config or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(store.entries[n].astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        entries = {}
        for name, dtype, shape in header["entries"]:
            count = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(f.read(4 * count), dtype="<f4")
            entries[name] = raw.reshape(shape).astype(dtype)
    return ParamStore(entries, header.get("rng_seed", 0)), header.get("config", {})
