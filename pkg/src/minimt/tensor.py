"""Dense tensors with a recorded tape for reverse-mode differentiation.

Operations go through :func:`apply`, which computes the forward value with
numpy and, when a :class:`Tape` is active and any input requires a gradient,
records a node holding whatever the backward rule needs. :func:`backward`
walks the tape in reverse and accumulates gradients into the leaves.

Shape rules per op kind (no broadcasting except the bias row in ``add``)::

    matmul          (m,k)@(k,n) -> (m,n); batched (b,m,k)@(b,k,n) -> (b,m,n)
    add             equal shapes, or (..., n) + (n,) bias row
    sub, mul        equal shapes
    scale           any shape, attrs: factor
    concat          equal shapes except along attrs axis
    slice           attrs: axis, start, stop
    reshape         attrs: shape (same element count)
    transpose       attrs: axes
    tanh, sigmoid, relu, exp, log
    softmax, log_softmax   attrs: axis
    embedding_lookup       table (V,E), attrs ids (int array) -> ids.shape + (E,)
    dropout         attrs: mask (same shape as input)
    sum, mean       attrs: axis (None reduces everything)
"""
from __future__ import annotations

import contextvars
import hashlib
import itertools
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

_ids = itertools.count(1)
_active_tape: contextvars.ContextVar = contextvars.ContextVar("minimt_tape", default=None)


class ShapeError(ValueError):
    """Raised when op inputs violate the op's shape rule."""

    def __init__(self, kind, message):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class AxisError(ShapeError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A dense float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "id", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError("tensor", f"dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name!r}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}{flag})"


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    attrs: dict
    saved: dict


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to make it the active tape for :func:`apply` in
    the current thread/context.
    """

    nodes: list = field(default_factory=list)

    def __post_init__(self):
        self._token = None
        self._produced = {}

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def record(self, node):
        self._produced[node.output.id] = len(self.nodes)
        self.nodes.append(node)

    def produced(self, tensor):
        return tensor.id in self._produced

    def replay(self):
        """Recompute every node from its recorded inputs.

        Returns True when each recomputed output equals the recorded one
        exactly.
        """
        for node in self.nodes:
            out, _ = _OPS[node.kind][0]([t.data for t in node.inputs], node.attrs)
            if out.shape != node.output.data.shape or not np.array_equal(out, node.output.data):
                return False
        return True

    def __len__(self):
        return len(self.nodes)


def active_tape():
    return _active_tape.get()


def constant(data, dtype=np.float64):
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# op implementations: forward(xs, attrs) -> (out, saved);
# backward(g, xs, out, saved, attrs) -> tuple of input grads (None = skip)
# ---------------------------------------------------------------------------

def _axis(kind, attrs, ndim, default=-1):
    axis = attrs.get("axis", default)
    if not -ndim <= axis < ndim:
        raise AxisError(kind, f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _matmul_fwd(xs, attrs):
    a, b = xs
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError("matmul", f"batched shapes do not conform: {a.shape} @ {b.shape}")
    else:
        raise ShapeError("matmul", f"expected two rank-2 or two rank-3 inputs, got {a.shape} @ {b.shape}")
    return a @ b, None


def _matmul_bwd(g, xs, out, saved, attrs):
    a, b = xs
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


def _add_fwd(xs, attrs):
    a, b = xs
    if a.shape != b.shape and not (b.ndim == 1 and a.shape[-1] == b.shape[0]):
        raise ShapeError("add", f"shapes {a.shape} and {b.shape} differ (only a trailing bias row may broadcast)")
    return a + b, None


def _add_bwd(g, xs, out, saved, attrs):
    a, b = xs
    if a.shape == b.shape:
        return g, g
    return g, g.reshape(-1, b.shape[0]).sum(axis=0)


def _same_shape(kind, xs):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError(kind, f"shapes {a.shape} and {b.shape} differ")


def _sub_fwd(xs, attrs):
    _same_shape("sub", xs)
    return xs[0] - xs[1], None


def _mul_fwd(xs, attrs):
    _same_shape("mul", xs)
    return xs[0] * xs[1], None


def _scale_fwd(xs, attrs):
    return xs[0] * attrs["factor"], None


def _concat_fwd(xs, attrs):
    ref = xs[0]
    axis = _axis("concat", attrs, ref.ndim)
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(d1 != d2 for i, (d1, d2) in enumerate(zip(x.shape, ref.shape)) if i != axis):
            raise ShapeError("concat", f"shapes {ref.shape} and {x.shape} differ off axis {axis}")
    return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]


def _concat_bwd(g, xs, out, sizes, attrs):
    axis = attrs.get("axis", -1) % g.ndim
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _slice_fwd(xs, attrs):
    x = xs[0]
    axis = _axis("slice", attrs, x.ndim, default=0)
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError("slice", f"range [{start}, {stop}) invalid for dimension {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return x[tuple(index)], tuple(index)


def _slice_bwd(g, xs, out, index, attrs):
    full = np.zeros_like(xs[0])
    full[index] = g
    return (full,)


def _reshape_fwd(xs, attrs):
    x = xs[0]
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}")
    return x.reshape(shape), None


def _reshape_bwd(g, xs, out, saved, attrs):
    return (g.reshape(xs[0].shape),)


def _transpose_fwd(xs, attrs):
    axes = tuple(attrs["axes"])
    if sorted(axes) != list(range(xs[0].ndim)):
        raise AxisError("transpose", f"axes {axes} are not a permutation for rank {xs[0].ndim}")
    return np.ascontiguousarray(xs[0].transpose(axes)), None


def _transpose_bwd(g, xs, out, saved, attrs):
    return (g.transpose(np.argsort(attrs["axes"])),)


def _tanh_fwd(xs, attrs):
    return np.tanh(xs[0]), None


def _tanh_bwd(g, xs, out, saved, attrs):
    return (g * (1.0 - out * out),)


def _sigmoid_fwd(xs, attrs):
    return 0.5 * (np.tanh(0.5 * xs[0]) + 1.0), None


def _sigmoid_bwd(g, xs, out, saved, attrs):
    return (g * out * (1.0 - out),)


def _relu_fwd(xs, attrs):
    return np.maximum(xs[0], 0.0), None


def _relu_bwd(g, xs, out, saved, attrs):
    return (g * (xs[0] > 0),)


def _exp_fwd(xs, attrs):
    return np.exp(xs[0]), None


def _exp_bwd(g, xs, out, saved, attrs):
    return (g * out,)


def _log_fwd(xs, attrs):
    with np.errstate(divide="ignore"):
        return np.log(xs[0]), None


def _log_bwd(g, xs, out, saved, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return (np.where(g == 0, 0.0, g / xs[0]),)


def _log_softmax_fwd(xs, attrs):
    x = xs[0]
    axis = _axis("log_softmax", attrs, x.ndim)
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True)), None


def _log_softmax_bwd(g, xs, out, saved, attrs):
    axis = attrs.get("axis", -1)
    return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)


def _softmax_fwd(xs, attrs):
    axis = _axis("softmax", attrs, xs[0].ndim)
    logp, _ = _log_softmax_fwd(xs, {"axis": axis})
    return np.exp(logp), None


def _softmax_bwd(g, xs, out, saved, attrs):
    axis = attrs.get("axis", -1)
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def _embedding_fwd(xs, attrs):
    table = xs[0]
    ids = np.asarray(attrs["ids"])
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", f"table must be rank 2, got {table.shape}")
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding_lookup", f"ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup", f"ids outside [0, {table.shape[0]})")
    return table[ids], None


def _embedding_bwd(g, xs, out, saved, attrs):
    full = np.zeros_like(xs[0])
    np.add.at(full, np.asarray(attrs["ids"]).reshape(-1), g.reshape(-1, full.shape[1]))
    return (full,)


def _dropout_fwd(xs, attrs):
    mask = attrs["mask"]
    if mask.shape != xs[0].shape:
        raise ShapeError("dropout", f"mask shape {mask.shape} != input shape {xs[0].shape}")
    return xs[0] * mask, None


def _dropout_bwd(g, xs, out, saved, attrs):
    return (g * attrs["mask"],)


def _reduce_axis(kind, x, attrs):
    axis = attrs.get("axis")
    if axis is None:
        return None
    return _axis(kind, {"axis": axis}, x.ndim)


def _sum_fwd(xs, attrs):
    axis = _reduce_axis("sum", xs[0], attrs)
    return np.asarray(np.sum(xs[0], axis=axis)), axis


def _sum_bwd(g, xs, out, axis, attrs):
    x = xs[0]
    if axis is None:
        return (np.full_like(x, g),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _mean_fwd(xs, attrs):
    axis = _reduce_axis("mean", xs[0], attrs)
    return np.asarray(np.mean(xs[0], axis=axis)), axis


def _mean_bwd(g, xs, out, axis, attrs):
    x = xs[0]
    n = x.size if axis is None else x.shape[axis]
    (full,) = _sum_bwd(g, xs, out, axis, attrs)
    return (full / n,)


_OPS = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, lambda g, xs, out, s, a: (g, -g)),
    "mul": (_mul_fwd, lambda g, xs, out, s, a: (g * xs[1], g * xs[0])),
    "scale": (_scale_fwd, lambda g, xs, out, s, a: (g * a["factor"],)),
    "concat": (_concat_fwd, _concat_bwd),
    "slice": (_slice_fwd, _slice_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "transpose": (_transpose_fwd, _transpose_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "log": (_log_fwd, _log_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "log_softmax": (_log_softmax_fwd, _log_softmax_bwd),
    "embedding_lookup": (_embedding_fwd, _embedding_bwd),
    "dropout": (_dropout_fwd, _dropout_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
}

OP_KINDS = tuple(_OPS)


def apply(kind, inputs, attrs=None, tape=None):
    """Run op ``kind`` on ``inputs`` and record it on the tape if needed."""
    try:
        fwd = _OPS[kind][0]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    attrs = attrs or {}
    out_data, saved = fwd([t.data for t in inputs], attrs)
    tape = tape if tape is not None else _active_tape.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs_grad
    out.grad = None
    out.id = next(_ids)
    out.name = None
    if needs_grad:
        tape.record(Node(kind, tuple(inputs), out, attrs, saved))
    return out


def backward(tape, loss):
    """Backpropagate from scalar ``loss`` through ``tape``.

    Accumulates into ``.grad`` of every leaf that requires a gradient and
    returns ``{tensor.id: gradient}`` for those leaves.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("loss tensor was not produced on this tape")
    grads = {loss.id: np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        in_grads = _OPS[node.kind][1](g, [t.data for t in node.inputs], node.output.data, node.saved, node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
            if not tape.produced(t):
                leaves[t.id] = t
    result = {}
    for tid, t in leaves.items():
        g = grads[tid]
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[tid] = g
    return result


def dropout_mask(shape, rate, rng, training=True, dtype=np.float64):
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return Tensor(np.ones(shape, dtype=dtype))
    keep = rng.random(shape) >= rate
    return Tensor(keep.astype(dtype) / (1.0 - rate))


def dropout(x, rate, rng, training=True):
    if not training or rate == 0.0:
        return x
    mask = dropout_mask(x.shape, rate, rng, training, dtype=x.dtype)
    return apply("dropout", [x], {"mask": mask.data})


# ---------------------------------------------------------------------------
# named-tensor container
# ---------------------------------------------------------------------------

MAGIC = b"MNMT"
FORMAT_VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i4"): 2, np.dtype("<i8"): 3}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class ContainerError(ValueError):
    pass


class ChecksumError(ContainerError):
    pass


def encode_tensors(named):
    """Serialize ``{name: ndarray}`` into the container byte layout."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_TAGS:
            raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<I", DTYPE_TAGS[dt]))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_tensors(blob):
    if len(blob) < 12 + 32:
        raise ContainerError("truncated container")
    body, digest = blob[:-32], blob[-32:]
    if body[:4] != MAGIC:
        raise ContainerError("bad magic; not a tensor container")
    version, count = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"container version {version} unsupported (expected {FORMAT_VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("container checksum mismatch")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            (tag,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dt = TAG_DTYPES[tag]
            n = int(np.prod(dims)) * dt.itemsize
            if pos + n > len(body):
                raise ContainerError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(body, dtype=dt, count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
            pos += n
    except (struct.error, KeyError) as exc:
        raise ContainerError(f"malformed container: {exc}") from None
    if pos != len(body):
        raise ContainerError("trailing bytes after last tensor")
    return out


def atomic_write_bytes(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path, named):
    atomic_write_bytes(path, encode_tensors(named))


def load_tensors(path):
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())
