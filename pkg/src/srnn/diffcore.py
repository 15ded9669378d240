"""Dense tensors with define-by-run reverse-mode differentiation.

Every op records a closure on the output tensor that maps the upstream
gradient to gradients for its parents.  ``backward`` walks the recorded graph
in reverse topological order and accumulates into the ``grad`` field of leaf
tensors created with ``requires_grad=True``.

Also provides :class:`ParamStore` (named parameters plus Adam state), the
binary checkpoint format, and a central finite-difference gradient checker.
"""

from __future__ import annotations

import contextlib
import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "tensor", "as_tensor",
    "no_grad", "checked", "set_checked", "get_dtype", "set_dtype",
    "add", "sub", "mul", "neg", "matmul", "concat", "stack", "reshape",
    "sigmoid", "tanh", "exp", "log", "square", "softplus", "sum", "mean",
    "clamp", "leaky_rectify", "backward", "ParamStore", "save_checkpoint",
    "load_checkpoint", "grad_check", "CHECKPOINT_VERSION",
]

_DTYPE = np.float64
_GRAD_ENABLED = True
_CHECKED = False

LEAK = 1.0 / 3.0
CLIP = 3.0


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    """Set the precision used for newly created tensors (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    _DTYPE = dtype


def set_checked(flag: bool) -> None:
    global _CHECKED
    _CHECKED = bool(flag)


@contextlib.contextmanager
def checked(flag: bool = True):
    """Raise :class:`NonFiniteError` as soon as an op produces NaN/Inf."""
    global _CHECKED
    prev, _CHECKED = _CHECKED, flag
    try:
        yield
    finally:
        _CHECKED = prev


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op) -> Tensor:
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` are treated as batch."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _node(ad @ bd, (a, b), bwd, "matmul")


# ------------------------------------------------------------ structural ops

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, bwd, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: shapes {ts[0].shape} and {t.shape} differ")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def bwd(g):
        return tuple(np.moveaxis(g, ax, 0))

    return _node(out, ts, bwd, "stack")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
               for i in items)


def take(a, index) -> Tensor:
    """Slice/index ``a``; gradient scatters back into the sliced region."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}") from exc
    shape = a.shape
    basic = _is_basic_index(index)
    return _node(out, (a,), lambda g: (_IndexedGrad(shape, index, g, basic),), "slice")


class _IndexedGrad:
    """Gradient that is zero outside ``index``; scattered lazily by backward."""

    __slots__ = ("shape", "index", "g", "basic")

    def __init__(self, shape, index, g, basic):
        self.shape, self.index, self.g, self.basic = shape, index, g, basic

    def scatter_into(self, buf: np.ndarray) -> np.ndarray:
        if self.basic:
            buf[self.index] += self.g
        else:
            np.add.at(buf, self.index, self.g)
        return buf

    def dense(self) -> np.ndarray:
        return self.scatter_into(np.zeros(self.shape, dtype=self.g.dtype))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- pointwise

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # stable in both tails
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _node(out, (a,), lambda g: (g / x,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _node(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _node(out, (a,), bwd, "softplus")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Hard clamp; zero gradient outside ``[lo, hi]``."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _node(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def leaky_rectify(a) -> Tensor:
    """Leaky ReLU with slope 1/3 for negatives, output clipped to [-3, 3]."""
    a = as_tensor(a)
    x = a.data
    pos = x > 0
    out = np.clip(np.where(pos, x, LEAK * x), -CLIP, CLIP)
    slope = np.where(pos, 1.0, LEAK) * (np.abs(out) < CLIP)
    return _node(out, (a,), lambda g: (g * slope,), "leaky_rectify")


# --------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(out), (a,), bwd, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.asarray(out).size, 1)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _node(np.asarray(out), (a,), bwd, "mean")


# ----------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = []
    visited = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack_.append((p, False))

    # ``owned`` marks buffers allocated here, which may be updated in place;
    # anything else may alias an array held by another node.
    grads = {id(loss): np.ones_like(loss.data)}
    owned = set()
    for node in reversed(order):
        k = id(node)
        g = grads.pop(k, None)
        owned.discard(k)
        if g is None:
            continue
        if isinstance(g, _IndexedGrad):
            g = g.dense()
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            cur = grads.get(k)
            if cur is None:
                grads[k] = gp
                continue
            if isinstance(gp, _IndexedGrad):
                if isinstance(cur, _IndexedGrad):
                    cur = cur.dense()
                elif k not in owned:
                    cur = cur.copy()
                grads[k] = gp.scatter_into(cur)
                owned.add(k)
                continue
            elif isinstance(cur, _IndexedGrad):
                grads[k] = cur.scatter_into(np.array(gp, copy=True))
            elif k in owned:
                cur += gp
                continue
            else:
                grads[k] = cur + gp
            owned.add(k)


# ------------------------------------------------------------- parameters

class ParamStore:
    """Named trainable tensors with per-entry Adam moments.

    Iteration order is sorted by name so updates and serialization are
    deterministic.
    """

    def __init__(self, arrays: dict | None = None):
        self._entries: dict[str, Tensor] = {}
        self._adam: dict[str, list] = {}
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=_DTYPE), requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    def num_scalars(self) -> int:
        return int(np.sum([t.data.size for t in self._entries.values()]))

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_arrays(self, arrays: dict) -> None:
        for name, t in self.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            value = np.asarray(arrays[name])
            if value.shape != t.shape:
                raise ShapeError(f"parameter {name!r}: stored {value.shape} vs expected {t.shape}")
            t.data = value.astype(_DTYPE, copy=True)

    def grad_norm(self) -> float:
        return float(np.sqrt(np.sum([np.sum(t.grad ** 2) for t in self._entries.values()
                                     if t.grad is not None])))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm > 0:
            scale = max_norm / norm
            for t in self._entries.values():
                if t.grad is not None:
                    t.grad = t.grad * scale
        return norm

    def adam_step(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> None:
        """One bias-corrected Adam update; gradients are zeroed afterwards."""
        for name, t in self.items():
            if t.grad is None:
                raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        for name, t in self.items():
            state = self._adam.get(name)
            if state is None:
                state = self._adam[name] = [np.zeros_like(t.data), np.zeros_like(t.data), 0]
            m, v, step = state
            g = t.grad
            step += 1
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1 ** step)
            v_hat = v / (1.0 - beta2 ** step)
            t.data = t.data - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            state[2] = step
            t.grad = None

    def adam_state(self, name: str):
        return self._adam.get(name)


def adam_step(params: ParamStore, learning_rate: float, **kw) -> None:
    params.adam_step(learning_rate, **kw)


# ------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1
_MAGIC = b"SRNNCKPT"
_PRECISIONS = {"float64": "<f8", "float32": "<f4"}


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Write ``arrays`` as manifest + little-endian blob.

    Layout: 8-byte magic, uint32 format version, uint64 manifest length,
    UTF-8 JSON manifest, raw scalars.  Offsets in the manifest are relative
    to the start of the blob.
    """
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        precision = "float32" if a.dtype == np.float32 else "float64"
        raw = np.ascontiguousarray(a, dtype=_PRECISIONS[precision]).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "precision": precision,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"format_version": CHECKPOINT_VERSION, "entries": entries,
                           "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(blob[20:20 + mlen].decode("utf-8"))
    base = 20 + mlen
    arrays = {}
    for e in manifest["entries"]:
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=_PRECISIONS[e["precision"]]).reshape(
            e["shape"]).astype(e["precision"])
    return arrays, manifest.get("meta", {})


# --------------------------------------------------------- gradient checking

def grad_check(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], eps: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps tensors to a scalar tensor.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)`` per element.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    backward(out)
    worst = 0.0
    for i, (a, t) in enumerate(zip(arrays, ts)):
        analytic = np.zeros_like(a) if t.grad is None else t.grad
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = fn(*[Tensor(x) for x in arrays]).item()
            flat[j] = orig - eps
            fm = fn(*[Tensor(x) for x in arrays]).item()
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom, initial=0.0)))
    return worst
