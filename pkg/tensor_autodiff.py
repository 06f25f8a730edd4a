# dyns tensor core - dense tensors + tape-based reverse-mode autodiff
# numpy does the arithmetic; every differentiable op records one tape node
# holding its parents and a closure over the activations its backward needs.

import itertools
import logging
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import (
    ConfigError, ContractError, DimensionError, NonFiniteError, OracleError,
    ParseError,
)

logger = logging.getLogger(__name__)

# -----------------------------
# Config
# -----------------------------
DEFAULT_PRECISION = 64          # 64 or 32 bits
DEBUG = False                   # finite-check every op output when True
GRADCHECK_EPS = 1e-5
GRADCHECK_TOLERANCE = {64: 1e-4, 32: 1e-2}
REL_ERROR_FLOOR = 1e-8
LAYER_NORM_EPS = 1e-5

CHECKPOINT_MAGIC = b"DYNS"
CHECKPOINT_VERSION = 1

_DTYPES = {64: np.float64, 32: np.float32}
_dtype = _DTYPES[DEFAULT_PRECISION]
_debug = DEBUG

Scalar = Union[int, float]
GradientMap = Dict[str, np.ndarray]


def set_default_dtype(bits: int) -> None:
    """Switch the precision new tensors are created with (64 or 32)."""
    global _dtype
    if bits not in _DTYPES:
        raise ConfigError(f"precision must be 32 or 64, got {bits}")
    _dtype = _DTYPES[bits]


def default_precision() -> int:
    return 64 if _dtype == np.float64 else 32


def gradcheck_tolerance() -> float:
    return GRADCHECK_TOLERANCE[default_precision()]


def set_debug(flag: bool) -> None:
    global _debug
    _debug = bool(flag)


# -----------------------------
# Tensor
# -----------------------------
class Tensor:
    """
    Dense real array with optional gradient participation.

    `node_id` is (tape serial, node index) when the tensor was produced by a
    recorded op, else None. Data is never mutated by ops; optimizers swap in
    a fresh array.
    """

    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _dtype)
        if any(extent <= 0 for extent in arr.shape):
            raise ContractError(f"tensor extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: Optional[Tuple[int, int]] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False,
              node_id: Optional[Tuple[int, int]] = None, op: str = "") -> "Tensor":
        if _debug and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite output from op '{op}'")
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = node_id
        t.name = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, name=name)


def randn(rng: np.random.Generator, shape, scale: float = 1.0,
          requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, name=name)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Philox (counter-based, 64-bit) generator. `stream` indices split
    independent substreams, e.g. make_rng(seed, subject_index).
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=_dtype))


# -----------------------------
# Tape
# -----------------------------
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    op: str
    parents: Tuple[Optional[int], ...]
    backward: Optional[BackwardFn]
    shape: Tuple[int, ...]


class Tape:
    """
    Ordered record of executed ops. Parents always precede children, so one
    reverse sweep visits every node once.

    Use as a context manager; the active tape is per thread.
    """

    _serials = itertools.count(1)

    def __init__(self):
        self.serial = next(Tape._serials)
        self.nodes: List[_Node] = []
        self._leaves: Dict[int, Tuple[int, Tensor]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def watch(self, t: Tensor) -> int:
        """Register `t` as a leaf of this tape (idempotent)."""
        entry = self._leaves.get(id(t))
        if entry is not None and entry[1] is t:
            return entry[0]
        index = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, t.shape))
        self._leaves[id(t)] = (index, t)
        return index

    def lookup(self, t: Tensor) -> Optional[int]:
        """Node index of `t` on this tape, without registering anything."""
        if t.node_id is not None and t.node_id[0] == self.serial:
            return t.node_id[1]
        entry = self._leaves.get(id(t))
        if entry is not None and entry[1] is t:
            return entry[0]
        return None

    def index_of(self, t: Tensor) -> Optional[int]:
        index = self.lookup(t)
        if index is None and t.requires_grad:
            return self.watch(t)
        return index

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardFn) -> Tensor:
        parents = tuple(self.index_of(x) for x in inputs)
        if all(p is None for p in parents):
            return Tensor._wrap(out, op=op)
        index = len(self.nodes)
        self.nodes.append(_Node(op, parents, backward, out.shape))
        return Tensor._wrap(out, True, (self.serial, index), op=op)


_local = threading.local()


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardFn) -> Tensor:
    """
    Wrap `out` as the result of `op`. Recorded on the active tape only when a
    tape is open and some input participates in gradients.
    """
    tape = current_tape()
    if tape is None or not any(x.requires_grad for x in inputs):
        return Tensor._wrap(out, op=op)
    return tape.record(op, inputs, out, backward)


def backward(loss: Tensor, params: Union[Mapping[str, Tensor], Sequence[Tensor], None] = None,
             tape: Optional[Tape] = None) -> GradientMap:
    """
    Reverse sweep from a scalar loss. Returns one gradient array per parameter;
    parameters the loss does not depend on get zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or current_tape()
    named = _named_params(params)

    grads: List[Optional[np.ndarray]] = []
    if tape is not None and loss.node_id is not None and loss.node_id[0] == tape.serial:
        grads = [None] * len(tape.nodes)
        start = loss.node_id[1]
        grads[start] = np.ones(loss.shape, dtype=loss.data.dtype)
        for i in range(start, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = tape.nodes[i]
            if node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if parent is None or pg is None:
                    continue
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg

    result: GradientMap = {}
    for name, p in named.items():
        g = None
        if tape is not None and grads:
            index = tape.lookup(p)
            if index is not None:
                g = grads[index]
        result[name] = np.zeros_like(p.data) if g is None else g
    return result


def _named_params(params) -> Dict[str, Tensor]:
    if params is None:
        return {}
    if isinstance(params, Mapping):
        return dict(params)
    return {(p.name or f"param_{i}"): p for i, p in enumerate(params)}


# -----------------------------
# Broadcasting
# -----------------------------
def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    # equal shapes, scalars, or one shape a trailing suffix of the other
    if a.shape == b.shape or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    short, long_ = (a.shape, b.shape) if a.ndim <= b.ndim else (b.shape, a.shape)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: unsupported broadcast", a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# -----------------------------
# Elementwise ops
# -----------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return record_op("add", (a, b), a.data + b.data,
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return record_op("sub", (a, b), a.data - b.data,
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return record_op("mul", (a, b), ad * bd,
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return record_op("div", (a, b), out,
                     lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return record_op("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record_op("log", (a,), np.log(ad), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record_op("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record_op("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return record_op("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    return record_op("softplus", (a,), np.logaddexp(0.0, ad), lambda g: (g * _sigmoid(ad),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record_op("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul(a, Tensor._wrap(mask))


# -----------------------------
# Shape ops
# -----------------------------
def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return record_op("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(original),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return record_op("transpose", (a,), np.swapaxes(a.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return record_op("permute", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def _back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return record_op("getitem", (a,), a.data[index], _back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return record_op("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis),
                     lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    return record_op("stack", tensors, np.stack([t.data for t in tensors], axis=axis),
                     lambda g: tuple(np.moveaxis(g, axis, 0)))


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Repeat `a` `reps` times along axis 0 (weight sharing across groups)."""
    rows = a.shape[0]

    def _back(g):
        return (g.reshape((reps, rows) + g.shape[1:]).sum(axis=0),)

    return record_op("tile_rows", (a,), np.concatenate([a.data] * reps, axis=0), _back)


def broadcast_batch(a: Tensor, batch: Tuple[int, ...]) -> Tensor:
    """Prepend leading batch axes (explicit leading-batch broadcast)."""
    lead = tuple(range(len(batch)))
    return record_op("broadcast_batch", (a,), np.broadcast_to(a.data, batch + a.shape).copy(),
                     lambda g: (g.sum(axis=lead),))


# -----------------------------
# Reductions
# -----------------------------
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), _back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -----------------------------
# Linear algebra
# -----------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Batched matrix product over the last two axes. Either operand may be a
    plain 2-D matrix shared across the other's leading batch; otherwise the
    batch axes must match. A 1-D right operand is a column vector.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim == 1:
        column = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(column, column.shape[:-1])
    ad, bd = a.data, b.data
    if ad.ndim < 2:
        raise DimensionError("matmul needs a matrix on the left", ad.shape, bd.shape)
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError("matmul inner dimensions differ", ad.shape, bd.shape)
    if ad.ndim > 2 and bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError("matmul batch dimensions differ", ad.shape, bd.shape)
    out = np.matmul(ad, bd)

    def _back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        if ad.ndim == 2 and ga.ndim > 2:
            ga = ga.reshape((-1,) + ga.shape[-2:]).sum(axis=0)
        if bd.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape((-1,) + gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return record_op("matmul", (a, b), out, _back)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x Wᵀ + b with W stored (out, in). x may be a single vector."""
    x = _as_tensor(x)
    if x.ndim == 1:
        row = matmul(reshape(x, (1, x.shape[0])), transpose(weight))
        y = reshape(row, (weight.shape[0],))
        return add(y, bias) if bias is not None else y
    y = matmul(x, transpose(weight))
    return add(y, bias) if bias is not None else y


def symmetrize_upper(m: Tensor) -> Tensor:
    """
    Mirror the upper triangle (diagonal included) onto the lower one, so
    out[i, j] and out[j, i] are the same stored number.
    """
    n = m.shape[-1]
    upper = np.triu(np.ones((n, n), dtype=bool))
    strict = np.triu(np.ones((n, n), dtype=bool), 1)
    md = m.data
    out = np.where(upper, md, np.swapaxes(md, -1, -2))

    def _back(g):
        return (np.where(upper, g, 0.0) + np.where(strict, np.swapaxes(g, -1, -2), 0.0),)

    return record_op("symmetrize_upper", (m,), out, _back)


# -----------------------------
# Normalization / softmax
# -----------------------------
def _softmax(x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis, stabilized by subtracting the row max.
    `mask` (bool, broadcastable) marks admissible entries; masked entries get
    probability exactly 0.
    """
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        if not np.all(mask.any(axis=-1)):
            raise ContractError("softmax row with every entry masked")
    out = _softmax(a.data, mask)

    def _back(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return record_op("softmax_rows", (a,), out, _back)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return record_op("log_softmax", (a,), out,
                     lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def _back(g):
        dxhat = g * gd
        width = xd.shape[-1]
        dx = inv / width * (width * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return record_op("layer_norm", (x, gain, bias), out, _back)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Scaled dot-product attention over already-projected q, k, v of shape
    (..., L, d). `mask` (bool, broadcastable to (..., heads, Lq, Lk)) marks
    keys each query may attend to.
    """
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    head_dim = d // heads
    lead = q.shape[:-2]
    nl = len(lead)
    swap = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(t: Tensor) -> Tensor:
        return permute(reshape(t, lead + (t.shape[-2], heads, head_dim)), swap)

    scores = mul(matmul(split(q), transpose(split(k))), 1.0 / np.sqrt(head_dim))
    context = matmul(softmax_rows(scores, mask), split(v))
    return reshape(permute(context, swap), lead + (q.shape[-2], d))


# -----------------------------
# Convolution
# -----------------------------
def grouped_conv1d(x: Tensor, kernel_size: int, weights: Tensor, group_count: int,
                   bias: Optional[Tensor] = None, dilation: int = 1) -> Tensor:
    """
    Grouped temporal convolution over x of shape (..., T, C_in).

    weights: (C_out, C_in / group_count, kernel_size), torch layout.
    Zero padding keeps the output length equal to T; output channel
    g * (C_out / G) + j reads only input channels of group g.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if x.ndim < 2:
        raise DimensionError("grouped_conv1d expects (..., T, C)", x.shape)
    c_in = x.shape[-1]
    c_out = weights.shape[0]
    if group_count < 1 or c_in % group_count or c_out % group_count:
        raise ConfigError(f"group_count {group_count} must divide channels (in={c_in}, out={c_out})")
    cin_g, cout_g = c_in // group_count, c_out // group_count
    if weights.shape != (c_out, cin_g, kernel_size):
        raise DimensionError("grouped_conv1d weight shape", weights.shape, (c_out, cin_g, kernel_size))

    T = x.shape[-2]
    pad = dilation * (kernel_size - 1) // 2
    lead = x.shape[:-2]
    xp = np.pad(x.data, [(0, 0)] * len(lead) + [(pad, pad), (0, 0)])
    windows = np.stack([xp[..., j * dilation: j * dilation + T, :] for j in range(kernel_size)], axis=-1)
    windows = windows.reshape(lead + (T, group_count, cin_g, kernel_size))
    w = weights.data.reshape(group_count, cout_g, cin_g, kernel_size)
    out = np.einsum("...tgik,goik->...tgo", windows, w).reshape(lead + (T, c_out))

    inputs = [x, weights]
    if bias is not None:
        out = out + bias.data
        inputs.append(bias)

    def _back(g):
        gg = g.reshape(lead + (T, group_count, cout_g))
        gw = np.einsum("btgo,btgik->goik", gg.reshape((-1, T, group_count, cout_g)),
                       windows.reshape((-1, T, group_count, cin_g, kernel_size))).reshape(weights.shape)
        gwin = np.einsum("...tgo,goik->...tgik", gg, w).reshape(lead + (T, c_in, kernel_size))
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for j in range(kernel_size):
            gxp[..., j * dilation: j * dilation + T, :] += gwin[..., j]
        grads = [gxp[..., pad: pad + T, :], gw]
        if bias is not None:
            grads.append(g.reshape(-1, c_out).sum(axis=0))
        return grads

    return record_op("grouped_conv1d", inputs, out, _back)


# -----------------------------
# Recurrence
# -----------------------------
def linear_recurrence(A: Tensor, U: Tensor) -> Tensor:
    """
    s_t = A_t * s_{t-1} + U_t with s_0 = 0, elementwise over (..., T, d).
    One tape node; backward is the reverse-time scan of the adjoint.
    """
    if A.shape != U.shape:
        raise DimensionError("linear_recurrence operands differ", A.shape, U.shape)
    ad, ud = A.data, U.data
    T = ad.shape[-2]
    states = np.empty_like(ud)
    s = np.zeros(ud.shape[:-2] + ud.shape[-1:], dtype=ud.dtype)
    for t in range(T):
        s = ad[..., t, :] * s + ud[..., t, :]
        states[..., t, :] = s

    def _back(g):
        gA = np.empty_like(ad)
        gU = np.empty_like(ud)
        carry = np.zeros_like(s)
        for t in range(T - 1, -1, -1):
            carry = g[..., t, :] + carry
            gU[..., t, :] = carry
            prev = states[..., t - 1, :] if t > 0 else 0.0
            gA[..., t, :] = carry * prev
            carry = carry * ad[..., t, :]
        return gA, gU

    return record_op("linear_recurrence", (A, U), states, _back)


# -----------------------------
# Gradient oracle
# -----------------------------
def finite_diff_check(fn: Callable[[Dict[str, Tensor]], Tensor], params: Mapping[str, Tensor],
                      eps: float = GRADCHECK_EPS,
                      max_coords: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> float:
    """
    Max relative error between tape gradients and central differences.

    The error of one coordinate is |g - n| / max(|g|, 1e-8). With
    `max_coords`, each parameter is checked at that many random coordinates.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    params = dict(params)
    first, second = fn(params), fn(params)
    if not np.array_equal(first.data, second.data):
        raise OracleError("function is not deterministic: two evaluations differ")

    with Tape():
        loss = fn(params)
        analytic = backward(loss, params)

    worst = 0.0
    for name, p in params.items():
        original = p.data
        flat_count = original.size
        coords = np.arange(flat_count)
        if max_coords is not None and flat_count > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat_count, size=max_coords, replace=False)
        g_flat = analytic[name].reshape(-1)
        for c in coords:
            bumped = original.copy().reshape(-1)
            bumped[c] += eps
            p.data = bumped.reshape(original.shape)
            up = fn(params).item()
            bumped[c] -= 2 * eps
            p.data = bumped.reshape(original.shape)
            down = fn(params).item()
            p.data = original
            numeric = (up - down) / (2 * eps)
            err = abs(g_flat[c] - numeric) / max(abs(g_flat[c]), REL_ERROR_FLOOR)
            worst = max(worst, err)
    logger.debug("finite_diff_check max relative error %.3e", worst)
    return worst


# -----------------------------
# Checkpoints (DYNS container)
# -----------------------------
def save_checkpoint(path, params: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    """
    magic "DYNS", u32 version, then per parameter: u32 name length, UTF-8
    name, u32 rank, u64 extents, little-endian f64 payload.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ParseError("not a DYNS checkpoint (bad magic)", path)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path)

    params: Dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos: pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            payload = blob[pos: pos + 8 * count]
            if len(payload) != 8 * count:
                raise ParseError(f"truncated payload for '{name}'", path)
            params[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
            pos += 8 * count
    except struct.error as exc:
        raise ParseError(f"truncated checkpoint: {exc}", path) from exc
    return params


if __name__ == "__main__":
    rng = np.random.default_rng(7)
    w = parameter(rng.standard_normal(3), name="w")
    with Tape() as tape:
        loss = sum(square(w))
        grads = backward(loss, {"w": w})
    print(f"loss={loss.item():.4f} grad={grads['w']} (expected {2 * w.data})")
    err = finite_diff_check(lambda p: sum(square(p["w"])), {"w": w})
    print(f"finite-difference max relative error: {err:.2e}")
