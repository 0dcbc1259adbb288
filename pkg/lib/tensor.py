#!/usr/bin/env python3
"""
Dense tensor arithmetic with reverse-mode automatic differentiation

Tensors wrap contiguous row-major numpy arrays (float32 by default, float64 inside
`precision("float64")` or with TML_DTYPE=float64). Differentiable operations are
`Function` subclasses; when a `Graph` is active and any input requires a gradient,
the call is appended to the graph so `backward()` can replay it in reverse.
Outside a graph every operation runs tape-free.

Usage:
    w = randn([3, 3], rng=Rng(7), requires_grad=True)
    with Graph() as tape:
        loss = reduce_sum(mul(w, w))
        backward(loss)
    grad(w)  # == 2 * w
"""

import math
import threading
import zlib
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DomainError, ShapeError, SizeError

DTYPES = {
    'float32': np.float32,
    'float64': np.float64,
}

# Largest element count addressable with the int64 index type
MAX_ELEMENTS = np.iinfo(np.int64).max

_default_dtype = np.float32
_debug = False
_local = threading.local()


def set_default_dtype(name: str):
    """Sets the process-wide element type ('float32' or 'float64')"""
    global _default_dtype
    if name not in DTYPES:
        raise ValueError(f"Unsupported dtype: {name}. Use one of {sorted(DTYPES)}")
    _default_dtype = DTYPES[name]


def get_dtype():
    """Returns the element type for newly created tensors in this thread"""
    return getattr(_local, 'dtype', None) or _default_dtype


@contextmanager
def precision(name: str):
    """Temporarily switches the element type of tensors created in this thread"""
    if name not in DTYPES:
        raise ValueError(f"Unsupported dtype: {name}. Use one of {sorted(DTYPES)}")
    previous = getattr(_local, 'dtype', None)
    _local.dtype = DTYPES[name]
    try:
        yield
    finally:
        _local.dtype = previous


def set_debug(enabled: bool):
    """In debug mode every recorded op checks its result for NaN/Inf"""
    global _debug
    _debug = bool(enabled)


def check_shape(shape: Sequence[int]) -> Tuple[int, ...]:
    """Validates extents and returns the shape as a tuple"""
    if isinstance(shape, (int, np.integer)):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"Negative extent in shape {list(shape)}")
    if math.prod(shape) > MAX_ELEMENTS:
        raise SizeError(f"Shape {list(shape)} overflows the int64 index type")
    return shape


class Tensor:
    """N-dimensional array with an optional gradient slot and a handle into a graph"""

    __slots__ = ('data', 'grad', 'requires_grad', 'name', 'graph', 'node_id')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            raise TypeError("Tensor(data) expects an array, use .data of the source tensor")
        self.data = np.ascontiguousarray(np.asarray(data, dtype=get_dtype()))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.graph: Optional['Graph'] = None
        self.node_id: Optional[int] = None

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
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {list(self.shape)}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> 'Tensor':
        """Same values, no gradient tracking"""
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={list(self.shape)}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One recorded op: function, parent tensors, output tensor"""

    __slots__ = ('fn', 'parents', 'out')

    def __init__(self, fn: 'Function', parents: Tuple[Tensor, ...], out: Tensor):
        self.fn = fn
        self.parents = parents
        self.out = out


def _graph_stack() -> List['Graph']:
    stack = getattr(_local, 'graphs', None)
    if stack is None:
        stack = []
        _local.graphs = stack
    return stack


def active_graph() -> Optional['Graph']:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """
    Append-only tape of differentiable ops

    Use as a context manager; the graph is single-use: one backward() per forward pass.
    Graphs are confined to the thread that entered them.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.active = False
        self.consumed = False

    def __enter__(self):
        _graph_stack().append(self)
        self.active = True
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self.active = False
        return False

    def record(self, fn: 'Function', parents: Tuple[Tensor, ...], out: Tensor):
        out.graph = self
        out.node_id = len(self.nodes)
        self.nodes.append(Node(fn, parents, out))

    def backward(self, loss: Tensor):
        if self.consumed:
            raise ContractError("backward() already ran on this graph; record a new forward pass")
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
        if loss.graph is not self or loss.node_id is None:
            raise ContractError("loss is not recorded on this graph")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}

        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            parent_grads = node.fn.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent.graph is not self:
                    leaves[key] = parent

        # Whatever is left belongs to leaves (parameters, inputs)
        for key, g in grads.items():
            leaf = leaves.get(key)
            if leaf is None:
                continue
            leaf.grad = g if leaf.grad is None else leaf.grad + g

        self.consumed = True


def backward(loss: Tensor):
    """Fills the grad slot of every tensor on the loss's graph that reaches it"""
    if loss.graph is None:
        raise ContractError("loss is not on a tape; run the forward pass inside `with Graph():`")
    loss.graph.backward(loss)


def grad(t: Tensor) -> Tensor:
    """Returns the accumulated gradient of t as a tensor"""
    if t.grad is None:
        raise ContractError(f"No gradient recorded for {t!r}")
    return Tensor(t.grad)


class Function:
    """
    Base class for differentiable operations

    forward() receives numpy arrays and returns a numpy array; backward() receives
    dL/d(out) and returns one array (or None) per input.
    """

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        fn = cls(**kwargs)
        out = Tensor(fn.forward(*(t.data for t in tensors)))
        graph = active_graph()
        if graph is not None and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            graph.record(fn, tensors, out)
        if _debug and not np.all(np.isfinite(out.data)):
            raise DomainError(f"{cls.__name__} produced a non-finite value")
        return out


# ---------------------------------------------------------------------------
# Creation
# ---------------------------------------------------------------------------

class Rng:
    """
    Seeded random stream

    Bits come from numpy's PCG64 generator, whose output for a given seed is the
    same on every platform. Normal samples use Box-Muller over its uniform doubles:
    z0 = sqrt(-2 ln(1 - u1)) cos(2 pi u2), z1 = sqrt(-2 ln(1 - u1)) sin(2 pi u2).
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, tag: str) -> 'Rng':
        """Independent child stream keyed by a stable tag"""
        seq = np.random.SeedSequence([self.seed, zlib.crc32(tag.encode('utf-8'))])
        return Rng(int(seq.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(check_shape(shape))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = check_shape(shape)
        n = math.prod(shape)
        half = (n + 1) // 2
        u1 = self._gen.random(half)
        u2 = self._gen.random(half)
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return mean + std * z.reshape(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def create(kind: str, shape: Sequence[int], value: float = 0.0, rng: Optional[Rng] = None,
           mean: float = 0.0, std: float = 1.0, requires_grad: bool = False,
           name: Optional[str] = None) -> Tensor:
    """Creates a tensor of kind zeros|ones|full|randn"""
    shape = check_shape(shape)
    if kind == 'zeros':
        data = np.zeros(shape)
    elif kind == 'ones':
        data = np.ones(shape)
    elif kind == 'full':
        data = np.full(shape, value)
    elif kind == 'randn':
        if rng is None:
            raise ContractError("randn needs an Rng")
        data = rng.normal(shape, mean, std)
    else:
        raise ValueError(f"Unknown tensor kind: {kind}")
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False, name=None) -> Tensor:
    return create('zeros', shape, requires_grad=requires_grad, name=name)


def ones(shape, requires_grad=False, name=None) -> Tensor:
    return create('ones', shape, requires_grad=requires_grad, name=name)


def full(value: float, shape, requires_grad=False, name=None) -> Tensor:
    return create('full', shape, value=value, requires_grad=requires_grad, name=name)


def randn(shape, rng: Rng, mean: float = 0.0, std: float = 1.0, requires_grad=False, name=None) -> Tensor:
    return create('randn', shape, rng=rng, mean=mean, std=std, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def _check_binary(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # only scalar broadcasting exists
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


class Add(Function):
    def forward(self, a, b):
        _check_binary(a, b, 'add')
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_binary(a, b, 'sub')
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_binary(a, b, 'mul')
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class ScalarMul(Function):
    def __init__(self, c: float = 1.0):
        self.c = c

    def forward(self, a):
        return a * a.dtype.type(self.c)

    def backward(self, g):
        return (g * g.dtype.type(self.c),)


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype)

    def backward(self, g):
        return (np.where(self.mask, g, 0).astype(g.dtype),)


class LeakyReLU(Function):
    def __init__(self, alpha: float = 0.2):
        self.alpha = alpha

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, a * a.dtype.type(self.alpha))

    def backward(self, g):
        return (np.where(self.mask, g, g * g.dtype.type(self.alpha)),)


class Sigmoid(Function):
    def forward(self, a):
        # split by sign so exp never overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        self.out = out
        return out

    def backward(self, g):
        return (g * self.out * (1 - self.out),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return (g * (1 - self.out * self.out),)


class Clamp(Function):
    def __init__(self, low: float = 0.0, high: float = 1.0):
        self.low, self.high = low, high

    def forward(self, a):
        self.mask = (a >= self.low) & (a <= self.high)
        return np.clip(a, self.low, self.high)

    def backward(self, g):
        return (np.where(self.mask, g, 0).astype(g.dtype),)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return ScalarMul.apply(a, c=float(c))


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    return LeakyReLU.apply(a, alpha=alpha)


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply(a)


def tanh(a: Tensor) -> Tensor:
    return Tanh.apply(a)


def clamp(a: Tensor, low: float = 0.0, high: float = 1.0) -> Tensor:
    return Clamp.apply(a, low=low, high=high)


_BINARY_OPS = {'add': add, 'sub': sub, 'mul': mul}
_UNARY_OPS = {'relu': relu, 'sigmoid': sigmoid, 'tanh': tanh}


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None, *,
                scalar: float = 1.0, alpha: float = 0.2) -> Tensor:
    """Dispatches add|sub|mul|scalar-mul|relu|leaky-relu (plus sigmoid|tanh)"""
    if op in _BINARY_OPS:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY_OPS[op](a, b)
    if op == 'scalar-mul':
        return scalar_mul(a, scalar)
    if op == 'leaky-relu':
        return leaky_relu(a, alpha)
    if op in _UNARY_OPS:
        return _UNARY_OPS[op](a)
    raise ValueError(f"Unknown elementwise op: {op}")


# ---------------------------------------------------------------------------
# Linear algebra and layout
# ---------------------------------------------------------------------------

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul needs 2-D operands, got {list(a.shape)} and {list(b.shape)}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner extents differ: {list(a.shape)} x {list(b.shape)}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ self.b.T, self.a.T @ g


class Reshape(Function):
    def __init__(self, shape: Tuple[int, ...] = ()):
        self.shape = tuple(shape)

    def forward(self, a):
        self.src = a.shape
        if math.prod(self.shape) != a.size:
            raise ShapeError(f"reshape {list(a.shape)} -> {list(self.shape)} changes element count")
        return a.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.src),)


class Transpose(Function):
    def __init__(self, axes: Optional[Tuple[int, ...]] = None):
        self.axes = axes

    def forward(self, a):
        axes = self.axes if self.axes is not None else tuple(reversed(range(a.ndim)))
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"transpose axes {list(axes)} do not permute a {a.ndim}-D tensor")
        self.inverse = tuple(np.argsort(axes))
        return np.ascontiguousarray(a.transpose(axes))

    def backward(self, g):
        return (np.ascontiguousarray(g.transpose(self.inverse)),)


class ConcatChannels(Function):
    def forward(self, *arrays):
        first = arrays[0]
        for arr in arrays:
            if arr.ndim != 4 or arr.shape[0] != first.shape[0] or arr.shape[2:] != first.shape[2:]:
                raise ShapeError(
                    f"concat-channels needs matching N,H,W: {[list(a.shape) for a in arrays]}"
                )
        self.splits = np.cumsum([a.shape[1] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=1)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=1))


class ExpandBatch(Function):
    """Stacks n copies along a new leading axis"""

    def __init__(self, n: int = 1):
        self.n = n

    def forward(self, a):
        return np.broadcast_to(a, (self.n,) + a.shape).copy()

    def backward(self, g):
        return (g.sum(axis=0),)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(int(s) for s in shape))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.size,))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(a, axes=tuple(axes) if axes is not None else None)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return ConcatChannels.apply(*tensors)


def expand_batch(a: Tensor, n: int) -> Tensor:
    return ExpandBatch.apply(a, n=int(n))


# ---------------------------------------------------------------------------
# Softmax and reductions
# ---------------------------------------------------------------------------

class Softmax(Function):
    def __init__(self, axis: int = -1):
        self.axis = axis

    def forward(self, a):
        shifted = a - a.max(axis=self.axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=self.axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


class Sum(Function):
    def forward(self, a):
        self.src = a.shape
        return np.asarray(a.sum(dtype=a.dtype))

    def backward(self, g):
        return (np.full(self.src, g.reshape(()), dtype=g.dtype),)


class Mean(Function):
    def forward(self, a):
        if a.size == 0:
            raise DomainError("mean of an empty tensor")
        self.src = a.shape
        self.n = a.size
        return np.asarray(a.sum(dtype=a.dtype) / a.dtype.type(self.n))

    def backward(self, g):
        return (np.full(self.src, g.reshape(()) / self.n, dtype=g.dtype),)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def reduce_sum(a: Tensor) -> Tensor:
    return Sum.apply(a)


def reduce_mean(a: Tensor) -> Tensor:
    return Mean.apply(a)


def reduce(op: str, a: Tensor) -> Tensor:
    if op == 'sum':
        return reduce_sum(a)
    if op == 'mean':
        return reduce_mean(a)
    raise ValueError(f"Unknown reduction: {op}")


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def default_step() -> float:
    return 1e-3 if get_dtype() == np.float32 else 1e-6


def central_difference(f: Callable[[Tensor], Tensor], x: Tensor, index: int,
                       h: Optional[float] = None) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for one flat coordinate i"""
    h = default_step() if h is None else h
    plus = x.data.copy()
    minus = x.data.copy()
    plus.flat[index] += h
    minus.flat[index] -= h
    f_plus = f(Tensor(plus)).item()
    f_minus = f(Tensor(minus)).item()
    return (f_plus - f_minus) / (2.0 * h)


def finite_diff(f: Callable[[Tensor], Tensor], x: Tensor, h: Optional[float] = None) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time"""
    out = np.zeros(x.shape, dtype=np.float64)
    for i in range(x.size):
        out.flat[i] = central_difference(f, x, i, h)
    return Tensor(out)


def relative_error(a: Union[float, np.ndarray], b: Union[float, np.ndarray]) -> float:
    """max |a - b| / max(|a|, |b|, 1e-6) elementwise"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
