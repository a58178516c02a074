"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is an :class:`Op` subclass holding four static
methods: ``shape`` (output extents), ``forward`` (numpy evaluation returning
the output and whatever the backward pass needs), ``backward`` (vector-Jacobian
product) and ``macs`` (multiply-accumulate count).  Calls go through
:func:`apply`, which evaluates the op and, when a :class:`Tape` is active and
some input requires a gradient, appends a node to the tape.  Because nodes are
appended in execution order the tape is topologically sorted by construction,
and :meth:`Tape.backward` simply walks it in reverse.

Two further execution modes share the same op table:

* ``meta()`` propagates shapes only (zero-stride placeholder data), which is
  how the profiler counts MACs of full-size models without computing them.
* ``count_macs()`` tallies per-module MAC counts during any forward pass.
"""

from __future__ import annotations

import contextlib
import math
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPES = (np.float32, np.float64)

_state = threading.local()


def _stack(name: str) -> list:
    stack = getattr(_state, name, None)
    if stack is None:
        stack = []
        setattr(_state, name, stack)
    return stack


def current_tape() -> "Tape | None":
    stack = _stack("tapes")
    return stack[-1] if stack else None


def meta_active() -> bool:
    return bool(_stack("meta"))


@contextlib.contextmanager
def meta():
    """Shape-only execution: ops produce placeholder data and record nothing."""
    _stack("meta").append(True)
    try:
        yield
    finally:
        _stack("meta").pop()


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording inside the block."""
    _stack("tapes").append(None)
    try:
        yield
    finally:
        _stack("tapes").pop()


@contextlib.contextmanager
def module_scope(path: str):
    _stack("scopes").append(path)
    try:
        yield
    finally:
        _stack("scopes").pop()


class MacCounter:
    """MACs grouped by op kind and by the innermost module path."""

    def __init__(self) -> None:
        self.by_path: dict[str, int] = defaultdict(int)
        self.by_kind: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.by_path.values())

    def add(self, kind: str, macs: int) -> None:
        scopes = _stack("scopes")
        self.by_path[scopes[-1] if scopes else ""] += macs
        self.by_kind[kind] += macs


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _stack("counters").append(counter)
    try:
        yield counter
    finally:
        _stack("counters").pop()


class Tensor:
    """Rank 1-4 float32/float64 array that can take part in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_nid", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 4:
            raise ShapeError(f"tensor rank must be 1-4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._nid = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t._nid = -1
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def relu(self) -> "Tensor":
        return relu(self)


class Parameter(Tensor):
    """Trainable tensor; ``path`` is assigned when the owning model is built."""

    __slots__ = ("path",)

    def __init__(self, data: Any, dtype: Any = None, path: str = "") -> None:
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.path = path

    def __repr__(self) -> str:
        return f"Parameter({self.path!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    attrs: dict
    saved: Any
    requires_grad: bool
    op: type | None = None
    value: np.ndarray | None = None
    tensor: Tensor | None = None


@dataclass
class Tape:
    """Execution record in topological order.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended as nodes.
    """

    nodes: list[Node] = field(default_factory=list)
    outputs: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._input_ids: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack("tapes").pop()

    def _input_node(self, t: Tensor) -> int:
        if t._tape is self:
            return t._nid
        key = id(t)
        nid = self._input_ids.get(key)
        if nid is None:
            kind = "leaf" if t.requires_grad else "const"
            nid = len(self.nodes)
            self.nodes.append(Node(kind, (), {}, None, t.requires_grad, value=t.data, tensor=t))
            self._input_ids[key] = nid
        return nid

    def record(self, op: type, inputs: Sequence[Tensor], attrs: dict, saved: Any, out: Tensor) -> None:
        parents = tuple(self._input_node(t) for t in inputs)
        out._tape = self
        out._nid = len(self.nodes)
        out.requires_grad = True
        self.nodes.append(Node(op.kind, parents, attrs, saved, True, op=op, value=out.data))

    def mark_output(self, t: Tensor) -> None:
        if t._tape is not self:
            raise ContractError("tensor was not produced on this tape")
        self.outputs.append(t._nid)

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded node from the current leaf values.

        Returns the recomputed arrays of the marked outputs.
        """
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op is None:
                values.append(node.tensor.data)
            else:
                out, _ = node.op.forward(*(values[p] for p in node.parents), **node.attrs)
                values.append(out)
        return [values[i] for i in self.outputs]

    def node_of(self, t: Tensor) -> int | None:
        """Node id of ``t`` on this tape, or None if it was never used."""
        if t._tape is self:
            return t._nid
        return self._input_ids.get(id(t))

    def reevaluate(self, overrides: dict[int, np.ndarray], output: int) -> np.ndarray:
        """Value of node ``output`` with some input nodes replaced.

        Only nodes downstream of the overridden inputs are recomputed; the rest
        reuse the values recorded during the original pass.
        """
        vals = dict(overrides)
        start = min(overrides) if overrides else output + 1
        nodes = self.nodes
        for nid in range(start, output + 1):
            node = nodes[nid]
            if node.op is None or not any(p in vals for p in node.parents):
                continue
            args = [vals[p] if p in vals else nodes[p].value for p in node.parents]
            vals[nid] = node.op.forward(*args, **node.attrs)[0]
        return vals.get(output, nodes[output].value)

    def backward(self, root: Tensor) -> None:
        if root._tape is not self:
            raise ContractError("root was not produced on this tape")
        grads: list[np.ndarray | None] = [None] * (root._nid + 1)
        grads[root._nid] = np.ones_like(root.data)
        for nid in range(root._nid, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            grads[nid] = None
            node = self.nodes[nid]
            if node.op is None:
                if node.kind == "leaf":
                    t = node.tensor
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            needs = tuple(self.nodes[p].requires_grad for p in node.parents)
            pgrads = node.op.backward(node.saved, g, needs, **node.attrs)
            for p, pg, need in zip(node.parents, pgrads, needs):
                if need and pg is not None:
                    grads[p] = pg if grads[p] is None else grads[p] + pg


class Op:
    """Base class for differentiable operations; see the module docstring."""

    kind = "op"

    @staticmethod
    def shape(*shapes, **attrs) -> tuple[int, ...]:
        return shapes[0]

    @staticmethod
    def forward(*xs, **attrs):
        raise NotImplementedError

    @staticmethod
    def backward(saved, g, needs, **attrs):
        raise NotImplementedError

    @staticmethod
    def macs(*shapes, **attrs) -> int:
        return 0


OPS: dict[str, type[Op]] = {}


def register(cls: type[Op]) -> type[Op]:
    OPS[cls.kind] = cls
    return cls


def apply(op: type[Op], *inputs: Tensor, **attrs) -> Tensor:
    shapes = [t.shape for t in inputs]
    counters = _stack("counters")
    if counters:
        n = op.macs(*shapes, **attrs)
        if n:
            for c in counters:
                c.add(op.kind, n)
    if meta_active():
        out_shape = op.shape(*shapes, **attrs)
        return Tensor._wrap(np.broadcast_to(np.zeros((), inputs[0].dtype), out_shape))
    out, saved = op.forward(*(t.data for t in inputs), **attrs)
    result = Tensor._wrap(out)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, attrs, saved, result)
    return result


def _same_shape(name: str, a: tuple, b: tuple) -> None:
    if a != b:
        raise ShapeError(f"{name}: shape mismatch {a} vs {b}")


# ---------------------------------------------------------------- elementwise


@register
class Add(Op):
    kind = "add"

    @staticmethod
    def shape(a, b):
        _same_shape("add", a, b)
        return a

    @staticmethod
    def forward(a, b):
        _same_shape("add", a.shape, b.shape)
        return a + b, None

    @staticmethod
    def backward(saved, g, needs):
        return g, g


@register
class Sub(Op):
    kind = "sub"

    @staticmethod
    def shape(a, b):
        _same_shape("sub", a, b)
        return a

    @staticmethod
    def forward(a, b):
        _same_shape("sub", a.shape, b.shape)
        return a - b, None

    @staticmethod
    def backward(saved, g, needs):
        return g, -g


@register
class Mul(Op):
    kind = "mul"

    @staticmethod
    def shape(a, b):
        _same_shape("mul", a, b)
        return a

    @staticmethod
    def forward(a, b):
        _same_shape("mul", a.shape, b.shape)
        return a * b, (a, b)

    @staticmethod
    def backward(saved, g, needs):
        a, b = saved
        return (g * b if needs[0] else None), (g * a if needs[1] else None)


@register
class Scale(Op):
    kind = "scale"

    @staticmethod
    def forward(a, s):
        return a * a.dtype.type(s), None

    @staticmethod
    def backward(saved, g, needs, s):
        return (g * g.dtype.type(s),)


@register
class AddScalar(Op):
    kind = "add_scalar"

    @staticmethod
    def forward(a, c):
        return a + a.dtype.type(c), None

    @staticmethod
    def backward(saved, g, needs, c):
        return (g,)


@register
class Relu(Op):
    kind = "relu"

    @staticmethod
    def forward(a):
        mask = a > 0
        return a * mask, mask

    @staticmethod
    def backward(mask, g, needs):
        # gradient at exactly 0 is 0
        return (g * mask,)


@register
class Sqrt(Op):
    kind = "sqrt"

    @staticmethod
    def forward(a):
        out = np.sqrt(a)
        return out, out

    @staticmethod
    def backward(out, g, needs):
        return (g * 0.5 / out,)


@register
class Abs(Op):
    kind = "abs"

    @staticmethod
    def forward(a):
        return np.abs(a), np.sign(a)

    @staticmethod
    def backward(sign, g, needs):
        return (g * sign,)


@register
class Sum(Op):
    kind = "sum"

    @staticmethod
    def shape(a):
        return (1,)

    @staticmethod
    def forward(a):
        return np.sum(a, dtype=a.dtype).reshape(1), a.shape

    @staticmethod
    def backward(shape, g, needs):
        return (np.broadcast_to(g.reshape(()), shape).copy(),)


@register
class Mean(Op):
    kind = "mean"

    @staticmethod
    def shape(a):
        return (1,)

    @staticmethod
    def forward(a):
        return np.mean(a, dtype=a.dtype).reshape(1), a.shape

    @staticmethod
    def backward(shape, g, needs):
        n = math.prod(shape)
        return (np.full(shape, g.reshape(()) / n, dtype=g.dtype),)


@register
class ChannelMul(Op):
    """``x * w`` with ``w`` of length C broadcast along axis 1 of ``x``."""

    kind = "channel_mul"

    @staticmethod
    def shape(x, w):
        if len(w) != 1 or w[0] != x[1]:
            raise ShapeError(f"channel_mul: weight shape {w} does not match channels of {x}")
        return x

    @staticmethod
    def forward(x, w):
        ChannelMul.shape(x.shape, w.shape)
        wb = w.reshape((1, -1) + (1,) * (x.ndim - 2))
        return x * wb, (x, wb)

    @staticmethod
    def backward(saved, g, needs):
        x, wb = saved
        dx = g * wb if needs[0] else None
        dw = None
        if needs[1]:
            axes = (0,) + tuple(range(2, x.ndim))
            dw = np.sum(g * x, axis=axes)
        return dx, dw


# ------------------------------------------------------------- shape plumbing


@register
class Reshape(Op):
    kind = "reshape"

    @staticmethod
    def shape(a, shape):
        if math.prod(a) != math.prod(shape):
            raise ShapeError(f"reshape: cannot view {a} as {shape}")
        return tuple(shape)

    @staticmethod
    def forward(a, shape):
        Reshape.shape(a.shape, shape)
        return a.reshape(shape), a.shape

    @staticmethod
    def backward(in_shape, g, needs, shape):
        return (g.reshape(in_shape),)


@register
class SwapLast(Op):
    kind = "swap_last"

    @staticmethod
    def shape(a):
        return a[:-2] + (a[-1], a[-2])

    @staticmethod
    def forward(a):
        return np.swapaxes(a, -1, -2), None

    @staticmethod
    def backward(saved, g, needs):
        return (np.swapaxes(g, -1, -2),)


@register
class Concat(Op):
    kind = "concat"

    @staticmethod
    def shape(*shapes, axis=1):
        ref = shapes[0]
        for s in shapes[1:]:
            if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis):
                raise ShapeError(f"concat: incompatible shapes {ref} and {s} along axis {axis}")
        out = list(ref)
        out[axis] = sum(s[axis] for s in shapes)
        return tuple(out)

    @staticmethod
    def forward(*xs, axis=1):
        Concat.shape(*(x.shape for x in xs), axis=axis)
        if len(xs) == 1:
            return xs[0], [xs[0].shape[axis]]
        return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]

    @staticmethod
    def backward(sizes, g, needs, axis=1):
        out, start = [], 0
        for n, need in zip(sizes, needs):
            if need:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + n)
                out.append(g[tuple(idx)])
            else:
                out.append(None)
            start += n
        return tuple(out)


@register
class Slice(Op):
    kind = "slice"

    @staticmethod
    def shape(a, axis, start, stop):
        if not 0 <= start < stop <= a[axis]:
            raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a}")
        out = list(a)
        out[axis] = stop - start
        return tuple(out)

    @staticmethod
    def forward(a, axis, start, stop):
        Slice.shape(a.shape, axis, start, stop)
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, stop)
        return a[tuple(idx)], a.shape

    @staticmethod
    def backward(in_shape, g, needs, axis, start, stop):
        full = np.zeros(in_shape, dtype=g.dtype)
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(start, stop)
        full[tuple(idx)] = g
        return (full,)


# ------------------------------------------------------------- linear algebra


@register
class MatMul(Op):
    """Batched ``a @ b`` over matching leading extents."""

    kind = "matmul"

    @staticmethod
    def shape(a, b):
        if len(a) < 2 or len(a) != len(b) or a[:-2] != b[:-2] or a[-1] != b[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a} and {b}")
        return a[:-1] + (b[-1],)

    @staticmethod
    def forward(a, b):
        MatMul.shape(a.shape, b.shape)
        return np.matmul(a, b), (a, b)

    @staticmethod
    def backward(saved, g, needs):
        a, b = saved
        da = np.matmul(g, np.swapaxes(b, -1, -2)) if needs[0] else None
        db = np.matmul(np.swapaxes(a, -1, -2), g) if needs[1] else None
        return da, db

    @staticmethod
    def macs(a, b):
        return math.prod(a[:-2]) * a[-2] * a[-1] * b[-1]


@register
class Softmax(Op):
    """Softmax over the last axis, stabilized by max subtraction."""

    kind = "softmax"

    @staticmethod
    def forward(a):
        e = np.exp(a - a.max(axis=-1, keepdims=True))
        s = e / e.sum(axis=-1, keepdims=True)
        return s, s

    @staticmethod
    def backward(s, g, needs):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)


# ------------------------------------------------------------ public wrappers


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply(Add, a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply(Sub, a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply(Mul, a, b)


def scale(a: Tensor, s: float) -> Tensor:
    return apply(Scale, a, s=float(s))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return apply(AddScalar, a, c=float(c))


def relu(a: Tensor) -> Tensor:
    return apply(Relu, a)


def sqrt(a: Tensor) -> Tensor:
    return apply(Sqrt, a)


def absolute(a: Tensor) -> Tensor:
    return apply(Abs, a)


def sum_all(a: Tensor) -> Tensor:
    return apply(Sum, a)


def mean(a: Tensor) -> Tensor:
    return apply(Mean, a)


def channel_mul(x: Tensor, w: Tensor) -> Tensor:
    return apply(ChannelMul, x, w)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return apply(Reshape, a, shape=tuple(int(s) for s in shape))


def swap_last(a: Tensor) -> Tensor:
    return apply(SwapLast, a)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return apply(Concat, *xs, axis=1)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return apply(Slice, x, axis=1, start=int(start), stop=int(stop))


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to channel extent {x.shape[1]}")
    out, start = [], 0
    for n in sizes:
        out.append(slice_channels(x, start, start + n))
        start += n
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply(MatMul, a, b)


def softmax_rows(a: Tensor) -> Tensor:
    return apply(Softmax, a)


# ----------------------------------------------------------------- gradients


def backward(root: Tensor, params: Iterable[Parameter] | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    ``params`` (optional) lists parameters that must end up with a gradient;
    any of them not reached from ``root`` receives a zero-filled one.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a one-element root, got shape {root.shape}")
    if root._tape is not None:
        root._tape.backward(root)
    elif root.requires_grad:
        g = np.ones_like(root.data)
        root.grad = g if root.grad is None else root.grad + g
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def finite_diff(
    f: Callable[[Tensor], Any],
    x: Tensor,
    h: float = 1e-5,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to ``x``.

    ``x`` is perturbed in place (and restored), so it may be a parameter that
    ``f`` reads indirectly.  With ``indices`` only those entries are probed and
    a 1-D array in the same order is returned.
    """
    if h <= 0:
        raise ContractError("finite_diff step must be positive")

    def value() -> float:
        with no_grad():
            out = f(x)
        return float(out.item() if isinstance(out, Tensor) else out)

    original = x.data
    work = np.array(original, dtype=np.float64)
    x.data = work
    try:
        idx_list = list(np.ndindex(work.shape)) if indices is None else [tuple(i) for i in indices]
        grads = np.empty(len(idx_list), dtype=np.float64)
        for n, idx in enumerate(idx_list):
            base = work[idx]
            work[idx] = base + h
            up = value()
            work[idx] = base - h
            down = value()
            work[idx] = base
            grads[n] = (up - down) / (2.0 * h)
    finally:
        x.data = original
    return grads.reshape(work.shape) if indices is None else grads
