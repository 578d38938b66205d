"""
Dense tensors with reverse-mode automatic differentiation.

Everything numeric in the stack flows through ``Tensor``: a row-major numpy
array plus the closure that maps an output gradient back to its inputs.
Shapes are checked on every operation and only scalar-with-tensor
broadcasting happens implicitly; anything else goes through ``expand``.

Training runs in 32-bit floats. ``precision("float64")`` switches newly
created tensors to 64-bit, which the gradient checker relies on.
"""

import hashlib
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from errors import GraphError, NumericError, ShapeError, VocabularyError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_grad_state = threading.local()

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def get_default_dtype():
    return _default_dtype


def set_default_dtype(name: str):
    """Switch the dtype used for newly created tensors ("float32" or "float64")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"Unsupported dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


@contextmanager
def precision(name: str):
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(np.dtype(previous).name)


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _check_finite(values: np.ndarray, op: str):
    if values.size and not np.isfinite(values).all():
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional float array that records how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        values = np.array(data, dtype=dtype or _default_dtype, order="C")
        if values.dtype not in (np.float32, np.float64):
            raise ShapeError(f"Tensor dtype must be float32 or float64, got {values.dtype}")
        _check_finite(values, "tensor")
        self.data = values
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(self)

    # operators -----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("Tensor / Tensor is not supported; multiply by a reciprocal explicitly")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant_like(values: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(values, dtype=like.dtype)


def _contiguous(values) -> np.ndarray:
    values = np.asarray(values)
    return values if values.flags["C_CONTIGUOUS"] else np.ascontiguousarray(values)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    _check_finite(values, op)
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(values)
    out.grad = None
    out.name = None
    out.op = op
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward_fn if track else None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _scalar_pair(a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    """Lift a 0-d tensor to the other operand's shape; all other shapes must match."""
    if a.shape != b.shape:
        if a.ndim == 0:
            a = expand(a, b.shape)
        elif b.ndim == 0:
            b = expand(b, a.shape)
    return a, b


# elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _scalar_pair(a, b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _scalar_pair(a, b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _scalar_pair(a, b)
    _same_shape(a, b, "mul")
    av, bv = a.data, b.data
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: Scalar) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c: Scalar) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data + c, (a,), lambda g: (g,), "shift")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    av = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _make(out, (a,), lambda g: (g / av,), "log")


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return _make(np.where(active, a.data, 0).astype(a.dtype), (a,), lambda g: (g * active,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


# shape ---------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over broadcast axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from exc
    source = a.shape
    return _make(out.copy(), (a,), lambda g: (_unbroadcast(g, source),), "expand")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    source = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {source} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(source),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    source = a.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, source).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        _same_shape(first, t, "stack")
    out = np.stack([t.data for t in tensors], axis=axis)
    count = len(tensors)

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(count))

    return _make(out, tuple(tensors), backward_fn, "stack")


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-d weight shared across the leading axes of ``a`` or
    has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading extents differ {a.shape} @ {b.shape}")
    av, bv = a.data, b.data

    def backward_fn(g):
        grad_a = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            grad_b = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = np.swapaxes(av, -1, -2) @ g
        return grad_a, grad_b

    return _make(av @ bv, (a, b), backward_fn, "matmul")


# normalisation -------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    _check_finite(a.data, "softmax input")
    out = special.softmax(a.data, axis=axis).astype(a.dtype)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward_fn, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite(a.data, "log_softmax input")
    out = special.log_softmax(a.data, axis=axis).astype(a.dtype)

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward_fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 1 or eps <= 0:
        raise ShapeError("layer_norm needs a non-empty last axis and eps > 0")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {gain.shape} and {bias.shape}")
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    normed = centred * inv_std
    gv = gain.data

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        grad_gain = (g * normed).sum(axis=lead)
        grad_bias = g.sum(axis=lead)
        gn = g * gv
        grad_x = inv_std * (gn - gn.mean(axis=-1, keepdims=True)
                            - normed * (gn * normed).mean(axis=-1, keepdims=True))
        return grad_x, grad_gain, grad_bias

    return _make((normed * gv + bias.data).astype(x.dtype), (x, gain, bias), backward_fn, "layer_norm")


# indexing / masking --------------------------------------------------------

def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab, width = weight.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabularyError(f"token id out of range for vocabulary of size {vocab}")
    flat = ids.reshape(-1)

    def backward_fn(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, flat, g.reshape(-1, width))
        return (grad,)

    return _make(weight.data[ids], (weight,), backward_fn, "embedding")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where the constant boolean ``mask`` is True."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, a.dtype.type(value), a.data)
    return _make(out, (a,), lambda g: (np.where(mask, 0, g),), "masked_fill")


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise GraphError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# graph ---------------------------------------------------------------------

@dataclass
class ComputeGraph:
    """Topologically ordered record of the operations behind an output."""

    nodes: List[Tensor] = field(default_factory=list)
    leaves: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "ComputeGraph":
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        leaves = [n for n in order if n.is_leaf]
        return cls(nodes=order, leaves=leaves)


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(leaf) to every requires_grad leaf.

    Gradients accumulate into ``leaf.grad``; the returned map holds the
    contribution of this call only.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward called on a tensor that is not attached to a graph")
    graph = ComputeGraph.trace(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: Dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            g = g.astype(node.dtype, copy=False).reshape(node.shape)
            result[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return result


# parameters ----------------------------------------------------------------

class Parameters:
    """Ordered registry of named trainable leaves.

    ``assign`` is the only way values change after creation; the optimizer,
    fine-tuning and checkpoint loading all go through it.
    """

    def __init__(self):
        self._tensors: Dict[str, Tensor] = {}

    def create(self, name: str, values, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"Parameter {name!r} already exists")
        tensor = Tensor(values, requires_grad=trainable, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def items(self):
        return self._tensors.items()

    def count(self, prefix: str = "") -> int:
        return int(sum(t.size for n, t in self._tensors.items() if n.startswith(prefix)))

    def assign(self, name: str, values):
        tensor = self._tensors[name]
        values = np.asarray(values)
        if values.shape != tensor.shape:
            raise ShapeError(f"assign {name}: shape {values.shape} does not match {tensor.shape}")
        values = values.astype(tensor.dtype)
        _check_finite(values, f"assign {name}")
        tensor.data = _contiguous(values)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray], strict: bool = True):
        missing = [n for n in self._tensors if n not in arrays]
        unexpected = [n for n in arrays if n not in self._tensors]
        if strict and (missing or unexpected):
            raise ShapeError(f"state mismatch: missing={missing[:3]} unexpected={unexpected[:3]}")
        for name, tensor in self._tensors.items():
            if name in arrays and np.asarray(arrays[name]).shape != tensor.shape:
                raise ShapeError(f"state mismatch for {name}: {np.asarray(arrays[name]).shape} vs {tensor.shape}")
        for name in self._tensors:
            if name in arrays:
                self.assign(name, arrays[name])

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.grad = None

    def freeze(self):
        for tensor in self._tensors.values():
            tensor.requires_grad = False
            tensor.grad = None

    def gradients(self) -> Dict[str, np.ndarray]:
        """Current gradients, zeros for parameters the last loss did not reach."""
        return {
            n: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for n, t in self._tensors.items() if t.requires_grad
        }

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self._tensors.items():
            digest.update(name.encode())
            digest.update(str(tensor.dtype).encode())
            digest.update(str(tensor.shape).encode())
            digest.update(tensor.data.tobytes())
        return digest.hexdigest()
