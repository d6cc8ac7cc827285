#  Licensed under the Apache License, Version 2.0 (the "License"); you may
#  not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#
# 	http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing,
#  software distributed under the License is distributed on an
#  "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
#  KIND, either express or implied.  See the License for the
#  specific language governing permissions and limitations
#  under the License.

"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` on the tensor it
produces. Node ids come from a per-thread counter so creation order is
a topological order of the graph and :func:`backward` can walk nodes in
reverse id order, visiting each exactly once.
"""

import contextlib
import itertools
import logging
import math
import threading
from typing import (
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import numpy.typing as npt

from ._exceptions import LayerDeltaError, ShapeError

_logger = logging.getLogger("layer_delta.tensor")

Array = npt.NDArray[Any]
TensorLike = Union["Tensor", Array, float, int, Sequence[Any]]
_BackwardFn = Callable[[Array], Tuple[Optional[Array], ...]]

_GELU_C = math.sqrt(2.0 / math.pi)


class _ThreadState(threading.local):
    def __init__(self) -> None:
        self.recording = True
        self.counter = itertools.count()


_state = _ThreadState()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disables graph recording for the current thread within the block."""
    previous = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = previous


def is_recording() -> bool:
    return _state.recording


class Node:
    """One recorded operation: its kind, its inputs and the rule that maps
    the gradient of its output to gradients of each input.
    """

    __slots__ = ("id", "op", "inputs", "backward_fn")

    def __init__(
        self, id: int, op: str, inputs: Tuple["Tensor", ...], backward_fn: _BackwardFn
    ):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"<Node id={self.id} op={self.op!r}>"


class Graph:
    """The nodes reachable from an output tensor in topological order."""

    __slots__ = ("nodes",)

    def __init__(self, nodes: List[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: "Tensor") -> "Graph":
        seen: Dict[int, Node] = {}
        stack = [output._node] if output._node is not None else []
        while stack:
            node = stack.pop()
            if node is None or node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(inp._node for inp in node.inputs if inp._node is not None)
        return cls(sorted(seen.values(), key=lambda n: n.id))

    def __iter__(self) -> Iterator[Node]:
        return iter(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """Dense row-major array of 64-bit floats with an optional gradient.

    The data of a tensor is never changed by an operation; only ``grad``
    accumulates. Optimizers are the one exception and update leaf
    parameters in place while holding exclusive access to them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data: TensorLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[Array] = None
        self._node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __add__(self, other: TensorLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: TensorLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: TensorLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: TensorLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: TensorLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: TensorLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: TensorLike) -> "Tensor":
        return matmul(self, other)


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    data: Array,
    op: str,
    inputs: Tuple[Tensor, ...],
    backward_fn: _BackwardFn,
) -> Tensor:
    out = Tensor(data)
    if _state.recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(next(_state.counter), op, inputs, backward_fn)
    return out


def _check_trailing_broadcast(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> None:
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    if short and tuple(long[len(long) - len(short) :]) != tuple(short):
        raise ShapeError(
            f"Can't broadcast shapes {a} and {b} for '{op}', "
            "only trailing-dimension broadcasting is supported"
        )


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    if not shape:
        return np.asarray(grad.sum())
    return grad.reshape((-1,) + tuple(shape)).sum(axis=0)


def _swap_last(x: Array) -> Array:
    return np.swapaxes(x, -1, -2)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product over the last two dimensions. ``a`` may carry leading
    batch dimensions; ``b`` either has the same batch dimensions or is 2-D.
    """
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.shape[-1] != b.shape[-2]
        or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2])
    ):
        raise ShapeError(f"matmul shape mismatch: {a.shape} and {b.shape}")
    a_shape, b_shape = a.shape, b.shape

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        ga = np.matmul(g, _swap_last(b.data)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.matmul(_swap_last(a.data), g)
            if len(b_shape) == 2 and len(a_shape) > 2:
                gb = gb.reshape((-1,) + tuple(b_shape)).sum(axis=0)
        return ga, gb

    return _result(np.matmul(a.data, b.data), "matmul", (a, b), backward)


def transpose(x: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permutes dimensions; by default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        perm = list(range(x.ndim))
        perm[-1], perm[-2] = perm[-2], perm[-1]
    else:
        perm = list(axes)
        if sorted(perm) != list(range(x.ndim)):
            raise ShapeError(f"Invalid permutation {tuple(perm)} for shape {x.shape}")
    inverse = list(np.argsort(perm))

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, perm), "transpose", (x,), backward)


def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"Can't reshape {original} into {tuple(shape)}", errors=(e,))

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        return (g.reshape(original),)

    return _result(data, "reshape", (x,), backward)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing_broadcast("add", a.shape, b.shape)

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing_broadcast("sub", a.shape, b.shape)

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing_broadcast("mul", a.shape, b.shape)

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, "mul", (a, b), backward)


def scale(x: TensorLike, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        return (g * factor,)

    return _result(x.data * factor, "scale", (x,), backward)


def _sigmoid(x: Array) -> Array:
    return np.exp(-np.logaddexp(0.0, -x))


def silu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    sig = _sigmoid(x.data)

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _result(x.data * sig, "silu", (x,), backward)


def gelu(x: TensorLike) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return _result(0.5 * x.data * (1.0 + t), "gelu", (x,), backward)


_ELEMENTWISE_OPS: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "silu": silu,
    "gelu": gelu,
    "scale": scale,
}


def elementwise(op: str, *operands: Any) -> Tensor:
    """Applies one of the named elementwise operations:
    ``add``, ``sub``, ``mul``, ``silu``, ``gelu`` or ``scale``.
    """
    try:
        fn = _ELEMENTWISE_OPS[op]
    except KeyError:
        options = "', '".join(sorted(_ELEMENTWISE_OPS))
        raise ValueError(
            f"Unknown elementwise op: '{op}'. Available options are: '{options}'"
        ) from None
    return fn(*operands)


def sum(x: TensorLike, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), "sum", (x,), backward)


def mean(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return scale(sum(x), 1.0 / max(1, x.size))


def rms_norm(x: TensorLike, weight: TensorLike, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalisation over the last dimension, then a
    per-feature gain.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm weight shape {weight.shape} doesn't fit {x.shape}")
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * inv

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        gw = _unbroadcast(g * normed, weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gn = g * weight.data
            gx = inv * (gn - normed * np.mean(gn * normed, axis=-1, keepdims=True))
        return gx, gw

    return _result(normed * weight.data, "rms_norm", (x, weight), backward)


def embedding(weight: TensorLike, ids: Array) -> Tensor:
    """Row lookup ``weight[ids]``."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _result(weight.data[ids], "embedding", (weight,), backward)


def _rotate_half(x: Array) -> Array:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _rotate_half_t(x: Array) -> Array:
    half = x.shape[-1] // 2
    return np.concatenate([x[..., half:], -x[..., :half]], axis=-1)


def rotary(
    x: TensorLike, cos: Array, sin: Array
) -> Tensor:
    """Rotary position encoding; ``cos``/``sin`` broadcast over the trailing
    ``(T, head_dim)`` dimensions of ``x``.
    """
    x = as_tensor(x)

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        return (g * cos + _rotate_half_t(g * sin),)

    return _result(x.data * cos + _rotate_half(x.data) * sin, "rotary", (x,), backward)


def softmax(x: TensorLike, causal: bool = False) -> Tensor:
    """Softmax over the last dimension. With ``causal=True`` the trailing two
    dimensions are treated as (query, key) and keys after the query get zero
    probability.
    """
    x = as_tensor(x)
    data = x.data
    if causal:
        t_q, t_k = data.shape[-2], data.shape[-1]
        future = np.triu(np.ones((t_q, t_k), dtype=bool), k=1 + t_k - t_q)
        data = np.where(future, -np.inf, data)
    shifted = data - data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=-1, keepdims=True)

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        return (probs * (g - np.sum(g * probs, axis=-1, keepdims=True)),)

    return _result(probs, "softmax", (x,), backward)


def dropout(x: TensorLike, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout. A no-op when ``p == 0`` or no generator is given."""
    x = as_tensor(x)
    if p <= 0.0 or rng is None:
        return x
    if p >= 1.0:
        raise ValueError("'p' must be smaller than 1")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        return (g * keep,)

    return _result(x.data * keep, "dropout", (x,), backward)


def backward(loss: Tensor) -> None:
    """Accumulates d(loss)/d(leaf) into ``.grad`` of every leaf that requires
    a gradient. Calling it twice without zeroing accumulates twice.
    """
    if loss.shape != ():
        raise LayerDeltaError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones((), dtype=np.float64)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    graph = Graph.from_output(loss)
    grads: Dict[int, Array] = {loss._node.id: seed}
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        for inp, inp_grad in zip(node.inputs, node.backward_fn(g)):
            if inp_grad is None or not inp.requires_grad:
                continue
            if inp._node is not None:
                prev = grads.get(inp._node.id)
                grads[inp._node.id] = inp_grad if prev is None else prev + inp_grad
            else:
                inp.grad = inp_grad.copy() if inp.grad is None else inp.grad + inp_grad
    _logger.debug("Backward pass visited %d nodes", len(graph))
