"""
Dense Tensors with Reverse-Mode Differentiation
float64 numpy storage, a per-pass graph, and the optimizer used for training
"""
import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import ContractException, DimensionException

logger = logging.getLogger(__name__)

_grad_enabled = True

ArrayLike = Union[np.ndarray, Sequence, float, int]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block"""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_array(data: ArrayLike) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = arr.copy()
    return arr


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) for i in items)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Dense float64 array that records the operations producing it.

    Only tensors with requires_grad take part in the graph; everything else
    is treated as a constant.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[], None]] = None

    @staticmethod
    def _lift(other: Union["Tensor", ArrayLike]) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def _child(self, data: np.ndarray, parents: Tuple["Tensor", ...], op: str) -> "Tensor":
        out = Tensor(data, name=op)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
        return out

    def _set_backward(self, fn: Callable[[], None]) -> None:
        if self.requires_grad:
            self._backward = fn

    @staticmethod
    def _accumulate(t: "Tensor", g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            t.grad = t.grad + g

    # properties

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractException(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # elementwise arithmetic

    def __add__(self, other):
        other = self._lift(other)
        out = self._child(self.data + other.data, (self, other), "add")

        def _backward():
            Tensor._accumulate(self, _unbroadcast(out.grad, self.shape))
            Tensor._accumulate(other, _unbroadcast(out.grad, other.shape))

        out._set_backward(_backward)
        return out

    __radd__ = __add__

    def __neg__(self):
        out = self._child(-self.data, (self,), "neg")

        def _backward():
            Tensor._accumulate(self, -out.grad)

        out._set_backward(_backward)
        return out

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        out = self._child(self.data * other.data, (self, other), "mul")

        def _backward():
            Tensor._accumulate(self, _unbroadcast(out.grad * other.data, self.shape))
            Tensor._accumulate(other, _unbroadcast(out.grad * self.data, other.shape))

        out._set_backward(_backward)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out = self._child(self.data / other.data, (self, other), "div")

        def _backward():
            Tensor._accumulate(self, _unbroadcast(out.grad / other.data, self.shape))
            Tensor._accumulate(other, _unbroadcast(-out.grad * self.data / (other.data ** 2), other.shape))

        out._set_backward(_backward)
        return out

    def __pow__(self, power: float):
        out = self._child(self.data ** power, (self,), "pow")

        def _backward():
            Tensor._accumulate(self, out.grad * power * self.data ** (power - 1))

        out._set_backward(_backward)
        return out

    def exp(self) -> "Tensor":
        out = self._child(np.exp(self.data), (self,), "exp")

        def _backward():
            Tensor._accumulate(self, out.grad * out.data)

        out._set_backward(_backward)
        return out

    def log(self) -> "Tensor":
        out = self._child(np.log(self.data), (self,), "log")

        def _backward():
            Tensor._accumulate(self, out.grad / self.data)

        out._set_backward(_backward)
        return out

    def tanh(self) -> "Tensor":
        out = self._child(np.tanh(self.data), (self,), "tanh")

        def _backward():
            Tensor._accumulate(self, out.grad * (1.0 - out.data ** 2))

        out._set_backward(_backward)
        return out

    def sigmoid(self) -> "Tensor":
        out = self._child(0.5 * (1.0 + np.tanh(0.5 * self.data)), (self,), "sigmoid")

        def _backward():
            Tensor._accumulate(self, out.grad * out.data * (1.0 - out.data))

        out._set_backward(_backward)
        return out

    def gelu(self) -> "Tensor":
        """tanh approximation of GELU"""
        c = np.sqrt(2.0 / np.pi)
        x = self.data
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out = self._child(0.5 * x * (1.0 + t), (self,), "gelu")

        def _backward():
            d_inner = c * (1.0 + 3 * 0.044715 * x ** 2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
            Tensor._accumulate(self, out.grad * local)

        out._set_backward(_backward)
        return out

    # reductions

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        out = self._child(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), "sum")

        def _backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            Tensor._accumulate(self, np.broadcast_to(g, self.shape))

        out._set_backward(_backward)
        return out

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # shape manipulation

    def reshape(self, *shape: int) -> "Tensor":
        out = self._child(self.data.reshape(shape), (self,), "reshape")

        def _backward():
            Tensor._accumulate(self, out.grad.reshape(self.shape))

        out._set_backward(_backward)
        return out

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise DimensionException("transpose", self.shape)
        out = self._child(self.data.T, (self,), "transpose")

        def _backward():
            Tensor._accumulate(self, out.grad.T)

        out._set_backward(_backward)
        return out

    def __getitem__(self, index) -> "Tensor":
        out = self._child(np.array(self.data[index]), (self,), "getitem")

        basic = _is_basic_index(index)

        def _backward():
            full = np.zeros_like(self.data)
            if basic:
                full[index] += out.grad
            else:
                np.add.at(full, index, out.grad)
            Tensor._accumulate(self, full)

        out._set_backward(_backward)
        return out

    def take_rows(self, indices: Sequence[int]) -> "Tensor":
        """Row gather, used for embedding lookup"""
        idx = np.asarray(indices, dtype=np.int64)
        return self[idx]

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of [m x k] and [k x n]

    Raises:
        DimensionException: operands are not 2-D or inner dimensions differ
    """
    a, b = Tensor._lift(a), Tensor._lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionException("matmul", a.shape, b.shape)
    out = a._child(a.data @ b.data, (a, b), "matmul")

    def _backward():
        Tensor._accumulate(a, out.grad @ b.data.T)
        Tensor._accumulate(b, a.data.T @ out.grad)

    out._set_backward(_backward)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction"""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = x._child(s, (x,), "softmax")

    def _backward():
        g = out.grad
        Tensor._accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    out._set_backward(_backward)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """log-softmax with log-sum-exp stabilization"""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    ls = shifted - lse
    out = x._child(ls, (x,), "log_softmax")

    def _backward():
        g = out.grad
        Tensor._accumulate(x, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    out._set_backward(_backward)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = tensors[0]._child(data, tuple(tensors), "concat")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward():
        for t, g in zip(tensors, np.split(out.grad, bounds, axis=axis)):
            Tensor._accumulate(t, g)

    out._set_backward(_backward)
    return out


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis"""
    tensors = [Tensor._lift(t) for t in tensors]
    out = tensors[0]._child(np.stack([t.data for t in tensors]), tuple(tensors), "stack")

    def _backward():
        for i, t in enumerate(tensors):
            Tensor._accumulate(t, out.grad[i])

    out._set_backward(_backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis of a [T x n] tensor"""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ((var + eps) ** 0.5) * gain + bias


@dataclass
class Graph:
    """Operations reachable from a loss, inputs before outputs"""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack_: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack_.append((parent, False))
        return cls(order)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if not n._parents]

    def run_backward(self) -> None:
        for node in reversed(self.nodes):
            if node._parents and node._backward is not None and node.grad is not None:
                node._backward()

    def release(self) -> None:
        """Drop interior nodes so the pass can be garbage collected"""
        for node in self.nodes:
            if node._parents:
                node._parents = ()
                node._backward = None
                node.grad = None
        self.nodes = []


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> None:
    """
    Populate .grad with d(loss)/d(leaf) for every requires_grad leaf.

    Args:
        loss: scalar tensor
        leaves: leaves to zero-fill when not reachable from loss

    Raises:
        ContractException: loss is not a scalar
    """
    if loss.data.size != 1:
        raise ContractException(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    graph.run_backward()
    reached = {id(n) for n in graph.nodes}
    if leaves is not None:
        for leaf in leaves:
            if id(leaf) not in reached or leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    graph.release()


def grad_check(
    f: Callable[[List[Tensor]], Tensor],
    params: List[Tensor],
    eps: float = 1e-5,
) -> float:
    """
    Compare reverse-mode gradients against central differences

    Args:
        f: maps the parameter list to a scalar tensor
        params: leaves with requires_grad
        eps: finite-difference step

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    if eps <= 0:
        raise ContractException("eps must be positive")
    loss = f(params)
    backward(loss, leaves=params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, g in zip(params, analytic):
            flat = p.data.reshape(-1)
            g_flat = g.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                f_plus = f(params).item()
                flat[i] = original - eps
                f_minus = f(params).item()
                flat[i] = original
                numeric = (f_plus - f_minus) / (2.0 * eps)
                err = abs(g_flat[i] - numeric) / max(1.0, abs(g_flat[i]))
                worst = max(worst, err)
    logger.debug(f"grad_check over {sum(p.size for p in params)} coordinates: max rel error {worst:.3e}")
    return worst


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay"""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)
