"""A small reverse-mode automatic differentiation engine over float64 arrays.

Values live in NumPy arrays; every op records its parents and a backward
closure.  ``backward`` walks the recorded graph once in reverse topological
order and then releases it, so a second call on the same graph raises.

Conventions:

* relu has gradient 0 at exactly 0;
* reductions use NumPy's pairwise summation over C-contiguous data, which is
  fixed for a given shape, so repeated runs produce identical bits;
* any op whose output contains NaN or Inf raises :class:`NonFiniteError`;
* no broadcasting, except the bias row in :func:`affine`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphConsumedError(RuntimeError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense float64 array that can take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_op", "_consumed", "_retain")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"
        self._consumed = False
        self._retain = False

    # -- structure -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep this non-leaf tensor's gradient after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar(g) -> float:
    return float(np.asarray(g).reshape(-1)[0])


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.full(like.shape, float(x)))
    return Tensor(x)


def make_op(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn,
            name: str) -> Tensor:
    """Wrap an op result and register its backward rule.

    ``backward`` maps the upstream gradient (same shape as ``data``) to one
    gradient per parent, or ``None`` for parents that take no gradient.
    Other modules use this to register custom rules such as straight-through.
    """
    with np.errstate(all="ignore"):
        data = np.ascontiguousarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output in {name}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = name
    out._consumed = False
    out._retain = False
    parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return make_op(np.where(mask, a.data, 0.0), (a,),
                   lambda g: (np.where(mask, g, 0.0),), "relu")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return make_op(out, (a,), lambda g: (g.reshape(old),), "reshape")


def stop_gradient(a: Tensor) -> Tensor:
    return a.detach()


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for a row batch ``x`` of shape (B, in) or (in,)."""
    if weight.data.ndim != 2 or bias.shape != (weight.shape[0],):
        raise ShapeError(f"affine: bad parameter shapes {weight.shape}, {bias.shape}")
    vector = x.data.ndim == 1
    xd = x.data.reshape(1, -1) if vector else x.data
    if xd.ndim != 2 or xd.shape[1] != weight.shape[1]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    wd = weight.data
    out = xd @ wd.T + bias.data

    def backward(g):
        g2 = g.reshape(1, -1) if vector else g
        gx = g2 @ wd
        return (gx.reshape(x.shape), g2.T @ xd, g2.sum(axis=0))

    return make_op(out.reshape(-1) if vector else out, (x, weight, bias), backward, "affine")


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``table[index]``; the gradient is scatter-added back in index order."""
    index = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("gather_rows: table must be 2-D")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError("gather_rows: index out of range")

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, index, g.reshape(index.shape + (table.shape[1],)))
        return (acc,)

    return make_op(table.data[index], (table,), backward, "gather_rows")


# -- reductions ----------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op(np.asarray(a.data.sum()), (a,),
                   lambda g: (np.full(shape, _scalar(g)),), "sum")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        n = a.size
        shape = a.shape
        return make_op(np.asarray(a.data.mean()), (a,),
                       lambda g: (np.full(shape, _scalar(g) / n),), "mean")
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.data.ndim for ax in axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / count,)

    return make_op(a.data.mean(axis=axes), (a,), backward, "mean_axis")


def squared_l2(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.asarray((ad * ad).sum()), (a,),
                   lambda g: (2.0 * _scalar(g) * ad,), "squared_l2")


# -- softmax family ------------------------------------------------------

def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    s = _softmax(a.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_op(s, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    ls = _log_softmax(a.data)
    s = np.exp(ls)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return make_op(ls, (a,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    ``logits`` is a (C,) vector with an integer label, or (B, C) with B labels.
    """
    vector = logits.data.ndim == 1
    x = logits.data.reshape(1, -1) if vector else logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 1-D or 2-D, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = x.shape
    if y.shape != (b,):
        raise ShapeError(f"cross_entropy: {y.size} labels for batch of {b}")
    if (y < 0).any() or (y >= c).any():
        raise ValueError(f"cross_entropy: label out of range [0, {c})")
    ls = _log_softmax(x)
    rows = np.arange(b)
    loss = -ls[rows, y].mean()

    def backward(g):
        grad = np.exp(ls)
        grad[rows, y] -= 1.0
        grad *= _scalar(g) / b
        return (grad.reshape(logits.shape),)

    return make_op(np.asarray(loss), (logits,), backward, "cross_entropy")


def kl_consistency(student: Tensor, teacher, temperature: float) -> Tensor:
    """``KL(softmax(student/T) || softmax(teacher/T))``, averaged over rows.

    The teacher side is a constant; only ``student`` receives gradient.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    t_data = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher, dtype=np.float64)
    if t_data.shape != student.shape:
        raise ShapeError(f"kl_consistency: {student.shape} vs {t_data.shape}")
    vector = student.data.ndim == 1
    s = student.data.reshape(1, -1) if vector else student.data
    t = t_data.reshape(1, -1) if vector else t_data
    T = float(temperature)
    log_p = _log_softmax(s / T)
    log_q = _log_softmax(t / T)
    p = np.exp(log_p)
    diff = log_p - log_q
    per_row = (p * diff).sum(axis=-1)
    b = s.shape[0]

    def backward(g):
        grad = p * (diff - per_row[:, None]) * (_scalar(g) / (b * T))
        return (grad.reshape(student.shape),)

    return make_op(np.asarray(per_row.mean()), (student,), backward, "kl_consistency")


# -- graph traversal -----------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across separate graphs; call ``zero_grad``
    between steps.  The graph is released afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward already ran on this graph")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._retain:
            node.grad = g.copy()
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    for node in order:
        node._consumed = True
        if not node.is_leaf:
            node._backward = None
            node._parents = ()


# -- optimisation --------------------------------------------------------

def sgd_step(params: Sequence[Tensor], lr: float, momentum: float, weight_decay: float,
             velocities: dict[int, np.ndarray], grads: Sequence[np.ndarray | None] | None = None) -> None:
    """In-place SGD with momentum and coupled weight decay.

    ``v <- momentum*v + grad + weight_decay*param``; ``param <- param - lr*v``.
    ``velocities`` is keyed by position in ``params``.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    for i, p in enumerate(params):
        g = p.grad if grads is None else grads[i]
        if g is None:
            g = np.zeros_like(p.data)
        step = g + weight_decay * p.data
        v = velocities.get(i)
        v = step if v is None else momentum * v + step
        velocities[i] = v
        p.data = p.data - lr * v


class SGD:
    """Momentum SGD over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.velocities)
