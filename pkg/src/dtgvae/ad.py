"""Dense float64 tensors with reverse-mode differentiation.

The graph is rebuilt on every forward pass: each op returns a new
:class:`Tensor` that remembers its parents and a closure mapping the output
gradient to parent gradients.  :func:`backward` walks the graph once in
reverse topological order.

Broadcasting is restricted to scalar-with-tensor and equal shapes.  The one
row-broadcast a dense layer needs lives in :func:`add_bias`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.linalg.lapack


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """An operation on finite inputs produced NaN or Inf."""


class DomainError(ValueError):
    """Input outside an operation's domain (log of a non-positive value)."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorization failed."""


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: BackwardFn | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_or_raise(out: np.ndarray, inputs: Iterable[Tensor], op: str) -> None:
    if np.isfinite(out).all():
        return
    if all(np.isfinite(t.data).all() for t in inputs):
        raise NonFiniteError(f"{op} produced non-finite values from finite inputs")


def _make(out: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    _finite_or_raise(out, parents, op)
    if not any(p.requires_grad for p in parents):
        return Tensor(out, op=op)
    return Tensor(out, _parents=parents, _backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar operands are ever broadcast
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(
        a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g), "matmul",
    )


def add_bias(x, bias) -> Tensor:
    """``x[i, :] + bias`` for every row of a batch×n matrix."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


# ----------------------------------------------------------------- unary ops

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # overflow is reported by _make
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise DomainError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul,
    "relu": relu, "exp": exp, "log": log, "abs": absolute, "square": square,
}


def elementwise(kind: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- reductions

def _check_axis(x: Tensor, axis: int | None) -> None:
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    _check_axis(x, axis)
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), back, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reduce(kind: str, x, axis: int | None = None) -> Tensor:
    if kind == "sum":
        return sum(x, axis)
    if kind == "mean":
        return mean(x, axis)
    raise ValueError(f"unknown reduction {kind!r}")


# ------------------------------------------------------- structural / fused

def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if any(p.ndim != 2 for p in parts) or axis not in (0, 1):
        raise ShapeError("concat supports 2-D tensors only")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise ShapeError(f"concat: mismatched shapes {[p.shape for p in parts]}")
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(
        np.concatenate([p.data for p in parts], axis=axis), parts,
        lambda g: tuple(np.split(g, cuts, axis=axis)), "concat",
    )


def layernorm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation followed by an elementwise affine map."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"layernorm: parameters {gain.shape} do not match {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv_std

    def back(g):
        gx = g * gain.data
        dx = inv_std * (gx - gx.mean(axis=1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(xhat * gain.data + shift.data, (x, gain, shift), back, "layernorm")


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return _make(np.asarray(loss), (logits,), back, "cross_entropy")


def covariance(z, ridge: float = 0.0) -> Tensor:
    """Unbiased sample covariance of the rows of ``z`` plus ``ridge * I``."""
    z = as_tensor(z)
    n, d = z.shape
    if n < 2:
        raise ShapeError("covariance needs at least two rows")
    zc = z.data - z.data.mean(axis=0, keepdims=True)
    cov = zc.T @ zc / (n - 1)
    cov[np.diag_indices(d)] += ridge
    # centering drops out of the gradient: columns of zc already sum to zero
    return _make(cov, (z,), lambda g: (zc @ (g + g.T) / (n - 1),), "covariance")


def centered_gram(z, ridge: float = 0.0) -> Tensor:
    """``Zc Zc^T / (n - 1) + ridge * I`` for row-centred ``Zc`` (n × n).

    Shares its non-zero spectrum with :func:`covariance`, so for n < d the
    log-determinant of the d × d covariance is ``logdet(gram) + (d - n) log ridge``.
    """
    z = as_tensor(z)
    n = z.shape[0]
    if n < 2:
        raise ShapeError("centered_gram needs at least two rows")
    zc = z.data - z.data.mean(axis=0, keepdims=True)
    gram = zc @ zc.T / (n - 1)
    gram[np.diag_indices(n)] += ridge

    def back(g):
        dzc = (g + g.T) @ zc / (n - 1)
        return (dzc - dzc.mean(axis=0, keepdims=True),)

    return _make(gram, (z,), back, "centered_gram")


def cholesky(m: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"matrix is not positive definite: {exc}") from None


def logdet_psd(m) -> Tensor:
    """log det of a symmetric positive-definite matrix via Cholesky."""
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"logdet_psd needs a square matrix, got {m.shape}")
    chol = cholesky(m.data)
    value = 2.0 * np.log(np.diag(chol)).sum()

    def back(g):
        inv, info = scipy.linalg.lapack.dpotri(chol, lower=1)
        if info != 0:
            raise NotPositiveDefiniteError(f"inverse from Cholesky factor failed (info={info})")
        inv = np.tril(inv) + np.tril(inv, -1).T
        return (float(g) * inv,)

    return _make(np.asarray(value), (m,), back, "logdet")


# ------------------------------------------------------------------ backward

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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor, leaves: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Accumulate d(root)/d(node) into ``.grad`` of every leaf reachable from root.

    Returns the gradients for ``leaves`` in order; a leaf the root does not
    depend on gets an all-zero array.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    out = []
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        out.append(leaf.grad)
    return out
