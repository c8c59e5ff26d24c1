"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation creates a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to one gradient per parent.
:func:`backward` walks the recorded graph once in reverse topological order.

Only the operations needed by the PTSM model and its losses are provided; see
:func:`primitive_set`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, GradCheckError

DTYPE = np.float64

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ELU_ALPHA = 1.0

_PRIMITIVES = (
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "conv1d",
    "sigmoid",
    "elu",
    "relu",
    "softmax",
    "log",
    "exp",
    "abs",
    "sqrt",
    "clip_min",
    "sum",
    "mean",
    "l1_norm",
    "l2_norm",
    "frobenius_norm",
    "trace",
    "batch_cov",
    "batch_norm",
    "dropout",
    "adaptive_avg_pool1d",
    "reshape",
    "transpose",
    "concat",
    "getitem",
)


def primitive_set() -> list[str]:
    """Names of the differentiable primitives this engine records.

    Elementwise and broadcast products are both covered by ``mul``.
    """
    return list(_PRIMITIVES)


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        _op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.op = _op
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, _parents=parents if req else (), _backward=fn if req else None, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def fn(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), fn, "div")


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched with a shared right operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def fn(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _node(a.data @ b.data, (a, b), fn, "matmul")


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def elu(a, alpha: float = ELU_ALPHA) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    return _node(out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg_part + alpha),), "elu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _node(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), "relu")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), fn, "softmax")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clip_min(a, lo: float) -> Tensor:
    """``max(a, lo)``; the gradient is zero wherever the floor is active. NaN propagates."""
    a = as_tensor(a)
    keep = ~(a.data <= lo)
    return _node(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clip_min")


# ---------------------------------------------------------------------------
# reductions and norms


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _node(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims).copy(),),
        "sum",
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return _node(
        a.data.mean(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims) / count,),
        "mean",
    )


def l1_norm(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return _node(
        np.abs(a.data).sum(axis=axis),
        (a,),
        lambda g: (np.expand_dims(g, axis) * np.sign(a.data),),
        "l1_norm",
    )


def l2_norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; subgradient zero at the origin."""
    a = as_tensor(a)
    n = np.sqrt((a.data**2).sum(axis=axis))

    def fn(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.expand_dims(g, axis) * np.where(nk > 0, a.data / safe, 0.0),)

    return _node(n, (a,), fn, "l2_norm")


def frobenius_norm(a) -> Tensor:
    a = as_tensor(a)
    n = float(np.sqrt((a.data**2).sum()))
    return _node(
        np.asarray(n), (a,), lambda g: (g * a.data / n if n > 0 else np.zeros_like(a.data),),
        "frobenius_norm",
    )


def trace(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"trace needs a square matrix, got {a.shape}")
    eye = np.eye(a.shape[0])
    return _node(np.trace(a.data), (a,), lambda g: (g * eye,), "trace")


def batch_cov(a, b=None) -> Tensor:
    """Empirical (N-1)-normalized covariance between the columns of ``a`` and ``b``.

    Rows are samples. With ``b`` omitted this is the auto-covariance of ``a``.
    """
    a = as_tensor(a)
    same = b is None
    b = a if same else as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ContractError(f"batch_cov expects N x d inputs, got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ContractError("batch covariance needs at least 2 samples")
    ac = a.data - a.data.mean(axis=0)
    bc = ac if same else b.data - b.data.mean(axis=0)
    out = ac.T @ bc / (n - 1)

    if same:
        return _node(out, (a,), lambda g: (ac @ (g + g.T) / (n - 1),), "batch_cov")
    return _node(out, (a, b), lambda g: (bc @ g.T / (n - 1), ac @ g / (n - 1)), "batch_cov")


# ---------------------------------------------------------------------------
# layers


def conv1d(x, w, b=None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation. ``x``: (N, Cin, T), ``w``: (Cout, Cin, K)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ContractError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}")
    n, cin, t = x.shape
    cout, _, k = w.shape
    t_out = t + 2 * padding - k + 1
    if t_out < 1:
        raise ContractError(f"conv1d: sequence length {t} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    # (N, Cin, T_out, K) -> (N, T_out, Cin*K)
    cols = sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3).reshape(n, t_out, cin * k)
    wm = w.data.reshape(cout, cin * k)
    out = (cols @ wm.T).transpose(0, 2, 1)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None]
        parents = (x, w, b)

    def fn(g):
        gt = g.transpose(0, 2, 1)  # (N, T_out, Cout)
        gw = np.tensordot(gt, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        gcols = (gt @ wm).reshape(n, t_out, cin, k)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j : j + t_out] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding : padding + t] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return _node(np.ascontiguousarray(out), parents, fn, "conv1d")


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Batch normalization over every axis except 1 (the feature/channel axis).

    Returns the output and the updated running statistics; the inputs are not
    modified. In evaluation mode the running statistics are returned unchanged.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    gm, bt = gamma.data.reshape(bshape), beta.data.reshape(bshape)

    if not training:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv
        out = xhat * gm + bt

        def fn_eval(g):
            return g * gm * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _node(out, (x, gamma, beta), fn_eval, "batch_norm"), running_mean, running_var

    m = x.data.size // x.shape[1]
    if m < 2:
        raise ContractError("training-mode batch norm needs at least 2 values per feature")
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gm + bt

    def fn(g):
        gxhat = g * gm
        gx = inv * (
            gxhat
            - gxhat.mean(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    new_mean = (1 - momentum) * running_mean + momentum * mu.reshape(-1)
    new_var = (1 - momentum) * running_var + momentum * var.reshape(-1) * m / (m - 1)
    return _node(out, (x, gamma, beta), fn, "batch_norm"), new_mean, new_var


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity outside training."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def pooling_matrix(t: int, t_out: int) -> np.ndarray:
    """(T, T') averaging matrix: equal-width bins, remainder to the leading bins."""
    if t_out < 1 or t < t_out:
        raise ContractError(f"cannot pool length {t} down to {t_out}")
    base, rem = divmod(t, t_out)
    p = np.zeros((t, t_out))
    start = 0
    for j in range(t_out):
        width = base + (1 if j < rem else 0)
        p[start : start + width, j] = 1.0 / width
        start += width
    return p


def adaptive_avg_pool1d(x, t_out: int) -> Tensor:
    x = as_tensor(x)
    p = pooling_matrix(x.shape[-1], t_out)
    return _node(x.data @ p, (x,), lambda g: (g @ p.T,), "adaptive_avg_pool1d")


# ---------------------------------------------------------------------------
# structural


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = tuple(as_tensor(t) for t in items)
    sizes = np.cumsum([t.shape[axis] for t in items])[:-1]
    return _node(
        np.concatenate([t.data for t in items], axis=axis),
        items,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
        "concat",
    )


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), fn, "getitem")


# ---------------------------------------------------------------------------
# the engine


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode pass from a scalar ``root``.

    Returns a map from leaf tensor to its gradient. When ``leaves`` is given,
    every listed tensor appears in the result, with zeros if ``root`` does not
    depend on it.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    out: dict[Tensor, np.ndarray] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(_topo_order(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                out[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = np.array(pg, dtype=DTYPE)
    if leaves is not None:
        return {leaf: out.get(leaf, np.zeros_like(leaf.data)) for leaf in leaves}
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    step: float
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[str, tuple[int, ...], float, float, float]] = field(default_factory=list)
    n_probes: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    probes: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments and must read the current values of ``params``.
    Each parameter entry is probed unless ``probes`` limits the total number of
    entries, in which case that many are drawn uniformly across all parameters.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    names = list(params)
    root = f()
    if not np.isfinite(root.data).all():
        raise GradCheckError(f"function is not finite at the base point ({root.data!r})")
    analytic = backward(root, [params[k] for k in names])
    grads = {k: analytic[params[k]] for k in names}

    sites = [(k, idx) for k in names for idx in np.ndindex(params[k].shape)]
    if probes is not None and probes < len(sites):
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = np.sort(rng.choice(len(sites), size=probes, replace=False))
        sites = [sites[i] for i in pick]

    report = GradCheckReport(step=step, tol=tol, max_rel_err={k: 0.0 for k in names})
    for k, idx in sites:
        arr = params[k].data
        orig = arr[idx]
        arr[idx] = orig + step
        fp = float(f().data)
        arr[idx] = orig - step
        fm = float(f().data)
        arr[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckError(f"non-finite value when probing parameter {k!r} at {idx}")
        numeric = (fp - fm) / (2 * step)
        a = float(grads[k][idx])
        err = relative_error(a, numeric)
        report.max_rel_err[k] = max(report.max_rel_err[k], err)
        if err > tol:
            report.failures.append((k, idx, a, numeric, err))
    report.n_probes = len(sites)
    return report
