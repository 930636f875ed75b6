"""Dense tensors with a reverse-mode gradient tape, masked softmax and spectral norms.

Everything is a thin layer over numpy arrays.  A :class:`Tensor` records the
operation that produced it on the innermost active :class:`Tape`; calling
:func:`grad` walks that tape backwards.

>>> with Tape() as tape:
...     x = Tensor(3.0, requires_grad=True)
...     y = x * x
>>> float(grad(tape, y, [x])[0])
6.0
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"single": np.float32, "double": np.float64}


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class RowFullyMasked(ValueError):
    """A softmax row has no admissible entry."""


def dtype_of(precision: str) -> type:
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {precision!r}") from None


# --------------------------------------------------------------------------
# tape

class Node:
    __slots__ = ("out", "parents", "backward", "detached")

    def __init__(self, out, parents, backward, detached=False):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.detached = detached


class Tape:
    """Ordered record of primitive operations.

    Used as a context manager; nested tapes are allowed and operations are
    recorded on the innermost one.  A tape supports any number of
    :func:`grad` calls, which makes column-by-column Jacobians cheap.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @property
    def detach_flags(self) -> list[bool]:
        return [n.detached for n in self.nodes]

    def __len__(self):
        return len(self.nodes)


def _active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


class Tensor:
    """Real array plus autodiff bookkeeping.

    Values are never mutated in place by library code; treat ``data`` as
    read-only.
    """

    __slots__ = ("data", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = data if dtype is None and type(data) is np.ndarray else np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a non-finite entry always makes the sum non-finite; overflow falls through to the exact test
    if arr.dtype.kind == "f" and math.isfinite(arr.sum()):
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced non-finite values")


def _record(out: np.ndarray, parents: Sequence[Tensor], backward: Callable, what: str) -> Tensor:
    _check_finite(out, what)
    t = Tensor(out)
    tape = Tape._stack[-1] if Tape._stack else None
    if tape is not None and any(p.requires_grad or p.node is not None for p in parents):
        t.node = Node(t, tuple(parents), backward)
        tape.nodes.append(t.node)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def grad(tape: Tape, output: Tensor, wrt: Sequence[Tensor], seed: np.ndarray | None = None) -> list[np.ndarray]:
    """Gradients of ``output`` with respect to each tensor in ``wrt``.

    ``output`` must be a scalar unless ``seed`` (the cotangent, same shape as
    ``output``) is given.  Tensors unreachable from ``output``, or reachable
    only through a detached node, get a zero gradient.
    """
    if seed is None:
        if output.data.size != 1:
            raise ValueError("grad() needs a scalar output or an explicit seed")
        seed = np.ones_like(output.data)
    grads: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=output.dtype)}
    keep = {id(w) for w in wrt}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        if id(node.out) not in keep:
            del grads[id(node.out)]
        if node.detached:
            continue
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.tracked:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


# --------------------------------------------------------------------------
# primitive ops

def _operands(a, b) -> tuple[Tensor, Tensor]:
    """Wrap both operands; plain constants take the dtype of the Tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype) if np.ndim(b) == 0 else b)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype) if np.ndim(a) == 0 else a), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data + b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data - b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data * b.data
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.tracked else None
        gb = None
        if b.tracked:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _record(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(np.array(a.data[idx]), (a,), backward, "index")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``."""
    weight = as_tensor(weight)
    ids = np.asarray(ids)

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _record(weight.data[ids], (weight,), backward, "embedding")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), backward, "sum")


def detach(a: Tensor) -> Tensor:
    """Identity in value; contributes zero gradient to everything upstream."""
    a = as_tensor(a)
    t = Tensor(a.data)
    tape = _active_tape()
    if tape is not None and a.tracked:
        t.node = Node(t, (a,), lambda g: (None,), detached=True)
        tape.nodes.append(t.node)
    return t


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _record(out, (a,), lambda g: (g * (a.data > 0),), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1 + th)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th ** 2) * dinner),)

    return _record(out, (a,), backward, "gelu")


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``a / rms(a) * gain`` over the last axis."""
    a, gain = as_tensor(a), as_tensor(gain)
    x = a.data
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x * inv
    out = xhat * gain.data

    def backward(g):
        gg = _unbroadcast(g * xhat, gain.shape)
        gx = g * gain.data
        d = x.shape[-1]
        ga = inv * (gx - xhat * np.sum(gx * xhat, axis=-1, keepdims=True) / d)
        return (ga, gg)

    return _record(out, (a, gain), backward, "rms_norm")


def rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _rotate_half_t(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([x[..., half:], -x[..., :half]], axis=-1)


def rope(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding; ``cos``/``sin`` broadcast against ``a``."""
    a = as_tensor(a)
    out = a.data * cos + rotate_half(a.data) * sin
    return _record(out, (a,), lambda g: (g * cos + _rotate_half_t(g * sin),), "rope")


def _masked_softmax(logits: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    mask = np.asarray(mask, dtype=bool)
    if not np.broadcast_to(mask, logits.shape).any(axis=-1).all():
        raise RowFullyMasked("softmax row with no unmasked entry")
    neg = np.where(mask, logits, -np.inf)
    z = neg - neg.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(logits, mask=None):
    """Row softmax restricted to ``mask`` (True = admissible).

    Masked entries are exactly zero.  Accepts arrays or Tensors of any rank;
    the mask broadcasts against the logits.  Raises :class:`RowFullyMasked`
    if some row admits nothing.
    """
    if not isinstance(logits, Tensor):
        arr = np.asarray(logits, dtype=np.result_type(np.asarray(logits).dtype, np.float32))
        _check_finite(arr, "softmax input")
        return _masked_softmax(arr, mask)
    _check_finite(logits.data, "softmax input")
    p = _masked_softmax(logits.data, mask)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _record(p, (logits,), backward, "softmax")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean next-token negative log-likelihood.

    ``logits`` has shape ``(..., V)``; ``targets`` and ``weights`` match the
    leading axes.  Positions with weight 0 contribute nothing, including to
    the gradient, and their target ids are ignored.
    """
    logits = as_tensor(logits)
    x = logits.data
    targets = np.asarray(targets)
    w = np.ones(targets.shape, dtype=x.dtype) if weights is None else np.asarray(weights, dtype=x.dtype)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one weighted position")
    # ids at weight-0 positions may be out of range (e.g. PAD with a small vocab)
    targets = np.where(w > 0, targets, 0)
    m = x.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(x - m).sum(axis=-1))
    picked = np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]
    loss = np.asarray(np.sum(w * (lse - picked)) / total, dtype=x.dtype)

    def backward(g):
        p = np.exp(x - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1, -1)
        return (p * (w / total * g)[..., None],)

    return _record(loss, (logits,), backward, "cross_entropy")


# --------------------------------------------------------------------------
# spectral norm

@dataclass(frozen=True)
class PowerIterationResult:
    value: float
    converged: bool
    iterations: int


def power_iteration(m, tol: float = 1e-15, max_iter: int = 10_000, seed: int = 0) -> PowerIterationResult:
    """Largest singular value of ``m`` by power iteration on ``mᵀm``.

    Stops when the relative change of the eigenvalue estimate drops below
    ``tol``.  Runs in double precision regardless of the input dtype.
    """
    m = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("power_iteration expects a matrix")
    _check_finite(m, "spectral_norm input")
    if m.size == 0 or not m.any():
        return PowerIterationResult(0.0, True, 0)
    gram = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    x = np.random.default_rng(seed).standard_normal(gram.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for it in range(1, max_iter + 1):
        y = gram @ x
        new = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return PowerIterationResult(0.0, True, it)
        x = y / ny
        if abs(new - lam) <= tol * abs(new):
            return PowerIterationResult(math.sqrt(max(new, 0.0)), True, it)
        lam = new
    return PowerIterationResult(math.sqrt(max(lam, 0.0)), False, max_iter)


def spectral_norm(m, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    res = power_iteration(m, tol=tol, max_iter=max_iter)
    if not res.converged:
        warnings.warn(f"power iteration did not converge in {max_iter} steps; returning best estimate",
                      RuntimeWarning, stacklevel=2)
    return res.value


# --------------------------------------------------------------------------
# finite differences

def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences.

    The step for each coordinate is ``step * max(1, |x_i|)``.
    """
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = step * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def parameters_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.isfinite(a).all() for a in arrays)
