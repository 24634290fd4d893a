"""Dense float64 tensors with define-by-run reverse-mode autodiff.

A `Tape` is opened per forward pass; primitives record themselves on the
active tape only when an input requires gradients. `Tape.backward` walks
the records in reverse and deposits `.grad` arrays on every leaf tensor
with ``requires_grad=True``. Every primitive checks its output for
NaN/Inf and fails fast instead of propagating garbage.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NumericError

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """Contiguous row-major float64 array plus grad bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars go through scale/add_scalar
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Not reentrant and not thread-safe: one tape per forward/backward,
    never shared across threads.
    """

    def __init__(self):
        # each node: (out_tensor, input_tensors, backward_fn)
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar loss; writes `.grad` on leaves."""
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            for tensor, gi in zip(inputs, backward_fn(g)):
                if gi is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.asarray(gi, dtype=np.float64).reshape(tensor.shape)
                    holders[key] = tensor
        for key, g in grads.items():
            tensor = holders[key]
            if tensor.requires_grad:
                tensor.grad = g


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def _finish(op: str, data: np.ndarray, inputs: tuple[Tensor, ...],
            backward_fn: Callable) -> Tensor:
    """Finalize a primitive: finiteness check, grad flag, tape record."""
    if not np.all(np.isfinite(data)):
        raise NumericError(op)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE.nodes.append((out, inputs, backward_fn))
    return out


def record_primitive(op: str, data: np.ndarray, inputs: Sequence[Tensor],
                     backward_fn: Callable) -> Tensor:
    """Hook for custom primitives defined outside this module."""
    return _finish(op, np.asarray(data, dtype=np.float64), tuple(inputs), backward_fn)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports (T, D) + (D,) row-bias broadcast."""
    if a.shape == b.shape:
        return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _finish("add", a.data + b.data[None, :], (a, b),
                       lambda g: (g, g.sum(axis=0)))
    if b.data.ndim == 2 and a.data.ndim == 1 and b.shape[1] == a.shape[0]:
        return _finish("add", a.data[None, :] + b.data, (a, b),
                       lambda g: (g.sum(axis=0), g))
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _finish("add_scalar", a.data + c, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _finish("matmul", ad @ bd, (a, b),
                   lambda g: (g @ bd.T, ad.T @ g))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    ad = a.data
    return _finish("log", np.log(ad), (a,), lambda g: (g / ad,))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    sig = 1.0 / (1.0 + np.exp(-ad))
    return _finish("softplus", np.logaddexp(0.0, ad), (a,), lambda g: (g * sig,))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    sig = 1.0 / (1.0 + np.exp(-ad))
    return _finish("silu", ad * sig, (a,),
                   lambda g: (g * (sig * (1.0 + ad * (1.0 - sig))),))


def concat_last_dim(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(
            f"concat_last_dim needs 2-D with equal rows, got {a.shape} and {b.shape}")
    split = a.shape[1]
    return _finish("concat_last_dim", np.concatenate([a.data, b.data], axis=1),
                   (a, b), lambda g: (g[:, :split], g[:, split:]))


def gather_rows(a: Tensor, indices) -> Tensor:
    """Row gather with scatter-add backward (duplicate indices accumulate)."""
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather_rows needs a flat index list")
    rows = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise DimensionError(f"gather_rows: index out of range for {rows} rows")

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _finish("gather_rows", a.data[idx], (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if a.data.size != int(np.prod(shape, dtype=np.int64)):
        raise DimensionError(f"reshape: {a.shape} -> {shape} changes size")
    old = a.shape
    return _finish("reshape", a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(old),))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _finish("sum", np.sum(a.data), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _finish("mean", np.mean(a.data), (a,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot needs equal 1-D shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _finish("dot", np.dot(ad, bd), (a, b), lambda g: (g * bd, g * ad))


def stack_scalars(tensors: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D vector (differentiable)."""
    if not tensors:
        raise DimensionError("stack_scalars: empty input")
    for t in tensors:
        if t.data.size != 1:
            raise DimensionError(f"stack_scalars needs scalars, got shape {t.shape}")
    data = np.array([float(t.data.reshape(())) for t in tensors])

    def backward(g):
        return tuple(np.asarray(g[i]).reshape(t.shape)
                     for i, t in enumerate(tensors))

    return _finish("stack_scalars", data, tuple(tensors), backward)


def softmax_1d(v: Tensor) -> Tensor:
    """Numerically stable softmax of a 1-D vector."""
    if v.data.ndim != 1 or v.data.size == 0:
        raise DimensionError(f"softmax_1d needs a non-empty 1-D vector, got {v.shape}")
    shifted = v.data - v.data.max()
    e = np.exp(shifted)
    s = e / e.sum()

    def backward(g):
        return ((g - np.dot(g, s)) * s,)

    return _finish("softmax_1d", s, (v,), backward)


# ---------------------------------------------------------------------------
# gradient verification


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` must rebuild the forward pass from the current contents of
    `params` on every call and return a scalar Tensor.
    """
    if eps <= 0:
        raise DomainError("finite_diff_check: eps must be positive")
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
