"""Dense float64 tensors with a reverse-mode tape, Adam, and soft parameter blending.

Everything here is double precision and deterministic. The op set is the
closure needed by the graph-attention Q model and its regularized loss:
matmul, add, scale, relu, concat, reduce_mean, square, softmax_rows, log,
kl_rows, plus zero-arithmetic view/plumbing ops (reshape, transpose,
gather_rows) whose backward passes only move gradients around.
"""

from __future__ import annotations

import numpy as np


class StructuralError(ValueError):
    """Shape/schema violation: the inputs cannot be combined as requested."""


class NumericError(ArithmeticError):
    """A primitive produced NaN/Inf, or received numerically invalid input."""


class Tensor:
    """Immutable-by-convention dense float64 array."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of primitive ops, consumed once by backward().

    Records are appended in execution order, so the sequence is topologically
    sorted by construction. Use as a context manager; training is
    single-threaded per step, so one module-level active tape suffices.
    """

    def __init__(self):
        # each record: (op name, input Tensors, output Tensor, backward fn)
        self.records = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise StructuralError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


def _emit(op: str, inputs, data: np.ndarray, backward) -> Tensor:
    """Finiteness-check a primitive result and record it on the active tape.

    `backward(grad, need)` returns one gradient array per input; entries whose
    `need` flag is False may be returned as None (their gradient is unused).
    """
    with np.errstate(over="ignore", invalid="ignore"):
        finite = bool(np.all(np.isfinite(data)))
    if not finite:
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.records.append((op, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# numeric primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacks of matrices must have identical batch dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise StructuralError("matmul requires at least 2-D operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise StructuralError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if ad.ndim > 2 or bd.ndim > 2:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise StructuralError("batched matmul requires equal batch dims")
    out = ad @ bd

    def backward(grad, need):
        ga = grad @ np.swapaxes(bd, -1, -2) if need[0] else None
        gb = np.swapaxes(ad, -1, -2) @ grad if need[1] else None
        return ga, gb

    return _emit("matmul", (a, b), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise sum."""
    ad, bd = a.data, b.data
    try:
        out = ad + bd
    except ValueError as e:
        raise StructuralError(f"add shapes incompatible: {ad.shape} + {bd.shape}") from e

    def backward(grad, need):
        ga = _unbroadcast(grad, ad.shape) if need[0] else None
        gb = _unbroadcast(grad, bd.shape) if need[1] else None
        return ga, gb

    return _emit("add", (a, b), out, backward)


def scale(a: Tensor, factor) -> Tensor:
    """Multiply by a constant scalar or constant array (no gradient to it)."""
    f = factor if np.isscalar(factor) else np.asarray(factor, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = a.data * f

    def backward(grad, need):
        return (_unbroadcast(grad * f, a.data.shape) if need[0] else None,)

    return _emit("scale", (a,), out, backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward(grad, need):
        return (grad * (a.data > 0.0) if need[0] else None,)

    return _emit("relu", (a,), out, backward)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def backward(grad, need):
        return (grad * (2.0 * a.data) if need[0] else None,)

    return _emit("square", (a,), out, backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out = np.log(a.data)
        except FloatingPointError as e:
            raise NumericError("log of non-positive value") from e

    def backward(grad, need):
        return (grad / a.data if need[0] else None,)

    return _emit("log", (a,), out, backward)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along `axis`; all other extents must agree."""
    if not tensors:
        raise StructuralError("concat of zero tensors")
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as e:
        raise StructuralError("concat shapes incompatible") from e
    sizes = [arr.shape[axis] for arr in arrays]
    splits = np.cumsum(sizes)[:-1]

    def backward(grad, need):
        pieces = np.split(grad, splits, axis=axis)
        return tuple(p if n else None for p, n in zip(pieces, need))

    return _emit("concat", tuple(tensors), out, backward)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Mean over all elements (axis=None, scalar output) or along one axis."""
    ad = a.data
    if axis is None:
        out = ad.mean()
        denom = ad.size

        def backward(grad, need):
            if not need[0]:
                return (None,)
            return (np.full(ad.shape, float(grad) / denom),)
    else:
        out = ad.mean(axis=axis)
        denom = ad.shape[axis]

        def backward(grad, need):
            if not need[0]:
                return (None,)
            g = np.expand_dims(grad, axis) / denom
            return (np.broadcast_to(g, ad.shape).copy(),)

    return _emit("reduce_mean", (a,), out, backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis; strictly positive rows that sum to 1.

    Entries at -inf-like magnitudes (additive masking) come out exactly 0.
    """
    ad = a.data
    shifted = ad - ad.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(grad, need):
        if not need[0]:
            return (None,)
        dot = (grad * out).sum(axis=-1, keepdims=True)
        return (out * (grad - dot),)

    return _emit("softmax_rows", (a,), out, backward)


_KL_FLOOR = 1e-12


def kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise KL divergence sum_j p_j ln(p_j/q_j) along the last axis.

    Both inputs must be row-stochastic (rows sum to 1 within 1e-9, entries
    >= 0). Zero p entries contribute 0; q is floored at 1e-12 before the
    division. Gradients flow to both arguments (callers wanting a constant
    target simply pass a tensor that is not on any parameter path).
    """
    pd, qd = p.data, q.data
    if pd.shape != qd.shape:
        raise StructuralError(f"kl_rows shape mismatch: {pd.shape} vs {qd.shape}")
    for name, arr in (("p", pd), ("q", qd)):
        if np.any(arr < 0.0):
            raise NumericError(f"kl_rows: negative entries in {name}")
        if np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-9):
            raise NumericError(f"kl_rows: rows of {name} do not sum to 1")
    qc = np.maximum(qd, _KL_FLOOR)
    active = pd > 0.0
    ratio = np.where(active, pd / qc, 1.0)
    out = np.where(active, pd * np.log(ratio), 0.0).sum(axis=-1)

    def backward(grad, need):
        g = np.expand_dims(grad, -1)
        gp = g * np.where(active, np.log(ratio) + 1.0, 0.0) if need[0] else None
        gq = g * np.where(active, -pd / qc, 0.0) if need[1] else None
        return gp, gq

    return _emit("kl_rows", (p, q), out, backward)


# ---------------------------------------------------------------------------
# view / plumbing ops (no arithmetic, gradients are just rearranged)
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise StructuralError(f"cannot reshape {a.data.shape} to {shape}") from e

    def backward(grad, need):
        return (grad.reshape(a.data.shape) if need[0] else None,)

    return _emit("reshape", (a,), out, backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(grad, need):
        return (grad.transpose(inverse) if need[0] else None,)

    return _emit("transpose", (a,), out, backward)


def gather_rows(a: Tensor, idx, scatter=None) -> Tensor:
    """Select rows (axis 0) by an integer index array.

    `scatter`, when given, is a callable mapping the output-shaped gradient to
    the input-shaped gradient (a precomputed sparse transpose); otherwise a
    generic scatter-add is used.
    """
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise StructuralError("gather_rows requires a 1-D integer index")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise StructuralError("gather_rows index out of range")
    out = a.data[idx]

    def backward(grad, need):
        if not need[0]:
            return (None,)
        if scatter is not None:
            return (scatter(grad),)
        buf = np.zeros(a.data.shape)
        np.add.at(buf, idx, grad)
        return (buf,)

    return _emit("gather_rows", (a,), out, backward)


# ---------------------------------------------------------------------------
# parameters, backward pass, optimization
# ---------------------------------------------------------------------------

class ParamSet:
    """Ordered name -> Tensor map with a schema identifier.

    Two ParamSets with equal schema are guaranteed shape-compatible for
    blending and optimizer updates.
    """

    def __init__(self, schema: str, params: dict):
        self.schema = schema
        self._params = dict(params)
        for name, t in self._params.items():
            if not isinstance(t, Tensor):
                self._params[name] = Tensor(t)

    def names(self):
        return list(self._params.keys())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __setitem__(self, name: str, value: Tensor):
        if name not in self._params:
            raise StructuralError(f"unknown parameter {name!r}")
        self._params[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def copy(self) -> "ParamSet":
        return ParamSet(self.schema, {k: Tensor(v.data.copy()) for k, v in self.items()})

    def check_same_schema(self, other: "ParamSet"):
        if self.schema != other.schema or self.names() != other.names():
            raise StructuralError("parameter schemas differ")
        for name in self.names():
            if self[name].shape != other[name].shape:
                raise StructuralError(f"shape mismatch for {name!r}")


def backward(tape: Tape, loss: Tensor, params: ParamSet) -> dict:
    """Reverse-accumulate d(loss)/d(p) for every parameter in `params`.

    Parameters the tape never touched map to zero tensors. Gradients are only
    materialized along paths that can reach a parameter.
    """
    if loss.data.shape != ():
        raise StructuralError("backward requires a scalar loss")

    needed = {id(t) for _, t in params.items()}
    for _, inputs, out, _ in tape.records:
        if any(id(t) in needed for t in inputs):
            needed.add(id(out))

    adjoint = {id(loss): np.ones(())}
    for _, inputs, out, bwd in reversed(tape.records):
        grad = adjoint.get(id(out))
        if grad is None or id(out) not in needed:
            continue
        need = tuple(id(t) in needed for t in inputs)
        grads = bwd(grad, need)
        for t, g in zip(inputs, grads):
            if g is None:
                continue
            key = id(t)
            if key in adjoint:
                adjoint[key] = adjoint[key] + g
            else:
                adjoint[key] = g

    result = {}
    for name, t in params.items():
        g = adjoint.get(id(t))
        result[name] = Tensor(g) if g is not None else Tensor(np.zeros(t.shape))
    return result


class AdamState:
    """First/second moment estimates mirroring a ParamSet, plus step counter."""

    def __init__(self, params: ParamSet, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(t.shape) for name, t in params.items()}
        self.v = {name: np.zeros(t.shape) for name, t in params.items()}


def adam_step(params: ParamSet, grads: dict, state: AdamState):
    """One bias-corrected Adam update. Mutates `params` and `state` in place.

    Parameter tensors are rebound to fresh Tensors so that any stale tape
    records keep referring to the pre-update values.
    """
    for name in params.names():
        if name not in grads:
            raise StructuralError(f"missing gradient for {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name].data
        if g.shape != p.shape:
            raise StructuralError(f"gradient shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        params[name] = Tensor(p.data - step)
    return params, state


def soft_update(target: ParamSet, online: ParamSet, beta: float) -> ParamSet:
    """Blend target <- beta * online + (1 - beta) * target, elementwise."""
    target.check_same_schema(online)
    if not 0.0 <= beta <= 1.0:
        raise StructuralError("beta must be in [0, 1]")
    for name, t in target.items():
        target[name] = Tensor(beta * online[name].data + (1.0 - beta) * t.data)
    return target
