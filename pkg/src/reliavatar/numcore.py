"""Dense tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays.  When a :class:`Graph` is active and
at least one input requires a gradient, the op appends a node to the graph's
tape; :func:`backward` replays that tape in reverse.

There is no implicit broadcasting.  The only exception is a bias-style add
where the right operand matches the trailing axes of the left operand.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32
_ACTIVE: list["Graph"] = []
_tensor_ids = itertools.count()


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def float64_mode():
    """Create tensors in 64-bit precision inside the block (for gradient checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(prev)


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return detach(self)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return affine(self, 1.0, float(other))
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return affine(self, 1.0, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return affine(self, -1.0, float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return affine(self, float(other), 0.0)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    # keep numpy from hijacking mixed expressions
    __array_priority__ = 1000


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    outputs: tuple[Tensor, ...]
    backward: Callable[..., Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Ordered tape of recorded ops.  Use as a context manager to record."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False
    cut: list[Tensor] = field(default_factory=list)  # leaves seen only through detach

    def __enter__(self) -> "Graph":
        if self.consumed:
            raise GraphError("graph already consumed by backward()")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, op, inputs, outputs, backward) -> None:
        for out in outputs:
            out.node_id = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), tuple(outputs), backward))


@contextlib.contextmanager
def no_record():
    """Suspend recording (e.g. for evaluation inside a training loop)."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def recording() -> bool:
    return bool(_ACTIVE)


def record(op: str, inputs: Sequence[Tensor], outputs, backward) -> None:
    """Register an op on the active graph if any input needs a gradient.

    ``backward(*output_grads)`` must return one gradient (or None) per input.
    Output grads that never received a contribution are passed as zeros.
    Extension modules use this to add fused ops.
    """
    if not _ACTIVE:
        return
    if not any(t.requires_grad for t in inputs):
        return
    outs = outputs if isinstance(outputs, tuple) else (outputs,)
    for out in outs:
        out.requires_grad = True
    _ACTIVE[-1]._record(op, inputs, outs, backward)


def _new(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t.node_id = None
    t.name = None
    return t


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_trailing(a: Tensor, b: Tensor) -> bool:
    return b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape


def _reduce_leading(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not _is_trailing(a, b):
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = _new(a.data + b.data)
    bshape = b.shape
    record("add", (a, b), out, lambda g: (g, _reduce_leading(g, bshape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not _is_trailing(a, b):
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = _new(a.data - b.data)
    bshape = b.shape
    record("sub", (a, b), out, lambda g: (g, -_reduce_leading(g, bshape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    out = _new(ad * bd)
    record("mul", (a, b), out, lambda g: (g * bd, g * ad))
    return out


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``a * scale + shift`` with Python-scalar coefficients."""
    a = as_tensor(a)
    d = a.data * a.data.dtype.type(scale) if scale != 1.0 else a.data
    if shift:
        d = d + a.data.dtype.type(shift)
    out = _new(d if d is not a.data else d.copy())
    record("affine", (a,), out, lambda g: (g * scale,))
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = _new(s.astype(a.data.dtype, copy=False))
    record("sigmoid", (a,), out, lambda g: (g * s * (1.0 - s),))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _new(y)
    record("tanh", (a,), out, lambda g: (g * (1.0 - y * y),))
    return out


_KINK_WATCH: list[dict] = []


@contextlib.contextmanager
def kink_watch(signs: bool = False):
    """Observe ReLU inputs and L1 residuals, the only kinks in the op set.

    Yields a dict whose ``min`` is the smallest distance of any observed value
    to its kink; with ``signs=True`` it also collects, in call order, the sign
    pattern of every observed array.  Central differences are only valid when
    the +/- evaluations share the base point's sign patterns.
    """
    w: dict = {"min": float("inf")}
    if signs:
        w["signs"] = []
    _KINK_WATCH.append(w)
    try:
        yield w
    finally:
        _KINK_WATCH.remove(w)


def _note_kink(values: np.ndarray) -> None:
    if values.size:
        m = float(np.abs(values).min())
        for w in _KINK_WATCH:
            w["min"] = min(w["min"], m)
            if "signs" in w:
                w["signs"].append(values > 0)


def _same_signs(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def relu(a: Tensor) -> Tensor:
    if _KINK_WATCH:
        _note_kink(a.data)
    mask = a.data > 0
    out = _new(a.data * mask)
    record("relu", (a,), out, lambda g: (g * mask,))
    return out


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = _new(y)
    record("sqrt", (a,), out, lambda g: (g * 0.5 / y,))
    return out


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must agree exactly, or ``b`` may be a plain 2-D
    matrix shared across all leading axes of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = _new(ad @ bd)

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    record("matmul", (a, b), out, back)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    # 2-D products hit one large GEMM instead of a loop over the batch
    x2 = xd.reshape(-1, xd.shape[-1])
    y = x2 @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        y += bias.data
    out = _new(y.reshape(xd.shape[:-1] + (wd.shape[0],)))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    record("linear", inputs, out, back)
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _new(np.transpose(a.data, axes))
    record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))
    return out


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        d = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    src = a.shape
    out = _new(d)
    record("reshape", (a,), out, lambda g: (g.reshape(src),))
    return out


def _has_advanced(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def slice_(a: Tensor, index) -> Tensor:
    d = a.data[index]
    out = _new(np.array(d) if np.ndim(d) == 0 else d)
    shape, dtype = a.shape, a.data.dtype
    advanced = _has_advanced(index)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    record("slice", (a,), out, back)
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no tensors")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    out = _new(np.concatenate([t.data for t in tensors], axis=ax))
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    record("concat", tuple(tensors), out, lambda g: tuple(np.split(g, splits, axis=ax)))
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        _check_same("stack", tensors[0], t)
    ax = axis % (tensors[0].ndim + 1)
    out = _new(np.stack([t.data for t in tensors], axis=ax))
    n = len(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(n))

    record("stack", tuple(tensors), out, back)
    return out


def detach(a: Tensor) -> Tensor:
    """Same values, cut off from the graph."""
    if _ACTIVE and a.requires_grad and a.node_id is None:
        _ACTIVE[-1].cut.append(a)
    return _new(a.data)


# --------------------------------------------------------------------------
# normalisation and reductions
# --------------------------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _new(y)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    record("softmax", (a,), out, back)
    return out


_MEAN_COLS: dict = {}


def _row_mean(a: np.ndarray) -> np.ndarray:
    """Mean over the last axis, keepdims; a GEMV beats ufunc reductions on short rows."""
    n = a.shape[-1]
    key = (n, a.dtype)
    col = _MEAN_COLS.get(key)
    if col is None:
        col = _MEAN_COLS[key] = np.full((n, 1), 1.0 / n, dtype=a.dtype)
    return (a.reshape(-1, n) @ col).reshape(a.shape[:-1] + (1,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: input {x.shape} vs scale {gamma.shape} / shift {beta.shape}")
    xc = x.data - _row_mean(x.data)
    inv = 1.0 / np.sqrt(_row_mean(xc * xc) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = _new(xhat * gd + beta.data)

    def back(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - _row_mean(gx_hat) - xhat * _row_mean(gx_hat * xhat))
        g2 = g.reshape(-1, n)
        return gx, (g2 * xhat.reshape(-1, n)).sum(axis=0), g2.sum(axis=0)

    record("layer_norm", (x, gamma, beta), out, back)
    return out


def l1(a: Tensor, b) -> Tensor:
    """Mean absolute difference, as a scalar tensor.

    The sum is correctly rounded (``math.fsum``), so the value does not depend
    on element order; permuting a batch leaves the loss bit-identical.
    """
    a = as_tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b, dtype=a.data.dtype)
    _check_same("l1", a, b)
    diff = a.data - b.data
    if _KINK_WATCH:
        _note_kink(diff)
    n = diff.size
    out = _new(np.array(math.fsum(np.abs(diff, dtype=np.float64).ravel()) / n, dtype=a.data.dtype))

    def back(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    record("l1", (a, b), out, back)
    return out


def sum_(a: Tensor) -> Tensor:
    out = _new(np.array(a.data.sum(), dtype=a.data.dtype))
    shape, dtype = a.shape, a.data.dtype
    record("sum", (a,), out, lambda g: (np.full(shape, g, dtype=dtype),))
    return out


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = _new(np.array(a.data.mean(), dtype=a.data.dtype))
    shape, dtype = a.shape, a.data.dtype
    record("mean", (a,), out, lambda g: (np.full(shape, g / n, dtype=dtype),))
    return out


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Scalar ``sum_i w_i * t_i`` over scalar tensors."""
    val = sum(w * float(t.data) for t, w in zip(terms, weights))
    out = _new(np.array(val, dtype=terms[0].data.dtype))
    record("weighted_sum", tuple(terms), out, lambda g: tuple(g * w for w in weights))
    return out


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def backward(graph: Graph, loss: Tensor) -> None:
    """Populate ``.grad`` on every gradient-requiring leaf seen by the graph.

    Leaf gradients accumulate (``+=``) across uses and calls; leaves that did
    not contribute to ``loss`` get a zero gradient.  Intermediate gradients are
    dropped once consumed.  The graph cannot be replayed.
    """
    if graph.consumed:
        raise GraphError("graph already consumed by backward()")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.node_id is None or loss.node_id >= len(graph.nodes) or loss not in graph.nodes[loss.node_id].outputs:
        raise GraphError("backward: loss was not produced by this graph")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: loss.node_id + 1]):
        outs = node.outputs
        if not any(id(o) in grads for o in outs):
            continue
        gout = [grads.pop(id(o), None) for o in outs]
        gout = [np.zeros_like(o.data) if g is None else g for g, o in zip(gout, outs)]
        gin = node.backward(*gout)
        for t, g in zip(node.inputs, gin):
            if g is None or not t.requires_grad:
                continue
            if t.node_id is None:  # leaf
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
    for t in itertools.chain(graph.cut, (t for n in graph.nodes for t in n.inputs)):
        if t.requires_grad and t.node_id is None and t.grad is None:
            t.grad = np.zeros_like(t.data)
    graph.nodes.clear()
    graph.cut.clear()
    graph.consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs, eps: float = 1e-4,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               avoid_kinks: bool = False, stats: dict | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |a - n| / max(1e-8, |a| + |n|).  ``f(*inputs)``
    must return a scalar tensor.  Inputs (or closed-over parameters passed in
    ``inputs``) must be 64-bit.  When ``max_coords`` is given, that many
    coordinates per input are sampled instead of all.

    With ``avoid_kinks`` a coordinate whose +/- evaluation changes the sign
    pattern of any ReLU input or L1 residual is replaced by another one (the
    difference quotient there measures the kink, not the derivative).  The
    counts land in ``stats`` as ``checked`` and ``kink_skipped``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors (use float64_mode)")
        t.requires_grad = True
        t.grad = None
    with Graph() as g:
        loss = f(*inputs)
    backward(g, loss)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite loss")
    base_signs = None
    if avoid_kinks:
        with no_record(), kink_watch(signs=True) as w:
            f(*inputs)
        base_signs = w["signs"]

    def evaluate():
        if base_signs is None:
            with no_record():
                return float(f(*inputs).data), True
        with no_record(), kink_watch(signs=True) as w:
            val = float(f(*inputs).data)
        return val, _same_signs(w["signs"], base_signs)

    worst = 0.0
    checked = skipped = 0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ValueError("grad_check needs contiguous input arrays")
        want = flat.size if max_coords is None else min(max_coords, flat.size)
        order = np.arange(flat.size)
        if want < flat.size or avoid_kinks:
            order = (rng or np.random.default_rng(0)).permutation(flat.size)
        done = 0
        for i in order:
            if done == want:
                break
            orig = flat[i]
            flat[i] = orig + eps
            fp, ok_p = evaluate()
            flat[i] = orig - eps
            fm, ok_m = evaluate()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"grad_check: non-finite value at coordinate {i}")
            if not (ok_p and ok_m):
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            ana = float(analytic.reshape(-1)[i])
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, err)
            done += 1
        checked += done
    if stats is not None:
        stats.update(checked=checked, kink_skipped=skipped)
    return worst


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def lr_at(base_lr: float, step: int, half_period: int) -> float:
    """Step schedule: the rate halves every ``half_period`` steps."""
    return base_lr * 0.5 ** (step // half_period)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = 5e-4
    half_period: int = 15000
    skipped: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor], **kw) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()}, **kw)

    @property
    def lr(self) -> float:
        return lr_at(self.base_lr, self.step, self.half_period)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> bool:
    """Apply one Adam update in place.  Returns False (and skips) on non-finite grads."""
    for k, g in grads.items():
        if k not in state.m:
            raise KeyError(f"adam_step: no optimizer state for parameter {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs parameter {params[k].shape} for {k!r}")
        if not np.isfinite(g).all():
            state.skipped += 1
            log.warning("adam_step: non-finite gradient in %s at step %d; update skipped", k, state.step)
            return False
    lr = state.lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p = params[k].data
        p -= ((lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype, copy=False)
    return True


# --------------------------------------------------------------------------
# fused ops (single tape node each; verified against finite differences)
# --------------------------------------------------------------------------

def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Tensor:
    """One GRU update with gates stacked (z, r, n) along the weight rows.

    z = sig(Wz x + Uz h + bz); r = sig(Wr x + Ur h + br);
    n = tanh(Wn x + r * (Un h) + bn); h' = (1 - z) * n + z * h
    """
    H = h.shape[-1]
    if w_ih.shape != (3 * H, x.shape[-1]) or w_hh.shape != (3 * H, H) or bias.shape != (3 * H,):
        raise ShapeError(f"gru_cell: x {x.shape}, h {h.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    if h.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"gru_cell: input {x.shape} vs hidden {h.shape}")
    xd, hd, wi, wh = x.data, h.data, w_ih.data, w_hh.data
    gx = xd @ wi.T
    gx += bias.data
    gh = hd @ wh.T
    zr = gx[..., :2 * H] + gh[..., :2 * H]
    zr = 0.5 * (1.0 + np.tanh(0.5 * zr))
    z, r = zr[..., :H], zr[..., H:]
    hn = gh[..., 2 * H:]
    n = np.tanh(gx[..., 2 * H:] + r * hn)
    out = _new(n + z * (hd - n))

    def back(g):
        dn = g * (1.0 - z)
        dz = g * (hd - n)
        da_n = dn * (1.0 - n * n)
        dzr = np.concatenate([dz, da_n * hn], axis=-1) * zr * (1.0 - zr)
        dgx = np.concatenate([dzr, da_n], axis=-1)
        dgh = np.concatenate([dzr, da_n * r], axis=-1)
        dgx2 = dgx.reshape(-1, 3 * H)
        dgh2 = dgh.reshape(-1, 3 * H)
        return (dgx @ wi, g * z + dgh @ wh,
                dgx2.T @ xd.reshape(-1, xd.shape[-1]), dgh2.T @ hd.reshape(-1, H),
                dgx2.sum(axis=0))

    record("gru_cell", (x, h, w_ih, w_hh, bias), out, back)
    return out


def attention(qkv: Tensor, heads: int, keep: list | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention core.

    ``qkv`` is (..., N, 3W) holding queries, keys and values side by side;
    returns the (..., N, W) context before the output projection.  When
    ``keep`` is a list the (B, heads, N, N) weights are appended to it.
    """
    *lead, N, W3 = qkv.shape
    if W3 % (3 * heads):
        raise ShapeError(f"attention: width {W3 // 3} not divisible by {heads} heads")
    W = W3 // 3
    dh = W // heads
    scale = float(1.0 / np.sqrt(dh))
    t = qkv.data.reshape(-1, N, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = t[0], t[1], t[2]
    s = (q @ np.swapaxes(k, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    if keep is not None:
        keep.append(a)
    ctx = (a @ v).transpose(0, 2, 1, 3).reshape(tuple(lead) + (N, W))
    out = _new(ctx)

    def back(g):
        go = g.reshape(-1, N, heads, dh).transpose(0, 2, 1, 3)
        da = go @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(a, -1, -2) @ go
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4)
        return (dqkv.reshape(qkv.shape),)

    record("attention", (qkv,), out, back)
    return out


def block_linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Block-diagonal product with equal blocks.

    ``x`` (..., n*i), ``weight`` (n, o, i), ``bias`` (n*o,); block k maps
    input slice k to output slice k.
    """
    n, o, i = weight.shape
    if x.shape[-1] != n * i or bias.shape != (n * o,):
        raise ShapeError(f"block_linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    lead = x.shape[:-1]
    xb = x.data.reshape(-1, n, i).transpose(1, 0, 2)  # (n, M, i)
    wd = weight.data
    y = (xb @ np.swapaxes(wd, -1, -2)).transpose(1, 0, 2).reshape(lead + (n * o,))
    y += bias.data
    out = _new(y)

    def back(g):
        gb = g.reshape(-1, n, o).transpose(1, 0, 2)  # (n, M, o)
        gx = (gb @ wd).transpose(1, 0, 2).reshape(x.shape)
        gw = np.swapaxes(gb, -1, -2) @ xb
        return gx, gw, g.reshape(-1, n * o).sum(axis=0)

    record("block_linear", (x, weight, bias), out, back)
    return out


def sparse_linear(x: Tensor, weights: Sequence[Tensor], bias: Tensor) -> Tensor:
    """Block-diagonal product with arbitrary block sizes; ``weights[k]`` is (out_k, in_k)."""
    ins = [w.shape[1] for w in weights]
    outs = [w.shape[0] for w in weights]
    if x.shape[-1] != sum(ins) or bias.shape != (sum(outs),):
        raise ShapeError(f"sparse_linear: input {x.shape} vs blocks {list(zip(ins, outs))}")
    xd = x.data
    cin = np.cumsum([0] + ins)
    cout = np.cumsum([0] + outs)
    y = np.concatenate([xd[..., cin[k]:cin[k + 1]] @ w.data.T for k, w in enumerate(weights)], axis=-1)
    y += bias.data
    out = _new(y)

    def back(g):
        x2 = xd.reshape(-1, xd.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gx = np.concatenate([g[..., cout[k]:cout[k + 1]] @ w.data for k, w in enumerate(weights)], axis=-1)
        gws = [g2[:, cout[k]:cout[k + 1]].T @ x2[:, cin[k]:cin[k + 1]] for k in range(len(weights))]
        return (gx, *gws, g2.sum(axis=0))

    record("sparse_linear", (x, *weights, bias), out, back)
    return out
