"""Dense tensors with a recording tape and reverse-mode differentiation.

Every differentiable computation in the package goes through :func:`apply`,
which dispatches to a small kernel set.  Kernels return the forward value and
a closure computing input gradients; the closure is kept on the tape of the
current thread and replayed in reverse by :func:`backward`.

Shapes must match exactly except where noted: boolean masks broadcast onto
softmax logits, ``linear`` adds a 1-D bias row, and ``matmul`` accepts a 2-D
right operand against batched left operands.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, DegenerateRowError, DeterminismError

IGNORE_INDEX = -100

_node_ids = itertools.count(1)
_local = threading.local()


def _state():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.enabled = True
        _local.dtype = np.float32
    return _local


def default_dtype():
    return _state().dtype


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors on this thread."""
    st = _state()
    old = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = old


@contextmanager
def no_grad():
    st = _state()
    old = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "is_leaf")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.name = name
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


def parameter(data, name=None, dtype=None):
    return Tensor(np.array(data, dtype=dtype or default_dtype()), requires_grad=True, name=name)


def constant(data, dtype=None):
    return Tensor(np.asarray(data, dtype=dtype or default_dtype()))


@dataclass
class OpRecord:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    records: list = field(default_factory=list)

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


def current_tape() -> Tape:
    return _state().tape


def reset_tape():
    _state().tape.clear()


# ---------------------------------------------------------------------------
# kernels: each returns (output array, backward(grad) -> list of input grads)


def _shape_error(op, a, b):
    return ContractViolation(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")


def _k_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = a @ b

    def bw(g, need):
        ga = gb = None
        if need[0]:
            ga = g @ np.swapaxes(b, -1, -2)
        if need[1]:
            if b.ndim == 2:
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a, -1, -2) @ g
        return [ga, gb]

    return out, bw


def _k_linear(x, w, b=None):
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise _shape_error("linear", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise _shape_error("linear bias", b.shape, (w.shape[1],))
    out = x @ w
    if b is not None:
        out = out + b

    def bw(g, need):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.T if need[0] else None
        gw = x.reshape(-1, x.shape[-1]).T @ g2 if need[1] else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0) if need[2] else None)
        return grads

    return out, bw


def _k_add(a, b):
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    return a + b, lambda g, need: [g, g]


def _k_mul(a, b):
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    return a * b, lambda g, need: [g * b if need[0] else None, g * a if need[1] else None]


def _k_scale(x, factor):
    f = x.dtype.type(factor)
    return x * f, lambda g, need: [g * f]


def _k_concat(*xs, axis=-1):
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise _shape_error("concat", ref.shape, x.shape)
    out = np.concatenate(xs, axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(g, need):
        grads = []
        for i in range(len(xs)):
            if need[i]:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(bounds[i], bounds[i + 1])
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
        return grads

    return out, bw


def _k_slice(x, axis=-1, start=0, stop=None):
    ax = axis % x.ndim
    stop = x.shape[ax] if stop is None else stop
    if not 0 <= start <= stop <= x.shape[ax]:
        raise ContractViolation(f"slice: [{start}:{stop}] out of range for axis extent {x.shape[ax]}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def bw(g, need):
        gx = np.zeros_like(x)
        gx[idx] = g
        return [gx]

    return x[idx], bw


def _k_embedding(table, ids):
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ContractViolation(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation(
            f"embedding: id out of range [0, {table.shape[0]}) (min {ids.min()}, max {ids.max()})"
        )
    out = table[ids]

    def bw(g, need):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return [gt]

    return out, bw


def _k_layer_norm(x, gamma, beta, eps=1e-5):
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise _shape_error("layer_norm", x.shape, gamma.shape)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma + beta

    def bw(g, need):
        n = x.shape[-1]
        gxhat = g * gamma
        gx = None
        if need[0]:
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, n)
        gg = (flat * xhat.reshape(-1, n)).sum(axis=0) if need[1] else None
        gb = flat.sum(axis=0) if need[2] else None
        return [gx, gg, gb]

    return out, bw


_GELU_C = np.sqrt(2.0 / np.pi)


def _k_gelu(x):
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    x2 = x * x
    t = x2 * k
    t += 1.0
    t *= x
    t *= c
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def bw(g, need):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3k x^2)
        d = x2 * (3.0 * k)
        d += 1.0
        d *= c
        d *= x
        d *= 1.0 - t * t
        d += 1.0 + t
        d *= 0.5
        d *= g
        return [d]

    return out, bw


def _k_masked_softmax(x, mask=None):
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            full = np.broadcast_shapes(mask.shape, x.shape)
        except ValueError:
            raise _shape_error("masked_softmax mask", mask.shape, x.shape) from None
        if full != x.shape:
            raise _shape_error("masked_softmax mask", mask.shape, x.shape)
        # broadcasting repeats rows, so checking the compact mask is enough
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("masked_softmax: a row has every position masked")
        z = np.where(mask, x, -np.inf)
        z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z, out=z)
    p /= p.sum(axis=-1, keepdims=True)

    def bw(g, need):
        gx = g * p
        gx -= p * gx.sum(axis=-1, keepdims=True)
        return [gx]

    return p, bw


def _k_cross_entropy(logits, targets=None, ignore_index=IGNORE_INDEX):
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise _shape_error("cross_entropy targets", targets.shape, logits.shape[:-1])
    v = logits.shape[-1]
    flat = logits.reshape(-1, v)
    t = targets.reshape(-1)
    valid = t != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ContractViolation("cross_entropy: every position carries the ignore index")
    rows = np.nonzero(valid)[0]
    tv = t[rows]
    if tv.min() < 0 or tv.max() >= v:
        raise ContractViolation(f"cross_entropy: target id out of range [0, {v})")
    sub = flat[rows]
    m = sub.max(axis=-1, keepdims=True)
    e = np.exp(sub - m)
    s = e.sum(axis=-1, keepdims=True)
    lse = (np.log(s) + m)[:, 0]
    loss = (lse - sub[np.arange(len(rows)), tv]).sum() / count
    out = np.asarray(loss, dtype=logits.dtype)

    def bw(g, need):
        p = e / s
        p[np.arange(len(rows)), tv] -= 1.0
        gf = np.zeros_like(flat)
        gf[rows] = p * (g / count)
        return [gf.reshape(logits.shape)]

    return out, bw


def _k_mean(x, axis=None):
    out = np.asarray(x.mean(axis=axis), dtype=x.dtype)
    n = x.size if axis is None else x.shape[axis]

    def bw(g, need):
        if axis is None:
            return [np.full_like(x, g / n)]
        return [np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy()]

    return out, bw


def _k_sum(x, axis=None):
    out = np.asarray(x.sum(axis=axis), dtype=x.dtype)

    def bw(g, need):
        if axis is None:
            return [np.full_like(x, g)]
        return [np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()]

    return out, bw


def _k_sigmoid_bce(logits, labels=None):
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise _shape_error("sigmoid_bce labels", y.shape, logits.shape)
    x = logits
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean()
    out = np.asarray(loss, dtype=x.dtype)

    def bw(g, need):
        sig = 1.0 / (1.0 + np.exp(-x))
        return [(sig - y) * (g / x.size)]

    return out, bw


def _k_reshape(x, shape=None):
    out = x.reshape(shape)
    return out, lambda g, need: [g.reshape(x.shape)]


def _k_transpose(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return np.transpose(x, axes), lambda g, need: [np.transpose(g, inv)]


def _k_expand(x, n=1):
    out = np.broadcast_to(x, (n,) + x.shape).copy()
    return out, lambda g, need: [g.sum(axis=0)]


def _k_max(x, axis=-1):
    ax = axis % x.ndim
    idx = np.argmax(x, axis=ax)
    out = np.take_along_axis(x, np.expand_dims(idx, ax), axis=ax).squeeze(ax)

    def bw(g, need):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return [gx]

    return out, bw


def _k_normalize(x, eps=1e-12):
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True) + x.dtype.type(eps))
    y = x / norm

    def bw(g, need):
        return [(g - y * (g * y).sum(axis=-1, keepdims=True)) / norm]

    return y, bw


KERNELS = {
    "matmul": _k_matmul,
    "linear": _k_linear,
    "add": _k_add,
    "mul": _k_mul,
    "scale": _k_scale,
    "concat": _k_concat,
    "slice": _k_slice,
    "embedding_lookup": _k_embedding,
    "layer_norm": _k_layer_norm,
    "gelu": _k_gelu,
    "masked_softmax": _k_masked_softmax,
    "cross_entropy": _k_cross_entropy,
    "mean": _k_mean,
    "sum": _k_sum,
    "sigmoid_bce": _k_sigmoid_bce,
    "reshape": _k_reshape,
    "transpose": _k_transpose,
    "expand": _k_expand,
    "max": _k_max,
    "normalize": _k_normalize,
}

_ALIASES = {
    "concat_last_dim": "concat",
    "embedding": "embedding_lookup",
    "masked_softmax_last_dim": "masked_softmax",
    "cross_entropy_from_logits": "cross_entropy",
}


def apply(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run one kernel and record it on the current thread's tape."""
    key = op_kind.replace("-", "_")
    key = _ALIASES.get(key, key)
    try:
        kernel = KERNELS[key]
    except KeyError:
        raise ContractViolation(f"unknown op kind {op_kind!r}") from None
    inputs = tuple(inputs)
    values, bw = kernel(*(t.data for t in inputs), **attrs)
    st = _state()
    track = st.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=track, dtype=values.dtype)
    if track:
        out.is_leaf = False
        st.tape.records.append(OpRecord(key, inputs, out, bw))
    return out


# thin functional wrappers -------------------------------------------------

def matmul(a, b):
    return apply("matmul", (a, b))


def linear(x, w, b=None):
    return apply("linear", (x, w) if b is None else (x, w, b))


def add(a, b):
    return apply("add", (a, b))


def mul(a, b):
    return apply("mul", (a, b))


def scale(x, factor):
    return apply("scale", (x,), factor=float(factor))


def concat(xs, axis=-1):
    return apply("concat", tuple(xs), axis=axis)


def slice_(x, start, stop, axis=-1):
    return apply("slice", (x,), axis=axis, start=start, stop=stop)


def embedding_lookup(table, ids):
    return apply("embedding_lookup", (table,), ids=np.asarray(ids, dtype=np.int64))


def layer_norm(x, gamma, beta, eps=1e-5):
    return apply("layer_norm", (x, gamma, beta), eps=eps)


def gelu(x):
    return apply("gelu", (x,))


def masked_softmax(x, mask=None):
    return apply("masked_softmax", (x,), mask=mask)


def cross_entropy(logits, targets, ignore_index=IGNORE_INDEX):
    return apply("cross_entropy", (logits,), targets=np.asarray(targets), ignore_index=ignore_index)


def mean(x, axis=None):
    return apply("mean", (x,), axis=axis)


def sum_(x, axis=None):
    return apply("sum", (x,), axis=axis)


def sigmoid_bce(logits, labels):
    return apply("sigmoid_bce", (logits,), labels=np.asarray(labels))


def reshape(x, shape):
    return apply("reshape", (x,), shape=tuple(shape))


def transpose(x, axes=None):
    return apply("transpose", (x,), axes=axes)


def expand(x, n):
    return apply("expand", (x,), n=int(n))


def max_(x, axis=-1):
    return apply("max", (x,), axis=axis)


def normalize(x):
    return apply("normalize", (x,))


# ---------------------------------------------------------------------------


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> dict:
    """Propagate d(loss) back through the tape.

    Returns ``{node_id: gradient}`` for every trainable leaf reached.  Leaves
    listed in ``params`` that the loss does not reach get an explicit zero
    gradient.  Gradients are also accumulated into ``Tensor.grad``.  The tape
    is cleared afterwards.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractViolation(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = current_tape()
    if not tape.records:
        raise ContractViolation("backward: tape is empty")
    grads = {loss.node_id: np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.node_id, None)
        if g is None:
            continue
        need = [t.requires_grad for t in rec.inputs]
        for t, gi in zip(rec.inputs, rec.backward(g, need)):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi
            if t.is_leaf:
                leaves[t.node_id] = t
    tape.clear()
    out = {}
    for nid, t in leaves.items():
        g = grads[nid].astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
        out[nid] = g
    for p in params or ():
        if p.requires_grad and p.node_id not in out:
            zero = np.zeros_like(p.data)
            if p.grad is None:
                p.grad = zero
            out[p.node_id] = zero
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    worst: str = ""


def finite_difference_check(f, point, epsilon=1e-6, tolerance=1e-5, max_coords=None, seed=0):
    """Compare analytic gradients with central differences.

    ``point`` is a tensor (``f(point)``) or a list of tensors (``f(*point)``).
    The relative error of each coordinate is ``|a - n| / max(1, |a|)``.
    """
    if epsilon <= 0:
        raise ContractViolation("finite_difference_check: epsilon must be positive")
    points = [point] if isinstance(point, Tensor) else list(point)
    call = (lambda: f(points[0])) if isinstance(point, Tensor) else (lambda: f(*points))

    with no_grad():
        first = np.array(call().data, copy=True)
        second = np.array(call().data, copy=True)
    if first.shape != () or not np.array_equal(first, second):
        if first.shape != ():
            raise ContractViolation("finite_difference_check: f must return a scalar")
        raise DeterminismError("finite_difference_check: repeated evaluations differ")

    for p in points:
        p.requires_grad = True
        p.grad = None
    reset_tape()
    grads = backward(call(), params=points)

    rng = np.random.default_rng(seed)
    worst, worst_at, n = 0.0, "", 0
    for pi, p in enumerate(points):
        analytic = grads[p.node_id].reshape(-1)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                fp = float(call().data)
                flat[i] = orig - epsilon
                fm = float(call().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * epsilon)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            n += 1
            if err > worst:
                worst, worst_at = float(err), f"{p.name or f'point{pi}'}[{i}]"
    return GradCheckReport(worst, worst <= tolerance, n, worst_at)
