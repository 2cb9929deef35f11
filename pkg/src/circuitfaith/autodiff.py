"""Dense float64 tensors with a reverse-mode tape.

Only the primitives the toy transformers and their losses need are provided.
Arrays are stored as numpy float64; the differentiation rules are our own.

Usage::

    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum()
    grads = backward(tape, y)
    grads[id(x)]  # -> array([2., 4., 6.])
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    # make numpy defer to our operators, e.g. ndarray * Tensor -> Tensor.__rmul__
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar -- every operator routes through `apply`
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose_last(self):
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Primitive:
    """One differentiable operation.

    ``fwd(*arrays, **params) -> (out, saved)``; ``bwd(g, saved, *arrays, **params)``
    returns one gradient array (or None) per input.
    """

    name: str
    fwd: Callable
    bwd: Callable
    arity: int


@dataclass
class TapeEntry:
    prim: Primitive
    inputs: tuple[Tensor, ...]
    output: Tensor
    params: dict
    saved: object


@dataclass
class Tape:
    entries: list[TapeEntry] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def replay(self) -> bool:
        """Recompute every entry from its recorded inputs; True iff bit-identical."""
        for e in self.entries:
            out, _ = e.prim.fwd(*(t.data for t in e.inputs), **e.params)
            if out.shape != e.output.data.shape or not np.array_equal(out, e.output.data, equal_nan=True):
                return False
        return True


def apply(prim: Primitive, *inputs, **params) -> Tensor:
    ts = tuple(as_tensor(x) for x in inputs)
    out, saved = prim.fwd(*(t.data for t in ts), **params)
    needs = any(t.requires_grad for t in ts)
    res = Tensor(out, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.entries.append(TapeEntry(prim, ts, res, params, saved))
    return res


def backward(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(output)/d(t) for every tensor on a recorded path to ``output``.

    Gradients are returned keyed by ``id(tensor)`` and also stored on ``.grad``.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    owners: dict[int, Tensor] = {id(output): output}
    # entries are appended in execution order, hence reversed order is a reverse topological order
    for e in reversed(tape.entries):
        g = grads.get(id(e.output))
        if g is None:
            continue
        in_grads = e.prim.bwd(g, e.saved, *(t.data for t in e.inputs), **e.params)
        for t, gi in zip(e.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = t
    for key, t in owners.items():
        t.grad = grads[key]
    tape.grads = grads
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def _add_f(a, b):
    _check_broadcast("add", a, b)
    return a + b, None


def _add_b(g, _, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_f(a, b):
    _check_broadcast("sub", a, b)
    return a - b, None


def _sub_b(g, _, a, b):
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _mul_f(a, b):
    _check_broadcast("mul", a, b)
    return a * b, None


def _mul_b(g, _, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _matmul_f(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    return np.matmul(a, b), None


def _matmul_b(g, _, a, b):
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _sum_f(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims), None


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _sum_b(g, _, a, axis=None, keepdims=False):
    return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)


def _mean_f(a, axis=None, keepdims=False):
    return np.mean(a, axis=axis, keepdims=keepdims), None


def _mean_b(g, _, a, axis=None, keepdims=False):
    n = a.size / max(np.size(np.mean(a, axis=axis)), 1)
    return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / n,)


def _reshape_f(a, shape=()):
    if math.prod(shape) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return a.reshape(shape), None


def _reshape_b(g, _, a, shape=()):
    return (g.reshape(a.shape),)


def _swap_f(a):
    if a.ndim < 2:
        raise ShapeError(f"swap_last: need ndim >= 2, got {a.shape}")
    return np.swapaxes(a, -1, -2), None


def _swap_b(g, _, a):
    return (np.swapaxes(g, -1, -2),)


def _relu_f(a):
    return np.maximum(a, 0.0), None


def _relu_b(g, _, a):
    # derivative at exactly 0 is taken as 0
    return (g * (a > 0.0),)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_f(a):
    inner = _GELU_C * (a + 0.044715 * a**3)
    t = np.tanh(inner)
    return 0.5 * a * (1.0 + t), t


def _gelu_b(g, t, a):
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * a**2)
    return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t**2) * d_inner),)


def _sigmoid_f(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, out


def _sigmoid_b(g, s, a):
    return (g * s * (1.0 - s),)


def _exp_f(a):
    out = np.exp(a)
    return out, out


def _exp_b(g, out, a):
    return (g * out,)


def _log_f(a):
    with np.errstate(invalid="ignore", divide="ignore"):  # nan/-inf are reported by callers
        return np.log(a), None


def _log_b(g, _, a):
    return (g / a,)


def _softmax_np(a, axis=-1):
    z = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _log_softmax_np(a, axis=-1):
    z = a - np.max(a, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def _softmax_f(a, axis=-1):
    out = _softmax_np(a, axis)
    return out, out


def _softmax_b(g, s, a, axis=-1):
    return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)


def _log_softmax_f(a, axis=-1):
    out = _log_softmax_np(a, axis)
    return out, out


def _log_softmax_b(g, ls, a, axis=-1):
    s = np.exp(ls)
    return (g - s * np.sum(g, axis=axis, keepdims=True),)


def _mse_f(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    d = a - b
    return np.mean(d * d), d


def _mse_b(g, d, a, b):
    ga = g * 2.0 * d / d.size
    return ga, -ga


def _kl_f(p_logits, q_logits):
    """Mean over leading axes of KL(softmax(p) || softmax(q)) along the last axis."""
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"kl: shapes differ {p_logits.shape} vs {q_logits.shape}")
    lp = _log_softmax_np(p_logits)
    lq = _log_softmax_np(q_logits)
    p = np.exp(lp)
    rows = max(p.size // p.shape[-1], 1)
    return np.sum(p * (lp - lq)) / rows, (p, lp, lq, rows)


def _kl_b(g, saved, p_logits, q_logits):
    p, lp, lq, rows = saved
    q = np.exp(lq)
    diff = lp - lq
    inner = np.sum(p * diff, axis=-1, keepdims=True)
    gp = p * (diff - inner)
    gq = q - p
    return g * gp / rows, g * gq / rows


ADD = Primitive("add", _add_f, _add_b, 2)
SUB = Primitive("sub", _sub_f, _sub_b, 2)
MUL = Primitive("mul", _mul_f, _mul_b, 2)
MATMUL = Primitive("matmul", _matmul_f, _matmul_b, 2)
SUM = Primitive("sum", _sum_f, _sum_b, 1)
MEAN = Primitive("mean", _mean_f, _mean_b, 1)
RESHAPE = Primitive("reshape", _reshape_f, _reshape_b, 1)
SWAP_LAST = Primitive("swap_last", _swap_f, _swap_b, 1)
RELU = Primitive("relu", _relu_f, _relu_b, 1)
GELU = Primitive("gelu_tanh", _gelu_f, _gelu_b, 1)
SIGMOID = Primitive("sigmoid", _sigmoid_f, _sigmoid_b, 1)
EXP = Primitive("exp", _exp_f, _exp_b, 1)
LOG = Primitive("log", _log_f, _log_b, 1)
SOFTMAX = Primitive("softmax", _softmax_f, _softmax_b, 1)
LOG_SOFTMAX = Primitive("log_softmax", _log_softmax_f, _log_softmax_b, 1)
MSE = Primitive("mse", _mse_f, _mse_b, 2)
KL = Primitive("kl", _kl_f, _kl_b, 2)

PRIMITIVES = {
    p.name: p
    for p in (ADD, SUB, MUL, MATMUL, SUM, MEAN, RESHAPE, SWAP_LAST, RELU, GELU,
              SIGMOID, EXP, LOG, SOFTMAX, LOG_SOFTMAX, MSE, KL)
}


def forward_primitive(op: str, *inputs, **params) -> Tensor:
    try:
        prim = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    if len(inputs) != prim.arity:
        raise ValueError(f"{op} takes {prim.arity} inputs, got {len(inputs)}")
    return apply(prim, *inputs, **params)


def add(a, b) -> Tensor:
    return apply(ADD, a, b)


def sub(a, b) -> Tensor:
    return apply(SUB, a, b)


def mul(a, b) -> Tensor:
    return apply(MUL, a, b)


def matmul(a, b) -> Tensor:
    return apply(MATMUL, a, b)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    return apply(SUM, a, axis=axis, keepdims=keepdims)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    return apply(MEAN, a, axis=axis, keepdims=keepdims)


def reshape(a, shape) -> Tensor:
    return apply(RESHAPE, a, shape=tuple(shape))


def swap_last(a) -> Tensor:
    return apply(SWAP_LAST, a)


def relu(a) -> Tensor:
    return apply(RELU, a)


def gelu(a) -> Tensor:
    return apply(GELU, a)


def sigmoid(a) -> Tensor:
    return apply(SIGMOID, a)


def exp(a) -> Tensor:
    return apply(EXP, a)


def log(a) -> Tensor:
    return apply(LOG, a)


def softmax(a, axis: int = -1) -> Tensor:
    return apply(SOFTMAX, a, axis=axis)


def log_softmax(a, axis: int = -1) -> Tensor:
    return apply(LOG_SOFTMAX, a, axis=axis)


def mse(a, b) -> Tensor:
    return apply(MSE, a, b)


def kl_div(p_logits, q_logits) -> Tensor:
    """KL(softmax(p) || softmax(q)), averaged over all leading positions."""
    return apply(KL, p_logits, q_logits)


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheck:
    max_rel_error: float
    # flat coordinates on (or within one step of) a kink, or with non-finite values
    noncomparable: list[int]
    finite: bool = True


def check_gradients(f: Callable[[Tensor], Tensor], point, step: float = 1e-4) -> GradCheck:
    """Compare the tape gradient of scalar ``f`` at ``point`` with central differences.

    The relative error per coordinate is ``|analytic - fd| / (|analytic| + 1e-8)``,
    after discounting the rounding error the difference quotient can carry.
    A coordinate is non-comparable when the one-sided slopes keep disagreeing
    as the step shrinks (a kink at the point) or when the central difference
    changes with the step (a kink inside the stencil). Those are reported and
    left out of the maximum.
    """
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1 or not np.isfinite(y.data).all():
        return GradCheck(math.inf, [], finite=False)
    backward(tape, y)
    analytic = np.zeros(x0.size) if x.grad is None else x.grad.reshape(-1)
    f0 = float(y.data)
    flat = x0.reshape(-1)

    def value(i, delta):
        arr = flat.copy()
        arr[i] += delta
        return float(f(Tensor(arr.reshape(x0.shape))).data)

    worst = 0.0
    bad: list[int] = []
    finite = True
    small = step / 10
    for i in range(flat.size):
        fp, fm = value(i, step), value(i, -step)
        sp, sm = value(i, small), value(i, -small)
        if not all(math.isfinite(v) for v in (fp, fm, sp, sm)):
            finite = False
            bad.append(i)
            continue
        gap = (fp - f0) / step - (f0 - fm) / step
        gap_small = (sp - f0) / small - (f0 - sm) / small
        fd = (fp - fm) / (2 * step)
        fd_small = (sp - sm) / (2 * small)
        at_kink = abs(gap) > 1e-7 and abs(gap_small) > 0.5 * abs(gap)
        near_kink = abs(fd - fd_small) > 1e-3 * abs(fd_small) + 1e-7
        if at_kink or near_kink:
            bad.append(i)
            continue
        a = float(analytic[i])
        # Rounding in f alone can move the central difference by this much.
        noise = 16 * np.finfo(float).eps * max(abs(f0), abs(fp), abs(fm)) / step
        worst = max(worst, max(abs(a - fd) - noise, 0.0) / (abs(a) + 1e-8))
    return GradCheck(worst if finite else math.inf, bad, finite)


def stack_sum(terms: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum; the fixed order keeps results bit-reproducible."""
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc
