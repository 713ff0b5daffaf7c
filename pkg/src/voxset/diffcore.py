"""Dense arrays with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape every op is a plain numpy
computation, which is how inference and the finite-difference side of
:func:`grad_check` run.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffArray", "Tape", "DimensionError", "RankError", "UnreachableError",
    "BackwardError", "DegenerateBatchError", "InconsistencyError", "NaNInputError",
    "BatchNormState", "as_array", "make_op", "backward", "grad_check", "sabotage_vjp",
    "add", "sub", "mul", "scale", "matmul", "einsum", "relu", "softmax_lastdim",
    "batchnorm1d", "reshape", "transpose", "take_rows", "place_rows", "concat",
    "sum_all", "conv2d", "upsample2x", "crop2d",
]


class DimensionError(ValueError):
    pass


class RankError(ValueError):
    pass


class UnreachableError(RuntimeError):
    pass


class BackwardError(RuntimeError):
    pass


class DegenerateBatchError(ValueError):
    pass


class InconsistencyError(RuntimeError):
    pass


class NaNInputError(FloatingPointError):
    pass


class DiffArray:
    """A float array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, DiffArray):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}, dtype={self.dtype}{flag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)


def as_array(x, dtype=None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    if dtype is None:
        return DiffArray(np.asarray(x, dtype=np.float64))
    return DiffArray(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.sabotage = False
    return _state.tapes


def _active_tape():
    tapes = _stack()
    return tapes[-1] if tapes else None


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; ops executed inside it are recorded in
    topological order. A tape supports exactly one :meth:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def reset(self):
        self.nodes = []
        self._consumed = False

    def backward(self, loss: DiffArray) -> None:
        if loss.data.size != 1:
            raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is None or loss._tape[0] is not self:
            raise UnreachableError("loss was not produced on this tape")
        if self._consumed:
            raise BackwardError("backward already ran on this tape; call reset() first")
        self._consumed = True
        last = loss._tape[1]
        pending = {id(loss): np.ones_like(loss.data)}
        sabotaged = _stack_sabotaged()
        for node in reversed(self.nodes[: last + 1]):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is not None and inp._tape[0] is self:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
                else:
                    if sabotaged:
                        # flip only at the leaves so an even chain of ops cannot cancel it
                        gi = -gi
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
                    else:
                        inp.grad += gi
        # the nodes close over every intermediate; drop them now rather than
        # waiting for the cycle collector (outputs point back at this tape)
        self.nodes = []


def _stack_sabotaged() -> bool:
    _stack()
    return _state.sabotage


@contextmanager
def sabotage_vjp():
    """Negate every leaf gradient produced by backward while active (harness self-check)."""
    _stack()
    prev = _state.sabotage
    _state.sabotage = True
    try:
        yield
    finally:
        _state.sabotage = prev


def backward(tape: Tape, loss: DiffArray) -> None:
    tape.backward(loss)


def make_op(out_data: np.ndarray, inputs: Sequence[DiffArray],
            vjp: Callable[[np.ndarray], tuple]) -> DiffArray:
    """Wrap ``out_data`` as the result of a primitive.

    ``vjp`` maps the output cotangent to one cotangent (or None) per input.
    Nothing is recorded unless a tape is active and some input needs grad.
    """
    out = DiffArray(out_data)
    tape = _active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._tape = (tape, tape.record(_Node(tuple(inputs), out, vjp)))
    return out


def _check_finite(*arrays):
    for a in arrays:
        if np.isnan(a.data).any():
            raise NaNInputError("NaN in input")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, DiffArray):
        a = DiffArray(np.asarray(a, dtype=b.dtype if isinstance(b, DiffArray) else np.float64))
    if not isinstance(b, DiffArray):
        b = DiffArray(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b) -> DiffArray:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DiffArray:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> DiffArray:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: DiffArray, c: float) -> DiffArray:
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    _check_finite(a, b)
    ad, bd = a.data, b.data
    return make_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def einsum(subscripts: str, a: DiffArray, b: DiffArray) -> DiffArray:
    """Two-operand einsum. Every input index must appear in the other operand or the output."""
    ins, out = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if len(set(own)) != len(own) or any(c not in other and c not in out for c in own):
            raise DimensionError(f"unsupported einsum pattern {subscripts!r}")
    ad, bd = a.data, b.data
    res = np.einsum(subscripts, ad, bd, optimize=True)

    def vjp(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, bd, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, ad, optimize=True) if b.requires_grad else None
        return ga, gb

    return make_op(res, (a, b), vjp)


def relu(x: DiffArray) -> DiffArray:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def softmax_lastdim(x: DiffArray) -> DiffArray:
    _check_finite(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return make_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


class BatchNormState:
    """Running statistics of a batch-norm layer (not differentiated)."""

    def __init__(self, channels: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm1d(x: DiffArray, gamma: DiffArray, beta: DiffArray, state: BatchNormState,
                train: bool = True) -> DiffArray:
    """Per-channel normalization of an ``n x d`` array."""
    if x.ndim != 2:
        raise DimensionError(f"batchnorm1d expects n x d, got {x.shape}")
    n = x.shape[0]
    eps = state.eps
    if train:
        if n < 2:
            raise DegenerateBatchError(f"batch norm in train mode needs n >= 2, got {n}")
        mean = x.data.mean(axis=0)
        xc = x.data - mean
        var = (xc * xc).mean(axis=0)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
    else:
        mean = state.running_mean
        xc = x.data - mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        gx = g * gd
        if train:
            dx = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
        else:
            dx = gx * inv
        return dx, dgamma, dbeta

    return make_op(out, (x, gamma, beta), vjp)


def reshape(x: DiffArray, shape) -> DiffArray:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: DiffArray, axes) -> DiffArray:
    inv = np.argsort(axes)
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take_rows(x: DiffArray, idx: np.ndarray) -> DiffArray:
    """Gather ``x[idx]`` along axis 0; index -1 yields a zero row."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    missing = idx < 0
    if missing.any():
        padded = np.concatenate([x.data, np.zeros((1,) + x.shape[1:], dtype=x.dtype)])
        safe = np.where(missing, n, idx)
        out = padded[safe]
    else:
        safe = idx
        out = x.data[idx]

    def vjp(g):
        gx = np.zeros((n + 1,) + x.shape[1:], dtype=g.dtype)
        np.add.at(gx, safe.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (gx[:n],)

    return make_op(out, (x,), vjp)


def place_rows(x: DiffArray, idx: np.ndarray, n_out: int) -> DiffArray:
    """Write rows of ``x`` to distinct positions ``idx`` of a zero array with ``n_out`` rows."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise DimensionError("place_rows needs distinct target rows")
    out = np.zeros((n_out,) + x.shape[1:], dtype=x.dtype)
    out[idx] = x.data
    return make_op(out, (x,), lambda g: (g[idx],))


def concat(arrays: Sequence[DiffArray], axis: int = -1) -> DiffArray:
    datas = [a.data for a in arrays]
    ax = axis % datas[0].ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_op(np.concatenate(datas, axis=ax), tuple(arrays), vjp)


def sum_all(x: DiffArray) -> DiffArray:
    shape = x.shape
    return make_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[: (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
    # (ho, wo, C, kh, kw) -> rows ordered (kh, kw, C)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, -1)


def conv2d(x: DiffArray, w: DiffArray, b: DiffArray | None = None, stride: int = 1,
           padding: int = 1) -> DiffArray:
    """Dense 2-D convolution of an ``H x W x C`` map with a ``kh x kw x C x F`` kernel."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[2] != x.shape[2]:
        raise DimensionError(f"conv2d shape mismatch: {x.shape} with kernel {w.shape}")
    h, wd, c = x.shape
    kh, kw, _, f = w.shape
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(kh * kw * c, f)
    out = cols @ wmat
    if b is not None:
        out = out + b.data
    out = out.reshape(ho, wo, f)
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(ho * wo, f)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and padding <= min(kh, kw) - 1:
            # full correlation of g with the flipped kernel
            gp = np.pad(g, ((kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2, (0, 0)))
            wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * f, c)
            gx = (_im2col(gp, kh, kw, 1, h, wd) @ wflip).reshape(h, wd, c)
        elif x.requires_grad:
            gcols =(g2 @ wmat.T).reshape(ho, wo, kh, kw, c)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[i: i + (ho - 1) * stride + 1: stride,
                        j: j + (wo - 1) * stride + 1: stride] += gcols[:, :, i, j]
            gx = gxp[padding: padding + h, padding: padding + wd]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op(out, inputs, vjp)


def upsample2x(x: DiffArray) -> DiffArray:
    """Nearest-neighbour 2x upsampling of an ``H x W x C`` map."""
    h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    return make_op(out, (x,), lambda g: (g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)),))


def crop2d(x: DiffArray, h: int, w: int) -> DiffArray:
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:h, :w] = g
        return (gx,)

    return make_op(x.data[:h, :w].copy(), (x,), vjp)


def grad_check(f: Callable, x, eps: float = 1e-6) -> float:
    """Max relative error between backward gradients and central differences.

    ``x`` is a DiffArray or a sequence of them (then ``f`` is called as
    ``f(*x)``). The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    xs = [x] if isinstance(x, DiffArray) else list(x)
    call = (lambda args: f(*args)) if not isinstance(x, DiffArray) else (lambda args: f(args[0]))

    leaves = [DiffArray(a.data.copy(), requires_grad=True) for a in xs]
    with Tape() as tape:
        y = call(leaves)
    tape.backward(y)
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    plain = [DiffArray(a.data.copy()) for a in xs]

    def value():
        return float(call(plain).data)

    base = value()
    if value() != base:
        raise InconsistencyError("function is not deterministic across calls")
    worst = 0.0
    for p, ga in zip(plain, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
    return worst
