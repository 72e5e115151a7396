"""Small dense-array engine with reverse-mode autodiff, Adam and a step LR schedule.

Every trainable computation in the package is expressed with :class:`Tensor`
values recorded on a :class:`Tape`.  Values are float64 numpy arrays; any
operation that produces NaN/Inf raises ``FloatingPointError``.

    tape = Tape()
    x = tape.param("x", np.array(3.0))
    loss = x * x
    tape.backward(loss)["x"]   # -> 6.0
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "tsum",
    "mean",
    "reshape",
    "concat",
    "take_rows",
    "conv2d",
    "avg_pool2d",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "sqdist",
    "group_mean",
    "adam_step",
    "lr_at_epoch",
    "finite_diff_check",
]


class Tensor:
    """An immutable float64 array, optionally attached to a tape node."""

    __slots__ = ("value", "_tape", "node")
    __array_priority__ = 100.0

    def __init__(self, value, tape: "Tape | None" = None, node: int | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        # weak, so tape -> backward closures -> tensor -> tape is not a cycle
        self._tape = weakref.ref(tape) if tape is not None else None
        self.node = node

    @property
    def tape(self) -> "Tape | None":
        return self._tape() if self._tape is not None else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Records primitive operations in creation (hence topological) order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, Tensor] = {}

    def param(self, name: str, value) -> Tensor:
        """Register a named leaf whose gradient :meth:`backward` reports."""
        if name in self.leaves:
            raise KeyError(f"leaf {name!r} already registered on this tape")
        t = Tensor(np.array(value, dtype=np.float64, copy=True), self, len(self.nodes))
        _check_finite(t.value, "param")
        self.nodes.append(_Node((), lambda g: ()))
        self.leaves[name] = t
        return t

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` with respect to every registered leaf.

        Gradients from multiple paths are summed; leaves that ``loss`` does not
        depend on get zeros.
        """
        if loss.value.ndim != 0 and loss.value.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: list = [None] * len(self.nodes)
        if loss.node is not None:
            if loss.tape is not self:
                raise ValueError("backward: loss was recorded on a different tape")
            grads[loss.node] = np.ones_like(loss.value)
            for i in range(loss.node, -1, -1):
                g = grads[i]
                if g is None:
                    continue
                node = self.nodes[i]
                if not node.parents:
                    continue
                for p, pg in zip(node.parents, node.vjp(g)):
                    if p is None or pg is None:
                        continue
                    grads[p] = pg if grads[p] is None else grads[p] + pg
        out = {}
        for name, leaf in self.leaves.items():
            g = grads[leaf.node]
            out[name] = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.shape)
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(value: np.ndarray, op: str) -> None:
    # a single reduction propagates any NaN/Inf
    if not np.isfinite(value.sum()):
        raise FloatingPointError(f"{op}: produced non-finite values")


def _emit(op: str, value, inputs: Sequence[Tensor], vjp) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    _check_finite(value, op)
    tracked = [t for t in inputs if t.node is not None]
    if not tracked:
        return Tensor(value)
    tape = tracked[0].tape
    if tape is None:
        raise ValueError(f"{op}: operand belongs to a tape that no longer exists")
    for t in tracked[1:]:
        if t.tape is not tape:
            raise ValueError(f"{op}: operands recorded on different tapes")

    def masked(g):
        # untracked inputs get no gradient
        return tuple(pg if t.node is not None else None for t, pg in zip(inputs, vjp(g)))

    node = len(tape.nodes)
    tape.nodes.append(_Node(tuple(t.node for t in inputs), masked))
    return Tensor(value, tape, node)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    return _emit("multiply", a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.value, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    y = np.maximum(a.value, 0.0)
    return _emit("relu", y, (a,), lambda g: (g * (y > 0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise FloatingPointError("log: non-positive input")
    return _emit("log", np.log(a.value), (a,), lambda g: (g / a.value,))


# reductions and shape ------------------------------------------------------

def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.value.ndim)
    y = a.value.sum(axis=axes)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _emit("sum", y, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.value.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    y = a.value.mean(axis=axes)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / n, a.shape).copy(),)

    return _emit("mean", y, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.value.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit("reshape", y, (a,), lambda g: (g.reshape(a.shape),))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        y = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit("concat", y, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_rows(a, index) -> Tensor:
    """Rows ``a[index]`` of a 2-D tensor; repeated indices accumulate gradient."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if a.value.ndim != 2:
        raise ValueError(f"take_rows: expected 2-D input, got {a.shape}")

    def vjp(g):
        gx = np.zeros_like(a.value)
        np.add.at(gx, index, g)
        return (gx,)

    return _emit("take_rows", a.value[index], (a,), vjp)


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.value @ b.value, (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g))


def conv2d(x, w, b=None, stride: int | tuple[int, int] = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation on channels-last input.

    x: (batch, height, width, in_ch); w: (kh, kw, in_ch, out_ch); b: (out_ch,).
    ``padding`` is ``"same"`` (output = ceil(in / stride)) or ``"valid"``.
    """
    x, w = as_tensor(x), as_tensor(w)
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {(sh, sw)}")
    if x.value.ndim != 4 or w.value.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    B, H, W, C = x.shape
    kh, kw, _, O = w.shape
    if padding == "same":
        Ho, Wo = -(-H // sh), -(-W // sw)
        ph = max((Ho - 1) * sh + kh - H, 0)
        pw = max((Wo - 1) * sw + kw - W, 0)
        pads = ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0))
    elif padding == "valid":
        pads = ((0, 0), (0, 0), (0, 0), (0, 0))
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    xp = np.pad(x.value, pads)
    Hp, Wp = xp.shape[1], xp.shape[2]
    if Hp < kh or Wp < kw:
        raise ValueError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    # (B, Ho, Wo, C, kh, kw) view, strided by the stride
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    Ho, Wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * C)
    wmat = w.value.reshape(kh * kw * C, O)
    y = (cols @ wmat).reshape(B, Ho, Wo, O)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ValueError(f"conv2d: bias shape {b.shape} does not match {O} output channels")
        y = y + b.value
        inputs.append(b)

    def vjp(g):
        g2 = g.reshape(B * Ho * Wo, O)
        gw = (cols.T @ g2).reshape(w.shape) if w.node is not None else None
        gx = None
        if x.node is not None:
            w4 = w.value
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw, :] += \
                        (g2 @ w4[i, j].T).reshape(B, Ho, Wo, C)
            gx = gxp[:, pads[1][0]:pads[1][0] + H, pads[2][0]:pads[2][0] + W, :]
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 1, 2)))
        return tuple(out)

    return _emit("conv2d", y, inputs, vjp)


def avg_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping average pooling on (batch, h, w, ch); trailing rows/cols are dropped."""
    x = as_tensor(x)
    if x.value.ndim != 4:
        raise ValueError(f"avg_pool2d: expected 4-D input, got {x.shape}")
    B, H, W, C = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise ValueError(f"avg_pool2d: input {x.shape} smaller than pool size {size}")
    crop = x.value[:, :Ho * size, :Wo * size, :]
    y = crop.reshape(B, Ho, size, Wo, size, C).mean(axis=(2, 4))

    def vjp(g):
        gx = np.zeros_like(x.value)
        view = gx[:, :Ho * size, :Wo * size, :].reshape(B, Ho, size, Wo, size, C)
        view[...] = (g / (size * size))[:, :, None, :, None, :]
        if Ho * size != H or Wo * size != W:
            gx[:, :Ho * size, :Wo * size, :] = view.reshape(B, Ho * size, Wo * size, C)
        return (gx,)

    return _emit("avg_pool2d", y, (x,), vjp)


# probabilities -------------------------------------------------------------

def _log_softmax_value(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z) -> Tensor:
    """Row softmax over the last axis with max subtraction."""
    z = as_tensor(z)
    p = np.exp(_log_softmax_value(z.value))

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (z,), vjp)


def log_softmax(z) -> Tensor:
    z = as_tensor(z)
    ls = _log_softmax_value(z.value)
    p = np.exp(ls)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", ls, (z,), vjp)


def cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[row, label]; labels are 0-based column ids."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"cross_entropy: label out of range for {logits.shape[1]} classes")
    rows = np.arange(labels.size)
    ls = _log_softmax_value(logits.value)
    n = labels.size

    def vjp(g):
        d = np.exp(ls)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _emit("cross_entropy", -ls[rows, labels].mean(), (logits,), vjp)


def sqdist(a, b) -> Tensor:
    """Pairwise squared Euclidean distances: (Q, D) x (P, D) -> (Q, P)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"squared-distance: incompatible shapes {a.shape} and {b.shape}")
    diff = a.value[:, None, :] - b.value[None, :, :]
    y = (diff * diff).sum(axis=-1)

    def vjp(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return _emit("squared-distance", y, (a, b), vjp)


def group_mean(x, groups: Sequence[Sequence[int]]) -> Tensor:
    """Row means of ``x`` over each index group, one output row per group.

    Each coordinate is summed in ascending value order, so the result does not
    depend on the order of rows inside a group, bit for bit.
    """
    x = as_tensor(x)
    if x.value.ndim != 2:
        raise ValueError(f"group_mean: expected 2-D input, got {x.shape}")
    rows = []
    for idx in groups:
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size == 0:
            raise ValueError("group_mean: empty group")
        s = np.sort(x.value[idx], axis=0)
        acc = s[0].copy()
        for r in s[1:]:
            acc += r
        rows.append(acc / idx.size)
    y = np.stack(rows)

    def vjp(g):
        gx = np.zeros_like(x.value)
        for k, idx in enumerate(groups):
            idx = np.asarray(idx, dtype=np.intp)
            gx[idx] += g[k] / idx.size
        return (gx,)

    return _emit("group_mean", y, (x,), vjp)


# optimisation ----------------------------------------------------------------

@dataclass
class AdamState:
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays."""
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be > 0, got {lr}")
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"adam_step: no gradient for {name!r}")
        if grads[name].shape != p.shape:
            raise ValueError(f"adam_step: {name!r} shape {p.shape} vs gradient {grads[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def lr_at_epoch(base_lr: float, epoch: int, factor: float = 0.5, every: int = 20) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base_lr * factor ** (epoch // every)


# gradient checking -----------------------------------------------------------

def finite_diff_check(fn: Callable[[Tape, dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
                      h: float = 1e-5, tol: float = 1e-4, coords: dict[str, np.ndarray] | None = None,
                      kink_retries: int = 3) -> dict[str, dict]:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn(tape, leaves)`` must build a scalar loss from the registered leaves.
    ``coords`` optionally restricts the check to flat indices per parameter.
    The error per parameter is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|, 1e-12)`` over the checked coordinates.

    A relu kink inside [x-h, x+h] makes the central difference meaningless.
    It shows up as disagreeing one-sided slopes, in which case the step is
    divided by 10 (at most ``kink_retries`` times) and the coordinate redone.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be > 0")

    def run(values):
        tape = Tape()
        leaves = {k: tape.param(k, v) for k, v in values.items()}
        return tape, fn(tape, leaves)

    tape, loss = run(params)
    f0 = float(loss.value)
    analytic = tape.backward(loss)
    report = {}
    for name, p in params.items():
        idx = np.arange(p.size) if coords is None or name not in coords else np.asarray(coords[name])
        a = analytic[name].ravel()[idx]
        n = np.empty(idx.size)
        refined = 0
        for k, flat in enumerate(idx):
            step = h
            for attempt in range(kink_retries + 1):
                shifted = dict(params)
                vals = []
                for sign in (1.0, -1.0):
                    q = p.copy().ravel()
                    q[flat] += sign * step
                    shifted[name] = q.reshape(p.shape)
                    vals.append(float(run(shifted)[1].value))
                plus, minus = vals
                fwd, bwd = (plus - f0) / step, (f0 - minus) / step
                n[k] = (plus - minus) / (2.0 * step)
                # rounding noise of a one-sided slope is about eps * |f| / step
                noise = 64 * np.finfo(float).eps * max(1.0, abs(f0)) / step
                smooth = abs(fwd - bwd) <= 1e-5 * max(abs(fwd), abs(bwd)) + noise
                if smooth or attempt == kink_retries:
                    break
                step /= 10.0
                refined += 1
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
        err = float(np.abs(a - n).max(initial=0.0) / scale)
        report[name] = {"max_rel_error": err, "passed": err < tol, "checked": int(idx.size),
                        "refined": refined}
    return report
