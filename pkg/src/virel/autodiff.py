"""A small reverse-mode autodiff kernel over numpy arrays.

Operations on :class:`Tensor` objects are recorded on the active :class:`Tape`
(``with Tape() as tape: ...``). :func:`backward` replays the tape in reverse and
returns gradients for every leaf created with ``requires_grad=True``. The tape
is never mutated by ``backward``, so it can be replayed any number of times.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
_active: list["Tape"] = []
_decisions: list | None = None


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "on_tape")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(value, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name
        self.on_tape = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_lift(other, self.dtype), self)


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


@dataclass
class Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)


def _record(kind, inputs, out_value, vjp) -> Tensor:
    out = Tensor(out_value)
    if _active and any(t.requires_grad or t.on_tape for t in inputs):
        out.on_tape = True
        _active[-1].records.append(Record(kind, tuple(inputs), out, vjp))
    return out


class record_decisions:
    """Collect the branch taken by every piecewise primitive (leaky_relu, maxpool2d).

    Finite-difference checks use this to confirm both probe points lie on the
    same linear piece.
    """

    def __enter__(self):
        global _decisions
        self._prev, _decisions = _decisions, []
        return _decisions

    def __exit__(self, *exc):
        global _decisions
        _decisions = self._prev


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_finite(arr: np.ndarray, kind: str):
    if __debug__ and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite value produced by {kind}")


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a.dtype if isinstance(a, Tensor) else None)
    try:
        out = a.value + b.value
    except ValueError as e:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    try:
        out = a.value * b.value
    except ValueError as e:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from e
    av, bv = a.value, b.value
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.value > 0
    if _decisions is not None:
        _decisions.append(pos)
    out = np.where(pos, x.value, slope * x.value)
    return _record("leaky_relu", (x,), out, lambda g: (np.where(pos, g, slope * g),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    _check_finite(out, "exp")
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xv = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xv)
    _check_finite(out, "log")
    return _record("log", (x,), out, lambda g: (g / xv,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(f"reshape: {src} -> {tuple(shape)}") from e
    return _record("reshape", (x,), out, lambda g: (g.reshape(src),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_lift(x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {[x.shape for x in xs]}") from e
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record("concat", tuple(xs), out, lambda g: tuple(np.split(g, splits, axis=axis)))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    src = x.shape
    out = x.value.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", (x,), out, vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    src = x.shape
    n = x.value.size if axis is None else src[axis]
    out = x.value.mean(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _record("mean", (x,), out, vjp)


def l2_norm(x: Tensor, axis: int | None = None) -> Tensor:
    """Euclidean norm; the gradient at the origin is taken to be zero."""
    xv = x.value
    out = np.sqrt((xv * xv).sum(axis=axis))

    def vjp(g):
        n = out if axis is None else np.expand_dims(out, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1)
        return (np.where(n > 0, gg * xv / safe, 0).astype(xv.dtype),)

    return _record("l2_norm", (x,), out, vjp)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row-wise softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    lv = logits.value
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ShapeMismatch(f"softmax_cross_entropy: logits {lv.shape}, labels {labels.shape}")
    shifted = lv - lv.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(len(labels))
    out = np.asarray(-logp[rows, labels].mean(), dtype=lv.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (g * p / len(labels),)

    return _record("softmax_cross_entropy", (logits,), out, vjp)


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n,h,w,c,3,3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def _conv(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    n, h, w, _ = x.shape
    return (_im2col(x) @ k.reshape(-1, k.shape[-1])).reshape(n, h, w, k.shape[-1])


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1. x: (N,H,W,Cin), kernel: (3,3,Cin,Cout)."""
    xv, kv = x.value, kernel.value
    if xv.ndim != 4 or kv.shape[:2] != (3, 3) or kv.shape[2] != xv.shape[3]:
        raise ShapeMismatch(f"conv2d: input {xv.shape}, kernel {kv.shape}")
    cols = _im2col(xv)
    out = (cols @ kv.reshape(-1, kv.shape[-1])).reshape(xv.shape[:3] + (kv.shape[-1],))

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        dk = (cols.T @ g2).reshape(kv.shape)
        dx = _conv(g, kv[::-1, ::-1].transpose(0, 1, 3, 2))
        return dx, dk

    return _record("conv2d", (x, kernel), out, vjp)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over (N,H,W,C); ties route to the first max."""
    xv = x.value
    n, h, w, c = xv.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"maxpool2d: odd spatial extent {xv.shape}")
    win = xv.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)
    if _decisions is not None:
        # a tie is its own branch
        top = np.sort(win, axis=-1)
        _decisions.append(np.where(top[..., -1] == top[..., -2], -1, arg))
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (dx,)

    return _record("maxpool2d", (x,), out, vjp)


PRIMITIVES = {
    "matmul": matmul, "conv2d": conv2d, "maxpool2d": maxpool2d, "leaky_relu": leaky_relu,
    "add": add, "mul": mul, "concat": concat, "reshape": reshape, "sum": sum, "mean": mean,
    "softmax_cross_entropy": softmax_cross_entropy, "l2_norm": l2_norm, "exp": exp, "log": log,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every parameter leaf on the tape."""
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    params: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not (inp.requires_grad or inp.on_tape):
                continue
            if inp.requires_grad:
                params[id(inp)] = inp
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
    return {p: grads[i].reshape(p.shape) for i, p in params.items()}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """In-place bias-corrected Adam update; parameters without a gradient see g = 0."""
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        if state.weight_decay:
            g = g + state.weight_decay * p.value
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.value -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.value.dtype)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: dict[str, Tensor], path: str | Path, extra: dict | None = None) -> None:
    header = {"schema_version": 1,
              "params": [{"name": n, "shape": list(p.shape)} for n, p in params.items()]}
    if extra:
        header["meta"] = extra
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, separators=(",", ":")) + "\n").encode())
        for p in params.values():
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("schema_version") != 1:
            raise ValueError(f"unsupported checkpoint schema {header.get('schema_version')!r}")
        out = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"truncated checkpoint at {entry['name']}")
            out[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return out, header.get("meta", {})
