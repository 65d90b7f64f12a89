"""Dense float64 tensors with explicit tape-based reverse-mode gradients.

A ``Tensor`` is an immutable value. It is attached to a ``Tape`` only when it
was produced from watched parameters; ops on untaped tensors run forward-only
and record nothing. Frames are stored as rows, so a D-dim embedding sequence
of length T is a ``T x D`` tensor.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class NumericError(ArithmeticError):
    """Raised when an op produces NaN or Inf from its inputs."""


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "uid")

    _ids = itertools.count()
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, tape: Tape | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.uid = next(Tensor._ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: Tape | None) -> Tensor:
        # op outputs are fresh arrays (or views of frozen ones): no defensive copy
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data, t.tape, t.uid = arr, tape, next(Tensor._ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "taped" if self.tape is not None else "const"
        return f"Tensor({tag}, shape={self.shape})"

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

    def __getitem__(self, idx):
        return take(self, idx)


class Tape:
    """Records ops in execution order and replays them backwards.

    One tape serves one training step; it is not thread-safe and is not meant
    to be shared.
    """

    def __init__(self):
        self.ops: list[tuple[list[int], list[int], Callable]] = []
        self.params: dict[str, Tensor] = {}

    def watch(self, value, name: str | None = None) -> Tensor:
        t = Tensor(value, tape=self)
        if name is not None:
            if name in self.params:
                raise KeyError(f"parameter {name!r} already watched")
            self.params[name] = t
        return t

    def record(self, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward: Callable):
        self.ops.append(([t.uid for t in inputs], [t.uid for t in outputs], backward))

    def gradients(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Backpropagate from a scalar ``loss``; returns grads keyed by tensor uid."""
        if loss.tape is not self:
            raise ValueError("loss was not computed on this tape")
        if loss.data.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
        for in_ids, out_ids, backward in reversed(self.ops):
            if not any(o in grads for o in out_ids):
                continue
            gouts = [grads.pop(o, None) for o in out_ids]
            for uid, g in zip(in_ids, backward(gouts)):
                if g is None:
                    continue
                if uid in grads:
                    grads[uid] = grads[uid] + g
                else:
                    grads[uid] = g
        return grads

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of ``loss`` for every watched parameter (zeros if unused)."""
        grads = self.gradients(loss)
        return {
            name: grads.get(t.uid, np.zeros_like(t.data)).reshape(t.shape)
            for name, t in self.params.items()
        }


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("tensors belong to different tapes")
    return tape


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite output from {op}")
    return arr


def _op(name: str, inputs: Sequence[Tensor], out: np.ndarray, backward: Callable) -> Tensor:
    """Wrap a single-output forward result and record its backward rule."""
    tape = _tape_of(*inputs)
    res = Tensor._wrap(_finite(out, name), tape)
    if tape is not None:
        tape.record(inputs, [res], lambda gs: backward(gs[0]))
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op("add", [a, b], a.data + b.data,
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op("sub", [a, b], a.data - b.data,
               lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op("mul", [a, b], a.data * b.data,
               lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


_sigmoid = expit


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _op("sigmoid", [x], y, lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _op("tanh", [x], y, lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _op("relu", [x], np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _op("log", [x], y, lambda g: (g / x.data,))


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) evaluated without forming sigmoid(x) first."""
    x = as_tensor(x)
    y = np.minimum(x.data, 0.0) - np.log1p(np.exp(-np.abs(x.data)))
    s = _sigmoid(x.data)
    return _op("log_sigmoid", [x], y, lambda g: (g * (1.0 - s),))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _op("clip", [x], np.clip(x.data, lo, hi), lambda g: (g * inside,))


# -- reductions and shape ops ------------------------------------------------

def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _op("sum", [x], np.sum(x.data), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _op("mean", [x], np.sum(x.data) / n,
               lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _op("transpose", [x], x.data.T, lambda g: (g.T,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _op("reshape", [x], x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def take(x, idx) -> Tensor:
    """Basic (non-fancy) indexing; the gradient scatters back into zeros."""
    x = as_tensor(x)

    def back(g):
        out = np.zeros(x.shape)
        out[idx] += g
        return (out,)

    return _op("take", [x], x.data[idx], back)


def _multi(name: str, inputs: Sequence[Tensor], outs: Sequence[np.ndarray], backward) -> list[Tensor]:
    tape = _tape_of(*inputs)
    res = [Tensor._wrap(_finite(o, name), tape) for o in outs]
    if tape is not None:
        def back(gs):
            gs = [np.zeros(r.shape) if g is None else g for g, r in zip(gs, res)]
            return backward(gs)
        tape.record(inputs, res, back)
    return res


def split_rows(x) -> list[Tensor]:
    """Unstack a 2-D tensor into its rows with a single tape entry."""
    x = as_tensor(x)
    return _multi("split_rows", [x], list(x.data), lambda gs: (np.stack(gs),))


def split_cols(x, n: int) -> list[Tensor]:
    """Split the columns of a 2-D tensor into ``n`` equal blocks."""
    x = as_tensor(x)
    if x.shape[1] % n:
        raise DimensionError(f"{x.shape[1]} columns do not split into {n} blocks")
    return _multi("split_cols", [x], np.split(x.data, n, axis=1),
                  lambda gs: (np.concatenate(gs, axis=1),))


def concat_cols(xs: Iterable) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    widths = np.cumsum([x.shape[1] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=1)
    tape = _tape_of(*xs)
    res = Tensor._wrap(_finite(out, "concat_cols"), tape)
    if tape is not None:
        tape.record(xs, [res], lambda gs: np.split(gs[0], widths, axis=1))
    return res


def stack_rows(xs: Iterable) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs])
    tape = _tape_of(*xs)
    res = Tensor._wrap(_finite(out, "stack_rows"), tape)
    if tape is not None:
        tape.record(xs, [res], lambda gs: list(gs[0]))
    return res


# -- linear algebra and layers ------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return _op("matmul", [a, b], a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g))


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects 2-D input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _op("softmax_rows", [x], y,
               lambda g: (y * (g - np.sum(g * y, axis=1, keepdims=True)),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def back(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    assert gain.shape == (n,) and bias.shape == (n,), "layer_norm gain/bias must be 1-D"
    return _op("layer_norm", [x, gain, bias], xhat * gain.data + bias.data, back)


def lstm_cell(h_prev, c_prev, x, w_x, w_h, b) -> tuple[Tensor, Tensor]:
    """One LSTM step. Gate blocks of the 4D pre-activation are ordered i, f, g, o.

    ``w_x`` is (D_in, 4D), ``w_h`` is (D, 4D), ``b`` is (4D,).
    """
    h_prev, c_prev, x = as_tensor(h_prev), as_tensor(c_prev), as_tensor(x)
    w_x, w_h, b = as_tensor(w_x), as_tensor(w_h), as_tensor(b)
    d = h_prev.shape[-1]
    if c_prev.shape != h_prev.shape or w_h.shape != (d, 4 * d) or b.shape != (4 * d,):
        raise DimensionError(f"lstm_cell state/param shapes disagree with D={d}")
    if w_x.shape != (x.shape[-1], 4 * d):
        raise DimensionError(f"lstm_cell input {x.shape} does not fit w_x {w_x.shape}")

    z = x.data @ w_x.data + h_prev.data @ w_h.data + b.data
    i = _sigmoid(z[..., :d])
    f = _sigmoid(z[..., d:2 * d])
    gc = np.tanh(z[..., 2 * d:3 * d])
    o = _sigmoid(z[..., 3 * d:])
    c = f * c_prev.data + i * gc
    tc = np.tanh(c)
    h = o * tc

    def back(gs):
        gh, gcell = gs
        dc = gcell + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * gc * i * (1.0 - i),
            dc * c_prev.data * f * (1.0 - f),
            dc * i * (1.0 - gc * gc),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        return (dz @ w_h.data.T, dc * f, dz @ w_x.data.T,
                np.outer(x.data, dz) if x.data.ndim == 1 else x.data.T @ dz,
                np.outer(h_prev.data, dz) if h_prev.data.ndim == 1 else h_prev.data.T @ dz,
                _unbroadcast(dz, b.shape))

    h_t, c_t = _multi("lstm_cell", [h_prev, c_prev, x, w_x, w_h, b], [h, c], back)
    return h_t, c_t


# -- gradient checking ---------------------------------------------------------

def grad_check(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
               h: float = 1e-5, names: Sequence[str] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a dict of parameter tensors to a scalar tensor. The error for
    each entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    tape = Tape()
    watched = {k: tape.watch(v, k) for k, v in params.items()}
    loss = f(watched)
    if not np.isfinite(loss.data).all():
        raise NumericError("f is not finite at params")
    analytic = tape.backward(loss)

    def value(p):
        out = float(f({k: Tensor(v) for k, v in p.items()}).data)
        if not np.isfinite(out):
            raise NumericError("f is not finite near params")
        return out

    worst = 0.0
    for k in names if names is not None else params:
        base = np.array(params[k], dtype=np.float64)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            fp = value({**params, k: plus})
            fm = value({**params, k: minus})
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic[k][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
