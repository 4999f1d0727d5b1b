"""Dense float64 tensors with a small reverse-mode gradient tape.

Values are immutable numpy buffers. A tensor is *tracked* when it was
registered with :meth:`GradTape.watch` or produced by an operation with at
least one tracked input; every such operation appends one record to the
tape, and :func:`backward` replays the records in reverse.

Untracked tensors cost nothing beyond the numpy call, so the same model code
serves inference and training.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import erf

from .errors import ContractError, NonFiniteError, ParameterError, ShapeError

_ids = itertools.count(1)
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Additive value for disallowed attention positions.
MASK_VALUE = -1e30


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "tape", "uid")

    def __init__(self, data, _tape: "GradTape | None" = None, _copy: bool = True):
        arr = np.array(data, dtype=np.float64) if _copy else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        _check_finite(arr, "Tensor()")
        arr.flags.writeable = False
        self.data = arr
        self.tape = _tape
        self.uid = next(_ids) if _tape is not None else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of primitive operations applied to tracked tensors."""

    def __init__(self):
        self.records: list = []
        self.watched: dict[str, Tensor] = {}

    def watch(self, value, name: str) -> Tensor:
        if name in self.watched:
            raise ContractError(f"tensor {name!r} already watched")
        t = Tensor(value, _tape=self)
        self.watched[name] = t
        return t


def _result(arr: np.ndarray, op: str, parents: tuple, backward_fn) -> Tensor:
    """Wrap an op output; record it when any parent is tracked."""
    arr = np.asarray(arr)
    _check_finite(arr, op)
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ContractError("tensors from different tapes combined")
            tape = p.tape
    out = Tensor(arr, _tape=tape, _copy=False)
    if tape is not None:
        tape.records.append((out.uid, tuple(p.uid for p in parents), backward_fn))
    return out


def backward(tape: GradTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every watched tensor.

    Watched tensors that the loss does not depend on get a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.tape is tape:
        grads[loss.uid] = np.ones_like(loss.data)
    for out_uid, parent_uids, fn in reversed(tape.records):
        g = grads.pop(out_uid, None)
        if g is None:
            continue
        for uid, pg in zip(parent_uids, fn(g)):
            if uid is None or pg is None:
                continue
            if uid in grads:
                grads[uid] = grads[uid] + pg
            else:
                grads[uid] = pg
    return {
        name: grads.get(t.uid, np.zeros_like(t.data))
        for name, t in tape.watched.items()
    }


# elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, "mul", (a,), lambda g: (g * c,))
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise NonFiniteError("division by zero")
    r = 1.0 / a.data
    return _result(r, "reciprocal", (a,), lambda g: (-g * r * r,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _result(e, "exp", (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    d = a.data
    return _result(np.log(d), "log", (a,), lambda g: (g / d,))


def gelu(a) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _result(x * cdf, "gelu", (a,), fn)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep, _copy=False))


# reductions and shape ------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result(np.swapaxes(a.data, i, j), "swapaxes", (a,), lambda g: (np.swapaxes(g, i, j),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        "concat",
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in parts)

    def fn(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(np.array(a.data[index]), "getitem", (a,), fn)


# linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.tape else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.tape else None
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = (x.data - x.data.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)) / temperature,)

    return _result(y, "softmax", (x,), fn)


def softmax_rows(x, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, temperature, axis=-1)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis (population variance), then affine."""
    if eps <= 0:
        raise ParameterError("eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {bias.shape} vs last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        gx = None
        if x.tape is not None:
            gh = g * gd
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, _unbroadcast(g * xhat, (d,)), _unbroadcast(g, (d,))

    return _result(xhat * gd + bias.data, "layer_norm", (x, gain, bias), fn)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise NonFiniteError("cannot normalize a zero-norm row")
    y = x.data / norms

    def fn(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)

    return _result(y, "l2_normalize", (x,), fn)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    lg = logits.data
    if lg.ndim != 2 or targets.shape != (lg.shape[0],):
        raise ShapeError(f"cross_entropy shapes {lg.shape} vs targets {targets.shape}")
    z = lg - lg.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(lg.shape[0])
    loss = -logp[rows, targets].mean()

    def fn(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / lg.shape[0]),)

    return _result(np.asarray(loss), "cross_entropy", (logits,), fn)


def conv1d_same(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Zero same-padded 1-D convolution.

    x: (..., T, C_in); weight: (k, C_in, C_out) with odd k; bias: (C_out,).
    """
    k, cin, cout = weight.shape
    if k % 2 == 0 or x.shape[-1] != cin:
        raise ShapeError(f"conv1d shapes x={x.shape} weight={weight.shape}")
    pad = k // 2
    lead, t = x.shape[:-2], x.shape[-2]
    xp = np.zeros(lead + (t + 2 * pad, cin))
    xp[..., pad : pad + t, :] = x.data
    xf = xp.reshape(-1, t + 2 * pad, cin)
    w = weight.data
    out = np.broadcast_to(bias.data, (xf.shape[0], t, cout)).copy()
    for j in range(k):
        out += xf[:, j : j + t, :] @ w[j]

    def fn(g):
        g = g.reshape(-1, t, cout)
        gf = g.reshape(-1, cout)
        gw = np.stack([xf[:, j : j + t, :].reshape(-1, cin).T @ gf for j in range(k)])
        gx = None
        if x.tape is not None:
            gxp = np.zeros_like(xf)
            for j in range(k):
                gxp[:, j : j + t, :] += g @ w[j].T
            gx = gxp[:, pad : pad + t, :].reshape(x.shape)
        return gx, gw, gf.sum(axis=0)

    return _result(out.reshape(lead + (t, cout)), "conv1d", (x, weight, bias), fn)


# verification ------------------------------------------------------------


def gradient_check(fn, inputs: dict[str, np.ndarray], eps: float = 1e-6, floor: float = 1e-6) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``fn`` maps a dict of tensors to a scalar tensor. The relative error of an
    entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    tape = GradTape()
    watched = {k: tape.watch(v, k) for k, v in inputs.items()}
    analytic = backward(tape, fn(watched))
    worst = 0.0
    for name, value in inputs.items():
        base = np.array(value, dtype=np.float64)
        for i in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                probe = base.copy()
                probe[i] += sign * eps
                args = {k: Tensor(probe if k == name else v) for k, v in inputs.items()}
                vals.append(fn(args).item())
            num = (vals[0] - vals[1]) / (2 * eps)
            a = float(analytic[name][i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst
