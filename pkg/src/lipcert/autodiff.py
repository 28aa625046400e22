"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records primitive operations while it is active (``with Tape():``)
and replays them in reverse to produce gradients.  Tapes nest: every active
tape records, so an inner tape can differentiate a sub-computation (used by
the one-step spectral-norm estimator) while an outer tape differentiates the
surrounding loss.  All arithmetic is float64.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels


class Tensor:
    """Dense float64 array node. Leaves may carry gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_op_output")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._op_output = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # light arithmetic sugar; the heavy lifting stays in module functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


class Tape:
    """Execution-ordered record of primitives; reverse replay yields grads."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tape stack corrupted"
        stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _walk(self, output: Tensor, seed: np.ndarray | None) -> dict[int, np.ndarray]:
        if seed is None:
            if output.data.size != 1:
                raise ValueError(
                    "gradient of a non-scalar output needs an explicit seed"
                )
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != output.data.shape:
                raise ValueError("seed shape must match output shape")
        adjoint: dict[int, np.ndarray] = {id(output): seed}
        for out, inputs, backward in reversed(self._records):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            grads = backward(g)
            for inp, gi in zip(inputs, grads):
                if gi is None:
                    continue
                if not (inp.requires_grad or inp._op_output):
                    continue
                key = id(inp)
                acc = adjoint.get(key)
                adjoint[key] = gi if acc is None else acc + gi
        return adjoint

    def gradient(
        self,
        output: Tensor,
        sources: Sequence[Tensor],
        seed: np.ndarray | None = None,
    ) -> list[np.ndarray]:
        """Gradients of ``output`` w.r.t. ``sources`` without touching .grad."""
        adjoint = self._walk(output, seed)
        return [
            adjoint.get(id(s), np.zeros_like(s.data)) for s in sources
        ]

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients into ``.grad`` of requires_grad leaves."""
        adjoint = self._walk(output, seed)
        seen: set[int] = set()
        for _, inputs, _ in self._records:
            for inp in inputs:
                if inp.requires_grad and id(inp) not in seen:
                    seen.add(id(inp))
                    g = adjoint.get(id(inp))
                    if g is None:
                        continue
                    if inp.grad is None:
                        inp.grad = g.copy()
                    else:
                        inp.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    stack = _tape_stack()
    if stack:
        out._op_output = True
        for tape in stack:
            tape._records.append((out, inputs, backward))
    return out


def _needed(t: Tensor) -> bool:
    return t.requires_grad or t._op_output


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    root = np.sqrt(a.data)
    out = Tensor(root)

    def backward(g):
        return (g * 0.5 / root,)

    return _record(out, (a,), backward)


def total_sum(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum())
    shape = a.data.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), backward)


def sumsq(a) -> Tensor:
    """Scalar sum of squares."""
    a = _as_tensor(a)
    out = Tensor(np.dot(a.data.ravel(), a.data.ravel()))
    ad = a.data

    def backward(g):
        return ((2.0 * g) * ad,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        return (g.reshape(old),)

    return _record(out, (a,), backward)


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """2-D @ 2-D or 2-D @ 1-D matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    need_a, need_b = _needed(a), _needed(b)

    def backward(g):
        if bd.ndim == 1:
            ga = np.outer(g, bd) if need_a else None
            gb = ad.T @ g if need_b else None
        else:
            ga = g @ bd.T if need_a else None
            gb = ad.T @ g if need_b else None
        return ga, gb

    return _record(out, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """Dense layer: flatten trailing dims of x, then x @ w.T + b."""
    x, w = _as_tensor(x), _as_tensor(w)
    xd = x.data
    x2 = xd.reshape(xd.shape[0], -1) if xd.ndim > 2 else xd
    y = x2 @ w.data.T
    inputs: tuple[Tensor, ...]
    if b is not None:
        b = _as_tensor(b)
        y = y + b.data
        inputs = (x, w, b)
    else:
        inputs = (x, w)
    out = Tensor(y)
    wd = w.data
    need_x, need_w = _needed(x), _needed(w)

    def backward(g):
        gx = (g @ wd).reshape(xd.shape) if need_x else None
        gw = g.T @ x2 if need_w else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _record(out, inputs, backward)


# ---------------------------------------------------------------------------
# activations


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient 0 at the kink
    out = Tensor(np.where(mask, a.data, 0.0))

    def backward(g):
        return (g * mask,)

    return _record(out, (a,), backward)


def leaky_relu(a, alpha: float) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, alpha * a.data))

    def backward(g):
        return (g * np.where(mask, 1.0, alpha),)

    return _record(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _record(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    out = Tensor(t)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _record(out, (a,), backward)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * s,)

    return _record(out, (a,), backward)


def elu(a, alpha: float) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    expx = np.exp(np.minimum(a.data, 0.0))
    out = Tensor(np.where(mask, a.data, alpha * (expx - 1.0)))

    def backward(g):
        return (g * np.where(mask, 1.0, alpha * expx),)

    return _record(out, (a,), backward)


ACTIVATION_OPS = {
    "relu": lambda t, alpha: relu(t),
    "leaky_relu": lambda t, alpha: leaky_relu(t, alpha),
    "sigmoid": lambda t, alpha: sigmoid(t),
    "tanh": lambda t, alpha: tanh(t),
    "softplus": lambda t, alpha: softplus(t),
    "elu": lambda t, alpha: elu(t, alpha),
}


# ---------------------------------------------------------------------------
# convolution / pooling / normalization


def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Batched 2-D convolution (cross-correlation), NCHW layout.

    x: (N, Ci, H, W), w: (Co, Ci, kh, kw), b: (Co,) or None.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    sh, sw = stride
    ph, pw = padding
    n, ci, h, wdt = x.data.shape
    co, ci_w, kh, kw = w.data.shape
    if ci != ci_w:
        raise ValueError(f"conv2d channel mismatch: input {ci}, kernel {ci_w}")
    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        if (ph or pw)
        else x.data
    )
    hp, wp = h + 2 * ph, wdt + 2 * pw
    if kh > hp or kw > wp:
        raise ValueError("conv2d kernel larger than padded input")
    cols = kernels.im2col(xp, kh, kw, sh, sw)  # (N, Ho, Wo, Ci*kh*kw)
    ho, wo = cols.shape[1], cols.shape[2]
    wmat = w.data.reshape(co, -1)
    y = cols.reshape(-1, wmat.shape[1]) @ wmat.T  # (N*Ho*Wo, Co)
    inputs: tuple[Tensor, ...]
    if b is not None:
        b = _as_tensor(b)
        y = y + b.data
        inputs = (x, w, b)
    else:
        inputs = (x, w)
    out = Tensor(np.ascontiguousarray(y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)))
    need_x, need_w = _needed(x), _needed(w)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
        gw = gx = None
        if need_w:
            gw = (gt.T @ cols.reshape(-1, wmat.shape[1])).reshape(w.data.shape)
        if need_x:
            dcols = (gt @ wmat).reshape(n, ho, wo, -1)
            gxp = kernels.col2im(dcols, ci, hp, wp, kh, kw, sh, sw)
            gx = gxp[:, :, ph : ph + h, pw : pw + wdt] if (ph or pw) else gxp
        if b is None:
            return gx, gw
        return gx, gw, gt.sum(axis=0)

    return _record(out, inputs, backward)


def maxpool2d(x, kernel=(2, 2), stride=(2, 2)) -> Tensor:
    x = _as_tensor(x)
    kh, kw = kernel
    sh, sw = stride
    _, _, h, w = x.data.shape
    y, idx = kernels.maxpool_forward(x.data, kh, kw, sh, sw)
    out = Tensor(y)

    def backward(g):
        return (kernels.maxpool_backward(g, idx, h, w, kh, kw, sh, sw),)

    return _record(out, (x,), backward)


def avgpool2d(x, kernel=(2, 2), stride=(2, 2)) -> Tensor:
    x = _as_tensor(x)
    kh, kw = kernel
    sh, sw = stride
    _, _, h, w = x.data.shape
    out = Tensor(kernels.avgpool_forward(x.data, kh, kw, sh, sw))

    def backward(g):
        return (kernels.avgpool_backward(g, h, w, kh, kw, sh, sw),)

    return _record(out, (x,), backward)


def _channel_shape(x: np.ndarray) -> tuple[int, ...]:
    # broadcast shape for per-channel parameters: (1,C,1,1) on NCHW, (1,C) on NC
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def batchnorm_infer(x, gamma, beta, mean, var, eps: float) -> Tensor:
    """Normalization with fixed statistics: an affine per-channel map."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    cs = _channel_shape(x.data)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(cs)) * inv.reshape(cs)
    out = Tensor(xhat * gamma.data.reshape(cs) + beta.data.reshape(cs))
    axes = tuple(i for i in range(x.data.ndim) if i != 1)
    gscaled = (gamma.data * inv).reshape(cs)

    def backward(g):
        return g * gscaled, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record(out, (x, gamma, beta), backward)


def batchnorm_train(x, gamma, beta, eps: float):
    """Normalization with minibatch statistics.

    Returns (out, batch_mean, batch_var); the statistics are plain arrays for
    the caller's running-average update.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    axes = tuple(i for i in range(x.data.ndim) if i != 1)
    m = x.data.size // x.data.shape[1]
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    cs = _channel_shape(x.data)
    inv = 1.0 / np.sqrt(var + eps)
    centered = x.data - mu.reshape(cs)
    xhat = centered * inv.reshape(cs)
    out = Tensor(xhat * gamma.data.reshape(cs) + beta.data.reshape(cs))
    gd = gamma.data

    def backward(g):
        dxhat = g * gd.reshape(cs)
        s1 = dxhat.sum(axis=axes).reshape(cs)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(cs)
        gx = (dxhat - s1 / m - xhat * s2 / m) * inv.reshape(cs)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record(out, (x, gamma, beta), backward), mu, var


# ---------------------------------------------------------------------------
# loss


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean softmax cross-entropy from raw logits (numerically stable)."""
    logits = _as_tensor(logits)
    y = np.asarray(labels)
    z = logits.data
    if z.ndim != 2:
        raise ValueError("cross_entropy_logits expects (N, K) logits")
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    lse = np.log(np.exp(zs).sum(axis=1)) + zmax[:, 0]
    out = Tensor((lse - z[np.arange(n), y]).mean())
    p = np.exp(zs)
    p /= p.sum(axis=1, keepdims=True)

    def backward(g):
        gz = p.copy()
        gz[np.arange(n), y] -= 1.0
        return (gz * (g / n),)

    return _record(out, (logits,), backward)
