"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Only the operators NR-Net needs are provided. Feature maps are laid out as
``[n, c, h, w]``; the convolution, batchnorm and pooling operators also
accept a single ``[c, h, w]`` map and return an unbatched result.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import InvalidInputError, ShapeError

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_debug = False
_tape_stack: list["GradientTape"] = []
_mac_counters: list[Counter] = []


def set_precision(name: str) -> None:
    global _dtype
    _dtype = _PRECISIONS[name]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    global _dtype
    saved = _dtype
    _dtype = _PRECISIONS[name]
    try:
        yield
    finally:
        _dtype = saved


def set_debug(flag: bool) -> None:
    """In debug mode every op output is checked for NaN/Inf."""
    global _debug
    _debug = flag


@contextlib.contextmanager
def count_macs() -> Iterator[Counter]:
    """Collect multiply-accumulate counts, keyed by op name, for ops run inside."""
    counter: Counter = Counter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _tally(op: str, macs: int) -> None:
    for counter in _mac_counters:
        counter[op] += int(macs)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        if _debug and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {name or ''}".strip())

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)


class Parameter(Tensor):
    """A trainable tensor; ``grad`` always has the tensor's shape."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientTape:
    """Records differentiable ops executed inside a ``with`` block.

    >>> w = Parameter(np.ones(3), "w")
    >>> with GradientTape() as tape:
    ...     loss = sum_all(w)
    >>> tape.backward(loss)
    >>> w.grad
    array([1., 1., 1.], dtype=float32)
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradientTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.records.append((out, inputs, backward))

    def parameters(self) -> list[Parameter]:
        seen: dict[int, Parameter] = {}
        for _, inputs, _ in self.records:
            for t in inputs:
                if isinstance(t, Parameter):
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def gradients(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Replay the tape backward; returns gradients keyed by ``id(tensor)``."""
        if loss.data.size != 1:
            raise InvalidInputError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        return grads

    def backward(self, loss: Tensor) -> None:
        """Set ``grad`` on every Parameter the tape touched (overwriting)."""
        grads = self.gradients(loss)
        for p in self.parameters():
            g = grads.get(id(p))
            p.grad = np.zeros_like(p.data) if g is None else g.astype(p.data.dtype, copy=False)


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op; record it if a tape is active.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and bool(_tape_stack))
    if out.requires_grad:
        for tape in _tape_stack:
            tape.record(out, tuple(inputs), backward)
    return out


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected [c,h,w] or [n,c,h,w], got {x.shape}")


def _out_extent(size: int, d: int, stride: int, padding: int, op: str) -> int:
    if stride < 1:
        raise InvalidInputError(f"{op}: stride must be >= 1")
    span = size + 2 * padding - d
    if span < 0:
        raise ShapeError(f"{op}: kernel {d} larger than padded input {size + 2 * padding}")
    return span // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _window(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> tuple[slice, ...]:
    return (
        slice(None),
        slice(None),
        slice(i, i + stride * (ho - 1) + 1, stride),
        slice(j, j + stride * (wo - 1) + 1, stride),
    )


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Standard cross-correlation, kernel ``[c_out, c, d, d]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, single = _batched(x, "conv2d")
    k = kernel.data
    if k.ndim != 4 or k.shape[1] != xd.shape[1] or k.shape[2] != k.shape[3]:
        raise ShapeError(f"conv2d: kernel {k.shape} incompatible with input {x.shape}")
    n, c, h, w = xd.shape
    co, _, d, _ = k.shape
    ho = _out_extent(h, d, stride, padding, "conv2d")
    wo = _out_extent(w, d, stride, padding, "conv2d")
    xp = _pad(xd, padding)
    out = np.zeros((n, co, ho * wo), dtype=xd.dtype)
    for i in range(d):
        for j in range(d):
            patch = xp[_window(xp, i, j, stride, ho, wo)].reshape(n, c, ho * wo)
            out += k[:, :, i, j] @ patch
            _tally("conv2d", n * co * c * ho * wo)
    out = out.reshape(n, co, ho, wo)

    def backward(g):
        g4 = g[None] if single else g
        gm = g4.reshape(n, co, ho * wo)
        dk = np.zeros_like(k)
        dxp = np.zeros_like(xp)
        for i in range(d):
            for j in range(d):
                win = _window(xp, i, j, stride, ho, wo)
                patch = xp[win].reshape(n, c, ho * wo)
                dk[:, :, i, j] = np.einsum("nop,ncp->oc", gm, patch)
                dxp[win] += (k[:, :, i, j].T @ gm).reshape(n, c, ho, wo)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return (dx[0] if single else dx), dk

    return make_op(out[0] if single else out, (x, kernel), backward)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel spatial filtering, kernel ``[c, d, d]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, single = _batched(x, "depthwise_conv2d")
    k = kernel.data
    if k.ndim != 3 or k.shape[0] != xd.shape[1] or k.shape[1] != k.shape[2]:
        raise ShapeError(f"depthwise_conv2d: kernel {k.shape} incompatible with input {x.shape}")
    n, c, h, w = xd.shape
    d = k.shape[1]
    ho = _out_extent(h, d, stride, padding, "depthwise_conv2d")
    wo = _out_extent(w, d, stride, padding, "depthwise_conv2d")
    xp = _pad(xd, padding)
    out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
    for i in range(d):
        for j in range(d):
            out += xp[_window(xp, i, j, stride, ho, wo)] * k[None, :, i, j, None, None]
            _tally("depthwise_conv2d", n * c * ho * wo)

    def backward(g):
        g4 = g[None] if single else g
        dk = np.zeros_like(k)
        dxp = np.zeros_like(xp)
        for i in range(d):
            for j in range(d):
                win = _window(xp, i, j, stride, ho, wo)
                dk[:, i, j] = np.einsum("nchw,nchw->c", g4, xp[win])
                dxp[win] += g4 * k[None, :, i, j, None, None]
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return (dx[0] if single else dx), dk

    return make_op(out[0] if single else out, (x, kernel), backward)


def pointwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """1x1 channel mixing, kernel ``[c_out, c]``; optional per-output-channel bias."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, single = _batched(x, "pointwise_conv2d")
    k = kernel.data
    if k.ndim != 2 or k.shape[1] != xd.shape[1]:
        raise ShapeError(f"pointwise_conv2d: kernel {k.shape} incompatible with input {x.shape}")
    if stride < 1:
        raise InvalidInputError("pointwise_conv2d: stride must be >= 1")
    n, c, h, w = xd.shape
    xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
    ho, wo = xs.shape[2], xs.shape[3]
    co = k.shape[0]
    xm = xs.reshape(n, c, ho * wo)
    out = k @ xm
    _tally("pointwise_conv2d", n * co * c * ho * wo)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(n, co, ho, wo)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g4 = g[None] if single else g
        gm = g4.reshape(n, co, ho * wo)
        dk = np.einsum("nop,ncp->oc", gm, xm)
        dxs = (k.T @ gm).reshape(n, c, ho, wo)
        if stride > 1:
            dx = np.zeros_like(xd)
            dx[:, :, ::stride, ::stride] = dxs
        else:
            dx = dxs
        grads = [dx[0] if single else dx, dk]
        if bias is not None:
            grads.append(gm.sum(axis=(0, 2)))
        return grads

    return make_op(out[0] if single else out, inputs, backward)


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.mean = np.zeros(channels, dtype=_dtype)
        self.var = np.ones(channels, dtype=_dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd, single = _batched(x, "batchnorm2d")
    n, c, h, w = xd.shape
    if n * h * w == 0:
        raise InvalidInputError("batchnorm2d: zero-size batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    gm = gamma.data[None, :, None, None]
    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = state.momentum
        state.mean = (m * state.mean + (1 - m) * mu).astype(state.mean.dtype)
        state.var = (m * state.var + (1 - m) * var).astype(state.var.dtype)
    elif mode == "infer":
        mu, var = state.mean.astype(xd.dtype), state.var.astype(xd.dtype)
    else:
        raise InvalidInputError(f"batchnorm2d: unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gm * xhat + beta.data[None, :, None, None]
    count = n * h * w

    def backward(g):
        g4 = g[None] if single else g
        dgamma = (g4 * xhat).sum(axis=(0, 2, 3))
        dbeta = g4.sum(axis=(0, 2, 3))
        dxhat = g4 * gm
        if mode == "train":
            dx = (inv_std[None, :, None, None] / count) * (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return (dx[0] if single else dx), dgamma, dbeta

    return make_op(out[0] if single else out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    return make_op(x.data * factor, (x,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with identical leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    out = a.data @ b.data
    _tally("matmul", int(np.prod(out.shape)) * a.shape[-1])

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_op(out, (a, b), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    inverse = tuple(np.argsort(axes))
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: ``[c,h,w] -> [c]`` or ``[n,c,h,w] -> [n,c]``."""
    x = as_tensor(x)
    xd, single = _batched(x, "global_avg_pool")
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))

    def backward(g):
        g2 = g[None] if single else g
        dx = np.broadcast_to(g2[:, :, None, None] / (h * w), xd.shape).copy()
        return (dx[0] if single else dx,)

    return make_op(out[0] if single else out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op(s, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return make_op(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.data.dtype),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def finite_diff_check(f: Callable[[], Tensor], at: Tensor, step: float = 1e-6,
                      indices: Sequence[tuple[int, ...]] | None = None) -> float:
    """Worst relative error between tape gradient and central differences.

    ``f`` is a zero-argument closure that reads ``at`` and returns a scalar;
    ``at`` is perturbed in place and restored. The relative error of each
    coordinate uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    ``indices`` restricts the check to a subset of coordinates.
    """
    was = at.requires_grad
    at.requires_grad = True
    with GradientTape() as tape:
        loss = f()
    analytic = tape.gradients(loss).get(id(at), np.zeros_like(at.data))
    at.requires_grad = was

    coords = list(np.ndindex(*at.shape)) if indices is None else list(indices)
    worst = 0.0
    for idx in coords:
        orig = at.data[idx].copy()
        at.data[idx] = orig + step
        fp = float(f().data)
        at.data[idx] = orig - step
        fm = float(f().data)
        at.data[idx] = orig
        numeric = (fp - fm) / (2 * step)
        a = float(analytic[idx])
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
