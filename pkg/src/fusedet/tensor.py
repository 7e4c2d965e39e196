"""Reverse-mode differentiation over fp64 numpy arrays.

Ops record onto the innermost active Tape (a Wengert list); creation order is
a valid topological order, so `Tape.backward` walks it once in reverse.  With
no tape active the same functions run as plain numpy (the inference path).

Everything is float64.  A non-finite value produced by a forward or backward
pass is an error state, checked where it is cheap to do so.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

from . import counting

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense fp64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # same-shape fp64 ndarray, populated by backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all dispatch to module-level primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter:
    """Named trainable tensor; names are unique within a model."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, tensor: Tensor):
        tensor.requires_grad = True
        self.name = name
        self.tensor = tensor

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor, seed=None) -> None:
        """Accumulate d(loss)/dx into .grad of every reachable requires_grad tensor."""
        if seed is None:
            if loss.data.size != 1:
                raise ValueError("backward needs a scalar loss or an explicit seed")
            seed = np.ones_like(loss.data)
        if not np.all(np.isfinite(loss.data)):
            raise FloatingPointError("non-finite loss")
        loss.grad = np.asarray(seed, dtype=np.float64)
        for out, parents, bw in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            grads = bw(g)
            for p, gp in zip(parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                # First assignment may alias bw output; accumulation always
                # allocates so no closure-held array is mutated.
                p.grad = gp if p.grad is None else p.grad + gp
            out.grad = None  # op outputs are never leaves; free eagerly


def _tape():
    return _TAPES[-1] if _TAPES else None


def _record(out: Tensor, parents: tuple, bw) -> None:
    t = _tape()
    if t is None:
        return
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        t._nodes.append((out, parents, bw))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    counting.add(out.size)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    counting.add(out.size)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    counting.add(out.size)
    _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                    _unbroadcast(g * a.data, b.shape)))
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    counting.add(out.size)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    _record(out, (a, b), bw)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    counting.add(out.size)
    _record(out, (a,), lambda g: (-g,))
    return out


def pow_const(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data ** p)
    counting.add(5 * out.size)
    _record(out, (a,), lambda g: (g * p * a.data ** (p - 1),))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    counting.add(5 * out.size)
    _record(out, (a,), lambda g: (g * out.data,))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    counting.add(5 * out.size)
    _record(out, (a,), lambda g: (g / a.data,))
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    counting.add(out.size)
    _record(out, (a,), lambda g: (g * 0.5 / out.data,))
    return out


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(out_data)
    counting.add(5 * out.size)
    _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))
    return out


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    counting.add(out.size)
    _record(out, (a,), lambda g: (g * np.sign(a.data),))
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, b.data))
    counting.add(out.size)

    def bw(g):
        m = (a.data >= b.data).astype(np.float64)
        return (_unbroadcast(g * m, a.shape), _unbroadcast(g * (1.0 - m), b.shape))

    _record(out, (a, b), bw)
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(np.minimum(a.data, b.data))
    counting.add(out.size)

    def bw(g):
        m = (a.data <= b.data).astype(np.float64)
        return (_unbroadcast(g * m, a.shape), _unbroadcast(g * (1.0 - m), b.shape))

    _record(out, (a, b), bw)
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi))
    counting.add(out.size)

    def bw(g):
        mask = (a.data >= lo) & (a.data <= hi)
        return (g * mask,)

    _record(out, (a,), bw)
    return out


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    counting.add(a.size)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    _record(out, (a,), bw)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: (..., m, k) @ (..., k, n); inner dims must agree."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    m, n = out.data.shape[-2], out.data.shape[-1]
    k = a.data.shape[-1]
    batch = int(np.prod(out.data.shape[:-2], dtype=np.int64)) if out.data.ndim > 2 else 1
    counting.add(2 * m * k * n * batch)

    def bw(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(da, a.shape), _unbroadcast(db, b.shape))

    _record(out, (a, b), bw)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    _record(out, (a,), lambda g: (g.reshape(a.shape),))
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = Tensor(np.swapaxes(a.data, ax1, ax2))
    _record(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)
    _record(out, (a,), lambda g: (np.transpose(g, inv),))
    return out


def concat(tensors: list, axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    _record(out, tuple(tensors), bw)
    return out


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx])

    def bw(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    _record(out, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# neural-net primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax; slices along `axis` sum to 1."""
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    counting.add(5 * out.size)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    _record(out, (a,), bw)
    return out


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalization over the last (channel) axis, then affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    counting.add(5 * out.size)

    def bw(g):
        dbeta = _unbroadcast(g, beta.shape)
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (dx, dgamma, dbeta)

    _record(out, (a, gamma, beta), bw)
    return out


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = Tensor(x * phi_cdf)
    counting.add(5 * out.size)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi_cdf + x * pdf),)

    _record(out, (a,), bw)
    return out


def _pool_bins(n_in: int, n_out: int):
    starts = [int(math.floor(i * n_in / n_out)) for i in range(n_out)]
    ends = [int(math.ceil((i + 1) * n_in / n_out)) for i in range(n_out)]
    return starts, ends


def adaptive_avg_pool2d(a: Tensor, out_size) -> Tensor:
    """Mean pooling over bins [floor(i*H/P), ceil((i+1)*H/P)) on the last two axes."""
    ph, pw = out_size
    if ph <= 0 or pw <= 0:
        raise ValueError("pool output size must be positive")
    h, w = a.shape[-2], a.shape[-1]
    rs, re = _pool_bins(h, ph)
    cs, ce = _pool_bins(w, pw)
    x = a.data
    y = np.empty(a.shape[:-2] + (ph, pw), dtype=np.float64)
    for i in range(ph):
        for j in range(pw):
            y[..., i, j] = x[..., rs[i]:re[i], cs[j]:ce[j]].mean(axis=(-2, -1))
    out = Tensor(y)
    counting.add(a.size + out.size)

    def bw(g):
        dx = np.zeros_like(x)
        for i in range(ph):
            for j in range(pw):
                area = (re[i] - rs[i]) * (ce[j] - cs[j])
                dx[..., rs[i]:re[i], cs[j]:ce[j]] += g[..., i:i + 1, j:j + 1] / area
        return (dx,)

    _record(out, (a,), bw)
    return out


def interpolate_bilinear(a: Tensor, out_size) -> Tensor:
    """Bilinear resampling of the last two axes, align-corners-false convention."""
    oh, ow = out_size
    if oh < 1 or ow < 1:
        raise ValueError("output size must be >= 1")
    h, w = a.shape[-2], a.shape[-1]

    def grid(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i0 = np.minimum(i0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        return i0, i1, frac

    y0, y1, fy = grid(h, oh)
    x0, x1, fx = grid(w, ow)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]
    x = a.data
    out_data = (x[..., y0[:, None], x0[None, :]] * (wy0 * wx0)
                + x[..., y0[:, None], x1[None, :]] * (wy0 * wx1)
                + x[..., y1[:, None], x0[None, :]] * (wy1 * wx0)
                + x[..., y1[:, None], x1[None, :]] * (wy1 * wx1))
    out = Tensor(out_data)
    counting.add(8 * out.size)

    def bw(g):
        dx = np.zeros_like(x)
        flat = dx.reshape(-1, h, w)
        gf = (g * 1.0).reshape(-1, oh, ow)
        for corner_y, wy in ((y0, wy0), (y1, wy1)):
            for corner_x, wx in ((x0, wx0), (x1, wx1)):
                np.add.at(flat, (slice(None), corner_y[:, None], corner_x[None, :]),
                          gf * (wy * wx))
        return (dx,)

    _record(out, (a,), bw)
    return out


def depthwise_conv3x3(a: Tensor, k: Tensor) -> Tensor:
    """Per-channel 3x3 correlation, zero padding 1, stride 1; shape preserved."""
    if k.shape[-2:] != (3, 3) or k.shape[-3] != a.shape[-3]:
        raise ValueError(f"kernel shape {k.shape} does not match input {a.shape}")
    c, h, w = a.shape[-3], a.shape[-2], a.shape[-1]
    x = a.data
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)])
    y = np.zeros_like(x)
    kd = k.data
    for u in range(3):
        for v in range(3):
            y += xp[..., u:u + h, v:v + w] * kd[..., :, u:u + 1, v:v + 1]
    out = Tensor(y)
    counting.add(2 * 9 * out.size)

    def bw(g):
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(kd)
        lead = tuple(range(g.ndim - 3))
        for u in range(3):
            for v in range(3):
                dxp[..., u:u + h, v:v + w] += g * kd[..., :, u:u + 1, v:v + 1]
                tap = (xp[..., u:u + h, v:v + w] * g).sum(axis=(-2, -1))
                if lead:
                    tap = tap.sum(axis=lead)
                dk[..., :, u, v] += tap
        return (dxp[..., 1:1 + h, 1:1 + w], dk)

    _record(out, (a, k), bw)
    return out


def unfold(a: Tensor, kernel: int, stride: int, pad: int) -> Tensor:
    """im2col on (..., C, H, W) -> (..., L, C*kernel*kernel), L = out_h*out_w.

    Data movement only; pair with matmul for a counted convolution.
    """
    c, h, w = a.shape[-3], a.shape[-2], a.shape[-1]
    if h + 2 * pad < kernel or w + 2 * pad < kernel:
        raise ValueError("spatial dims smaller than kernel")
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    xp = np.pad(a.data, [(0, 0)] * (a.data.ndim - 2) + [(pad, pad), (pad, pad)])
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(-2, -1))
    win = win[..., ::stride, ::stride, :, :]           # (..., C, oh, ow, kh, kw)
    win = np.moveaxis(win, -5, -3)                      # (..., oh, ow, C, kh, kw)
    cols = win.reshape(a.shape[:-3] + (oh * ow, c * kernel * kernel)).copy()
    out = Tensor(cols)

    def bw(g):
        gw = g.reshape(a.shape[:-3] + (oh, ow, c, kernel, kernel))
        gw = np.moveaxis(gw, -3, -5)                    # (..., C, oh, ow, kh, kw)
        dxp = np.zeros_like(xp)
        for u in range(kernel):
            for v in range(kernel):
                dxp[..., u:u + stride * oh:stride, v:v + stride * ow:stride] += gw[..., u, v]
        if pad:
            dxp = dxp[..., pad:pad + h, pad:pad + w]
        return (dxp,)

    _record(out, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# verification harness


def finite_diff_report(f, params, h: float = 1e-5) -> dict:
    """Per-parameter max relative error of the tape gradient vs central differences.

    `f` must rebuild the scalar loss from scratch on every call; it is evaluated
    once under a tape for the analytic gradient and twice per coordinate without
    one for the numeric estimate.
    """
    if not (1e-7 <= h <= 1e-4):
        raise ValueError("h must lie in [1e-7, 1e-4]")
    for p in params:
        p.tensor.zero_grad()
    with Tape() as tape:
        loss = f()
        if not np.all(np.isfinite(loss.data)):
            raise FloatingPointError("non-finite loss in finite_diff_report")
        tape.backward(loss)
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}
    report = {}
    for p in params:
        an = analytic[p.name].ravel()
        flat = p.data.ravel()
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError("non-finite loss during differencing")
            num = (fp - fm) / (2.0 * h)
            err = abs(an[i] - num) / max(1.0, abs(an[i]))
            if err > worst:
                worst = err
        report[p.name] = worst
    return report


def finite_diff_check(f, params, h: float = 1e-5) -> float:
    """Max over all parameter coordinates of the relative gradient error."""
    report = finite_diff_report(f, params, h=h)
    return max(report.values()) if report else 0.0
