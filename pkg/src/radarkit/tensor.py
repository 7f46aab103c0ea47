"""Dense N-d tensors with tape-based reverse-mode autodiff.

The op set is exactly what the detection models need: batched matmul,
conv2d/conv3d, softmax, group normalization, elementwise add/mul, the
relu/gelu/sigmoid nonlinearities, data-movement ops (reshape, permute,
pad, crop, repeat), window/grid partitioning for local and dilated
attention, and a fused binary cross-entropy head.

Every op records a node on the active per-thread tape when gradients are
enabled and any input requires them.  ``backward(loss)`` replays the tape
once in reverse; nodes are recorded in creation order, which is already a
topological order.  Two precision modes are supported: float64 (default,
used by all gradient and oracle tests) and float32 (fast mode for
training/profiling at scale).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError, UsageError

_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.grad_enabled = True
        _state.default_dtype = np.float64
        _state.debug_checks = False
    return _state


def set_default_dtype(dtype) -> None:
    """Set the dtype used by tensor constructors (float64 or float32)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigError(f"unsupported dtype {dtype}; use float64 or float32")
    _tls().default_dtype = dtype.type


def default_dtype():
    return _tls().default_dtype


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype."""
    st = _tls()
    old = st.default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        st.default_dtype = old


def set_debug_checks(enabled: bool) -> None:
    """When enabled, every op asserts its output is finite."""
    _tls().debug_checks = bool(enabled)


@contextmanager
def no_grad():
    """Suspend tape recording inside the block."""
    st = _tls()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


class Tape:
    """Ordered record of op nodes; creation order is topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._spent = False

    def record(self, node: "_Node") -> None:
        self.nodes.append(node)
        self._spent = False

    def reset(self) -> None:
        self.nodes = []
        self._spent = False


def active_tape() -> Tape:
    return _tls().tape


def reset_tape() -> None:
    _tls().tape.reset()


class _Node:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """Contiguous row-major buffer plus optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dt = dtype if dtype is not None else default_dtype()
        self.data = np.ascontiguousarray(data, dtype=dt)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_extents(shape):
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def zeros(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.zeros(_check_extents(shape)), requires_grad, dtype)


def full(shape, value, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.full(_check_extents(shape), float(value)), requires_grad, dtype)


def uniform(shape, seed, lo=-1.0, hi=1.0, requires_grad=False, dtype=None) -> Tensor:
    """Seeded uniform fill; identical seed gives a bit-identical buffer."""
    shape = _check_extents(shape)
    rng = np.random.Generator(np.random.PCG64(seed))
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad, dtype)


def from_array(arr, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(arr, requires_grad, dtype)


def _same_dtype(*ts):
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} vs {t.data.dtype}")
    return dt


def _make(out_data, inputs, grad_fn) -> Tensor:
    st = _tls()
    if st.debug_checks and not np.all(np.isfinite(out_data)):
        raise UsageError("non-finite values produced by forward op")
    req = st.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = req
    out.grad = None
    if req:
        st.tape.record(_Node(out, inputs, grad_fn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast up from `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add requires identical shapes, got {a.shape} vs {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _make(a.data + b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul requires identical shapes, got {a.shape} vs {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _make(a.data * b.data, (a, b), grad_fn)


def add_bcast(x: Tensor, b: Tensor) -> Tensor:
    """Add with explicit numpy broadcasting of `b` up to `x.shape` (bias add)."""
    _same_dtype(x, b)
    try:
        out = x.data + b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    if out.shape != x.shape:
        raise ShapeError(f"bias shape {b.shape} does not broadcast into {x.shape}")

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out, (x, b), grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * c)

    return _make(x.data * x.data.dtype.type(c), (x,), grad_fn)


def affine_const(x: Tensor, a: np.ndarray, b: np.ndarray) -> Tensor:
    """y = x*a + b with constant (non-learned) broadcastable arrays a, b."""
    out = x.data * a + b
    if out.shape != x.shape:
        raise ShapeError("affine constants must broadcast into x")

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * a)

    return _make(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def grad_fn(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# convolutions (cross-correlation convention, no kernel flip)

# peak size of an im2col buffer before conv3d inference switches to slabs
_CONV_COLS_BYTE_LIMIT = 192 * 1024 * 1024


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _triple(v):
    return (v, v, v) if np.isscalar(v) else tuple(v)


def _out_extent(n, k, s, p, axis):
    span = n + 2 * p - k
    if span < 0 or span % s != 0:
        raise ShapeError(
            f"output extent along axis {axis} is not integral: "
            f"(n={n}, k={k}, stride={s}, pad={p})"
        )
    return span // s + 1


def _im2col2d(xp, kh, kw, sh, sw):
    B, C, Hp, Wp = xp.shape
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (B, Ho, Wo, C, kh, kw), (s0, s2 * sh, s3 * sw, s1, s2, s3)
    )
    return view.reshape(B, Ho * Wo, C * kh * kw), Ho, Wo


def _conv2d_raw(xp, w):
    """Stride-1 unpadded correlation used by the input-gradient path."""
    Cout, Cin, kh, kw = w.shape
    cols, Ho, Wo = _im2col2d(xp, kh, kw, 1, 1)
    y = cols @ w.reshape(Cout, -1).T
    return y.transpose(0, 2, 1).reshape(xp.shape[0], Cout, Ho, Wo)


def _dilate2d(y, sh, sw):
    if sh == 1 and sw == 1:
        return y
    B, C, H, W = y.shape
    out = np.zeros((B, C, (H - 1) * sh + 1, (W - 1) * sw + 1), dtype=y.dtype)
    out[:, :, ::sh, ::sw] = y
    return out


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Batched 2-D correlation: x (B,Cin,H,W), w (Cout,Cin,kh,kw)."""
    _same_dtype(x, w) if bias is None else _same_dtype(x, w, bias)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x rank 4 and w rank 4")
    B, Cin, H, W = x.shape
    Cout, Cw, kh, kw = w.shape
    if Cw != Cin:
        raise ShapeError(f"conv2d channel mismatch: x has {Cin}, w expects {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got ({kh},{kw})")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Ho = _out_extent(H, kh, sh, ph, 2)
    Wo = _out_extent(W, kw, sw, pw, 3)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols, _, _ = _im2col2d(xp, kh, kw, sh, sw)
    cols = np.ascontiguousarray(cols)
    y = cols @ w.data.reshape(Cout, -1).T
    out = y.transpose(0, 2, 1).reshape(B, Cout, Ho, Wo)
    if bias is not None:
        if bias.shape != (Cout,):
            raise ShapeError(f"bias must have shape ({Cout},)")
        out = out + bias.data.reshape(1, Cout, 1, 1)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        if w.requires_grad:
            gw = g2.T @ cols.reshape(B * Ho * Wo, -1)
            w.accumulate_grad(gw.reshape(w.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gd = _dilate2d(g, sh, sw)
            gd = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            w_rot = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gxp = _conv2d_raw(gd, np.ascontiguousarray(w_rot))
            x.accumulate_grad(gxp[:, :, ph:ph + H, pw:pw + W])

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make(out, inputs, grad_fn)


def _im2col3d(xp, kt, kh, kw, st, sh, sw):
    B, C, Tp, Hp, Wp = xp.shape
    To = (Tp - kt) // st + 1
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    s0, s1, s2, s3, s4 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        (B, To, Ho, Wo, C, kt, kh, kw),
        (s0, s2 * st, s3 * sh, s4 * sw, s1, s2, s3, s4),
    )
    return view.reshape(B, To * Ho * Wo, C * kt * kh * kw), To, Ho, Wo


def _conv3d_raw(xp, w):
    Cout, Cin, kt, kh, kw = w.shape
    cols, To, Ho, Wo = _im2col3d(xp, kt, kh, kw, 1, 1, 1)
    y = cols @ w.reshape(Cout, -1).T
    return y.transpose(0, 2, 1).reshape(xp.shape[0], Cout, To, Ho, Wo)


def _dilate3d(y, st, sh, sw):
    if st == sh == sw == 1:
        return y
    B, C, T, H, W = y.shape
    out = np.zeros(
        (B, C, (T - 1) * st + 1, (H - 1) * sh + 1, (W - 1) * sw + 1), dtype=y.dtype
    )
    out[:, :, ::st, ::sh, ::sw] = y
    return out


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Batched 3-D correlation: x (B,Cin,T,H,W), w (Cout,Cin,kt,kh,kw).

    Spatial kernel extents kh,kw must be odd; the temporal extent kt may be
    even so that stride-2 stages can halve an even T exactly.
    """
    _same_dtype(x, w) if bias is None else _same_dtype(x, w, bias)
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError("conv3d expects x rank 5 and w rank 5")
    B, Cin, T, H, W = x.shape
    Cout, Cw, kt, kh, kw = w.shape
    if Cw != Cin:
        raise ShapeError(f"conv3d channel mismatch: x has {Cin}, w expects {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv3d spatial kernel extents must be odd, got ({kh},{kw})")
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    To = _out_extent(T, kt, st, pt, 2)
    Ho = _out_extent(H, kh, sh, ph, 3)
    Wo = _out_extent(W, kw, sw, pw, 4)

    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"bias must have shape ({Cout},)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    st_ = _tls()
    need_grad = st_.grad_enabled and (
        x.requires_grad or w.requires_grad or (bias is not None and bias.requires_grad)
    )
    cols_bytes = B * To * Ho * Wo * Cin * kt * kh * kw * x.data.dtype.itemsize
    if not need_grad and cols_bytes > _CONV_COLS_BYTE_LIMIT:
        # inference on large volumes: materialize columns one temporal slab
        # at a time so peak memory stays bounded
        wm = w.data.reshape(Cout, -1).T
        out = np.empty((B, Cout, To, Ho, Wo), dtype=x.data.dtype)
        slab = max(1, _CONV_COLS_BYTE_LIMIT // max(1, cols_bytes // To))
        for t0 in range(0, To, slab):
            t1 = min(To, t0 + slab)
            xslab = xp[:, :, t0 * st:(t1 - 1) * st + kt]
            c, to_s, _, _ = _im2col3d(xslab, kt, kh, kw, st, sh, sw)
            y = np.ascontiguousarray(c) @ wm
            out[:, :, t0:t1] = y.transpose(0, 2, 1).reshape(B, Cout, to_s, Ho, Wo)
        if bias is not None:
            out += bias.data.reshape(1, Cout, 1, 1, 1)
        return _make(out, (x, w) if bias is None else (x, w, bias), lambda g: None)

    cols, _, _, _ = _im2col3d(xp, kt, kh, kw, st, sh, sw)
    cols = np.ascontiguousarray(cols)
    y = cols @ w.data.reshape(Cout, -1).T
    out = y.transpose(0, 2, 1).reshape(B, Cout, To, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, Cout, 1, 1, 1)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(B * To * Ho * Wo, Cout)
        if w.requires_grad:
            gw = g2.T @ cols.reshape(B * To * Ho * Wo, -1)
            w.accumulate_grad(gw.reshape(w.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            gd = _dilate3d(g, st, sh, sw)
            gd = np.pad(
                gd,
                ((0, 0), (0, 0), (kt - 1, kt - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)),
            )
            w_rot = w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
            gxp = _conv3d_raw(gd, np.ascontiguousarray(w_rot))
            x.accumulate_grad(gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W])

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make(out, inputs, grad_fn)


# ---------------------------------------------------------------------------
# softmax / normalization / nonlinearities


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along `axis`; slices sum to 1."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of bounds for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            x.accumulate_grad(y * (g - dot))

    return _make(y, (x,), grad_fn)


def normalize(x: Tensor, gamma: Tensor, beta: Tensor, axes, eps: float) -> Tensor:
    """Normalize to zero mean / unit variance over `axes`, then apply the
    learned affine.  gamma/beta must broadcast into x.
    """
    if eps <= 0:
        raise ConfigError(f"normalization eps must be > 0, got {eps}")
    _same_dtype(x, gamma, beta)
    axes = tuple(ax % x.ndim for ax in (axes if isinstance(axes, (tuple, list)) else (axes,)))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    y0 = xc * inv
    out = gamma.data * y0 + beta.data
    if out.shape != x.shape:
        raise ShapeError("gamma/beta must broadcast into x")

    def grad_fn(g):
        if beta.requires_grad:
            beta.accumulate_grad(_unbroadcast(g, beta.shape))
        if gamma.requires_grad:
            gamma.accumulate_grad(_unbroadcast(g * y0, gamma.shape))
        if x.requires_grad:
            gy = g * gamma.data
            m1 = gy.mean(axis=axes, keepdims=True)
            m2 = (gy * y0).mean(axis=axes, keepdims=True)
            x.accumulate_grad(inv * (gy - m1 - y0 * m2))

    return _make(out, (x, gamma, beta), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _make(np.where(mask, x.data, x.data.dtype.type(0)), (x,), grad_fn)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact erf form: 0.5*x*(1+erf(x/sqrt(2)))."""
    dt = x.data.dtype
    phi_cdf = erf(x.data * dt.type(1.0 / _SQRT2))
    phi_cdf += 1.0
    phi_cdf *= 0.5
    out = (x.data * phi_cdf).astype(dt, copy=False)

    def grad_fn(g):
        if x.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            x.accumulate_grad(g * (phi_cdf + x.data * pdf))

    return _make(out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; output is strictly inside (0,1)."""
    dt = x.data.dtype
    pos = x.data >= 0
    z = np.exp(np.where(pos, -x.data, x.data))
    y = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
    fi = np.finfo(dt)
    y = np.clip(y, fi.tiny, 1.0 - fi.epsneg).astype(dt, copy=False)

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * y * (1.0 - y))

    return _make(y, (x,), grad_fn)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and losses


def tsum(x: Tensor, axis=None) -> Tensor:
    def grad_fn(g):
        if x.requires_grad:
            if axis is None:
                x.accumulate_grad(np.broadcast_to(g, x.shape).copy())
            else:
                x.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    out = x.data.sum(axis=axis)
    return _make(np.asarray(out, dtype=x.data.dtype), (x,), grad_fn)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].

    Fusing the sigmoid keeps the loss finite for saturated logits.
    """
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean(), dtype=logits.data.dtype)
    n = logits.size

    def grad_fn(g):
        if logits.requires_grad:
            pos = z >= 0
            e = np.exp(np.where(pos, -z, z))
            sig = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
            logits.accumulate_grad(g * (sig - t) / n)

    return _make(out, (logits,), grad_fn)


# ---------------------------------------------------------------------------
# data-movement ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape {x.shape} -> {shape} changes element count")

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), grad_fn)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = np.argsort(axes)

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), grad_fn)


def pad(x: Tensor, pads) -> Tensor:
    """Zero padding, `pads` is a per-axis list of (before, after)."""
    pads = tuple((int(a), int(b)) for a, b in pads)
    if len(pads) != x.ndim:
        raise ShapeError("pad spec must cover every axis")
    if any(a < 0 or b < 0 for a, b in pads):
        raise ShapeError("pad amounts must be >= 0")
    sl = tuple(slice(a, a + n) for (a, _), n in zip(pads, x.shape))

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g[sl])

    return _make(np.pad(x.data, pads), (x,), grad_fn)


def crop(x: Tensor, bounds) -> Tensor:
    """Per-axis (start, stop) slicing; the gradient zero-pads back."""
    bounds = tuple((int(a), int(b)) for a, b in bounds)
    if len(bounds) != x.ndim:
        raise ShapeError("crop spec must cover every axis")
    for (a, b), n in zip(bounds, x.shape):
        if not (0 <= a < b <= n):
            raise ShapeError(f"invalid crop {bounds} for shape {x.shape}")
    sl = tuple(slice(a, b) for a, b in bounds)

    def grad_fn(g):
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=g.dtype)
            gx[sl] = g
            x.accumulate_grad(gx)

    return _make(np.ascontiguousarray(x.data[sl]), (x,), grad_fn)


def repeat(x: Tensor, axis: int, factor: int) -> Tensor:
    """Nearest-neighbour repeat along one axis; gradient sums the copies."""
    axis = axis % x.ndim
    factor = int(factor)
    if factor < 1:
        raise ShapeError("repeat factor must be >= 1")

    def grad_fn(g):
        if x.requires_grad:
            shp = list(x.shape)
            shp.insert(axis + 1, factor)
            x.accumulate_grad(g.reshape(shp).sum(axis=axis + 1))

    return _make(np.ascontiguousarray(np.repeat(x.data, factor, axis=axis)), (x,), grad_fn)


# ---------------------------------------------------------------------------
# window / grid partitioning


def _pad_hw_to_multiple(x: Tensor, m: int) -> Tensor:
    B, C, H, W = x.shape
    ph = (-H) % m
    pw = (-W) % m
    if ph == 0 and pw == 0:
        return x
    return pad(x, [(0, 0), (0, 0), (0, ph), (0, pw)])


def window_partition(x: Tensor, p: int) -> Tensor:
    """(B,C,H,W) -> (B*nH*nW, P*P, C) non-overlapping PxP windows.

    H and W are zero-padded up to the next multiple of P first.
    """
    if p <= 0:
        raise ConfigError(f"window size must be positive, got {p}")
    if x.ndim != 4:
        raise ShapeError("window_partition expects rank-4 input")
    xp = _pad_hw_to_multiple(x, p)
    B, C, Hp, Wp = xp.shape
    nh, nw = Hp // p, Wp // p
    t = reshape(xp, (B, C, nh, p, nw, p))
    t = permute(t, (0, 2, 4, 3, 5, 1))
    return reshape(t, (B * nh * nw, p * p, C))


def window_reverse(tokens: Tensor, p: int, b: int, c: int, h: int, w: int) -> Tensor:
    """Exact inverse of window_partition for original shape (b,c,h,w)."""
    hp = h + ((-h) % p)
    wp = w + ((-w) % p)
    nh, nw = hp // p, wp // p
    if tokens.shape != (b * nh * nw, p * p, c):
        raise ShapeError(f"token shape {tokens.shape} inconsistent with reverse target")
    t = reshape(tokens, (b, nh, nw, p, p, c))
    t = permute(t, (0, 5, 1, 3, 2, 4))
    t = reshape(t, (b, c, hp, wp))
    if (hp, wp) != (h, w):
        t = crop(t, [(0, b), (0, c), (0, h), (0, w)])
    return t


def grid_partition(x: Tensor, g: int) -> Tensor:
    """(B,C,H,W) -> (B*(H/G)*(W/G), G*G, C) dilated token groups.

    Token (i,j) of group (a,b) is the pixel at (i*H/G + a, j*W/G + b), so a
    group mixes positions strided across the whole map.
    """
    if g <= 0:
        raise ConfigError(f"grid size must be positive, got {g}")
    if x.ndim != 4:
        raise ShapeError("grid_partition expects rank-4 input")
    xp = _pad_hw_to_multiple(x, g)
    B, C, Hp, Wp = xp.shape
    ch, cw = Hp // g, Wp // g
    t = reshape(xp, (B, C, g, ch, g, cw))
    t = permute(t, (0, 3, 5, 2, 4, 1))
    return reshape(t, (B * ch * cw, g * g, C))


def grid_reverse(tokens: Tensor, g: int, b: int, c: int, h: int, w: int) -> Tensor:
    """Exact inverse of grid_partition for original shape (b,c,h,w)."""
    hp = h + ((-h) % g)
    wp = w + ((-w) % g)
    ch, cw = hp // g, wp // g
    if tokens.shape != (b * ch * cw, g * g, c):
        raise ShapeError(f"token shape {tokens.shape} inconsistent with reverse target")
    t = reshape(tokens, (b, ch, cw, g, g, c))
    t = permute(t, (0, 5, 3, 1, 4, 2))
    t = reshape(t, (b, c, hp, wp))
    if (hp, wp) != (h, w):
        t = crop(t, [(0, b), (0, c), (0, h), (0, w)])
    return t


# ---------------------------------------------------------------------------
# backward pass and the gradient checker


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    The active tape is consumed; calling backward again before recording
    new ops raises UsageError.
    """
    if loss.shape != ():
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if tape._spent:
        raise UsageError("tape already consumed; record new ops before backward")
    if not tape.nodes:
        raise UsageError("tape is empty; nothing to differentiate")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(tape.nodes):
        if node.out.grad is None:
            continue
        node.grad_fn(node.out.grad)
    tape.nodes = []
    tape._spent = True


def finite_diff_check(f, xs, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients of scalar f(*xs) and
    central finite differences, taken over every coordinate of every
    input with requires_grad; frozen inputs are skipped.

    Relative error per coordinate: |analytic - numeric| / max(1, |numeric|).
    """
    xs = list(xs)
    for x in xs:
        x.zero_grad()
    reset_tape()
    out = f(*xs)
    if out.shape != ():
        raise UsageError("finite_diff_check requires a scalar-valued function")
    backward(out)
    analytic = [x.grad.copy() if x.requires_grad else None for x in xs]

    worst = 0.0
    with no_grad():
        for x, an in zip(xs, analytic):
            if not x.requires_grad:
                continue
            flat = x.data.reshape(-1)
            gflat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*xs).item()
                flat[i] = orig - eps
                fm = f(*xs).item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    reset_tape()
    return worst
