"""Dense float tensors with reverse-mode automatic differentiation.

Every differentiable operation the model needs lives here: elementwise
arithmetic, matmul, 2D convolution (plain, transposed, grouped, dilated),
group normalization, pooling, bilinear resampling and the activations.
Tensors wrap row-major numpy arrays, float32 by default; float64 is
accepted so test oracles can run the same graph at higher precision.

Operations never mutate their inputs. When gradients are being tracked,
each operation appends one record to the active :class:`Tape`; calling
``backward`` on a scalar loss replays the records in strict reverse
execution order, accumulating gradients additively into ``Tensor.grad``.
The trainer owns zeroing of gradients; nothing here clears them
implicitly.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_ALLOWED_DTYPES = (np.float32, np.float64)

# Module switches. Finite checks catch NaN/Inf the moment an op produces it
# (an error state, never silent); the scope stack names the offending layer.
_FINITE_CHECKS = True
_GRAD_ENABLED = True
_SCOPE: list[str] = []


class Tensor:
    """N-dimensional float array, optionally participating in the tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

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

    def item(self):
        return float(self.data.reshape(()))

    def backward(self):
        active_tape().backward(self)

    # -- convenience wrappers -------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"


class _Record:
    __slots__ = ("outs", "backward_fn")

    def __init__(self, outs, backward_fn):
        self.outs = outs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations, replayed in reverse."""

    def __init__(self):
        self._records: list[_Record] = []
        self._replayed_at = -1

    def __len__(self):
        return len(self._records)

    def record(self, outs, backward_fn):
        self._records.append(_Record(tuple(outs), backward_fn))

    def backward(self, loss: Tensor):
        """Populate ``grad`` on every reachable tensor that requires it."""
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._records:
            raise UsageError("backward on an empty tape; run a forward pass first")
        if self._replayed_at == len(self._records):
            raise UsageError("backward called twice without a new forward pass")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self._records):
            grads = [o.grad for o in rec.outs]
            if all(g is None for g in grads):
                continue
            grads = [
                g if g is not None else np.zeros_like(o.data)
                for g, o in zip(grads, rec.outs)
            ]
            rec.backward_fn(*grads)
        self._replayed_at = len(self._records)

    def clear(self):
        self._records.clear()
        self._replayed_at = -1


_ACTIVE = Tape()


def active_tape() -> Tape:
    return _ACTIVE


def reset_tape() -> Tape:
    """Install (and return) a fresh global tape, dropping old records."""
    global _ACTIVE
    _ACTIVE = Tape()
    return _ACTIVE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, validation)."""
    global _GRAD_ENABLED
    prior = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prior


@contextlib.contextmanager
def op_scope(name: str):
    """Label a region so numeric errors report the offending layer path."""
    _SCOPE.append(name)
    try:
        yield
    finally:
        _SCOPE.pop()


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


# ---------------------------------------------------------------------------
# internals
# ---------------------------------------------------------------------------

def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _check(name: str, arr: np.ndarray) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        where = f" in {'/'.join(_SCOPE)}" if _SCOPE else ""
        raise NumericError(f"{name} produced non-finite values{where}")


def _tracking(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _make(name, data, inputs, backward_fn):
    """Wrap op output data; register the backward closure when tracking."""
    _check(name, data)
    tracked = _tracking(*inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        _ACTIVE.record((out,), backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = g.reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * bd, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ad, b.data.shape))

    return _make("mul", ad * bd, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make("neg", -a.data, (a,), backward)


def with_values(a: Tensor, data: np.ndarray) -> Tensor:
    """Forward takes ``data`` verbatim; backward is the identity to ``a``.

    Only for rounding-level compensation: ``data`` may deviate from the
    computed value by floating-point noise, never by anything material.
    """
    data = np.asarray(data, dtype=a.data.dtype)
    if data.shape != a.data.shape:
        raise DimensionError("with_values: shape mismatch")
    if np.abs(data - a.data).max() > 1e-5 * (1.0 + np.abs(a.data).max()):
        raise UsageError("with_values: substituted data deviates beyond rounding")

    def backward(g):
        if a.requires_grad:
            _accum(a, g)

    return _make("with_values", data, (a,), backward)


def rsqrt(a: Tensor, eps: float = 0.0) -> Tensor:
    """1/sqrt(a + eps); used by normalization layers."""
    inv = 1.0 / np.sqrt(a.data + eps)

    def backward(g):
        if a.requires_grad:
            _accum(a, -0.5 * g * inv ** 3)

    return _make("rsqrt", inv, (a,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments, so it cannot overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_data(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * s * (1.0 - s))

    return _make("sigmoid", s, (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid_data(a.data)
    out = a.data * s

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (s + a.data * s * (1.0 - s)))

    return _make("silu", out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axes is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make("sum", out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    if axes is None:
        n = a.size
    else:
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axes, keepdims=keepdims), 1.0 / n)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(old))

    return _make("reshape", data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    data = np.ascontiguousarray(np.transpose(a.data, axes))

    def backward(g):
        if a.requires_grad:
            _accum(a, np.transpose(g, inv))

    return _make("transpose", data, (a,), backward)


def flip_last2(a: Tensor) -> Tensor:
    """Reverse the last two axes (used to build transposed-conv kernels)."""
    data = np.ascontiguousarray(a.data[..., ::-1, ::-1])

    def backward(g):
        if a.requires_grad:
            _accum(a, g[..., ::-1, ::-1])

    return _make("flip_last2", data, (a,), backward)


def permute_axis(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Reorder one axis by the permutation ``idx``."""
    idx = np.asarray(idx)
    inv = np.argsort(idx)
    data = np.ascontiguousarray(np.take(a.data, idx, axis=axis))

    def backward(g):
        if a.requires_grad:
            _accum(a, np.take(g, inv, axis=axis))

    return _make("permute_axis", data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    try:
        data = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul mismatch {ad.shape} @ {bd.shape}") from exc

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, bd.swapaxes(-1, -2))
            _accum(a, _unbroadcast(ga, ad.shape))
        if b.requires_grad:
            gb = np.matmul(ad.swapaxes(-1, -2), g)
            _accum(b, _unbroadcast(gb, bd.shape))

    return _make("matmul", data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b with w of shape [out, in], applied over the last axis."""
    if x.shape[-1] != w.shape[-1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    out = matmul(x, transpose(w, (1, 0)))
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride=1, padding=0, dilation=1,
           groups=1) -> Tensor:
    """Cross-correlation of [B,Cin,H,W] with kernel [Cout,Cin/g,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4D input and kernel")
    B, Cin, H, W = x.shape
    Cout, Cin_g, kh, kw = kernel.shape
    s, p, d, g = int(stride), int(padding), int(dilation), int(groups)
    if Cin % g or Cout % g or Cin_g != Cin // g:
        raise DimensionError(
            f"conv2d: channels {Cin}->{Cout} incompatible with groups={g} "
            f"and kernel {tuple(kernel.shape)}")
    Hout = (H + 2 * p - d * (kh - 1) - 1) // s + 1
    Wout = (W + 2 * p - d * (kw - 1) - 1) // s + 1
    if Hout <= 0 or Wout <= 0:
        raise DimensionError(f"conv2d: empty output for input {H}x{W}, "
                             f"kernel {kh}x{kw}, stride {s}, padding {p}")

    xd = x.data
    if p:
        xd = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((B, Cin, kh, kw, Hout, Wout), dtype=xd.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xd[:, :, di * d: di * d + s * Hout: s,
                                    dj * d: dj * d + s * Wout: s]
    L = Hout * Wout
    Cout_g = Cout // g
    a = cols.reshape(B, g, Cin_g * kh * kw, L)
    kmat = kernel.data.reshape(g, Cout_g, Cin_g * kh * kw)
    out = np.matmul(kmat[None], a).reshape(B, Cout, Hout, Wout)

    def backward(gr):
        gm = gr.reshape(B, g, Cout_g, L)
        if kernel.requires_grad:
            gk = np.matmul(gm, a.swapaxes(-1, -2)).sum(axis=0)
            _accum(kernel, gk.reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = np.matmul(kmat[None].swapaxes(-1, -2), gm)
            gcols = gcols.reshape(B, Cin, kh, kw, Hout, Wout)
            gx = np.zeros((B, Cin, H + 2 * p, W + 2 * p), dtype=gr.dtype)
            for di in range(kh):
                for dj in range(kw):
                    gx[:, :, di * d: di * d + s * Hout: s,
                       dj * d: dj * d + s * Wout: s] += gcols[:, :, di, dj]
            if p:
                gx = gx[:, :, p: p + H, p: p + W]
            _accum(x, gx)

    return _make("conv2d", out, (x, kernel), backward)


def dilate2(x: Tensor, stride: int, extra: int = 0) -> Tensor:
    """Insert stride-1 zeros between cells of the last two axes."""
    s = int(stride)
    B, C, H, W = x.shape
    Hd = (H - 1) * s + 1 + extra
    Wd = (W - 1) * s + 1 + extra
    data = np.zeros((B, C, Hd, Wd), dtype=x.data.dtype)
    data[:, :, ::s, ::s][:, :, :H, :W] = x.data

    def backward(g):
        if x.requires_grad:
            _accum(x, g[:, :, ::s, ::s][:, :, :H, :W])

    return _make("dilate2", data, (x,), backward)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride=1, padding=0,
                     output_padding=0) -> Tensor:
    """Gradient-of-conv semantics; kernel is [Cin, Cout, kh, kw].

    Output extent is (H-1)*stride - 2*padding + kh + output_padding;
    output_padding extends the trailing edge so stride-2 decoders restore
    even extents exactly.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv_transpose2d expects 4D input and kernel")
    Cin, Cout, kh, kw = kernel.shape
    if x.shape[1] != Cin:
        raise DimensionError(
            f"conv_transpose2d: input channels {x.shape[1]} != kernel Cin {Cin}")
    p = int(padding)
    if p > kh - 1 or p > kw - 1:
        raise DimensionError("conv_transpose2d: padding must be < kernel size")
    if output_padding >= stride and stride > 1:
        raise DimensionError("conv_transpose2d: output_padding must be < stride")
    k2 = flip_last2(transpose(kernel, (1, 0, 2, 3)))
    xd = dilate2(x, stride, output_padding)
    return conv2d(xd, k2, stride=1, padding=kh - 1 - p)


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; extents must be even."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avg_pool2d needs even extents, got {H}x{W}")
    blocks = reshape(x, (B, C, H // 2, 2, W // 2, 2))
    return tmean(blocks, axis=(3, 5))


_BILINEAR_CACHE: dict[int, np.ndarray] = {}


def _bilinear_matrix(n: int) -> np.ndarray:
    """[2n, n] interpolation matrix with half-pixel-center sampling."""
    m = _BILINEAR_CACHE.get(n)
    if m is None:
        m = np.zeros((2 * n, n), dtype=np.float64)
        for dst in range(2 * n):
            src = (dst + 0.5) / 2.0 - 0.5
            i0 = int(np.floor(src))
            frac = src - i0
            lo = min(max(i0, 0), n - 1)
            hi = min(max(i0 + 1, 0), n - 1)
            m[dst, lo] += 1.0 - frac
            m[dst, hi] += frac
        _BILINEAR_CACHE[n] = m
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Double both trailing extents by bilinear interpolation."""
    H, W = x.shape[-2], x.shape[-1]
    dt = x.data.dtype
    mh = Tensor(_bilinear_matrix(H).astype(dt))
    mw = Tensor(np.ascontiguousarray(_bilinear_matrix(W).T.astype(dt)))
    return matmul(matmul(mh, x), mw)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance per (sample, group), then affine."""
    from .errors import ConfigError

    B, C, H, W = x.shape
    if C % groups:
        raise ConfigError(f"group_norm: groups={groups} does not divide C={C}")
    if eps <= 0:
        raise ConfigError("group_norm: eps must be positive")
    xg = reshape(x, (B, groups, (C // groups) * H * W))
    mu = tmean(xg, axis=2, keepdims=True)
    centered = sub(xg, mu)
    var = tmean(mul(centered, centered), axis=2, keepdims=True)
    normed = mul(centered, rsqrt(var, eps))
    normed = reshape(normed, (B, C, H, W))
    gamma4 = reshape(gamma, (1, C, 1, 1))
    beta4 = reshape(beta, (1, C, 1, 1))
    return add(mul(normed, gamma4), beta4)
