"""Dense row-major tensor and the op set used by the conv-attention forward passes.

A :class:`Tensor` wraps a contiguous numpy array of ``float32`` or ``float64``.
Every op here is a plain function returning a new tensor; when a
:class:`coat.autograd.Graph` is active and one of the inputs is tracked by it,
the op also records its vector-Jacobian product on the graph tape.

Two optional observers can be switched on around any computation:

* :class:`FlopCounter` accumulates multiply-accumulate counts for the
  contracting ops (matmul, convolutions, resize).
* :class:`AllocationAudit` tracks live and peak bytes of buffers created
  through :func:`audited_empty` (the benchmark kernels allocate this way).
"""

from __future__ import annotations

import io
import math
import struct
import threading
import weakref
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from scipy.special import erf

from coat import autograd
from coat.errors import ConfigError, DimensionError, NumericError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
MAGIC = b"COAT"
LAYER_NORM_EPS = 1e-6

_state = threading.local()


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return DTYPES[dtype]
        except KeyError:
            raise ConfigError(f"unknown dtype {dtype!r}, expected one of {sorted(DTYPES)}") from None
    dt = np.dtype(dtype)
    if dt not in _DTYPE_TAGS:
        raise ConfigError(f"unsupported dtype {dt}; only float32 and float64")
    return dt


class Tensor:
    """Immutable (by convention) dense array with autograd bookkeeping."""

    __slots__ = ("data", "_node", "_graph", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in _DTYPE_TAGS else np.float64
        arr = np.ascontiguousarray(data, dtype=resolve_dtype(dtype))
        if arr.ndim and min(arr.shape) < 1:
            raise DimensionError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self._node: int | None = None
        self._graph = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def astype(self, dtype) -> Tensor:
        return cast(self, dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; all routed through the recorded ops below
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _scalar_error(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor) and (dtype is None or resolve_dtype(dtype) == x.dtype):
        return x
    return Tensor(x, dtype)


def zeros(shape, dtype="f32") -> Tensor:
    return Tensor(np.zeros(shape, dtype=resolve_dtype(dtype)))


def ones(shape, dtype="f32") -> Tensor:
    return Tensor(np.ones(shape, dtype=resolve_dtype(dtype)))


def _wrap(data: np.ndarray, op: str, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out._node = None
    out._graph = None
    if _state.__dict__.get("debug"):
        if not np.all(np.isfinite(out.data)):
            raise NumericError(f"non-finite values produced by {op}")
    autograd.record(out, op, inputs, vjp)
    return out


def _same_dtype(*ts: Tensor) -> np.dtype:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise DimensionError(f"dtype mismatch: {dt.name} vs {t.dtype.name}")
    return dt


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    _same_dtype(a, b)
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class debug_mode:
    """Context manager that checks every op output for NaN/Inf."""

    def __enter__(self):
        self._prev = _state.__dict__.get("debug", False)
        _state.debug = True
        return self

    def __exit__(self, *exc):
        _state.debug = self._prev
        return False


# ---------------------------------------------------------------------------
# FLOP and allocation observers


class FlopCounter:
    """Accumulates multiply-accumulate counts (one MAC = one FLOP) per op kind."""

    def __init__(self):
        self.by_op: dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.by_op.values())

    def add(self, op: str, macs: int) -> None:
        self.by_op[op] = self.by_op.get(op, 0) + int(macs)

    def __enter__(self):
        self._prev = _state.__dict__.get("flops")
        _state.flops = self
        return self

    def __exit__(self, *exc):
        _state.flops = self._prev
        return False


def _count(op: str, macs: int) -> None:
    counter = _state.__dict__.get("flops")
    if counter is not None:
        counter.add(op, macs)


class AllocationAudit:
    """Tracks live/peak bytes of buffers made by :func:`audited_empty`.

    Buffers are attributed while alive; release is observed through weak
    finalizers, so dropping the last reference lowers the live count.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.allocations = 0
        self._lock = threading.Lock()

    def _alloc(self, arr: np.ndarray) -> None:
        n = arr.nbytes
        with self._lock:
            self.live += n
            self.allocations += 1
            self.peak = max(self.peak, self.live)
        weakref.finalize(arr, self._free, n)

    def _free(self, n: int) -> None:
        with self._lock:
            self.live -= n

    def __enter__(self):
        self._prev = _state.__dict__.get("audit")
        _state.audit = self
        return self

    def __exit__(self, *exc):
        _state.audit = self._prev
        return False


def audited_empty(shape, dtype) -> np.ndarray:
    """``np.empty`` that reports the buffer to the active :class:`AllocationAudit`."""
    arr = np.empty(shape, dtype=dtype)
    audit = _state.__dict__.get("audit")
    if audit is not None:
        audit._alloc(arr)
    return arr


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _wrap(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _wrap(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = a.dtype.type(b)
        return _wrap(a.data * s, "scale", (a,), lambda g: (g * s,))
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    return _wrap(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _wrap(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), "sum", (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return _wrap(out.copy(), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1] if x.ndim <= 2 else tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _wrap(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; copies."""
    shape, dt = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dt)
        full[index] = g
        return (full,)

    return _wrap(x.data[index].copy(), "take", (x,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    _same_dtype(*parts)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _wrap(np.concatenate([p.data for p in parts], axis=axis), "concat", parts, vjp)


def cast(x: Tensor, dtype) -> Tensor:
    dt = resolve_dtype(dtype)
    src = x.dtype
    return _wrap(x.data.astype(dt), "cast", (x,), lambda g: (g.astype(src),))


# ---------------------------------------------------------------------------
# contracting ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading extents broadcast as in numpy."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    _same_dtype(a, b)
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    _count("matmul", out.size * ad.shape[-1])

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _wrap(out, "matmul", (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out [in, out]."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        # closed-form JVP: y * (g - <g, y>)
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _wrap(y, "softmax", (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return _wrap(xd * cdf, "gelu", (x,), lambda g: (g * (cdf + xd * pdf),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    c = x.shape[-1]
    if c == 0 or gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm over last extent {x.shape} needs gamma/beta of shape ({c},)")
    _same_dtype(x, gamma, beta)
    xd, gd = x.data, gamma.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _wrap(out, "layer_norm", (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# spatial ops (channels-last H x W x C)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size depthwise convolution with zero padding.

    ``x`` is [H, W, C], ``kernel`` is [M, M, C] with odd ``M``. Output channel c
    only sees input channel c and ``kernel[..., c]`` (cross-correlation form,
    as in the usual deep-learning convention).
    """
    if x.ndim != 3 or kernel.ndim != 3:
        raise DimensionError(f"depthwise_conv2d expects [H,W,C] and [M,M,C], got {x.shape}, {kernel.shape}")
    m = kernel.shape[0]
    if kernel.shape[1] != m:
        raise ConfigError(f"kernel must be square, got {kernel.shape[:2]}")
    if m % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {m}")
    h, w, c = x.shape
    if kernel.shape[2] != c:
        raise DimensionError(f"kernel channels {kernel.shape[2]} != input channels {c}")
    _same_dtype(x, kernel)
    r = (m - 1) // 2
    xp = np.pad(x.data, ((r, r), (r, r), (0, 0)))
    kd = kernel.data
    out = np.zeros((h, w, c), dtype=x.dtype)
    for dy in range(m):
        for dx in range(m):
            out += xp[dy:dy + h, dx:dx + w, :] * kd[dy, dx]
    _count("depthwise_conv2d", h * w * c * m * m)
    inputs: tuple = (x, kernel)
    if bias is not None:
        out += bias.data
        inputs = (x, kernel, bias)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for dy in range(m):
            for dx in range(m):
                gxp[dy:dy + h, dx:dx + w, :] += g * kd[dy, dx]
                gk[dy, dx] = (g * xp[dy:dy + h, dx:dx + w, :]).sum(axis=(0, 1))
        grads = (gxp[r:r + h, r:r + w, :], gk)
        if bias is not None:
            grads += (g.sum(axis=(0, 1)),)
        return grads

    return _wrap(out, "depthwise_conv2d", inputs, vjp)


def patchify_conv(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int) -> Tensor:
    """Non-overlapping strided convolution (kernel size == stride).

    ``x`` is [H, W, Cin]; ``weight`` is [stride, stride, Cin, Cout].
    """
    h, w, cin = x.shape
    if h % stride or w % stride:
        raise DimensionError(f"input {h}x{w} is not divisible by patch stride {stride}")
    if weight.shape[:3] != (stride, stride, cin):
        raise DimensionError(f"patch weight {weight.shape} does not match stride {stride} and {cin} input channels")
    hp, wp = h // stride, w // stride
    patches = reshape(x, (hp, stride, wp, stride, cin))
    patches = transpose(patches, (0, 2, 1, 3, 4))
    patches = reshape(patches, (hp * wp, stride * stride * cin))
    flat_w = reshape(weight, (stride * stride * cin, weight.shape[3]))
    y = linear(patches, flat_w, bias)
    return reshape(y, (hp, wp, weight.shape[3]))


def _resize_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers, clamped to [0, n_in - 1]
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an [H, W, C] map with half-pixel centers and edge clamping."""
    h, w, c = x.shape
    if min(out_h, out_w) < 1:
        raise DimensionError(f"output size must be >= 1, got {out_h}x{out_w}")
    if (h, w) == (out_h, out_w):
        return _wrap(x.data.copy(), "resize", (x,), lambda g: (g,))
    y0, y1, fy = _resize_axis(h, out_h)
    x0, x1, fx = _resize_axis(w, out_w)
    dt = x.dtype
    fy = fy.astype(dt)[:, None, None]
    fx = fx.astype(dt)[None, :, None]
    xd = x.data
    top = xd[y0][:, x0] * (1 - fx) + xd[y0][:, x1] * fx
    bot = xd[y1][:, x0] * (1 - fx) + xd[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    _count("resize", 4 * out_h * out_w * c)

    def vjp(g):
        gx = np.zeros((h, w, c), dtype=dt)
        gt = g * (1 - fy)
        gb = g * fy
        yy0 = y0[:, None]
        yy1 = y1[:, None]
        np.add.at(gx, (yy0, x0[None, :]), gt * (1 - fx))
        np.add.at(gx, (yy0, x1[None, :]), gt * fx)
        np.add.at(gx, (yy1, x0[None, :]), gb * (1 - fx))
        np.add.at(gx, (yy1, x1[None, :]), gb * fx)
        return (gx,)

    return _wrap(out, "resize", (x,), vjp)


# ---------------------------------------------------------------------------
# deterministic initialization


def rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical streams for equal seeds."""
    return np.random.Generator(np.random.Philox(int(seed)))


def trunc_normal(gen: np.random.Generator, shape, std: float = 0.02, dtype="f32") -> Tensor:
    """Normal(0, std) truncated to +-2 std by redrawing outliers."""
    z = gen.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return Tensor(z * std, dtype)


# ---------------------------------------------------------------------------
# binary container: "COAT", u8 dtype tag, u8 rank, u64 LE extents, LE values


def write_tensor(fp: BinaryIO, t: Tensor) -> None:
    fp.write(MAGIC)
    fp.write(struct.pack("<BB", _DTYPE_TAGS[t.dtype], t.ndim))
    fp.write(struct.pack(f"<{t.ndim}Q", *t.shape))
    fp.write(t.data.astype(t.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fp: BinaryIO) -> Tensor:
    magic = fp.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    tag, rank = struct.unpack("<BB", fp.read(2))
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    shape = struct.unpack(f"<{rank}Q", fp.read(8 * rank))
    dt = _TAG_DTYPES[tag].newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    raw = fp.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise ValueError("truncated tensor payload")
    data = np.frombuffer(raw, dtype=dt).astype(_TAG_DTYPES[tag]).reshape(shape)
    return Tensor(data)


def dumps(t: Tensor) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def loads(raw: bytes) -> Tensor:
    return read_tensor(io.BytesIO(raw))


def stack_leading(ts: Iterable[Tensor]) -> Tensor:
    """Stack along a new leading axis (via reshape + concat, so it records)."""
    ts = list(ts)
    return concat([reshape(t, (1,) + t.shape) for t in ts], axis=0)
