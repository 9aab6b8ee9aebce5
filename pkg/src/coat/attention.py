"""Attention operators: the quadratic reference, factorized attention, the
convolutional position encodings, and the multi-head conv-attentional module.

Token layout throughout is ``[N, C]`` with the CLS token (when present) in
row 0 followed by the image tokens of an ``H x W`` grid in row-major order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from coat import tensor as T
from coat.errors import ConfigError, DimensionError
from coat.tensor import Tensor

DEFAULT_CHUNK = 256
CRPE_WINDOW_SIZES = (3, 5, 7)


@dataclass
class TokenSeq:
    """A CLS vector (optional) plus an ``H x W x C`` grid of image tokens."""

    cls: Tensor | None
    img: Tensor

    def __post_init__(self):
        if self.img.ndim != 3:
            raise DimensionError(f"image tokens must be [H,W,C], got {self.img.shape}")
        if self.cls is not None and self.cls.shape != (self.img.shape[2],):
            raise DimensionError(f"CLS shape {self.cls.shape} does not match C={self.img.shape[2]}")

    @property
    def H(self) -> int:
        return self.img.shape[0]

    @property
    def W(self) -> int:
        return self.img.shape[1]

    @property
    def C(self) -> int:
        return self.img.shape[2]

    @property
    def N(self) -> int:
        return self.H * self.W + (self.cls is not None)

    @property
    def dtype(self):
        return self.img.dtype

    def tokens(self) -> Tensor:
        flat = T.reshape(self.img, (self.H * self.W, self.C))
        if self.cls is None:
            return flat
        return T.concat([T.reshape(self.cls, (1, self.C)), flat], axis=0)

    @classmethod
    def from_tokens(cls, tokens: Tensor, H: int, W: int, has_cls: bool = True) -> TokenSeq:
        n, c = tokens.shape
        if n != H * W + has_cls:
            raise DimensionError(f"{n} tokens cannot hold a {H}x{W} grid{' plus CLS' if has_cls else ''}")
        if has_cls:
            return cls(T.reshape(tokens[0:1], (c,)), T.reshape(tokens[1:], (H, W, c)))
        return cls(None, T.reshape(tokens, (H, W, c)))

    def with_img(self, img: Tensor) -> TokenSeq:
        return TokenSeq(self.cls, img)


def default_crpe_windows(heads: int, sizes=CRPE_WINDOW_SIZES) -> dict[int, int]:
    """Near-even split of heads over window sizes, remainder to the larger windows.

    ``default_crpe_windows(8) == {3: 2, 5: 3, 7: 3}``.
    """
    base, rem = divmod(heads, len(sizes))
    counts = [base] * len(sizes)
    for i in range(rem):
        counts[len(sizes) - 1 - i] += 1
    return {m: n for m, n in zip(sizes, counts) if n}


@dataclass(frozen=True)
class ConvAttConfig:
    channels: int
    heads: int
    crpe_windows: Mapping[int, int] = field(default=None)
    cpe_kernel: int = 3

    def __post_init__(self):
        if self.crpe_windows is None:
            object.__setattr__(self, "crpe_windows", default_crpe_windows(self.heads))
        object.__setattr__(self, "crpe_windows", dict(sorted(self.crpe_windows.items())))
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        total = sum(self.crpe_windows.values())
        if total != self.heads:
            raise ConfigError(f"CRPE windows {self.crpe_windows} assign {total} heads, expected {self.heads}")
        for m, n in self.crpe_windows.items():
            if m < 1 or m % 2 == 0:
                raise ConfigError(f"CRPE window size must be odd, got {m}")
            if n < 0:
                raise ConfigError(f"negative head count for window {m}")
        if self.cpe_kernel < 1 or self.cpe_kernel % 2 == 0:
            raise ConfigError(f"CPE kernel size must be odd, got {self.cpe_kernel}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def window_slices(self) -> list[tuple[int, slice]]:
        """Channel slice covered by each window size, in head order."""
        out, start = [], 0
        for m, n in self.crpe_windows.items():
            width = n * self.head_dim
            if width:
                out.append((m, slice(start, start + width)))
            start += width
        return out


# ---------------------------------------------------------------------------
# quadratic reference


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(Q K^T / sqrt(C)) V``; materializes the full N x N map."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"incompatible Q/K/V shapes {q.shape}, {k.shape}, {v.shape}")
    logits = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return T.matmul(T.softmax(logits, axis=-1), v)


def sdpa_kernel(q: np.ndarray, k: np.ndarray, v: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """In-place numpy reference for benchmarking; the N x N buffer is audited."""
    n, c = q.shape
    if out is None:
        out = T.audited_empty((n, v.shape[1]), q.dtype)
    logits = T.audited_empty((n, k.shape[0]), q.dtype)
    np.matmul(q, k.T, out=logits)
    logits *= q.dtype.type(1.0 / math.sqrt(c))
    rowstat = T.audited_empty((n, 1), q.dtype)
    np.max(logits, axis=1, keepdims=True, out=rowstat)
    logits -= rowstat
    np.exp(logits, out=logits)
    np.sum(logits, axis=1, keepdims=True, out=rowstat)
    logits /= rowstat
    np.matmul(logits, v, out=out)
    return out


# ---------------------------------------------------------------------------
# factorized attention


def factorized_attention_kernel(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                                out: np.ndarray | None = None, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """``(Q / sqrt(C)) (softmax_tokens(K)^T V)`` over leading batch dims.

    Streams over token chunks: a column-max pass, then accumulation of the
    C x C context ``L``, then the query product. Transient memory is
    ``O(chunk * C + C^2)`` regardless of the token count.
    """
    *lead, nk, c = k.shape
    nq = q.shape[-2]
    cv = v.shape[-1]
    dt = q.dtype
    if out is None:
        out = T.audited_empty((*lead, nq, cv), dt)
    colmax = T.audited_empty((*lead, 1, c), dt)
    np.max(k[..., :min(chunk, nk), :], axis=-2, keepdims=True, out=colmax)
    for s in range(chunk, nk, chunk):
        np.maximum(colmax, k[..., s:s + chunk, :].max(axis=-2, keepdims=True), out=colmax)

    ctx = T.audited_empty((*lead, c, cv), dt)
    ctx.fill(0)
    denom = T.audited_empty((*lead, 1, c), dt)
    denom.fill(0)
    buf = T.audited_empty((*lead, min(chunk, nk), c), dt)
    part = T.audited_empty((*lead, c, cv), dt)
    for s in range(0, nk, chunk):
        e = buf[..., :min(chunk, nk - s), :]
        np.subtract(k[..., s:s + chunk, :], colmax, out=e)
        np.exp(e, out=e)
        denom += e.sum(axis=-2, keepdims=True)
        np.matmul(np.swapaxes(e, -1, -2), v[..., s:s + chunk, :], out=part)
        ctx += part
    # ctx[c, :] /= denom[c], folded together with the 1/sqrt(C) query scale
    ctx /= np.swapaxes(denom, -1, -2)
    ctx *= dt.type(1.0 / math.sqrt(c))
    for s in range(0, nq, chunk):
        np.matmul(q[..., s:s + chunk, :], ctx, out=out[..., s:s + chunk, :])
    return out


def factorized_attention(q: Tensor, k: Tensor, v: Tensor, chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Factorized attention on ``[..., N, C]`` operands; never forms an N x N object.

    The key/value token count may differ from the query token count.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2] \
            or k.shape[:-2] != v.shape[:-2]:
        raise DimensionError(f"incompatible Q/K/V shapes {q.shape}, {k.shape}, {v.shape}")
    T._same_dtype(q, k, v)
    qd, kd, vd = q.data, k.data, v.data
    out = factorized_attention_kernel(qd, kd, vd, chunk=chunk)
    *lead, nq, c = q.shape
    nk, cv = vd.shape[-2:]
    batch = int(np.prod(lead, dtype=np.int64)) if lead else 1
    T._count("factor_att", 2 * batch * nk * c * cv + batch * nq * c * cv)
    scale = 1.0 / math.sqrt(c)

    def vjp(g):
        a = np.exp(kd - kd.max(axis=-2, keepdims=True))
        a /= a.sum(axis=-2, keepdims=True)
        ctx = np.matmul(np.swapaxes(a, -1, -2), vd)
        gq = np.matmul(g, np.swapaxes(ctx, -1, -2)) * scale
        gctx = np.matmul(np.swapaxes(qd, -1, -2), g) * scale
        gv = np.matmul(a, gctx)
        ga = np.matmul(vd, np.swapaxes(gctx, -1, -2))
        gk = a * (ga - (a * ga).sum(axis=-2, keepdims=True))
        return gq, gk, gv

    return T._wrap(out, "factor_att", (q, k, v), vjp)


# ---------------------------------------------------------------------------
# relative position encodings


def rel_factor_att_oracle(q, k, v, p) -> Tensor:
    """Factorized attention plus the explicit relative term ``E V``.

    Tokens are a 1-D sequence. ``p`` is ``[M, C]`` with row ``o + (M-1)/2``
    holding the encoding for offset ``o = j - i``. The ``N x N`` matrix ``E``
    is built per channel, so this is quadratic by construction.
    """
    q, k, v, p = (np.asarray(getattr(a, "data", a), dtype=np.float64) for a in (q, k, v, p))
    m = p.shape[0]
    if m % 2 == 0:
        raise ConfigError(f"window size must be odd, got {m}")
    n, c = q.shape
    return Tensor(factorized_attention(Tensor(q), Tensor(k), Tensor(v)).data + relative_term_oracle(q, v, p))


def relative_term_oracle(q: np.ndarray, v: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``(E V)_i`` per internal head with ``E_ij = 1{|j-i| <= r} q_i p_{j-i}``."""
    n, c = q.shape
    r = (p.shape[0] - 1) // 2
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    off = j - i
    mask = np.abs(off) <= r
    idx = np.clip(off + r, 0, p.shape[0] - 1)
    out = np.empty((n, c))
    for ch in range(c):
        e = np.where(mask, q[:, ch][:, None] * p[idx, ch], 0.0)
        out[:, ch] = e @ v[:, ch]
    return out


def crpe(q: Tensor, v: Tensor, kernels: Mapping[int, Tensor], cfg: ConvAttConfig, H: int, W: int) -> Tensor:
    """Convolutional relative position term for a CLS + ``H x W`` token sequence.

    Image rows get ``Q_img * DepthwiseConv2D(P, V_img)`` with the window size
    assigned to each head group; the CLS row is exactly zero.
    """
    n, c = q.shape
    if n != H * W + 1:
        raise DimensionError(f"CRPE expects N = H*W + 1 = {H * W + 1} tokens, got {n}")
    if v.shape[1] != c or v.shape[0] != n:
        raise DimensionError(f"Q {q.shape} and V {v.shape} disagree")
    q_img = T.reshape(q[1:], (H, W, c))
    v_img = T.reshape(v[1:], (H, W, c))
    parts = []
    for m, sl in cfg.window_slices():
        conv = T.depthwise_conv2d(v_img[:, :, sl], kernels[m])
        parts.append(T.mul(q_img[:, :, sl], conv))
    ev_img = parts[0] if len(parts) == 1 else T.concat(parts, axis=2)
    zero = T.zeros((1, c), q.dtype)
    return T.concat([zero, T.reshape(ev_img, (H * W, c))], axis=0)


def crpe_kernel(q_img: np.ndarray, v_img: np.ndarray, kernel: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Single-window numpy CRPE on ``[H, W, C]`` maps for benchmarking."""
    h, w, c = v_img.shape
    m = kernel.shape[0]
    r = (m - 1) // 2
    if out is None:
        out = T.audited_empty((h, w, c), v_img.dtype)
    padded = T.audited_empty((h + 2 * r, w + 2 * r, c), v_img.dtype)
    padded.fill(0)
    padded[r:r + h, r:r + w] = v_img
    tmp = T.audited_empty((h, w, c), v_img.dtype)
    out.fill(0)
    for dy in range(m):
        for dx in range(m):
            np.multiply(padded[dy:dy + h, dx:dx + w], kernel[dy, dx], out=tmp)
            out += tmp
    out *= q_img
    return out


def cpe(x: TokenSeq, kernel: Tensor) -> TokenSeq:
    """Add a depthwise-convolved copy of the image tokens; CLS passes through."""
    return x.with_img(T.add(x.img, T.depthwise_conv2d(x.img, kernel)))


# ---------------------------------------------------------------------------
# module


class PositionEncodings:
    """CPE kernel plus per-window CRPE kernels for one scale.

    One instance is shared by every conv-attentional module operating at that
    scale, in both serial and parallel blocks.
    """

    def __init__(self, cfg: ConvAttConfig, gen=None, dtype="f32"):
        self.cfg = cfg
        c = cfg.channels
        init = (lambda shape: T.trunc_normal(gen, shape, 0.02, dtype)) if gen is not None \
            else (lambda shape: T.zeros(shape, dtype))
        self.cpe_kernel = init((cfg.cpe_kernel, cfg.cpe_kernel, c))
        self.crpe_kernels = {m: init((m, m, sl.stop - sl.start)) for m, sl in cfg.window_slices()}

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}cpe.kernel", self.cpe_kernel
        for m, t in self.crpe_kernels.items():
            yield f"{prefix}crpe.w{m}", t


@dataclass
class Projected:
    base: TokenSeq  # post-CPE input, the residual branch
    q: Tensor
    k: Tensor
    v: Tensor


class ConvAttention:
    """CPE, pre-norm, multi-head factorized attention + CRPE, output projection, residual."""

    def __init__(self, cfg: ConvAttConfig, pos: PositionEncodings | None = None, gen=None, dtype="f32"):
        self.cfg = cfg
        c = cfg.channels
        self.pos = pos if pos is not None else PositionEncodings(cfg, gen, dtype)
        if self.pos.cfg != cfg:
            raise ConfigError("shared position encodings were built for a different config")
        self.norm_w = T.ones((c,), dtype)
        self.norm_b = T.zeros((c,), dtype)
        w = (lambda: T.trunc_normal(gen, (c, c), 0.02, dtype)) if gen is not None else (lambda: T.zeros((c, c), dtype))
        self.wq, self.wk, self.wv, self.wo = w(), w(), w(), w()
        self.bq, self.bk, self.bv, self.bo = (T.zeros((c,), dtype) for _ in range(4))
        self.use_cpe = True
        self.use_crpe = True

    def named_parameters(self, prefix: str = "", include_shared: bool = True):
        if include_shared:
            yield from self.pos.named_parameters(prefix)
        for name in ("norm_w", "norm_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            yield prefix + name, getattr(self, name)

    def project(self, x: TokenSeq) -> Projected:
        if x.C != self.cfg.channels:
            raise DimensionError(f"module built for C={self.cfg.channels}, got {x.C}")
        base = cpe(x, self.pos.cpe_kernel) if self.use_cpe else x
        h = T.layer_norm(base.tokens(), self.norm_w, self.norm_b)
        return Projected(base, T.linear(h, self.wq, self.bq), T.linear(h, self.wk, self.bk),
                         T.linear(h, self.wv, self.bv))

    def _split(self, t: Tensor) -> Tensor:
        n = t.shape[0]
        return T.transpose(T.reshape(t, (n, self.cfg.heads, self.cfg.head_dim)), (1, 0, 2))

    def _merge(self, t: Tensor) -> Tensor:
        n = t.shape[1]
        return T.reshape(T.transpose(t, (1, 0, 2)), (n, self.cfg.channels))

    def mix(self, q: Tensor, k: Tensor, v: Tensor, H: int, W: int) -> Tensor:
        """Per-head factorized attention plus CRPE, heads concatenated (before W^O).

        ``k`` and ``v`` may come from another token sequence; when ``v`` holds
        only the ``H x W`` image tokens, CRPE still pairs them with ``q``'s grid.
        """
        att = self._merge(factorized_attention(self._split(q), self._split(k), self._split(v)))
        if not self.use_crpe:
            return att
        has_cls = q.shape[0] == H * W + 1
        if not has_cls:
            q = T.concat([T.zeros((1, q.shape[1]), q.dtype), q], axis=0)
        if v.shape[0] == H * W:
            v = T.concat([T.zeros((1, v.shape[1]), v.dtype), v], axis=0)
        rel = crpe(q, v, self.pos.crpe_kernels, self.cfg, H, W)
        return T.add(att, rel if has_cls else rel[1:])

    def output(self, mixed: Tensor) -> Tensor:
        return T.linear(mixed, self.wo, self.bo)

    def delta(self, x: TokenSeq) -> tuple[TokenSeq, Tensor]:
        """Split form: (post-CPE residual base, attention branch output)."""
        p = self.project(x)
        return p.base, self.output(self.mix(p.q, p.k, p.v, x.H, x.W))

    def __call__(self, x: TokenSeq) -> TokenSeq:
        base, d = self.delta(x)
        return TokenSeq.from_tokens(T.add(base.tokens(), d), x.H, x.W, x.cls is not None)


def conv_attention_module(x: TokenSeq, module: ConvAttention) -> TokenSeq:
    return module(x)
