"""Serial blocks and the two parallel-group co-scale strategies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from coat import tensor as T
from coat.attention import ConvAttConfig, ConvAttention, PositionEncodings, TokenSeq
from coat.errors import ConfigError, DimensionError
from coat.tensor import Tensor

STRATEGIES = ("interp", "cross_attn")


class FFN:
    """Pre-norm MLP with residual: norm -> C->RC -> GELU -> RC->C."""

    def __init__(self, channels: int, ratio: int, gen=None, dtype="f32"):
        hidden = channels * ratio
        if hidden != int(hidden) or hidden < 1:
            raise ConfigError(f"hidden width {hidden} must be a positive integer")
        self.channels, self.hidden = channels, int(hidden)
        self.norm_w = T.ones((channels,), dtype)
        self.norm_b = T.zeros((channels,), dtype)
        init = (lambda s: T.trunc_normal(gen, s, 0.02, dtype)) if gen is not None else (lambda s: T.zeros(s, dtype))
        self.w1 = init((channels, self.hidden))
        self.b1 = T.zeros((self.hidden,), dtype)
        self.w2 = init((self.hidden, channels))
        self.b2 = T.zeros((channels,), dtype)

    def named_parameters(self, prefix: str = ""):
        for name in ("norm_w", "norm_b", "w1", "b1", "w2", "b2"):
            yield prefix + name, getattr(self, name)

    def delta(self, tokens: Tensor) -> Tensor:
        h = T.layer_norm(tokens, self.norm_w, self.norm_b)
        return T.linear(T.gelu(T.linear(h, self.w1, self.b1)), self.w2, self.b2)

    def __call__(self, x: TokenSeq) -> TokenSeq:
        t = x.tokens()
        return TokenSeq.from_tokens(T.add(t, self.delta(t)), x.H, x.W, x.cls is not None)


def ffn(x: TokenSeq, module: FFN) -> TokenSeq:
    return module(x)


# ---------------------------------------------------------------------------
# serial block


@dataclass(frozen=True)
class SerialBlockConfig:
    in_channels: int
    channels: int
    depth: int
    heads: int
    ffn_ratio: int
    downsample: int

    def __post_init__(self):
        if self.downsample not in (2, 4):
            raise ConfigError(f"downsample must be 2 or 4, got {self.downsample}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")

    @property
    def att(self) -> ConvAttConfig:
        return ConvAttConfig(self.channels, self.heads)


class SerialBlock:
    """Patch embedding, CLS insertion, ``depth`` x (conv-attention, FFN), CLS split."""

    def __init__(self, cfg: SerialBlockConfig, gen=None, dtype="f32"):
        self.cfg = cfg
        c, s = cfg.channels, cfg.downsample
        init = (lambda shape: T.trunc_normal(gen, shape, 0.02, dtype)) if gen is not None \
            else (lambda shape: T.zeros(shape, dtype))
        self.embed_w = init((s, s, cfg.in_channels, c))
        self.embed_b = T.zeros((c,), dtype)
        self.embed_norm_w = T.ones((c,), dtype)
        self.embed_norm_b = T.zeros((c,), dtype)
        self.cls = init((c,))
        self.pos = PositionEncodings(cfg.att, gen, dtype)
        self.layers = [(ConvAttention(cfg.att, self.pos, gen, dtype), FFN(c, cfg.ffn_ratio, gen, dtype))
                       for _ in range(cfg.depth)]

    def named_parameters(self, prefix: str = ""):
        for name in ("embed_w", "embed_b", "embed_norm_w", "embed_norm_b", "cls"):
            yield prefix + name, getattr(self, name)
        yield from self.pos.named_parameters(prefix)
        for i, (att, mlp) in enumerate(self.layers):
            yield from att.named_parameters(f"{prefix}layer{i}.att.", include_shared=False)
            yield from mlp.named_parameters(f"{prefix}layer{i}.ffn.")

    def patch_embed(self, x: Tensor) -> TokenSeq:
        img = T.patchify_conv(x, self.embed_w, self.embed_b, self.cfg.downsample)
        img = T.layer_norm(img, self.embed_norm_w, self.embed_norm_b)
        return TokenSeq(self.cls, img)

    def tokens(self, x: Tensor) -> TokenSeq:
        """Run everything except the final CLS split."""
        seq = self.patch_embed(x)
        for att, mlp in self.layers:
            seq = mlp(att(seq))
        return seq

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        seq = self.tokens(x)
        return seq.img, seq.cls


def patch_embed(x: Tensor, block: SerialBlock) -> TokenSeq:
    return block.patch_embed(x)


def serial_block(x: Tensor, block: SerialBlock) -> tuple[Tensor, Tensor]:
    return block(x)


# ---------------------------------------------------------------------------
# parallel group


@dataclass(frozen=True)
class ParallelGroupConfig:
    channels: int
    heads: int
    ffn_ratio: int
    repeat: int
    strategy: str = "interp"
    scales: int = 3

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.repeat < 0:
            raise ConfigError("repeat must be >= 0")

    @property
    def att(self) -> ConvAttConfig:
        return ConvAttConfig(self.channels, self.heads)


def check_resolutions(inputs: Sequence[TokenSeq]) -> None:
    for a, b in zip(inputs, inputs[1:]):
        if (a.H, a.W) != (2 * b.H, 2 * b.W):
            raise DimensionError(f"scale grids must halve: {a.H}x{a.W} then {b.H}x{b.W}")


def _resize_tokens(img_tokens: Tensor, src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> Tensor:
    c = img_tokens.shape[-1]
    grid = T.reshape(img_tokens, (*src_hw, c))
    return T.reshape(T.bilinear_resize(grid, *dst_hw), (dst_hw[0] * dst_hw[1], c))


def resize_sum(maps: Sequence[TokenSeq], target: tuple[int, int]) -> TokenSeq:
    """Resize every map's image tokens to ``target`` and sum in list order.

    CLS vectors (no spatial extent) are summed without resizing.
    """
    img = None
    cls = None
    for m in maps:
        r = T.bilinear_resize(m.img, *target)
        img = r if img is None else T.add(img, r)
        if m.cls is not None:
            cls = m.cls if cls is None else T.add(cls, m.cls)
    return TokenSeq(cls, img)


class ParallelStep:
    """One co-scale step: per-scale conv-attention, exchange across scales, shared FFN."""

    def __init__(self, cfg: ParallelGroupConfig, pos: Sequence[PositionEncodings], gen=None, dtype="f32"):
        self.cfg = cfg
        self.atts = [ConvAttention(cfg.att, p, gen, dtype) for p in pos]
        self.ffn = FFN(cfg.channels, cfg.ffn_ratio, gen, dtype)

    def named_parameters(self, prefix: str = ""):
        for i, att in enumerate(self.atts):
            yield from att.named_parameters(f"{prefix}att{i}.", include_shared=False)
        yield from self.ffn.named_parameters(prefix + "ffn.")

    def interp(self, xs: Sequence[TokenSeq]) -> list[TokenSeq]:
        bases, deltas = [], []
        for att, x in zip(self.atts, xs):
            base, d = att.delta(x)
            bases.append(base)
            deltas.append(TokenSeq.from_tokens(d, x.H, x.W, x.cls is not None))
        out = []
        for base in bases:
            mixed = resize_sum(deltas, (base.H, base.W))
            t = T.add(base.tokens(), mixed.tokens())
            out.append(self.ffn(TokenSeq.from_tokens(t, base.H, base.W, base.cls is not None)))
        return out

    def cross_attn(self, xs: Sequence[TokenSeq]) -> list[TokenSeq]:
        proj = [att.project(x) for att, x in zip(self.atts, xs)]
        out = []
        for i, (att, x, p) in enumerate(zip(self.atts, xs, proj)):
            mixed = att.mix(p.q, p.k, p.v, x.H, x.W)
            for j, (xj, pj) in enumerate(zip(xs, proj)):
                if j == i:
                    continue
                off = int(xj.cls is not None)
                k = _resize_tokens(pj.k[off:], (xj.H, xj.W), (x.H, x.W))
                v = _resize_tokens(pj.v[off:], (xj.H, xj.W), (x.H, x.W))
                mixed = T.add(mixed, att.mix(p.q, k, v, x.H, x.W))
            t = T.add(p.base.tokens(), att.output(mixed))
            out.append(self.ffn(TokenSeq.from_tokens(t, x.H, x.W, x.cls is not None)))
        return out

    def __call__(self, xs: Sequence[TokenSeq], strategy: str | None = None) -> list[TokenSeq]:
        strategy = strategy or self.cfg.strategy
        return self.interp(xs) if strategy == "interp" else self.cross_attn(xs)


class ParallelGroup:
    def __init__(self, cfg: ParallelGroupConfig, pos: Sequence[PositionEncodings], gen=None, dtype="f32"):
        if len(pos) != cfg.scales:
            raise ConfigError(f"need {cfg.scales} position-encoding sets, got {len(pos)}")
        for p in pos:
            if p.cfg != cfg.att:
                raise ConfigError(f"scale channels {p.cfg.channels} differ from group channels {cfg.channels}")
        self.cfg = cfg
        self.strategy = cfg.strategy
        self.steps = [ParallelStep(cfg, pos, gen, dtype) for _ in range(cfg.repeat)]

    def named_parameters(self, prefix: str = ""):
        for i, step in enumerate(self.steps):
            yield from step.named_parameters(f"{prefix}step{i}.")

    def __call__(self, xs: Sequence[TokenSeq], check: bool = True) -> list[TokenSeq]:
        xs = list(xs)
        if len(xs) != self.cfg.scales:
            raise DimensionError(f"expected {self.cfg.scales} scales, got {len(xs)}")
        for x in xs:
            if x.C != self.cfg.channels:
                raise ConfigError(f"scale channels {x.C} differ from group channels {self.cfg.channels}")
        if check:
            check_resolutions(xs)
        for step in self.steps:
            xs = step(xs, self.strategy)
        return xs


def parallel_group_interp(inputs: Sequence[TokenSeq], group: ParallelGroup) -> list[TokenSeq]:
    if group.strategy != "interp":
        raise ConfigError("group was configured for cross_attn")
    return group(inputs)


def parallel_group_cross_attn(inputs: Sequence[TokenSeq], group: ParallelGroup) -> list[TokenSeq]:
    if group.strategy != "cross_attn":
        raise ConfigError("group was configured for interp")
    return group(inputs)
