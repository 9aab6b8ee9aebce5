"""CoaT-Lite and CoaT assembly, parameter/FLOP accounting, and parameter I/O."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from coat import tensor as T
from coat.attention import TokenSeq
from coat.blocks import ParallelGroup, ParallelGroupConfig, SerialBlock, SerialBlockConfig
from coat.errors import ConfigError, DimensionError
from coat.tensor import Tensor

HEADS = 8
CLASSIFIER_MODES = ("last_cls", "aggregate3_cls", "concat3_cls")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    serial: tuple[SerialBlockConfig, ...]
    parallel: ParallelGroupConfig | None = None
    classifier: str = "last_cls"
    num_classes: int = 1000
    target_params: float | None = None
    target_gflops: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.serial) != 4:
            raise ConfigError("a model has exactly four serial blocks")
        prev = 3
        for i, s in enumerate(self.serial):
            if s.in_channels != prev:
                raise ConfigError(f"serial block {i + 1} expects {s.in_channels} input channels, gets {prev}")
            prev = s.channels
        if self.classifier not in CLASSIFIER_MODES:
            raise ConfigError(f"classifier must be one of {CLASSIFIER_MODES}")
        if self.parallel is not None:
            shared = {s.channels for s in self.serial[1:]}
            if shared != {self.parallel.channels}:
                raise ConfigError("CoaT needs equal channels in serial blocks 2-4 and the parallel group")
        elif self.classifier != "last_cls":
            raise ConfigError(f"{self.classifier} needs a parallel group")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(s.channels for s in self.serial)

    @property
    def depths(self) -> tuple[int, ...]:
        return tuple(s.depth for s in self.serial)

    @property
    def ffn_ratios(self) -> tuple[int, ...]:
        return tuple(s.ffn_ratio for s in self.serial)


def _serial(channels, depths, ratios, heads=HEADS):
    cins = (3,) + tuple(channels[:-1])
    return tuple(SerialBlockConfig(ci, c, d, heads, r, 4 if i == 0 else 2)
                 for i, (ci, c, d, r) in enumerate(zip(cins, channels, depths, ratios)))


def _lite(name, channels, depths, ratios, params, gflops):
    return ModelSpec(name, _serial(channels, depths, ratios), target_params=params, target_gflops=gflops)


def _coat(name, channels, params, gflops, repeat=6):
    return ModelSpec(name, _serial(channels, (2, 2, 2, 2), (4, 4, 4, 4)),
                     ParallelGroupConfig(channels[-1], HEADS, 4, repeat),
                     classifier="aggregate3_cls", target_params=params, target_gflops=gflops)


MODELS: dict[str, ModelSpec] = {s.name: s for s in (
    _lite("coat_lite_tiny", (64, 128, 256, 320), (2, 2, 2, 2), (8, 8, 4, 4), 5.7e6, {224: 1.6}),
    _lite("coat_lite_mini", (64, 128, 320, 512), (2, 2, 2, 2), (8, 8, 4, 4), 11e6, {224: 2.0}),
    _lite("coat_lite_small", (64, 128, 320, 512), (3, 4, 6, 3), (8, 8, 4, 4), 20e6, {224: 4.0}),
    _lite("coat_lite_medium", (128, 256, 320, 512), (3, 6, 10, 8), (4, 4, 4, 4), 45e6, {224: 9.8, 384: 28.7}),
    _coat("coat_tiny", (152, 152, 152, 152), 5.5e6, {224: 4.4}),
    _coat("coat_mini", (152, 216, 216, 216), 10e6, {224: 6.8}),
    _coat("coat_small", (152, 320, 320, 320), 22e6, {224: 12.6}),
)}


def get_spec(name: str) -> ModelSpec:
    try:
        return MODELS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; valid names: {', '.join(MODELS)}") from None


class CoaT:
    """A built model: serial blocks, optional parallel group, classifier head."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype="f32"):
        self.spec = spec
        self.seed = seed
        self.dtype = T.resolve_dtype(dtype)
        gen = T.rng(seed)
        self.serial = [SerialBlock(cfg, gen, dtype) for cfg in spec.serial]
        self.parallel = None
        if spec.parallel is not None:
            self.parallel = ParallelGroup(spec.parallel, [b.pos for b in self.serial[1:]], gen, dtype)
        c = spec.serial[-1].channels
        n_cls = 1 if spec.classifier == "last_cls" else 3
        self.norms = [(T.ones((c,), dtype), T.zeros((c,), dtype)) for _ in range(n_cls)]
        if spec.classifier == "aggregate3_cls":
            self.agg_w = T.Tensor(np.full((1, 3), 1.0 / 3), dtype)
            self.agg_b = T.zeros((1,), dtype)
        head_in = 3 * c if spec.classifier == "concat3_cls" else c
        self.head_w = T.trunc_normal(gen, (head_in, spec.num_classes), 0.02, dtype)
        self.head_b = T.zeros((spec.num_classes,), dtype)

    # -- parameters -------------------------------------------------------

    def named_parameters(self):
        """Unique (name, tensor) pairs; shared tensors appear once."""
        seen: set[int] = set()
        for name, t in self._all_parameters():
            if id(t) not in seen:
                seen.add(id(t))
                yield name, t

    def _all_parameters(self):
        for i, b in enumerate(self.serial):
            yield from b.named_parameters(f"s{i + 1}.")
        if self.parallel is not None:
            yield from self.parallel.named_parameters("parallel.")
        for i, (w, b) in enumerate(self.norms):
            yield f"head.norm{i}.w", w
            yield f"head.norm{i}.b", b
        if self.spec.classifier == "aggregate3_cls":
            yield "head.agg_w", self.agg_w
            yield "head.agg_b", self.agg_b
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def with_strategy(self, strategy: str) -> CoaT:
        """Same parameters, different co-scale strategy (parallel group only)."""
        if self.parallel is None:
            raise ConfigError("model has no parallel group")
        clone = object.__new__(CoaT)
        clone.__dict__.update(self.__dict__)
        clone.spec = replace(self.spec, parallel=replace(self.spec.parallel, strategy=strategy))
        group = object.__new__(ParallelGroup)
        group.__dict__.update(self.parallel.__dict__)
        group.cfg = clone.spec.parallel
        group.strategy = strategy
        clone.parallel = group
        return clone

    # -- forward ----------------------------------------------------------

    def features(self, image: Tensor) -> dict:
        """Serial maps F1..F4, their CLS tokens, and the post-parallel sequences."""
        image = T.as_tensor(image, self.dtype)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DimensionError(f"image must be [H, W, 3], got {image.shape}")
        h, w, _ = image.shape
        if h % 32 or w % 32:
            raise DimensionError(f"input {h}x{w} must be divisible by 32")
        maps, cls = [], []
        x = image
        for block in self.serial:
            x, c = block(x)
            maps.append(x)
            cls.append(c)
        out = {"maps": maps, "cls": cls}
        if self.parallel is not None:
            seqs = [TokenSeq(c, f) for f, c in zip(maps[1:], cls[1:])]
            out["parallel"] = self.parallel(seqs)
        return out

    def pooled(self, image: Tensor) -> Tensor:
        """Classifier input vector (after the final norm(s) and CLS aggregation)."""
        feats = self.features(image)
        if self.spec.classifier == "last_cls":
            w, b = self.norms[0]
            return T.layer_norm(feats["cls"][-1], w, b)
        normed = [T.layer_norm(s.cls, w, b) for s, (w, b) in zip(feats["parallel"], self.norms)]
        if self.spec.classifier == "concat3_cls":
            return T.concat(normed, axis=0)
        stacked = T.stack_leading(normed)
        return T.add(T.reshape(T.matmul(self.agg_w, stacked), (stacked.shape[1],)), self.agg_b)

    def forward(self, image: Tensor) -> Tensor:
        z = self.pooled(image)
        c = z.shape[0]
        return T.reshape(T.linear(T.reshape(z, (1, c)), self.head_w, self.head_b), (self.spec.num_classes,))

    __call__ = forward


def build_model(name: str, seed: int = 0, dtype="f32") -> CoaT:
    return CoaT(get_spec(name), seed=seed, dtype=dtype)


def forward(model: CoaT, image) -> Tensor:
    return model.forward(image)


def count_params(model: CoaT | ModelSpec) -> int:
    if isinstance(model, ModelSpec):
        model = CoaT(model, dtype="f32")
    return int(sum(t.size for _, t in model.named_parameters()))


def params_by_block(model: CoaT) -> dict[str, int]:
    out: dict[str, int] = {}
    for name, t in model.named_parameters():
        key = name.split(".", 1)[0]
        out[key] = out.get(key, 0) + t.size
    return out


# ---------------------------------------------------------------------------
# analytic FLOP accounting (one multiply-accumulate = one FLOP)


def _att_flops(cfg, hw: int, has_cls: bool = True) -> int:
    n = hw + has_cls
    c, d = cfg.channels, cfg.head_dim
    k = cfg.cpe_kernel
    flops = hw * c * k * k            # CPE
    flops += 4 * n * c * c            # Q, K, V, O projections
    flops += _mix_flops(cfg, n, n, hw)
    return flops


def _mix_flops(cfg, nq: int, nk: int, hw: int) -> int:
    c, d = cfg.channels, cfg.head_dim
    flops = 2 * nk * c * d + nq * c * d   # softmax(K)^T V and Q L per head
    for m, sl in cfg.window_slices():
        flops += hw * (sl.stop - sl.start) * m * m
    return flops


def _ffn_flops(c: int, ratio: int, n: int) -> int:
    return 2 * n * c * c * ratio


def flops_breakdown(spec: ModelSpec, height: int, width: int) -> dict[str, int]:
    if height % 32 or width % 32:
        raise DimensionError(f"input {height}x{width} must be divisible by 32")
    out: dict[str, int] = {}
    h, w = height, width
    grids = []
    for i, s in enumerate(spec.serial):
        h, w = h // s.downsample, w // s.downsample
        hw = h * w
        grids.append((h, w))
        total = hw * s.downsample ** 2 * s.in_channels * s.channels
        total += s.depth * (_att_flops(s.att, hw) + _ffn_flops(s.channels, s.ffn_ratio, hw + 1))
        out[f"s{i + 1}"] = total
    if spec.parallel is not None:
        p = spec.parallel
        scales = grids[1:]
        per_step = 0
        for hi, wi in scales:
            hw = hi * wi
            per_step += _att_flops(p.att, hw) + _ffn_flops(p.channels, p.ffn_ratio, hw + 1)
            for hj, wj in scales:
                if (hj, wj) == (hi, wi):
                    continue
                if p.strategy == "interp":
                    per_step += 4 * hw * p.channels
                else:
                    per_step += 2 * 4 * hw * p.channels + _mix_flops(p.att, hw + 1, hw, hw)
        out["parallel"] = p.repeat * per_step
    c = spec.serial[-1].channels
    head = 0
    if spec.classifier == "aggregate3_cls":
        head += 3 * c
    head += (3 * c if spec.classifier == "concat3_cls" else c) * spec.num_classes
    out["head"] = head
    return out


def count_flops(model: CoaT | ModelSpec, height: int = 224, width: int | None = None) -> int:
    spec = model.spec if isinstance(model, CoaT) else model
    return int(sum(flops_breakdown(spec, height, width or height).values()))


def serial_resolutions(spec: ModelSpec, size: int = 224) -> list[int]:
    out = []
    for s in spec.serial:
        size //= s.downsample
        out.append(size)
    return out


# ---------------------------------------------------------------------------
# parameter dump/load: <path>.bin holds concatenated tensor containers,
# <path>.manifest one "name shape" line per parameter in the same order


def dump_params(model: CoaT, path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    bin_path, manifest = path.with_suffix(".bin"), path.with_suffix(".manifest")
    with open(bin_path, "wb") as fp, open(manifest, "w") as mf:
        for name, t in model.named_parameters():
            T.write_tensor(fp, t)
            mf.write(f"{name} {'x'.join(map(str, t.shape))}\n")
    return bin_path, manifest


def load_params(model: CoaT, path: str | Path) -> None:
    path = Path(path)
    params = model.parameters()
    with open(path.with_suffix(".manifest")) as mf:
        entries = [line.split() for line in mf if line.strip()]
    with open(path.with_suffix(".bin"), "rb") as fp:
        for name, shape in entries:
            t = T.read_tensor(fp)
            expect = tuple(int(s) for s in shape.split("x"))
            if name not in params:
                raise ConfigError(f"manifest names unknown parameter {name!r}")
            if t.shape != expect or t.shape != params[name].shape:
                raise DimensionError(f"{name}: stored shape {t.shape}, manifest {expect}, model {params[name].shape}")
            params[name].data[...] = t.data.astype(params[name].dtype)


def logits_checksum(logits: Tensor) -> str:
    """Stable 64-bit BLAKE2b digest of the little-endian float32 logits."""
    raw = np.ascontiguousarray(logits.data, dtype="<f4").tobytes()
    return hashlib.blake2b(raw, digest_size=8).hexdigest()
