"""Empirical scaling of the attention kernels in sequence length N.

Times are medians of ``repeats`` runs after discarded warm-up runs; peak
bytes come from a separate audited run and count only transient buffers
(inputs and the output buffer are allocated outside the audit).
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import psutil
from threadpoolctl import threadpool_info, threadpool_limits

from coat import tensor as T
from coat.attention import crpe_kernel, factorized_attention_kernel, sdpa_kernel
from coat.errors import ContractError

OPS = ("full_att", "factor_att", "crpe")
CSV_HEADER = ("op", "N", "C", "M", "wall_ns", "peak_bytes")


@dataclass
class ScalingRecord:
    op: str
    N: int
    C: int
    M: int
    wall_ns: int | None
    peak_bytes: int | None
    truncated: bool = False

    def row(self) -> list:
        return [self.op, self.N, self.C, self.M,
                "" if self.wall_ns is None else self.wall_ns,
                "" if self.peak_bytes is None else self.peak_bytes]


def grid_for(n: int) -> tuple[int, int]:
    """Most square ``H x W`` grid with ``H * W == n``."""
    h = int(math.isqrt(n))
    while n % h:
        h -= 1
    return h, n // h


class _Case:
    def __init__(self, op: str, n: int, c: int, m: int, seed: int, dtype):
        gen = T.rng(seed)
        draw = lambda *shape: gen.uniform(-1.0, 1.0, shape).astype(dtype)  # noqa: E731
        self.op = op
        if op == "crpe":
            h, w = grid_for(n)
            self.args = (draw(h, w, c), draw(h, w, c), draw(m, m, c))
            self.out = np.empty((h, w, c), dtype=dtype)
            self.fn = crpe_kernel
        else:
            self.args = (draw(n, c), draw(n, c), draw(n, c))
            self.out = np.empty((n, c), dtype=dtype)
            self.fn = sdpa_kernel if op == "full_att" else factorized_attention_kernel

    def __call__(self):
        return self.fn(*self.args, out=self.out)


def _check_single_threaded() -> None:
    busy = [p for p in threadpool_info() if p.get("num_threads", 1) != 1]
    if busy:
        raise RuntimeError(f"benchmarks need single-threaded kernels; still parallel: "
                           f"{[p.get('internal_api') for p in busy]}")


def _fits_in_memory(op: str, n: int, dtype) -> bool:
    if op != "full_att":
        return True
    need = n * n * np.dtype(dtype).itemsize
    return need < 0.6 * psutil.virtual_memory().available


def measure_one(op: str, n: int, c: int, m: int = 3, repeats: int = 9, warmup: int = 2,
                seed: int = 0, dtype=np.float32) -> ScalingRecord:
    if op not in OPS:
        raise ContractError(f"unknown op {op!r}; expected one of {OPS}")
    if repeats < 5:
        raise ContractError("need at least 5 timed repeats")
    if not _fits_in_memory(op, n, dtype):
        return ScalingRecord(op, n, c, m, None, None, truncated=True)
    try:
        case = _Case(op, n, c, m, seed, dtype)
        with T.AllocationAudit() as audit:
            case()
        peak = audit.peak
        for _ in range(warmup):
            case()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            case()
            times.append(time.perf_counter_ns() - t0)
    except MemoryError:
        return ScalingRecord(op, n, c, m, None, None, truncated=True)
    return ScalingRecord(op, n, c, m, max(1, int(statistics.median(times))), peak)


def measure_scaling(op: str, Ns: Sequence[int], C: int = 64, M: int = 3, repeats: int = 9,
                    warmup: int = 2, seed: int = 0, dtype=np.float32,
                    require_range: bool = True) -> list[ScalingRecord]:
    """One :class:`ScalingRecord` per N, measured single-threaded."""
    Ns = list(Ns)
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ContractError("Ns must be strictly ascending")
    if require_range and (len(Ns) < 4 or Ns[-1] < 16 * Ns[0]):
        raise ContractError("need at least 4 sizes spanning a 16x range")
    with threadpool_limits(limits=1):
        _check_single_threaded()
        return [measure_one(op, n, C, M, repeats, warmup, seed, dtype) for n in Ns]


def fit_loglog_slope(records: Iterable[ScalingRecord], metric: str = "wall_ns") -> float:
    """Least-squares slope of ``log(metric)`` against ``log(N)``."""
    recs = [r for r in records if not r.truncated]
    if len(recs) < 4:
        raise ContractError(f"need at least 4 usable records, got {len(recs)}")
    keys = {(r.op, r.C, r.M) for r in recs}
    if len(keys) != 1:
        raise ContractError(f"records mix configurations: {sorted(keys)}")
    x = np.log([r.N for r in recs])
    y = np.log([float(getattr(r, metric)) for r in recs])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def growth_ratios(records: Sequence[ScalingRecord], metric: str = "peak_bytes") -> list[float]:
    recs = [r for r in records if not r.truncated]
    return [getattr(b, metric) / getattr(a, metric) for a, b in zip(recs, recs[1:])]


def write_csv(records: Iterable[ScalingRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())


def read_csv(path: str | Path) -> list[ScalingRecord]:
    with open(path, newline="") as fp:
        rows = list(csv.DictReader(fp))
    out = []
    for row in rows:
        wall = int(row["wall_ns"]) if row["wall_ns"] else None
        peak = int(row["peak_bytes"]) if row["peak_bytes"] else None
        out.append(ScalingRecord(row["op"], int(row["N"]), int(row["C"]), int(row["M"]),
                                 wall, peak, truncated=wall is None))
    return out


def doubling_sizes(start: int = 256, stop: int = 16384) -> list[int]:
    out = [start]
    while out[-1] * 2 <= stop:
        out.append(out[-1] * 2)
    return out
