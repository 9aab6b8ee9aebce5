"""Tape-based reverse-mode differentiation and a finite-difference checker.

Usage::

    with Graph() as g:
        x = g.leaf(x, "x")
        loss = tensor.reduce_sum(f(x))
    grads = g.backward(loss)          # {"x": ndarray}

Leaves are the caller's own :class:`~coat.tensor.Tensor` objects, marked in
place for the lifetime of the graph, so parameters held by modules are
tracked without copying them.
"""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from coat.errors import ContractError, NumericError

_local = threading.local()


@dataclass
class Node:
    op: str
    inputs: tuple[int | None, ...]
    vjp: Callable | None  # None for leaves
    name: str | None = None


class Graph:
    """Append-only tape. Inputs of every node precede it, so the tape is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, object] = {}
        self._prev = None

    def __enter__(self) -> Graph:
        self._prev = getattr(_local, "graph", None)
        _local.graph = self
        return self

    def __exit__(self, *exc):
        _local.graph = self._prev
        return False

    def release(self) -> None:
        """Unmark leaves so the tensors can join another graph."""
        for t in self._leaves.values():
            if t._graph is self:
                t._node = None
                t._graph = None

    def leaf(self, t, name: str | None = None):
        if t._graph is not None and t._graph is not self:
            raise ContractError("tensor is already tracked by another graph; call release() first")
        if t._graph is self:
            return t
        idx = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, name if name is not None else f"leaf{idx}"))
        t._node = idx
        t._graph = self
        self._leaves[idx] = t
        return t

    def _add(self, op: str, inputs: Sequence, vjp) -> int:
        ids = tuple(t._node if t._graph is self else None for t in inputs)
        self.nodes.append(Node(op, ids, vjp))
        return len(self.nodes) - 1

    def backward(self, output) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``output`` w.r.t. every leaf, keyed by leaf name."""
        if output.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {}
        if output._graph is self:
            grads[output._node] = np.ones(output.shape, dtype=output.dtype)
            for idx in range(output._node, -1, -1):
                node = self.nodes[idx]
                g = grads.get(idx)
                if g is None or node.vjp is None:
                    continue
                if node.op != "leaf":
                    del grads[idx]
                for src, gi in zip(node.inputs, node.vjp(g)):
                    if src is None or gi is None:
                        continue
                    if src in grads:
                        grads[src] = grads[src] + gi
                    else:
                        grads[src] = np.asarray(gi)
        out = {}
        for idx, t in self._leaves.items():
            g = grads.get(idx)
            out[self.nodes[idx].name] = g.astype(t.dtype) if g is not None else np.zeros(t.shape, dtype=t.dtype)
        return out


def record(out, op: str, inputs: Sequence, vjp) -> None:
    graph = getattr(_local, "graph", None)
    if graph is None:
        return
    if any(t._graph is graph for t in inputs):
        out._node = graph._add(op, inputs, vjp)
        out._graph = graph


def grad(f: Callable, params: dict) -> tuple[float, dict[str, np.ndarray]]:
    """Value and gradient of scalar ``f()`` w.r.t. the named tensors in ``params``."""
    with Graph() as g:
        for name, t in params.items():
            g.leaf(t, name)
        try:
            y = f()
            grads = g.backward(y)
        finally:
            g.release()
    return float(y.data.reshape(-1)[0]), grads


@dataclass
class GradReport:
    name: str
    max_abs: float
    max_rel: float
    probes: int
    worst_index: int = -1
    details: list = field(default_factory=list, repr=False)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel < tol

    def csv_row(self) -> str:
        return f"{self.name},{self.max_abs:.6e},{self.max_rel:.6e}"


def reports_to_csv(reports: Sequence[GradReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["param", "max_abs", "max_rel"])
    for r in reports:
        w.writerow([r.name, f"{r.max_abs:.6e}", f"{r.max_rel:.6e}"])
    return buf.getvalue()


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_diff_check(f: Callable, x, h: float = 1e-5, probes: int = 64, seed: int = 0,
                      name: str = "x", analytic: np.ndarray | None = None) -> GradReport:
    """Compare the tape gradient of scalar ``f(x)`` to central differences.

    ``x`` is a Tensor whose data is perturbed in place and restored. When
    ``x`` has at most ``probes`` elements every coordinate is checked,
    otherwise a seeded random subset is.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    if analytic is None:
        _, gs = grad(lambda: f(x), {name: x})
        analytic = gs[name]
    flat = x.data.reshape(-1)
    ga = np.asarray(analytic).reshape(-1)
    n = flat.size
    if n <= probes:
        idx = np.arange(n)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=probes, replace=False))
    num = np.empty(idx.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data.reshape(-1)[0])
        flat[i] = orig - h
        fm = float(f(x).data.reshape(-1)[0])
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value probing coordinate {int(i)}")
        num[j] = (fp - fm) / (2 * h)
    a = ga[idx].astype(np.float64)
    abs_err = np.abs(a - num)
    rel = relative_error(a, num)
    worst = int(idx[np.argmax(rel)]) if idx.size else -1
    return GradReport(name, float(abs_err.max(initial=0.0)), float(rel.max(initial=0.0)),
                      int(idx.size), worst, list(zip(idx.tolist(), a.tolist(), num.tolist())))
