"""DAG container, layer decomposition, ordering checks and SHD."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class CycleError(ValueError):
    """Raised when an edge set contains a directed cycle."""


@dataclass(frozen=True)
class Dag:
    """Directed acyclic graph over nodes ``0..d-1``.

    Edges are ``(parent, child)`` pairs. Acyclicity is checked on
    construction, so every ``Dag`` instance is a valid DAG.
    """

    d: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if int(self.d) < 1:
            raise ValueError(f"node count must be positive, got {self.d}")
        object.__setattr__(self, "d", int(self.d))
        edges = frozenset((int(i), int(j)) for i, j in self.edges)
        for i, j in edges:
            if not (0 <= i < self.d and 0 <= j < self.d):
                raise ValueError(f"edge ({i}, {j}) out of range for d={self.d}")
            if i == j:
                raise CycleError(f"self-loop on node {i}")
        object.__setattr__(self, "edges", edges)
        # raises on cycles
        object.__setattr__(self, "_topo", tuple(_kahn(self.d, edges)))

    @classmethod
    def from_adjacency(cls, adj) -> "Dag":
        adj = np.asarray(adj)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError("adjacency matrix must be square")
        rows, cols = np.nonzero(adj)
        return cls(adj.shape[0], frozenset(zip(rows.tolist(), cols.tolist())))

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.d, self.d), dtype=int)
        for i, j in self.edges:
            a[i, j] = 1
        return a

    def parents(self, j: int) -> tuple[int, ...]:
        return tuple(sorted(i for i, c in self.edges if c == j))

    def children(self, i: int) -> tuple[int, ...]:
        return tuple(sorted(c for p, c in self.edges if p == i))

    def topological_order(self) -> tuple[int, ...]:
        """Kahn order with ties broken by ascending index."""
        return self._topo

    def ancestors(self, j: int) -> frozenset:
        seen: set[int] = set()
        stack = list(self.parents(j))
        while stack:
            k = stack.pop()
            if k not in seen:
                seen.add(k)
                stack.extend(self.parents(k))
        return frozenset(seen)

    def is_ancestral(self, nodes: Iterable[int]) -> bool:
        nodes = set(nodes)
        return all(i in nodes for i, j in self.edges if j in nodes)

    def relabel(self, perm: Sequence[int]) -> "Dag":
        """Return the graph with node ``i`` renamed ``perm[i]``."""
        return Dag(self.d, frozenset((perm[i], perm[j]) for i, j in self.edges))

    def __repr__(self):
        return f"Dag(d={self.d}, edges={sorted(self.edges)})"


def _kahn(d: int, edges) -> list[int]:
    indeg = [0] * d
    kids: list[list[int]] = [[] for _ in range(d)]
    for i, j in edges:
        indeg[j] += 1
        kids[i].append(j)
    ready = sorted(v for v in range(d) if indeg[v] == 0)
    out = []
    while ready:
        v = ready.pop(0)
        out.append(v)
        for c in kids[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort()
    if len(out) != d:
        raise CycleError("edge set contains a directed cycle")
    return out


@dataclass(frozen=True)
class LayerDecomposition:
    layers: tuple

    def __post_init__(self):
        layers = tuple(frozenset(int(v) for v in layer) for layer in self.layers)
        if not layers or any(len(layer) == 0 for layer in layers):
            raise ValueError("layers must be a non-empty sequence of non-empty sets")
        seen: set[int] = set()
        for layer in layers:
            if seen & layer:
                raise ValueError("layers must be pairwise disjoint")
            seen |= layer
        object.__setattr__(self, "layers", layers)

    @property
    def r(self) -> int:
        return len(self.layers)

    @property
    def nodes(self) -> frozenset:
        return frozenset().union(*self.layers)

    def ancestral_sets(self) -> list[frozenset]:
        """Cumulative unions ``L1, L1 ∪ L2, ...``."""
        out, acc = [], frozenset()
        for layer in self.layers:
            acc = acc | layer
            out.append(acc)
        return out

    def layer_of(self) -> dict[int, int]:
        return {v: k for k, layer in enumerate(self.layers) for v in layer}

    def as_lists(self) -> list[list[int]]:
        return [sorted(layer) for layer in self.layers]


@dataclass(frozen=True)
class Ordering:
    perm: tuple

    def __post_init__(self):
        perm = tuple(int(v) for v in self.perm)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError(f"not a permutation of 0..{len(perm) - 1}: {perm}")
        object.__setattr__(self, "perm", perm)

    def __len__(self):
        return len(self.perm)

    def position(self) -> dict[int, int]:
        return {v: k for k, v in enumerate(self.perm)}


def layer_decomposition(dag: Dag) -> LayerDecomposition:
    """Repeatedly strip the current source nodes."""
    remaining = set(range(dag.d))
    indeg = {v: len(dag.parents(v)) for v in remaining}
    layers = []
    while remaining:
        sources = {v for v in remaining if indeg[v] == 0}
        layers.append(sources)
        remaining -= sources
        for v in sources:
            for c in dag.children(v):
                indeg[c] -= 1
    return LayerDecomposition(tuple(layers))


def is_consistent_ordering(dag: Dag, ordering: Ordering) -> bool:
    if len(ordering) != dag.d:
        raise ValueError(f"ordering has length {len(ordering)}, graph has {dag.d} nodes")
    pos = ordering.position()
    return all(pos[i] < pos[j] for i, j in dag.edges)


def is_consistent_layering(dag: Dag, ld: LayerDecomposition) -> bool:
    """True iff every ordering compatible with ``ld`` is a topological sort.

    That is, no edge joins two nodes of the same layer or points backwards.
    """
    if ld.nodes != frozenset(range(dag.d)):
        raise ValueError("layers do not cover the graph's nodes")
    where = ld.layer_of()
    return all(where[i] < where[j] for i, j in dag.edges)


def orderings_of_layers(ld: LayerDecomposition) -> Ordering:
    """Canonical ordering: layers in sequence, ascending index within a layer."""
    return Ordering(tuple(v for layer in ld.layers for v in sorted(layer)))


def shd(estimate: Dag, truth: Dag) -> int:
    """Structural Hamming distance; a reversed edge counts as one edit."""
    if estimate.d != truth.d:
        raise ValueError(f"dimension mismatch: {estimate.d} vs {truth.d}")
    est, tru = estimate.edges, truth.edges
    reversed_ = {(i, j) for i, j in est if (j, i) in tru and (i, j) not in tru}
    extra = est - tru - reversed_
    missing = {(i, j) for i, j in tru - est if (j, i) not in est}
    return len(extra) + len(missing) + len(reversed_)


# --- edge-list CSV ---------------------------------------------------------

def dag_to_csv_text(dag: Dag) -> str:
    buf = io.StringIO()
    buf.write(f"# d={dag.d}\n")
    buf.write("parent,child\n")
    for i, j in sorted(dag.edges):
        buf.write(f"{i + 1},{j + 1}\n")
    return buf.getvalue()


def dag_from_csv_text(text: str) -> Dag:
    d = None
    edges = []
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.startswith("d="):
                d = int(body[2:])
            continue
        if not header_seen:
            if line.replace(" ", "") != "parent,child":
                raise ValueError(f"line {lineno}: expected header 'parent,child'")
            header_seen = True
            continue
        try:
            p, c = (int(tok) for tok in line.split(","))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: cannot parse edge {line!r}") from exc
        edges.append((p - 1, c - 1))
    if d is None:
        d = max((max(e) + 1 for e in edges), default=0)
    return Dag(d, frozenset(edges))


def write_dag(dag: Dag, path) -> None:
    atomic_write(path, dag_to_csv_text(dag))


def read_dag(path) -> Dag:
    with open(path) as fh:
        return dag_from_csv_text(fh.read())


def atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
