"""Sensor graph topology and its matrix forms (adjacency, degree, Laplacian)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegreeZero, EmptyGraph, MalformedCsv, UnknownNode

COMBINATORIAL = "combinatorial"
NORMALIZED = "symmetric_normalized"
LAPLACIAN_KINDS = (COMBINATORIAL, NORMALIZED)


@dataclass(frozen=True)
class Graph:
    """Sensor network with lexicographically ordered node ids.

    ``edges`` is the symmetrized, deduplicated index pair set used for all
    spectral work; ``directed_edges`` keeps the direction of the input edges
    (minus self-loops and duplicates) for reporting and export.
    """

    node_ids: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    directed_edges: tuple[tuple[int, int], ...] = ()

    @property
    def n(self) -> int:
        return len(self.node_ids)

    def index_of(self, node_id: str) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            raise UnknownNode(f"unknown node id {node_id!r}") from None

    @property
    def _index(self) -> dict[str, int]:
        # cached lazily; the dataclass is frozen so bypass __setattr__
        idx = self.__dict__.get("_index_cache")
        if idx is None:
            idx = {nid: i for i, nid in enumerate(self.node_ids)}
            object.__setattr__(self, "_index_cache", idx)
        return idx

    def edge_id_pairs(self) -> list[tuple[str, str]]:
        return [(self.node_ids[i], self.node_ids[j]) for i, j in self.directed_edges]


def build_graph(edge_list: Iterable[tuple[str, str]]) -> Graph:
    """Build a graph from ``(src_id, dst_id)`` pairs.

    Duplicate edges are merged and self-loops dropped (A_ii = 0). The
    adjacency used downstream is symmetric: an edge in either direction
    connects both nodes.
    """
    pairs = [(str(a), str(b)) for a, b in edge_list]
    if not pairs:
        raise EmptyGraph("edge list is empty")
    for a, b in pairs:
        if not a or not b:
            raise ValueError("node ids must be non-empty strings")
    ids = sorted({x for pair in pairs for x in pair})
    index = {nid: i for i, nid in enumerate(ids)}
    directed = sorted({(index[a], index[b]) for a, b in pairs if a != b})
    return _from_indices(tuple(ids), directed)


def _from_indices(node_ids: tuple[str, ...], directed: Sequence[tuple[int, int]]) -> Graph:
    directed = tuple(sorted(set(directed)))
    sym = set()
    for i, j in directed:
        sym.add((i, j))
        sym.add((j, i))
    return Graph(node_ids=node_ids, edges=tuple(sorted(sym)), directed_edges=directed)


def adjacency_matrix(g: Graph) -> np.ndarray:
    a = np.zeros((g.n, g.n))
    if g.edges:
        rows, cols = np.array(g.edges).T
        a[rows, cols] = 1.0
    return a


def degree_matrix(g: Graph) -> np.ndarray:
    return np.diag(adjacency_matrix(g).sum(axis=1))


def laplacian(g: Graph, kind: str = COMBINATORIAL) -> np.ndarray:
    """Graph Laplacian, ``D - A`` or ``I - D^-1/2 A D^-1/2``."""
    if kind not in LAPLACIAN_KINDS:
        raise ValueError(f"unknown Laplacian kind {kind!r}; expected one of {LAPLACIAN_KINDS}")
    if not g.edges:
        raise EmptyGraph(f"graph with {g.n} nodes has no edges; no spectral structure")
    a = adjacency_matrix(g)
    deg = a.sum(axis=1)
    if kind == COMBINATORIAL:
        return np.diag(deg) - a
    isolated = np.flatnonzero(deg == 0)
    if isolated.size:
        names = ", ".join(g.node_ids[i] for i in isolated[:5])
        raise DegreeZero(f"normalized Laplacian undefined for isolated node(s): {names}")
    inv_sqrt = 1.0 / np.sqrt(deg)
    return np.eye(g.n) - inv_sqrt[:, None] * a * inv_sqrt[None, :]


def subgraph(g: Graph, keep_ids: Iterable[str]) -> tuple[Graph, tuple[int, ...]]:
    """Induced subgraph on ``keep_ids``.

    Returns the reindexed graph and, for each new node index, the index the
    node had in ``g``. The result may have no edges; spectral operations on
    it then raise :class:`EmptyGraph`.
    """
    keep = sorted(set(keep_ids))
    old_index = [g.index_of(k) for k in keep]
    remap = {old: new for new, old in enumerate(old_index)}
    directed = [(remap[i], remap[j]) for i, j in g.directed_edges if i in remap and j in remap]
    return _from_indices(tuple(keep), directed), tuple(old_index)


def read_edge_csv(path: str | Path) -> Graph:
    """Read a ``src,dst`` edge list."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["src", "dst"]:
            raise MalformedCsv(f"{path}: expected header 'src,dst', got {header!r}")
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or not row[0].strip() or not row[1].strip():
                raise MalformedCsv(f"{path}:{lineno}: expected two non-empty ids, got {row!r}")
            pairs.append((row[0].strip(), row[1].strip()))
    return build_graph(pairs)


def write_edge_csv(g: Graph, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["src", "dst"])
        writer.writerows(g.edge_id_pairs())
