"""Undirected networks split into disjoint connected components.

Node ids are dense integers ``0..n-1``. Components are found once, at
construction, and the graph is treated as immutable afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components


class GraphError(ValueError):
    """Raised for malformed edge lists or node tables."""


@dataclass(frozen=True, eq=False)
class NeighborSets:
    """Ragged per-node node sets in CSR layout.

    ``indices[indptr[i]:indptr[i+1]]`` holds the (sorted) members of the set
    attached to node ``i``. Used for first-order neighborhoods, for the
    union of first- and second-order neighborhoods, and for any filtered
    neighborhood an exposure mapping needs.
    """
    indptr: np.ndarray
    indices: np.ndarray
    _mats: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.indptr)

    def members(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def count(self, Z) -> np.ndarray:
        """Number of treated members of each set."""
        Z = np.asarray(Z, dtype=float)
        rows = np.repeat(np.arange(self.n_nodes), self.sizes)
        sums = np.bincount(rows, weights=Z[self.indices], minlength=self.n_nodes)
        return np.rint(sums).astype(np.int64)

    def matrix(self, include_self: bool = False) -> sparse.csr_matrix:
        """0/1 incidence matrix with row ``i`` marking the members of set ``i``.

        Cached; callers must not modify the returned matrix.
        """
        if include_self not in self._mats:
            n = self.n_nodes
            M = sparse.csr_matrix((np.ones(len(self.indices)), self.indices, self.indptr),
                                  shape=(n, n))
            if include_self:
                M = (M + sparse.identity(n, format="csr")).tocsr()
            self._mats[include_self] = M
        return self._mats[include_self]

    def filter(self, keep: np.ndarray) -> "NeighborSets":
        """Keep only the entries flagged in ``keep`` (aligned with ``indices``)."""
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != self.indices.shape:
            raise ValueError("keep mask must align with indices")
        rows = np.repeat(np.arange(self.n_nodes), self.sizes)
        counts = np.bincount(rows[keep], minlength=self.n_nodes)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return NeighborSets(indptr, self.indices[keep])

    @classmethod
    def from_lists(cls, lists: Sequence[Iterable[int]]) -> "NeighborSets":
        sorted_lists = [np.unique(np.asarray(list(x), dtype=np.int64)) for x in lists]
        indptr = np.concatenate([[0], np.cumsum([len(x) for x in sorted_lists])]).astype(np.int64)
        indices = (np.concatenate(sorted_lists) if sorted_lists else np.zeros(0)).astype(np.int64)
        return cls(indptr, indices)


@dataclass(frozen=True, eq=False)
class ComponentGraph:
    """Undirected simple graph with precomputed component structure.

    Attributes
    ----------
    n_nodes : int
    edges : ndarray of shape (E, 2)
        Unique undirected edges stored as ``(i, j)`` with ``i < j``, sorted.
    component_of : ndarray of int
        Component index of each node. Components are numbered in order of
        their smallest node id.
    nbrs : NeighborSets
        First-order neighborhoods.
    """
    n_nodes: int
    edges: np.ndarray
    component_of: np.ndarray
    nbrs: NeighborSets
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def nodes(self) -> list[int]:
        return list(range(self.n_nodes))

    @property
    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}

    @property
    def degree(self) -> np.ndarray:
        return self.nbrs.sizes

    @property
    def n_components(self) -> int:
        return int(self.component_of.max()) + 1 if self.n_nodes else 0

    @property
    def component_sizes(self) -> np.ndarray:
        return np.bincount(self.component_of, minlength=self.n_components)

    def neighbors(self, i: int) -> list[int]:
        return [int(j) for j in self.nbrs.members(i)]

    def members(self, nu: int) -> np.ndarray:
        return np.flatnonzero(self.component_of == nu)

    def adjacency(self) -> sparse.csr_matrix:
        return self.nbrs.matrix()

    def component_matrix(self) -> sparse.csr_matrix:
        """(m, n) indicator matrix; row ``nu`` marks the nodes of component ``nu``."""
        M = self._cache.get("component_matrix")
        if M is None:
            n = self.n_nodes
            M = sparse.csr_matrix((np.ones(n), (self.component_of, np.arange(n))),
                                  shape=(self.n_components, n))
            self._cache["component_matrix"] = M
        return M

    def neighbor_sets(self, order: int = 1) -> NeighborSets:
        """Neighborhoods of order 1 (``N_i``) or 2 (``N_i`` together with ``N'_i``)."""
        if order == 1:
            return self.nbrs
        if order != 2:
            raise ValueError("order must be 1 or 2")
        sets = self._cache.get("order2")
        if sets is None:
            A = self.adjacency()
            A2 = ((A + A @ A) > 0).astype(np.int8).tolil()
            A2.setdiag(0)
            A2 = A2.tocsr()
            A2.eliminate_zeros()
            A2.sort_indices()
            sets = NeighborSets(A2.indptr.astype(np.int64), A2.indices.astype(np.int64))
            self._cache["order2"] = sets
        return sets

    def subgraph_nodes(self, keep: np.ndarray) -> tuple["ComponentGraph", np.ndarray]:
        """Induced subgraph on the nodes flagged in ``keep``.

        Returns the new graph and the old ids of its nodes (new id = position).
        """
        keep = np.asarray(keep, dtype=bool)
        old = np.flatnonzero(keep)
        remap = -np.ones(self.n_nodes, dtype=np.int64)
        remap[old] = np.arange(len(old))
        e = self.edges
        ok = keep[e[:, 0]] & keep[e[:, 1]] if len(e) else np.zeros(0, dtype=bool)
        grouped = self._cache.get("grouped", False)
        groups = self.component_of[old] if grouped else None
        return load_graph(remap[e[ok]], len(old), groups), old


def load_graph(edge_list, n_nodes: int, groups=None) -> ComponentGraph:
    """Build a :class:`ComponentGraph` from an edge list.

    Parameters
    ----------
    edge_list : sequence of (int, int)
        Pairs may repeat and may appear in either order.
    n_nodes : int
        Number of nodes; ids must lie in ``[0, n_nodes)``.
    groups : sequence, optional
        Known component label of every node. When given, these groups are
        the components (they may be internally disconnected, as with
        simulated clusters) and every edge must stay inside one group.
        Otherwise components are the connected components.
    """
    n_nodes = int(n_nodes)
    if n_nodes < 1:
        raise GraphError("graph needs at least one node")
    e = np.asarray(list(edge_list) if not isinstance(edge_list, np.ndarray) else edge_list,
                   dtype=np.int64).reshape(-1, 2)
    if len(e):
        if e.min() < 0 or e.max() >= n_nodes:
            bad = e[(e < 0).any(axis=1) | (e >= n_nodes).any(axis=1)][0]
            raise GraphError(f"edge {tuple(int(v) for v in bad)} has an id outside [0, {n_nodes})")
        loops = e[:, 0] == e[:, 1]
        if loops.any():
            raise GraphError(f"self-loop on node {int(e[loops][0, 0])}")
        e = np.sort(e, axis=1)
        e = np.unique(e, axis=0)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    A = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_nodes, n_nodes))
    A.sum_duplicates()
    A.sort_indices()
    if groups is None:
        _, labels = connected_components(A, directed=False)
    else:
        labels = np.asarray(groups)
        if labels.shape != (n_nodes,):
            raise GraphError("groups must give one label per node")
        if len(e) and np.any(labels[e[:, 0]] != labels[e[:, 1]]):
            bad = e[labels[e[:, 0]] != labels[e[:, 1]]][0]
            raise GraphError(f"edge {tuple(int(v) for v in bad)} joins two different groups")
    # relabel so that component ids follow the smallest member id
    first = {}
    for lab in labels:
        if lab not in first:
            first[lab] = len(first)
    comp = np.array([first[lab] for lab in labels], dtype=np.int64)
    nbrs = NeighborSets(A.indptr.astype(np.int64), A.indices.astype(np.int64))
    g = ComponentGraph(n_nodes, e, comp, nbrs)
    g._cache["grouped"] = groups is not None
    return g


def neighborhood_treatment_sum(g: ComponentGraph, Z, i: int) -> int:
    """Number of treated neighbors of node ``i``."""
    Z = np.asarray(Z)
    if len(Z) != g.n_nodes:
        raise ValueError("treatment vector is not aligned with the graph")
    return int(Z[g.nbrs.members(i)].sum())


def second_order_neighbors(g: ComponentGraph, i: int) -> list[int]:
    """Nodes at shortest-path distance exactly two from ``i``."""
    first = set(g.nbrs.members(i).tolist())
    out = set()
    for j in first:
        out.update(g.nbrs.members(j).tolist())
    out -= first
    out.discard(i)
    return sorted(out)


@dataclass(frozen=True, eq=False)
class NodeData:
    """Per-node covariates, treatment and outcome.

    Attributes
    ----------
    X : ndarray of shape (n, p)
    Z : ndarray of int, entries in {0, 1}
    Y : ndarray of float
    column_names : list of str
        Labels of the columns of ``X``.
    """
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    column_names: tuple

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Z = np.asarray(self.Z)
        Y = np.asarray(self.Y, dtype=float)
        if not (len(X) == len(Z) == len(Y)):
            raise GraphError("X, Z and Y must have the same number of rows")
        if X.shape[1] != len(self.column_names):
            raise GraphError("column_names must label every column of X")
        if np.isnan(X).any() or np.isnan(Y).any():
            raise GraphError("missing values are not allowed")
        if not np.isin(Z, (0, 1)).all():
            raise GraphError("treatment entries must be 0 or 1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z.astype(np.int64))
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def n(self) -> int:
        return len(self.Y)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.X[:, self.column_names.index(name)]
        except ValueError:
            raise KeyError(f"unknown covariate column {name!r}") from None

    def with_treatment(self, Z, Y=None) -> "NodeData":
        return NodeData(self.X, Z, self.Y if Y is None else Y, self.column_names)

    def subset(self, rows) -> "NodeData":
        return NodeData(self.X[rows], self.Z[rows], self.Y[rows], self.column_names)


def check_aligned(g: ComponentGraph, data: NodeData):
    if data.n != g.n_nodes:
        raise GraphError(f"node table has {data.n} rows but the graph has {g.n_nodes} nodes")
