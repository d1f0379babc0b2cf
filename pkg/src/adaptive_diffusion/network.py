"""Agent graphs: construction, validation and neighborhood selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

__all__ = [
    "Topology",
    "SelectionMap",
    "TopologyError",
    "generate_topology",
    "is_strongly_connected",
    "restrict",
    "path_topology",
]

MAX_RANDOM_ATTEMPTS = 1000


class TopologyError(ValueError):
    """Raised for malformed adjacency data or unsatisfiable graph requests."""


def _as_adjacency(adjacency) -> np.ndarray:
    adj = np.asarray(adjacency)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise TopologyError(f"adjacency must be square, got shape {adj.shape}")
    return adj.astype(bool)


def is_strongly_connected(t: "Topology | np.ndarray") -> bool:
    """True iff every node can reach every other node.

    Accepts a Topology or a raw square adjacency relation; the latter allows
    checking candidate graphs before a Topology is built from them.
    """
    adj = t.adjacency if isinstance(t, Topology) else _as_adjacency(t)
    if adj.shape[0] == 0:
        return False
    n_comp, _ = connected_components(adj.astype(np.int8), directed=False)
    return n_comp == 1


@dataclass(frozen=True)
class SelectionMap:
    """Column selector P_k for node k (an N x n_k 0/1 matrix)."""

    node: int
    columns: tuple[int, ...]
    n_nodes: int

    def matrix(self) -> np.ndarray:
        p = np.zeros((self.n_nodes, len(self.columns)))
        p[list(self.columns), np.arange(len(self.columns))] = 1.0
        return p

    def embed(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (len(self.columns),):
            raise TopologyError(
                f"expected vector of length {len(self.columns)}, got shape {v.shape}"
            )
        out = np.zeros(self.n_nodes)
        out[list(self.columns)] = v
        return out

    def extract(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return v[list(self.columns)]


@dataclass(frozen=True, eq=False)
class Topology:
    """Undirected connected graph with mandatory self-loops.

    Build with :meth:`from_adjacency` or :func:`generate_topology`; the
    constructor validates every invariant and freezes the arrays.
    """

    adjacency: np.ndarray
    neighborhoods: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        adj = self.adjacency
        if adj.shape[0] < 1:
            raise TopologyError("topology needs at least one node")
        if not np.array_equal(adj, adj.T):
            raise TopologyError("adjacency must be symmetric")
        if not adj.diagonal().all():
            raise TopologyError("every node must carry a self-loop")
        for k, nbrs in enumerate(self.neighborhoods):
            if tuple(np.flatnonzero(adj[:, k]).tolist()) != nbrs:
                raise TopologyError(f"neighborhood of node {k} inconsistent with adjacency")
        if not is_strongly_connected(adj):
            raise TopologyError("graph is not connected")
        adj.setflags(write=False)

    @classmethod
    def from_adjacency(cls, adjacency, add_self_loops: bool = True) -> "Topology":
        adj = _as_adjacency(adjacency).copy()
        if add_self_loops:
            np.fill_diagonal(adj, True)
        nbrs = tuple(tuple(np.flatnonzero(adj[:, k]).tolist()) for k in range(adj.shape[0]))
        return cls(adjacency=adj, neighborhoods=nbrs)

    @classmethod
    def from_edges(cls, n_nodes: int, edges: Sequence[tuple[int, int]]) -> "Topology":
        adj = np.zeros((n_nodes, n_nodes), dtype=bool)
        for a, b in edges:
            adj[a, b] = adj[b, a] = True
        return cls.from_adjacency(adj)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        """n_k = |N_k|, counting the self-loop."""
        return np.array([len(n) for n in self.neighborhoods])

    def selection(self, k: int) -> SelectionMap:
        return SelectionMap(node=k, columns=self.neighborhoods[k], n_nodes=self.n_nodes)

    def to_adjacency_text(self) -> str:
        """One line per node, ``k: l1 l2 ...`` listing neighbours other than k."""
        lines = []
        for k, nbrs in enumerate(self.neighborhoods):
            others = " ".join(str(l) for l in nbrs if l != k)
            lines.append(f"{k}: {others}".rstrip())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_adjacency_text(cls, text: str) -> "Topology":
        rows: dict[int, list[int]] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, sep, tail = line.partition(":")
            if not sep:
                raise TopologyError(f"adjacency line {lineno}: expected 'k: neighbours'")
            try:
                k = int(head)
                nbrs = [int(tok) for tok in tail.split()]
            except ValueError as exc:
                raise TopologyError(f"adjacency line {lineno}: {exc}") from None
            if k in rows:
                raise TopologyError(f"adjacency line {lineno}: node {k} listed twice")
            rows[k] = nbrs
        n = len(rows)
        if sorted(rows) != list(range(n)):
            raise TopologyError("adjacency list must name nodes 0..N-1 exactly once")
        adj = np.zeros((n, n), dtype=bool)
        for k, nbrs in rows.items():
            for l in nbrs:
                if not 0 <= l < n:
                    raise TopologyError(f"node {k}: neighbour {l} out of range")
                adj[k, l] = True
        if not np.array_equal(adj, adj.T):
            raise TopologyError("adjacency list is not symmetric")
        return cls.from_adjacency(adj)


def generate_topology(
    n_nodes: int,
    model: str = "random",
    seed: int | None = None,
    p: float | None = None,
    max_attempts: int = MAX_RANDOM_ATTEMPTS,
) -> Topology:
    """Build a ring, complete or Erdős–Rényi graph (self-loops always added).

    The random model redraws the off-diagonal edges until the graph is
    connected, giving up after ``max_attempts`` draws.
    """
    if n_nodes < 1:
        raise TopologyError(f"n_nodes must be >= 1, got {n_nodes}")
    if model == "ring":
        adj = np.eye(n_nodes, dtype=bool)
        idx = np.arange(n_nodes)
        adj[idx, (idx + 1) % n_nodes] = True
        adj[(idx + 1) % n_nodes, idx] = True
        return Topology.from_adjacency(adj)
    if model == "complete":
        return Topology.from_adjacency(np.ones((n_nodes, n_nodes), dtype=bool))
    if model != "random":
        raise TopologyError(f"unknown topology model {model!r}")
    if p is None or not 0.0 < p <= 1.0:
        raise TopologyError(f"random model needs 0 < p <= 1, got {p}")

    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n_nodes, k=1)
    for _ in range(max_attempts):
        adj = np.eye(n_nodes, dtype=bool)
        adj[iu] = rng.random(iu[0].size) < p
        adj = adj | adj.T
        if is_strongly_connected(adj):
            return Topology.from_adjacency(adj)
    raise TopologyError(
        f"no connected graph drawn in {max_attempts} attempts (n={n_nodes}, p={p})"
    )


def path_topology(n_nodes: int) -> Topology:
    return Topology.from_edges(n_nodes, [(k, k + 1) for k in range(n_nodes - 1)])


def restrict(t: Topology, k: int, m) -> np.ndarray:
    """Principal submatrix of ``m`` on the neighbourhood of ``k`` (P_k^T m P_k)."""
    m = np.asarray(m, dtype=float)
    n = t.n_nodes
    if m.shape != (n, n):
        raise TopologyError(f"matrix must be {n}x{n}, got shape {m.shape}")
    idx = np.asarray(t.neighborhoods[k])
    return m[np.ix_(idx, idx)]
