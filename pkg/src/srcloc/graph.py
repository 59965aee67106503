"""Sparse undirected graphs and the matrix operators derived from them."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import networkx as nx
import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

log = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable unweighted undirected graph backed by a CSR adjacency."""

    node_count: int
    adjacency: sp.csr_matrix

    def __post_init__(self):
        adj = self.adjacency
        if adj.shape != (self.node_count, self.node_count):
            raise GraphError(f"adjacency shape {adj.shape} != ({self.node_count}, {self.node_count})")
        adj.data.setflags(write=False)
        adj.indices.setflags(write=False)
        adj.indptr.setflags(write=False)

    @classmethod
    def from_edges(cls, node_count: int, edges) -> "Graph":
        """Build from an iterable of (u, v) pairs; self-loops and duplicates are dropped."""
        arr = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if arr.size and (arr.min() < 0 or arr.max() >= node_count):
            raise GraphError("edge endpoint out of range")
        arr = arr[arr[:, 0] != arr[:, 1]]
        lo = np.minimum(arr[:, 0], arr[:, 1])
        hi = np.maximum(arr[:, 0], arr[:, 1])
        pairs = np.unique(np.stack([lo, hi], axis=1), axis=0) if len(arr) else np.zeros((0, 2), np.int64)
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        adj = sp.csr_matrix(
            (np.ones(len(rows), dtype=np.float64), (rows, cols)), shape=(node_count, node_count)
        )
        adj.sort_indices()
        return cls(node_count, adj)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    @property
    def edge_count(self) -> int:
        return int(self.adjacency.nnz // 2)

    def edges(self) -> np.ndarray:
        """Unique (u, v) pairs with u < v, lexicographically sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return np.stack([coo.row[order], coo.col[order]], axis=1).astype(np.int64)

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    def subgraph(self, nodes) -> tuple["Graph", np.ndarray]:
        """Induced subgraph; returns it together with the original ids of its nodes."""
        nodes = np.unique(np.asarray(list(nodes), dtype=np.int64))
        sub = self.adjacency[nodes][:, nodes].tocsr()
        sub.sort_indices()
        return Graph(len(nodes), sub), nodes

    def to_networkx(self) -> nx.Graph:
        G = nx.Graph()
        G.add_nodes_from(range(self.node_count))
        G.add_edges_from(map(tuple, self.edges()))
        return G


@dataclass(frozen=True, eq=False)
class GraphOperators:
    """S = D^-1/2 A D^-1/2, gcn_adj = D~^-1/2 (A+I) D~^-1/2 and L = D - A."""

    S: sp.csr_matrix
    gcn_adj: sp.csr_matrix
    L: sp.csr_matrix


def load_edge_list(path) -> Graph:
    """Read a whitespace separated, 0-based edge list.

    Lines starting with ``#`` are comments, except ``# nodes: N`` which fixes
    the node count (and allows a file without any edges).
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise GraphError(f"cannot read edge list {path}: {exc}") from exc

    declared = None
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip().lower()
            if body.startswith("nodes:"):
                try:
                    declared = int(body.split(":", 1)[1])
                except ValueError:
                    raise GraphError(f"{path}:{lineno}: bad node-count header") from None
            continue
        parts = line.split()
        if len(parts) < 2:
            raise GraphError(f"{path}:{lineno}: expected two node ids, got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
        if u < 0 or v < 0:
            raise GraphError(f"{path}:{lineno}: negative node id")
        edges.append((u, v))

    kept = {(min(u, v), max(u, v)) for u, v in edges if u != v}
    dropped = len(edges) - len(kept)
    if dropped:
        log.warning("%s: dropped %d duplicate/self-loop lines", path, dropped)
    if not kept and declared is None:
        raise GraphError(f"{path}: empty edge set")
    n = max((max(e) for e in edges), default=-1) + 1
    if declared is not None:
        if declared < n:
            raise GraphError(f"{path}: node-count header {declared} < max id + 1 = {n}")
        n = declared
    return Graph.from_edges(n, sorted(kept))


def save_edge_list(g: Graph, path) -> None:
    lines = [f"# nodes: {g.node_count}"]
    lines += [f"{u} {v}" for u, v in g.edges()]
    Path(path).write_text("\n".join(lines) + "\n")


def derive_operators(g: Graph) -> GraphOperators:
    deg = g.degrees.astype(np.float64)
    isolated = np.flatnonzero(deg == 0)
    if len(isolated):
        raise GraphError(f"isolated node {int(isolated[0])} (degree 0) has no normalized weight")
    A = g.adjacency
    inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    S = (inv_sqrt @ A @ inv_sqrt).tocsr()
    A_tilde = (A + sp.identity(g.node_count, format="csr")).tocsr()
    inv_sqrt_t = sp.diags(1.0 / np.sqrt(deg + 1.0))
    gcn_adj = (inv_sqrt_t @ A_tilde @ inv_sqrt_t).tocsr()
    L = (sp.diags(deg) - A).tocsr()
    for m in (S, gcn_adj, L):
        m.sort_indices()
    return GraphOperators(S=S, gcn_adj=gcn_adj, L=L)


def largest_component(g: Graph) -> Graph:
    ncomp, labels = csgraph.connected_components(g.adjacency, directed=False)
    if ncomp <= 1:
        return g
    biggest = np.argmax(np.bincount(labels))
    sub, _ = g.subgraph(np.flatnonzero(labels == biggest))
    return sub


def generate_graph(model: str, seed: int = 0, **params) -> Graph:
    """Draw a random graph and reduce it to its largest connected component.

    ``model`` is one of ``erdos-renyi`` (n, p), ``watts-strogatz`` (n, k, p)
    or ``barabasi-albert`` (n, m).
    """
    model = model.lower().replace("_", "-")
    try:
        if model == "erdos-renyi":
            n, p = int(params["n"]), float(params["p"])
            if not 0.0 <= p <= 1.0:
                raise GraphError("erdos-renyi p must lie in [0, 1]")
            G = nx.gnp_random_graph(n, p, seed=seed)
        elif model == "watts-strogatz":
            n, k, p = int(params["n"]), int(params["k"]), float(params["p"])
            if not 0.0 <= p <= 1.0:
                raise GraphError("watts-strogatz rewiring probability must lie in [0, 1]")
            if not 2 <= k < n:
                raise GraphError("watts-strogatz needs 2 <= k < n")
            G = nx.watts_strogatz_graph(n, k, p, seed=seed)
        elif model == "barabasi-albert":
            n, m = int(params["n"]), int(params["m"])
            if not 1 <= m < n:
                raise GraphError("barabasi-albert needs 1 <= m < n")
            G = nx.barabasi_albert_graph(n, m, seed=seed)
        else:
            raise GraphError(f"unknown graph model {model!r}")
    except KeyError as exc:
        raise GraphError(f"{model}: missing parameter {exc.args[0]!r}") from None

    g = Graph.from_edges(G.number_of_nodes(), list(G.edges()))
    if g.edge_count == 0:
        raise GraphError(f"{model} draw with {params} has no edges")
    return largest_component(g)


def closeness_centrality(g: Graph, subset=None) -> np.ndarray:
    """Normalized closeness centrality via unweighted shortest paths.

    For node i reaching r others at total distance d, the value is
    (r / d) * (r / (n - 1)), which equals the usual closeness on connected
    graphs. With ``subset`` the computation runs on the induced subgraph and
    the result is indexed like the subset's sorted node ids.
    """
    if subset is not None:
        subset = list(subset)
        if not subset:
            raise GraphError("closeness centrality of an empty subset")
        g, _ = g.subgraph(subset)
    n = g.node_count
    if n <= 1:
        return np.zeros(n)
    dist = csgraph.shortest_path(g.adjacency, method="D", directed=False, unweighted=True)
    finite = np.isfinite(dist)
    reach = finite.sum(axis=1) - 1
    total = np.where(finite, dist, 0.0).sum(axis=1)
    out = np.zeros(n)
    ok = total > 0
    out[ok] = (reach[ok] / total[ok]) * (reach[ok] / (n - 1))
    return out

