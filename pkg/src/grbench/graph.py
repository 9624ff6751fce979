"""Graph storage, dataset ingestion, splits and structural primitives.

Graphs are undirected and weighted, stored as a symmetric scipy CSR matrix
with no self-loops. Everything downstream (reduction, attack, GNN training)
consumes this representation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected weighted graph backed by a symmetric CSR adjacency."""

    adj: sp.csr_matrix

    def __post_init__(self):
        a = sp.csr_matrix(self.adj, dtype=np.float64)
        a.setdiag(0)
        a.eliminate_zeros()
        a.sort_indices()
        if a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got {a.shape}")
        if a.nnz and a.data.min() < 0:
            raise ValueError("edge weights must be nonnegative")
        if abs(a - a.T).sum() > 1e-9 * max(1.0, abs(a).sum()):
            raise ValueError("adjacency must be symmetric")
        object.__setattr__(self, "adj", a)

    @classmethod
    def from_edges(cls, n, u, v, w=None) -> "Graph":
        """Build from an undirected edge list; duplicates collapse to max weight."""
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        w = np.ones(len(u)) if w is None else np.asarray(w, dtype=np.float64)
        if len(u) and (min(u.min(), v.min()) < 0 or max(u.max(), v.max()) >= n):
            raise IndexError("edge endpoint out of range")
        keep = u != v
        u, v, w = u[keep], v[keep], w[keep]
        lo, hi = np.minimum(u, v), np.maximum(u, v)
        key = lo * n + hi
        uniq, inv = np.unique(key, return_inverse=True)
        wmax = np.zeros(len(uniq))
        np.maximum.at(wmax, inv, w)
        a = sp.csr_matrix((wmax, (uniq // n, uniq % n)), shape=(n, n))
        return cls(a + a.T)

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    @property
    def num_edges(self) -> int:
        return self.adj.nnz // 2

    def edges(self):
        """Return (u, v, w) for each undirected edge with u < v, in CSR order."""
        upper = sp.triu(self.adj, k=1).tocsr()
        upper.sort_indices()
        u = np.repeat(np.arange(self.n), np.diff(upper.indptr))
        return u, upper.indices.astype(np.int64), upper.data.copy()

    def degree(self) -> np.ndarray:
        """Unweighted degree."""
        return np.diff(self.adj.indptr)

    def weighted_degree(self) -> np.ndarray:
        return np.asarray(self.adj.sum(axis=1)).ravel()

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adj
        return a.indices[a.indptr[v]:a.indptr[v + 1]]

    def neighbor_weights(self, v: int) -> np.ndarray:
        a = self.adj
        return a.data[a.indptr[v]:a.indptr[v + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        i = np.searchsorted(nb, v)
        return bool(i < len(nb) and nb[i] == v)

    def subgraph(self, nodes) -> "Graph":
        """Induced subgraph, relabelled in the order of `nodes`."""
        nodes = np.asarray(nodes, dtype=np.int64)
        return Graph(self.adj[nodes][:, nodes])

    def with_edges_removed(self, u, v) -> "Graph":
        """Copy of the graph without the listed undirected edges."""
        eu, ev, ew = self.edges()
        u, v = np.asarray(u, dtype=np.int64), np.asarray(v, dtype=np.int64)
        drop = np.minimum(u, v) * self.n + np.maximum(u, v)
        keep = ~np.isin(eu * self.n + ev, drop)
        return Graph.from_edges(self.n, eu[keep], ev[keep], ew[keep])

    def edge_subgraph(self, mask) -> "Graph":
        """Keep the edges (in `edges()` order) where mask is true; nodes unchanged."""
        eu, ev, ew = self.edges()
        mask = np.asarray(mask, dtype=bool)
        return Graph.from_edges(self.n, eu[mask], ev[mask], ew[mask])


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint node sets used by the evaluation protocol."""

    target: np.ndarray
    clean_test: np.ndarray
    labeled_train: np.ndarray
    validation: np.ndarray
    unlabeled: np.ndarray

    def train_pool(self) -> np.ndarray:
        """Nodes of the training graph (everything except target and clean test)."""
        return np.sort(np.concatenate([self.labeled_train, self.validation, self.unlabeled]))

    def sizes(self) -> dict:
        return {k: len(getattr(self, k)) for k in
                ("target", "clean_test", "labeled_train", "validation", "unlabeled")}


@dataclass
class Dataset:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    node_ids: np.ndarray | None = field(default=None, repr=False)


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def load_dataset(edge_path, feature_path, label_path, name=None) -> Dataset:
    """Read an edge list, a CSV feature matrix and a label-per-line file.

    Node IDs are the 0-based integers used in the edge file; the node count is
    ``max id + 1`` and must match the feature and label row counts. An
    optional third column gives the edge weight (default 1). Duplicate edges
    and self-loops are dropped (counted in a warning). A leading comment
    ``# nodes N`` raises the node count to N so trailing isolated nodes survive
    a save/load round trip.
    """
    declared = 0
    with open(edge_path, encoding="utf-8") as fh:
        head = fh.readline().split()
    if len(head) == 3 and head[:2] == ["#", "nodes"] and head[2].isdigit():
        declared = int(head[2])
    us, vs, ws = [], [], []
    for lineno, line in _read_lines(edge_path):
        parts = line.replace(",", " ").split()
        if len(parts) < 2:
            raise DatasetError(f"{edge_path}:{lineno}: expected 'u v', got {line!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise DatasetError(f"{edge_path}:{lineno}: non-integer node id in {line!r}") from None
        if a < 0 or b < 0:
            raise DatasetError(f"{edge_path}:{lineno}: negative node id")
        try:
            ws.append(float(parts[2]) if len(parts) > 2 else 1.0)
        except ValueError:
            raise DatasetError(f"{edge_path}:{lineno}: bad edge weight in {line!r}") from None
        us.append(a)
        vs.append(b)

    rows = []
    for lineno, line in _read_lines(feature_path):
        try:
            rows.append([float(t) for t in line.split(",")])
        except ValueError:
            raise DatasetError(f"{feature_path}:{lineno}: bad float in feature row") from None
        if len(rows[-1]) != len(rows[0]):
            raise DatasetError(f"{feature_path}:{lineno}: ragged feature row")
    x = np.asarray(rows, dtype=np.float64)

    labels = []
    for lineno, line in _read_lines(label_path):
        try:
            labels.append(int(line))
        except ValueError:
            raise DatasetError(f"{label_path}:{lineno}: label is not an integer") from None
    y = np.asarray(labels, dtype=np.int64)

    n = max((max(max(us), max(vs)) + 1) if us else 0, declared)
    if not us and not declared:
        n = len(y)
    if x.shape[0] != n or y.shape[0] != n:
        raise DatasetError(
            f"dimension mismatch: {n} nodes from edges, {x.shape[0]} feature rows, "
            f"{y.shape[0]} labels")
    if not np.all(np.isfinite(x)):
        raise DatasetError("non-finite feature values")
    if len(y) and y.min() < 0:
        raise DatasetError("labels must be nonnegative")

    u, v = np.asarray(us, dtype=np.int64), np.asarray(vs, dtype=np.int64)
    loops = int((u == v).sum())
    g = Graph.from_edges(n, u, v, np.asarray(ws))
    dups = len(u) - loops - g.num_edges
    if loops or dups:
        log.warning("%s: dropped %d self-loops and %d duplicate edges", edge_path, loops, dups)
    return Dataset(g, x, y, int(y.max()) + 1 if len(y) else 0,
                   name=name or Path(edge_path).stem, node_ids=np.arange(n))


def load_cora(directory) -> Dataset:
    """Read the LINQS citation format: ``cora.content`` (id, binary words, class
    name per line) and ``cora.cites`` (cited citing). Paper ids are remapped to
    0..n-1 in file order; class names are numbered in sorted order."""
    directory = Path(directory)
    ids, rows, names = [], [], []
    for lineno, line in _read_lines(directory / "cora.content"):
        parts = line.split()
        if len(parts) < 3:
            raise DatasetError(f"cora.content:{lineno}: too few columns")
        ids.append(parts[0])
        rows.append(np.asarray(parts[1:-1], dtype=np.float64))
        names.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    us, vs = [], []
    skipped = 0
    for lineno, line in _read_lines(directory / "cora.cites"):
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(f"cora.cites:{lineno}: expected two ids")
        if parts[0] not in index or parts[1] not in index:
            skipped += 1
            continue
        us.append(index[parts[0]])
        vs.append(index[parts[1]])
    if skipped:
        log.warning("cora.cites: %d citations reference unknown papers", skipped)
    classes = sorted(set(names))
    y = np.asarray([classes.index(c) for c in names], dtype=np.int64)
    g = Graph.from_edges(len(ids), us, vs)
    return Dataset(g, np.vstack(rows), y, len(classes), name="cora", node_ids=np.asarray(ids))


def save_dataset(ds: Dataset, prefix):
    """Write `prefix`.edges (u v w), `prefix`.features.csv and `prefix`.labels."""
    prefix = str(prefix)
    u, v, w = ds.graph.edges()
    with open(prefix + ".edges", "w") as fh:
        fh.write(f"# nodes {ds.graph.n}\n")
        for a, b, c in zip(u, v, w):
            fh.write(f"{a} {b} {c:.17g}\n")
    np.savetxt(prefix + ".features.csv", ds.features, delimiter=",", fmt="%.17g")
    np.savetxt(prefix + ".labels", np.asarray(ds.labels), fmt="%d")
    return prefix + ".edges", prefix + ".features.csv", prefix + ".labels"


SPLIT_FRACTIONS = (0.1, 0.1, 0.2, 0.1)


def split_dataset(g: Graph | int, seed: int) -> DatasetSplit:
    """Seeded 10/10/20/10/50 split into target/clean-test/labeled/val/unlabeled."""
    n = g if isinstance(g, (int, np.integer)) else g.n
    if n < 10:
        raise ValueError(f"need at least 10 nodes to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.cumsum([int(np.floor(f * n + 1e-9)) for f in SPLIT_FRACTIONS])
    parts = np.split(perm, cuts)
    return DatasetSplit(*(np.sort(p) for p in parts))


def laplacian(g: Graph) -> sp.csr_matrix:
    """Combinatorial Laplacian L = D - W."""
    d = g.weighted_degree()
    return (sp.diags(d) - g.adj).tocsr()


def two_hop_density(g: Graph, v: int) -> float:
    """Edge density of the subgraph induced on v's closed 2-hop neighbourhood."""
    if not 0 <= v < g.n:
        raise IndexError(f"node {v} out of range [0, {g.n})")
    one = g.neighbors(v)
    ball = np.unique(np.concatenate([[v], one] + [g.neighbors(u) for u in one]))
    k = len(ball)
    if k <= 1:
        return 0.0
    sub = g.adj[ball][:, ball]
    return (sub.nnz / 2) / (k * (k - 1) / 2)


def generate_sbm(block_sizes, p_in, p_out, d, seed, feature_scale=1.0, noise=1.0):
    """Stochastic block model with block-mean Gaussian features.

    Returns a Dataset whose labels are block indices. Block means are drawn
    from N(0, feature_scale^2) per dimension; node features add N(0, noise^2).
    """
    block_sizes = list(block_sizes)
    if not block_sizes:
        raise ValueError("block_sizes must be non-empty")
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise ValueError("probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(len(block_sizes)), block_sizes)
    n = len(y)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(y[iu] == y[ju], p_in, p_out)
    hit = rng.random(len(iu)) < prob
    g = Graph.from_edges(n, iu[hit], ju[hit])
    means = rng.normal(0.0, feature_scale, size=(len(block_sizes), d))
    x = means[y] + rng.normal(0.0, noise, size=(n, d))
    return Dataset(g, x, y, len(block_sizes), name="sbm", node_ids=np.arange(n))
