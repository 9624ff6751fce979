"""Graph coarsening through node partitions.

A partition maps every node to a cluster. Given a partition, features are
pooled with the normalized partition matrix ``P = P_hat C^{-1/2}``
(``X' = P^T X``), labels take the majority class of each cluster, and
super-edges carry the summed weight of the original edges between clusters.

Six partitioners are provided: local-variation contraction over
neighbourhoods (vn), maximal cliques (vc) or edges (ve), heavy-edge
matching (he), algebraic-distance agglomeration (jc) and Kron reduction
(kron).
"""
from __future__ import annotations

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .graph import Graph, laplacian

log = logging.getLogger(__name__)

METHODS = ("vn", "vc", "ve", "he", "jc", "kron")


class KronReductionError(np.linalg.LinAlgError):
    """The eliminated block of the Laplacian is singular."""

    def __init__(self, component):
        self.component = list(component)
        super().__init__(
            f"singular L_RR: eliminated component {self.component[:10]}"
            f"{'...' if len(self.component) > 10 else ''} has no path to a kept node; "
            "set kron_regularization > 0")


@dataclass(frozen=True, eq=False)
class Partition:
    """Node-to-cluster assignment with dense cluster ids."""

    assign: np.ndarray
    sizes: np.ndarray

    @classmethod
    def from_assign(cls, assign) -> "Partition":
        """Normalize arbitrary labels so clusters are numbered by smallest member."""
        assign = np.asarray(assign, dtype=np.int64)
        _, first, inv = np.unique(assign, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        dense = rank[inv]
        return cls(dense, np.bincount(dense, minlength=len(order)))

    @classmethod
    def identity(cls, n: int) -> "Partition":
        return cls(np.arange(n), np.ones(n, dtype=np.int64))

    @property
    def n_nodes(self) -> int:
        return len(self.assign)

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)

    def indicator(self) -> sp.csr_matrix:
        """The 0/1 matrix P_hat (nodes x clusters)."""
        n = self.n_nodes
        return sp.csr_matrix((np.ones(n), (np.arange(n), self.assign)),
                             shape=(n, self.n_clusters))

    def matrix(self) -> sp.csr_matrix:
        """The normalized partition matrix P = P_hat C^{-1/2}."""
        n = self.n_nodes
        vals = 1.0 / np.sqrt(self.sizes[self.assign])
        return sp.csr_matrix((vals, (np.arange(n), self.assign)),
                             shape=(n, self.n_clusters))

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assign == j)

    def then(self, coarser: "Partition") -> "Partition":
        """Compose with a partition of this partition's clusters."""
        return Partition.from_assign(coarser.assign[self.assign])


@dataclass
class CoarsenConfig:
    method: str = "vn"
    ratio: float = 0.5
    jc_test_vectors: int = 10
    jc_relaxation_sweeps: int = 20
    kron_regularization: float = 0.0
    variation_test_vectors: int = 10
    variation_sweeps: int = 10
    max_cliques: int = 200_000
    seed: int = 0

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"unknown coarsening method {self.method!r}; choose from {METHODS}")
        if not 0 < self.ratio <= 1:
            raise ValueError(f"coarsening ratio must be in (0, 1], got {self.ratio}")
        if self.jc_test_vectors < 1:
            raise ValueError("jc_test_vectors must be >= 1")


@dataclass
class CoarsenResult:
    coarse_graph: Graph
    partition: Partition
    coarse_features: np.ndarray
    coarse_labels: np.ndarray
    achieved_ratio: float
    epsilon: float = float("nan")
    info: dict = field(default_factory=dict)


def _check_target(n, target_n):
    if not 1 <= target_n <= n:
        raise ValueError(f"target_n must lie in [1, {n}], got {target_n}")


# ----------------------------------------------------------------------------
# framework


def normalized_partition_apply(p: Partition, x) -> np.ndarray:
    """Pool node features into cluster features, X' = P^T X."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != p.n_nodes:
        raise ValueError(f"feature rows {x.shape[0]} != partition size {p.n_nodes}")
    out = np.zeros((p.n_clusters,) + x.shape[1:])
    np.add.at(out, p.assign, x)
    scale = 1.0 / np.sqrt(p.sizes)
    return out * scale.reshape((-1,) + (1,) * (x.ndim - 1))


def lift(p: Partition, xc) -> np.ndarray:
    """Map cluster values back to nodes, P X_c (the transpose of pooling)."""
    xc = np.asarray(xc, dtype=np.float64)
    if xc.shape[0] != p.n_clusters:
        raise ValueError(f"rows {xc.shape[0]} != cluster count {p.n_clusters}")
    scale = 1.0 / np.sqrt(p.sizes[p.assign])
    return xc[p.assign] * scale.reshape((-1,) + (1,) * (xc.ndim - 1))


def coarsen_labels(p: Partition, y, num_classes=None, known=None) -> np.ndarray:
    """Majority label per cluster; ties go to the smallest class.

    If `known` (bool mask over nodes) is given, only those nodes vote and
    clusters without a voting member get label -1.
    """
    y = np.asarray(y, dtype=np.int64)
    if y.shape[0] != p.n_nodes:
        raise ValueError(f"label count {y.shape[0]} != partition size {p.n_nodes}")
    k = int(num_classes if num_classes is not None else (y.max() + 1 if len(y) else 0))
    voters = np.ones(len(y), bool) if known is None else np.asarray(known, bool) & (y >= 0)
    counts = np.zeros((p.n_clusters, max(k, 1)), dtype=np.int64)
    np.add.at(counts, (p.assign[voters], y[voters]), 1)
    out = counts.argmax(axis=1)
    if known is not None:
        out[counts.sum(axis=1) == 0] = -1
    return out


def build_coarse_graph(g: Graph, p: Partition) -> Graph:
    """Super-edge weight = summed weight of original edges between two clusters."""
    if p.n_nodes != g.n:
        raise ValueError(f"partition covers {p.n_nodes} nodes, graph has {g.n}")
    ph = p.indicator()
    return Graph((ph.T @ g.adj @ ph).tocsr())


# ----------------------------------------------------------------------------
# test vectors


def smoothed_test_vectors(g: Graph, k: int, sweeps: int, rng, omega=0.5) -> np.ndarray:
    """Random vectors smoothed by damped Jacobi sweeps on L x = 0, max-normalized."""
    x = rng.uniform(-1.0, 1.0, size=(g.n, k))
    d = g.weighted_degree()
    inv = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)[:, None]
    active = (d > 0)[:, None]
    for _ in range(sweeps):
        x = np.where(active, (1 - omega) * x + omega * inv * (g.adj @ x), x)
    scale = np.abs(x).max(axis=0)
    scale[scale == 0] = 1.0
    return x / scale


def variation_epsilon(g: Graph, p: Partition, test_vectors) -> float:
    """Largest relative L-norm of the part of the test vectors lost by the partition."""
    lap = laplacian(g)
    a = np.asarray(test_vectors)
    resid = a - lift(p, normalized_partition_apply(p, a))
    num = np.einsum("ij,ij->j", resid, lap @ resid)
    den = np.einsum("ij,ij->j", a, lap @ a)
    ok = den > 1e-12
    if not ok.any():
        return 0.0
    return float(np.sqrt(np.clip(num[ok], 0, None) / den[ok]).max())


# ----------------------------------------------------------------------------
# local variation (vn / vc / ve)


def _set_cost(adj: sp.csr_matrix, deg, a, nodes) -> float:
    nodes = np.asarray(nodes)
    k = len(nodes)
    if k == 2:
        # closed form of the general expression for a single edge
        diff = a[nodes[0]] - a[nodes[1]]
        return float((deg[nodes[0]] + deg[nodes[1]]) * (diff @ diff) / 2)
    w = adj[nodes][:, nodes].toarray()
    lap = np.diag(2 * deg[nodes] - w.sum(axis=0)) - w
    b = a[nodes] - a[nodes].mean(axis=0)
    return float(np.linalg.norm(b.T @ lap @ b)) / (k - 1)


def maximal_cliques(g: Graph, limit=None):
    """Bron-Kerbosch with pivoting over a degeneracy ordering.

    Yields each maximal clique as a sorted tuple. Stops after `limit` cliques.
    """
    nbrs = [set(g.neighbors(v).tolist()) for v in range(g.n)]
    # degeneracy ordering by repeated min-degree removal
    deg = np.array([len(s) for s in nbrs])
    buckets = {}
    for v in range(g.n):
        buckets.setdefault(deg[v], set()).add(v)
    removed = np.zeros(g.n, bool)
    order = []
    cur = deg.copy()
    for _ in range(g.n):
        d = min(k for k, b in buckets.items() if b)
        v = min(buckets[d])
        buckets[d].discard(v)
        removed[v] = True
        order.append(v)
        for u in nbrs[v]:
            if not removed[u]:
                buckets[cur[u]].discard(u)
                cur[u] -= 1
                buckets.setdefault(cur[u], set()).add(u)
    pos = np.empty(g.n, dtype=np.int64)
    pos[order] = np.arange(g.n)

    count = 0

    def expand(r, p, x):
        nonlocal count
        if not p and not x:
            count += 1
            yield tuple(sorted(r))
            return
        pivot = max(p | x, key=lambda u: (len(nbrs[u] & p), -u))
        for v in sorted(p - nbrs[pivot]):
            yield from expand(r | {v}, p & nbrs[v], x & nbrs[v])
            p = p - {v}
            x = x | {v}

    for v in order:
        later = {u for u in nbrs[v] if pos[u] > pos[v]}
        earlier = {u for u in nbrs[v] if pos[u] < pos[v]}
        for c in expand({v}, later, earlier):
            yield c
            if limit is not None and count >= limit:
                return


def _candidate_sets(g: Graph, family: str, max_cliques: int):
    if family == "edge":
        u, v, _ = g.edges()
        return [(int(a), int(b)) for a, b in zip(u, v)]
    if family == "neighborhood":
        return [tuple([v] + [int(u) for u in g.neighbors(v)])
                for v in range(g.n) if g.degree()[v] > 0]
    if family == "clique":
        sets = [c for c in maximal_cliques(g, limit=max_cliques) if len(c) > 1]
        if len(sets) >= max_cliques:
            log.warning("clique enumeration capped at %d maximal cliques", max_cliques)
        return sets
    raise ValueError(f"unknown candidate family {family!r}")


def _variation_level(g: Graph, family, target_n, a, max_cliques) -> Partition:
    """One level of greedy contraction of lowest-cost candidate sets."""
    deg = g.weighted_degree()
    adj = g.adj
    need = g.n - target_n
    heap = []
    for sid, c in enumerate(_candidate_sets(g, family, max_cliques)):
        heap.append((_set_cost(adj, deg, a, c), min(c), sid, c))
    heapq.heapify(heap)
    marked = np.zeros(g.n, bool)
    assign = np.arange(g.n)
    while heap and need > 0:
        cost, _, sid, c = heapq.heappop(heap)
        free = tuple(v for v in c if not marked[v])
        if len(free) < len(c):
            if len(free) > 1:
                heapq.heappush(heap, (_set_cost(adj, deg, a, free), min(free), sid, free))
            continue
        if len(c) - 1 > need:
            c = c[:need + 1]
        assign[list(c)] = min(c)
        marked[list(c)] = True
        need -= len(c) - 1
    return Partition.from_assign(assign)


def _multilevel(g: Graph, target_n, level_fn, a=None) -> tuple[Partition, int]:
    part = Partition.identity(g.n)
    cur = g
    levels = 0
    while cur.n > target_n:
        step = level_fn(cur, target_n, a)
        if step.n_clusters >= cur.n:
            log.warning("coarsening stalled at %d clusters (target %d)", cur.n, target_n)
            break
        levels += 1
        part = part.then(step)
        if a is not None:
            sizes = step.sizes[:, None]
            a = normalized_partition_apply(step, a) / np.sqrt(sizes)
        cur = build_coarse_graph(cur, step)
    return part, levels


def partition_variation(g: Graph, family: str, target_n: int, test_vectors=None,
                        sweeps: int = 10, seed: int = 0, max_cliques: int = 200_000,
                        return_levels=False):
    """Local-variation contraction over neighbourhoods, maximal cliques or edges.

    Candidate sets are scored by the variation of the smoothed test vectors
    inside the set, measured with a local Laplacian, and contracted in
    ascending cost order; sets that overlap already-contracted nodes are
    shrunk and rescored. Levels repeat until at most `target_n` clusters remain.
    """
    _check_target(g.n, target_n)
    if family not in ("neighborhood", "clique", "edge"):
        raise ValueError(f"unknown family {family!r}")
    if test_vectors is None or np.isscalar(test_vectors):
        k = 10 if test_vectors is None else int(test_vectors)
        test_vectors = smoothed_test_vectors(g, k, sweeps, np.random.default_rng(seed))

    def level(cur, tn, a):
        return _variation_level(cur, family, tn, a, max_cliques)

    part, levels = _multilevel(g, target_n, level, np.asarray(test_vectors, float))
    return (part, levels) if return_levels else part


# ----------------------------------------------------------------------------
# heavy edge matching


def _heavy_edge_level(g: Graph, target_n, _a=None) -> Partition:
    u, v, w = g.edges()
    deg = g.weighted_degree()
    score = w / np.maximum(deg[u], deg[v])
    order = np.lexsort((v, u, -score))
    need = g.n - target_n
    matched = np.zeros(g.n, bool)
    assign = np.arange(g.n)
    for e in order:
        if need == 0:
            break
        a, b = u[e], v[e]
        if matched[a] or matched[b]:
            continue
        matched[a] = matched[b] = True
        assign[b] = a
        need -= 1
    return Partition.from_assign(assign)


def partition_heavy_edge(g: Graph, target_n: int) -> Partition:
    """Repeated greedy matchings preferring edges whose endpoints have low degree.

    Edge preference is ``w_uv / max(deg u, deg v)``, so pairs on the periphery
    are contracted before pairs touching hubs.
    """
    _check_target(g.n, target_n)
    if g.num_edges == 0:
        if target_n < g.n:
            log.warning("heavy-edge matching on an edgeless graph: nothing to contract")
        return Partition.identity(g.n)
    part, _ = _multilevel(g, target_n, _heavy_edge_level)
    return part


# ----------------------------------------------------------------------------
# algebraic distance


def algebraic_distances(g: Graph, k: int, sweeps: int, seed: int = 0) -> np.ndarray:
    """Per-edge max_k |x_u - x_v| over Jacobi-smoothed test vectors (edges() order)."""
    x = smoothed_test_vectors(g, k, sweeps, np.random.default_rng(seed))
    u, v, _ = g.edges()
    return np.abs(x[u] - x[v]).max(axis=1)


def partition_algebraic_jc(g: Graph, target_n: int, cfg: CoarsenConfig | None = None) -> Partition:
    """Merge endpoints of edges in ascending algebraic distance until target_n clusters."""
    cfg = cfg or CoarsenConfig(method="jc")
    _check_target(g.n, target_n)
    if cfg.jc_test_vectors < 1:
        raise ValueError("jc_test_vectors must be >= 1")
    if target_n == g.n or g.num_edges == 0:
        return Partition.identity(g.n)
    u, v, _ = g.edges()
    dist = algebraic_distances(g, cfg.jc_test_vectors, cfg.jc_relaxation_sweeps, cfg.seed)
    order = np.lexsort((v, u, dist))
    parent = np.arange(g.n)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    clusters = g.n
    for e in order:
        if clusters <= target_n:
            break
        ra, rb = find(u[e]), find(v[e])
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
            clusters -= 1
    if clusters > target_n:
        log.warning("algebraic JC stalled at %d clusters (target %d)", clusters, target_n)
    return Partition.from_assign([find(a) for a in range(g.n)])


# ----------------------------------------------------------------------------
# Kron reduction


def kron_reduction(lap, keep, regularization: float = 0.0) -> np.ndarray:
    """Schur complement L_SS - L_SR (L_RR + reg I)^{-1} L_RS onto the kept nodes."""
    lap = sp.csr_matrix(lap, dtype=np.float64)
    n = lap.shape[0]
    keep = np.asarray(sorted(set(int(k) for k in keep)), dtype=np.int64)
    rest = np.setdiff1d(np.arange(n), keep)
    l_ss = lap[keep][:, keep].toarray()
    if len(rest) == 0:
        return l_ss
    l_rr = lap[rest][:, rest]
    l_rs = lap[rest][:, keep]
    if regularization == 0.0:
        ncomp, lab = csgraph.connected_components(l_rr, directed=False)
        touches = np.zeros(ncomp, bool)
        touches[lab[np.asarray(abs(l_rs).sum(axis=1)).ravel() > 0]] = True
        if not touches.all():
            bad = np.flatnonzero(~touches)[0]
            raise KronReductionError(rest[lab == bad].tolist())
    else:
        l_rr = l_rr + regularization * sp.identity(len(rest))
    solved = spla.splu(sp.csc_matrix(l_rr)).solve(l_rs.toarray())
    return l_ss - l_rs.T.toarray() @ solved


def power_iteration(mat, rng, max_iter: int = 1000, tol: float = 1e-10) -> np.ndarray:
    """Dominant eigenvector of a symmetric PSD matrix (unit norm)."""
    n = mat.shape[0]
    if n == 1:
        return np.ones(1)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = mat @ x
        norm = np.linalg.norm(y)
        if norm == 0:
            return x
        y /= norm
        lam_new = float(y @ (mat @ y))
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)) and np.linalg.norm(y - x) < 1e-6:
            x = y
            break
        x, lam = y, lam_new
    return x


def _kron_select(lap, rng) -> np.ndarray:
    """Per connected component, keep nodes with nonnegative entries of the top eigenvector."""
    lap = sp.csr_matrix(lap)
    ncomp, lab = csgraph.connected_components(abs(lap) > 1e-12, directed=False)
    score = np.zeros(lap.shape[0])
    for c in range(ncomp):
        idx = np.flatnonzero(lab == c)
        block = lap[idx][:, idx]
        vec = power_iteration(block.toarray() if len(idx) < 400 else block, rng)
        big = np.argmax(np.abs(vec))
        score[idx] = vec * (1.0 if vec[big] >= 0 else -1.0)
    return score


def partition_kron(g: Graph, target_n: int, cfg: CoarsenConfig | None = None,
                   return_selected=False):
    """Kron-reduction partition.

    Kept vertices are chosen level by level from the sign of the largest
    Laplacian eigenvector (power iteration, per component) and the Laplacian
    is Kron-reduced onto them. Each eliminated vertex joins the kept
    neighbour it is most strongly connected to, or the nearest kept vertex by
    BFS when it has no kept neighbour.
    """
    cfg = cfg or CoarsenConfig(method="kron")
    _check_target(g.n, target_n)
    rng = np.random.default_rng(cfg.seed)
    selected = np.arange(g.n)
    lap = laplacian(g)
    while len(selected) > target_n:
        score = _kron_select(lap, rng)
        keep = np.flatnonzero(score >= 0)
        if len(keep) < target_n:
            keep = np.sort(np.lexsort((np.arange(len(score)), -score))[:target_n])
        if len(keep) == len(selected):
            log.warning("Kron selection stalled at %d nodes (target %d)", len(selected), target_n)
            break
        lap = sp.csr_matrix(kron_reduction(lap, keep, cfg.kron_regularization))
        lap.data[np.abs(lap.data) < 1e-12] = 0
        lap.eliminate_zeros()
        selected = selected[keep]
    part = partition_from_selection(g, selected)
    return (part, selected) if return_selected else part


def partition_from_selection(g: Graph, selected) -> Partition:
    """Assign every node to a selected node: strongest selected neighbour, else BFS-nearest."""
    selected = np.asarray(selected, dtype=np.int64)
    is_sel = np.zeros(g.n, bool)
    is_sel[selected] = True
    owner = np.full(g.n, -1, dtype=np.int64)
    owner[selected] = selected
    for v in np.flatnonzero(~is_sel):
        nb = g.neighbors(v)
        w = g.neighbor_weights(v)
        m = is_sel[nb]
        if m.any():
            cand, cw = nb[m], w[m]
            owner[v] = cand[np.lexsort((cand, -cw))[0]]
    # multi-source BFS for the rest; frontier processed in ascending owner order
    queue = deque(sorted(np.flatnonzero(owner >= 0), key=lambda a: (owner[a], a)))
    dist = np.where(owner >= 0, 0, -1)
    while queue:
        a = queue.popleft()
        for b in g.neighbors(a):
            if owner[b] < 0:
                owner[b] = owner[a]
                dist[b] = dist[a] + 1
                queue.append(b)
    orphans = np.flatnonzero(owner < 0)
    if len(orphans):
        log.warning("%d nodes unreachable from any kept node become singleton clusters",
                    len(orphans))
        owner[orphans] = orphans
    return Partition.from_assign(owner)


# ----------------------------------------------------------------------------
# dispatcher


def partition(g: Graph, cfg: CoarsenConfig, target_n: int | None = None) -> Partition:
    target_n = max(1, int(round(cfg.ratio * g.n))) if target_n is None else target_n
    m = cfg.method
    if m in ("vn", "vc", "ve"):
        family = {"vn": "neighborhood", "vc": "clique", "ve": "edge"}[m]
        return partition_variation(g, family, target_n, cfg.variation_test_vectors,
                                   cfg.variation_sweeps, cfg.seed, cfg.max_cliques)
    if m == "he":
        return partition_heavy_edge(g, target_n)
    if m == "jc":
        return partition_algebraic_jc(g, target_n, cfg)
    return partition_kron(g, target_n, cfg)


def coarsen(g: Graph, x, y, cfg: CoarsenConfig, num_classes=None, known=None) -> CoarsenResult:
    """Partition the graph with cfg.method and pool graph, features and labels.

    `known` restricts label voting to a node mask (e.g. the labelled training
    nodes); clusters without a voter get label -1.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != g.n:
        raise ValueError(f"feature rows {x.shape[0]} != node count {g.n}")
    target_n = max(1, int(round(cfg.ratio * g.n)))
    p = Partition.identity(g.n) if target_n >= g.n else partition(g, cfg, target_n)
    achieved = p.n_clusters / g.n
    if abs(achieved - cfg.ratio) > 0.05 * cfg.ratio:
        log.warning("%s coarsening reached ratio %.3f (requested %.3f)",
                    cfg.method, achieved, cfg.ratio)
    tv = smoothed_test_vectors(g, cfg.variation_test_vectors, cfg.variation_sweeps,
                               np.random.default_rng(cfg.seed))
    return CoarsenResult(
        coarse_graph=build_coarse_graph(g, p),
        partition=p,
        coarse_features=normalized_partition_apply(p, x),
        coarse_labels=coarsen_labels(p, y, num_classes, known),
        achieved_ratio=achieved,
        epsilon=variation_epsilon(g, p, tv),
        info={"method": cfg.method, "target_n": target_n},
    )
