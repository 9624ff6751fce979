"""Edge sparsification.

All methods keep the node set (and so node features/labels) and return a
subgraph with ``round(s * |E|)`` edges. Random Edge and Random Node Edge
sample; Local Degree and Local Similarity rank neighbours per node with a
``ceil(deg^alpha)`` rule; Scan ranks globally by SCAN similarity; Forest
Fire ranks by traversal frequency.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .graph import Graph

log = logging.getLogger(__name__)

METHODS = ("re", "rne", "degree", "simi", "fire", "scan")


@dataclass
class SparsifyConfig:
    method: str = "rne"
    ratio: float = 0.5
    fire_burn_prob: float = 0.6
    fire_burnt_ratio: float = 5.0
    seed: int = 0

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"unknown sparsification method {self.method!r}; choose from {METHODS}")
        if not 0 < self.ratio <= 1:
            raise ValueError(f"sparsification ratio must be in (0, 1], got {self.ratio}")
        if not 0 < self.fire_burn_prob < 1:
            raise ValueError("fire_burn_prob must be in (0, 1)")


def edge_budget(m: int, s: float) -> int:
    return int(math.floor(s * m + 0.5))


# ----------------------------------------------------------------------------
# similarity scores


def edge_similarity(g: Graph, u: int, v: int, kind: str = "jaccard") -> float:
    """Jaccard (open neighbourhoods) or SCAN (closed neighbourhoods) similarity of an edge."""
    if not g.has_edge(u, v):
        raise ValueError(f"({u}, {v}) is not an edge")
    nu, nv = set(g.neighbors(u).tolist()), set(g.neighbors(v).tolist())
    if kind == "jaccard":
        union = nu | nv
        return len(nu & nv) / len(union) if union else 0.0
    if kind == "scan":
        nu.add(u)
        nv.add(v)
        return len(nu & nv) / math.sqrt(len(nu) * len(nv))
    raise ValueError(f"unknown similarity {kind!r}")


def _common_neighbors(g: Graph) -> np.ndarray:
    """|N(u) & N(v)| for every edge, in edges() order."""
    u, v, _ = g.edges()
    b = g.adj.copy()
    b.data[:] = 1.0
    b2 = (b @ b).tocsr()
    return np.asarray(b2[u, v]).ravel()


def jaccard_scores(g: Graph) -> np.ndarray:
    u, v, _ = g.edges()
    deg = g.degree()
    common = _common_neighbors(g)
    # u and v are in each other's open neighbourhood but not in their own
    union = deg[u] + deg[v] - common
    return np.divide(common, union, out=np.zeros_like(common), where=union > 0)


def scan_scores(g: Graph) -> np.ndarray:
    u, v, _ = g.edges()
    deg = g.degree()
    common = _common_neighbors(g) + 2
    return common / np.sqrt((deg[u] + 1.0) * (deg[v] + 1.0))


# ----------------------------------------------------------------------------
# forest fire


def forest_fire_traversal(g: Graph, seed: int, p: float = 0.6, burnt_ratio: float = 5.0) -> np.ndarray:
    """Per-edge traversal counts from repeated forest-fire burns.

    Each burn starts at a random node and spreads from every burning node to
    a Geometric-sized random subset of its not-yet-burnt neighbours (mean
    1/(1-p)). Burns repeat until every node has been visited and the total
    number of traversals reaches ``burnt_ratio * |E|``.
    """
    if not 0 < p < 1:
        raise ValueError("burn probability must be in (0, 1)")
    rng = np.random.default_rng(seed)
    u, _, _ = g.edges()
    m = len(u)
    # edge id for each CSR slot
    slot_edge = np.empty(g.adj.nnz, dtype=np.int64)
    rows = np.repeat(np.arange(g.n), np.diff(g.adj.indptr))
    upper = g.adj.indices > rows
    slot_edge[upper] = np.arange(m)
    key = np.minimum(rows, g.adj.indices) * g.n + np.maximum(rows, g.adj.indices)
    ukey = key[upper]
    slot_edge[~upper] = np.searchsorted(ukey, key[~upper])

    counts = np.zeros(m, dtype=np.int64)
    visited = np.zeros(g.n, bool)
    total = 0
    indptr = g.adj.indptr
    indices = g.adj.indices
    while not visited.all() or (m and total < burnt_ratio * m):
        unvisited = np.flatnonzero(~visited)
        start = rng.choice(unvisited) if len(unvisited) else rng.integers(g.n)
        burnt = {int(start)}
        visited[start] = True
        queue = deque([int(start)])
        while queue:
            a = queue.popleft()
            lo, hi = indptr[a], indptr[a + 1]
            cand = [s for s in range(lo, hi) if int(indices[s]) not in burnt]
            if not cand:
                continue
            k = min(len(cand), int(rng.geometric(1 - p)))
            for s in rng.choice(cand, size=k, replace=False):
                b = int(indices[s])
                counts[slot_edge[s]] += 1
                total += 1
                burnt.add(b)
                visited[b] = True
                queue.append(b)
        if m == 0 and visited.all():
            break
    return counts


# ----------------------------------------------------------------------------
# local ranking (degree / similarity)


def _local_thresholds(g: Graph, rank_key) -> np.ndarray:
    """Smallest exponent alpha at which each edge enters the ceil(deg^alpha) rule.

    `rank_key` has 2m entries: the first m rank v from u's side, the last m
    rank u from v's side (higher = ranked first). An edge ranked
    r-th (1-based) at an endpoint of degree d is kept there once
    ``d^alpha > r - 1``; rank 1 is always kept (threshold -inf).
    """
    u, v, _ = g.edges()
    m = len(u)
    deg = g.degree()
    thresh = np.full(m, np.inf)
    ends = np.concatenate([u, v])
    other = np.concatenate([v, u])
    eid = np.concatenate([np.arange(m), np.arange(m)])
    key = np.asarray(rank_key, dtype=float)
    if len(key) != 2 * m:
        raise ValueError("rank_key must hold one entry per edge endpoint (2m)")
    order = np.lexsort((other, -key, ends))
    ends_s = ends[order]
    start = np.searchsorted(ends_s, ends_s, side="left")
    rank = np.arange(len(order)) - start + 1
    d = deg[ends_s].astype(float)
    with np.errstate(divide="ignore"):
        t = np.where(rank == 1, -np.inf, np.log(rank - 1.0) / np.log(np.maximum(d, 2.0)))
    np.minimum.at(thresh, eid[order], t)
    return thresh


def _keep_top(score_low_first, budget, forced=None):
    """Boolean mask of the `budget` edges with smallest score (ties by edge index)."""
    m = len(score_low_first)
    order = np.lexsort((np.arange(m), score_low_first))
    keep = np.zeros(m, bool)
    keep[order[:budget]] = True
    if forced is not None:
        keep |= forced
    return keep


def local_degree_mask(g: Graph, budget: int) -> np.ndarray:
    u, v, _ = g.edges()
    deg = g.degree()
    # rank neighbour by its own degree: from u's side the key is deg[v]
    key = np.concatenate([deg[v], deg[u]]).astype(float)
    thresh = _local_thresholds(g, key)
    return _keep_top(thresh, budget, forced=np.isneginf(thresh))


def local_similarity_mask(g: Graph, budget: int) -> np.ndarray:
    sim = jaccard_scores(g)
    thresh = _local_thresholds(g, np.concatenate([sim, sim]))
    return _keep_top(thresh, budget, forced=np.isneginf(thresh))


def random_node_edge_mask(g: Graph, budget: int, rng) -> np.ndarray:
    """Repeatedly pick a node uniformly, then one of its unpicked edges uniformly."""
    u, v, _ = g.edges()
    m = len(u)
    ends = np.concatenate([u, v])
    eid = np.concatenate([np.arange(m), np.arange(m)])
    order = np.argsort(ends, kind="stable")
    inc_ptr = np.concatenate([[0], np.cumsum(np.bincount(ends, minlength=g.n))])
    incident = [list(eid[order[inc_ptr[a]:inc_ptr[a + 1]]]) for a in range(g.n)]
    keep = np.zeros(m, bool)
    pool = [a for a in range(g.n) if incident[a]]
    where = {a: i for i, a in enumerate(pool)}
    chosen = 0
    while chosen < budget and pool:
        a = pool[int(rng.integers(len(pool)))]
        lst = incident[a]
        j = int(rng.integers(len(lst)))
        e = lst[j]
        lst[j] = lst[-1]
        lst.pop()
        if not keep[e]:
            keep[e] = True
            chosen += 1
        if not lst:
            i = where.pop(a)
            last = pool.pop()
            if last != a:
                pool[i] = last
                where[last] = i
    return keep


def sparsify_mask(g: Graph, cfg: SparsifyConfig) -> np.ndarray:
    """Boolean mask over `g.edges()` of the edges to keep."""
    m = g.num_edges
    budget = edge_budget(m, cfg.ratio)
    if budget >= m:
        return np.ones(m, bool)
    rng = np.random.default_rng(cfg.seed)
    meth = cfg.method
    if meth == "re":
        keep = np.zeros(m, bool)
        keep[rng.choice(m, size=budget, replace=False)] = True
    elif meth == "rne":
        keep = random_node_edge_mask(g, budget, rng)
    elif meth == "degree":
        keep = local_degree_mask(g, budget)
    elif meth == "simi":
        keep = local_similarity_mask(g, budget)
    elif meth == "scan":
        keep = _keep_top(-scan_scores(g), budget)
    else:
        counts = forest_fire_traversal(g, cfg.seed, cfg.fire_burn_prob, cfg.fire_burnt_ratio)
        tie = rng.permutation(m)
        order = np.lexsort((tie, -counts))
        keep = np.zeros(m, bool)
        keep[order[:budget]] = True
    if keep.sum() != budget:
        log.info("%s kept %d edges for a budget of %d", meth, keep.sum(), budget)
    return keep


def sparsify(g: Graph, cfg: SparsifyConfig) -> Graph:
    """Subgraph on the same node set keeping about ``cfg.ratio`` of the edges.

    Nodes left without edges (possible for rne) stay in the graph with degree 0.
    """
    return g.edge_subgraph(sparsify_mask(g, cfg))
