"""Attack and trigger statistics.

ASR / clean accuracy, what coarsening does to triggers (merge ratio m, label
change ratio l, feature distance d), what sparsification does to them
(prune ratio, surviving poison ratio), and per-target node profiles.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from . import gnn
from .graph import Graph, two_hop_density


class MetricError(ValueError):
    """Metric undefined for the given inputs (e.g. empty node set)."""


@dataclass
class TriggerCoarsenStats:
    m: float
    l: float
    d: float


@dataclass
class TriggerSparsifyStats:
    prune_ratio: float
    post_spar_poison_ratio: float
    prune_ratio_path: float


@dataclass
class NodeProfile:
    node: int
    outcome: str
    degree: int
    log_degree: float
    two_hop_density: float
    label: int

    def as_dict(self):
        return asdict(self)


def eligible_targets(targets, y, target_label) -> np.ndarray:
    """Targets whose true label is not already the attack's target class."""
    targets = np.asarray(targets, dtype=np.int64)
    return targets[np.asarray(y)[targets] != target_label]


def attack_success_rate(model, g: Graph, x, targets, target_label: int, y) -> float:
    """Fraction of eligible targets predicted as `target_label` on the triggered graph."""
    elig = eligible_targets(targets, y, target_label)
    if len(elig) == 0:
        raise MetricError("no target node with a true label different from the target class")
    pred = gnn.predict(model, g, x, elig)
    return float((pred == target_label).mean())


def clean_accuracy(model, g: Graph, x, nodes, y) -> float:
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        raise MetricError("clean test set is empty")
    return float((gnn.predict(model, g, x, nodes) == np.asarray(y)[nodes]).mean())


def trigger_coarsen_stats(partition, poisoned, coarse_labels, coarse_features) -> TriggerCoarsenStats:
    """m, l (percent) and d for the triggers of a poisoned dataset.

    m: triggers whose t nodes fall into fewer than t clusters.
    l: poison nodes (original label != target) whose cluster label equals the
       original label.
    d: mean over poison nodes of || mean of the trigger nodes' cluster
       features - attach (poison) node's cluster features ||.
    """
    assign = np.asarray(partition.assign)
    if len(assign) != poisoned.graph.n:
        raise ValueError(f"partition covers {len(assign)} nodes, poisoned graph has {poisoned.graph.n}")
    xc = np.asarray(coarse_features)
    yc = np.asarray(coarse_labels)
    k = partition.n_clusters
    if xc.shape[0] != k or yc.shape[0] != k:
        raise ValueError("coarse features/labels do not match the partition's cluster count")
    tn = poisoned.trigger_nodes
    t = tn.shape[1]
    tc = assign[tn]
    distinct = np.array([len(np.unique(r)) for r in tc])
    m = 100.0 * float((distinct < t).mean()) if len(tc) else 0.0

    pc = assign[poisoned.poison_nodes]
    elig = poisoned.original_labels != poisoned.target_label
    if elig.any():
        l = 100.0 * float((yc[pc[elig]] == poisoned.original_labels[elig]).mean())
    else:
        l = float("nan")

    diff = xc[tc].mean(axis=1) - xc[pc]
    d = float(np.linalg.norm(diff, axis=1).mean()) if len(pc) else 0.0
    return TriggerCoarsenStats(m, l, d)


def trigger_sparsify_stats(g_spar: Graph, poisoned) -> TriggerSparsifyStats:
    """Prune ratio and surviving poison ratio (percent) after sparsification.

    prune_ratio: attach edge missing. prune_ratio_path: poison node no longer
    path-connected to any of its trigger nodes. post_spar_poison_ratio: poison
    nodes still connected to at least one of their trigger nodes, divided by
    the number of non-trigger nodes.
    """
    if g_spar.n != poisoned.graph.n:
        raise ValueError(f"sparsified graph has {g_spar.n} nodes, poisoned graph {poisoned.graph.n}")
    p = poisoned.poison_nodes
    if len(p) == 0:
        return TriggerSparsifyStats(0.0, 0.0, 0.0)
    att = poisoned.attach_nodes
    a = g_spar.adj
    attached = np.asarray(a[p, att]).ravel() > 0
    _, comp = connected_components(a, directed=False)
    linked = (comp[poisoned.trigger_nodes] == comp[p][:, None]).any(axis=1)
    n_base = g_spar.n - poisoned.trigger_nodes.size
    return TriggerSparsifyStats(
        prune_ratio=100.0 * float((~attached).mean()),
        post_spar_poison_ratio=100.0 * float(linked.sum()) / n_base,
        prune_ratio_path=100.0 * float((~linked).mean()),
    )


def poisoned_node_profiles(g_clean: Graph, y, targets, predictions, target_label: int):
    """One NodeProfile per target; `predictions` is aligned with `targets`.

    Structure is measured on the clean graph, before any trigger is attached.
    """
    targets = np.asarray(targets, dtype=np.int64)
    predictions = np.asarray(predictions)
    if len(predictions) != len(targets):
        raise ValueError("predictions must align with targets")
    deg = g_clean.degree()
    y = np.asarray(y)
    out = []
    for v, pr in zip(targets, predictions):
        out.append(NodeProfile(
            node=int(v),
            outcome="attack_success" if pr == target_label else "attack_fail",
            degree=int(deg[v]),
            log_degree=float(np.log1p(deg[v])),
            two_hop_density=float(two_hop_density(g_clean, int(v))),
            label=int(y[v]),
        ))
    return out


def profile_histogram(profiles, field: str = "degree", bins=10):
    """Histogram rows (outcome, bin_lo, bin_hi, count) over shared bin edges."""
    vals = np.array([getattr(p, field) for p in profiles], dtype=float)
    if len(vals) == 0:
        return []
    edges = np.histogram_bin_edges(vals, bins=bins)
    rows = []
    for outcome in ("attack_success", "attack_fail"):
        sel = np.array([p.outcome == outcome for p in profiles])
        counts, _ = np.histogram(vals[sel], bins=edges)
        rows.extend((outcome, float(lo), float(hi), int(c))
                    for lo, hi, c in zip(edges[:-1], edges[1:], counts))
    return rows
