"""Experiment matrix: poison -> defend -> reduce -> train -> evaluate.

Each run works inductively: the seeded split decides target and clean-test
nodes, the attacker and the model only see the subgraph induced on the
remaining (training) nodes, and evaluation happens on the full clean graph,
with triggers attached to the target nodes for ASR.

Configs are INI files (see `load_config`); every list-valued key spans one
axis of the matrix.
"""
from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from itertools import product
from pathlib import Path

import numpy as np

from . import attack as atk
from . import coarsen as crs
from . import gnn, metrics
from . import sparsify as spr
from .graph import Dataset, Graph, generate_sbm, load_cora, load_dataset, split_dataset

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("dataset", "reduction_method", "ratio", "attack", "defense", "model", "seed",
                  "asr", "acc", "m", "l", "d", "prune_ratio", "spar_rho", "achieved_ratio",
                  "runtime_s", "memory_proxy_bytes")
INT_COLUMNS = ("seed", "memory_proxy_bytes")
STR_COLUMNS = ("dataset", "reduction_method", "attack", "defense", "model")
PROFILE_COLUMNS = ("dataset", "reduction_method", "ratio", "attack", "defense", "model", "seed",
                   "node", "outcome", "degree", "log_degree", "two_hop_density", "label")


@dataclass(frozen=True)
class Reduction:
    kind: str = "none"          # none | coarsen | sparsify
    method: str = "none"
    ratio: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "Reduction":
        """'none', 'coarsen:vn:0.5' or 'sparsify:rne:0.7'."""
        parts = [p.strip().lower() for p in text.split(":")]
        if parts == ["none"]:
            return cls()
        if len(parts) != 3 or parts[0] not in ("coarsen", "sparsify"):
            raise ValueError(f"bad reduction {text!r}; expected none, coarsen:METHOD:C or "
                             "sparsify:METHOD:S")
        methods = crs.METHODS if parts[0] == "coarsen" else spr.METHODS
        if parts[1] not in methods:
            raise ValueError(f"unknown {parts[0]} method {parts[1]!r}")
        ratio = float(parts[2])
        if not 0 < ratio <= 1:
            raise ValueError(f"reduction ratio must be in (0, 1], got {ratio}")
        return cls(parts[0], parts[1], ratio)


@dataclass(frozen=True)
class Defense:
    mode: str = "none"          # none | prune | prune_ld
    threshold: float = 0.1

    @classmethod
    def parse(cls, text: str) -> "Defense":
        parts = [p.strip().lower() for p in text.split(":")]
        if parts == ["none"]:
            return cls()
        if parts[0] not in ("prune", "prune_ld") or len(parts) > 2:
            raise ValueError(f"bad defense {text!r}; expected none, prune[:T] or prune_ld[:T]")
        return cls(parts[0], float(parts[1]) if len(parts) == 2 else 0.1)

    @property
    def label(self) -> str:
        return "none" if self.mode == "none" else f"{self.mode}:{self.threshold:g}"


@dataclass
class ExperimentConfig:
    dataset: str = "sbm"
    edges: str | None = None
    features: str | None = None
    labels: str | None = None
    cora_dir: str | None = None
    sbm_blocks: tuple = (100, 100, 100)
    sbm_p_in: float = 0.05
    sbm_p_out: float = 0.005
    sbm_dim: int = 32
    sbm_seed: int = 0
    reductions: list = field(default_factory=lambda: [Reduction()])
    attacks: list = field(default_factory=lambda: ["none"])
    defenses: list = field(default_factory=lambda: [Defense()])
    architectures: list = field(default_factory=lambda: ["gcn"])
    seeds: list = field(default_factory=lambda: [0])
    attack: atk.AttackConfig = field(default_factory=atk.AttackConfig)
    train: gnn.TrainConfig = field(default_factory=gnn.TrainConfig)
    hidden_dim: int = 64
    heads: int = 1
    dropout: float = 0.5
    reduce_before_defense: bool = False
    output: str = "report.csv"

    def __post_init__(self):
        if not self.architectures or not self.seeds:
            raise ValueError("need at least one architecture and one seed")
        for a in self.attacks:
            if a != "none" and a not in atk.ATTACKS:
                raise ValueError(f"unknown attack {a!r}")
        for a in self.architectures:
            if a not in gnn.KINDS:
                raise ValueError(f"unknown architecture {a!r}")

    def architecture(self, kind: str) -> gnn.Architecture:
        return gnn.Architecture(kind, hidden_dim=self.hidden_dim, heads=self.heads,
                                dropout=self.dropout)

    def load_data(self) -> Dataset:
        if self.cora_dir:
            ds = load_cora(self.cora_dir)
            ds.name = self.dataset
            return ds
        if self.edges:
            ds = load_dataset(self.edges, self.features, self.labels, name=self.dataset)
            ds.name = self.dataset
            return ds
        ds = generate_sbm(self.sbm_blocks, self.sbm_p_in, self.sbm_p_out, self.sbm_dim,
                          self.sbm_seed)
        ds.name = self.dataset
        return ds


def _split_list(text):
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI config.

    Sections: [dataset] (name, then edges/features/labels, cora_dir, or sbm_* keys),
    [matrix] (reductions, attacks, defenses, architectures, seeds),
    [attack] (AttackConfig fields), [train] (TrainConfig fields),
    [model] (hidden_dim, heads, dropout), [output] (path).
    `overrides` maps "section.key" to a string value and wins over the file.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    for key, val in (overrides or {}).items():
        sec, _, k = key.partition(".")
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp.set(sec, k, str(val))
    base = Path(path).parent if path is not None else Path(".")

    def get(sec, key, default=None):
        return cp.get(sec, key, fallback=default) if cp.has_section(sec) else default

    kw = {}
    kw["dataset"] = get("dataset", "name", "sbm")
    for key in ("edges", "features", "labels", "cora_dir"):
        v = get("dataset", key)
        if v:
            kw[key] = str((base / v) if not Path(v).is_absolute() else Path(v))
    if get("dataset", "sbm_blocks"):
        kw["sbm_blocks"] = tuple(int(b) for b in _split_list(get("dataset", "sbm_blocks")))
    for key, typ in (("sbm_p_in", float), ("sbm_p_out", float), ("sbm_dim", int),
                     ("sbm_seed", int)):
        if get("dataset", key) is not None:
            kw[key] = typ(get("dataset", key))
    if get("matrix", "reductions"):
        kw["reductions"] = [Reduction.parse(r) for r in _split_list(get("matrix", "reductions"))]
    if get("matrix", "attacks"):
        kw["attacks"] = [a.lower() for a in _split_list(get("matrix", "attacks"))]
    if get("matrix", "defenses"):
        kw["defenses"] = [Defense.parse(d) for d in _split_list(get("matrix", "defenses"))]
    if get("matrix", "architectures"):
        kw["architectures"] = [a.lower() for a in _split_list(get("matrix", "architectures"))]
    if get("matrix", "seeds"):
        kw["seeds"] = [int(s) for s in _split_list(get("matrix", "seeds"))]
    if get("matrix", "reduce_before_defense"):
        kw["reduce_before_defense"] = cp.getboolean("matrix", "reduce_before_defense")
    kw["attack"] = _dataclass_from_section(atk.AttackConfig, cp, "attack")
    kw["train"] = _dataclass_from_section(gnn.TrainConfig, cp, "train")
    for key, typ in (("hidden_dim", int), ("heads", int), ("dropout", float)):
        if get("model", key) is not None:
            kw[key] = typ(get("model", key))
    if get("output", "path"):
        kw["output"] = get("output", "path")
    return ExperimentConfig(**kw)


def _dataclass_from_section(cls, cp, section):
    if not cp.has_section(section):
        return cls()
    kw = {}
    for f in fields(cls):
        if not cp.has_option(section, f.name):
            continue
        raw = cp.get(section, f.name)
        typ = f.type if isinstance(f.type, str) else f.type.__name__
        if "int" in typ:
            kw[f.name] = int(raw)
        elif "float" in typ:
            kw[f.name] = float(raw)
        else:
            kw[f.name] = raw
    return cls(**kw)


# ----------------------------------------------------------------------------
# memory proxy


def memory_proxy(g: Graph, x, arch: gnn.Architecture) -> int:
    """Bytes for float64 features, CSR adjacency (float64 data, int32 indices)
    and one float64 activation matrix per layer."""
    n = g.n
    d = x.shape[1]
    width = arch.hidden_dim * (arch.heads if arch.kind == "gat" else 1)
    nnz = g.adj.nnz
    return int(n * d * 8 + nnz * (8 + 4) + (n + 1) * 4 + arch.layers * n * width * 8)


# ----------------------------------------------------------------------------
# report rows


@dataclass
class ReportRow:
    dataset: str
    reduction_method: str
    ratio: float
    attack: str
    defense: str
    model: str
    seed: int
    asr: float | None = None
    acc: float | None = None
    m: float | None = None
    l: float | None = None
    d: float | None = None
    prune_ratio: float | None = None
    spar_rho: float | None = None
    achieved_ratio: float | None = None
    runtime_s: float | None = None
    memory_proxy_bytes: int | None = None
    prune_ratio_path: float | None = None
    error: str | None = None
    profiles: list = field(default_factory=list, repr=False)
    key: tuple = field(default=(), repr=False)

    def values(self) -> dict:
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


def _fmt(col, v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if col in INT_COLUMNS:
        return str(int(v))
    if col in STR_COLUMNS:
        return str(v)
    return f"{float(v):.4f}"


def _json_value(col, v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return None
    if col in INT_COLUMNS:
        return int(v)
    if col in STR_COLUMNS:
        return str(v)
    return round(float(v), 4)


def emit_report(rows, fmt: str = "csv", path="report.csv"):
    """Write rows as CSV (fixed header, 4-decimal floats, blanks for missing) or json-lines."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in rows:
                w.writerow([_fmt(c, getattr(r, c)) for c in REPORT_COLUMNS])
    elif fmt in ("json-lines", "jsonl"):
        with open(path, "w") as fh:
            for r in rows:
                fh.write(json.dumps({c: _json_value(c, getattr(r, c)) for c in REPORT_COLUMNS}))
                fh.write("\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path) -> list[dict]:
    """Parse a CSV or json-lines report back into dicts with typed values."""
    path = Path(path)
    text = path.read_text()
    if text.startswith("{") or path.suffix in (".jsonl", ".json"):
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    out = []
    for rec in csv.DictReader(text.splitlines()):
        row = {}
        for c in REPORT_COLUMNS:
            v = rec.get(c, "")
            if v == "":
                row[c] = None
            elif c in INT_COLUMNS:
                row[c] = int(v)
            elif c in STR_COLUMNS:
                row[c] = v
            else:
                row[c] = float(v)
        out.append(row)
    return out


def emit_profiles(rows, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_COLUMNS)
        for r in rows:
            for p in r.profiles:
                w.writerow([r.dataset, r.reduction_method, _fmt("ratio", r.ratio), r.attack,
                            r.defense, r.model, r.seed, p.node, p.outcome, p.degree,
                            f"{p.log_degree:.4f}", f"{p.two_hop_density:.4f}", p.label])
    return path


# ----------------------------------------------------------------------------
# one attacked training graph, shared by every cell with the same (seed, attack)


@dataclass
class _Prepared:
    split: object
    nodes: np.ndarray               # training-graph node ids in the full graph
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    known: np.ndarray               # bool mask of usable training labels
    val: np.ndarray                 # local ids
    poisoned: object = None
    trigger: object = None


def stage_seeds(seed: int) -> dict:
    """Independent per-stage seeds derived from the run seed alone, so cells that
    differ only in reduction/defense/architecture share splits and poisoning."""
    kids = np.random.SeedSequence(seed).spawn(5)
    names = ("split", "attack", "defense", "reduce", "train")
    return {k: int(s.generate_state(1)[0] % (2**31)) for k, s in zip(names, kids)}


def prepare(ds: Dataset, seed: int, attack: str, acfg: atk.AttackConfig) -> _Prepared:
    seeds = stage_seeds(seed)
    split = split_dataset(ds.graph, seeds["split"])
    nodes = split.train_pool()
    local = -np.ones(ds.graph.n, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    g = ds.graph.subgraph(nodes)
    x = np.asarray(ds.features[nodes], dtype=np.float64)
    y = np.asarray(ds.labels[nodes], dtype=np.int64)
    lab = local[split.labeled_train]
    val = local[split.validation]
    known = np.zeros(len(nodes), bool)
    known[lab] = True
    prep = _Prepared(split, nodes, g, x, y, known, val)
    if attack == "none":
        return prep
    pool = np.sort(np.concatenate([lab, local[split.unlabeled]]))
    cfg = atk.AttackConfig(**{**acfg.__dict__, "kind": attack, "seed": seeds["attack"],
                              "selection": None if attack != acfg.kind else acfg.selection})
    pois, trig = atk.run_attack(g, x, y, cfg, pool=pool, labeled=lab, num_classes=ds.num_classes,
                                val_nodes=val)
    known = np.concatenate([known, np.zeros(pois.trigger_nodes.size, bool)])
    known[pois.poison_nodes] = True
    known[pois.trigger_nodes.ravel()] = True
    prep.graph, prep.features, prep.labels, prep.known = pois.graph, pois.features, pois.labels, known
    prep.poisoned, prep.trigger = pois, trig
    return prep


def _apply_defense(g, x, y, known, defense: Defense):
    if defense.mode == "none":
        return g, known
    g2, _, discarded = atk.prune_defense(g, x, y, defense.mode, defense.threshold)
    return g2, known & ~discarded


def run_cell(ds: Dataset, prep: _Prepared, red: Reduction, defense: Defense, arch_kind: str,
             seed: int, attack: str, cfg: ExperimentConfig) -> ReportRow:
    row = ReportRow(ds.name, red.method, red.ratio, attack, defense.label, arch_kind, seed)
    t0 = time.perf_counter()
    try:
        _run_cell(ds, prep, red, defense, arch_kind, seed, attack, cfg, row)
    except Exception as exc:  # keep the matrix going; the row carries the error
        row.error = f"{type(exc).__name__}: {exc}"
        log.error("cell %s/%s/%s/%s/%s/%d failed: %s", ds.name, red.method, attack,
                  defense.label, arch_kind, seed, row.error)
    row.runtime_s = time.perf_counter() - t0
    return row


def _run_cell(ds, prep, red, defense, arch_kind, seed, attack, cfg, row):
    seeds = stage_seeds(seed)
    arch = cfg.architecture(arch_kind)
    g, x, y, known = prep.graph, prep.features, prep.labels, prep.known.copy()
    pois = prep.poisoned
    if not cfg.reduce_before_defense:
        g, known = _apply_defense(g, x, y, known, defense)

    val_data = None
    if red.kind == "coarsen":
        cc = crs.CoarsenConfig(method=red.method, ratio=red.ratio, seed=seeds["reduce"])
        res = crs.coarsen(g, x, y, cc, num_classes=ds.num_classes, known=known)
        g_r, x_r, y_r = res.coarse_graph, res.coarse_features, res.coarse_labels
        train_nodes = np.flatnonzero(y_r >= 0)
        val_data = (g, x, y)
        row.achieved_ratio = res.achieved_ratio
        if pois is not None:
            st = metrics.trigger_coarsen_stats(res.partition, pois, y_r, x_r)
            row.m, row.l, row.d = st.m, st.l, st.d
    elif red.kind == "sparsify":
        sc = spr.SparsifyConfig(method=red.method, ratio=red.ratio, seed=seeds["reduce"])
        g_r = spr.sparsify(g, sc)
        x_r, y_r = x, y
        train_nodes = np.flatnonzero(known)
        row.achieved_ratio = g_r.num_edges / g.num_edges if g.num_edges else 1.0
        if pois is not None:
            st = metrics.trigger_sparsify_stats(g_r, pois)
            row.prune_ratio, row.spar_rho = st.prune_ratio, st.post_spar_poison_ratio
            row.prune_ratio_path = st.prune_ratio_path
    else:
        g_r, x_r, y_r = g, x, y
        train_nodes = np.flatnonzero(known)
        row.achieved_ratio = 1.0
    if cfg.reduce_before_defense and defense.mode != "none":
        g_r, keep = _apply_defense(g_r, x_r, y_r, y_r >= 0, defense)
        train_nodes = np.intersect1d(train_nodes, np.flatnonzero(keep))

    row.memory_proxy_bytes = memory_proxy(g_r, x_r, arch)
    tc = gnn.TrainConfig(**{**cfg.train.__dict__, "seed": seeds["train"]})
    model = gnn.train(g_r, x_r, y_r, train_nodes, arch, tc, val_nodes=prep.val,
                      num_classes=ds.num_classes, val_data=val_data)

    full_x = np.asarray(ds.features, dtype=np.float64)
    split = prep.split
    row.acc = metrics.clean_accuracy(model, ds.graph, gnn.as_model_input(full_x),
                                     split.clean_test, ds.labels)
    if prep.trigger is not None:
        tl = pois.target_label
        g_t, x_t, _ = atk.attach_test_triggers(ds.graph, full_x, split.target, prep.trigger)
        xin = gnn.as_model_input(x_t)
        row.asr = metrics.attack_success_rate(model, g_t, xin, split.target, tl, ds.labels)
        preds = gnn.predict(model, g_t, xin, split.target)
        row.profiles = metrics.poisoned_node_profiles(ds.graph, ds.labels, split.target, preds, tl)


# ----------------------------------------------------------------------------
# matrix execution


def cells(cfg: ExperimentConfig):
    """All (key, seed, attack, reduction, defense, arch) combinations, key = config order."""
    out = []
    for (ri, red), (ai, a), (di, dfn), (mi, arch), (si, seed) in product(
            enumerate(cfg.reductions), enumerate(cfg.attacks), enumerate(cfg.defenses),
            enumerate(cfg.architectures), enumerate(cfg.seeds)):
        out.append(((ri, ai, di, mi, si), seed, a, red, dfn, arch))
    return out


def _run_group(ds, cfg, seed, attack, group):
    t0 = time.perf_counter()
    try:
        prep = prepare(ds, seed, attack, cfg.attack)
        err = None
    except Exception as exc:
        prep, err = None, f"{type(exc).__name__}: {exc}"
        log.error("preparing seed %d / attack %s failed: %s", seed, attack, err)
    shared = time.perf_counter() - t0
    rows = []
    for key, _, _, red, dfn, arch in group:
        if prep is None:
            row = ReportRow(ds.name, red.method, red.ratio, attack, dfn.label, arch, seed,
                            error=err, runtime_s=shared)
        else:
            row = run_cell(ds, prep, red, dfn, arch, seed, attack, cfg)
            row.runtime_s += shared / len(group)
        row.key = key
        rows.append(row)
    return rows


_WORKER = {}


def _init_worker(ds, cfg):
    _WORKER["ds"], _WORKER["cfg"] = ds, cfg


def _worker_group(args):
    return _run_group(_WORKER["ds"], _WORKER["cfg"], *args)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, dataset: Dataset | None = None):
    """Run the whole matrix; rows come back sorted by cell key (config order)."""
    ds = dataset if dataset is not None else cfg.load_data()
    groups = {}
    for c in cells(cfg):
        groups.setdefault((c[1], c[2]), []).append(c)
    tasks = [(seed, attack, grp) for (seed, attack), grp in groups.items()]
    rows = []
    if jobs <= 1 or len(tasks) == 1:
        for t in tasks:
            rows.extend(_run_group(ds, cfg, *t))
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(ds, cfg)) as ex:
            for part in ex.map(_worker_group, tasks):
                rows.extend(part)
    rows.sort(key=lambda r: r.key)
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean of each metric over seeds and architectures per (reduction, ratio, attack, defense)."""
    groups = {}
    for r in rows:
        k = (r["dataset"], r["reduction_method"], r["ratio"], r["attack"], r["defense"])
        groups.setdefault(k, []).append(r)
    out = []
    for k, rs in groups.items():
        rec = dict(zip(("dataset", "reduction_method", "ratio", "attack", "defense"), k))
        rec["runs"] = len(rs)
        for c in ("asr", "acc", "m", "l", "d", "prune_ratio", "spar_rho", "achieved_ratio"):
            vals = [r[c] for r in rs if r[c] is not None]
            rec[c] = float(np.mean(vals)) if vals else None
        out.append(rec)
    return out
