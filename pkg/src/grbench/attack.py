"""Backdoor triggers: selection of poison nodes, trigger synthesis, injection.

SBA attacks use one universal Erdos-Renyi trigger whose node features are
either copied from random training nodes (sba-samp) or drawn from a Gaussian
fitted to the training features (sba-gen). The adaptive attacks (gta-s and
ugba-s) train a small MLP that maps an attach node's features to the
features of a fully connected trigger, against a surrogate GCN; ugba-s adds
a cosine-similarity penalty and picks poison nodes by clustering surrogate
embeddings.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from . import gnn
from .graph import Graph

log = logging.getLogger(__name__)

ATTACKS = ("sba-samp", "sba-gen", "gta-s", "ugba-s")
SURROGATE_DECAY = 5e-4
GENERATOR_STEP_CAP = 10
TRIGGER_SPAN = 3.0


class AttackError(RuntimeError):
    """Adaptive trigger training diverged."""


@dataclass
class AttackConfig:
    kind: str = "ugba-s"
    t: int = 3
    rho: float = 0.05
    target_label: int = 0
    er_p: float = 0.8
    generator_epochs: int = 10
    unnoticeable_lambda: float = 0.1
    seed: int = 0
    selection: str | None = None
    generator_hidden: int = 64
    generator_lr: float = 0.01
    generator_steps: int = 10
    surrogate_epochs: int = 20

    def __post_init__(self):
        self.kind = self.kind.lower().replace("_", "-")
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}; choose from {ATTACKS}")
        if self.t < 1:
            raise ValueError("trigger size t must be >= 1")
        if not 0 < self.rho < 1:
            raise ValueError("poisoning ratio must be in (0, 1)")
        if not 0 <= self.er_p <= 1:
            raise ValueError("er_p must be in [0, 1]")
        if self.unnoticeable_lambda < 0:
            raise ValueError("unnoticeable_lambda must be >= 0")
        if self.selection is None:
            self.selection = "cluster" if self.kind == "ugba-s" else "random"
        if self.selection not in ("random", "cluster"):
            raise ValueError("selection must be 'random' or 'cluster'")

    @property
    def adaptive(self) -> bool:
        return self.kind in ("gta-s", "ugba-s")

    @property
    def penalty(self) -> float:
        return self.unnoticeable_lambda if self.kind == "ugba-s" else 0.0


def poison_count(rho: float, n: int) -> int:
    return int(np.floor(rho * n + 0.5))


# ----------------------------------------------------------------------------
# triggers


@dataclass
class Trigger:
    """Universal trigger: fixed topology and features, attached through node `attach`."""

    adjacency: np.ndarray
    features: np.ndarray
    attach: int = 0

    @property
    def t(self) -> int:
        return self.adjacency.shape[0]

    def node_features(self, x_attach: np.ndarray) -> np.ndarray:
        """(k, t, d) trigger features for k attach nodes."""
        k = len(x_attach)
        return np.broadcast_to(self.features, (k,) + self.features.shape).copy()


@dataclass
class TriggerGenerator:
    """Bounded residual MLP: trigger node j gets
    clip(x_a + scale * tanh(relu(x_a W1 + b1) W2 + b2)[j], lo, hi).

    `scale` (per column, the feature std by default) keeps each trigger within
    a fixed distance of its attach node, so triggers stay node-specific; `lo`
    and `hi` keep them inside the observed feature range.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    t: int
    lo: np.ndarray
    hi: np.ndarray
    scale: np.ndarray

    @classmethod
    def init(cls, d, hidden, t, rng, lo=None, hi=None, scale=None):
        lim1 = np.sqrt(6.0 / (d + hidden))
        lim2 = 0.1 * np.sqrt(6.0 / (hidden + t * d))
        lo = np.full(d, -np.inf) if lo is None else np.asarray(lo, dtype=np.float64)
        hi = np.full(d, np.inf) if hi is None else np.asarray(hi, dtype=np.float64)
        scale = np.ones(d) if scale is None else np.asarray(scale, dtype=np.float64)
        return cls(rng.uniform(-lim1, lim1, (d, hidden)), np.zeros(hidden),
                   rng.uniform(-lim2, lim2, (hidden, t * d)), np.zeros(t * d), t, lo, hi, scale)

    def _raw(self, xa):
        h = np.maximum(xa @ self.W1 + self.b1, 0)
        k, d = xa.shape
        th = np.tanh(h @ self.W2 + self.b2).reshape(k, self.t, d)
        return xa[:, None, :] + self.scale * th, h, th

    def forward(self, xa):
        raw, h, _ = self._raw(xa)
        return np.clip(raw, self.lo, self.hi), h

    def backward(self, xa, h, dtrig):
        k, d = xa.shape
        raw, _, th = self._raw(xa)
        dtrig = np.where((raw >= self.lo) & (raw <= self.hi), dtrig, 0.0)
        dout = (dtrig * self.scale * (1 - th ** 2)).reshape(k, self.t * d)
        grads = {"W2": h.T @ dout, "b2": dout.sum(0)}
        dh = (dout @ self.W2.T) * (h > 0)
        grads["W1"] = xa.T @ dh
        grads["b1"] = dh.sum(0)
        return grads

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass
class AdaptiveTrigger:
    """Per-node trigger: fixed fully connected topology, generated features."""

    adjacency: np.ndarray
    generator: TriggerGenerator
    attach: int = 0
    objective_trace: list = field(default_factory=list)
    phase_start: list = field(default_factory=list)     # objective before each generator phase

    @property
    def t(self) -> int:
        return self.adjacency.shape[0]

    def node_features(self, x_attach: np.ndarray) -> np.ndarray:
        return self.generator.forward(np.asarray(x_attach, dtype=np.float64))[0]


def _dense(x):
    return x.toarray() if hasattr(x, "toarray") else np.asarray(x, dtype=np.float64)


def er_adjacency(t: int, p: float, rng) -> np.ndarray:
    upper = np.triu(rng.random((t, t)) < p, k=1)
    return (upper | upper.T).astype(np.float64)


def generate_sba_trigger(t: int, er_p: float, feature_mode: str, x, seed, pool=None) -> Trigger:
    """Universal ER(t, er_p) trigger.

    samp: each trigger node copies the features of a uniformly drawn node from
    `pool` (default all rows of x); gen: features drawn from a per-column
    Normal(mean, std) of x.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    if not 0 <= er_p <= 1:
        raise ValueError("er_p must be in [0, 1]")
    rng = np.random.default_rng(seed)
    adj = er_adjacency(t, er_p, rng)
    x = _dense(x)
    if feature_mode == "samp":
        cand = np.arange(len(x)) if pool is None else np.asarray(pool)
        feats = x[rng.choice(cand, size=t, replace=True)].copy()
    elif feature_mode == "gen":
        feats = rng.normal(x.mean(axis=0), x.std(axis=0), size=(t, x.shape[1]))
    else:
        raise ValueError(f"feature_mode must be 'samp' or 'gen', got {feature_mode!r}")
    return Trigger(adj, feats)


# ----------------------------------------------------------------------------
# poison node selection


def select_poison_nodes(g: Graph, x, rho: float, strategy: str = "random", surrogate=None,
                        seed=0, pool=None) -> np.ndarray:
    """Pick round(rho * n) poison nodes from `pool` (default: every node of g).

    cluster: k-means with k = n_p on the surrogate's hidden representation,
    taking the pool node nearest each centroid (next nearest if already taken).
    """
    n_p = poison_count(rho, g.n)
    if n_p < 1:
        raise ValueError(f"rho={rho} on {g.n} nodes selects no poison nodes")
    pool = np.arange(g.n) if pool is None else np.sort(np.asarray(pool, dtype=np.int64))
    if n_p > len(pool):
        raise ValueError(f"need {n_p} poison nodes but the pool has {len(pool)}")
    rng = np.random.default_rng(seed)
    if strategy == "random":
        return np.sort(rng.choice(pool, size=n_p, replace=False))
    if strategy != "cluster":
        raise ValueError(f"unknown selection strategy {strategy!r}")
    if surrogate is None:
        raise ValueError("cluster selection needs a surrogate model")
    emb = gnn.embed(surrogate, g, gnn.as_model_input(x))[pool]
    return pool[nearest_to_centroids(emb, n_p, rng)]


def nearest_to_centroids(emb: np.ndarray, k: int, rng) -> np.ndarray:
    """Indices (into emb) of distinct points nearest each of k k-means centroids."""
    cent, _ = kmeans2(emb, k, minit="++", seed=rng)
    d2 = ((emb[:, None, :] - cent[None, :, :]) ** 2).sum(-1) if len(emb) * k < 5e6 else \
        (emb ** 2).sum(1)[:, None] - 2 * emb @ cent.T + (cent ** 2).sum(1)[None]
    taken = np.zeros(len(emb), bool)
    out = []
    for j in range(k):
        order = np.argsort(d2[:, j], kind="stable")
        pick = order[~taken[order]][0]
        taken[pick] = True
        out.append(pick)
    return np.sort(np.asarray(out))


# ----------------------------------------------------------------------------
# injection


@dataclass
class PoisonedDataset:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    poison_nodes: np.ndarray
    trigger_nodes: np.ndarray          # (n_p, t) node ids
    original_labels: np.ndarray
    target_label: int
    n_clean: int
    attach_index: int = 0

    @property
    def attach_nodes(self) -> np.ndarray:
        """Trigger node linked to each poison node."""
        return self.trigger_nodes[:, self.attach_index]

    def clean(self):
        """(graph, features, labels) with triggers removed and labels restored."""
        keep = np.arange(self.n_clean)
        y = self.labels[keep].copy()
        y[self.poison_nodes] = self.original_labels
        return self.graph.subgraph(keep), self.features[keep].copy(), y


def _append_triggers(g: Graph, x, anchors, trigger, feats):
    n = g.n
    k, t = len(anchors), trigger.t
    iu, ju = np.nonzero(np.triu(trigger.adjacency, k=1))
    ids = n + np.arange(k * t).reshape(k, t)
    eu, ev, ew = g.edges()
    tu = (ids[:, iu]).ravel()
    tv = (ids[:, ju]).ravel()
    au, av = anchors, ids[:, trigger.attach]
    u = np.concatenate([eu, tu, au])
    v = np.concatenate([ev, tv, av])
    w = np.concatenate([ew, np.ones(len(tu) + len(au))])
    g2 = Graph.from_edges(n + k * t, u, v, w)
    x2 = np.vstack([_dense(x), feats.reshape(k * t, -1)])
    return g2, x2, ids


def inject_triggers(g: Graph, x, y, poison_nodes, trigger, target_label: int,
                    num_classes: int | None = None) -> PoisonedDataset:
    """Append one trigger copy per poison node (fresh ids) and flip poison labels."""
    y = np.asarray(y, dtype=np.int64)
    k = int(num_classes if num_classes is not None else y.max() + 1)
    if not 0 <= target_label < k:
        raise ValueError(f"target_label {target_label} outside [0, {k})")
    poison_nodes = np.asarray(poison_nodes, dtype=np.int64)
    x = _dense(x)
    feats = trigger.node_features(x[poison_nodes])
    g2, x2, ids = _append_triggers(g, x, poison_nodes, trigger, feats)
    y2 = np.concatenate([y, np.full(ids.size, target_label)])
    orig = y[poison_nodes].copy()
    y2[poison_nodes] = target_label
    return PoisonedDataset(g2, x2, y2, poison_nodes, ids, orig, target_label, g.n, trigger.attach)


def attach_test_triggers(g: Graph, x, target_nodes, trigger):
    """Attach a trigger copy to every target node; returns (graph, features, trigger ids)."""
    target_nodes = np.asarray(target_nodes, dtype=np.int64)
    x = _dense(x)
    if len(target_nodes) == 0:
        return g, x, np.zeros((0, trigger.t), dtype=np.int64)
    feats = trigger.node_features(x[target_nodes])
    return _append_triggers(g, x, target_nodes, trigger, feats)


# ----------------------------------------------------------------------------
# adaptive generator


def _cosine_rows(a, b):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    den = na * nb
    dot = (a * b).sum(-1)
    cos = np.divide(dot, den, out=np.zeros_like(dot), where=den > 0)
    return cos, na, nb, dot


def _cosine_penalty_grad(trig, xa):
    """Gradient of mean(1 - cos(trig[k, j], xa[k])) with respect to trig."""
    xb = np.broadcast_to(xa[:, None, :], trig.shape)
    cos, na, nb, _ = _cosine_rows(trig, xb)
    safe = (na > 0) & (nb > 0)
    na_ = np.where(safe, na, 1.0)
    nb_ = np.where(safe, nb, 1.0)
    g = xb / (na_ * nb_)[..., None] - cos[..., None] * trig / (na_ ** 2)[..., None]
    g = np.where(safe[..., None], g, 0.0)
    return float((1 - cos).mean()), -g / cos.size


def train_adaptive_generator(g: Graph, x, y, poison_nodes, cfg: AttackConfig,
                             surrogate_arch: gnn.Architecture | None = None,
                             labeled=None, num_classes=None) -> AdaptiveTrigger:
    """Alternate surrogate GCN training and generator ascent on target-class scores.

    `labeled` lists the nodes whose labels the surrogate may train on (default
    every node). The generator objective (see `objective` below) under the
    current surrogate is recorded after every outer iteration.
    """
    poison_nodes = np.asarray(poison_nodes, dtype=np.int64)
    if len(poison_nodes) == 0:
        raise ValueError("no poison nodes")
    y = np.asarray(y, dtype=np.int64)
    k = int(num_classes if num_classes is not None else y.max() + 1)
    x = _dense(x)
    d = x.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    arch = surrogate_arch or gnn.Architecture("gcn", hidden_dim=64, dropout=0.0)
    adj = np.ones((cfg.t, cfg.t)) - np.eye(cfg.t)
    gen = TriggerGenerator.init(d, cfg.generator_hidden, cfg.t, rng, x.min(axis=0), x.max(axis=0),
                                TRIGGER_SPAN * x.std(axis=0))
    trig = AdaptiveTrigger(adj, gen)
    pois = inject_triggers(g, x, y, poison_nodes, trig, cfg.target_label, k)
    gp, xp, yp = pois.graph, pois.features, pois.labels
    tids = pois.trigger_nodes.reshape(-1)
    known = np.arange(g.n) if labeled is None else np.asarray(labeled, dtype=np.int64)
    train_nodes = np.unique(np.concatenate([known, poison_nodes, tids]))
    xa = x[poison_nodes]

    sur = gnn.init_model(arch, d, k, seed=int(rng.integers(2**31)))
    sur_rng = np.random.default_rng(int(rng.integers(2**31)))
    opt = {"m": {}, "v": {}, "step": 0}
    lam = cfg.penalty

    def objective():
        """Generator objective: mean target-class log-probability of the poison
        nodes minus the similarity penalty; returns (value, dlogits, dtrig_penalty).

        Log-softmax rather than raw logits because the surrogate's cross-entropy
        leaves a per-node logit shift free, so raw logits drift between phases.
        """
        z = gnn.forward(sur, gp, xp)
        nll, dz = gnn.cross_entropy(z, yp, poison_nodes)
        value, dpen = -nll, None
        if lam > 0:
            pen, dpen = _cosine_penalty_grad(xp[tids].reshape(len(poison_nodes), cfg.t, d), xa)
            value -= lam * pen
            dpen = lam * dpen
        return value, dz, dpen

    for it in range(cfg.generator_epochs):
        for _ in range(cfg.surrogate_epochs):
            loss, grads = gnn.loss_and_grad(sur, gp, xp, yp, train_nodes, SURROGATE_DECAY,
                                            train_mode=True, rng=sur_rng)
            if not np.isfinite(loss):
                raise AttackError("surrogate loss is not finite")
            gnn.adam_step(sur, grads, 0.01)
        before = value = objective()[0]
        floor = trig.objective_trace[-1] if trig.objective_trace else -np.inf
        # run the configured steps, then keep going (up to a cap) until the
        # generator has recovered whatever the surrogate update took back
        steps = 0
        while steps < cfg.generator_steps or (steps < GENERATOR_STEP_CAP * cfg.generator_steps
                                               and value < floor):
            feats, h = gen.forward(xa)
            value, dz, dpen = objective()
            if not np.isfinite(value):
                raise AttackError(f"generator loss is not finite at iteration {it}")
            dtrig = gnn.input_gradient(sur, gp, xp, dz)[tids].reshape(feats.shape)
            if dpen is not None:
                dtrig = dtrig + dpen
            _adam(gen.params(), gen.backward(xa, h, dtrig), opt, cfg.generator_lr)
            steps += 1
            xp[tids] = gen.forward(xa)[0].reshape(-1, d)
            value = objective()[0]
        trig.phase_start.append(before)
        trig.objective_trace.append(value)
        log.debug("generator iteration %d: %d steps, objective %.4f -> %.4f", it, steps, before,
                  value)
    return trig


def _adam(params, grads, state, lr, b1=0.9, b2=0.999, eps=1e-8):
    state["step"] += 1
    t = state["step"]
    for k, gk in grads.items():
        if k not in state["m"]:
            state["m"][k] = np.zeros_like(gk)
            state["v"][k] = np.zeros_like(gk)
        m, v = state["m"][k], state["v"][k]
        m *= b1
        m += (1 - b1) * gk
        v *= b2
        v += (1 - b2) * gk * gk
        params[k] -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)


# ----------------------------------------------------------------------------
# one-call attack


def run_attack(g: Graph, x, y, cfg: AttackConfig, pool=None, labeled=None, num_classes=None,
               val_nodes=None):
    """Select poison nodes, build the trigger and inject it.

    Returns (PoisonedDataset, trigger). Seeds for the sub-steps derive from cfg.seed.
    """
    y = np.asarray(y, dtype=np.int64)
    k = int(num_classes if num_classes is not None else y.max() + 1)
    ss = np.random.SeedSequence([cfg.seed, 3]).spawn(3)
    sel_seed, trig_seed, sur_seed = (int(s.generate_state(1)[0]) for s in ss)
    surrogate = None
    if cfg.selection == "cluster":
        lab = np.arange(g.n) if labeled is None else np.asarray(labeled)
        surrogate = gnn.train(g, x, y, lab, gnn.Architecture("gcn"),
                              gnn.TrainConfig(epochs=100, seed=sur_seed), val_nodes=val_nodes,
                              num_classes=k)
    poison = select_poison_nodes(g, x, cfg.rho, cfg.selection, surrogate, sel_seed, pool)
    if cfg.adaptive:
        c2 = AttackConfig(**{**cfg.__dict__, "seed": trig_seed})
        trigger = train_adaptive_generator(g, x, y, poison, c2, labeled=labeled, num_classes=k)
    else:
        mode = "samp" if cfg.kind == "sba-samp" else "gen"
        trigger = generate_sba_trigger(cfg.t, cfg.er_p, mode, x, trig_seed, pool=pool)
    return inject_triggers(g, x, y, poison, trigger, cfg.target_label, k), trigger


# ----------------------------------------------------------------------------
# pruning defenses


def edge_cosine(g: Graph, x) -> np.ndarray:
    """Cosine similarity of endpoint features per edge (edges() order); 0 if a row is zero."""
    x = _dense(x)
    u, v, _ = g.edges()
    cos, _, _, _ = _cosine_rows(x[u], x[v])
    return cos


def prune_defense(g: Graph, x, y, mode: str = "prune", cos_threshold: float = 0.1):
    """Drop edges whose endpoint cosine similarity is below the threshold.

    Returns (graph, labels, discarded) where `discarded` marks nodes whose
    labels prune_ld removes from training (all False for plain prune).
    """
    if mode not in ("prune", "prune_ld"):
        raise ValueError("mode must be 'prune' or 'prune_ld'")
    if not -1 <= cos_threshold <= 1:
        raise ValueError("cos_threshold must be in [-1, 1]")
    xd = _dense(x)
    zero = np.linalg.norm(xd, axis=1) == 0
    u, v, _ = g.edges()
    cos = edge_cosine(g, xd)
    nz = int((zero[u] | zero[v]).sum())
    if nz:
        log.info("prune: %d edges touch zero-norm features (cosine taken as 0)", nz)
    drop = cos < cos_threshold
    discarded = np.zeros(g.n, bool)
    if mode == "prune_ld":
        discarded[u[drop]] = True
        discarded[v[drop]] = True
    return g.edge_subgraph(~drop), np.asarray(y).copy(), discarded


def save_trigger(trigger, path):
    if isinstance(trigger, AdaptiveTrigger):
        tensors = {"adjacency": trigger.adjacency, **trigger.generator.params(),
                   "lo": trigger.generator.lo, "hi": trigger.generator.hi,
                   "scale": trigger.generator.scale}
        meta = {"kind": "adaptive", "attach": trigger.attach, "t": trigger.t}
    else:
        tensors = {"adjacency": trigger.adjacency, "features": trigger.features}
        meta = {"kind": "universal", "attach": trigger.attach}
    gnn.save_tensors(path, tensors, meta)


def load_trigger(path):
    tensors, meta = gnn.load_tensors(path)
    if meta["kind"] == "adaptive":
        gen = TriggerGenerator(tensors["W1"], tensors["b1"], tensors["W2"], tensors["b2"], meta["t"],
                               tensors["lo"], tensors["hi"], tensors["scale"])
        return AdaptiveTrigger(tensors["adjacency"], gen, meta["attach"])
    return Trigger(tensors["adjacency"], tensors["features"], meta["attach"])
