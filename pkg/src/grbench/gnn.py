"""Two-layer GCN, GraphSAGE and GAT node classifiers in plain numpy.

Forward and backward passes are written out by hand so the same engine
serves as victim model, attack surrogate (it exposes gradients with respect
to the input features) and finite-difference test subject. Training uses
Adam on mean softmax cross-entropy plus L2 weight decay.
"""
from __future__ import annotations

import copy
import json
import logging
import weakref
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Graph

log = logging.getLogger(__name__)

KINDS = ("gcn", "sage", "gat")


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class Architecture:
    kind: str = "gcn"
    hidden_dim: int = 64
    heads: int = 1
    dropout: float = 0.5
    layers: int = 2
    sage_samples: int = 10

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture {self.kind!r}; choose from {KINDS}")
        if self.hidden_dim < 1 or self.heads < 1:
            raise ValueError("hidden_dim and heads must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.layers != 2:
            raise ValueError("only 2-layer networks are supported")


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    seed: int = 0
    early_stop_patience: int = 30

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class ModelParams:
    arch: Architecture
    input_dim: int
    num_classes: int
    weights: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    history: dict = field(default_factory=dict, repr=False)

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


# ----------------------------------------------------------------------------
# cached graph operators


_OPS = weakref.WeakKeyDictionary()


class _GraphOps:
    """Per-graph operators reused across epochs."""

    def __init__(self, g: Graph):
        self.n = g.n
        a = g.adj
        deg = np.diff(a.indptr)
        wdeg = g.weighted_degree()
        # self-loop weight follows the mean incident weight so that scaling all
        # edge weights leaves the normalized adjacency unchanged
        loop = np.divide(wdeg, deg, out=np.ones(g.n), where=deg > 0)
        at = (a + sp.diags(loop)).tocsr()
        dt = np.asarray(at.sum(axis=1)).ravel()
        inv = 1.0 / np.sqrt(dt)
        self.a_hat = (sp.diags(inv) @ at @ sp.diags(inv)).tocsr()
        winv = np.divide(1.0, wdeg, out=np.zeros(g.n), where=wdeg > 0)
        self.mean_agg = (sp.diags(winv) @ a).tocsr()
        self.adj = a
        # attention edges: neighbours plus self, grouped by target row
        sl = (a + sp.identity(g.n, format="csr")).tocsr()
        sl.sort_indices()
        self.att_indptr = sl.indptr
        self.att_src = sl.indices.astype(np.int64)
        self.att_tgt = np.repeat(np.arange(g.n), np.diff(sl.indptr))

    def sampled_mean(self, k: int, rng) -> sp.csr_matrix:
        """Row-stochastic aggregation over k sampled neighbours per node.

        Nodes with at least k neighbours sample without replacement, the rest
        with replacement; sampling is proportional to edge weight.
        """
        a = self.adj
        n = self.n
        deg = np.diff(a.indptr)
        rows = np.repeat(np.arange(n), deg)
        rows_out, cols_out = [], []
        big = deg >= k
        if big.any():
            slot = np.isin(rows, np.flatnonzero(big))
            gumbel = np.log(a.data[slot]) - np.log(-np.log(rng.random(slot.sum())))
            r, c = rows[slot], a.indices[slot]
            order = np.lexsort((-gumbel, r))
            r, c = r[order], c[order]
            first = np.searchsorted(r, r, side="left")
            pick = (np.arange(len(r)) - first) < k
            rows_out.append(r[pick])
            cols_out.append(c[pick])
        small = np.flatnonzero((deg > 0) & ~big)
        if len(small):
            u = rng.random((len(small), k))
            starts = a.indptr[small]
            cw = np.cumsum(a.data)
            base = np.where(starts > 0, cw[np.maximum(starts - 1, 0)], 0.0)
            tot = cw[a.indptr[small + 1] - 1] - base
            target = base[:, None] + u * tot[:, None]
            pos = np.searchsorted(cw, target, side="right")
            pos = np.minimum(pos, (a.indptr[small + 1] - 1)[:, None])
            rows_out.append(np.repeat(small, k))
            cols_out.append(a.indices[pos.ravel()])
        if not rows_out:
            return sp.csr_matrix((n, n))
        r = np.concatenate(rows_out)
        c = np.concatenate(cols_out)
        return sp.csr_matrix((np.full(len(r), 1.0 / k), (r, c)), shape=(n, n))


def graph_ops(g: Graph) -> _GraphOps:
    ops = _OPS.get(g)
    if ops is None:
        ops = _OPS[g] = _GraphOps(g)
    return ops


# ----------------------------------------------------------------------------
# parameters


def _glorot(rng, fan_in, fan_out, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def init_model(arch: Architecture, input_dim: int, num_classes: int, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if input_dim < 1 or num_classes < 1:
        raise ValueError("input_dim and num_classes must be >= 1")
    rng = np.random.default_rng(seed)
    h, heads = arch.hidden_dim, arch.heads
    w = {}
    if arch.kind == "gcn":
        w["W0"] = _glorot(rng, input_dim, h)
        w["b0"] = np.zeros(h)
        w["W1"] = _glorot(rng, h, num_classes)
        w["b1"] = np.zeros(num_classes)
    elif arch.kind == "sage":
        w["Ws0"] = _glorot(rng, input_dim, h)
        w["Wn0"] = _glorot(rng, input_dim, h)
        w["b0"] = np.zeros(h)
        w["Ws1"] = _glorot(rng, h, num_classes)
        w["Wn1"] = _glorot(rng, h, num_classes)
        w["b1"] = np.zeros(num_classes)
    else:
        w["W0"] = _glorot(rng, input_dim, h, (input_dim, heads * h))
        w["as0"] = _glorot(rng, h, 1, (heads, h))
        w["ad0"] = _glorot(rng, h, 1, (heads, h))
        w["b0"] = np.zeros(heads * h)
        w["W1"] = _glorot(rng, heads * h, num_classes, (heads * h, heads * num_classes))
        w["as1"] = _glorot(rng, num_classes, 1, (heads, num_classes))
        w["ad1"] = _glorot(rng, num_classes, 1, (heads, num_classes))
        w["b1"] = np.zeros(num_classes)
    return ModelParams(arch, input_dim, num_classes, w)


def _decayed(name: str) -> bool:
    return name.startswith("W")


# ----------------------------------------------------------------------------
# layers


def _dropout(h, p, rng):
    if p == 0 or rng is None:
        return h, None
    if sp.issparse(h):
        h = h.tocsr(copy=True)
        keep = rng.random(h.nnz) >= p
        h.data = h.data * keep / (1 - p)
        return h, keep
    mask = (rng.random(h.shape) >= p) / (1 - p)
    return h * mask, mask


def _undrop(dh, mask, h_in):
    if mask is None:
        return dh
    if sp.issparse(h_in):
        # gradient only flows through kept stored entries; callers needing a
        # dense input gradient run without dropout
        return dh
    return dh * mask


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0)))


def _elu_grad(z):
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0)))


def _gat_layer(ops, hd, w, a_s, a_d, heads, fout):
    n = ops.n
    g = np.asarray(hd @ w).reshape(n, heads, fout)
    f = np.einsum("nhk,hk->nh", g, a_s)
    r = np.einsum("nhk,hk->nh", g, a_d)
    tgt, src, ptr = ops.att_tgt, ops.att_src, ops.att_indptr
    s = f[tgt] + r[src]
    e = np.where(s > 0, s, 0.2 * s)
    emax = np.maximum.reduceat(e, ptr[:-1], axis=0)
    ex = np.exp(e - emax[tgt])
    den = np.add.reduceat(ex, ptr[:-1], axis=0)
    alpha = ex / den[tgt]
    out = np.empty((n, heads, fout))
    mats = []
    for h in range(heads):
        m = sp.csr_matrix((alpha[:, h], src, ptr), shape=(n, n))
        mats.append(m)
        out[:, h, :] = m @ g[:, h, :]
    cache = dict(g=g, s=s, alpha=alpha, mats=mats)
    return out, cache


def _gat_layer_back(ops, hd, w, a_s, a_d, heads, fout, cache, dout):
    n = ops.n
    g, s, alpha, mats = cache["g"], cache["s"], cache["alpha"], cache["mats"]
    tgt, src, ptr = ops.att_tgt, ops.att_src, ops.att_indptr
    dg = np.empty_like(g)
    for h in range(heads):
        dg[:, h, :] = mats[h].T @ dout[:, h, :]
    dalpha = np.einsum("ehk,ehk->eh", dout[tgt], g[src])
    dsum = np.add.reduceat(alpha * dalpha, ptr[:-1], axis=0)
    de = alpha * (dalpha - dsum[tgt])
    ds = de * np.where(s > 0, 1.0, 0.2)
    df = np.add.reduceat(ds, ptr[:-1], axis=0)
    dr = np.zeros((n, heads))
    np.add.at(dr, src, ds)
    da_s = np.einsum("nhk,nh->hk", g, df)
    da_d = np.einsum("nhk,nh->hk", g, dr)
    dg += df[:, :, None] * a_s[None] + dr[:, :, None] * a_d[None]
    dg2 = dg.reshape(n, heads * fout)
    dw = np.asarray(hd.T @ dg2)
    dhd = dg2 @ w.T
    return dw, da_s, da_d, dhd


def _forward(m: ModelParams, g: Graph, x, train_mode: bool, rng):
    if x.shape[0] != g.n:
        raise ValueError(f"feature rows {x.shape[0]} != node count {g.n}")
    if x.shape[1] != m.input_dim:
        raise ValueError(f"feature dim {x.shape[1]} != model input dim {m.input_dim}")
    arch, w = m.arch, m.weights
    ops = graph_ops(g)
    p = arch.dropout if train_mode else 0.0
    drop_rng = rng if train_mode else None
    cache = {"x": x}
    h = x
    k = m.num_classes
    for layer in (0, 1):
        hd, mask = _dropout(h, p, drop_rng)
        c = {"h": h, "hd": hd, "mask": mask}
        if arch.kind == "gcn":
            z = ops.a_hat @ np.asarray(hd @ w[f"W{layer}"]) + w[f"b{layer}"]
        elif arch.kind == "sage":
            agg = ops.sampled_mean(arch.sage_samples, rng) if (train_mode and rng is not None) \
                else ops.mean_agg
            mh = agg @ hd
            c["agg"], c["mh"] = agg, mh
            z = np.asarray(hd @ w[f"Ws{layer}"]) + np.asarray(mh @ w[f"Wn{layer}"]) + w[f"b{layer}"]
        else:
            fout = arch.hidden_dim if layer == 0 else k
            out, gc = _gat_layer(ops, hd, w[f"W{layer}"], w[f"as{layer}"], w[f"ad{layer}"],
                                 arch.heads, fout)
            c["gat"] = gc
            if layer == 0:
                z = out.reshape(g.n, -1) + w["b0"]
            else:
                z = out.mean(axis=1) + w["b1"]
        c["z"] = z
        cache[layer] = c
        if layer == 0:
            h = _elu(z) if arch.kind == "gat" else np.maximum(z, 0)
    cache["ops"] = ops
    return z, cache


def _backward(m: ModelParams, cache, dlogits, want_input_grad=False):
    arch, w = m.arch, m.weights
    ops = cache["ops"]
    n = ops.n
    k = m.num_classes
    grads = {}
    dz = dlogits
    dx = None
    for layer in (1, 0):
        c = cache[layer]
        hd = c["hd"]
        grads[f"b{layer}"] = dz.sum(axis=0)
        if arch.kind == "gcn":
            dhw = ops.a_hat.T @ dz
            grads[f"W{layer}"] = np.asarray(hd.T @ dhw)
            dhd = dhw @ w[f"W{layer}"].T if (layer == 1 or want_input_grad) else None
        elif arch.kind == "sage":
            grads[f"Ws{layer}"] = np.asarray(hd.T @ dz)
            grads[f"Wn{layer}"] = np.asarray(c["mh"].T @ dz)
            if layer == 1 or want_input_grad:
                dhd = dz @ w[f"Ws{layer}"].T + c["agg"].T @ (dz @ w[f"Wn{layer}"].T)
            else:
                dhd = None
        else:
            heads = arch.heads
            fout = arch.hidden_dim if layer == 0 else k
            if layer == 0:
                dout = dz.reshape(n, heads, fout)
            else:
                dout = np.repeat(dz[:, None, :] / heads, heads, axis=1)
            dw, da_s, da_d, dhd = _gat_layer_back(ops, hd, w[f"W{layer}"], w[f"as{layer}"],
                                                  w[f"ad{layer}"], heads, fout, c["gat"], dout)
            grads[f"W{layer}"], grads[f"as{layer}"], grads[f"ad{layer}"] = dw, da_s, da_d
        if layer == 1:
            dh = _undrop(dhd, c["mask"], c["h"])
            z0 = cache[0]["z"]
            dz = dh * (_elu_grad(z0) if arch.kind == "gat" else (z0 > 0))
        elif want_input_grad:
            dx = _undrop(dhd, c["mask"], c["h"])
    return grads, dx


def forward(m: ModelParams, g: Graph, x, train_mode: bool = False, rng=None) -> np.ndarray:
    """Logits (n x K). Eval mode is deterministic: no dropout, full neighbourhoods."""
    z, _ = _forward(m, g, x, train_mode, rng)
    return z


def embed(m: ModelParams, g: Graph, x) -> np.ndarray:
    """Hidden-layer representation (eval mode)."""
    _, cache = _forward(m, g, x, False, None)
    z0 = cache[0]["z"]
    return _elu(z0) if m.arch.kind == "gat" else np.maximum(z0, 0)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, y, nodes):
    """Mean softmax cross-entropy over `nodes` and its gradient w.r.t. the logits."""
    nodes = np.asarray(nodes, dtype=np.int64)
    zl = logits[nodes]
    zs = zl - zl.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    yy = np.asarray(y)[nodes]
    loss = -logp[np.arange(len(nodes)), yy].mean()
    d = np.zeros_like(logits)
    pr = np.exp(logp)
    pr[np.arange(len(nodes)), yy] -= 1.0
    np.add.at(d, nodes, pr / len(nodes))
    return float(loss), d


def l2_penalty(m: ModelParams, weight_decay: float) -> float:
    return 0.5 * weight_decay * sum(float((v ** 2).sum()) for k, v in m.weights.items() if _decayed(k))


def loss_and_grad(m: ModelParams, g: Graph, x, y, nodes, weight_decay: float = 0.0,
                  train_mode: bool = False, rng=None, input_grad: bool = False):
    """Cross-entropy over `nodes` plus L2 decay, with exact gradients.

    Returns ``(loss, grads)``, or ``(loss, grads, dX)`` when `input_grad` is set.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        raise ValueError("loss mask is empty")
    z, cache = _forward(m, g, x, train_mode, rng)
    loss, dz = cross_entropy(z, y, nodes)
    grads, dx = _backward(m, cache, dz, want_input_grad=input_grad)
    loss += l2_penalty(m, weight_decay)
    for k, v in m.weights.items():
        if _decayed(k):
            grads[k] = grads[k] + weight_decay * v
    return (loss, grads, dx) if input_grad else (loss, grads)


def input_gradient(m: ModelParams, g: Graph, x, dlogits) -> np.ndarray:
    """Gradient of <dlogits, logits> with respect to dense input features (eval mode)."""
    _, cache = _forward(m, g, np.asarray(x, dtype=np.float64), False, None)
    _, dx = _backward(m, cache, dlogits, want_input_grad=True)
    return dx


def adam_step(m: ModelParams, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m.step += 1
    t = m.step
    for k, gk in grads.items():
        mk = m.adam_m.get(k)
        if mk is None:
            mk = m.adam_m[k] = np.zeros_like(gk)
            m.adam_v[k] = np.zeros_like(gk)
        vk = m.adam_v[k]
        mk *= beta1
        mk += (1 - beta1) * gk
        vk *= beta2
        vk += (1 - beta2) * gk * gk
        mhat = mk / (1 - beta1 ** t)
        vhat = vk / (1 - beta2 ** t)
        m.weights[k] = m.weights[k] - lr * mhat / (np.sqrt(vhat) + eps)


def predict(m: ModelParams, g: Graph, x, nodes=None) -> np.ndarray:
    """Argmax class per node (ties to the smallest class)."""
    z = forward(m, g, x, False)
    pred = z.argmax(axis=1)
    return pred if nodes is None else pred[np.asarray(nodes, dtype=np.int64)]


def accuracy(m: ModelParams, g: Graph, x, y, nodes) -> float:
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        return float("nan")
    return float((predict(m, g, x, nodes) == np.asarray(y)[nodes]).mean())


def as_model_input(x):
    """Sparse CSR when the feature matrix is mostly zeros, else dense float64."""
    if sp.issparse(x):
        return x.tocsr().astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.size and np.count_nonzero(x) < 0.1 * x.size:
        return sp.csr_matrix(x)
    return x


def train(g: Graph, x, y, train_nodes, arch: Architecture, cfg: TrainConfig,
          val_nodes=None, num_classes=None, val_data=None, init=None) -> ModelParams:
    """Adam training with early stopping on validation accuracy.

    `val_data` = (graph, features, labels) evaluates validation nodes on a
    different graph than the one trained on (used when training on a reduced
    graph). Returns the parameters of the best validation epoch.
    """
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    if len(train_nodes) == 0:
        raise ValueError("no labelled training nodes")
    y = np.asarray(y, dtype=np.int64)
    k = int(num_classes if num_classes is not None else y[train_nodes].max() + 1)
    xin = as_model_input(x)
    m = init.copy() if init is not None else init_model(arch, xin.shape[1], k, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    if val_data is None:
        vg, vx, vy = g, xin, y
    else:
        vg, vx, vy = val_data[0], as_model_input(val_data[1]), np.asarray(val_data[2])
    val_nodes = None if val_nodes is None else np.asarray(val_nodes, dtype=np.int64)
    have_val = val_nodes is not None and len(val_nodes) > 0

    best = m.copy()
    best_acc, best_loss, bad = -1.0, np.inf, 0
    losses, vaccs = [], []
    for epoch in range(cfg.epochs):
        loss, grads = loss_and_grad(m, g, xin, y, train_nodes, cfg.weight_decay,
                                    train_mode=True, rng=rng)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        adam_step(m, grads, cfg.learning_rate)
        losses.append(loss)
        if not have_val:
            continue
        z = forward(m, vg, vx, False)
        vloss, _ = cross_entropy(z, vy, val_nodes)
        vacc = float((z[val_nodes].argmax(axis=1) == vy[val_nodes]).mean())
        vaccs.append(vacc)
        if vacc > best_acc or (vacc == best_acc and vloss < best_loss):
            best_acc, best_loss, bad = vacc, vloss, 0
            best = m.copy()
        else:
            bad += 1
            if bad >= cfg.early_stop_patience:
                break
    out = best if have_val else m
    out.history = {"loss": losses, "val_acc": vaccs, "best_val_acc": best_acc}
    return out


# ----------------------------------------------------------------------------
# checkpoints


def save_tensors(path, tensors: dict, meta: dict | None = None):
    """Write `path`.bin (little-endian float64, concatenated) and `path`.json manifest."""
    path = Path(path)
    manifest = {"dtype": "float64", "byteorder": "little", "tensors": [], "meta": meta or {}}
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(arr.tobytes())
            manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_tensors(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    out = {}
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        out[t["name"]] = flat[t["offset"]:t["offset"] + size].reshape(t["shape"]).copy()
    return out, manifest["meta"]


def save_model(m: ModelParams, path):
    meta = {"arch": asdict(m.arch), "input_dim": m.input_dim, "num_classes": m.num_classes,
            "step": m.step}
    tensors = dict(m.weights)
    tensors.update({f"adam_m/{k}": v for k, v in m.adam_m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in m.adam_v.items()})
    save_tensors(path, tensors, meta)


def load_model(path) -> ModelParams:
    tensors, meta = load_tensors(path)
    w = {k: v for k, v in tensors.items() if "/" not in k}
    am = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("adam_m/")}
    av = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("adam_v/")}
    return ModelParams(Architecture(**meta["arch"]), meta["input_dim"], meta["num_classes"],
                       w, am, av, meta["step"])
