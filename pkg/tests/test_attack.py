import numpy as np
import pytest

from grbench import attack as A
from grbench import gnn
from grbench.graph import Graph, generate_sbm


@pytest.fixture(scope="module")
def sbm():
    return generate_sbm([100, 100], 0.08, 0.01, 8, seed=0)


def test_poison_count():
    assert A.poison_count(0.05, 100) == 5
    assert A.poison_count(0.1, 15) == 2            # 1.5 rounds half up
    assert A.poison_count(0.01, 2708) == 27


def test_random_selection(sbm):
    p = A.select_poison_nodes(sbm.graph, sbm.features, 0.05, seed=1, pool=np.arange(100, 200))
    assert len(p) == 10 and len(set(p)) == 10
    assert ((p >= 100) & (p < 200)).all()
    np.testing.assert_array_equal(
        p, A.select_poison_nodes(sbm.graph, sbm.features, 0.05, seed=1, pool=np.arange(100, 200)))
    with pytest.raises(ValueError):
        A.select_poison_nodes(sbm.graph, sbm.features, 0.5, pool=np.arange(10))
    with pytest.raises(ValueError):
        A.select_poison_nodes(sbm.graph, sbm.features, 0.05, strategy="cluster")


def test_nearest_to_centroids_two_blobs():
    rng = np.random.default_rng(0)
    emb = np.vstack([rng.normal(0, 0.1, (30, 2)), rng.normal(10, 0.1, (30, 2))])
    idx = A.nearest_to_centroids(emb, 2, np.random.default_rng(1))
    assert sorted(i // 30 for i in idx) == [0, 1]


def test_nearest_to_centroids_distinct():
    emb = np.zeros((5, 2))
    idx = A.nearest_to_centroids(emb + np.arange(5)[:, None] * 1e-9, 3, np.random.default_rng(0))
    assert len(set(idx.tolist())) == 3


def test_er_trigger_extremes():
    x = np.arange(12.0).reshape(6, 2)
    tri = A.generate_sba_trigger(3, 1.0, "samp", x, seed=0)
    np.testing.assert_array_equal(tri.adjacency, np.ones((3, 3)) - np.eye(3))
    iso = A.generate_sba_trigger(3, 0.0, "samp", x, seed=0)
    assert iso.adjacency.sum() == 0
    # samp copies real rows
    assert all(any((row == x).all(1)) for row in tri.features)
    with pytest.raises(ValueError):
        A.generate_sba_trigger(3, 0.5, "copy", x, seed=0)


def test_gen_trigger_moments():
    rng = np.random.default_rng(0)
    x = rng.normal([2.0, -1.0], [0.5, 3.0], size=(500, 2))
    feats = np.vstack([A.generate_sba_trigger(5, 0.5, "gen", x, seed=s).features for s in range(400)])
    np.testing.assert_allclose(feats.mean(0), x.mean(0), atol=0.1)
    np.testing.assert_allclose(feats.std(0), x.std(0), rtol=0.05)


def test_inject_counts_and_degrees():
    g = Graph.from_edges(10, np.arange(9), np.arange(1, 10))
    x = np.eye(10)
    y = np.arange(10) % 2
    trig = A.generate_sba_trigger(3, 1.0, "samp", x, seed=0)
    pois = A.inject_triggers(g, x, y, [5], trig, target_label=0)
    assert pois.graph.n == 13
    assert pois.graph.num_edges == 9 + 3 + 1
    assert pois.graph.degree()[5] == g.degree()[5] + 1
    assert pois.graph.has_edge(5, pois.attach_nodes[0])
    assert pois.labels[5] == 0 and pois.original_labels[0] == 1
    np.testing.assert_array_equal(pois.labels[10:], 0)
    with pytest.raises(ValueError):
        A.inject_triggers(g, x, y, [4], trig, target_label=2)


def test_inject_sizes_on_larger_graph(sbm):
    trig = A.generate_sba_trigger(3, 0.8, "gen", sbm.features, seed=1)
    poison = np.arange(0, 200, 20)
    pois = A.inject_triggers(sbm.graph, sbm.features, sbm.labels, poison, trig, 1)
    assert pois.graph.n == 200 + 30
    assert pois.trigger_nodes.shape == (10, 3)
    assert (pois.labels[poison] == 1).all()
    g, x, y = pois.clean()
    assert abs(g.adj - sbm.graph.adj).sum() == 0
    np.testing.assert_array_equal(x, sbm.features)
    np.testing.assert_array_equal(y, sbm.labels)


def test_attach_test_triggers(sbm):
    trig = A.generate_sba_trigger(4, 0.5, "samp", sbm.features, seed=2)
    targets = np.array([3, 7, 150])
    g, x, ids = A.attach_test_triggers(sbm.graph, sbm.features, targets, trig)
    assert g.n == 200 + 12
    assert ids.shape == (3, 4)
    assert g.num_edges == sbm.graph.num_edges + 3 * int(trig.adjacency.sum() / 2) + 3
    for t, row in zip(targets, ids):
        assert g.has_edge(t, row[0])
        np.testing.assert_array_equal(x[row], trig.features)
    g0, _, ids0 = A.attach_test_triggers(sbm.graph, sbm.features, [], trig)
    assert g0 is sbm.graph and ids0.shape == (0, 4)


def test_generator_backward_matches_finite_difference():
    rng = np.random.default_rng(0)
    xa = rng.normal(size=(4, 3))
    gen = A.TriggerGenerator.init(3, 5, 2, rng, lo=np.full(3, -1.5), hi=np.full(3, 1.5))
    gen.W2 *= 10
    cot = rng.normal(size=(4, 2, 3))
    feats, h = gen.forward(xa)
    grads = gen.backward(xa, h, cot)
    eps = 1e-6
    for name, arr in gen.params().items():
        flat = arr.reshape(-1)
        for i in rng.choice(flat.size, min(8, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            up = (gen.forward(xa)[0] * cot).sum()
            flat[i] = old - eps
            dn = (gen.forward(xa)[0] * cot).sum()
            flat[i] = old
            assert grads[name].reshape(-1)[i] == pytest.approx((up - dn) / (2 * eps), abs=1e-5)


def test_cosine_penalty_gradient():
    rng = np.random.default_rng(1)
    trig = rng.normal(size=(3, 2, 4))
    xa = rng.normal(size=(3, 4))
    _, grad = A._cosine_penalty_grad(trig, xa)
    eps = 1e-6
    flat = trig.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = A._cosine_penalty_grad(trig, xa)[0]
        flat[i] = old - eps
        dn = A._cosine_penalty_grad(trig, xa)[0]
        flat[i] = old
        assert grad.reshape(-1)[i] == pytest.approx((up - dn) / (2 * eps), abs=1e-6)


def _adaptive(sbm, kind, lam=1.0, seed=0, epochs=5):
    cfg = A.AttackConfig(kind=kind, t=3, rho=0.05, target_label=0, generator_epochs=epochs,
                         unnoticeable_lambda=lam, seed=seed, selection="random")
    poison = np.arange(100, 200, 10)
    trig = A.train_adaptive_generator(sbm.graph, sbm.features, sbm.labels, poison, cfg)
    return trig, poison


@pytest.mark.parametrize("kind", ["gta-s", "ugba-s"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_adaptive_objective_rises(sbm, kind, seed):
    trig, _ = _adaptive(sbm, kind, seed=seed, epochs=10)
    tr = np.array(trig.objective_trace)
    assert len(tr) == 10
    # under a fixed surrogate every generator phase is an ascent
    assert (tr >= np.array(trig.phase_start)).all()
    assert tr[-1] > tr[0]


def test_unnoticeable_penalty_forces_similarity(sbm):
    trig, poison = _adaptive(sbm, "ugba-s", lam=1e6)
    xa = sbm.features[poison]
    feats = trig.node_features(xa)
    cos, _, _, _ = A._cosine_rows(feats, np.broadcast_to(xa[:, None], feats.shape))
    assert cos.min() >= 0.99


def test_adaptive_triggers_are_node_specific_and_deterministic(sbm):
    a, poison = _adaptive(sbm, "gta-s", seed=3)
    b, _ = _adaptive(sbm, "gta-s", seed=3)
    fa = a.node_features(sbm.features[poison])
    np.testing.assert_array_equal(fa, b.node_features(sbm.features[poison]))
    assert not np.allclose(fa[0], fa[1])
    np.testing.assert_array_equal(a.adjacency, np.ones((3, 3)) - np.eye(3))
    lo, hi = sbm.features.min(0), sbm.features.max(0)
    assert (fa >= lo - 1e-12).all() and (fa <= hi + 1e-12).all()


@pytest.mark.parametrize("kind", A.ATTACKS)
def test_run_attack(sbm, kind):
    cfg = A.AttackConfig(kind=kind, rho=0.05, generator_epochs=2, seed=1)
    pois, trig = A.run_attack(sbm.graph, sbm.features, sbm.labels, cfg, pool=np.arange(200))
    assert len(pois.poison_nodes) == 10
    assert pois.graph.n == 230
    assert trig.t == 3


def test_trigger_round_trip(tmp_path, sbm):
    trig, poison = _adaptive(sbm, "gta-s")
    A.save_trigger(trig, tmp_path / "trig")
    back = A.load_trigger(tmp_path / "trig")
    xa = sbm.features[poison]
    np.testing.assert_array_equal(back.node_features(xa), trig.node_features(xa))
    sba = A.generate_sba_trigger(3, 0.5, "gen", sbm.features, seed=0)
    A.save_trigger(sba, tmp_path / "sba")
    back = A.load_trigger(tmp_path / "sba")
    np.testing.assert_array_equal(back.features, sba.features)


def test_prune_defense_examples():
    # path 0-1-2 with node 2 orthogonal to node 1
    g = Graph.from_edges(3, [0, 1], [1, 2])
    x = np.array([[1.0, 0.0], [1.0, 0.1], [0.0, 1.0]])
    y = np.array([0, 1, 1])
    out, yl, disc = A.prune_defense(g, x, y, "prune", 0.5)
    assert out.has_edge(0, 1) and not out.has_edge(1, 2)
    assert not disc.any()
    out, _, disc = A.prune_defense(g, x, y, "prune_ld", 0.5)
    np.testing.assert_array_equal(disc, [False, True, True])
    # zero-norm features count as cosine 0
    out, _, _ = A.prune_defense(g, np.array([[0.0, 0], [1, 0], [1, 0]]), y, "prune", 0.1)
    assert not out.has_edge(0, 1) and out.has_edge(1, 2)
    with pytest.raises(ValueError):
        A.prune_defense(g, x, y, "drop")


def test_config_validation():
    with pytest.raises(ValueError):
        A.AttackConfig(kind="nettack")
    with pytest.raises(ValueError):
        A.AttackConfig(rho=0.0)
    with pytest.raises(ValueError):
        A.AttackConfig(t=0)
    assert A.AttackConfig(kind="ugba-s").selection == "cluster"
    assert A.AttackConfig(kind="gta-s").penalty == 0.0


def test_poisoned_training_learns_backdoor(sbm):
    cfg = A.AttackConfig(kind="gta-s", rho=0.1, target_label=0, seed=0)
    pois, trig = A.run_attack(sbm.graph, sbm.features, sbm.labels, cfg, pool=np.arange(100, 200),
                              num_classes=2)
    m = gnn.train(pois.graph, pois.features, pois.labels, np.arange(pois.graph.n),
                  gnn.Architecture("gcn", hidden_dim=16), gnn.TrainConfig(epochs=150), num_classes=2)
    targets = np.arange(100, 200)
    g2, x2, _ = A.attach_test_triggers(sbm.graph, sbm.features, targets, trig)
    assert (gnn.predict(m, g2, x2, targets) == 0).mean() > 0.9
    assert (gnn.predict(m, sbm.graph, sbm.features, targets) == 0).mean() < 0.1
