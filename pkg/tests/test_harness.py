import csv
import json

import numpy as np
import pytest

from grbench import cli, gnn, harness
from grbench import coarsen as crs
from grbench.graph import generate_sbm

SMALL = """
[dataset]
name = toy
sbm_blocks = 40, 40, 40
sbm_p_in = 0.1
sbm_p_out = 0.01
sbm_dim = 8

[matrix]
reductions = none, coarsen:vn:0.5, sparsify:rne:0.7
attacks = sba-samp
architectures = gcn
seeds = 0

[attack]
rho = 0.05
generator_epochs = 2

[train]
epochs = 30
"""


def write_config(tmp_path, text=SMALL, name="exp.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def drop_runtime(path):
    rows = list(csv.reader(open(path)))
    i = rows[0].index("runtime_s")
    return [r[:i] + r[i + 1:] for r in rows]


def test_reduction_and_defense_parsing():
    assert harness.Reduction.parse("none") == harness.Reduction()
    r = harness.Reduction.parse("coarsen:VN:0.5")
    assert (r.kind, r.method, r.ratio) == ("coarsen", "vn", 0.5)
    assert harness.Reduction.parse("sparsify:rne:0.7").method == "rne"
    for bad in ("coarsen:vn", "coarsen:xx:0.5", "sparsify:rne:1.5", "shrink:vn:0.5"):
        with pytest.raises(ValueError):
            harness.Reduction.parse(bad)
    assert harness.Defense.parse("prune").threshold == 0.1
    assert harness.Defense.parse("prune_ld:0.3").label == "prune_ld:0.3"
    with pytest.raises(ValueError):
        harness.Defense.parse("filter")


def test_load_config_and_overrides(tmp_path):
    cfg = harness.load_config(write_config(tmp_path), {"matrix.seeds": "1,2", "train.epochs": "7"})
    assert cfg.dataset == "toy"
    assert cfg.sbm_blocks == (40, 40, 40)
    assert [r.method for r in cfg.reductions] == ["none", "vn", "rne"]
    assert cfg.seeds == [1, 2]
    assert cfg.train.epochs == 7
    assert cfg.attack.rho == 0.05 and cfg.attack.generator_epochs == 2
    with pytest.raises(ValueError):
        harness.load_config(write_config(tmp_path), {"matrix.architectures": "mlp"})
    with pytest.raises(ValueError):
        harness.ExperimentConfig(seeds=[])


def test_stage_seeds_depend_on_run_seed_only():
    a, b = harness.stage_seeds(3), harness.stage_seeds(3)
    assert a == b
    assert len(set(a.values())) == 5
    assert a != harness.stage_seeds(4)


@pytest.fixture(scope="module")
def toy():
    return generate_sbm([40, 40, 40], 0.1, 0.01, 8, seed=0)


def small_cfg(**kw):
    base = dict(train=gnn.TrainConfig(epochs=30), hidden_dim=16)
    base.update(kw)
    return harness.ExperimentConfig(**base)


def test_no_attack_cell(toy):
    rows = harness.run_experiment(small_cfg(), dataset=toy)
    assert len(rows) == 1
    r = rows[0]
    assert r.error is None
    assert r.asr is None and r.m is None and r.prune_ratio is None
    assert r.achieved_ratio == 1.0
    assert 0.8 <= r.acc <= 1.0


def test_row_count_three_archs_five_seeds(toy):
    cfg = small_cfg(architectures=["gcn", "sage", "gat"], seeds=[0, 1, 2, 3, 4],
                    train=gnn.TrainConfig(epochs=5))
    rows = harness.run_experiment(cfg, dataset=toy)
    assert len(rows) == 15
    assert [r.key for r in rows] == sorted(r.key for r in rows)
    assert {(r.model, r.seed) for r in rows} == {(a, s) for a in ("gcn", "sage", "gat")
                                                 for s in range(5)}


def test_attacked_matrix_fills_trigger_stats(toy):
    cfg = small_cfg(reductions=[harness.Reduction.parse(t) for t in
                                ("none", "coarsen:vn:0.5", "sparsify:rne:0.7")],
                    attacks=["sba-samp"], defenses=[harness.Defense(), harness.Defense("prune")])
    rows = harness.run_experiment(cfg, dataset=toy)
    assert len(rows) == 6
    for r in rows:
        assert r.error is None
        assert 0 <= r.asr <= 1 and 0 <= r.acc <= 1
        assert r.profiles
        if r.reduction_method == "vn":
            assert r.m is not None and abs(r.achieved_ratio - 0.5) <= 0.05
        if r.reduction_method == "rne":
            assert r.prune_ratio is not None and r.spar_rho is not None
    # poisoning is shared by cells with the same seed and attack
    none_rows = [r for r in rows if r.reduction_method == "none"]
    assert none_rows[0].profiles[0].node == none_rows[1].profiles[0].node


def test_error_cell_is_recorded(toy):
    cfg = small_cfg(attacks=["sba-samp"], attack=harness.atk.AttackConfig(rho=0.001))
    rows = harness.run_experiment(cfg, dataset=toy)
    assert rows[0].error and "poison" in rows[0].error


def row(**kw):
    base = dict(dataset="toy", reduction_method="vn", ratio=0.5, attack="ugba-s",
                defense="none", model="gcn", seed=0, asr=0.91234567, acc=0.8, m=12.5,
                l=float("nan"), d=1.0, achieved_ratio=0.5, runtime_s=1.23456,
                memory_proxy_bytes=1234)
    base.update(kw)
    return harness.ReportRow(**base)


def test_emit_csv_round_trip(tmp_path):
    p = harness.emit_report([row()], "csv", tmp_path / "r.csv")
    lines = p.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0] == ("dataset,reduction_method,ratio,attack,defense,model,seed,asr,acc,m,l,d,"
                        "prune_ratio,spar_rho,achieved_ratio,runtime_s,memory_proxy_bytes")
    assert lines[1] == "toy,vn,0.5000,ugba-s,none,gcn,0,0.9123,0.8000,12.5000,,1.0000,,,0.5000,1.2346,1234"
    back = harness.read_report(p)[0]
    assert back["asr"] == 0.9123 and back["l"] is None and back["memory_proxy_bytes"] == 1234
    assert back["model"] == "gcn" and back["seed"] == 0


def test_emit_json_lines(tmp_path):
    p = harness.emit_report([row(), row(seed=1)], "json-lines", tmp_path / "r.jsonl")
    recs = [json.loads(x) for x in p.read_text().splitlines()]
    assert len(recs) == 2
    assert list(recs[0]) == list(harness.REPORT_COLUMNS)
    assert recs[0]["l"] is None and recs[1]["seed"] == 1
    assert harness.read_report(p) == recs


def test_emit_errors(tmp_path):
    with pytest.raises(ValueError):
        harness.emit_report([], "csv", tmp_path / "x.csv")
    with pytest.raises(ValueError):
        harness.emit_report([row()], "xml", tmp_path / "x.xml")
    with pytest.raises(OSError):
        harness.emit_report([row()], "csv", tmp_path / "missing" / "x.csv")


def test_memory_proxy_formula():
    ds = generate_sbm([50, 50], 0.1, 0.01, 20, seed=0)
    arch = gnn.Architecture("gcn", hidden_dim=16)
    base = harness.memory_proxy(ds.graph, ds.features, arch)
    n, nnz = ds.graph.n, ds.graph.adj.nnz
    assert base == n * 20 * 8 + nnz * 12 + (n + 1) * 4 + 2 * n * 16 * 8
    wider = harness.memory_proxy(ds.graph, np.zeros((n, 40)), arch)
    widest = harness.memory_proxy(ds.graph, np.zeros((n, 60)), arch)
    assert widest - wider == wider - base == n * 20 * 8
    gat = gnn.Architecture("gat", hidden_dim=16, heads=4)
    assert harness.memory_proxy(ds.graph, ds.features, gat) - base == 2 * n * 16 * 3 * 8


def test_memory_proxy_identity_coarsening():
    ds = generate_sbm([30, 30], 0.2, 0.02, 10, seed=1)
    arch = gnn.Architecture("gcn", hidden_dim=16)
    res = crs.coarsen(ds.graph, ds.features, ds.labels, crs.CoarsenConfig(method="vn", ratio=1.0))
    assert harness.memory_proxy(res.coarse_graph, res.coarse_features, arch) == \
        harness.memory_proxy(ds.graph, ds.features, arch)


def test_cli_bench_exit_code_and_determinism(tmp_path):
    cfg = write_config(tmp_path)
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["bench", "--config", str(cfg), "--out", str(out1)]) == 0
    assert cli.main(["bench", "--config", str(cfg), "--out", str(out2), "--jobs", "2",
                     "--seeds", "0"]) == 0
    assert drop_runtime(out1) == drop_runtime(out2)
    assert len(drop_runtime(out1)) == 4
    assert (tmp_path / "a.profiles.csv").exists()
    # a cell that cannot be prepared makes the exit code non-zero
    bad = cli.main(["bench", "--config", str(cfg), "--out", str(tmp_path / "c.csv"),
                    "--set", "attack.rho=0.001"])
    assert bad == 1


def test_cli_analyze(tmp_path, capsys):
    cfg = write_config(tmp_path)
    rep = tmp_path / "r.csv"
    cli.main(["bench", "--config", str(cfg), "--out", str(rep)])
    capsys.readouterr()
    emit = tmp_path / "prof.csv"
    assert cli.main(["analyze", "--report", str(rep), "--emit", str(emit), "--bins", "3"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("dataset,reduction_method,ratio,attack,defense,runs,asr")
    assert len(out) == 4
    hist = list(csv.DictReader(open(tmp_path / "prof.hist.csv")))
    profs = list(csv.DictReader(open(emit)))
    for red in ("none", "vn", "rne"):
        n_prof = sum(p["reduction_method"] == red for p in profs)
        counted = sum(int(h["count"]) for h in hist
                      if h["reduction_method"] == red and h["field"] == "degree")
        assert counted == n_prof > 0


def test_cli_pipeline(tmp_path, capsys):
    sbm = "40,40,40:0.1:0.01:8:0"
    pre = str(tmp_path / "pois")
    assert cli.main(["attack", "--sbm", sbm, "--attack", "sba-gen", "--out", pre]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info == {"poison_nodes": 6, "trigger_nodes": 18, "nodes": 138}
    data = ["--edges", pre + ".edges", "--features", pre + ".features.csv",
            "--labels", pre + ".labels"]
    model = str(tmp_path / "model")
    assert cli.main(["train", *data, "--poison", pre + ".poison.json", "--epochs", "20",
                     "--hidden", "8", "--out", model]) == 0
    assert "test_acc" in json.loads(capsys.readouterr().out)
    assert cli.main(["eval", "--sbm", sbm, "--model", model, "--trigger", pre]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert 0 <= ev["acc"] <= 1 and 0 <= ev["asr"] <= 1
    red = str(tmp_path / "red")
    assert cli.main(["reduce", "--sbm", sbm, "--method", "he", "--ratio", "0.5", "--out", red]) == 0
    assert json.loads(capsys.readouterr().out)["nodes"] == 60
    assert len(open(red + ".partition").read().split()) == 120
