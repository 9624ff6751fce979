"""Command line entry point: reduce, attack, train, eval, bench, analyze."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attack as atk
from . import coarsen as crs
from . import gnn, harness, metrics
from . import sparsify as spr
from .graph import Dataset, generate_sbm, load_cora, load_dataset, save_dataset, split_dataset

log = logging.getLogger("grbench")


def _add_data_args(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--edges", help="edge list file ('u v [w]' per line)")
    g.add_argument("--features", help="feature CSV")
    g.add_argument("--labels", help="label file, one integer per line")
    g.add_argument("--cora-dir", help="directory with cora.content and cora.cites")
    g.add_argument("--sbm", help="synthetic graph BLOCKS:P_IN:P_OUT:DIM[:SEED], "
                                 "e.g. 100,100,100:0.05:0.005:32")


def _load(args) -> Dataset:
    if args.cora_dir:
        return load_cora(args.cora_dir)
    if args.edges:
        if not (args.features and args.labels):
            raise SystemExit("--edges needs --features and --labels")
        return load_dataset(args.edges, args.features, args.labels)
    if args.sbm:
        parts = args.sbm.split(":")
        if len(parts) not in (4, 5):
            raise SystemExit("--sbm expects BLOCKS:P_IN:P_OUT:DIM[:SEED]")
        blocks = [int(b) for b in parts[0].split(",")]
        seed = int(parts[4]) if len(parts) == 5 else 0
        return generate_sbm(blocks, float(parts[1]), float(parts[2]), int(parts[3]), seed)
    raise SystemExit("no dataset given (use --edges/--features/--labels, --cora-dir or --sbm)")


def _arch(args) -> gnn.Architecture:
    return gnn.Architecture(args.arch, hidden_dim=args.hidden, heads=args.heads,
                            dropout=args.dropout)


def _add_model_args(p):
    p.add_argument("--arch", default="gcn", choices=gnn.KINDS)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--dropout", type=float, default=0.5)


# ----------------------------------------------------------------------------


def cmd_reduce(args):
    ds = _load(args)
    out = {"method": args.method, "ratio": args.ratio}
    if args.method in crs.METHODS:
        res = crs.coarsen(ds.graph, ds.features, ds.labels,
                          crs.CoarsenConfig(method=args.method, ratio=args.ratio, seed=args.seed),
                          num_classes=ds.num_classes)
        red = Dataset(res.coarse_graph, res.coarse_features, res.coarse_labels, ds.num_classes)
        np.savetxt(args.out + ".partition", res.partition.assign, fmt="%d")
        out.update(nodes=res.coarse_graph.n, achieved_ratio=res.achieved_ratio)
    else:
        gs = spr.sparsify(ds.graph, spr.SparsifyConfig(method=args.method, ratio=args.ratio,
                                                       seed=args.seed))
        red = Dataset(gs, ds.features, ds.labels, ds.num_classes)
        out.update(edges=gs.num_edges,
                   achieved_ratio=gs.num_edges / ds.graph.num_edges if ds.graph.num_edges else 1.0)
    save_dataset(red, args.out)
    print(json.dumps(out))
    return 0


def cmd_attack(args):
    ds = _load(args)
    cfg = atk.AttackConfig(kind=args.attack, t=args.t, rho=args.rho, target_label=args.target_label,
                           er_p=args.er_p, unnoticeable_lambda=args.lam, seed=args.seed,
                           generator_epochs=args.generator_epochs)
    split = split_dataset(ds.graph, args.split_seed)
    pool = np.sort(np.concatenate([split.labeled_train, split.unlabeled]))
    pois, trig = atk.run_attack(ds.graph, ds.features, ds.labels, cfg, pool=pool,
                                labeled=split.labeled_train, num_classes=ds.num_classes,
                                val_nodes=split.validation)
    save_dataset(Dataset(pois.graph, pois.features, pois.labels, ds.num_classes), args.out)
    atk.save_trigger(trig, args.out + ".trigger")
    book = {"poison_nodes": pois.poison_nodes.tolist(),
            "trigger_nodes": pois.trigger_nodes.tolist(),
            "original_labels": pois.original_labels.tolist(),
            "target_label": pois.target_label, "n_clean": pois.n_clean,
            "split_seed": args.split_seed}
    Path(args.out + ".poison.json").write_text(json.dumps(book))
    print(json.dumps({"poison_nodes": len(pois.poison_nodes),
                      "trigger_nodes": int(pois.trigger_nodes.size), "nodes": pois.graph.n}))
    return 0


def _train_nodes(ds, split, poison_file):
    nodes = split.labeled_train
    if poison_file:
        book = json.loads(Path(poison_file).read_text())
        extra = np.concatenate([np.asarray(book["poison_nodes"]),
                                np.asarray(book["trigger_nodes"]).ravel()])
        nodes = np.union1d(nodes, extra.astype(np.int64))
    return nodes


def cmd_train(args):
    ds = _load(args)
    n_split = ds.graph.n
    if args.poison:
        n_split = json.loads(Path(args.poison).read_text())["n_clean"]
    split = split_dataset(n_split, args.split_seed)
    nodes = _train_nodes(ds, split, args.poison)
    cfg = gnn.TrainConfig(epochs=args.epochs, learning_rate=args.lr, weight_decay=args.wd,
                          seed=args.seed, early_stop_patience=args.patience)
    model = gnn.train(ds.graph, ds.features, ds.labels, nodes, _arch(args), cfg,
                      val_nodes=split.validation, num_classes=ds.num_classes)
    gnn.save_model(model, args.out)
    x = gnn.as_model_input(ds.features)
    print(json.dumps({"val_acc": gnn.accuracy(model, ds.graph, x, ds.labels, split.validation),
                      "test_acc": gnn.accuracy(model, ds.graph, x, ds.labels, split.clean_test),
                      "epochs": len(model.history["loss"])}))
    return 0


def cmd_eval(args):
    ds = _load(args)
    model = gnn.load_model(args.model)
    split = split_dataset(ds.graph, args.split_seed)
    x = gnn.as_model_input(ds.features)
    out = {"acc": metrics.clean_accuracy(model, ds.graph, x, split.clean_test, ds.labels)}
    if args.trigger:
        trig = atk.load_trigger(args.trigger)
        g_t, x_t, _ = atk.attach_test_triggers(ds.graph, ds.features, split.target, trig)
        out["asr"] = metrics.attack_success_rate(model, g_t, gnn.as_model_input(x_t), split.target,
                                                 args.target_label, ds.labels)
    print(json.dumps(out))
    return 0


def profiles_path(report) -> Path:
    report = Path(report)
    return report.with_name(report.stem + ".profiles.csv")


def cmd_bench(args):
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    if args.seeds:
        overrides["matrix.seeds"] = args.seeds
    if args.architectures:
        overrides["matrix.architectures"] = args.architectures
    cfg = harness.load_config(args.config, overrides)
    out = args.out or cfg.output
    rows = harness.run_experiment(cfg, jobs=args.jobs)
    harness.emit_report(rows, args.format, out)
    harness.emit_profiles(rows, profiles_path(out))
    failed = [r for r in rows if r.error]
    for r in failed:
        log.error("%s %s:%s %s %s %s seed=%d: %s", r.dataset, r.reduction_method, r.ratio, r.attack,
                  r.defense, r.model, r.seed, r.error)
    print(f"{len(rows)} rows written to {out} ({len(failed)} failed)")
    return 1 if failed else 0


def cmd_analyze(args):
    rows = harness.read_report(args.report)
    agg = harness.aggregate(rows)
    cols = ["dataset", "reduction_method", "ratio", "attack", "defense", "runs", "asr", "acc",
            "m", "l", "d", "prune_ratio", "spar_rho", "achieved_ratio"]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(cols)
    for rec in agg:
        w.writerow(["" if rec[c] is None else (f"{rec[c]:.4f}" if isinstance(rec[c], float)
                                                else rec[c]) for c in cols])
    if args.emit:
        src = profiles_path(args.report)
        if not src.exists():
            raise SystemExit(f"profile sidecar {src} not found")
        with open(src) as fh:
            recs = list(csv.DictReader(fh))
        emit = Path(args.emit)
        with open(emit, "w", newline="") as fh:
            pw = csv.DictWriter(fh, fieldnames=harness.PROFILE_COLUMNS, lineterminator="\n")
            pw.writeheader()
            pw.writerows(recs)
        cell_cols = ("dataset", "reduction_method", "ratio", "attack", "defense", "model")
        cells = {}
        for r in recs:
            cells.setdefault(tuple(r[c] for c in cell_cols), []).append(r)
        hist = emit.with_name(emit.stem + ".hist.csv")
        with open(hist, "w", newline="") as fh:
            hw = csv.writer(fh, lineterminator="\n")
            hw.writerow(list(cell_cols) + ["field", "outcome", "bin_lo", "bin_hi", "count"])
            for key, rs in cells.items():
                profs = [metrics.NodeProfile(int(r["node"]), r["outcome"], int(r["degree"]),
                                             float(r["log_degree"]), float(r["two_hop_density"]),
                                             int(r["label"])) for r in rs]
                for fld in ("degree", "two_hop_density"):
                    for outcome, lo, hi, c in metrics.profile_histogram(profs, fld, args.bins):
                        hw.writerow(list(key) + [fld, outcome, f"{lo:.4f}", f"{hi:.4f}", c])
        print(f"{len(recs)} profiles written to {emit}; histogram bins in {hist}", file=sys.stderr)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="grbench",
                                 description="Graph reduction vs. GNN backdoor workbench")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("reduce", help="coarsen or sparsify a graph")
    _add_data_args(p)
    p.add_argument("--method", required=True, choices=crs.METHODS + spr.METHODS)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output file prefix")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("attack", help="poison a graph with backdoor triggers")
    _add_data_args(p)
    p.add_argument("--attack", default="ugba-s", choices=atk.ATTACKS)
    p.add_argument("--t", type=int, default=3)
    p.add_argument("--rho", type=float, default=0.05)
    p.add_argument("--target-label", type=int, default=0)
    p.add_argument("--er-p", type=float, default=0.8)
    p.add_argument("--lam", type=float, default=0.1, help="ugba-s similarity penalty")
    p.add_argument("--generator-epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output file prefix")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("train", help="train a node classifier")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--wd", type=float, default=5e-4)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--poison", help="bookkeeping JSON written by `attack` (adds poison/trigger "
                                    "nodes to the training set)")
    p.add_argument("--out", required=True, help="checkpoint prefix")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clean accuracy and ASR of a checkpoint")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--trigger", help="trigger checkpoint prefix written by `attack`")
    p.add_argument("--target-label", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run an experiment matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--format", default="csv", choices=("csv", "json-lines"))
    p.add_argument("--seeds", help="comma-separated seeds (overrides the config)")
    p.add_argument("--architectures", help="comma-separated architectures (overrides the config)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config key")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="aggregate a report and export node profiles")
    p.add_argument("--report", required=True)
    p.add_argument("--emit", help="write node profiles here (+ <stem>.hist.csv)")
    p.add_argument("--bins", type=int, default=10)
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
