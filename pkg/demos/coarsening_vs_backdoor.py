"""Does coarsening wash out a backdoor? Cora-sized SBM stand-in.

Trains on a 7-block SBM (2708 nodes) poisoned by each attack in turn, then
compares ASR/ACC on the full graph against VN coarsening at c=0.5, with the
trigger statistics m, l, d for the coarsened runs.

    python3 demos/coarsening_vs_backdoor.py [--seeds 5] [--jobs 4]
"""
import argparse

import numpy as np

from grbench import attack as A
from grbench import harness

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", type=int, default=5)
ap.add_argument("--jobs", type=int, default=4)
ap.add_argument("--attacks", default="sba-samp,gta-s,ugba-s")
ap.add_argument("--ratio", type=float, default=0.5)
args = ap.parse_args()

blocks = (387,) * 6 + (386,)
cfg = harness.ExperimentConfig(
    dataset="sbm-cora", sbm_blocks=blocks, sbm_p_in=0.0075, sbm_p_out=0.0004, sbm_dim=64,
    reductions=[harness.Reduction(), harness.Reduction("coarsen", "vn", args.ratio)],
    attacks=args.attacks.split(","), seeds=list(range(args.seeds)),
    attack=A.AttackConfig(t=3, rho=0.05))
rows = harness.run_experiment(cfg, jobs=args.jobs)
errs = [r for r in rows if r.error]
for r in errs:
    print("error:", r.key, r.error)

print(f"{'attack':<10}{'reduction':<12}{'ASR':>8}{'ACC':>8}{'m':>8}{'l':>8}{'d':>8}")
for atk, red in [(a, r) for a in args.attacks.split(",") for r in ("none", "vn")]:
    sel = [r for r in rows if r.attack == atk and r.reduction_method == red and not r.error]

    def mean(col):
        vals = [getattr(r, col) for r in sel if getattr(r, col) is not None]
        return np.nanmean(vals) if vals else float("nan")

    print(f"{atk:<10}{red:<12}{mean('asr'):8.3f}{mean('acc'):8.3f}{mean('m'):8.1f}{mean('l'):8.1f}{mean('d'):8.3f}")
