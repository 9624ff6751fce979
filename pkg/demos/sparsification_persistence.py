"""Do triggers survive edge sparsification? Cora-sized SBM stand-in.

Poisons the graph with the simplified UGBA attack (t=3, rho=0.05) and sweeps
the keep ratio s for each sparsifier, printing prune_ratio (attach edge cut),
the path-based variant and the post-sparsification poisoning ratio.

    python3 demos/sparsification_persistence.py [--methods re,rne,degree]
"""
import argparse

from grbench import attack as A
from grbench import harness

ap = argparse.ArgumentParser()
ap.add_argument("--methods", default="re,rne,degree,simi,fire,scan")
ap.add_argument("--ratios", default="0.9,0.7,0.5")
ap.add_argument("--attack", default="ugba-s")
ap.add_argument("--jobs", type=int, default=4)
args = ap.parse_args()

ratios = [float(s) for s in args.ratios.split(",")]
methods = args.methods.split(",")
blocks = (387,) * 6 + (386,)
cfg = harness.ExperimentConfig(
    dataset="sbm-cora", sbm_blocks=blocks, sbm_p_in=0.0075, sbm_p_out=0.0004, sbm_dim=64,
    reductions=[harness.Reduction("sparsify", m, s) for m in methods for s in ratios],
    attacks=[args.attack], seeds=[0], attack=A.AttackConfig(kind=args.attack, t=3, rho=0.05))
rows = harness.run_experiment(cfg, jobs=args.jobs)

print(f"{'method':<8}{'s':>6}{'prune':>8}{'spar_rho':>10}{'ASR':>8}{'ACC':>8}")
for r in rows:
    if r.error:
        print(f"{r.reduction_method:<8}{r.ratio:6.2f}  error: {r.error}")
        continue
    print(f"{r.reduction_method:<8}{r.ratio:6.2f}{r.prune_ratio:8.1f}{r.spar_rho:10.2f}"
          f"{r.asr:8.3f}{r.acc:8.3f}")
