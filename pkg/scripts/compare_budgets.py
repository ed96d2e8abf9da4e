#!/usr/bin/env python3
"""Constrained-vs-unconstrained search comparison.

Runs one unconstrained search to establish the cost baseline, then one
constrained search per requested budget fraction with the upper bound set
to that fraction of the baseline's final expected cost.  Every derived
architecture is retrained from scratch over several seeds and the script
prints a table of exact costs and held-out accuracies.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from rcnas.cost import ConstraintBox, exact_cost
from rcnas.data import make_dataset
from rcnas.network import NetworkPlan
from rcnas.projection import ProjectionConfig
from rcnas.search import SearchConfig, retrain_eval, run_search


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", type=Path, default=Path("runs/compare"), help="output directory")
    p.add_argument("--fractions", type=float, nargs="+", default=[0.6])
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-eval", type=int, default=256)
    p.add_argument("--epochs", type=int, default=8, help="search epochs")
    p.add_argument("--retrain-epochs", type=int, default=20)
    p.add_argument("--retrain-seeds", type=int, default=3)
    p.add_argument("--seed", type=int, default=3)
    return p.parse_args()


def main():
    args = parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    plan = NetworkPlan(
        n_cells=4, init_channels=4, n_classes=4, image_hw=(16, 16), n_nodes=5, k_levels=3
    )
    ds = make_dataset("shapes", n=args.n_train, hw=(16, 16), seed=11)
    eval_ds = make_dataset("shapes", n=args.n_eval, hw=(16, 16), seed=12)
    cfg = SearchConfig(
        epochs=args.epochs,
        batch_size=16,
        e_u=8,
        warm_start_multiplier=2,
        seed=args.seed,
        theta_lr=3e-3,
    )

    def retrain(arch):
        accs = [
            retrain_eval(
                arch, plan, ds, eval_ds,
                epochs=args.retrain_epochs, batch_size=64, seed=s, lr=0.1,
            ).accuracy
            for s in range(args.retrain_seeds)
        ]
        return float(np.mean(accs)), accs

    rows = []
    t0 = time.monotonic()
    free = ConstraintBox(lower=np.zeros(2), upper=np.full(2, np.inf))
    base = run_search(plan, ds, free, cfg)
    base_exact = exact_cost(base.arch, plan)
    acc, accs = retrain(base.arch)
    rows.append({
        "budget": "none", "phi_params": float(base.phi[0]), "phi_flops": float(base.phi[1]),
        "exact_params": float(base_exact[0]), "exact_flops": float(base_exact[1]),
        "feasible": bool(base.feasible), "mean_acc": acc, "accs": accs,
        "arch": base.arch.to_json_dict(),
    })
    print(f"baseline: exact {base_exact}, mean acc {acc:.3f}  [{time.monotonic()-t0:.0f}s]")

    proj = ProjectionConfig(lambda1=2.0, lambda2=2.0, gamma=0.9, max_iters=500, lr=3e-4)
    for frac in args.fractions:
        box = ConstraintBox(lower=np.zeros(2), upper=frac * base.phi)
        res = run_search(plan, ds, box, cfg, proj)
        ex = exact_cost(res.arch, plan)
        acc, accs = retrain(res.arch)
        rows.append({
            "budget": frac, "phi_params": float(res.phi[0]), "phi_flops": float(res.phi[1]),
            "exact_params": float(ex[0]), "exact_flops": float(ex[1]),
            "feasible": bool(res.feasible), "mean_acc": acc, "accs": accs,
            "arch": res.arch.to_json_dict(),
        })
        print(
            f"budget {frac:.2f}: exact {ex} "
            f"(flops ratio {ex[1]/base_exact[1]:.3f}), feasible {res.feasible}, "
            f"mean acc {acc:.3f}  [{time.monotonic()-t0:.0f}s]"
        )

    (args.out / "comparison.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(f"\n{'budget':>8} {'params':>10} {'flops':>12} {'acc':>7}")
    for r in rows:
        print(f"{str(r['budget']):>8} {r['exact_params']:>10.0f} {r['exact_flops']:>12.0f} {r['mean_acc']:>7.3f}")
    print(f"\nwrote {args.out / 'comparison.json'}")


if __name__ == "__main__":
    main()
