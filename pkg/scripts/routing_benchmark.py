"""Train dr / wta / frozen routing systems over several seeds and tabulate final metrics.

    python scripts/routing_benchmark.py --seeds 5 --eval-mode greedy
"""
import argparse
import json

import numpy as np

from filtered_pg.harness import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--env", default="routing-basic")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--estimators", default="dr,wta,frozen")
    ap.add_argument("--eval-mode", default="greedy", choices=["greedy", "stochastic"])
    ap.add_argument("--n-updates", type=int, default=150)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()

    table = {}
    for est in args.estimators.split(","):
        finals = []
        for seed in range(args.seeds):
            cfg = ExperimentConfig(env=args.env, estimator=est, seed=seed,
                                   n_updates=args.n_updates, eval_mode=args.eval_mode)
            series, _ = run_experiment(cfg)
            finals.append(series[-1])
        ret = np.array([r.mean_return for r in finals])
        reg = np.array([r.regret for r in finals])
        table[est] = {
            "return_mean": float(ret.mean()),
            "return_se": float(ret.std(ddof=1) / np.sqrt(len(ret))) if len(ret) > 1 else 0.0,
            "regret_mean": float(reg.mean()),
            "entropy_mean": float(np.mean([r.routing_entropy for r in finals])),
            "brier_mean": float(np.mean([r.brier for r in finals])),
            "per_seed_return": ret.tolist(),
        }

    print(f"{'estimator':<10} {'return':>16} {'regret':>8} {'entropy':>8} {'brier':>8}")
    for est, row in table.items():
        print(f"{est:<10} {row['return_mean']:>8.3f} ± {row['return_se']:.3f} "
              f"{row['regret_mean']:>8.3f} {row['entropy_mean']:>8.3f} {row['brier_mean']:>8.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(table, fh, indent=2)


if __name__ == "__main__":
    main()
