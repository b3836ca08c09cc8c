"""Command-line entry point: ``run``, ``compare``, ``verify`` and ``presets``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .harness import emit_results, load_config, run_experiment
from .presets import list_presets

LOG_ENV = "FILTERED_PG_LOG"

SUMMARY_COLUMNS = [
    "config", "n_seeds", "mean_return", "mean_return_se", "regret", "regret_se",
    "router_accuracy", "oracle_accuracy", "routing_entropy", "brier", "specialization",
]


def _run_one(config_path: str, seed: int, out_dir: str, checkpoint_every: int = 0, resume: str | None = None):
    cfg = load_config(config_path, seed=seed)
    ckpt = Path(out_dir) / "checkpoints" if checkpoint_every else None
    series, report = run_experiment(cfg, checkpoint_dir=ckpt, checkpoint_every=checkpoint_every, resume=resume)
    emit_results(series, report, out_dir)
    return report


def cmd_run(args) -> int:
    report = _run_one(args.config, args.seed, args.out, args.checkpoint_every, args.resume)
    final = report["final"]
    print(f"{report['config']['name']} seed {args.seed}: final mean_return {final['mean_return']:.4f}"
          + (f", regret {final['regret']:.4f}" if final.get("regret") is not None else ""))
    print(f"wrote {Path(args.out) / 'metrics.csv'} and {Path(args.out) / 'report.json'}")
    return 0


def _mean_se(values):
    vals = np.array([v for v in values if v is not None], dtype=float)
    if vals.size == 0:
        return None, None
    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), se


def summarize(name: str, reports: list) -> dict:
    finals = [r["final"] for r in reports]
    row = {"config": name, "n_seeds": len(reports)}
    row["mean_return"], row["mean_return_se"] = _mean_se(f["mean_return"] for f in finals)
    row["regret"], row["regret_se"] = _mean_se(f["regret"] for f in finals)
    for key in ("router_accuracy", "oracle_accuracy", "routing_entropy", "brier", "specialization"):
        row[key] = _mean_se(f[key] for f in finals)[0]
    return row


def cmd_compare(args) -> int:
    configs = [c for c in args.configs.split(",") if c]
    if not configs:
        raise ConfigError("--configs needs at least one file")
    # fail fast on bad configs before any run starts
    names = []
    for path in configs:
        load_config(path).resolve()
        names.append(Path(path).stem)
    jobs = [(path, name, seed) for path, name in zip(configs, names) for seed in range(args.seed_base, args.seed_base + args.seeds)]
    out = Path(args.out)
    targets = [str(out / name / f"seed_{seed}") for _, name, seed in jobs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_run_one, [j[0] for j in jobs], [j[2] for j in jobs], targets))
    else:
        reports = [_run_one(path, seed, t) for (path, _, seed), t in zip(jobs, targets)]
    rows = []
    for name in names:
        rows.append(summarize(name, [r for (_, n, _), r in zip(jobs, reports) if n == name]))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    with open(out / "summary.json", "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    width = max(len(r["config"]) for r in rows)
    print(f"{'config':<{width}}  seeds  mean_return (se)   regret (se)")
    for r in rows:
        reg = "" if r["regret"] is None else f"{r['regret']:.4f} ({r['regret_se']:.4f})"
        print(f"{r['config']:<{width}}  {r['n_seeds']:>5}  {r['mean_return']:.4f} ({r['mean_return_se']:.4f})   {reg}")
    return 0


def cmd_verify(args) -> int:
    from .verify import CHECKS, run_checks

    numbers = sorted(CHECKS) if not args.only else [int(x) for x in args.only.split(",")]
    unknown = [n for n in numbers if n not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown check numbers {unknown}; available 1-{len(CHECKS)}")
    results = run_checks(numbers)
    passed = sum(r.ok for r in results)
    print(f"{passed}/{len(results)} checks passed")
    if args.json:
        payload = [{"number": r.number, "name": r.name, "passed": r.passed, "within_time": r.within_time,
                    "seconds": r.seconds, "limit": r.limit, "detail": r.detail} for r in results]
        Path(args.json).write_text(json.dumps(payload, indent=2, default=float) + "\n")
    return 0 if passed == len(results) else 1


def cmd_presets(args) -> int:
    rows = list_presets()
    if args.json:
        print(json.dumps(rows, indent=2))
        return 0
    for r in rows:
        print(f"{r['name']:<26} K={r['K']} V={r['V']} T={r['T']} contexts={r['n_contexts']:<3} "
              f"{r['mechanism']:<15} optimum={r['optimum']:.3f}  {r['summary']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="filtered-pg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", required=True)
    run.add_argument("--checkpoint-every", type=int, default=0)
    run.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    run.set_defaults(fn=cmd_run)

    cmp_ = sub.add_parser("compare", help="sweep several configurations over seeds")
    cmp_.add_argument("--configs", required=True, help="comma-separated config files")
    cmp_.add_argument("--seeds", type=int, default=5)
    cmp_.add_argument("--seed-base", type=int, default=0)
    cmp_.add_argument("--out", required=True)
    cmp_.add_argument("--jobs", type=int, default=1)
    cmp_.set_defaults(fn=cmd_compare)

    ver = sub.add_parser("verify", help="run the acceptance checks")
    ver.add_argument("--only", default="", help="comma-separated check numbers")
    ver.add_argument("--json", default=None, help="also write results to this file")
    ver.set_defaults(fn=cmd_verify)

    pre = sub.add_parser("presets", help="list embedded environments")
    pre.add_argument("--json", action="store_true")
    pre.set_defaults(fn=cmd_presets)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
