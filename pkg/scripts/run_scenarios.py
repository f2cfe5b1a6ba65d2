#!/usr/bin/env python3
"""Run the four simulation scenarios and write one metrics table per scenario.

Usage: python3 scripts/run_scenarios.py [--out results] [--replications 1000] [--M 100]
       [--scenarios 1 2 3 4] [--seed 0] [--threads N]
"""

import argparse
import logging
from pathlib import Path

from clusterre.simharness import run_scenario, scenario, write_rows_csv


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="results")
    p.add_argument("--replications", type=int, default=1000)
    p.add_argument("--M", type=int, default=100)
    p.add_argument("--scenarios", type=int, nargs="+", default=[1, 2, 3, 4])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n in args.scenarios:
        cfg = scenario(n, M=args.M, M1=args.M // 2, replications=args.replications, seed=args.seed)
        exp, rows = run_scenario(cfg, threads=args.threads)
        write_rows_csv(rows, out / f"scenario{n}.csv")
        print(f"scenario {n}: gamma {exp.meta['gamma']:.3f}, share {exp.meta['share']:.3f}, tau {exp.tau:.3f}")
        print(f"  {'method':9s} {'bias':>7s} {'SD':>6s} {'RMSE':>6s} {'CP':>6s} {'len':>6s} {'CP*':>6s} {'len*':>6s}")
        for r in rows:
            imp = "" if r.cp_improved is None else f" {r.cp_improved:6.3f} {r.len_improved:6.3f}"
            print(f"  {r.method:9s} {r.bias:+7.3f} {r.sd:6.3f} {r.rmse:6.3f} {r.cp_normal:6.3f} "
                  f"{r.len_normal:6.3f}{imp}")


if __name__ == "__main__":
    main()
