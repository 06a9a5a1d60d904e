#!/usr/bin/env python3
"""Run the latency-spike evaluation twice, once through the flash-delivery
module and once over the default single path, and print the comparison.

Artifacts (per-packet CSV + summary JSON for each run) land in --out.
"""

from __future__ import annotations

import argparse
import sys

from socketstore.experiment import ExperimentConfig, run_experiment, write_report


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--packets", type=int, default=100)
    parser.add_argument("--plot", action="store_true",
                        help="also write PNG plots (needs matplotlib)")
    args = parser.parse_args()

    reports = {}
    for module in ("flash-delivery", "baseline"):
        config = ExperimentConfig(module=module, seed=args.seed,
                                  packet_count=args.packets, output_dir=args.out)
        report = run_experiment(config)
        paths = write_report(report, args.out, prefix=module)
        if args.plot:
            from socketstore.experiment import write_plot

            plot_path = paths["csv"].replace("-packets.csv", "-latency.png")
            write_plot(paths["csv"], plot_path, config.deadline_ms)
        reports[module] = report

    print(f"{'run':<16} {'mode':<10} {'sent':>5} {'losses':>7} "
          f"{'violations':>11} {'in_deadline':>12}")
    for module, report in reports.items():
        s = report.stats
        print(f"{module:<16} {report.mode:<10} {s.sent:>5} {s.losses:>7} "
              f"{s.deadline_violations:>11} {s.in_deadline_ratio:>12.4f}")
    cost = reports["flash-delivery"].cost
    if cost is not None:
        print(f"\nflash-delivery expenditure: raw_total={cost.raw_total:.6f} "
              f"units (weighted {cost.weighted_total:.6f})")
    print(f"artifacts in {args.out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
