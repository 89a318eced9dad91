"""Print the size/energy tables for the full-scale zoo (no training).

Writes energy CSV and plot JSON for both groupings next to ``--out``.
"""
import argparse
from pathlib import Path

from hfn import costmodel
from hfn.cli import reference_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/tables")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for dataset in ("cifar100", "imagenet"):
        print(f"\n{dataset}")
        print(f"{'model':28s} {'params[M]':>10s} {'size[MB]':>9s} {'reduction':>10s}")
        for r in reference_table(dataset):
            print(f"{r['model']:28s} {r['params_m']:10.2f} {r['size_mb']:9.2f} {r['reduction']:9.2f}x")
        group = costmodel.group_report(dataset)
        (out / f"energy_{dataset}.csv").write_text(costmodel.to_csv(group))
        (out / f"energy_{dataset}.json").write_text(costmodel.plot_series(group, dataset))
        for row in group:
            print(f"  dram {row.label:24s} {costmodel.format_energy(row.energy_pj):>10s}  {row.ratio:6.2f}x")


if __name__ == "__main__":
    main()
