"""UBN on/off at desk scale, paired by seed.

Each seed trains the desk-hfn preset twice, once with per-iteration affine BN
and once with the folded stages' BN shared and non-affine.  Writes a JSON
table and prints one line per seed.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from hfn.config import load_run_config
from hfn.runner import run_training


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out", default="runs/ubn_ablation")
    args = ap.parse_args()
    out = Path(args.out)
    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        row = {"seed": seed}
        for ubn in (True, False):
            cfg = load_run_config("desk-hfn", overrides={
                "train.seed": str(seed), "train.epochs": str(args.epochs),
                "train.warmup_epochs": str(min(5, args.epochs - 1)), "arch.ubn": str(ubn).lower()})
            m = run_training(cfg, out / f"seed{seed}_ubn{int(ubn)}", command="scripts/ubn_ablation.py").metrics
            row["ubn_on" if ubn else "ubn_off"] = m["test_top1"]
        rows.append(row)
        print(f"seed {seed}: ubn on {row['ubn_on']:.3f}  off {row['ubn_off']:.3f}", flush=True)
    diff = np.array([r["ubn_on"] - r["ubn_off"] for r in rows])
    print(f"mean on-off {diff.mean():+.3f} over {len(rows)} seeds, on wins {int((diff > 0).sum())}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
