"""Density sweep: supermask size for k in 10..90%, optionally with desk training.

    python scripts/topk_sweep.py                # accounting only, seconds
    python scripts/topk_sweep.py --train 10     # plus a 10-epoch desk run per k
"""
import argparse
import json

from hfn.compress import size_report
from hfn.config import load_run_config
from hfn.model import zoo_config
from hfn.runner import run_training


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="resnet50")
    ap.add_argument("--train", type=int, default=0, help="desk epochs per k (0 skips training)")
    ap.add_argument("--out", default="runs/topk_sweep")
    args = ap.parse_args()
    for pct in range(10, 100, 10):
        rep = size_report(zoo_config(args.arch, 100, "hfn", k_permille=pct * 10))
        line = dict(topk=pct, surviving_m=round(rep.params.supermask_total / 1e6, 3), size_mb=round(rep.bytes_total / 1e6, 3))
        if args.train:
            cfg = load_run_config("desk-hfn", overrides={"arch.topk": str(pct), "train.epochs": str(args.train),
                                                         "train.warmup_epochs": str(min(5, args.train - 1))})
            line["desk_test_top1"] = run_training(cfg, f"{args.out}/k{pct}").metrics["test_top1"]
        print(json.dumps(line), flush=True)


if __name__ == "__main__":
    main()
