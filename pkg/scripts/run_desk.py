"""Train a desk preset and print the headline numbers.

    python scripts/run_desk.py --preset desk-hfn --out runs/desk-hfn
"""
import argparse
import json

from hfn.config import PRESETS, load_run_config
from hfn.runner import run_training


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="desk-hfn", choices=PRESETS)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    overrides = {"train.seed": str(args.seed)}
    if args.epochs:
        overrides["train.epochs"] = str(args.epochs)
        overrides["train.warmup_epochs"] = str(min(5, args.epochs - 1))
    cfg = load_run_config(args.preset, overrides=overrides)
    manifest = run_training(cfg, args.out, command="scripts/run_desk.py",
                            log_epochs=lambda rec: print(json.dumps(rec), flush=True))
    print(json.dumps(manifest.metrics, indent=2))


if __name__ == "__main__":
    main()
