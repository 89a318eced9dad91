"""Command-line interface.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import costmodel
from .compress import FormatError, compress, dump_header, size_report
from .config import PRESETS, load_run_config
from .model import ArchConfig, ConfigError, count_params, desk_config, zoo_config
from .runner import load_any, load_datasets, run_training
from .supermask import density_report
from .train import NumericalError, evaluate

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("hfn")


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# Shared flag handling


def _add_config_flags(p):
    p.add_argument("--preset", choices=PRESETS, help="built-in config to start from")
    p.add_argument("--config", help="INI file; its keys override the preset")
    p.add_argument("--method", choices=("vanilla", "folding", "hnn", "hfn"))
    p.add_argument("--fold", help="folded stages, e.g. 3,4 (empty string for none)")
    p.add_argument("--topk", type=float, help="mask density in percent")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--ubn", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="generic override, repeatable")


def _overrides(args) -> dict:
    out = {}
    flat = {
        "method": "arch.method", "fold": "arch.folded_stages", "topk": "arch.topk",
        "epochs": "train.epochs", "seed": "train.seed", "lr": "train.base_lr",
        "batch_size": "train.batch_size", "ubn": "arch.ubn",
    }
    for attr, key in flat.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[key] = str(val)
    if "arch.method" in out:
        out["train.method"] = out["arch.method"]
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _run_config(args, extra=None):
    preset = args.preset or (None if args.config else "desk-hfn")
    return load_run_config(preset, args.config, {**_overrides(args), **(extra or {})})


def _print_rows(rows, columns, out=None):
    out = out or sys.stdout
    widths = [max(len(c), *(len(str(r[i])) for r in rows)) for i, c in enumerate(columns)]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)), file=out)
    for r in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)), file=out)


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args):
    cfg = _run_config(args)
    out = Path(args.out)

    def show(rec):
        val = "-" if rec["val_top1"] is None else f"{rec['val_top1']:.4f}"
        print(f"epoch {rec['epoch']:3d}  lr {rec['lr']:.5f}  loss {rec['loss']:.4f}  val {val}", flush=True)

    m = run_training(cfg, out, command="train " + " ".join(args.argv), log_epochs=show)
    print(json.dumps(m.metrics, indent=2, sort_keys=True))
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_evaluate(args):
    model, _ = load_any(args.checkpoint)
    cfg = _run_config(args)
    _, val, test = load_datasets(cfg.data, model.config.num_classes)
    ds = test if args.split == "test" else val
    print(f"{args.split} top1 {evaluate(model, ds):.4f}")
    return EXIT_OK


def cmd_compress(args):
    model, _ = load_any(args.checkpoint)
    out = Path(args.output)
    if out.resolve() == Path(args.checkpoint).resolve():
        raise InputError("refusing to overwrite the input file")
    out.write_bytes(compress(model))
    print(f"wrote {out} ({out.stat().st_size} bytes)")
    return EXIT_OK


def cmd_inspect(args):
    data = Path(args.file).read_bytes()
    header = dump_header(data)
    print(json.dumps(header, indent=2, sort_keys=True))
    if args.dump_header:
        return EXIT_OK
    model, _ = load_any(args.file)
    rows = [(r.name, r.n, r.ones, f"{r.density:.4f}") for r in density_report(model)]
    _print_rows(rows, ("layer", "n", "ones", "density"))
    return EXIT_OK


def _arch_from_flags(args) -> ArchConfig:
    folds = None if args.fold is None else tuple(int(s) for s in args.fold.split(",") if s.strip())
    k = round(args.topk * 10)
    if args.arch == "desk":
        kw = dict(method=args.method, k_permille=k, num_classes=args.classes)
        if folds is not None or args.method in ("vanilla", "hnn"):
            kw["folded_stages"] = folds or ()
        return desk_config(**kw)
    return zoo_config(args.arch, args.classes, args.method, folded_stages=folds, k_permille=k)


def cmd_estimate(args):
    cfg = _arch_from_flags(args)
    cfg.validate(buildable=False)
    rep = size_report(cfg)
    pc = count_params(cfg)
    energy_pj = costmodel.dram_load_energy_pj(rep.bytes_total)
    out = dict(
        config=cfg.to_dict(),
        dense_params=pc.dense,
        surviving_params=pc.supermask_total,
        size_bytes=rep.bytes_total,
        file_bytes=rep.file_bytes,
        size_mb=round(rep.mb, 4),
        reduction_vs_dense=round(rep.reduction_vs_dense, 3),
        breakdown=rep.breakdown,
        dram_energy_pj=energy_pj,
        dram_energy=costmodel.format_energy(energy_pj),
        mults=costmodel.mult_count(cfg, args.resolution),
        mults_sparse=costmodel.mult_count(cfg, args.resolution, sparse=True),
    )
    print(json.dumps(out, indent=2))
    return EXIT_OK


# label, arch, method, folded stages (None = default), group baseline label
REFERENCE_TABLES = {
    "cifar100": (
        100,
        (
            ("ResNet50", "resnet50", "vanilla", None, "ResNet50"),
            ("Folded ResNet50 (2,3,4)", "resnet50", "folding", (2, 3, 4), "ResNet50"),
            ("HNN-ResNet50", "resnet50", "hnn", None, "ResNet50"),
            ("HFN-ResNet50", "resnet50", "hfn", None, "ResNet50"),
            ("HNN-WideResNet50", "wide_resnet50", "hnn", None, "ResNet50"),
            ("HFN-ResNet200", "resnet200", "hfn", None, "ResNet50"),
            ("HFN-ResNet152", "resnet152", "hfn", None, "ResNet50"),
        ),
    ),
    "imagenet": (
        1000,
        (
            ("ResNet50", "resnet50", "vanilla", None, "ResNet50"),
            ("Folded ResNet50 (2,3,4)", "resnet50", "folding", (2, 3, 4), "ResNet50"),
            ("HNN-ResNet50", "resnet50", "hnn", None, "ResNet50"),
            ("HFN-ResNet50", "resnet50", "hfn", None, "ResNet50"),
            ("ResNet34", "resnet34", "vanilla", None, "ResNet34"),
            ("HNN-WideResNet50", "wide_resnet50", "hnn", None, "ResNet34"),
            ("HFN-WideResNet50", "wide_resnet50", "hfn", None, "ResNet34"),
            ("HFN-ResNet200", "resnet200", "hfn", None, "ResNet34"),
        ),
    ),
}


def reference_table(dataset: str):
    """Accounting rows: label, params, MB, file MB, reduction, energy pJ."""
    classes, rows = REFERENCE_TABLES[dataset]
    reports = {label: size_report(zoo_config(name, classes, method, folded_stages=folds))
               for label, name, method, folds, _ in rows}
    out = []
    for label, _, _, _, base in rows:
        r = reports[label]
        params = r.params.dense if not r.config.masked else r.params.supermask_total
        out.append(dict(
            model=label, params_m=params / 1e6, size_mb=r.bytes_total / 1e6, file_mb=r.file_bytes / 1e6,
            reduction=reports[base].bytes_total / r.bytes_total,
            energy_pj=costmodel.dram_load_energy_pj(r.bytes_total),
        ))
    return out


def cmd_report(args):
    if args.paper_tables:
        rows = reference_table(args.paper_tables)
        _print_rows(
            [(r["model"], f"{r['params_m']:.2f}", f"{r['size_mb']:.2f}", f"{r['file_mb']:.2f}",
              f"{r['reduction']:.2f}x", costmodel.format_energy(r["energy_pj"])) for r in rows],
            ("model", "params[M]", "size[MB]", "file[MB]", "reduction", "dram energy"),
        )
        group = costmodel.group_report(args.paper_tables)
    else:
        if not args.checkpoints:
            raise InputError("report needs checkpoints or --paper-tables")
        models = []
        for path in args.checkpoints:
            header = dump_header(Path(path).read_bytes())
            models.append((Path(path).name, size_report(ArchConfig.from_dict(header["arch"]))))
        group = costmodel.energy_report(models)
        _print_rows(
            [(r.label, r.size_bytes, costmodel.format_energy(r.energy_pj), f"{r.ratio:.2f}") for r in group],
            ("file", "size_bytes", "dram energy", "ratio"),
        )
    if args.csv:
        Path(args.csv).write_text(costmodel.to_csv(group))
    if args.plot:
        Path(args.plot).write_text(costmodel.plot_series(group, args.paper_tables or "checkpoints"))
    return EXIT_OK


def _sweep_points(axis, values):
    points = [v.strip() for v in values.split(";") if v.strip()] if axis != "topk" else \
        [v.strip() for v in values.replace(";", ",").split(",") if v.strip()]
    if not points:
        raise ConfigError("sweep axis has no values")
    key = {"topk": "arch.topk", "fold": "arch.folded_stages", "depth": "arch.stage_blocks"}[axis]
    return [(p, {key: p}) for p in points]


def _sweep_one(job):
    args_dict, label, extra, out, run = job
    args = argparse.Namespace(**args_dict)
    cfg = _run_config(args, extra)
    pc = count_params(cfg.arch)
    row = dict(point=label, dense_params=pc.dense, surviving_params=pc.supermask_total,
               size_bytes=size_report(cfg.arch).bytes_total, test_top1=None)
    if run:
        m = run_training(cfg, out, command=f"sweep {label}")
        row["test_top1"] = m.metrics["test_top1"]
    return row


def cmd_sweep(args):
    points = _sweep_points(args.axis, args.values)
    base = {k: v for k, v in vars(args).items() if k in
            ("preset", "config", "method", "fold", "topk", "epochs", "seed", "lr", "batch_size", "ubn", "set")}
    jobs = [(base, label, extra, Path(args.out) / f"{args.axis}_{i:02d}", not args.accounting_only)
            for i, (label, extra) in enumerate(points)]
    for _, _, extra, _, _ in jobs:  # validate every point before running any
        _run_config(argparse.Namespace(**base), extra)
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as ex:
            rows = list(ex.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    _print_rows(
        [(r["point"], r["dense_params"], r["surviving_params"], r["size_bytes"],
          "-" if r["test_top1"] is None else f"{r['test_top1']:.4f}") for r in rows],
        (args.axis, "dense_params", "surviving_params", "size_bytes", "test_top1"),
    )
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / f"sweep_{args.axis}.json").write_text(json.dumps(rows, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="hfn", description="Hidden-fold network toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint, metrics and manifest")
    _add_config_flags(p)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="top-1 accuracy of a checkpoint")
    p.add_argument("checkpoint")
    _add_config_flags(p)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compress", help="write the compact inference file for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("inspect", help="print header fields and per-layer mask density")
    p.add_argument("file")
    p.add_argument("--dump-header", action="store_true", help="header fields only")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("estimate", help="size, DRAM energy and multiply counts for an architecture")
    p.add_argument("--arch", default="resnet50", help="desk or a zoo name")
    p.add_argument("--method", default="hfn", choices=("vanilla", "folding", "hnn", "hfn"))
    p.add_argument("--classes", type=int, default=100)
    p.add_argument("--fold")
    p.add_argument("--topk", type=float, default=30.0)
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sweep", help="train one run per axis value")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=("topk", "fold", "depth"))
    p.add_argument("--values", required=True,
                   help="topk: 10,20,30; fold: '4;3,4;2,3,4'; depth: '1,1,3,3;1,1,4,4'")
    p.add_argument("--out", default="runs/sweep")
    p.add_argument("--accounting-only", action="store_true", help="skip training, report sizes only")
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="size and energy comparison")
    p.add_argument("checkpoints", nargs="*")
    p.add_argument("--paper-tables", choices=sorted(REFERENCE_TABLES))
    p.add_argument("--csv", help="write the energy table as CSV")
    p.add_argument("--plot", help="write plot-ready JSON series")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, InputError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
