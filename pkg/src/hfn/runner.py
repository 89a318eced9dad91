"""Run orchestration shared by the CLI and the experiment scripts."""
from __future__ import annotations

import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .compress import FLAG_APPENDIX, compress, decompress, load_checkpoint, read_header
from .config import DataConfig, RunConfig, to_ini
from .data import data_dir, load_cifar_binary, split_train_val, synthetic_dataset
from .model import build_model, count_params
from .train import evaluate, train

CHECKPOINT = "checkpoint.hfn"
MODEL = "model.hfnz"
METRICS = "metrics.jsonl"
MANIFEST = "manifest.json"
CONFIG = "config.ini"


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    artifacts: dict
    metrics: dict
    wall_clock_s: float
    started: str = ""
    host: dict = field(default_factory=dict)

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def load_datasets(dc: DataConfig, num_classes: int):
    """(train, val, test) for the configured source."""
    if dc.source == "synthetic":
        args = dict(classes=num_classes, size=dc.image_size, separation=dc.separation)
        return (
            synthetic_dataset(dc.data_seed, dc.train_size, split="train", **args),
            synthetic_dataset(dc.data_seed, dc.val_size, split="val", **args),
            synthetic_dataset(dc.data_seed, dc.test_size, split="test", **args),
        )
    root = Path(data_dir())
    full = load_cifar_binary(root / dc.cifar_train, split="train")
    test = load_cifar_binary(root / dc.cifar_test, split="test")
    if full.num_classes != num_classes:
        raise ValueError(f"dataset has {full.num_classes} classes, model expects {num_classes}")
    tr, va = split_train_val(full, dc.val_size, dc.split_seed)
    return tr, va, test


def run_training(cfg: RunConfig, out_dir, command="train", log_epochs=None) -> RunManifest:
    """Train, keep the best-validation checkpoint, and write every artifact.

    ``out_dir`` receives the training checkpoint, the compressed inference
    model (supermask methods), the metrics log, the resolved config and the
    manifest.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    t0 = time.perf_counter()
    train_ds, val_ds, test_ds = load_datasets(cfg.data, cfg.arch.num_classes)
    model = build_model(cfg.arch, cfg.train.seed)
    baseline = evaluate(model, test_ds)
    (out / CONFIG).write_text(to_ini(cfg))
    metrics_path = out / METRICS
    with open(metrics_path, "w") as log:

        def on_epoch(rec):
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
            if log_epochs is not None:
                log_epochs(rec)

        result = train(model, train_ds, val_ds, cfg.train, on_epoch=on_epoch)
    artifacts = {"config": str(out / CONFIG), "metrics": str(metrics_path)}
    best_model = model
    if result.best_checkpoint is not None:
        (out / CHECKPOINT).write_bytes(result.best_checkpoint)
        artifacts["checkpoint"] = str(out / CHECKPOINT)
        best_model, _ = load_checkpoint(result.best_checkpoint)
    if cfg.arch.masked:
        (out / MODEL).write_bytes(compress(best_model))
        artifacts["model"] = str(out / MODEL)
    pc = count_params(cfg.arch)
    metrics = dict(
        final_loss=result.history[-1]["loss"],
        best_epoch=result.best_epoch,
        best_val_top1=result.best_val,
        test_top1=evaluate(best_model, test_ds),
        untrained_test_top1=baseline,
        weights_checksum=result.weights_checksum,
        dense_params=pc.dense,
        surviving_params=pc.supermask_total,
    )
    manifest = RunManifest(
        command=command,
        config=cfg.to_dict(),
        seeds=dict(model=cfg.train.seed, data=cfg.data.data_seed, split=cfg.data.split_seed),
        artifacts=artifacts,
        metrics=metrics,
        wall_clock_s=round(time.perf_counter() - t0, 3),
        started=started,
        host=dict(python=platform.python_version(), numpy=np.__version__, data_dir=os.environ.get("HFN_DATA_DIR", "")),
    )
    manifest.write(out / MANIFEST)
    return manifest


def load_any(path):
    """Model from a training checkpoint or a compressed inference file."""
    data = Path(path).read_bytes()
    header, _ = read_header(data)
    if header["flags"] & FLAG_APPENDIX:
        return load_checkpoint(data)[0], header
    return decompress(data), header
