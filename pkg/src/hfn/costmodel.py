"""DRAM-load energy and multiply counts for an idealized 45 nm accelerator.

Only parameter loading is charged: one DRAM read per 32-bit word of stored
model, no activations, no burst amortization.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

from .compress import SizeReport, size_report
from .model import ArchConfig, plan, zoo_config
from .supermask import mask_count

PJ = 1e-12


@dataclass(frozen=True)
class EnergyParams:
    dram_read_32b_pj: float = 640.0
    fp32_mult_pj: float = 3.7
    # only the ratio to a DRAM read is known for fp16 multiplies
    fp16_mult_ratio_vs_dram: float = 291.0
    technology: str = "45nm CMOS"

    def __post_init__(self):
        if min(self.dram_read_32b_pj, self.fp32_mult_pj, self.fp16_mult_ratio_vs_dram) <= 0:
            raise ValueError("energy constants must be positive")

    @property
    def fp16_mult_pj(self):
        return self.dram_read_32b_pj / self.fp16_mult_ratio_vs_dram


DEFAULT_ENERGY = EnergyParams()


def dram_words(size_bytes: int) -> int:
    if size_bytes < 0:
        raise ValueError("size must be non-negative")
    return math.ceil(size_bytes * 8 / 32)


def dram_load_energy_pj(size_bytes: int, params: EnergyParams = DEFAULT_ENERGY) -> float:
    return dram_words(size_bytes) * params.dram_read_32b_pj


def dram_load_energy(size_bytes: int, params: EnergyParams = DEFAULT_ENERGY) -> float:
    """Joules to read ``size_bytes`` from DRAM in 32-bit words."""
    return dram_load_energy_pj(size_bytes, params) * PJ


def conv_macs(spec, density_k=None) -> int:
    """Multiplies of one execution of a conv/linear spec, times its uses."""
    n = spec.n if density_k is None else mask_count(spec.n, density_k)
    return n * spec.out_hw * spec.out_hw * spec.uses


def mult_count(config: ArchConfig, resolution=None, sparse=False) -> int:
    """Multiplies per single-image inference.

    Recurrent blocks count once per iteration, so folding leaves the total
    unchanged. ``sparse`` counts only surviving connections, the figure a
    sparsity-exploiting accelerator would see.
    """
    k = config.k_permille if sparse and config.masked else None
    return sum(conv_macs(c, k) for c in plan(config, resolution).convs())


def format_energy(pj: float) -> str:
    """Auto-scaled unit string."""
    for unit, scale in (("mJ", 1e9), ("uJ", 1e6), ("nJ", 1e3)):
        if abs(pj) >= scale:
            return f"{pj / scale:.3f} {unit}"
    return f"{pj:.1f} pJ"


@dataclass(frozen=True)
class EnergyRow:
    label: str
    size_bytes: int
    energy_pj: float
    ratio: float  # baseline energy / this energy


def energy_report(models, params: EnergyParams = DEFAULT_ENERGY, baseline=0):
    """Compare load energy of ``models``: (label, SizeReport | byte count) pairs.

    Ratios are relative to ``models[baseline]``.
    """
    models = list(models)
    if not models:
        raise ValueError("energy_report needs at least one model")
    rows = []
    for label, size in models:
        b = size.bytes_total if isinstance(size, SizeReport) else int(size)
        rows.append((label, b, dram_load_energy_pj(b, params)))
    ref = rows[baseline][2]
    return [EnergyRow(label, b, e, ref / e if e else math.inf) for label, b, e in rows]


def to_csv(rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["model", "size_bytes", "energy_pj", "energy", "ratio"])
    for r in rows:
        w.writerow([r.label, r.size_bytes, f"{r.energy_pj:.1f}", format_energy(r.energy_pj), f"{r.ratio:.2f}"])
    return out.getvalue()


def plot_series(rows, title="") -> str:
    """JSON bar-chart data: labels with energies in mJ plus raw picojoules."""
    return json.dumps(
        dict(
            title=title,
            labels=[r.label for r in rows],
            energy_mj=[r.energy_pj / 1e9 for r in rows],
            energy_pj=[r.energy_pj for r in rows],
            ratio=[r.ratio for r in rows],
        ),
        indent=2,
    )


# Same-accuracy groupings: a dense baseline and the compressed models that
# match its accuracy.
ENERGY_GROUPS = {
    "cifar100": (
        ("ResNet50", "resnet50", 100, "vanilla"),
        ("HNN-WideResNet50", "wide_resnet50", 100, "hnn"),
        ("HFN-ResNet200", "resnet200", 100, "hfn"),
        ("HFN-ResNet152", "resnet152", 100, "hfn"),
    ),
    "imagenet": (
        ("ResNet34", "resnet34", 1000, "vanilla"),
        ("HNN-WideResNet50", "wide_resnet50", 1000, "hnn"),
        ("HFN-WideResNet50", "wide_resnet50", 1000, "hfn"),
        ("HFN-ResNet200", "resnet200", 1000, "hfn"),
    ),
}


def group_report(group: str, params: EnergyParams = DEFAULT_ENERGY):
    models = [(label, size_report(zoo_config(name, classes, method))) for label, name, classes, method in ENERGY_GROUPS[group]]
    return energy_report(models, params)
