import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hfn.costmodel import (
    ENERGY_GROUPS,
    conv_macs,
    EnergyParams,
    dram_load_energy,
    dram_load_energy_pj,
    energy_report,
    format_energy,
    group_report,
    mult_count,
    plot_series,
    to_csv,
)
from hfn.model import ArchConfig, zoo_config


def test_constants():
    p = EnergyParams()
    assert p.dram_read_32b_pj == 640 and p.fp32_mult_pj == 3.7
    assert p.fp16_mult_pj == pytest.approx(640 / 291)
    with pytest.raises(ValueError):
        EnergyParams(dram_read_32b_pj=0)


def test_dram_energy_examples():
    assert dram_load_energy_pj(4) == 640
    assert dram_load_energy(0) == 0
    # 94.82e6 B -> 23.705e6 words at 640 pJ
    assert dram_load_energy(94.82e6) == pytest.approx(94.82e6 * 8 / 32 * 640e-12, rel=1e-12)
    assert dram_load_energy(94.82e6) == pytest.approx(15.2e-3, rel=0.01)
    assert dram_load_energy_pj(5) == 2 * 640  # partial word still costs a read
    with pytest.raises(ValueError):
        dram_load_energy(-1)


@given(words=st.integers(0, 10**9), extra=st.integers(0, 10**9))
def test_energy_linear_in_words(words, extra):
    assert dram_load_energy_pj(4 * (words + extra)) == dram_load_energy_pj(4 * words) + dram_load_energy_pj(4 * extra)


@given(sizes=st.lists(st.integers(1, 10**8), min_size=1, max_size=6), c=st.integers(1, 50))
def test_ratio_invariance(sizes, c):
    a = energy_report([(str(i), 4 * s) for i, s in enumerate(sizes)])
    b = energy_report([(str(i), 4 * s * c) for i, s in enumerate(sizes)])
    for x, y in zip(a, b):
        assert x.ratio == pytest.approx(y.ratio, rel=1e-12)


def test_energy_ratio_equals_size_ratio():
    rows = group_report("cifar100")
    base = rows[0]
    for r in rows:
        assert r.ratio == pytest.approx(base.size_bytes / r.size_bytes, rel=1e-6)
    r152 = rows[-1]
    assert r152.label == "HFN-ResNet152"
    assert r152.ratio == pytest.approx(38.54, rel=0.02)


def test_identical_models_ratio_one():
    rows = energy_report([("a", 1000), ("b", 1000)])
    assert rows[1].ratio == 1.0
    with pytest.raises(ValueError):
        energy_report([])


@pytest.mark.parametrize("group", sorted(ENERGY_GROUPS))
def test_groupings_order_and_span(group):
    rows = group_report(group)
    e = [r.energy_pj for r in rows]
    assert e[0] > e[1] > e[-1]  # vanilla >> HNN > HFN
    assert e[0] / min(e) >= 10


def test_mult_count_examples():
    assert mult_count(ArchConfig()) > 0
    r50 = mult_count(zoo_config("resnet50", 100, "vanilla"))
    folded = mult_count(zoo_config("resnet50", 100, "folding", folded_stages=(3, 4)))
    assert folded == r50
    r152 = mult_count(zoo_config("resnet152", 100, "hfn"))
    assert abs(r152 / r50 / 3 - 1) <= 0.15
    sparse = mult_count(zoo_config("resnet50", 100, "hfn"), sparse=True)
    assert sparse == pytest.approx(0.3 * r50, rel=0.01)


def test_single_1x1_conv_mac():
    from hfn.model import ConvSpec

    assert conv_macs(ConvSpec("x", (1, 1, 1, 1), out_hw=1)) == 1
    assert conv_macs(ConvSpec("y", (2, 3, 3, 3), out_hw=4, uses=2)) == 54 * 16 * 2


def test_output_formats():
    rows = group_report("imagenet")
    text = to_csv(rows)
    assert text.splitlines()[0] == "model,size_bytes,energy_pj,energy,ratio"
    assert "mJ" in text and "uJ" in text
    series = plot_series(rows, "x")
    assert '"energy_pj"' in series
    assert format_energy(640) == "640.0 pJ"
    assert format_energy(1.5e9) == "1.500 mJ"
    assert math.isclose(rows[-1].ratio, 26.83, rel_tol=0.02)
