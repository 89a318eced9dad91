import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfn import ops
from hfn.model import (
    ArchConfig,
    ConfigError,
    FoldedStage,
    PlainStage,
    build_model,
    count_params,
    desk_config,
    plan,
    zoo_config,
)

from oracles import central_diff, f64_model, rel_err, unroll


def _images(rng, n=4, size=8):
    return rng.normal(size=(n, 3, size, size))


def test_zoo_counts_cifar_and_imagenet():
    assert count_params(zoo_config("resnet50", 100, "vanilla")).dense == pytest.approx(23.71e6, rel=0.005)
    assert count_params(zoo_config("resnet50", 1000, "vanilla")).dense == pytest.approx(25.55e6, rel=0.005)
    folded = count_params(zoo_config("resnet50", 100, "folding", folded_stages=(2, 3, 4)))
    assert folded.dense == pytest.approx(14.24e6, rel=0.005)


@pytest.mark.parametrize(
    "name,published",
    [
        ("resnet34", 21_797_672),
        ("resnet50", 25_557_032),
        ("resnet101", 44_549_160),
        ("resnet152", 60_192_808),
        ("resnet200", 64_673_832),
        ("wide_resnet50", 68_883_240),
    ],
)
def test_zoo_within_one_percent(name, published):
    # published totals include BN affine and classifier bias; ours count weights
    dense = count_params(zoo_config(name, 1000, "vanilla")).dense
    assert abs(dense / published - 1) < 0.01


def test_hfn_counts():
    r50 = count_params(zoo_config("resnet50", 100, "hfn"))
    assert r50.supermask_total == pytest.approx(4.45e6, rel=0.01)
    r200 = count_params(zoo_config("resnet200", 100, "hfn"))
    assert r200.supermask_total == pytest.approx(6.21e6, rel=0.01)


def test_count_matches_built_model():
    cfg = desk_config()
    model = build_model(cfg, 0)
    pc = count_params(cfg)
    assert pc.dense == sum(l.n for l in model.masked_layers())
    assert pc.surviving == sum(int(l.mask.sum()) for l in model.masked_layers())
    ubn = sum(2 * bn.state.channels for bn in model.bn_layers() if bn.ubn)
    assert pc.ubn == ubn == 4608
    dense_cfg = ArchConfig(stage_blocks=(1, 1, 3, 3), folded_stages=(), base_channels=16, num_classes=10,
                           k_permille=1000, method="hnn")
    full = build_model(dense_cfg, 0)
    assert count_params(dense_cfg).dense == count_params(dense_cfg).surviving == sum(l.n for l in full.masked_layers())


@pytest.mark.parametrize("stage", [3, 4])
def test_monotone_fold_accounting(stage):
    base = zoo_config("resnet50", 100, "vanilla")
    folded = zoo_config("resnet50", 100, "folding", folded_stages=(stage,), ubn=False)
    blocks = base.stage_blocks[stage - 1]
    block_params = sum(c.n for c in plan(base).stages[stage - 1].blocks[1].convs)
    assert count_params(base).dense - count_params(folded).dense == (blocks - 2) * block_params


def test_config_errors():
    with pytest.raises(ConfigError):
        desk_config(stage_blocks=(1, 1, 2, 3)).validate()
    with pytest.raises(ConfigError):
        desk_config(method="hnn").validate()
    with pytest.raises(ConfigError):
        build_model(zoo_config("resnet34", 1000, "vanilla"), 0)


def test_stage_channels():
    p = plan(zoo_config("resnet50", 100, "vanilla"))
    outs = [sp.blocks[0].convs[2].shape[0] for sp in p.stages]
    assert outs == [256, 512, 1024, 2048]
    wide = plan(zoo_config("wide_resnet50", 100, "vanilla"))
    assert wide.stages[0].blocks[0].convs[1].shape[0] == 128


def test_weight_sharing_single_storage():
    model = build_model(desk_config(), 0)
    stage = model.stages[2]
    assert isinstance(stage, FoldedStage) and stage.iterations == 2
    assert len(stage.ubn) == 2
    a, b = stage.ubn
    for x, y in zip(a, b):
        assert not np.shares_memory(x.state.gamma, y.state.gamma)
    # one storage instance: in-place change is seen by every iteration
    w = stage.recurrent_block.conv1.weights
    assert len({id(c.weights) for c in model.masked_layers()}) == len(model.masked_layers())
    before = model.forward(_images(np.random.default_rng(0)).astype(np.float32), "eval")
    w *= 2
    stage.recurrent_block.conv1.invalidate()
    after = model.forward(_images(np.random.default_rng(0)).astype(np.float32), "eval")
    assert not np.array_equal(before, after)


def test_fold_vsunroll_forward_and_backward(rng):
    cfg = desk_config()
    folded = f64_model(cfg, 3)
    unrolled = f64_model(cfg, 3)
    copies = unroll(unrolled)
    x = _images(rng)
    y = rng.integers(0, 10, size=4)
    lf = folded.forward(x, "train")
    lu = unrolled.forward(x, "train")
    assert lf.tobytes() == lu.tobytes()
    _, g = ops.softmax_cross_entropy(lf, y)
    folded.backward(g)
    unrolled.backward(g)
    layers = {l.name: l for l in folded.masked_layers()}
    for name, cs in copies.items():
        summed = np.zeros_like(cs[0].grad_scores)
        for c in reversed(cs):
            summed += c.grad_scores
        assert rel_err(layers[name].grad_scores, summed) <= 1e-10
    ubn_f = {bn.name: bn for bn in folded.bn_layers()}
    for bn in unrolled.bn_layers():
        if bn.state.affine:
            assert rel_err(ubn_f[bn.name].grad_gamma, bn.grad_gamma) <= 1e-10


def test_one_iteration_is_plain_block(rng):
    m1 = f64_model(desk_config(), 5)
    m2 = f64_model(desk_config(), 5)
    st1 = m1.stages[3]
    m1.stages[3] = FoldedStage(st1.projection_block, st1.proj_bns, st1.recurrent_block, [st1.ubn[0]], 1)
    st2 = m2.stages[3]
    m2.stages[3] = PlainStage([st2.projection_block, st2.recurrent_block], [st2.proj_bns, st2.ubn[0]])
    x = _images(rng)
    a, b = m1.forward(x, "train"), m2.forward(x, "train")
    assert a.tobytes() == b.tobytes()
    g = rng.normal(size=a.shape)
    m1.backward(g)
    m2.backward(g)
    for l1, l2 in zip(m1.masked_layers(), m2.masked_layers()):
        np.testing.assert_array_equal(l1.grad_scores, l2.grad_scores)


def test_ubn_gamma_finite_difference(rng):
    model = f64_model(desk_config(), 1)
    stage = model.stages[3]
    x = _images(rng)
    y = rng.integers(0, 10, size=4)
    bn = stage.ubn[1][0]
    bn.state.gamma[:] = 1 + 0.3 * rng.normal(size=bn.state.channels)

    def loss():
        val, _ = ops.softmax_cross_entropy(model.forward(x, "train"), y)
        model.clear_tape()
        return val

    model.zero_grad()
    _, g = ops.softmax_cross_entropy(model.forward(x, "train"), y)
    model.backward(g)
    analytic = bn.grad_gamma.copy()
    numeric = central_diff(loss, bn.state.gamma, h=1e-6)
    assert np.abs(analytic).max() > 0
    assert rel_err(analytic, numeric) <= 1e-5


def test_ubn_independence(rng):
    model = f64_model(desk_config(), 2)
    stage = model.stages[2]
    x = _images(rng)
    a = rng.normal(size=(4, stage.ubn[0][0].state.channels, 4, 4))
    out0 = ops.batchnorm(a, stage.ubn[0][0].state, "eval")
    stage.ubn[1][0].state.gamma *= 3
    np.testing.assert_array_equal(ops.batchnorm(a, stage.ubn[0][0].state, "eval"), out0)
    # an iteration not on the forward path gets no gradient
    stage.iterations = 1
    model.zero_grad()
    logits = model.forward(x, "train")
    model.backward(rng.normal(size=logits.shape))
    assert np.abs(stage.ubn[0][0].grad_gamma).max() > 0
    assert not stage.ubn[1][0].grad_gamma.any()


def test_zero_input_gives_equal_logits():
    model = build_model(desk_config(), 0)
    logits = model.forward(np.zeros((2, 3, 8, 8), dtype=np.float32), "train")
    assert np.all(logits == logits[0, 0])


def test_non_folded_bn_is_non_affine():
    model = build_model(desk_config(), 0)
    for bn in model.bn_layers():
        assert bn.state.affine == bn.ubn


def test_config_round_trip():
    cfg = desk_config(k_permille=250)
    assert ArchConfig.from_dict(cfg.to_dict()) == cfg


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**32), ubn=st.booleans())
def test_build_is_deterministic(seed, ubn):
    a = build_model(desk_config(ubn=ubn), seed)
    b = build_model(desk_config(ubn=ubn), seed)
    assert a.weights_checksum() == b.weights_checksum()
    assert a.scores_checksum() == b.scores_checksum()


def test_imagenet_stem_runs(rng):
    cfg = desk_config(stem="imagenet_7x7")
    model = build_model(cfg, 0)
    out = model.forward(rng.normal(size=(2, 3, 16, 16)).astype(np.float32), "train")
    model.backward(np.ones_like(out))
    assert out.shape == (2, 10)
