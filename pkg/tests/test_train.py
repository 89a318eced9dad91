import math

import numpy as np
import pytest

from hfn.data import Dataset, synthetic_dataset
from hfn.model import build_model, desk_config
from hfn.train import NumericalError, TrainConfig, evaluate, initial_loss, train


class _Stub:
    """Forward maps images to fixed logits; enough for ``evaluate``."""

    def __init__(self, fn):
        self.fn = fn

    def forward(self, x, mode):
        return self.fn(x)


def _small(n=192, classes=10, sep=4.0):
    tr = synthetic_dataset(0, n, classes, separation=sep)
    va = synthetic_dataset(0, 100, classes, separation=sep, split="val")
    return tr, va


def _cfg(method, **kw):
    kw.setdefault("epochs", 5)
    kw.setdefault("warmup_epochs", 1)
    kw.setdefault("batch_size", 64)
    kw.setdefault("augment", False)
    return TrainConfig(method=method, **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="bogus").validate()
    with pytest.raises(ValueError):
        TrainConfig(epochs=5, warmup_epochs=5).validate()
    with pytest.raises(ValueError):
        train(build_model(desk_config(), 0), *_small(), _cfg("hnn"))


def test_evaluate_perfect_and_random():
    n = 1000
    labels = np.arange(n) % 10
    # sample index in every pixel, so a stub can look labels up
    ds = Dataset(np.repeat(np.arange(n, dtype=np.float32), 3).reshape(n, 3, 1, 1), labels, "test", 10)

    def idx(x):
        return np.rint(x[:, 0, 0, 0]).astype(int)

    perfect = _Stub(lambda x: np.eye(10)[labels[idx(x)]])
    assert evaluate(perfect, ds) == 1.0
    rng = np.random.default_rng(0)
    table = rng.normal(size=(n, 10))
    rand = _Stub(lambda x: table[idx(x)])
    acc = evaluate(rand, ds)
    assert abs(acc - 0.1) <= 0.03
    assert evaluate(rand, ds) == acc
    nan = _Stub(lambda x: np.full((len(x), 10), np.nan))
    assert evaluate(nan, ds) == 0.0
    with pytest.raises(ValueError):
        evaluate(perfect, ds.subset(np.arange(0)))


@pytest.mark.parametrize("method", ["hnn", "hfn"])
def test_frozen_weights_and_loss_decreases(method):
    cfg = desk_config(method=method, folded_stages=() if method == "hnn" else (3, 4))
    model = build_model(cfg, 0)
    before = model.weights_checksum()
    scores = model.scores_checksum()
    res = train(model, *_small(), _cfg(method))
    assert model.weights_checksum() == before == res.weights_checksum
    assert model.scores_checksum() != scores
    losses = [h["loss"] for h in res.history]
    assert losses[-1] < losses[0]


@pytest.mark.parametrize("method,folds", [("vanilla", ()), ("folding", (3, 4))])
def test_weight_methods_leave_scores(method, folds):
    model = build_model(desk_config(method=method, folded_stages=folds), 0)
    before = model.weights_checksum()
    res = train(model, *_small(96), _cfg(method, epochs=2))
    assert model.weights_checksum() != before
    assert all(l.scores is None for l in model.masked_layers())
    assert len(res.history) == 2


def test_determinism_of_history():
    runs = []
    for _ in range(2):
        model = build_model(desk_config(), 4)
        res = train(model, *_small(128), _cfg("hfn", epochs=3, augment=True, seed=4))
        runs.append((res.history, res.best_checkpoint))
    assert runs[0] == runs[1]


def test_best_checkpoint_tracks_validation():
    res = train(build_model(desk_config(), 0), *_small(), _cfg("hfn", eval_cadence=2))
    vals = [h["val_top1"] for h in res.history]
    assert vals[0] is None and vals[1] is not None and vals[-1] is not None
    assert res.best_val == max(v for v in vals if v is not None)
    assert res.best_checkpoint is not None


def test_hnn_full_density_is_a_fixed_function():
    # k=100% keeps every weight whatever the scores, and hnn BN is non-affine,
    # so training has nothing to change: eval logits stay bitwise fixed
    cfg = desk_config(method="hnn", folded_stages=(), k_permille=1000)
    tr, va = _small(128, sep=4.0)
    model = build_model(cfg, 1)
    x = va.images[:16]
    train(model, tr, va, _cfg("hnn", epochs=2))
    ref = build_model(cfg, 1)
    for a, b in zip(model.bn_layers(), ref.bn_layers()):
        b.state.running_mean[...] = a.state.running_mean
        b.state.running_var[...] = a.state.running_var
    assert all(l.mask.all() for l in model.masked_layers())
    assert model.forward(x, "eval").tobytes() == ref.forward(x, "eval").tobytes()


def test_initial_loss_near_log_k():
    # a random masked classifier is not exactly uniform, so only the scale is checked
    _, va = _small()
    model = build_model(desk_config(), 0)
    before = [bn.state.running_mean.copy() for bn in model.bn_layers()]
    loss = initial_loss(model, va)
    assert math.log(10) * 0.9 < loss < math.log(10) * 1.6
    for bn, m in zip(model.bn_layers(), before):
        np.testing.assert_array_equal(bn.state.running_mean, m)


def test_non_finite_loss_aborts():
    tr, va = _small(64)
    tr.images[:] = np.nan
    with pytest.raises(NumericalError):
        train(build_model(desk_config(), 0), tr, va, _cfg("hfn", epochs=2))
