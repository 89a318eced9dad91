"""Folded bottleneck ResNets with supermasked layers and unshared BatchNorm."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import ops
from .ops import BnLayerState
from .rng import (
    STREAM_SCORES,
    STREAM_WEIGHTS,
    InitSpec,
    RngStream,
    draws_needed,
    init_scores,
    init_weights,
)
from .supermask import MaskedLayer, mask_count

METHODS = ("vanilla", "folding", "hnn", "hfn")
STEMS = ("cifar_3x3", "imagenet_7x7")
INITS = ("signed_constant", "kaiming_normal")

ZOO = {
    "resnet34": dict(stage_blocks=(3, 4, 6, 3), block="basic"),
    "resnet50": dict(stage_blocks=(3, 4, 6, 3)),
    "resnet101": dict(stage_blocks=(3, 4, 23, 3)),
    "resnet152": dict(stage_blocks=(3, 8, 36, 3)),
    "resnet200": dict(stage_blocks=(3, 24, 36, 3)),
    "wide_resnet50": dict(stage_blocks=(3, 4, 6, 3), width_mult=2),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    stem: str = "cifar_3x3"
    stage_blocks: tuple = (3, 4, 6, 3)
    folded_stages: tuple = (3, 4)
    width_mult: int = 1
    base_channels: int = 64
    num_classes: int = 100
    k_permille: int = 300
    method: str = "hfn"
    ubn: bool = True
    init: str = ""
    block: str = "bottleneck"

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "folded_stages", tuple(sorted({int(s) for s in self.folded_stages})))
        if not self.init:
            default = "signed_constant" if self.masked else "kaiming_normal"
            object.__setattr__(self, "init", default)

    @property
    def masked(self) -> bool:
        return self.method in ("hnn", "hfn")

    def validate(self, buildable=True):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.stem not in STEMS:
            raise ConfigError(f"unknown stem {self.stem!r}")
        if self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}")
        if len(self.stage_blocks) != 4 or min(self.stage_blocks) < 1:
            raise ConfigError(f"stage_blocks must be 4 positive ints, got {self.stage_blocks}")
        if not set(self.folded_stages) <= {1, 2, 3, 4}:
            raise ConfigError(f"folded stages must be a subset of 1..4, got {self.folded_stages}")
        for s in self.folded_stages:
            if self.stage_blocks[s - 1] < 3:
                raise ConfigError(
                    f"stage {s} has {self.stage_blocks[s - 1]} blocks; folding needs at least 3"
                )
        if self.method in ("vanilla", "hnn") and self.folded_stages:
            raise ConfigError(f"method {self.method!r} is feed-forward; use 'folding' or 'hfn' to fold stages")
        if self.method in ("folding", "hfn") and not self.folded_stages:
            raise ConfigError(f"method {self.method!r} needs at least one folded stage")
        if not 0 < self.k_permille <= 1000:
            raise ConfigError(f"k_permille must be in (0, 1000], got {self.k_permille}")
        if self.width_mult < 1 or self.base_channels < 1 or self.num_classes < 1:
            raise ConfigError("width_mult, base_channels and num_classes must be positive")
        if self.block not in ("bottleneck", "basic"):
            raise ConfigError(f"unknown block kind {self.block!r}")
        if buildable and self.block != "bottleneck":
            raise ConfigError("only bottleneck blocks can be built; basic blocks are accounting-only")
        return self

    def to_dict(self):
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        d["folded_stages"] = list(self.folded_stages)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def zoo_config(name, num_classes=100, method="hfn", folded_stages=None, k_permille=300, **kw):
    """Named architecture. ImageNet stem when ``num_classes == 1000`` unless overridden."""
    if name not in ZOO:
        raise ConfigError(f"unknown architecture {name!r}; known: {sorted(ZOO)}")
    if folded_stages is None:
        folded_stages = (3, 4) if method in ("hfn", "folding") else ()
    stem = kw.pop("stem", "imagenet_7x7" if num_classes == 1000 else "cifar_3x3")
    if method in ("vanilla", "folding"):
        k_permille = 1000
    return ArchConfig(
        stem=stem,
        num_classes=num_classes,
        method=method,
        folded_stages=folded_stages,
        k_permille=k_permille,
        **{**ZOO[name], **kw},
    )


def desk_config(**kw):
    """Smallest config that exercises projection blocks, folding and UBN."""
    base = dict(
        stem="cifar_3x3", stage_blocks=(1, 1, 3, 3), folded_stages=(3, 4),
        base_channels=16, num_classes=10, k_permille=300, method="hfn",
    )
    base.update(kw)
    return ArchConfig(**base)


# ---------------------------------------------------------------------------
# Layer plan: the single declaration order shared by build, accounting,
# MAC counting and the file layout.


@dataclass(frozen=True)
class ConvSpec:
    name: str
    shape: tuple
    stride: int = 1
    pad: int = 0
    uses: int = 1  # executions per forward pass (iterations for recurrent blocks)
    out_hw: int = 1  # output spatial side at the plan's input resolution

    @property
    def n(self):
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class BnSpec:
    name: str
    channels: int
    affine: bool
    ubn: bool = False  # learned per-iteration parameters of a folded block


@dataclass
class BlockPlan:
    prefix: str
    convs: list
    bn_sets: list  # one list of BnSpec per BN set


@dataclass
class StagePlan:
    index: int
    folded: bool
    iterations: int
    proj: BlockPlan
    blocks: list = field(default_factory=list)  # unfolded tail blocks
    rec: BlockPlan | None = None


@dataclass
class Plan:
    config: ArchConfig
    stem: ConvSpec
    stem_bn: BnSpec
    stages: list
    fc: ConvSpec

    def convs(self):
        out = [self.stem]
        for st in self.stages:
            out += st.proj.convs
            for b in st.blocks:
                out += b.convs
            if st.rec is not None:
                out += st.rec.convs
        out.append(self.fc)
        return out

    def bns(self):
        out = [self.stem_bn]
        for st in self.stages:
            for b in [st.proj, *st.blocks] + ([st.rec] if st.rec else []):
                for s in b.bn_sets:
                    out += s
        return out


def default_resolution(config):
    return 224 if config.stem == "imagenet_7x7" else 32


def plan(config: ArchConfig, resolution=None) -> Plan:
    cfg = config
    res = default_resolution(cfg) if resolution is None else resolution
    weight_method = not cfg.masked
    base = cfg.base_channels
    if cfg.stem == "imagenet_7x7":
        hw = (res + 6 - 7) // 2 + 1
        stem = ConvSpec("stem.conv", (base, 3, 7, 7), 2, 3, out_hw=hw)
        hw = (hw + 2 - 3) // 2 + 1  # maxpool 3x3/2 pad 1
    else:
        hw = res
        stem = ConvSpec("stem.conv", (base, 3, 3, 3), 1, 1, out_hw=hw)
    stem_bn = BnSpec("stem.bn", base, affine=weight_method)
    cin = base
    stages = []
    for s, nblocks in enumerate(cfg.stage_blocks, start=1):
        planes = base * 2 ** (s - 1)
        stride = 1 if s == 1 else 2
        folded = s in cfg.folded_stages
        out_hw = (hw - 1) // stride + 1

        def block(prefix, cin_, stride_, in_hw, uses, bn_sets, ubn):
            if cfg.block == "bottleneck":
                mid, out = planes * cfg.width_mult, planes * 4
                convs = [
                    ConvSpec(f"{prefix}.conv1", (mid, cin_, 1, 1), 1, 0, uses, in_hw),
                    ConvSpec(f"{prefix}.conv2", (mid, mid, 3, 3), stride_, 1, uses, (in_hw - 1) // stride_ + 1),
                    ConvSpec(f"{prefix}.conv3", (out, mid, 1, 1), 1, 0, uses, (in_hw - 1) // stride_ + 1),
                ]
                chans = [mid, mid, out]
            else:
                mid = out = planes * cfg.width_mult
                convs = [
                    ConvSpec(f"{prefix}.conv1", (mid, cin_, 3, 3), stride_, 1, uses, (in_hw - 1) // stride_ + 1),
                    ConvSpec(f"{prefix}.conv2", (out, mid, 3, 3), 1, 1, uses, (in_hw - 1) // stride_ + 1),
                ]
                chans = [mid, out]
            if stride_ != 1 or cin_ != out:
                convs.append(ConvSpec(f"{prefix}.shortcut", (out, cin_, 1, 1), stride_, 0, uses, (in_hw - 1) // stride_ + 1))
                chans.append(out)
            affine = weight_method or ubn
            sets = []
            for tag in bn_sets:
                names = [f"{prefix}{tag}.bn{i + 1}" for i in range(len(chans))]
                if convs[-1].name.endswith("shortcut"):
                    names[-1] = f"{prefix}{tag}.shortcut_bn"
                sets.append([BnSpec(nm, c, affine, ubn) for nm, c in zip(names, chans)])
            return BlockPlan(prefix, convs, sets), out

        proj, out = block(f"stage{s}.proj", cin, stride, hw, 1, [""], False)
        st = StagePlan(s, folded, nblocks - 1, proj)
        if folded and nblocks > 1:
            iters = nblocks - 1
            use_ubn = cfg.ubn
            tags = [f".iter{i}" for i in range(iters)] if use_ubn else [""]
            st.rec, _ = block(f"stage{s}.rec", out, 1, out_hw, iters, tags, use_ubn)
        else:
            for b in range(1, nblocks):
                bp, _ = block(f"stage{s}.block{b}", out, 1, out_hw, 1, [""], False)
                st.blocks.append(bp)
        stages.append(st)
        cin, hw = out, out_hw
    fc = ConvSpec("fc", (cfg.num_classes, cin), uses=1, out_hw=1)
    return Plan(cfg, stem, stem_bn, stages, fc)


class ParamCount(NamedTuple):
    dense: int  # stored weight elements after folding
    surviving: int  # mask ones summed over layers
    ubn: int  # per-iteration learned BN scales and biases

    @property
    def supermask_total(self):
        return self.surviving + self.ubn


def count_params(config: ArchConfig) -> ParamCount:
    p = plan(config)
    convs = p.convs()
    dense = sum(c.n for c in convs)
    if config.masked:
        surviving = sum(mask_count(c.n, config.k_permille) for c in convs)
    else:
        surviving = dense
    ubn = sum(2 * b.channels for b in p.bns() if b.ubn)
    return ParamCount(dense, surviving, ubn)


# ---------------------------------------------------------------------------
# Executable model


class BatchNorm:
    def __init__(self, name, state: BnLayerState, ubn=False):
        self.name = name
        self.state = state
        self.ubn = ubn
        self.grad_gamma = np.zeros_like(state.gamma) if state.affine else None
        self.grad_beta = np.zeros_like(state.beta) if state.affine else None
        self._tape = []

    def forward(self, x, mode):
        if mode == "train":
            self._tape.append(x)
        return ops.batchnorm(x, self.state, mode)

    def backward(self, upstream):
        x = self._tape.pop()
        gx, gg, gb = ops.batchnorm_grad(upstream, x, self.state)
        if self.state.affine:
            self.grad_gamma += gg
            self.grad_beta += gb
        return gx

    def zero_grad(self):
        if self.state.affine:
            self.grad_gamma[...] = 0
            self.grad_beta[...] = 0

    def clear_tape(self):
        self._tape.clear()


class Bottleneck:
    """Residual block; BN sets are supplied per call so one instance can be
    iterated with a different BN set each time."""

    def __init__(self, convs):
        self.conv1, self.conv2, self.conv3 = convs[:3]
        self.shortcut = convs[3] if len(convs) > 3 else None
        self._tape = []

    @property
    def convs(self):
        return [self.conv1, self.conv2, self.conv3] + ([self.shortcut] if self.shortcut else [])

    def forward(self, x, bns, mode):
        rec = mode == "train"
        bn1, bn2, bn3 = bns[:3]
        pre1 = bn1.forward(self.conv1.forward(x, rec), mode)
        pre2 = bn2.forward(self.conv2.forward(ops.relu(pre1), rec), mode)
        main = bn3.forward(self.conv3.forward(ops.relu(pre2), rec), mode)
        if self.shortcut is not None:
            short = bns[3].forward(self.shortcut.forward(x, rec), mode)
        else:
            short = x
        pre = main + short
        if rec:
            self._tape.append((pre1, pre2, pre))
        return ops.relu(pre)

    def backward(self, upstream, bns):
        pre1, pre2, pre = self._tape.pop()
        g = ops.relu_grad(upstream, pre)
        bn1, bn2, bn3 = bns[:3]
        gm = self.conv3.backward(bn3.backward(g))
        gm = self.conv2.backward(bn2.backward(ops.relu_grad(gm, pre2)))
        gm = self.conv1.backward(bn1.backward(ops.relu_grad(gm, pre1)))
        if self.shortcut is not None:
            gs = self.shortcut.backward(bns[3].backward(g))
        else:
            gs = g
        return gm + gs

    def clear_tape(self):
        self._tape.clear()


class FoldedStage:
    """Projection block followed by one recurrent block run ``iterations`` times.

    ``ubn`` holds one BN set per iteration; with a single set the BN layers
    are shared across iterations.
    """

    def __init__(self, projection_block, proj_bns, recurrent_block, ubn, iterations):
        self.projection_block = projection_block
        self.proj_bns = proj_bns
        self.recurrent_block = recurrent_block
        self.ubn = ubn
        self.iterations = iterations

    def bn_set(self, i):
        return self.ubn[i] if len(self.ubn) > 1 else self.ubn[0]

    def forward(self, x, mode):
        x = self.projection_block.forward(x, self.proj_bns, mode)
        for i in range(self.iterations):
            x = self.recurrent_block.forward(x, self.bn_set(i), mode)
        return x

    def backward(self, g):
        for i in reversed(range(self.iterations)):
            g = self.recurrent_block.backward(g, self.bn_set(i))
        return self.projection_block.backward(g, self.proj_bns)

    def blocks(self):
        return [self.projection_block, self.recurrent_block]

    def bn_layers(self):
        out = list(self.proj_bns)
        for s in self.ubn:
            out += s
        return out


class PlainStage:
    def __init__(self, blocks, bn_sets):
        self.blocks_ = blocks
        self.bn_sets = bn_sets

    def forward(self, x, mode):
        for b, bns in zip(self.blocks_, self.bn_sets):
            x = b.forward(x, bns, mode)
        return x

    def backward(self, g):
        for b, bns in zip(reversed(self.blocks_), reversed(self.bn_sets)):
            g = b.backward(g, bns)
        return g

    def blocks(self):
        return list(self.blocks_)

    def bn_layers(self):
        return [bn for s in self.bn_sets for bn in s]


class Model:
    def __init__(self, config, seed, stem_conv, stem_bn, stages, fc):
        self.config = config
        self.seed = seed
        self.stem_conv = stem_conv
        self.stem_bn = stem_bn
        self.stages = stages
        self.fc = fc
        self._tape = []

    def masked_layers(self):
        out = [self.stem_conv]
        for st in self.stages:
            for b in st.blocks():
                out += b.convs
        out.append(self.fc)
        return out

    def bn_layers(self):
        out = [self.stem_bn]
        for st in self.stages:
            out += st.bn_layers()
        return out

    def blocks(self):
        return [b for st in self.stages for b in st.blocks()]

    def forward(self, images, mode="train"):
        rec = mode == "train"
        x = self.stem_conv.forward(images.astype(self.stem_conv.weights.dtype, copy=False), rec)
        pre = self.stem_bn.forward(x, mode)
        x = ops.relu(pre)
        pooled_from = None
        if self.config.stem == "imagenet_7x7":
            pooled_from = x
            x = ops.maxpool2d(x, 3, 2, 1)
        for st in self.stages:
            x = st.forward(x, mode)
        feat = ops.global_avgpool(x)
        logits = self.fc.forward(feat, rec)
        if rec:
            self._tape.append((pre, pooled_from, x.shape))
        return logits

    def backward(self, grad_logits):
        pre, pooled_from, feat_shape = self._tape.pop()
        g = ops.global_avgpool_grad(self.fc.backward(grad_logits), feat_shape)
        for st in reversed(self.stages):
            g = st.backward(g)
        if pooled_from is not None:
            g = ops.maxpool2d_grad(g, pooled_from, 3, 2, 1)
        g = self.stem_bn.backward(ops.relu_grad(g, pre))
        return self.stem_conv.backward(g)

    def zero_grad(self):
        for layer in self.masked_layers():
            layer.zero_grad()
        for bn in self.bn_layers():
            bn.zero_grad()

    def clear_tape(self):
        self._tape.clear()
        for layer in self.masked_layers():
            layer.clear_tape()
        for bn in self.bn_layers():
            bn.clear_tape()
        for b in self.blocks():
            b.clear_tape()

    def invalidate_masks(self):
        for layer in self.masked_layers():
            layer.invalidate()

    def trainable(self):
        """(name, param, grad) triples for the method's trainable set."""
        out = []
        for layer in self.masked_layers():
            if layer.masked:
                out.append((f"{layer.name}.scores", layer.scores, layer.grad_scores))
            else:
                out.append((f"{layer.name}.weight", layer.weights, layer.grad_weights))
        for bn in self.bn_layers():
            if bn.state.affine:
                out.append((f"{bn.name}.gamma", bn.state.gamma, bn.grad_gamma))
                out.append((f"{bn.name}.beta", bn.state.beta, bn.grad_beta))
        return out

    def weights_checksum(self):
        h = hashlib.sha256()
        for layer in self.masked_layers():
            h.update(np.ascontiguousarray(layer.weights).tobytes())
        return h.hexdigest()

    def scores_checksum(self):
        h = hashlib.sha256()
        for layer in self.masked_layers():
            if layer.scores is not None:
                h.update(np.ascontiguousarray(layer.scores).tobytes())
        return h.hexdigest()


def _make_layer(spec: ConvSpec, cfg, wrng, srng, dtype, with_scores):
    fan_in = int(np.prod(spec.shape[1:]))
    w = init_weights(InitSpec(cfg.init, fan_in), spec.shape, wrng).astype(dtype)
    scores = None
    if cfg.masked and with_scores:
        scores = init_scores(spec.shape, fan_in, srng).astype(dtype)
    elif cfg.masked:
        scores = np.zeros(spec.shape, dtype=dtype)
    return MaskedLayer(
        spec.name, w, scores, cfg.k_permille if cfg.masked else 1000,
        spec.stride, spec.pad, masked=cfg.masked,
    )


def build_model(config: ArchConfig, seed: int, dtype=np.float32, with_scores=True) -> Model:
    """Instantiate ``config``; frozen weights come from the seed's weight
    stream in plan order, scores from its score stream."""
    config.validate()
    p = plan(config)
    wrng = RngStream(seed, STREAM_WEIGHTS)
    srng = RngStream(seed, STREAM_SCORES)

    def layer(spec):
        return _make_layer(spec, config, wrng, srng, dtype, with_scores)

    def bn(spec):
        return BatchNorm(spec.name, BnLayerState(spec.channels, affine=spec.affine), spec.ubn)

    def bn_sets(bp):
        return [[bn(s) for s in bset] for bset in bp.bn_sets]

    stem = layer(p.stem)
    stem_bn = bn(p.stem_bn)
    stages = []
    for sp in p.stages:
        proj = Bottleneck([layer(c) for c in sp.proj.convs])
        proj_bns = bn_sets(sp.proj)[0]
        if sp.rec is not None:
            rec = Bottleneck([layer(c) for c in sp.rec.convs])
            stages.append(FoldedStage(proj, proj_bns, rec, bn_sets(sp.rec), sp.iterations))
        else:
            blocks, sets = [proj], [proj_bns]
            for bp in sp.blocks:
                blocks.append(Bottleneck([layer(c) for c in bp.convs]))
                sets.append(bn_sets(bp)[0])
            stages.append(PlainStage(blocks, sets))
    fc = layer(p.fc)
    return Model(config, seed, stem, stem_bn, stages, fc)


def weight_draw_offsets(config: ArchConfig):
    """Draw index at which each layer's weights start in the weight stream."""
    offsets, pos = {}, 0
    for c in plan(config).convs():
        offsets[c.name] = pos
        pos += draws_needed(config.init, c.n)
    return offsets


def regenerate_weights(config: ArchConfig, seed: int, name: str, dtype=np.float32):
    """Recompute one layer's frozen weights without building the model."""
    spec = {c.name: c for c in plan(config).convs()}[name]
    rng = RngStream(seed, STREAM_WEIGHTS, draw_counter=weight_draw_offsets(config)[name])
    fan_in = int(np.prod(spec.shape[1:]))
    return init_weights(InitSpec(config.init, fan_in), spec.shape, rng).astype(dtype)
