"""Seed + bit-packed supermask serialization and size accounting.

Layout, every multi-byte field little-endian::

    header     magic "HFNZ", version u16, flags u16, rng algorithm u32,
               checksum algorithm u16, reserved u16, seed u64, arch block,
               layer count u32, BN count u32
    layers     per masked layer in plan order:
               element count u32, k_permille u16, reserved u16,
               ceil(n/8) mask bytes (element i -> bit i % 8 of byte i // 8,
               flat OIHW order)
    batchnorm  per BN layer in plan order (each UBN iteration is its own
               layer): channels u32, flags u8 (1 affine, 2 per-iteration),
               3 reserved bytes, [gamma f32*c, beta f32*c if affine],
               running_mean f32*c, running_var f32*c
    appendix   only with flag 1 (training checkpoints): JSON length u32,
               UTF-8 JSON state, then per layer the trained f32 tensor
               (scores for masked methods, weights otherwise)
    trailer    8-byte BLAKE2b digest of everything before it

Weights never appear outside the appendix: they are regenerated from the
seed by ``build_model``.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .model import INITS, METHODS, STEMS, ArchConfig, Model, build_model, count_params, plan, zoo_config
from .rng import ALGORITHM_ID, ALGORITHM_NAME

MAGIC = b"HFNZ"
VERSION = 1
CHECKSUM_BLAKE2B64 = 1
FLAG_APPENDIX = 1

_HEADER = struct.Struct("<4sHHIHHQ")
_ARCH = struct.Struct("<BBBBBBH4HBBIHH")
_COUNTS = struct.Struct("<II")
_LAYER = struct.Struct("<IHH")
_BN = struct.Struct("<IB3x")
HEADER_SIZE = _HEADER.size + _ARCH.size + _COUNTS.size
CHECKSUM_SIZE = 8
F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


class UnsupportedModel(ValueError):
    pass


def _checksum(buf) -> bytes:
    return hashlib.blake2b(bytes(buf), digest_size=8).digest()


def pack_mask(mask) -> bytes:
    return np.packbits(np.asarray(mask, dtype=np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_mask(data, n) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    return bits[:n]


def _pack_arch(cfg: ArchConfig) -> bytes:
    folded = sum(1 << (s - 1) for s in cfg.folded_stages)
    return _ARCH.pack(
        METHODS.index(cfg.method), STEMS.index(cfg.stem), INITS.index(cfg.init),
        int(cfg.ubn), 0 if cfg.block == "bottleneck" else 1, cfg.width_mult,
        cfg.base_channels, *cfg.stage_blocks, folded, 0, cfg.num_classes, cfg.k_permille, 0,
    )


def _unpack_arch(raw) -> ArchConfig:
    (method, stem, init, ubn, block, width, base, b1, b2, b3, b4, folded, _,
     classes, k, _) = _ARCH.unpack(raw)
    try:
        return ArchConfig(
            stem=STEMS[stem], stage_blocks=(b1, b2, b3, b4),
            folded_stages=tuple(s for s in range(1, 5) if folded >> (s - 1) & 1),
            width_mult=width, base_channels=base, num_classes=classes, k_permille=k,
            method=METHODS[method], ubn=bool(ubn), init=INITS[init],
            block="bottleneck" if block == 0 else "basic",
        )
    except IndexError as exc:
        raise FormatError(f"unknown enum value in arch block: {exc}") from None


def _f32(a) -> bytes:
    return np.asarray(a, dtype=F32).tobytes()


def _serialize(model: Model, appendix=None) -> bytes:
    cfg = model.config
    layers = model.masked_layers()
    bns = model.bn_layers()
    out = bytearray()
    flags = FLAG_APPENDIX if appendix is not None else 0
    out += _HEADER.pack(MAGIC, VERSION, flags, ALGORITHM_ID, CHECKSUM_BLAKE2B64, 0, model.seed)
    out += _pack_arch(cfg)
    out += _COUNTS.pack(len(layers), len(bns))
    for layer in layers:
        out += _LAYER.pack(layer.n, layer.k_permille, 0)
        out += pack_mask(layer.mask)
    for bn in bns:
        st = bn.state
        out += _BN.pack(st.channels, int(st.affine) | (2 if bn.ubn else 0))
        if st.affine:
            out += _f32(st.gamma) + _f32(st.beta)
        out += _f32(st.running_mean) + _f32(st.running_var)
    if appendix is not None:
        blob = json.dumps(appendix, sort_keys=True).encode()
        out += struct.pack("<I", len(blob)) + blob
        for layer in layers:
            out += _f32(layer.scores if layer.masked else layer.weights)
    out += _checksum(out)
    return bytes(out)


def compress(model: Model) -> bytes:
    """Inference file for a supermask model: seed, masks and BN state."""
    if not model.config.masked:
        raise UnsupportedModel(
            f"method {model.config.method!r} learns weights, which cannot be regenerated from the seed"
        )
    return _serialize(model)


def save_checkpoint(model: Model, state: dict) -> bytes:
    """Compressed file plus a training appendix (scores or weights, JSON state)."""
    return _serialize(model, appendix=state)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st):
        return st.unpack(self.take(st.size))

    def f32(self, n):
        return np.frombuffer(self.take(4 * n), dtype=F32).astype(np.float32)


def _verify(data) -> memoryview:
    data = memoryview(bytes(data))
    if len(data) < HEADER_SIZE + CHECKSUM_SIZE:
        raise FormatError("file too short for an HFN header")
    if bytes(data[:4]) != MAGIC:
        raise FormatError("bad magic; not an HFN compressed model")
    body, digest = data[:-CHECKSUM_SIZE], bytes(data[-CHECKSUM_SIZE:])
    if _checksum(body) != digest:
        raise ChecksumError("checksum mismatch; file is corrupted")
    return body


def read_header(data) -> dict:
    body = _verify(data)
    r = _Reader(body)
    magic, version, flags, rng_alg, ck_alg, _, seed = r.unpack(_HEADER)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if rng_alg != ALGORITHM_ID:
        raise FormatError(f"unsupported RNG algorithm id {rng_alg}")
    if ck_alg != CHECKSUM_BLAKE2B64:
        raise FormatError(f"unsupported checksum algorithm {ck_alg}")
    cfg = _unpack_arch(r.take(_ARCH.size))
    n_layers, n_bn = r.unpack(_COUNTS)
    return dict(
        magic=magic.decode(), version=version, flags=flags, rng_algorithm=rng_alg,
        rng_algorithm_name=ALGORITHM_NAME, checksum_algorithm="blake2b-64", seed=seed,
        arch=cfg.to_dict(), n_layers=n_layers, n_bn=n_bn, file_bytes=len(data),
        checksum=bytes(data[-CHECKSUM_SIZE:]).hex(),
    ), r


def _load(data, dtype=np.float32):
    header, r = read_header(data)
    cfg = ArchConfig.from_dict(header["arch"])
    model = build_model(cfg, header["seed"], dtype=dtype, with_scores=False)
    layers, bns = model.masked_layers(), model.bn_layers()
    if (header["n_layers"], header["n_bn"]) != (len(layers), len(bns)):
        raise FormatError(
            f"file lists {header['n_layers']} layers / {header['n_bn']} BN layers, "
            f"architecture has {len(layers)} / {len(bns)}"
        )
    for layer in layers:
        n, k, _ = r.unpack(_LAYER)
        if n != layer.n:
            raise FormatError(f"{layer.name}: mask holds {n} bits, layer has {layer.n} weights")
        layer.k_permille = k
        mask = unpack_mask(r.take(math.ceil(n / 8)), n)
        if layer.masked:
            layer.set_mask(mask)
    for bn in bns:
        c, flags = r.unpack(_BN)
        st = bn.state
        if c != st.channels or bool(flags & 1) != st.affine:
            raise FormatError(f"{bn.name}: BN record does not match the architecture")
        if st.affine:
            st.gamma[...] = r.f32(c)
            st.beta[...] = r.f32(c)
        st.running_mean[...] = r.f32(c)
        st.running_var[...] = r.f32(c)
    state = None
    if header["flags"] & FLAG_APPENDIX:
        (size,) = struct.unpack("<I", r.take(4))
        state = json.loads(bytes(r.take(size)).decode())
        for layer in layers:
            arr = r.f32(layer.n).reshape(layer.weights.shape).astype(dtype)
            if layer.masked:
                layer.scores = arr
                layer.grad_scores = np.zeros_like(arr)
                layer.invalidate()
            else:
                layer.weights[...] = arr
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} unexpected trailing bytes")
    return model, state


def decompress(data, dtype=np.float32) -> Model:
    """Eval-ready model: weights regenerated from the seed, masks and BN restored."""
    return _load(data, dtype)[0]


def load_checkpoint(data, dtype=np.float32):
    model, state = _load(data, dtype)
    if state is None:
        raise FormatError("file has no training appendix")
    return model, state


def dump_header(data) -> dict:
    return read_header(data)[0]


# ---------------------------------------------------------------------------
# Size accounting


@dataclass(frozen=True)
class SizeReport:
    config: ArchConfig
    bytes_total: int  # masks + learned BN params + format overhead
    file_bytes: int  # bytes_total + running statistics: the real compressed file
    dense_bytes: int  # 32-bit storage of the unfolded, unmasked model
    breakdown: dict
    params: tuple

    @property
    def reduction_vs_dense(self):
        return self.dense_bytes / self.bytes_total

    @property
    def mb(self):
        return self.bytes_total / 1e6


def format_layout(config: ArchConfig) -> dict:
    """Exact byte counts of each file section for ``config`` (no appendix)."""
    p = plan(config)
    convs, bns = p.convs(), p.bns()
    learned = sum(2 * b.channels for b in bns if b.affine)
    ubn = sum(2 * b.channels for b in bns if b.ubn)
    return dict(
        header=HEADER_SIZE,
        layer_records=_LAYER.size * len(convs),
        mask_bytes=sum(math.ceil(c.n / 8) for c in convs),
        bn_records=_BN.size * len(bns),
        ubn_bytes=4 * ubn,
        other_affine_bytes=4 * (learned - ubn),
        running_stat_bytes=4 * sum(2 * b.channels for b in bns),
        checksum=CHECKSUM_SIZE,
    )


def dense_bytes(config: ArchConfig) -> int:
    flat = replace(config, method="vanilla", folded_stages=(), k_permille=1000, init="")
    return 4 * count_params(flat).dense


def size_report(config: ArchConfig, method=None) -> SizeReport:
    """Storage size of ``config`` under its method (or ``method`` if given).

    Weight-learning methods store 32-bit weights. Supermask methods store one
    bit per weight plus learned BN parameters; ``file_bytes`` adds the running
    statistics that the inference file also carries.
    """
    if method is not None and method != config.method:
        config = replace(config, method=method, init="")
    config.validate(buildable=False)
    params = count_params(config)
    if not config.masked:
        total = 4 * params.dense
        return SizeReport(config, total, total, dense_bytes(config), {"weights": total}, params)
    lay = format_layout(config)
    overhead = lay["header"] + lay["layer_records"] + lay["bn_records"] + lay["checksum"]
    total = lay["mask_bytes"] + lay["ubn_bytes"] + lay["other_affine_bytes"] + overhead
    breakdown = dict(
        mask_bytes=lay["mask_bytes"], ubn_bytes=lay["ubn_bytes"],
        other_affine_bytes=lay["other_affine_bytes"], overhead_bytes=overhead,
        running_stat_bytes=lay["running_stat_bytes"],
    )
    return SizeReport(config, total, total + lay["running_stat_bytes"], dense_bytes(config), breakdown, params)


def zoo_size(name, num_classes, method, **kw) -> SizeReport:
    return size_report(zoo_config(name, num_classes, method, **kw))
