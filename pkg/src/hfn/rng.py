"""Counter-based random streams and layer initializers.

Every random quantity in the package comes from Philox4x32-10 keyed by the
run seed. A draw is one 53-bit uniform built from two 32-bit output words, so
each Philox block yields two draws. Streams are separated by counter words 2
and 3, which lets weights be regenerated without replaying score or data
draws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Stored in the compressed-model header. Bump on any change to the draw
# convention (word layout, uniform construction, normal transform).
ALGORITHM_ID = 1
ALGORITHM_NAME = "philox4x32-10/res53/v1"

STREAM_WEIGHTS = 0
STREAM_SCORES = 1
STREAM_AUGMENT = 2
STREAM_DATA = 3
STREAM_SHUFFLE = 4

RELU_GAIN = math.sqrt(2.0)

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)


def philox4x32(counters, key):
    """Philox4x32 with 10 rounds.

    ``counters`` is a uint32-valued array of shape (n, 4), ``key`` a pair of
    32-bit ints. Returns uint32 words of shape (n, 4).
    """
    c = np.asarray(counters, dtype=np.uint64)
    c0, c1, c2, c3 = (c[:, i].copy() for i in range(4))
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for r in range(10):
        if r:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
    return np.stack([c0, c1, c2, c3], axis=1).astype(np.uint32)


@dataclass
class RngStream:
    """Sequential view over one Philox stream.

    ``draw_counter`` counts consumed uniforms; draw ``d`` comes from block
    ``d // 2`` so any position is reachable without replaying earlier draws.
    """

    seed: int
    stream: int = STREAM_WEIGHTS
    substream: int = 0
    draw_counter: int = 0
    algorithm_id: int = ALGORITHM_ID

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.algorithm_id != ALGORITHM_ID:
            raise ValueError(f"unsupported RNG algorithm id {self.algorithm_id}")

    @property
    def key(self):
        return (self.seed & 0xFFFFFFFF, self.seed >> 32)

    def uniform_at(self, start: int, n: int) -> np.ndarray:
        """Uniform float64 draws ``start .. start+n-1`` in [0, 1)."""
        if n == 0:
            return np.zeros(0, dtype=np.float64)
        first, last = start // 2, (start + n - 1) // 2
        blocks = np.arange(first, last + 1, dtype=np.uint64)
        ctr = np.empty((blocks.size, 4), dtype=np.uint64)
        ctr[:, 0] = blocks & _MASK32
        ctr[:, 1] = blocks >> _SHIFT32
        ctr[:, 2] = self.stream & 0xFFFFFFFF
        ctr[:, 3] = self.substream & 0xFFFFFFFF
        words = philox4x32(ctr, self.key).astype(np.uint64).reshape(-1, 2)
        hi = words[:, 0] >> np.uint64(5)
        lo = words[:, 1] >> np.uint64(6)
        u = (hi.astype(np.float64) * 67108864.0 + lo.astype(np.float64)) / 9007199254740992.0
        off = start - 2 * first
        return u[off : off + n]

    def uniform(self, n: int) -> np.ndarray:
        u = self.uniform_at(self.draw_counter, n)
        self.draw_counter += n
        return u

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller; consumes ``2 * ceil(n / 2)`` draws."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Permutation of ``range(n)`` from ``n`` draws (stable argsort of keys)."""
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)


@dataclass(frozen=True)
class InitSpec:
    kind: str  # kaiming_normal | signed_constant | kaiming_uniform_scores
    fan_in: int
    gain: float = RELU_GAIN

    def __post_init__(self):
        if self.kind not in ("kaiming_normal", "signed_constant", "kaiming_uniform_scores"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.fan_in <= 0:
            raise ValueError("fan_in must be positive")

    @property
    def sigma(self) -> float:
        return self.gain * math.sqrt(1.0 / self.fan_in)


def fan_in_of(shape) -> int:
    """Cin*kh*kw for OIHW conv weights, in-features for (out, in) linear weights."""
    return int(np.prod(shape[1:]))


def draws_needed(kind: str, n: int) -> int:
    if kind == "kaiming_normal":
        return 2 * ((n + 1) // 2)
    return n


def init_weights(spec: InitSpec, shape, rng: RngStream) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if fan_in_of(shape) != spec.fan_in:
        raise ValueError(f"shape {shape} inconsistent with fan_in {spec.fan_in}")
    n = int(np.prod(shape))
    if spec.kind == "kaiming_normal":
        w = rng.normal(n) * spec.sigma
    elif spec.kind == "signed_constant":
        sigma = np.float32(spec.sigma)
        w = np.where(rng.uniform(n) < 0.5, -sigma, sigma)
    else:
        return init_scores(shape, spec.fan_in, rng)
    return w.astype(np.float32).reshape(shape)


def init_scores(shape, fan_in: int, rng: RngStream) -> np.ndarray:
    """Kaiming-uniform scores on [-sqrt(6/fan_in), sqrt(6/fan_in)]."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    n = int(np.prod(shape))
    bound = math.sqrt(6.0 / fan_in)
    s = (2.0 * rng.uniform(n) - 1.0) * bound
    return s.astype(np.float32).reshape(tuple(shape))
