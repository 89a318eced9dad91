"""edge_popup: top-k score masks over frozen random weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops


def mask_count(n: int, k_permille: int) -> int:
    return (k_permille * n) // 1000


def topk_mask(scores, k_permille: int) -> np.ndarray:
    """Binary mask with ones at the floor(k*n) largest scores.

    Ties go to the lowest flat index. Returns uint8 of the scores' shape.
    """
    if not 0 < k_permille <= 1000:
        raise ValueError(f"k_permille must be in (0, 1000], got {k_permille}")
    flat = np.asarray(scores).reshape(-1)
    m = mask_count(flat.size, k_permille)
    if m == 0:
        raise ValueError(f"top-k of {k_permille}/1000 keeps no element out of {flat.size}")
    # m-th largest value, then fill the remaining slots at that value by index
    thresh = np.partition(flat, flat.size - m)[flat.size - m]
    above = flat > thresh
    mask = above.astype(np.uint8)
    need = m - int(np.count_nonzero(above))
    mask[np.flatnonzero(flat == thresh)[:need]] = 1
    return mask.reshape(np.shape(scores))


class MaskedLayer:
    """Conv or linear layer whose effective weight is ``weights * mask``.

    With ``masked=False`` the mask is all ones and the weights themselves are
    the trainable tensor (weight-learning baselines). Forward inputs are kept
    on a stack so one instance can run several times per pass (folded blocks);
    ``backward`` pops in reverse order and accumulates gradients.
    """

    def __init__(self, name, weights, scores, k_permille=1000, stride=1, pad=0, masked=True):
        self.name = name
        self.weights = weights
        self.scores = scores
        self.k_permille = int(k_permille)
        self.stride = stride
        self.pad = pad
        self.masked = masked
        self.kind = "conv" if weights.ndim == 4 else "linear"
        self.grad_scores = np.zeros_like(scores) if masked else None
        self.grad_weights = None if masked else np.zeros_like(weights)
        self._mask = None
        self._eff = None
        self._tape = []

    @property
    def n(self) -> int:
        return self.weights.size

    @property
    def mask(self) -> np.ndarray:
        if self._mask is None:
            if self.masked:
                self._mask = topk_mask(self.scores, self.k_permille)
            else:
                self._mask = np.ones(self.weights.shape, dtype=np.uint8)
        return self._mask

    def set_mask(self, mask):
        """Pin an explicit mask (used after decompression, where scores are absent)."""
        self._mask = np.asarray(mask, dtype=np.uint8).reshape(self.weights.shape)
        self._eff = None

    def invalidate(self):
        if self.masked:
            self._mask = None
            self._eff = None

    def effective_weight(self):
        if not self.masked:
            return self.weights
        if self._eff is None:
            self._eff = self.weights * self.mask.astype(self.weights.dtype)
        return self._eff

    def apply(self, x):
        w = self.effective_weight()
        if self.kind == "conv":
            return ops.conv2d(x, w, self.stride, self.pad)
        return ops.linear(x, w)

    def forward(self, x, record=True):
        if record:
            self._tape.append(x)
        return self.apply(x)

    def backward(self, upstream):
        x = self._tape.pop()
        w = self.effective_weight()
        if self.kind == "conv":
            gx, gw = ops.conv2d_grad(upstream, x, w, self.stride, self.pad)
        else:
            gx, gw = ops.linear_grad(upstream, x, w)
        if self.masked:
            self.grad_scores += gw * self.weights
        else:
            self.grad_weights += gw
        return gx

    def zero_grad(self):
        if self.grad_scores is not None:
            self.grad_scores[...] = 0
        if self.grad_weights is not None:
            self.grad_weights[...] = 0

    def clear_tape(self):
        self._tape.clear()


def masked_forward(layer: MaskedLayer, x):
    return layer.apply(x)


def score_grad(layer: MaskedLayer, x, upstream):
    """Straight-through score gradient: dL/d(effective weight) * weights.

    Every position receives gradient, masked-out ones included.
    """
    w = layer.effective_weight()
    if layer.kind == "conv":
        _, gw = ops.conv2d_grad(upstream, x, w, layer.stride, layer.pad)
    else:
        _, gw = ops.linear_grad(upstream, x, w)
    return gw * layer.weights


@dataclass(frozen=True)
class DensityRow:
    name: str
    n: int
    ones: int
    density: float


def density_report(model):
    """Per masked layer (n, ones, density) plus a 'total' row."""
    rows = []
    for layer in model.masked_layers():
        ones = int(layer.mask.sum())
        rows.append(DensityRow(layer.name, layer.n, ones, ones / layer.n))
    n = sum(r.n for r in rows)
    ones = sum(r.ones for r in rows)
    rows.append(DensityRow("total", n, ones, ones / n if n else 0.0))
    return rows
