"""Dense layer primitives with hand-paired gradients.

Arrays are NCHW activations and OIHW weights. Reductions run in float64 and
results are cast back to the input dtype, so float32 storage keeps float64
accumulation and float64 inputs stay exact enough for finite-difference
checks. No op depends on thread scheduling for its summation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


def _out_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def _check_ndim(name, x, ndim):
    if x.ndim != ndim:
        raise ShapeError(f"{name}: expected a {ndim}-d array, got shape {x.shape}")


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    """(N, C, H, W) -> (N, Ho, Wo, C, kh, kw) float64 view-backed array."""
    x = np.asarray(x, dtype=np.float64)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, C, H', W', kh, kw
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _cols(x, kh, kw, stride, pad, ho, wo):
    n, cin = x.shape[:2]
    if kh == kw == 1 and pad == 0:
        xs = np.asarray(x, dtype=np.float64)[:, :, ::stride, ::stride]
        return xs.transpose(0, 2, 3, 1).reshape(n * ho * wo, cin)
    return _im2col(x, kh, kw, stride, pad).reshape(n * ho * wo, cin * kh * kw)


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation without bias. Output (N, Cout, Ho, Wo)."""
    _check_ndim("conv2d input", x, 4)
    _check_ndim("conv2d weights", w, 4)
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels but weights expect {wcin}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}")
    cols = _cols(x, kh, kw, stride, pad, ho, wo)
    out = cols @ np.asarray(w, dtype=np.float64).reshape(cout, -1).T
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out, dtype=_out_dtype(x, w))


def conv2d_grad(upstream, x, w, stride=1, pad=0):
    """Gradients of sum(upstream * conv2d(x, w)) wrt x and w."""
    _check_ndim("conv2d input", x, 4)
    _check_ndim("conv2d weights", w, 4)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    if upstream.shape != (n, cout, ho, wo):
        raise ShapeError(f"conv2d_grad: upstream {upstream.shape} != {(n, cout, ho, wo)}")
    up = np.asarray(upstream, dtype=np.float64).transpose(0, 2, 3, 1).reshape(-1, cout)
    cols = _cols(x, kh, kw, stride, pad, ho, wo)
    gw = (up.T @ cols).reshape(w.shape)
    dcols = (up @ np.asarray(w, dtype=np.float64).reshape(cout, -1))
    if kh == kw == 1 and pad == 0:
        gx = np.zeros((n, cin, h, wd), dtype=np.float64)
        gx[:, :, ::stride, ::stride] = dcols.reshape(n, ho, wo, cin).transpose(0, 3, 1, 2)
        return (
            np.ascontiguousarray(gx, dtype=x.dtype),
            np.ascontiguousarray(gw, dtype=w.dtype),
        )
    dcols = np.ascontiguousarray(dcols.reshape(n, ho, wo, cin, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    gxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[i, j]
    gx = gxp[:, :, pad : pad + h, pad : pad + wd]
    return (
        np.ascontiguousarray(gx, dtype=x.dtype),
        np.ascontiguousarray(gw, dtype=w.dtype),
    )


@dataclass
class BnLayerState:
    """Per-channel BatchNorm parameters and running statistics."""

    channels: int
    affine: bool = False
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    gamma: np.ndarray = field(default=None)
    beta: np.ndarray = field(default=None)
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        c = self.channels
        if self.gamma is None:
            self.gamma = np.ones(c, dtype=np.float32)
        if self.beta is None:
            self.beta = np.zeros(c, dtype=np.float32)
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(c, dtype=np.float32)


def _chsum(a):
    """Per-channel sum of an NCHW array, accumulated in float64."""
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2, dtype=np.float64).sum(axis=0)


def _bn_stats(x):
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mean = _chsum(x) / count
    centered = x - mean.astype(x.dtype)[None, :, None, None]
    var = _chsum(centered * centered) / count
    return centered, mean, var


def _bcast(v, dtype):
    return v.astype(dtype)[None, :, None, None]


def batchnorm(x, state: BnLayerState, mode="train"):
    """Normalize per channel. Train mode uses batch statistics and updates the
    running averages in ``state`` (unbiased variance, PyTorch convention)."""
    _check_ndim("batchnorm input", x, 4)
    if x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm: {x.shape[1]} channels, state has {state.channels}")
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError("batchnorm: train mode needs at least 2 values per channel")
        centered, mean, var = _bn_stats(x)
        m = state.momentum
        rm = (1 - m) * state.running_mean.astype(np.float64) + m * mean
        rv = (1 - m) * state.running_var.astype(np.float64) + m * var * count / (count - 1)
        state.running_mean[...] = rm
        state.running_var[...] = rv
    elif mode == "eval":
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
        centered = x - _bcast(mean, x.dtype)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    scale = 1.0 / np.sqrt(var + state.eps)
    if state.affine:
        scale = scale * state.gamma.astype(np.float64)
        return centered * _bcast(scale, x.dtype) + _bcast(state.beta, x.dtype)
    return centered * _bcast(scale, x.dtype)


def batchnorm_grad(upstream, x, state: BnLayerState):
    """Train-mode gradients. Returns (grad_x, grad_gamma, grad_beta); the last
    two are None for non-affine layers."""
    centered, mean, var = _bn_stats(x)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * _bcast(inv, x.dtype)
    gbeta = _chsum(upstream)
    ggamma = _chsum(upstream * xhat)
    gamma = state.gamma.astype(np.float64) if state.affine else np.ones(state.channels)
    # dx = gamma*inv * (up - mean(up) - xhat * mean(up * xhat))
    k = gamma * inv
    gx = (upstream - _bcast(gbeta / count, x.dtype) - xhat * _bcast(ggamma / count, x.dtype))
    gx = gx * _bcast(k, x.dtype)
    if not state.affine:
        return gx, None, None
    return gx, ggamma.astype(state.gamma.dtype), gbeta.astype(state.beta.dtype)


def linear(x, w):
    """x (N, in) @ w.T, w is (out, in). No bias."""
    _check_ndim("linear input", x, 2)
    _check_ndim("linear weights", w, 2)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input has {x.shape[1]} features, weights expect {w.shape[1]}")
    out = np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64).T
    return out.astype(_out_dtype(x, w))


def linear_grad(upstream, x, w):
    up = np.asarray(upstream, dtype=np.float64)
    gx = up @ np.asarray(w, dtype=np.float64)
    gw = up.T @ np.asarray(x, dtype=np.float64)
    return gx.astype(x.dtype), gw.astype(w.dtype)


def relu(x):
    return np.maximum(x, 0).astype(x.dtype)


def relu_grad(upstream, x):
    return upstream * (x > 0)


def maxpool2d(x, k, stride, pad=0):
    _check_ndim("maxpool2d input", x, 4)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5)).astype(x.dtype)


def maxpool2d_grad(upstream, x, k, stride, pad=0):
    """Routes each output gradient to the first (row-major) max of its window."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    arg = win.reshape(n, c, ho, wo, k * k).argmax(axis=-1)
    gxp = np.zeros(xp.shape, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(hit, up, 0)
    return gxp[:, :, pad : pad + h, pad : pad + w].astype(x.dtype)


def global_avgpool(x):
    _check_ndim("global_avgpool input", x, 4)
    return np.asarray(x, dtype=np.float64).mean(axis=(2, 3)).astype(x.dtype)


def global_avgpool_grad(upstream, x_shape):
    n, c, h, w = x_shape
    g = np.asarray(upstream, dtype=np.float64)[:, :, None, None] / (h * w)
    return np.broadcast_to(g, x_shape).astype(upstream.dtype)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient wrt the logits."""
    _check_ndim("logits", logits, 2)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(n)
    loss = float((logsum - z[idx, labels]).mean())
    p = np.exp(z - logsum[:, None])
    p[idx, labels] -= 1.0
    return loss, (p / n).astype(logits.dtype)


def sgd_step(param, grad, velocity, lr, momentum, weight_decay):
    """In-place SGD with momentum: v = m*v + g + wd*p; p -= lr*v."""
    if not (param.shape == grad.shape == velocity.shape):
        raise ShapeError("sgd_step: param, grad and velocity shapes differ")
    v = momentum * velocity.astype(np.float64) + grad.astype(np.float64)
    v += weight_decay * param.astype(np.float64)
    velocity[...] = v
    param[...] = param.astype(np.float64) - lr * v
    return param, velocity


def lr_schedule(epoch, total_epochs, base_lr, warmup_epochs):
    """Linear warmup to ``base_lr``, then cosine annealing towards zero."""
    if total_epochs <= warmup_epochs:
        raise ValueError("total_epochs must exceed warmup_epochs")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    t = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
