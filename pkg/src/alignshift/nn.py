"""Forward/backward operators for depth-1 3D networks.

Everything works on float64 arrays shaped ``(..., C, D, H, W)``; leading axes
are a batch. Forward functions return ``(output, cache)`` and the matching
backward takes ``(grad_output, cache)``. There is no autodiff graph: a
network is a flat list of layers run forward, then unwound in reverse by
:func:`network_backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convert import NetworkSpec
from .shift import align_shift, align_shift_adjoint, tsm_shift, tsm_shift_adjoint

NORM_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    epochs: int
    batch_size: int
    seed: int

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


def _require(cache):
    if cache is None:
        raise StateError("backward called before forward")
    return cache


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


# -- convolution ------------------------------------------------------------

def _kernel2d(w):
    w = _as_f64(w)
    if w.ndim == 5:
        if w.shape[2] != 1:
            raise ShapeError(f"kernel depth extent must be 1, got {w.shape[2]}")
        w = w[:, :, 0]
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"expected out x in x (1 x) K x K with odd K, got {w.shape}")
    return w


def conv3d_1kk_forward(x, w, b):
    """Per-slice KxK convolution, zero same-padding.

    ``out[o, d] = sum_i w[o, i] * x[i, d] + b[o]`` (cross-correlation, as in
    every deep-learning framework).
    """
    x = _as_f64(x)
    w2 = _kernel2d(w)
    cout, cin, K, _ = w2.shape
    b = _as_f64(b)
    if x.ndim < 4 or x.shape[-4] != cin:
        raise ShapeError(f"input {x.shape} does not have {cin} channels at axis -4")
    if b.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {b.shape}")
    lead = x.shape[:-4]
    D, H, W = x.shape[-3:]
    p = K // 2
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)])
    cols = np.empty(lead + (cin, K * K, D, H, W))
    for ky in range(K):
        for kx in range(K):
            cols[..., ky * K + kx, :, :, :] = xp[..., ky:ky + H, kx:kx + W]
    cols = cols.reshape(lead + (cin * K * K, D, H, W))
    wmat = w2.reshape(cout, cin * K * K)
    out = np.moveaxis(np.tensordot(cols, wmat, axes=([-4], [1])), -1, -4)
    out = np.ascontiguousarray(out) + b[:, None, None, None]
    return out, (cols, wmat, w.shape, x.shape, K)


def conv3d_1kk_backward(grad_out, cache):
    cols, wmat, w_shape, x_shape, K = _require(cache)
    g = _as_f64(grad_out)
    cout = wmat.shape[0]
    lead = x_shape[:-4]
    cin = x_shape[-4]
    D, H, W = x_shape[-3:]
    gm = np.moveaxis(g, -4, 0).reshape(cout, -1)
    cm = np.moveaxis(cols, -4, 0).reshape(cols.shape[-4], -1)
    grad_w = (gm @ cm.T).reshape(w_shape)
    grad_b = gm.sum(axis=1)
    gcols = (wmat.T @ gm).reshape((cin * K * K,) + lead + (D, H, W))
    gcols = np.moveaxis(gcols, 0, -4).reshape(lead + (cin, K * K, D, H, W))
    p = K // 2
    gxp = np.zeros(lead + (cin, D, H + 2 * p, W + 2 * p))
    for ky in range(K):
        for kx in range(K):
            gxp[..., ky:ky + H, kx:kx + W] += gcols[..., ky * K + kx, :, :, :]
    return gxp[..., p:p + H, p:p + W].copy(), grad_w, grad_b


# -- pointwise / pooling / normalization --------------------------------------

def relu_forward(x):
    x = _as_f64(x)
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(grad_out, cache):
    return np.where(_require(cache), grad_out, 0.0)


def pool3d_1kk_forward(x, K):
    """Spatial KxK max pooling, stride K, no depth pooling; ragged edges are dropped."""
    x = _as_f64(x)
    H, W = x.shape[-2:]
    Ho, Wo = H // K, W // K
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"pool kernel {K} larger than plane {H}x{W}")
    lead = x.shape[:-2]
    win = x[..., :Ho * K, :Wo * K].reshape(lead + (Ho, K, Wo, K))
    win = np.swapaxes(win, -3, -2).reshape(lead + (Ho, Wo, K * K))
    idx = np.argmax(win, axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, K)


def pool3d_1kk_backward(grad_out, cache):
    idx, x_shape, K = _require(cache)
    g = _as_f64(grad_out)
    H, W = x_shape[-2:]
    Ho, Wo = idx.shape[-2:]
    lead = x_shape[:-2]
    gwin = np.zeros(idx.shape + (K * K,))
    np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
    gwin = np.swapaxes(gwin.reshape(lead + (Ho, Wo, K, K)), -3, -2)
    gx = np.zeros(x_shape)
    gx[..., :Ho * K, :Wo * K] = gwin.reshape(lead + (Ho * K, Wo * K))
    return gx


def _bcast(v):
    return v[:, None, None, None]


def norm3d_forward(x, stats, train=False):
    """Per-channel affine normalization.

    Inference uses the stored running statistics for every depth slice. In
    training mode the statistics come from the input itself (all axes but
    the channel axis) and the running estimates are updated in place.
    """
    x = _as_f64(x)
    C = stats.channels
    if x.ndim < 4 or x.shape[-4] != C:
        raise ShapeError(f"input {x.shape} does not have {C} channels at axis -4")
    if train:
        axes = tuple(i for i in range(x.ndim) if i != x.ndim - 4)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        stats.running_mean[...] = (1 - NORM_MOMENTUM) * stats.running_mean + NORM_MOMENTUM * mean
        stats.running_var[...] = (1 - NORM_MOMENTUM) * stats.running_var + NORM_MOMENTUM * var
    else:
        mean, var = stats.running_mean, stats.running_var
    inv_std = 1.0 / np.sqrt(var + stats.eps)
    xhat = (x - _bcast(mean)) * _bcast(inv_std)
    out = _bcast(stats.scale) * xhat + _bcast(stats.offset)
    return out, (xhat, inv_std, stats.scale.copy(), train)


def norm3d_backward(grad_out, cache):
    """Returns ``(grad_x, grad_scale, grad_offset)``."""
    xhat, inv_std, scale, train = _require(cache)
    g = _as_f64(grad_out)
    axes = tuple(i for i in range(g.ndim) if i != g.ndim - 4)
    grad_offset = g.sum(axis=axes)
    grad_scale = (g * xhat).sum(axis=axes)
    gxhat = g * _bcast(scale)
    if not train:
        return gxhat * _bcast(inv_std), grad_scale, grad_offset
    n = g.size // g.shape[-4]
    mean_g = gxhat.sum(axis=axes) / n
    mean_gx = (gxhat * xhat).sum(axis=axes) / n
    gx = _bcast(inv_std) * (gxhat - _bcast(mean_g) - xhat * _bcast(mean_gx))
    return gx, grad_scale, grad_offset


# -- depth squeeze and head ----------------------------------------------------

def depth_squeeze_forward(x, w, b=None):
    """Collapse depth with a Dx1x1 convolution: ``(..., C, D, H, W) -> (..., C', H, W)``.

    ``w`` has shape ``(C', C, D)`` (trailing singleton axes are accepted).
    """
    x = _as_f64(x)
    w = _as_f64(w)
    if w.ndim == 5 and w.shape[-2:] == (1, 1):
        w = w[..., 0, 0]
    if w.ndim != 3:
        raise ShapeError(f"squeeze weights must be C' x C x D, got {w.shape}")
    cout, cin, D = w.shape
    if x.ndim < 4 or x.shape[-4:-2] != (cin, D):
        raise ShapeError(f"input {x.shape} incompatible with squeeze weights {w.shape}")
    b = np.zeros(cout) if b is None else _as_f64(b)
    lead = x.shape[:-4]
    H, W = x.shape[-2:]
    xr = x.reshape(lead + (cin * D, H, W))
    wmat = w.reshape(cout, cin * D)
    out = np.moveaxis(np.tensordot(xr, wmat, axes=([-3], [1])), -1, -3)
    out = np.ascontiguousarray(out) + b[:, None, None]
    return out, (xr, wmat, w.shape, x.shape)


def _channel_matmul_backward(g, xr, wmat):
    cout, k = wmat.shape
    gm = np.moveaxis(g, -3, 0).reshape(cout, -1)
    xm = np.moveaxis(xr, -3, 0).reshape(k, -1)
    grad_w = gm @ xm.T
    grad_b = gm.sum(axis=1)
    gx = np.moveaxis((wmat.T @ gm).reshape((k,) + xr.shape[:-3] + xr.shape[-2:]), 0, -3)
    return gx, grad_w, grad_b


def depth_squeeze_backward(grad_out, cache):
    xr, wmat, w_shape, x_shape = _require(cache)
    gx, grad_w, grad_b = _channel_matmul_backward(_as_f64(grad_out), xr, wmat)
    return gx.reshape(x_shape), grad_w.reshape(w_shape), grad_b


def linear_head_forward(x, w, b):
    """Per-pixel linear map on ``(..., C, H, W)`` features; ``w`` is ``(n_out, C)``."""
    x = _as_f64(x)
    w = _as_f64(w)
    if w.ndim != 2 or x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise ShapeError(f"features {x.shape} incompatible with head weights {w.shape}")
    out = np.moveaxis(np.tensordot(x, w, axes=([-3], [1])), -1, -3)
    out = np.ascontiguousarray(out) + _as_f64(b)[:, None, None]
    return out, (x, w)


def linear_head_backward(grad_out, cache):
    x, w = _require(cache)
    return _channel_matmul_backward(_as_f64(grad_out), x, w)


def bce_with_logits(logits, target, pos_weight=1.0):
    """Mean binary cross-entropy on logits; returns ``(loss, grad_logits)``."""
    z = _as_f64(logits)
    t = _as_f64(target)
    if z.shape != t.shape:
        raise ShapeError(f"logits {z.shape} and targets {t.shape} differ")
    # log(1 + exp(-|z|)) keeps both branches finite
    soft = np.logaddexp(0.0, -np.abs(z))
    log_p = np.minimum(z, 0.0) - soft  # log sigmoid(z)
    log_q = np.minimum(-z, 0.0) - soft  # log sigmoid(-z)
    weight = np.where(t > 0, pos_weight, 1.0)
    n = z.size
    loss = -np.sum(weight * (t * log_p + (1 - t) * log_q)) / n
    p = np.exp(log_p)
    grad = weight * (p * (1 - t) - (1 - p) * t) / n
    return float(loss), grad


def sigmoid(z):
    z = _as_f64(z)
    return np.exp(np.minimum(z, 0.0) - np.logaddexp(0.0, -np.abs(z)))


def sgd_step(params, grads, lr):
    """Plain SGD, in place."""
    if len(params) != len(grads):
        raise ShapeError("parameter and gradient lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        p -= lr * g


# -- whole networks ------------------------------------------------------------

def _apply_shift(h, layer, mode, spacing, adjoint=False):
    cfg = layer.shift_prefix
    if mode == "tsm":
        return tsm_shift_adjoint(h, cfg) if adjoint else tsm_shift(h, cfg)
    op = align_shift_adjoint if adjoint else align_shift
    if np.ndim(spacing) == 0:
        return op(h, spacing, cfg)
    # one thickness per batch item
    if h.ndim != 5 or len(spacing) != h.shape[0]:
        raise ShapeError(f"{len(spacing)} thicknesses for a batch of shape {h.shape}")
    for item, s in zip(h, spacing):
        op(item, float(s), cfg)
    return h


def network_forward(net: NetworkSpec, x, spacing=None, train=False):
    """Run a converted 3D network; returns ``(output, tape)``.

    ``spacing`` is the input's slice thickness (or one per item of a batched
    ``(N, C, D, H, W)`` input); it drives every AlignShift prefix and is
    ignored for TSM networks.
    """
    if net.is_2d:
        raise ShapeError("network_forward runs converted 3D networks; convert the 2D network first")
    h = _as_f64(x)
    tape = []
    for layer in net.layers:
        kind = layer.kind
        if kind == "Conv3D":
            if layer.shift_prefix is not None:
                if net.shift_mode == "align" and spacing is None:
                    raise ValueError("AlignShift layers need the input thickness")
                h = _apply_shift(h.copy(), layer, net.shift_mode, spacing)
            h, cache = conv3d_1kk_forward(h, layer.weights, layer.bias)
        elif kind == "Pool3D":
            h, cache = pool3d_1kk_forward(h, layer.kernel)
        elif kind == "Norm3D":
            h, cache = norm3d_forward(h, layer.norm_stats, train=train)
        elif kind == "ReLU":
            h, cache = relu_forward(h)
        else:
            raise ShapeError(f"unsupported layer kind {kind!r} in a 3D network")
        tape.append(cache)
    return h, (tape, spacing)


def network_backward(net: NetworkSpec, tape, grad_out):
    """Reverse pass; returns ``(grad_input, grads)`` with ``grads`` aligned to ``net.parameters()``."""
    caches, spacing = _require(tape)
    if len(caches) != len(net.layers):
        raise StateError("tape does not belong to this network")
    g = _as_f64(grad_out)
    grads = []
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        kind = layer.kind
        if kind == "Conv3D":
            g, gw, gb = conv3d_1kk_backward(g, cache)
            if layer.shift_prefix is not None:
                g = _apply_shift(g, layer, net.shift_mode, spacing, adjoint=True)
            grads += [gb, gw]
        elif kind == "Pool3D":
            g = pool3d_1kk_backward(g, cache)
        elif kind == "Norm3D":
            g, gs, go = norm3d_backward(g, cache)
            grads += [go, gs]
        else:
            g = relu_backward(g, cache)
    grads.reverse()
    return g, grads
