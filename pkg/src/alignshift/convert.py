"""Convert 2D layer stacks into depth-aware 3D ones.

Conv2D KxK becomes an (optionally shift-prefixed) Conv3D 1xKxK, Pool2D KxK
becomes Pool3D 1xKxK and Norm2D becomes Norm3D with the same per-channel
statistics. Every 3D kernel has depth extent 1, so the conversion adds no
parameters and pretrained 2D weights carry over unchanged.

Manifest format (UTF-8, one record per line, ``#`` starts a comment)::

    alignshift-net 1
    in_channels <C>
    shift_mode <align|tsm>
    <kind> <K|-> <in|-> <out|-> <shift>

``shift`` is ``-`` or ``<up>,<down>,<reference_mm>``. For Norm layers the
``in``/``out`` columns both hold the channel count. The sidecar weights file
is raw little-endian float64, layer by layer: conv weights then bias; norm
scale, offset, running mean, running variance; nothing for pool/relu.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .shift import ShiftConfig

KINDS_2D = ("Conv2D", "Pool2D", "Norm2D")
KINDS_3D = ("Conv3D", "Pool3D", "Norm3D")
# ReLU has no dimensionality; it passes through conversion unchanged
KINDS = KINDS_2D + KINDS_3D + ("ReLU",)
SHIFT_MODES = ("align", "tsm")
NORM_EPS = 1e-5


class ConversionError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class NormStats:
    scale: np.ndarray
    offset: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = NORM_EPS

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64).copy()
        self.offset = np.asarray(self.offset, dtype=np.float64).copy()
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64).copy()
        self.running_var = np.asarray(self.running_var, dtype=np.float64).copy()
        n = self.scale.shape
        if len(n) != 1 or any(a.shape != n for a in
                              (self.offset, self.running_mean, self.running_var)):
            raise ConversionError("norm statistics must be 1D arrays of equal length")
        if np.any(self.running_var < 0):
            raise ConversionError("running variance must be non-negative")

    @property
    def channels(self):
        return self.scale.shape[0]

    def copy(self):
        return NormStats(self.scale, self.offset, self.running_mean, self.running_var, self.eps)


@dataclass
class LayerSpec:
    kind: str
    kernel: Optional[int] = None
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    shift_prefix: Optional[ShiftConfig] = None
    norm_stats: Optional[NormStats] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConversionError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("Conv2D", "Conv3D"):
            self._check_conv()
        elif self.kind in ("Pool2D", "Pool3D"):
            if self.kernel is None or self.kernel < 1:
                raise ConversionError("pool layers need a positive kernel size")
        elif self.kind in ("Norm2D", "Norm3D"):
            if self.norm_stats is None:
                raise ConversionError("norm layers need statistics")
            self.in_channels = self.out_channels = self.norm_stats.channels
        if self.shift_prefix is not None:
            if self.kind != "Conv3D":
                raise ConversionError("only Conv3D layers take a shift prefix")
            self.shift_prefix.check(self.in_channels)

    def _check_conv(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if self.kind == "Conv2D":
            if w.ndim != 4:
                raise ConversionError(f"Conv2D weights must be out x in x K x K, got {w.shape}")
            out_c, in_c, kh, kw = w.shape
        else:
            if w.ndim != 5:
                raise ConversionError(f"Conv3D weights must be out x in x 1 x K x K, got {w.shape}")
            out_c, in_c, kd, kh, kw = w.shape
            if kd != 1:
                raise ConversionError(f"Conv3D depth extent must be 1, got {kd}")
        if kh != kw or kh % 2 == 0:
            raise ConversionError(f"kernel must be square and odd, got {kh}x{kw}")
        if self.kernel is not None and self.kernel != kh:
            raise ConversionError(f"declared kernel {self.kernel} does not match weights {kh}")
        if self.in_channels is not None and self.in_channels != in_c:
            raise ConversionError("declared in_channels does not match weights")
        if self.out_channels is not None and self.out_channels != out_c:
            raise ConversionError("declared out_channels does not match weights")
        b = np.zeros(out_c) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        if b.shape != (out_c,):
            raise ConversionError(f"bias must have shape ({out_c},), got {b.shape}")
        self.weights, self.bias = w.copy(), b.copy()
        self.kernel, self.in_channels, self.out_channels = kh, in_c, out_c

    @property
    def is_2d(self):
        return self.kind in KINDS_2D

    @property
    def is_3d(self):
        return self.kind in KINDS_3D

    def parameters(self):
        """Learnable arrays, in sidecar order (running statistics excluded)."""
        if self.kind in ("Conv2D", "Conv3D"):
            return [self.weights, self.bias]
        if self.kind in ("Norm2D", "Norm3D"):
            return [self.norm_stats.scale, self.norm_stats.offset]
        return []

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def copy(self):
        return replace(
            self,
            weights=None if self.weights is None else self.weights.copy(),
            bias=None if self.bias is None else self.bias.copy(),
            norm_stats=None if self.norm_stats is None else self.norm_stats.copy(),
        )


def conv2d(weights, bias=None):
    return LayerSpec("Conv2D", weights=weights, bias=bias)


def pool2d(kernel):
    return LayerSpec("Pool2D", kernel=kernel)


def norm2d(scale, offset, running_mean, running_var):
    return LayerSpec("Norm2D", norm_stats=NormStats(scale, offset, running_mean, running_var))


def relu():
    return LayerSpec("ReLU")


@dataclass
class NetworkSpec:
    layers: list
    in_channels: int
    shift_mode: str = "align"

    def __post_init__(self):
        if self.shift_mode not in SHIFT_MODES:
            raise ConversionError(f"shift_mode must be one of {SHIFT_MODES}")
        c = self.in_channels
        for i, layer in enumerate(self.layers):
            if layer.kind in ("Conv2D", "Conv3D", "Norm2D", "Norm3D"):
                if layer.in_channels != c:
                    raise ConversionError(
                        f"layer {i} ({layer.kind}) expects {layer.in_channels} channels, gets {c}")
                c = layer.out_channels
        self.out_channels = c

    @property
    def is_2d(self):
        return any(l.is_2d for l in self.layers) and not any(l.is_3d for l in self.layers)

    def parameter_count(self):
        return sum(l.parameter_count() for l in self.layers)

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]

    def shift_layers(self):
        return [l for l in self.layers if l.shift_prefix is not None]

    def copy(self):
        return NetworkSpec([l.copy() for l in self.layers], self.in_channels, self.shift_mode)


def inflate_conv_weights(w2d):
    """out x in x K x K -> out x in x 1 x K x K with identical values."""
    w = np.asarray(w2d, dtype=np.float64)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ConversionError(f"expected out x in x K x K weights, got shape {w.shape}")
    return w[:, :, np.newaxis, :, :].copy()


def convert_layer(layer, attach_shift=False, cfg=None):
    if not layer.is_2d and layer.kind != "ReLU":
        raise ConversionError(f"cannot convert {layer.kind}: not a 2D layer")
    if attach_shift and layer.kind != "Conv2D":
        raise ConversionError(f"shift prefixes attach to convolutions only, not {layer.kind}")
    if layer.kind == "Conv2D":
        prefix = None
        if attach_shift:
            prefix = cfg if cfg is not None else ShiftConfig.for_channels(layer.in_channels)
        return LayerSpec("Conv3D", weights=inflate_conv_weights(layer.weights),
                         bias=layer.bias.copy(), shift_prefix=prefix)
    if layer.kind == "Pool2D":
        return LayerSpec("Pool3D", kernel=layer.kernel)
    if layer.kind == "Norm2D":
        return LayerSpec("Norm3D", norm_stats=layer.norm_stats.copy())
    return LayerSpec("ReLU")


def convert_network(net, shift_policy=None, cfg=None, mode="align", reference_mm=2.0):
    """Layerwise conversion; ``shift_policy[i]`` attaches a shift to layer ``i``.

    ``cfg`` is either one ShiftConfig used for every shifted layer or ``None``
    for the default ceil(C/8) partition of each layer's input channels.
    """
    if shift_policy is None:
        shift_policy = [False] * len(net.layers)
    if len(shift_policy) != len(net.layers):
        raise ConversionError("shift_policy needs one flag per layer")
    layers = []
    for layer, flag in zip(net.layers, shift_policy):
        layer_cfg = cfg
        if flag and cfg is None:
            layer_cfg = ShiftConfig.for_channels(layer.in_channels, reference_mm)
        layers.append(convert_layer(layer, bool(flag), layer_cfg))
    return NetworkSpec(layers, net.in_channels, mode)


def _fmt(v):
    return "-" if v is None else str(v)


def save_network(net, manifest_path, weights_path):
    lines = ["alignshift-net 1", f"in_channels {net.in_channels}", f"shift_mode {net.shift_mode}"]
    chunks = []
    for layer in net.layers:
        shift = "-"
        if layer.shift_prefix is not None:
            c = layer.shift_prefix
            shift = f"{c.shift_up},{c.shift_down},{c.reference_mm!r}"
        lines.append(" ".join([layer.kind, _fmt(layer.kernel), _fmt(layer.in_channels),
                               _fmt(layer.out_channels), shift]))
        if layer.kind in ("Conv2D", "Conv3D"):
            chunks += [layer.weights.ravel(), layer.bias]
        elif layer.norm_stats is not None:
            ns = layer.norm_stats
            chunks += [ns.scale, ns.offset, ns.running_mean, ns.running_var]
    with open(os.fspath(manifest_path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    payload = np.concatenate(chunks) if chunks else np.zeros(0)
    with open(os.fspath(weights_path), "wb") as fh:
        fh.write(payload.astype("<f8").tobytes())


def _int_or_none(tok):
    return None if tok == "-" else int(tok)


def load_network(manifest_path, weights_path):
    with open(os.fspath(manifest_path), encoding="utf-8") as fh:
        rows = [ln.split("#", 1)[0].split() for ln in fh]
    rows = [r for r in rows if r]
    if len(rows) < 3 or rows[0] != ["alignshift-net", "1"]:
        raise ManifestError("not an alignshift-net v1 manifest")
    try:
        in_channels = int(rows[1][1]) if rows[1][0] == "in_channels" else None
        mode = rows[2][1] if rows[2][0] == "shift_mode" else None
    except (IndexError, ValueError) as exc:
        raise ManifestError("bad manifest header") from exc
    if in_channels is None or mode is None:
        raise ManifestError("bad manifest header")

    with open(os.fspath(weights_path), "rb") as fh:
        raw = fh.read()
    if len(raw) % 8:
        raise ManifestError("weights file is not a whole number of float64 values")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > flat.size:
            raise ManifestError("weights file is shorter than the manifest requires")
        out = flat[pos:pos + n].copy()
        pos += n
        return out

    layers = []
    for row in rows[3:]:
        if len(row) != 5:
            raise ManifestError(f"layer line needs 5 fields: {' '.join(row)}")
        kind, k, cin, cout, shift = row
        k, cin, cout = _int_or_none(k), _int_or_none(cin), _int_or_none(cout)
        prefix = None
        if shift != "-":
            up, down, ref = shift.split(",")
            prefix = ShiftConfig(int(up), int(down), float(ref))
        if kind in ("Conv2D", "Conv3D"):
            shape = (cout, cin, k, k) if kind == "Conv2D" else (cout, cin, 1, k, k)
            w = take(int(np.prod(shape))).reshape(shape)
            layers.append(LayerSpec(kind, weights=w, bias=take(cout), shift_prefix=prefix))
        elif kind in ("Norm2D", "Norm3D"):
            stats = NormStats(take(cin), take(cin), take(cin), take(cin))
            layers.append(LayerSpec(kind, norm_stats=stats))
        elif kind in ("Pool2D", "Pool3D"):
            layers.append(LayerSpec(kind, kernel=k))
        elif kind == "ReLU":
            layers.append(LayerSpec(kind))
        else:
            raise ManifestError(f"unknown layer kind {kind!r}")
    if pos != flat.size:
        raise ManifestError("weights file is longer than the manifest requires")
    return NetworkSpec(layers, in_channels, mode)
