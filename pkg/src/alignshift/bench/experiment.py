"""Thin-vs-thick gap experiment on synthetic phantoms.

Three strategies share one toy key-slice detector:

``2.5d``
    every volume resampled to the reference thickness, the context slices
    stacked as input channels of a plain 2D network;
``tsm``
    every volume resampled to the reference thickness, 2D network converted
    to 3D with whole-slice shifts;
``alignshift``
    thin volumes resampled, thick volumes kept as acquired, network
    converted with thickness-aware fractional shifts.

Training phantoms alternate between the thin and thick acquisition. Every
test phantom is acquired both ways, so the Thin and Thick cohorts hold the
same anatomy and All is their union.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from .. import nn
from ..convert import NetworkSpec, conv2d, convert_network, norm2d, relu
from ..resample import normalize_for_policy, resample_depth
from .froc import AVG_FP_LEVELS, DEFAULT_FP_LEVELS, froc_sensitivity, match_detections
from .phantom import PhantomSettings, acquire, generate_phantom, slab_center_mm

log = logging.getLogger(__name__)

STRATEGIES = ("2.5d", "tsm", "alignshift")
COHORTS = ("All", "Thin", "Thick")
CSV_FIELDS = ("strategy", "cohort", "fp_level", "sensitivity", "avg", "diff")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    seed: int = 7
    n_phantoms: int = 100
    thin_mm: float = 1.0
    thick_mm: float = 5.0
    reference_mm: float = 2.0
    epochs: int = 20
    lr: float = 0.15
    slices_per_sample: int = 3
    batch_size: int = 8
    lesions_per_phantom: int = 3
    features: int = 12
    test_fraction: float = 0.6
    pos_weight: float = 4.0
    peak_threshold: float = 0.1

    def __post_init__(self):
        if self.slices_per_sample < 1 or self.slices_per_sample % 2 == 0:
            raise ConfigError("slices_per_sample must be a positive odd number")
        if self.n_phantoms < 4:
            raise ConfigError("n_phantoms must be at least 4")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1)")
        if not (0 < self.thin_mm <= self.reference_mm < self.thick_mm):
            raise ConfigError("need thin_mm <= reference_mm < thick_mm")
        if self.epochs < 0 or self.batch_size < 1 or self.features < 3:
            raise ConfigError("epochs >= 0, batch_size >= 1 and features >= 3 required")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


def parse_config(text):
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(BenchConfig)}
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        try:
            values[key] = int(val) if types[key] in (int, "int") else float(val)
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key}: {val!r}") from exc
    return BenchConfig(**values)


def load_config(path):
    with open(os.fspath(path), encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg):
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(BenchConfig))


# -- data -----------------------------------------------------------------------

@dataclass
class Sample:
    x: np.ndarray  # (C, D, H, W) network input
    target: np.ndarray  # (H, W) key-slice mask
    lesions: list  # (y, x, radius) on the key slice
    spacing: float  # thickness the network sees
    thin: bool


def _disk(shape, lesions):
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    mask = np.zeros(shape)
    for y, x, r in lesions:
        mask[(yy - y) ** 2 + (xx - x) ** 2 <= r ** 2] = 1.0
    return mask


def hit_radius(blob):
    return max(blob.radius_mm, 2.0)


def make_samples(phantom, slice_mm, strategy, cfg):
    """One sample per distinct key slice of the phantom's lesions."""
    vol, meta = acquire(phantom, slice_mm)
    if strategy == "alignshift":
        vol, meta = normalize_for_policy(vol, meta, cfg.reference_mm)
    elif meta.spacing_mm != cfg.reference_mm:
        vol, meta = resample_depth(vol, meta, cfg.reference_mm)
    s = meta.spacing_mm
    z0 = slab_center_mm(0, slice_mm, phantom.fine_mm)
    groups = {}
    for b in phantom.lesions:
        key = int(np.floor((b.center_mm - z0) / s + 0.5))
        groups.setdefault(key, []).append((b.center_y, b.center_x, hit_radius(b)))
    half = cfg.slices_per_sample // 2
    data = vol.data
    out = []
    for key in sorted(groups):
        if key - half < 0 or key + half >= data.shape[1]:
            raise ConfigError("context window leaves the volume; enlarge the phantom depth margin")
        win = data[:, key - half:key + half + 1]
        if strategy == "2.5d":
            win = win.reshape(-1, 1, *win.shape[-2:])
        lesions = groups[key]
        out.append(Sample(np.ascontiguousarray(win), _disk(win.shape[-2:], lesions),
                          lesions, s, slice_mm <= cfg.reference_mm))
    return out


def build_dataset(cfg, strategy):
    """Train/test samples; identical phantoms for every strategy."""
    settings = PhantomSettings()
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_phantoms)
    n_test = max(2, int(round(cfg.n_phantoms * cfg.test_fraction)))
    train, test = [], []
    for i, ss in enumerate(seeds):
        phantom = generate_phantom(int(ss.generate_state(1)[0]),
                                   n_blobs=cfg.lesions_per_phantom, settings=settings)
        if i < cfg.n_phantoms - n_test:
            mm = cfg.thin_mm if i % 2 == 0 else cfg.thick_mm
            train += make_samples(phantom, mm, strategy, cfg)
        else:
            test += make_samples(phantom, cfg.thin_mm, strategy, cfg)
            test += make_samples(phantom, cfg.thick_mm, strategy, cfg)
    return train, test


# -- model ----------------------------------------------------------------------

def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def backbone_2d(rng, in_channels, features):
    """Toy 2D backbone: three 3x3 convolutions with one norm layer."""
    F = features
    return NetworkSpec([
        conv2d(_he(rng, (F, in_channels, 3, 3), 9 * in_channels), np.zeros(F)),
        relu(),
        conv2d(_he(rng, (F, F, 3, 3), 9 * F), np.zeros(F)),
        norm2d(np.ones(F), np.zeros(F), np.zeros(F), np.ones(F)),
        relu(),
        conv2d(_he(rng, (F, F, 3, 3), 9 * F), np.zeros(F)),
        relu(),
    ], in_channels)


SHIFT_POLICY = [False, False, True, False, False, True, False]


class ToyDetector:
    """Converted backbone, Dx1x1 depth squeeze, per-pixel logit head."""

    def __init__(self, strategy, cfg, rng):
        D = cfg.slices_per_sample
        F = cfg.features
        self.strategy = strategy
        if strategy == "2.5d":
            net2d = backbone_2d(rng, D, F)
            self.backbone = convert_network(net2d)
            depth = 1
        else:
            net2d = backbone_2d(rng, 1, F)
            mode = "tsm" if strategy == "tsm" else "align"
            self.backbone = convert_network(net2d, SHIFT_POLICY, mode=mode,
                                            reference_mm=cfg.reference_mm)
            depth = D
        self.squeeze_w = _he(rng, (F, F, depth), F * depth)
        self.squeeze_b = np.zeros(F)
        self.head_w = _he(rng, (1, F), F) * 0.1
        self.head_b = np.array([-3.0])

    def parameters(self):
        return self.backbone.parameters() + [self.squeeze_w, self.squeeze_b,
                                             self.head_w, self.head_b]

    def forward(self, x, spacing):
        h, tape = nn.network_forward(self.backbone, x, spacing)
        h, c_sq = nn.depth_squeeze_forward(h, self.squeeze_w, self.squeeze_b)
        h, c_relu = nn.relu_forward(h)
        logits, c_head = nn.linear_head_forward(h, self.head_w, self.head_b)
        self._caches = (tape, c_sq, c_relu, c_head)
        return logits[..., 0, :, :]

    def backward(self, grad_logits):
        tape, c_sq, c_relu, c_head = self._caches
        g, ghw, ghb = nn.linear_head_backward(grad_logits[..., None, :, :], c_head)
        g = nn.relu_backward(g, c_relu)
        g, gsw, gsb = nn.depth_squeeze_backward(g, c_sq)
        _, grads = nn.network_backward(self.backbone, tape, g)
        return grads + [gsw, gsb, ghw, ghb]


def _batches(samples, batch_size, rng):
    idx = rng.permutation(len(samples))
    return [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]


def train_model(model, samples, cfg, rng):
    losses = []
    params = model.parameters()
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(samples, cfg.batch_size, rng):
            x = np.stack([samples[i].x for i in idx])
            t = np.stack([samples[i].target for i in idx])
            logits = model.forward(x, np.array([samples[i].spacing for i in idx]))
            loss, g = nn.bce_with_logits(logits, t, cfg.pos_weight)
            nn.sgd_step(params, model.backward(g), cfg.lr)
            total += loss * len(idx)
        losses.append(total / len(samples))
        log.debug("%s epoch %d loss %.5f", model.strategy, epoch, losses[-1])
    return losses


def extract_peaks(prob, threshold):
    """Connected components above ``threshold``; one ``(score, y, x)`` per component."""
    labels, n = ndimage.label(prob >= threshold)
    peaks = []
    for k in range(1, n + 1):
        masked = np.where(labels == k, prob, -np.inf)
        flat = int(np.argmax(masked))
        y, x = divmod(flat, prob.shape[1])
        peaks.append((float(prob[y, x]), y, x))
    return peaks


def evaluate(model, samples, cfg):
    records = {"Thin": [], "Thick": []}
    for s in samples:
        prob = nn.sigmoid(model.forward(s.x[np.newaxis], s.spacing))[0]
        rec = match_detections(extract_peaks(prob, cfg.peak_threshold), s.lesions)
        records["Thin" if s.thin else "Thick"].append(rec)
    records["All"] = records["Thin"] + records["Thick"]
    return records


# -- report -----------------------------------------------------------------------

@dataclass
class GapReport:
    sensitivities: dict  # (strategy, cohort) -> list aligned with fp_levels
    averages: dict  # (strategy, cohort) -> Avg over 0.5/1/2/4 FPs
    counts: dict  # (strategy, cohort) -> number of images
    fp_levels: tuple = DEFAULT_FP_LEVELS
    records: dict = field(default_factory=dict, repr=False)  # (strategy, cohort) -> DetectionRecords

    def diff(self, strategy, cohort):
        return self.averages[strategy, cohort] - self.averages[strategy, "All"]

    def gap(self, strategy):
        """``|diff_thin| + |diff_thick|``."""
        return abs(self.diff(strategy, "Thin")) + abs(self.diff(strategy, "Thick"))

    def strategies(self):
        return [s for s in STRATEGIES if (s, "All") in self.averages]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for strat in self.strategies():
            for cohort in COHORTS:
                avg = self.averages[strat, cohort]
                diff = "" if cohort == "All" else f"{self.diff(strat, cohort):+.6f}"
                for lv, sens in zip(self.fp_levels, self.sensitivities[strat, cohort]):
                    w.writerow([strat, cohort, f"{lv:g}", f"{sens:.6f}", f"{avg:.6f}", diff])
        return buf.getvalue()

    def summary(self):
        lines = [f"{'strategy':<11} {'cohort':<6} " + " ".join(f"{lv:>6g}" for lv in self.fp_levels)
                 + f" {'avg':>7} {'diff':>7}"]
        for strat in self.strategies():
            for cohort in COHORTS:
                sens = " ".join(f"{100 * v:6.2f}" for v in self.sensitivities[strat, cohort])
                diff = "      -" if cohort == "All" else f"{100 * self.diff(strat, cohort):+7.2f}"
                lines.append(f"{strat:<11} {cohort:<6} {sens} "
                             f"{100 * self.averages[strat, cohort]:7.2f} {diff}")
            lines.append(f"{'':<11} gap |thin|+|thick| = {100 * self.gap(strat):.2f}")
        return "\n".join(lines)


def run_strategy(strategy, cfg):
    train, test = build_dataset(cfg, strategy)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    model = ToyDetector(strategy, cfg, rng)
    losses = train_model(model, train, cfg, rng)
    return evaluate(model, test, cfg), losses


def run_gap_experiment(cfg, strategies=STRATEGIES):
    sens, avgs, counts, recs = {}, {}, {}, {}
    for strat in strategies:
        log.info("training %s", strat)
        records, losses = run_strategy(strat, cfg)
        log.info("%s final loss %.5f", strat, losses[-1] if losses else float("nan"))
        for cohort in COHORTS:
            values, avg = froc_sensitivity(records[cohort], DEFAULT_FP_LEVELS)
            sens[strat, cohort] = values
            avgs[strat, cohort] = avg
            counts[strat, cohort] = len(records[cohort])
            recs[strat, cohort] = records[cohort]
    return GapReport(sens, avgs, counts, records=recs)
