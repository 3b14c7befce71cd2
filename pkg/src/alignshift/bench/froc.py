"""Free-response ROC: sensitivity at fixed false positives per image."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

DEFAULT_FP_LEVELS = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
AVG_FP_LEVELS = (0.5, 1.0, 2.0, 4.0)


class MetricError(ValueError):
    pass


@dataclass
class DetectionRecord:
    """Scored detections of one image, already matched against its ground truth.

    Each true positive must correspond to a distinct ground-truth lesion.
    """

    detections: list = field(default_factory=list)  # (score, is_true_positive)
    n_positives: int = 0

    def __post_init__(self):
        self.detections = [(float(s), bool(tp)) for s, tp in self.detections]
        if self.n_positives < 0:
            raise MetricError("ground-truth count must be non-negative")
        if any(not np.isfinite(s) for s, _ in self.detections):
            raise MetricError("detection scores must be finite")
        if sum(tp for _, tp in self.detections) > self.n_positives:
            raise MetricError("more true positives than ground-truth lesions")


def froc_curve(records):
    """Operating points ``(fp_per_image, sensitivity)`` from strictest to loosest threshold.

    The first point is the empty detector (threshold above every score);
    tied scores always enter together.
    """
    if not records:
        raise MetricError("no records to evaluate")
    n_images = len(records)
    n_pos = sum(r.n_positives for r in records)
    if n_pos == 0:
        raise MetricError("no ground-truth positives in the records")
    dets = [d for r in records for d in r.detections]
    fps, sens = [0.0], [0.0]
    if dets:
        scores = np.array([s for s, _ in dets])
        tps = np.array([tp for _, tp in dets], dtype=np.int64)
        order = np.argsort(-scores, kind="stable")
        scores, tps = scores[order], tps[order]
        cum_tp = np.cumsum(tps)
        cum_fp = np.cumsum(1 - tps)
        # last index of each run of equal scores
        ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
        fps += list(cum_fp[ends] / n_images)
        sens += list(cum_tp[ends] / n_pos)
    return np.array(fps), np.array(sens)


def sensitivity_at(fps, sens, level):
    """Best sensitivity among operating points with at most ``level`` FPs per image."""
    ok = fps <= level
    return float(sens[ok].max())


def froc_sensitivity(records, fp_levels=DEFAULT_FP_LEVELS):
    """Returns ``(sensitivities at fp_levels, average over 0.5/1/2/4 FPs)``."""
    fps, sens = froc_curve(records)
    values = [sensitivity_at(fps, sens, lv) for lv in fp_levels]
    avg = float(np.mean([sensitivity_at(fps, sens, lv) for lv in AVG_FP_LEVELS]))
    return values, avg


def match_detections(peaks, lesions):
    """Greedy matching of scored peaks to lesions on one key slice.

    ``peaks`` are ``(score, y, x)``; ``lesions`` are ``(y, x, radius)``. A peak
    hits a lesion when it lies within the lesion radius of its centre. Peaks
    are visited by descending score; each lesion is matched at most once and
    everything else is a false positive.
    """
    taken = [False] * len(lesions)
    out = []
    for score, y, x in sorted(peaks, key=lambda p: -p[0]):
        hit = False
        for j, (ly, lx, rad) in enumerate(lesions):
            if not taken[j] and (y - ly) ** 2 + (x - lx) ** 2 <= rad ** 2:
                taken[j] = hit = True
                break
        out.append((score, hit))
    return DetectionRecord(out, len(lesions))


def save_records(path, records):
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"n_positives": r.n_positives,
                                 "detections": [[s, tp] for s, tp in r.detections]}) + "\n")


def load_records(path):
    records = []
    with open(os.fspath(path), encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(DetectionRecord([tuple(d) for d in obj["detections"]],
                                               int(obj["n_positives"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise MetricError(f"line {n}: {exc}") from exc
    return records
