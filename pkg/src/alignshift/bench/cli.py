"""Command line entry point: ``bench run | phantom | froc``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from importlib import resources
from pathlib import Path

from ..tensor import write_v4d
from . import experiment
from .froc import DEFAULT_FP_LEVELS, MetricError, froc_sensitivity, load_records, save_records
from .phantom import AcquisitionError, GenerationError, acquire, generate_phantom

PRESETS = ("default", "d7")


def preset_path(name):
    """Filesystem path of a config shipped with the package."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("alignshift.bench") / "configs" / f"{name}.cfg"


def _run(args):
    if args.config is None:
        path = preset_path(args.preset)
        cfg = experiment.parse_config(path.read_text(encoding="utf-8"))
    else:
        cfg = experiment.load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report = experiment.run_gap_experiment(cfg)
    (out / "gap_report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "config.cfg").write_text(experiment.format_config(cfg), encoding="utf-8")
    for (strat, cohort), recs in report.records.items():
        if cohort != "All":
            save_records(out / f"records_{strat}_{cohort.lower()}.jsonl", recs)
    print(report.summary())
    print(f"wrote {out / 'gap_report.csv'} in {time.perf_counter() - t0:.1f}s")
    return 0


def _phantom(args):
    ph = generate_phantom(args.seed, n_blobs=args.lesions)
    if args.slice_mm is None:
        vol, spacing = ph.volume, ph.fine_mm
    else:
        vol, meta = acquire(ph, args.slice_mm)
        spacing = meta.spacing_mm
    write_v4d(args.out, vol, spacing)
    for b in ph.lesions:
        print(f"lesion depth={b.center_mm:.2f}mm y={b.center_y:.2f} x={b.center_x:.2f} "
              f"radius={b.radius_mm:.2f}mm depth_radius={b.depth_radius_mm:.2f}mm")
    print(f"wrote {args.out} shape={vol.shape} spacing={spacing}mm")
    return 0


def _froc(args):
    recs = load_records(args.records)
    values, avg = froc_sensitivity(recs, DEFAULT_FP_LEVELS)
    for lv, v in zip(DEFAULT_FP_LEVELS, values):
        print(f"FPs/image {lv:>5g}: sensitivity {v:.4f}")
    print(f"Avg[0.5,1,2,4]: {avg:.4f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="bench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train all strategies and write the thin/thick gap report")
    r.add_argument("--config", help="key=value config file (default: the shipped preset)")
    r.add_argument("--preset", choices=PRESETS, default="default",
                   help="shipped config used when --config is absent")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=_run)

    ph = sub.add_parser("phantom", help="write one synthetic phantom as a V4D file")
    ph.add_argument("--seed", type=int, required=True)
    ph.add_argument("--out", required=True, help="V4D output path")
    ph.add_argument("--lesions", type=int, default=2)
    ph.add_argument("--slice-mm", type=float, help="acquire at this thickness instead of the fine grid")
    ph.set_defaults(func=_phantom)

    f = sub.add_parser("froc", help="FROC sensitivities of a JSON-lines record file")
    f.add_argument("--records", required=True)
    f.set_defaults(func=_froc)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (experiment.ConfigError, MetricError, GenerationError, AcquisitionError,
            OSError, ValueError) as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
