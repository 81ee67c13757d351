"""Command line entry point: ``cmrsynth <subcommand> [options]``.

Subcommands: phantom, preprocess, train, synth, montage, report. Each run
writes ``resolved_config.ini`` beside its outputs. Failures exit with status
1 and print one line to stderr::

    error: kind=<ExceptionName> message="<text>"
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .figures import coherence_report, render_montage, write_report
from .inference import SynthesisRequest, export_dataset, load_dataset, synthesize_sequence
from .nifti import load_label_volume, save_label_volume
from .phantom import generate_label_sequence
from .preprocessing import build_training_set, read_cache, write_cache

LABELS_FILE = "labels.nii.gz"


def _add_common(p):
    p.add_argument("--config", type=Path, help="run config file (INI sections phantom/data/model/train/inference)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable; wins over the file")


def build_parser():
    parser = argparse.ArgumentParser(prog="cmrsynth", description="Labeled 4D cardiac MR synthesis")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate and export a 4D phantom label sequence")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("preprocess", help="build and cache the 2D training set")
    _add_common(p)
    p.add_argument("--in", dest="input", type=Path, required=True, help="dataset root with patient directories")
    p.add_argument("--out", type=Path, help="cache directory (default: $CMRSYNTH_CACHE_DIR/training_set)")

    p = sub.add_parser("train", help="train the synthesis model")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="preprocessed cache directory")
    p.add_argument("--out", type=Path, required=True, help="run directory for checkpoints and loss history")
    p.add_argument("--no-resume", action="store_true", help="ignore an existing latest.ckpt")

    p = sub.add_parser("synth", help="synthesize a labeled 4D dataset from phantom or given labels")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="trained checkpoint file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--labels", type=Path, help="4D label NIfTI (e.g. from the phantom subcommand)")
    src.add_argument("--phantom", action="store_true", help="generate labels from the [phantom] config")
    p.add_argument("--style", type=Path, help="style image (.nii/.nii.gz/.npy); implies inference.style=encode")
    p.add_argument("--out", type=Path, required=True, help="output dataset directory")
    p.add_argument("--overwrite", action="store_true", help="replace an existing dataset in --out")

    p = sub.add_parser("montage", help="figure-style grid of label maps over synthetic images")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True, help="dataset directory from synth")
    p.add_argument("--axis", choices=("time", "slice"), required=True, help="walk frames or slices")
    p.add_argument("--index", type=int, required=True, help="fixed slice (axis=time) or frame (axis=slice)")
    p.add_argument("--count", type=int, help="number of walked positions from the start (default: all)")
    p.add_argument("--start", type=int, default=0, help="first walked position")
    p.add_argument("--gif", action="store_true", help="also write an animated GIF")
    p.add_argument("--out", type=Path, required=True, help="output PNG path")

    p = sub.add_parser("report", help="coherence metrics table for a synthetic dataset")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True, help="dataset directory from synth")
    p.add_argument("--pairs", type=int, default=200, help="shuffled baseline pair count (>= 100)")
    p.add_argument("--out", type=Path, required=True, help="output TSV path")
    return parser


def _run_args(args):
    return {k: (str(v) if isinstance(v, Path) else json.dumps(v)) for k, v in sorted(vars(args).items())}


def cmd_phantom(run, args):
    out = cfgmod.resolve_output(args.out)
    labels = generate_label_sequence(run.phantom)
    out.mkdir(parents=True, exist_ok=True)
    save_label_volume(labels, out / LABELS_FILE)
    run.write_snapshot(out, _run_args(args))
    print(f"wrote {out / LABELS_FILE} shape={labels.shape}")


def cmd_preprocess(run, args):
    out = cfgmod.resolve_output(args.out) if args.out else cfgmod.default_cache_dir() / "training_set"
    root = args.input
    matches = sorted(p for p in root.glob(run.data.image_glob) if run.data.mask_suffix not in p.name)
    patients = sorted({p.parent for p in matches})
    if not patients:
        raise FileNotFoundError(f"no images matching {run.data.image_glob!r} under {root}")
    pairs = build_training_set(patients, run.data)
    write_cache(pairs, out)
    run.write_snapshot(out, _run_args(args))
    print(f"wrote {len(pairs)} pairs to {out}")


def cmd_train(run, args):
    from .training import train

    out = cfgmod.resolve_output(args.out)
    pairs = read_cache(args.data)
    run.write_snapshot(out, _run_args(args))
    _, state, _ = train(pairs, run.model, run.train, out, resume=not args.no_resume)
    print(f"trained to step {state.step}; checkpoint {out / 'final.ckpt'}")


def _load_style(path):
    if path.suffix == ".npy":
        return np.load(path)
    import nibabel as nib

    arr = np.asarray(nib.load(str(path)).dataobj, dtype=np.float32)
    return np.transpose(arr, (2, 0, 1)) if arr.ndim == 3 else arr


def cmd_synth(run, args):
    out = cfgmod.resolve_output(args.out)
    labels = generate_label_sequence(run.phantom) if args.phantom else load_label_volume(args.labels)
    inf = run.inference
    style = "encode" if args.style is not None else inf.style
    request = SynthesisRequest(
        checkpoint=args.checkpoint,
        labels=labels,
        style=style,
        style_image=_load_style(args.style) if args.style is not None else None,
        seed=inf.seed,
        per_slice_z=inf.per_slice_z,
        fit_mode=inf.fit_mode,
        target_spacing=inf.target_spacing,
        batch_size=inf.batch_size,
    )
    dataset = synthesize_sequence(request)
    export_dataset(dataset, out, overwrite=args.overwrite)
    run.write_snapshot(out, _run_args(args))
    print(f"wrote dataset {out} shape={dataset.images.shape}")


def cmd_montage(run, args):
    out = cfgmod.resolve_output(args.out)
    dataset = load_dataset(args.dataset)
    indices = None
    if args.count is not None:
        indices = list(range(args.start, args.start + args.count))
    info = render_montage(dataset, args.axis, args.index, out, indices=indices, gif=args.gif)
    run.write_snapshot(out.parent, _run_args(args))
    print(f"wrote {info.path} grid={info.rows}x{info.cols}")


def cmd_report(run, args):
    if args.pairs < 100:
        raise ValueError("--pairs must be >= 100")
    out = cfgmod.resolve_output(args.out)
    report = coherence_report(load_dataset(args.dataset), n_baseline_pairs=args.pairs)
    write_report(report, out)
    run.write_snapshot(out.parent, _run_args(args))
    print(f"wrote {out}")


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "synth": cmd_synth,
    "montage": cmd_montage,
    "report": cmd_report,
}


def _error_line(exc):
    message = " ".join(str(exc).split()).replace('"', "'")
    return f'error: kind={type(exc).__name__} message="{message}"'


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(stream=sys.stdout, level=logging.INFO, format="%(message)s")
    try:
        run = cfgmod.load_config(args.config, args.overrides)
        COMMANDS[args.command](run, args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one stderr line
        print(_error_line(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
