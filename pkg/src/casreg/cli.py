"""Command-line front end: ``casreg register|segment|eval|synth|sweep``.

Exit codes: 0 success, 2 bad arguments, 3 I/O failure, 4 numeric failure
(NaN during optimization), 5 every atlas registration failed.

Defaults may also come from ``casreg.cfg`` in the working directory (or the
file named by ``--config``): one ``key=value`` per line, keys spelled like
the long flags without dashes (``lambda=0.5``, ``cascades=3``). Flags given
on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from casreg import __version__, _kernels
from casreg.deform import jacobian_report, random_smooth_field, save_field, warp_labels, warp_scalar
from casreg.evaluation import DEFAULT_LABELS, dice_report, experiment_suite, summarize_suite
from casreg.mas import (
    AllRegistrationsFailed,
    Atlas,
    FusionConfig,
    load_bank,
    save_atlas,
    segment,
)
from casreg.phantom import AGE_RANGE, PAIR_NOISE, make_phantom
from casreg.registration import (
    STRATEGIES,
    RegistrationConfig,
    apply_rigid,
    cascade_register,
    rigid_register,
)
from casreg.volume import VolumeFormatError, load_labels, load_volume, normalize, save_volume

log = logging.getLogger("casreg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_ALL_FAILED = 0, 2, 3, 4, 5
CONFIG_FILE = "casreg.cfg"
GRID_KEYS = ("lambda", "cascades")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _csv_ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_common(p):
    p.add_argument("--version", action="version", version=f"casreg {__version__}")
    p.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                   help="numba worker threads (default: all cores)")
    p.add_argument("--config", default=None,
                   help=f"key=value defaults file (default: ./{CONFIG_FILE} if present)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")


def _add_registration(p):
    g = p.add_argument_group("registration")
    g.add_argument("--cascades", type=_positive_int, default=5, help="number of cascades (5)")
    g.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="smoothness weight (1.0)")
    g.add_argument("--scales", type=_csv_ints, default=None,
                   help="per-cascade downsampling factors (8,4,2,1,1 truncated to --cascades)")
    g.add_argument("--strategy", choices=STRATEGIES, default="accumulate",
                   help="field accumulation strategy (accumulate)")
    g.add_argument("--iters", type=_positive_int, default=100, help="Adam steps per cascade (100)")
    g.add_argument("--step", type=float, default=0.5, help="Adam learning rate in voxels (0.5)")
    g.add_argument("--window", type=_positive_int, default=9, help="local NCC window (9)")
    g.add_argument("--rigid-init", action="store_true", help="rigid pre-alignment (off)")
    g.add_argument("--seed", type=int, default=0, help="random seed (0)")


def build_parser():
    parser = argparse.ArgumentParser(prog="casreg", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"casreg {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    parser.commands = sub.choices

    p = sub.add_parser("register", help="register a moving volume onto a fixed one")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--moving-labels", default=None, help="also warp this label volume")
    _add_registration(p)
    _add_common(p)

    p = sub.add_parser("segment", help="multi-atlas segmentation of a target")
    p.add_argument("--target", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True, help="output label volume (.nii or .nii.gz)")
    p.add_argument("--k", type=_positive_int, default=10, help="atlases kept after selection (10)")
    p.add_argument("--fusion", choices=("lwv", "majority"), default="lwv", help="(lwv)")
    p.add_argument("--patch", type=_positive_int, default=5, help="LWV window size d (5)")
    p.add_argument("--gain", type=float, default=2.0, help="LWV gain g (2.0)")
    p.add_argument("--workers", type=_positive_int, default=1,
                   help="atlas registrations run at once (1)")
    _add_registration(p)
    _add_common(p)

    p = sub.add_parser("eval", help="per-label Dice between two label volumes")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--labels", type=_csv_ints, default=list(DEFAULT_LABELS),
                   help="labels to score (1,2,3,4,5,6,7)")
    p.add_argument("--out", default=None, help="optional CSV output")
    _add_common(p)

    p = sub.add_parser("synth", help="write a phantom atlas bank and a held-out target")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_positive_int, default=64, help="cube side (64)")
    p.add_argument("--n-atlases", type=_positive_int, default=10, help="(10)")
    p.add_argument("--n-labels", type=int, default=7, help="(7)")
    p.add_argument("--amplitude", type=float, default=6.0, help="target field max norm (6)")
    p.add_argument("--smoothness", type=float, default=8.0, help="target field smoothing (8)")
    p.add_argument("--noise", type=float, default=PAIR_NOISE,
                   help=f"target acquisition noise std ({PAIR_NOISE})")
    _add_common(p)

    p = sub.add_parser("sweep", help="registration sweep over lambda or cascade count")
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True, help="CSV report")
    p.add_argument("--grid", required=True, help="lambda=1e-4,1,2 or cascades=1..5")
    p.add_argument("--targets", default=None,
                   help="target directories (meta.txt source=<atlas id>); default: bank pairs")
    _add_registration(p)
    _add_common(p)
    return parser


def read_config(path):
    values = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        values[k.strip().replace("-", "_")] = v.strip()
    return values


def _apply_config(parser, argv):
    """Re-parse ``argv`` with config-file values installed as defaults."""
    args = parser.parse_args(argv)
    path = args.config or (CONFIG_FILE if Path(CONFIG_FILE).exists() else None)
    if path is None:
        return args
    if not Path(path).exists():
        raise UsageError(f"config file {path} not found")
    values = read_config(path)
    subparser = parser.commands[args.command]
    actions = {a.dest: a for a in subparser._actions}
    aliases = {"lambda": "lam"}
    defaults = {}
    for key, raw in values.items():
        dest = aliases.get(key, key)
        if dest not in actions or dest in ("help", "version", "config"):
            raise UsageError(f"{path}: unknown key {key!r} for '{args.command}'")
        act = actions[dest]
        if act.nargs == 0:
            defaults[dest] = raw.lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            try:
                defaults[dest] = act.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{path}: bad value for {key}: {exc}")
        else:
            defaults[dest] = raw
        if act.choices is not None and defaults[dest] not in act.choices:
            raise UsageError(f"{path}: {key} must be one of {list(act.choices)}")
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def registration_config(args):
    try:
        return RegistrationConfig(n_cascades=args.cascades, scales=args.scales, lam=args.lam,
                                  window=args.window, iters_per_stage=args.iters,
                                  step_size=args.step, strategy=args.strategy, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_register(args):
    cfg = registration_config(args)
    moving = load_volume(args.moving)
    fixed = load_volume(args.fixed)
    if moving.dims != fixed.dims:
        raise UsageError(f"dims mismatch: moving {moving.dims} vs fixed {fixed.dims}")
    mv, fx = normalize(moving.data), normalize(fixed.data)
    rigid = None
    if args.rigid_init:
        rigid = rigid_register(mv, fx, seed=args.seed)
        mv = np.clip(apply_rigid(mv, rigid), 0.0, 1.0)
    result = cascade_register(mv, fx, cfg)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(type(fixed)(result.warped.astype(np.float32), fixed.spacing, fixed.header),
                out / "warped.nii.gz")
    save_field(result.total_field, out / "field.f32")
    jac = result.jacobian
    with open(out / "jacobian.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["folding_fraction", "min_det", "mean_det"])
        w.writerow([repr(jac.folding_fraction), repr(jac.min_det), repr(jac.mean_det)])
    with open(out / "loss_trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "iter", "loss"])
        for s, trace in enumerate(result.loss_trace):
            for i, v in enumerate(trace):
                w.writerow([s, i, repr(float(v))])
    if rigid is not None:
        (out / "rigid.txt").write_text(" ".join(repr(float(x)) for x in rigid.params) + "\n")
    if args.moving_labels:
        labels = load_labels(args.moving_labels).data
        if rigid is not None:
            labels = apply_rigid(labels, rigid)
        save_volume(result.warp_labels(labels), out / "warped_labels.nii.gz")
    print(f"status={result.status} folding_fraction={jac.folding_fraction:.6g} "
          f"min_det={jac.min_det:.4f}")
    return EXIT_OK


def cmd_segment(args):
    cfg = registration_config(args)
    try:
        fusion = FusionConfig(args.fusion, args.patch, args.gain)
    except ValueError as exc:
        raise UsageError(str(exc))
    target = load_volume(args.target)
    try:
        atlases = load_bank(args.bank)
    except ValueError as exc:
        raise OSError(str(exc))
    atlases = [Atlas(normalize(a.image), a.labels, a.atlas_id, a.metadata) for a in atlases]
    labels, report = segment(normalize(target.data), atlases, cfg, args.k, fusion,
                             workers=args.workers, rigid_init=args.rigid_init)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(labels, out)
    with open(out.parent / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "atlas_id", "ncc", "selected", "seconds", "detail"])
        for a in atlases:
            aid = a.atlas_id
            if aid in report.failures:
                w.writerow(["atlas", aid, "", 0, "", f"failed: {report.failures[aid]}"])
            else:
                w.writerow(["atlas", aid, f"{report.scores[aid]:.6f}",
                            int(aid in report.selected), f"{report.seconds[aid]:.3f}", ""])
        for msg in report.warnings:
            w.writerow(["warning", "", "", "", "", msg])
        w.writerow(["fusion", "", "", "", "",
                    f"method={fusion.method} patch={fusion.patch_size} gain={fusion.gain}"])
        w.writerow(["timing", "", "", "", f"{report.total_seconds:.3f}", "total"])
    for msg in report.warnings:
        log.warning(msg)
    print(f"selected={','.join(report.selected)} failures={len(report.failures)}")
    return EXIT_OK


def cmd_eval(args):
    pred = load_labels(args.pred).data
    truth = load_labels(args.truth).data
    if pred.shape != truth.shape:
        raise UsageError(f"dims mismatch: {pred.shape} vs {truth.shape}")
    try:
        rep = dice_report(pred, truth, args.labels)
    except ValueError as exc:
        raise UsageError(str(exc))
    print(rep.format())
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "dice"])
            for lab, d in rep.per_label.items():
                w.writerow([lab, repr(d)])
            w.writerow(["mean", repr(rep.mean)])
            w.writerow(["se", repr(rep.standard_error)])
    return EXIT_OK


def cmd_synth(args):
    if not 2 <= args.n_labels <= 8:
        raise UsageError("--n-labels must be in [2, 8]")
    if args.dims < 16:
        raise UsageError("--dims must be >= 16")
    dims = (args.dims,) * 3
    out = Path(args.out_dir)
    rng = np.random.default_rng(args.seed)
    ages = rng.uniform(*AGE_RANGE, args.n_atlases)
    width = len(str(args.n_atlases - 1))
    atlases = []
    for i, age in enumerate(ages):
        image, labels = make_phantom([args.seed, i], dims, args.n_labels, age=float(age))
        atlas = Atlas(image, labels, f"atlas_{i:0{width}d}", {"age": f"{age:.3f}"})
        save_atlas(out / "bank", atlas)
        atlases.append(atlas)

    source = atlases[int(rng.integers(args.n_atlases))]
    gt = random_smooth_field([args.seed, args.n_atlases], dims, args.amplitude,
                             max(args.smoothness, 1.0))
    image = warp_scalar(source.image, gt)
    if args.noise > 0:
        image = image + args.noise * rng.standard_normal(dims)
    tdir = out / "targets" / "target"
    tdir.mkdir(parents=True, exist_ok=True)
    save_volume(normalize(image).astype(np.float32), tdir / "image.nii.gz")
    save_volume(warp_labels(source.labels, gt).astype(np.uint8), tdir / "labels.nii.gz")
    save_field(gt, tdir / "gt_field.f32")
    (tdir / "meta.txt").write_text(f"source={source.atlas_id}\nage={source.metadata['age']}\n",
                                   encoding="utf-8")
    rep = jacobian_report(gt)
    print(f"wrote {args.n_atlases} atlases and target (source={source.atlas_id}, "
          f"gt folding_fraction={rep.folding_fraction:.6g})")
    return EXIT_OK


def parse_grid(text):
    """``lambda=1e-4,1,2`` or ``cascades=1..5`` (also ``cascades=1,3,5``)."""
    if "=" not in text:
        raise UsageError(f"malformed grid {text!r}: expected key=values")
    key, values = (s.strip() for s in text.split("=", 1))
    if key not in GRID_KEYS:
        raise UsageError(f"unknown grid key {key!r}; expected one of {GRID_KEYS}")
    try:
        if key == "cascades":
            if ".." in values:
                lo, hi = (int(x) for x in values.split(".."))
                vals = list(range(lo, hi + 1))
            else:
                vals = [int(x) for x in values.split(",")]
            if not vals or min(vals) < 1:
                raise ValueError
        else:
            vals = [float(x) for x in values.split(",")]
            if not vals or min(vals) < 0:
                raise ValueError
    except ValueError:
        raise UsageError(f"malformed grid values {values!r} for {key}")
    return key, vals


def cmd_sweep(args):
    key, values = parse_grid(args.grid)
    base = registration_config(args)
    grid = {}
    for v in values:
        if key == "lambda":
            grid[f"lambda={v:g}"] = RegistrationConfig(
                n_cascades=base.n_cascades, scales=base.scales, lam=v, window=base.window,
                iters_per_stage=base.iters_per_stage, step_size=base.step_size,
                strategy=base.strategy, seed=base.seed)
        else:
            grid[f"cascades={v}"] = RegistrationConfig(
                n_cascades=v, lam=base.lam, window=base.window,
                iters_per_stage=base.iters_per_stage, step_size=base.step_size,
                strategy=base.strategy, seed=base.seed)
    try:
        results = experiment_suite(args.bank, grid, args.out, targets_dir=args.targets)
    except ValueError as exc:
        raise OSError(str(exc))
    print("config_id,mean_dice,se,folding")
    for cid, (m, se, fold) in summarize_suite(results).items():
        print(f"{cid},{m:.4f},{se:.4f},{fold:.6g}")
    return EXIT_OK


COMMANDS = {"register": cmd_register, "segment": cmd_segment, "eval": cmd_eval,
            "synth": cmd_synth, "sweep": cmd_sweep}


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"casreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse: --help/--version exit 0, errors exit 2
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _kernels.set_threads(args.threads)
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"casreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AllRegistrationsFailed as exc:
        print(f"casreg: {exc}", file=sys.stderr)
        return EXIT_ALL_FAILED
    except FloatingPointError as exc:
        print(f"casreg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, VolumeFormatError) as exc:
        print(f"casreg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"casreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log.debug("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
