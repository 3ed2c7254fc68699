"""Command-line interface: register, evaluate, phantom, sweep.

Exit codes: 0 success, 1 I/O or file-format failure, 2 validation failure,
3 solver divergence. Errors are mirrored as one-line JSON on stderr
(``{"error": CODE, "message": ...}``) so wrappers never have to scrape
human text. Stdout carries the human summary.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import PRESETS, RunConfig, apply_preset, format_config, load_config
from .errors import (
    MissingInput,
    NonFiniteLoss,
    ParseError,
    SplitregError,
    UnsupportedField,
)
from .fields import DisplacementField, warp_labelmap, zero_displacement
from .metrics import compute_report
from .nrrd_io import read_nrrd, write_nrrd
from .optimizer import OptimizerConfig
from .phantom import (
    BUILTIN_SPECS,
    builtin_phantom,
    format_phantom_spec,
    make_phantom,
    parse_phantom_spec,
)
from .pipeline import (
    RegionError,
    merge_sweep,
    run_segreg,
    segmentation_sweep,
)
from .volume import LabelMap, Volume
from . import report as report_mod


def _error_json(code: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")


def _load(path, want, flag: str):
    obj = read_nrrd(path)
    if not isinstance(obj, want):
        raise MissingInput(
            f"{flag}: {path} holds {type(obj).__name__}, expected {want.__name__}"
        )
    return obj


def _require(args, names: list[str]) -> None:
    missing = [n for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        raise MissingInput("missing required flags: " + ", ".join(
            "--" + n for n in missing
        ))


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="named loss setup (weights + similarity + mask loss)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="cap on concurrent region solves (default: all cores)")
    p.add_argument("--crop-margin", type=int, default=None,
                   help="crop regions to bounding boxes + margin (default: full size)")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--levels", default=None,
                   help="comma-separated pyramid factors, e.g. 4,2,1")
    p.add_argument("--similarity", choices=("mse", "lncc"), default=None)
    p.add_argument("--mask-loss", choices=("dice", "edt", "edt_and_dice"),
                   default=None)


def assemble_run_config(args) -> RunConfig:
    """Defaults <- config file <- preset <- individual flags."""
    run = RunConfig(OptimizerConfig())
    if args.config:
        run = load_config(args.config, run)
    opt = run.optimizer
    if args.preset:
        opt = apply_preset(opt, args.preset)
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.levels is not None:
        overrides["levels"] = tuple(int(t) for t in args.levels.split(","))
    if args.similarity is not None:
        overrides["similarity"] = args.similarity
    if args.mask_loss is not None:
        overrides["mask_loss"] = args.mask_loss
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        opt = replace(opt, **overrides)
    crop_margin = args.crop_margin if args.crop_margin is not None else run.crop_margin
    threads = args.threads if args.threads is not None else run.threads
    return RunConfig(opt, crop_margin, threads)


def _load_pair_args(args):
    moving = _load(args.moving, Volume, "--moving")
    fixed = _load(args.fixed, Volume, "--fixed")
    moving_seg = _load(args.moving_seg, LabelMap, "--moving-seg")
    fixed_seg = _load(args.fixed_seg, LabelMap, "--fixed-seg")
    return moving, fixed, moving_seg, fixed_seg


# ---------------------------------------------------------------------------
# subcommands

def cmd_register(args) -> int:
    _require(args, ["moving", "fixed", "moving-seg", "fixed-seg", "out-dir"])
    run = assemble_run_config(args)
    moving, fixed, moving_seg, fixed_seg = _load_pair_args(args)
    result = run_segreg(
        moving, fixed, moving_seg, fixed_seg, run.optimizer,
        crop_margin=run.crop_margin, threads=run.threads,
    )
    report_mod.write_run_outputs(
        args.out_dir, moving, fixed, result, run, run.optimizer.seed
    )
    print(report_mod.summary_table(result.report))
    print(f"\nartifacts written to {args.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    _require(args, ["moving-seg", "fixed-seg", "out-dir"])
    moving_seg = _load(args.moving_seg, LabelMap, "--moving-seg")
    fixed_seg = _load(args.fixed_seg, LabelMap, "--fixed-seg")
    if args.field:
        field = read_nrrd(args.field)
        if not isinstance(field, DisplacementField):
            raise MissingInput(f"--field: {args.field} is not a displacement field")
    else:
        field = zero_displacement(fixed_seg.grid)
    warped = warp_labelmap(moving_seg, field)
    report = compute_report(warped, fixed_seg, field)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    print(report_mod.summary_table(report))
    return 0


def cmd_phantom(args) -> int:
    _require(args, ["out-dir"])
    if (args.spec is None) == (args.builtin is None):
        raise MissingInput("give exactly one of --spec or --builtin")
    if args.builtin:
        spec = BUILTIN_SPECS.get(args.builtin)
        if spec is None:
            raise MissingInput(
                f"unknown builtin phantom {args.builtin!r} "
                f"(known: {', '.join(sorted(BUILTIN_SPECS))})"
            )
    else:
        spec = parse_phantom_spec(Path(args.spec).read_text())
    data = make_phantom(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_nrrd(data.moving, out / "moving.nrrd")
    write_nrrd(data.fixed, out / "fixed.nrrd")
    write_nrrd(data.moving_seg, out / "moving_seg.nrrd")
    write_nrrd(data.fixed_seg, out / "fixed_seg.nrrd")
    write_nrrd(data.gt_composed, out / "gt_field.nrrd")
    (out / "phantom.spec").write_text(format_phantom_spec(spec))
    print(f"phantom written to {out} (dims {spec.dims}, layout {spec.layout})")
    return 0


def cmd_sweep(args) -> int:
    _require(args, ["out-dir"])
    run = assemble_run_config(args)
    seed = run.optimizer.seed
    if args.builtin:
        data = builtin_phantom(args.builtin)
        moving, fixed = data.moving, data.fixed
        moving_seg, fixed_seg = data.moving_seg, data.fixed_seg
    else:
        _require(args, ["moving", "fixed", "moving-seg", "fixed-seg"])
        moving, fixed, moving_seg, fixed_seg = _load_pair_args(args)

    if args.kind == "segmentation":
        targets = [float(t) for t in args.targets.split(",")]
        rows = segmentation_sweep(
            moving, fixed, moving_seg, fixed_seg, targets, run.optimizer,
            crop_margin=run.crop_margin, threads=run.threads, seed=seed,
        )
    else:
        rows = merge_sweep(
            moving, fixed, moving_seg, fixed_seg, run.optimizer,
            crop_margin=run.crop_margin, threads=run.threads,
        )
    report_mod.write_sweep_outputs(args.out_dir, rows, args.kind)
    xname = "seg_dice" if args.kind == "segmentation" else "n_regions"
    print(f"{xname:>12}  {'reg_dice':>9}")
    for r in rows:
        print(f"{r.x:12.4f}  {r.reg_dice:9.4f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitreg",
        description="Region-wise diffeomorphic registration with "
                    "discontinuity-preserving composition.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("register", help="register a moving/fixed pair")
    for flag in ("--moving", "--fixed", "--moving-seg", "--fixed-seg"):
        p.add_argument(flag)
    p.add_argument("--out-dir")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="metrics only, given a field + label maps")
    p.add_argument("--field", help="composed displacement field (optional)")
    p.add_argument("--moving-seg")
    p.add_argument("--fixed-seg")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("phantom", help="generate a synthetic phantom to disk")
    p.add_argument("--spec", help="phantom spec file (key = value)")
    p.add_argument("--builtin", help="named builtin phantom")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("sweep", help="segmentation-accuracy or label-merge sweep")
    p.add_argument("--kind", choices=("segmentation", "modes"),
                   default="segmentation")
    p.add_argument("--targets", default="0.7,0.8,0.9,1.0",
                   help="segmentation dice targets (segmentation kind)")
    p.add_argument("--builtin", help="run on a named builtin phantom")
    for flag in ("--moving", "--fixed", "--moving-seg", "--fixed-seg"):
        p.add_argument(flag)
    p.add_argument("--out-dir")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (ParseError, UnsupportedField) as exc:
        _error_json(exc.code, str(exc))
        return 1
    except OSError as exc:
        _error_json("IO_ERROR", str(exc))
        return 1
    except NonFiniteLoss as exc:
        _error_json(exc.code, str(exc))
        return 3
    except RegionError as exc:
        _error_json(exc.code, str(exc))
        return 3 if isinstance(exc.cause, NonFiniteLoss) else 2
    except SplitregError as exc:
        _error_json(exc.code, str(exc))
        return 2
    except ValueError as exc:
        _error_json("INVALID_CONFIG", str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
