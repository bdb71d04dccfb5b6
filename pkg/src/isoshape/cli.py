"""Command-line surface.

Subcommands: sample-transform (demo sampled transforms to CSV/PLY/SVG),
pretrain, probe, sweep (robustness or sensitivity), render (cloud to SVG),
and verify (the invariant suite with a pass/fail report). Every subcommand
writes only under its --out directory.
"""

import argparse
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config
from .errors import IsoshapeError, ParameterError
from .geometry import parse_off, read_csv_cloud, read_xyz, sample_surface
from .numkit import Rng
from .render import render_cloud_projections
from .transforms import AUGMENTATION_KINDS


def _load_run_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif getattr(args, "desk", False):
        cfg = pipeline.desk_profile()
    else:
        cfg = RunConfig()
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    return cfg


def _config_for_checkpoint(args) -> RunConfig:
    """Probe/sweep runs recover the config stored next to the checkpoint
    unless one is given explicitly."""
    if args.config:
        return load_config(args.config)
    sibling = Path(args.checkpoint).parent / "config.resolved.cfg"
    if sibling.exists():
        return load_config(sibling)
    raise ParameterError(
        "no --config given and no config.resolved.cfg next to the checkpoint"
    )


def cmd_sample_transform(args) -> int:
    written = pipeline.run_sample_transform(
        args.kind, args.count, args.seed if args.seed is not None else 0,
        args.out, shape=args.shape, points=args.points,
    )
    print(f"wrote {len(written)} files under {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    out = args.out or "runs/pretrain"
    _, metrics = pipeline.run_pretrain(cfg, out)
    last = metrics[-1]
    print(
        f"pretrained {len(metrics)} epochs; final loss {last['mean_loss']:.4f}, "
        f"instance-discrimination accuracy {last['inst_disc_acc']:.3f}"
    )
    print(f"outputs in {out}")
    return 0


def cmd_probe(args) -> int:
    cfg = _config_for_checkpoint(args)
    out = args.out or "runs/probe"
    accuracy, _ = pipeline.run_probe(cfg, args.checkpoint, out, test_transform=args.test_transform)
    print(f"probe accuracy: {accuracy:.4f}")
    print(f"outputs in {out}")
    return 0


def cmd_sweep(args) -> int:
    out = args.out or "runs/sweep"
    if args.mode == "robustness":
        if args.checkpoint is None:
            raise ParameterError("robustness sweeps need --checkpoint")
        cfg = _config_for_checkpoint(args)
        grid = args.grid or pipeline.ROBUSTNESS_GRIDS[args.variable]
        curve = pipeline.run_robustness(cfg, args.checkpoint, args.variable, grid, out)
    else:
        cfg = _load_run_config(args)
        if args.variable not in pipeline.SENSITIVITY_GRIDS:
            raise ParameterError(
                f"sensitivity sweeps accept variables {tuple(pipeline.SENSITIVITY_GRIDS)}"
            )
        grid = args.grid or pipeline.SENSITIVITY_GRIDS[args.variable]
        curve = pipeline.run_sensitivity(cfg, args.variable, grid, out)
    for level, acc in curve:
        print(f"{args.variable}={level:g}: accuracy {acc:.4f}")
    print(f"outputs in {out}")
    return 0


def cmd_render(args) -> int:
    path = Path(args.input)
    text_or_bytes = path.read_bytes()
    if path.suffix == ".off":
        cloud = sample_surface(parse_off(text_or_bytes), args.points, Rng(args.seed or 0))
    elif path.suffix == ".xyz":
        cloud = read_xyz(text_or_bytes.decode())
    elif path.suffix == ".csv":
        cloud = read_csv_cloud(text_or_bytes.decode())
    else:
        raise ParameterError(f"cannot render {path.suffix!r} files")
    out = Path(args.out or "runs/render")
    out.mkdir(parents=True, exist_ok=True)
    target = out / (path.stem + ".svg")
    render_cloud_projections(cloud, target, title=path.stem)
    print(f"wrote {target}")
    return 0


def cmd_verify(args) -> int:
    from . import verify

    results = verify.run_suite(full=args.full, out_dir=args.out)
    failures = [r for r in results if not r.passed]
    for r in results:
        print(r.report_line())
    print(f"{len(results) - len(failures)}/{len(results)} checks passed")
    return 0 if not failures else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isoshape",
        description="Isometry-invariant point-cloud representation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-transform", help="emit sampled transforms and transformed clouds")
    p.add_argument("--kind", required=True, choices=[k for k in AUGMENTATION_KINDS if k != "none"])
    p.add_argument("--count", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/sample-transform")
    p.add_argument("--shape", default="torus", choices=("sphere", "box", "cylinder", "torus"))
    p.add_argument("--points", type=int, default=1024)
    p.set_defaults(func=cmd_sample_transform)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    p.add_argument("--config", help="run config file")
    p.add_argument("--desk", action="store_true", help="desk-scale defaults when no --config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="frozen-feature classification probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--test-transform", default="none",
                   choices=[k for k in AUGMENTATION_KINDS])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="robustness or sensitivity sweeps")
    p.add_argument("--mode", default="robustness", choices=("robustness", "sensitivity"))
    p.add_argument("--variable", required=True)
    p.add_argument("--grid", type=lambda s: [float(v) for v in s.split(",")])
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--desk", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("render", help="render a cloud file to SVG projections")
    p.add_argument("--input", required=True)
    p.add_argument("--points", type=int, default=2048, help="surface samples for mesh input")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--full", action="store_true",
                   help="include the training-based and long-running checks")
    p.add_argument("--out", default="runs/verify")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except IsoshapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
