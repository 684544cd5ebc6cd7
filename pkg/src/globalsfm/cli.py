"""Command line front end: ``solve``, ``synth`` and ``eval``.

Exit codes: 0 success, 2 parse or configuration error, 3 numerical
failure, 4 degenerate input.
"""

import argparse
import logging
import sys
from pathlib import Path

from .colmap import read_text_model
from .config import PipelineConfig
from .errors import InputError, SfMError
from .metrics import compute_pose_metrics
from .pipeline import run_pipeline
from .synth import SynthConfig, generate_scene, read_gt_poses

log = logging.getLogger("globalsfm")


def _deltas(text):
    try:
        out = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad delta list {text!r}") from None
    if not out or min(out) <= 0:
        raise argparse.ArgumentTypeError("deltas must be positive")
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="globalsfm", description="Global structure from motion on match graphs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="estimate intrinsics, poses and a sparse point cloud")
    s.add_argument("--input", required=True, type=Path, help="match directory")
    s.add_argument("--output", required=True, type=Path, help="text model directory")
    s.add_argument("--config", type=Path, help="key = value configuration file")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--stage-dump", action="store_true", default=None,
                   help="write per-stage diagnostics under OUTPUT/stages")

    g = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--cams", type=int, default=50)
    g.add_argument("--points", type=int, default=5000)
    g.add_argument("--noise", type=float, default=1.0, help="pixel noise sigma")
    g.add_argument("--outliers", type=float, default=0.05, help="outlier fraction")
    g.add_argument("--alpha", type=float, default=0.0)
    g.add_argument("--fov", type=float, default=60.0, help="horizontal field of view in degrees")
    g.add_argument("--trajectory", default="orbit", choices=("orbit", "line", "grid", "random_sphere"))
    g.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="compare an estimate against ground truth")
    e.add_argument("--est", required=True, type=Path, help="text model directory")
    e.add_argument("--gt", required=True, type=Path, help="synth directory or text model directory")
    e.add_argument("--deltas", type=_deltas, default=[1.0, 3.0, 5.0, 10.0])
    e.add_argument("--json", type=Path, help="write the metrics here as JSON")
    return p


def _load_config(args):
    overrides = {"seed": args.seed, "threads": args.threads, "stage_dump": args.stage_dump}
    if args.config is not None:
        return PipelineConfig.from_file(args.config, **overrides)
    return PipelineConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def cmd_solve(args):
    cfg = _load_config(args)
    est = run_pipeline(args.input, cfg, dump_dir=args.output)
    est.export(args.output)
    log.info("posed %d of %d images, %d points", len(est.rotations), len(est.images), len(est.points))
    return 0


def cmd_synth(args):
    cfg = SynthConfig(n_cameras=args.cams, n_points=args.points, pixel_noise_sigma=args.noise,
                      outlier_fraction=args.outliers, alpha=args.alpha, fov_deg=args.fov,
                      trajectory=args.trajectory, seed=args.seed)
    scene = generate_scene(cfg, out_dir=args.out)
    log.info("wrote %d images, %d pairs to %s", len(scene.image_ids), len(scene.graph.pairs), args.out)
    return 0


def _poses(path):
    if (path / "gt_poses.tsv").exists():
        return read_gt_poses(path / "gt_poses.tsv")
    _, poses, _ = read_text_model(path)
    return {i: (r, c) for i, (r, c, _, _) in poses.items()}


def cmd_eval(args):
    _, est, _ = read_text_model(args.est)
    est = {i: (r, c) for i, (r, c, _, _) in est.items()}
    metrics = compute_pose_metrics(est, _poses(args.gt), args.deltas)
    text = metrics.to_json(args.json)
    print(text)
    return 0


COMMANDS = {"solve": cmd_solve, "synth": cmd_synth, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else InputError.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SfMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
