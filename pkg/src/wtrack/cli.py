"""Command line: ``wtrack {run,synth,eval,grad-check}``.

Exit codes: 0 success, 2 bad input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import WtrkError

log = logging.getLogger("wtrack")


def _threads(arg):
    env = os.environ.get("WTRK_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer WTRK_THREADS=%r", env)
    return max(1, arg)


def cmd_run(args):
    from .pipeline import run_pipeline
    manifest = run_pipeline(args.input, args.output, speedup=not args.no_speedup,
                            depth_out=args.depth_out, eval_dir=args.eval, stage=args.stage,
                            resume=args.resume, threads=_threads(args.threads))
    print(json.dumps({"stage": manifest.stage, "timings": manifest.timings,
                      "warnings": manifest.warnings}, indent=2))
    return 0


def cmd_synth(args):
    from .synth import ObjectSpec, SynthConfig, generate, write_synth
    if args.config:
        with open(args.config) as fh:
            cfg = SynthConfig.from_dict(json.load(fh))
    else:
        objects = []
        if args.mover:
            objects.append(ObjectSpec(n_points=args.mover_points))
        if args.hidden:
            objects.append(ObjectSpec(n_points=args.hidden_points, center_px=(0.3, 0.45),
                                      center_depth=3.5, velocity=(0.0, 0.0, 0.05), hidden=True))
        cfg = SynthConfig(n_frames=args.frames, height=args.height, width=args.width,
                          camera=args.camera, n_static=args.static, objects=objects,
                          track_sigma=args.noise, depth_sigma=args.depth_noise,
                          outlier_fraction=args.outliers, seed=args.seed).validate()
    scene, gt = generate(cfg)
    write_synth(args.output, scene, gt, cfg)
    print(f"wrote {scene.n_tracks} tracks x {scene.n_frames} frames to {args.output}")
    return 0


def cmd_eval(args):
    from .pipeline import eval_only
    report, warns = eval_only(args.est, args.gt)
    print(json.dumps({"metrics": report.to_dict(), "warnings": warns}, indent=2))
    return 0


def cmd_grad_check(args):
    from .audit import audit_losses
    from .pipeline import poses_from_json
    from .tensorio import load_scene
    scene = load_scene(args.input)
    gt_poses = os.path.join(args.input, "gt_poses.json")
    if args.poses:
        q, t = poses_from_json(args.poses)
    elif os.path.exists(gt_poses):
        q, t = poses_from_json(gt_poses)
    else:
        from .pose_init import estimate_poses
        from .trackset import TrackSet2D, split_by_mask
        static, _ = split_by_mask(TrackSet2D(scene.tracks, scene.visible), scene.masks)
        pe = estimate_poses(static, scene.track_depth[static.ids], scene.cam, scene.config,
                            scene.diagonal)
        q, t = pe.quats, pe.trans
    worst = audit_losses(scene, q, t, n_states=args.states, h=args.h, seed=args.seed)
    ok = all(v < args.tol for v in worst.values())
    print(json.dumps({"max_rel_error": {k: float(v) for k, v in worst.items()},
                      "tolerance": args.tol, "pass": ok}, indent=2))
    return 0 if ok else 3


def build_parser():
    p = argparse.ArgumentParser(prog="wtrack", description="Camera poses and world-space 3D tracks "
                                "from 2D tracks, depth maps and dynamic masks.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the pipeline on a scene directory")
    r.add_argument("input")
    r.add_argument("output")
    r.add_argument("--no-speedup", action="store_true", help="optimize every static track")
    r.add_argument("--depth-out", action="store_true", help="write aligned_depth.wt")
    r.add_argument("--eval", metavar="GT_DIR", help="score outputs against ground truth")
    r.add_argument("--stage", type=int, choices=(1, 2, 3), default=3)
    r.add_argument("--resume", action="store_true", help="reuse matching stage checkpoints")
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    s.add_argument("output")
    s.add_argument("--config", help="JSON file with synthesis settings")
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--height", type=int, default=96)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--camera", default="orbit", choices=("orbit", "dolly", "random-smooth"))
    s.add_argument("--static", type=int, default=500)
    s.add_argument("--mover", action="store_true", help="add a masked rigid mover")
    s.add_argument("--mover-points", type=int, default=50)
    s.add_argument("--hidden", action="store_true", help="add an unmasked background mover")
    s.add_argument("--hidden-points", type=int, default=25)
    s.add_argument("--noise", type=float, default=0.0, help="track noise sigma (px)")
    s.add_argument("--depth-noise", type=float, default=0.0, help="relative depth noise sigma")
    s.add_argument("--outliers", type=float, default=0.0, help="outlier track fraction")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="score an output directory against ground truth")
    e.add_argument("est")
    e.add_argument("gt")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grad-check", help="finite-difference audit of every loss")
    g.add_argument("input")
    g.add_argument("--poses", help="poses.json to perturb around (default: ground truth or Stage 1)")
    g.add_argument("--states", type=int, default=10)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except WtrkError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
