"""Command-line interface.

Exit codes: 0 success, 1 I/O or parse failure, 2 usage error, 3 numerical
failure. With --json every command prints exactly one JSON document on
stdout; all diagnostics go to stderr. Heavy imports happen after --threads is
applied so the thread cap reaches the numerics libraries.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

CONFIG_KEYS = {
    "epsilon": float,
    "epsilon_mode": str,
    "lambda_mw2": float,
    "lambda_photo": float,
    "lambda_depth": float,
    "max_steps": int,
    "lr_q": float,
    "lr_t": float,
    "lr_log_s": float,
    "momentum": float,
    "plateau_window": int,
    "plateau_rel_tol": float,
    "fd_step": float,
    "sinkhorn_max_iterations": int,
    "sinkhorn_delta": float,
    "polish_max_steps": int,
    "polish_epsilon": float,
    "opacity_floor": float,
}


def build_version() -> str:
    """Semver plus a content hash of the installed package sources."""
    from . import __version__

    digest = hashlib.sha256()
    pkg_dir = Path(__file__).parent
    for path in sorted(pkg_dir.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return f"splatalign {__version__} (build {digest.hexdigest()[:12]})"


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatalign", description="Align 3D Gaussian splat models.")
    parser.add_argument("--version", action="store_true", help="print version and build hash")
    parser.add_argument("--seed", type=int, default=0, help="seed for synthetic generation")
    parser.add_argument("--threads", type=int, default=0, help="cap numeric thread pools (0 = library default)")
    parser.add_argument("--verbose", action="store_true", help="chatty diagnostics on stderr")
    parser.add_argument("--config", type=str, default=None, help="key=value config file overriding defaults")

    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("distance", help="MW2 distance between two splat PLY files")
    p.add_argument("ply_a")
    p.add_argument("ply_b")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--mode", choices=["absolute", "relative-to-mean-cost"], default=None)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("register", help="register sub.ply onto main.ply")
    p.add_argument("ply_main")
    p.add_argument("ply_sub")
    p.add_argument("--cameras", type=str, default=None, help="camera JSON for rendering losses")
    p.add_argument("--out", type=str, default=None, help="write RegistrationResult JSON here")
    p.add_argument("--losses-out", type=str, default=None, help="write the loss-history CSV here")
    p.add_argument("--merge-out", type=str, default=None, help="write the merged map PLY here")
    p.add_argument("--mw2-only", action="store_true", help="skip rendering losses")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("pipeline", help="run the incremental pipeline on a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--mw2-only", action="store_true")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic scene manifest")
    p.add_argument("--components", type=int, default=200)
    p.add_argument("--submaps", type=int, default=4)
    p.add_argument("--overlap", type=float, default=0.9)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("eval-ate", help="ATE RMSE between two TUM trajectory files")
    p.add_argument("estimated")
    p.add_argument("ground_truth")
    p.add_argument("--json", action="store_true")
    return parser


def read_config_file(path: str) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                print(f"warning: {path}:{lineno}: unknown config key {key!r}", file=sys.stderr)
                continue
            values[key] = CONFIG_KEYS[key](raw)
    return values


def _apply_threads(n: int) -> None:
    if n and n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(n)


def _emit(doc: dict, as_json: bool, lines: list[str]) -> None:
    if as_json:
        print(json.dumps(doc, indent=2))
    else:
        for line in lines:
            print(line)


def _sinkhorn_config(args, conf):
    from .sinkhorn import ABSOLUTE, RELATIVE, SinkhornConfig

    epsilon = args.epsilon if getattr(args, "epsilon", None) is not None else conf.get("epsilon", 0.05)
    mode = getattr(args, "mode", None) or conf.get("epsilon_mode", RELATIVE)
    if mode == "absolute":
        mode = ABSOLUTE
    return SinkhornConfig(
        epsilon=epsilon,
        max_iterations=conf.get("sinkhorn_max_iterations", 5000),
        convergence_delta=conf.get("sinkhorn_delta", 1e-9),
        epsilon_scale_mode=mode,
    )


def _pipeline_config(conf, mw2_only: bool):
    from .pipeline import PipelineConfig
    from .registration import MW2_ONLY, JointLossWeights, OptimizerConfig

    weights = MW2_ONLY if mw2_only else JointLossWeights(
        conf.get("lambda_mw2", 1.0), conf.get("lambda_photo", 1.0), conf.get("lambda_depth", 0.5)
    )
    opt = OptimizerConfig(
        lr_q=conf.get("lr_q", 0.01),
        lr_t=conf.get("lr_t", 0.01),
        lr_log_s=conf.get("lr_log_s", 0.005),
        max_steps=conf.get("max_steps", 70),
        momentum=conf.get("momentum", 0.9),
        plateau_rel_tol=conf.get("plateau_rel_tol", 1e-7),
        plateau_window=conf.get("plateau_window", 10),
        fd_step=conf.get("fd_step", 1e-3),
        sinkhorn_max_iterations=conf.get("sinkhorn_max_iterations", 15),
        sinkhorn_delta=conf.get("sinkhorn_delta", 1e-7),
    )
    return PipelineConfig(
        weights=weights,
        optimizer=opt,
        polish_max_steps=conf.get("polish_max_steps", 60),
        polish_epsilon=conf.get("polish_epsilon", 0.002),
        opacity_floor=conf.get("opacity_floor", 0.005),
    )


def cmd_distance(args, conf) -> int:
    from .io import read_splat_ply
    from .sinkhorn import mw2_distance

    mix_a = read_splat_ply(args.ply_a)
    mix_b = read_splat_ply(args.ply_b)
    import warnings

    from .errors import NotConvergedWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotConvergedWarning)
        dist, plan = mw2_distance(mix_a, mix_b, _sinkhorn_config(args, conf))
    doc = {
        "mw2": dist,
        "mw2_squared": dist * dist,
        "marginal_error": plan.marginal_error,
        "iterations": plan.iterations_used,
        "converged": plan.converged,
        "epsilon_used": plan.epsilon_used,
    }
    _emit(doc, args.json, [
        f"MW2: {dist:.9g}",
        f"marginal error: {plan.marginal_error:.3e}",
        f"iterations: {plan.iterations_used}",
    ])
    return EXIT_OK if plan.converged else EXIT_NUMERIC


def _load_cameras(path: str):
    from .io import _camera_from_json

    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data.get("cameras", [])
    return [_camera_from_json(cam, f"/cameras/{i}") for i, cam in enumerate(data)]


def cmd_register(args, conf) -> int:
    from .io import read_splat_ply, write_splat_ply
    from .pipeline import merge_maps, register_pair

    main = read_splat_ply(args.ply_main)
    sub = read_splat_ply(args.ply_sub)
    cameras = _load_cameras(args.cameras) if args.cameras else []
    cfg = _pipeline_config(conf, args.mw2_only)
    if cfg.weights.uses_rendering and not cameras:
        print("error: rendering losses need --cameras (or pass --mw2-only)", file=sys.stderr)
        return EXIT_USAGE
    result = register_pair(main, sub, cameras, cfg)
    if args.out:
        result.save(args.out)
    if args.losses_out:
        Path(args.losses_out).write_text(result.history_csv(), encoding="ascii")
    if args.merge_out:
        write_splat_ply(merge_maps(main, sub, result.theta), args.merge_out)
    doc = result.to_json_dict()
    q = result.theta.q
    _emit(doc, args.json, [
        f"q: {q.w:.9g} {q.x:.9g} {q.y:.9g} {q.z:.9g}",
        f"t: {result.theta.t[0]:.9g} {result.theta.t[1]:.9g} {result.theta.t[2]:.9g}",
        f"log_s: {result.theta.log_s:.9g} (s = {result.theta.s:.9g})",
        f"final losses: {result.final_losses}",
        f"steps: {result.steps_used}",
    ])
    return EXIT_OK


def cmd_pipeline(args, conf) -> int:
    from .io import read_manifest, write_report
    from .pipeline import run_incremental

    manifest = read_manifest(args.manifest)
    if len(manifest.submaps) < 2:
        print("error: pipeline needs a manifest with at least 2 submaps", file=sys.stderr)
        return EXIT_USAGE
    report = run_incremental(manifest, _pipeline_config(conf, args.mw2_only))
    write_report(report, args.out)
    doc = report.to_json_dict()
    lines = [f"submaps: {len(report.outcomes)}"]
    if report.ate_rmse is not None:
        lines.append(f"ATE RMSE: {report.ate_rmse:.6f}")
    lines.append(f"map size: {report.map_size_before_prune} -> {report.map_size_after_prune} after pruning")
    failed = [o.index for o in report.outcomes if o.failed]
    if failed:
        lines.append(f"failed submaps: {failed}")
    lines.append(f"report written to {args.out}")
    _emit(doc, args.json, lines)
    return EXIT_OK


def cmd_synth(args, conf) -> int:
    from .io import write_manifest
    from .pipeline import generate_synthetic_scene

    manifest = generate_synthetic_scene(
        args.seed,
        n_components=args.components,
        n_submaps=args.submaps,
        overlap_fraction=args.overlap,
        noise=args.noise,
        image_size=args.image_size,
    )
    target = write_manifest(manifest, args.out)
    doc = {
        "manifest": str(target),
        "submaps": len(manifest.submaps),
        "scene_extent": manifest.scene_extent,
    }
    _emit(doc, args.json, [f"wrote {target} ({len(manifest.submaps)} submaps)"])
    return EXIT_OK


def cmd_eval_ate(args, conf) -> int:
    from .io import read_trajectory
    from .pipeline import ate_rmse

    est = read_trajectory(args.estimated)
    gt = read_trajectory(args.ground_truth)
    value = ate_rmse(est, gt)
    _emit({"ate_rmse": value}, args.json, [f"{value:.6f}"])
    return EXIT_OK


COMMANDS = {
    "distance": cmd_distance,
    "register": cmd_register,
    "pipeline": cmd_pipeline,
    "synth": cmd_synth,
    "eval-ate": cmd_eval_ate,
}


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.version:
        print(build_version())
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    _apply_threads(args.threads)

    try:
        conf = read_config_file(args.config) if args.config else {}
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    from .errors import (
        DivergedError,
        LengthMismatchError,
        MissingCamerasError,
        ParseError,
        SchemaError,
        SplatAlignError,
    )

    try:
        return COMMANDS[args.command](args, conf)
    except (ParseError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MissingCamerasError, LengthMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SplatAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
