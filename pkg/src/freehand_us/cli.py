"""Command-line entry point: ``freehand-us <subcommand> [--config C] [--seed S] [--out DIR]``.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from freehand_us.errors import NumericalError, ValidationError
from freehand_us.geom import RigidTransform, RoiBox, UsIntrinsics
from freehand_us.intrinsics import (
    LedgeDetection,
    compute_activity_map,
    detect_ledge_lines,
    find_ledge_triplet,
    fit_roi,
    load_config,
    pool_and_snap_scale,
    read_frames,
)
from freehand_us.pose import OneEuroParams, compute_T_calib_us, extrinsics_from_observations
from freehand_us.recon import read_stl, reconstruct, write_cloud_ply, write_grid, write_mesh_ply, write_stl
from freehand_us.verify import (
    cr_report,
    dice,
    overlay_rgb,
    slice_intersection,
    write_cr_json,
    write_mask_png,
    write_rgb_png,
)

log = logging.getLogger("freehand_us")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _config(args) -> dict:
    return load_config(args.config) if getattr(args, "config", None) else {}


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def _world(cfg: dict):
    from freehand_us.sim.world import SimWorld

    return SimWorld.from_dict(cfg["world"]) if "world" in cfg else SimWorld()


def _detection_dict(det: LedgeDetection) -> dict:
    return {
        "rows_px": [ln.row for ln in det.lines],
        "keypoints_px": det.keypoints_px.tolist(),
        "scale_estimate_mm_per_px": det.scale_estimate,
    }


def _detect_all(frames, roi: RoiBox, geometry) -> list[LedgeDetection]:
    dets = []
    for k, frame in enumerate(frames):
        try:
            dets.append(find_ledge_triplet(detect_ledge_lines(roi.crop(frame)), geometry))
        except NumericalError as exc:
            log.info("phantom frame %d skipped: %s", k, exc)
    if not dets:
        from freehand_us.errors import NoValidTriplet

        raise NoValidTriplet("no phantom frame produced a ledge triplet")
    return dets


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> dict:
    from freehand_us.sim.calibration import CalibrationSpec, simulate_calibration, write_calibration_session
    from freehand_us.sim.evaluate import NODULE_CENTER
    from freehand_us.sim.phantom import PhantomSpec
    from freehand_us.sim.sweep import SweepSpec, simulate_sweep, write_session

    cfg = _config(args)
    world = _world(cfg)
    out = _out(args)
    if args.kind == "sweep":
        phantom = PhantomSpec.from_dict({"center_mm": list(NODULE_CENTER), **cfg.get("phantom", {})})
        session = simulate_sweep(phantom, SweepSpec.from_dict(cfg.get("sweep", {})), world, seed=args.seed)
        write_session(session, out)
        return {"kind": "sweep", "frames": len(session.images), "volume_gt_cm3": session.volume_gt, "psi_gt": session.psi_gt}
    session = simulate_calibration(world, CalibrationSpec.from_dict(cfg.get("calibration", {})), seed=args.seed)
    write_calibration_session(session, out)
    return {"kind": "calibration", "screen_frames": len(session.screen_frames), "phantom_frames": len(session.phantom_frames)}


def cmd_calibrate_roi(args) -> dict:
    frames = read_frames(args.screen)
    activity = compute_activity_map(frames, args.low_pct, args.high_pct, args.threshold)
    roi = fit_roi(activity, args.min_area_frac)
    result = {"roi": list(roi.as_tuple()), "frame_shape": list(np.shape(frames[0]))}
    _dump(_out(args) / "roi.json", result)
    return result


def cmd_calibrate_scale(args) -> dict:
    from freehand_us.intrinsics import LedgePhantomGeometry

    cfg = _config(args)
    geometry = LedgePhantomGeometry.from_dict(cfg) if "ledge_depths_mm" in cfg else _world(cfg).geometry
    roi_info = _read_json(args.roi)
    roi = RoiBox(*roi_info["roi"])
    dets = _detect_all(read_frames(args.phantom), roi, geometry)
    s_us = pool_and_snap_scale([d.scale_estimate for d in dets], roi.h)
    intr = UsIntrinsics(s_us, roi, frame_shape=tuple(roi_info.get("frame_shape", ())) or None)
    result = {"intrinsics": intr.to_dict(), "depth_mm": intr.depth_mm, "detections": [_detection_dict(d) for d in dets]}
    _dump(_out(args) / "intrinsics.json", result)
    return result


def cmd_calibrate_extrinsics(args) -> dict:
    from freehand_us.sim.calibration import read_calibration_session

    session = read_calibration_session(args.session)
    intr = UsIntrinsics.from_dict(_read_json(args.intrinsics)["intrinsics"])
    geometry = session.world.geometry
    dets = _detect_all(session.phantom_frames, intr.roi, geometry)
    T_calib_us = compute_T_calib_us(dets, intr, geometry)
    w = session.world
    T_us_probe = extrinsics_from_observations(T_calib_us, session.calib_obs, session.probe_obs, w.calib_rig, w.probe_rig, w.cam, seed=args.seed)
    result = {
        "run_id": args.run_id or Path(args.session).name,
        "setting": session.spec.setting,
        "intrinsics": intr.to_dict(),
        "T_calib_us": T_calib_us.to_dict(),
        "T_us_probe": T_us_probe.to_dict(),
    }
    _dump(_out(args) / "calibration.json", result)
    return result


def _calibration_for(session, path):
    if path is None:
        return session.intr, session.world.T_us_probe
    d = _read_json(path)
    return UsIntrinsics.from_dict(d["intrinsics"]), RigidTransform.from_dict(d["T_us_probe"])


def cmd_reconstruct(args) -> dict:
    from freehand_us.sim.sweep import read_session, track_frames

    session = read_session(args.session)
    intr, T_us_probe = _calibration_for(session, args.calibration)
    frames = track_frames(
        session.images, session.masks, session.probe_obs, session.ref_obs, session.world, T_us_probe,
        one_euro=OneEuroParams() if args.one_euro else None, seed=args.seed,
    )
    rec = reconstruct(frames, intr, args.spacing, args.stride, args.closing_radius, args.smooth_iterations)
    out = _out(args)
    write_stl(out / "mesh.stl", rec.mesh)
    write_mesh_ply(out / "mesh.ply", rec.mesh)
    write_cloud_ply(out / "cloud.ply", rec.cloud)
    write_grid(out / "grid.fhvox", rec.grid)
    result = {
        "volume_cm3": rec.volume_cm3,
        "sphericity": rec.sphericity,
        "n_points": len(rec.cloud),
        "n_voxels": rec.grid.count,
        "n_triangles": len(rec.mesh.triangles),
        "volume_gt_cm3": session.volume_gt,
        "relative_error": (rec.volume_cm3 - session.volume_gt) / session.volume_gt,
    }
    _dump(out / "reconstruction.json", result)
    return result


def cmd_verify(args) -> dict:
    from freehand_us.sim.sweep import read_session, track_frames

    session = read_session(args.session)
    intr, T_us_probe = _calibration_for(session, args.calibration)
    mesh = read_stl(args.mesh)
    frames = track_frames(session.images, session.masks, session.probe_obs, session.ref_obs, session.world, T_us_probe, seed=args.seed)
    if args.frames:
        picks = args.frames
    else:
        nonempty = [k for k, m in enumerate(session.masks) if m.any()]
        picks = sorted({nonempty[i] for i in np.linspace(0, len(nonempty) - 1, args.n_planes).round().astype(int)}) if nonempty else []
    out = _out(args)
    rows = []
    for k in picks:
        fr = frames[k]
        pred = slice_intersection(mesh, fr.pose, intr, args.stride)
        write_mask_png(out / f"slice_{k:04d}.png", pred.mask)
        write_rgb_png(out / f"overlay_{k:04d}.png", overlay_rgb(fr.image, pred.mask))
        rows.append({"frame": int(k), "dice": dice(pred.mask, fr.mask), "predicted_px": int(pred.mask.sum()), "segmented_px": int(fr.mask.sum())})
    result = {"planes": rows, "mean_dice": float(np.mean([r["dice"] for r in rows])) if rows else None}
    _dump(out / "verify.json", result)
    return result


def cmd_evaluate(args) -> dict:
    from freehand_us.sim.evaluate import default_phantom_set, evaluate, simulate_phantom_sessions, write_report
    from freehand_us.sim.phantom import PhantomSpec
    from freehand_us.sim.sweep import read_session

    cfg = _config(args)
    if args.sessions:
        sessions = [read_session(d) for d in args.sessions]
    else:
        specs = [PhantomSpec.from_dict(p) for p in cfg["phantoms"]] if "phantoms" in cfg else default_phantom_set()
        sweep_kw = cfg.get("evaluate", {"corner_noise": 0.3})
        sessions = simulate_phantom_sessions(specs, _world(cfg), seed=args.seed, **sweep_kw)
    report = evaluate(sessions, args.methods)
    write_report(report, _out(args))
    return report["psi_bins"]


def cmd_cr_report(args) -> dict:
    from freehand_us.sim.calibration import CalibrationSpec, cr_study, run_from_dict

    cfg = _config(args)
    if args.runs:
        runs = [run_from_dict(_read_json(p)) for p in args.runs]
    else:
        study = cfg.get("cr", {})
        runs = cr_study(
            _world(cfg),
            depths=study.get("depths_mm", (30.0, 40.0, 50.0)),
            gains=study.get("gains", (0.7, 1.3)),
            repeats=int(study.get("repeats", 5)),
            seed=args.seed,
            spec=CalibrationSpec.from_dict(cfg.get("calibration", {})),
        )
    report = cr_report(runs, args.test_pixel)
    write_cr_json(_out(args) / "cr.json", report)
    return {k: report[k] for k in ("mean_mm", "std_mm", "n_runs", "test_pixel")}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML or JSON configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="freehand-us", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a simulated sweep or calibration session")
    p.add_argument("--kind", choices=("sweep", "calibration"), default="sweep")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate-roi", parents=[common], help="ROI from machine-screen frames")
    p.add_argument("--screen", required=True, help="directory of screen frames")
    p.add_argument("--low-pct", type=float, default=5.0)
    p.add_argument("--high-pct", type=float, default=95.0)
    p.add_argument("--threshold", type=float, default=5.0)
    p.add_argument("--min-area-frac", type=float, default=0.01)
    p.set_defaults(func=cmd_calibrate_roi)

    p = sub.add_parser("calibrate-scale", parents=[common], help="pixel scale from ledge-phantom frames")
    p.add_argument("--phantom", required=True, help="directory of phantom frames")
    p.add_argument("--roi", required=True, help="roi.json from calibrate-roi")
    p.set_defaults(func=cmd_calibrate_scale)

    p = sub.add_parser("calibrate-extrinsics", parents=[common], help="probe-to-image transform from a calibration session")
    p.add_argument("--session", required=True)
    p.add_argument("--intrinsics", required=True, help="intrinsics.json from calibrate-scale")
    p.add_argument("--run-id", default="")
    p.set_defaults(func=cmd_calibrate_extrinsics)

    p = sub.add_parser("reconstruct", parents=[common], help="volume and mesh from a sweep session")
    p.add_argument("--session", required=True)
    p.add_argument("--calibration", help="calibration.json; defaults to the session's ground truth")
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--closing-radius", type=int, default=1)
    p.add_argument("--smooth-iterations", type=int, default=10)
    p.add_argument("--one-euro", action="store_true", help="smooth the pose track before compounding")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("verify", parents=[common], help="slice a mesh with tracked image planes")
    p.add_argument("--session", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--calibration")
    p.add_argument("--frames", type=int, nargs="*", help="frame indices (default: evenly spaced)")
    p.add_argument("--n-planes", type=int, default=5)
    p.add_argument("--stride", type=int, default=2)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("evaluate", parents=[common], help="volume errors: reconstruction vs ellipsoid baseline")
    p.add_argument("--sessions", nargs="*", help="sweep session directories (default: simulate the phantom set)")
    p.add_argument("--methods", nargs="+", default=["ellipsoid_baseline", "reconstruction"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cr-report", parents=[common], help="calibration reproducibility")
    p.add_argument("--runs", nargs="*", help="calibration.json files (default: simulate the depth x gain study)")
    p.add_argument("--test-pixel", default="center", choices=("center", "top_left", "top_right", "bottom_left", "bottom_right"))
    p.set_defaults(func=cmd_cr_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", 0), ("out", "out"), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = args.func(args)
    except (ValidationError, OSError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
