"""Simulated calibration sessions (screen capture, ledge phantom, marker streams) and the CR study."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from freehand_us.geom import FrameId, RigidTransform, UsIntrinsics, compose
from freehand_us.intrinsics import LedgeDetection, calibrate_intrinsics, read_frames
from freehand_us.pose import CornerObservations, compute_T_calib_us, extrinsics_from_observations, read_corner_stream, write_corner_stream
from freehand_us.sim.render import embed_in_screen, render_ledge_image, render_screen_sequence
from freehand_us.sim.sweep import dump_json, write_png
from freehand_us.sim.world import SimWorld, look_at, project_markers
from freehand_us.verify import CalibrationRun

CAMERA_TARGET_CALIB = np.array([25.0, 20.0, 90.0])
CAMERA_AXIS_CALIB = np.array([-0.3, -0.6, 0.75])


@dataclass(frozen=True)
class CalibrationSpec:
    depth_mm: float = 40.0
    gain: float = 1.0
    n_screen: int = 30
    n_phantom: int = 10
    corner_noise: float = 0.5
    outlier_rate: float = 0.0
    speckle: float = 0.3
    camera_distance: float = 300.0
    camera_cone_deg: float = 25.0
    seating_noise: tuple[float, float] = (0.3, 0.5)

    @property
    def setting(self) -> str:
        return f"depth{self.depth_mm:g}_gain{self.gain:g}"

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["seating_noise"] = list(self.seating_noise)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CalibrationSpec:
        base = cls()
        kw = {}
        for k, v in d.items():
            if k == "seating_noise":
                kw[k] = (float(v[0]), float(v[1]))
            elif k in cls.__dataclass_fields__:
                kw[k] = type(getattr(base, k))(v)
        return cls(**kw)


@dataclass
class CalibrationSession:
    world: SimWorld
    spec: CalibrationSpec
    intr_gt: UsIntrinsics
    screen_frames: list[np.ndarray]
    phantom_frames: list[np.ndarray]
    calib_obs: list[CornerObservations]
    probe_obs: list[CornerObservations]
    seed: int = 0


def _camera_eye(rng: np.random.Generator, spec: CalibrationSpec) -> np.ndarray:
    axis = CAMERA_AXIS_CALIB / np.linalg.norm(CAMERA_AXIS_CALIB)
    while True:
        d = axis + np.tan(np.deg2rad(spec.camera_cone_deg)) * rng.uniform(-1, 1, 3)
        d /= np.linalg.norm(d)
        if np.degrees(np.arccos(np.clip(d @ axis, -1, 1))) <= spec.camera_cone_deg:
            return CAMERA_TARGET_CALIB + spec.camera_distance * d


def seating_offset(sigma_t: float, sigma_r_deg: float, rng: np.random.Generator) -> RigidTransform:
    """Out-of-plane reseating error (US -> US): elevational shift and tilts about the in-plane axes.

    These degrees of freedom leave the ledge image unchanged to first order,
    so they are invisible to the keypoint registration.
    """
    tilt = np.deg2rad(sigma_r_deg) * np.array([rng.standard_normal(), rng.standard_normal(), 0.0])
    shift = np.array([0.0, 0.0, sigma_t * rng.standard_normal()])
    return RigidTransform.from_rotvec(tilt, shift, FrameId.US, FrameId.US)


def simulate_calibration(world: SimWorld | None = None, spec: CalibrationSpec | None = None, seed: int = 0) -> CalibrationSession:
    """One calibration run: the probe sits in the ledge phantom while a hand-held camera films both rigs.

    Each run reseats the probe with a small out-of-plane error (``seating_noise``).
    """
    world = world or SimWorld()
    spec = spec or CalibrationSpec()
    intr = world.intrinsics(spec.depth_mm)
    screen_rng, image_rng, cam_rng, corner_rng, seat_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)
    )
    screen = render_screen_sequence(world.screen_shape, intr.roi, spec.n_screen, screen_rng)
    geometry = world.geometry
    phantom_frames = [
        embed_in_screen(render_ledge_image(geometry, intr, spec.gain, spec.speckle, image_rng), world.screen_shape, intr.roi)
        for _ in range(spec.n_phantom)
    ]
    seated = compose(world.calib_from_slot, seating_offset(*spec.seating_noise, seat_rng))
    calib_from_probe = compose(seated, world.T_us_probe)
    calib_obs, probe_obs = [], []
    for k in range(spec.n_phantom):
        cam_from_calib = look_at(_camera_eye(cam_rng, spec), CAMERA_TARGET_CALIB, src=FrameId.CALIB)
        t = float(k)
        calib_obs.append(project_markers(world.calib_rig, cam_from_calib, world.cam, spec.corner_noise, spec.outlier_rate, corner_rng, t))
        probe_obs.append(
            project_markers(world.probe_rig, compose(cam_from_calib, calib_from_probe), world.cam, spec.corner_noise, spec.outlier_rate, corner_rng, t)
        )
    return CalibrationSession(world, spec, intr, screen, phantom_frames, calib_obs, probe_obs, seed)


@dataclass
class CalibrationResult:
    run: CalibrationRun
    T_calib_us: RigidTransform
    detections: list[LedgeDetection]

    def to_dict(self) -> dict:
        return {
            "run_id": self.run.run_id,
            "setting": self.run.setting,
            "intrinsics": self.run.intr.to_dict(),
            "T_us_probe": self.run.T_us_probe.to_dict(),
            "T_calib_us": self.T_calib_us.to_dict(),
            "n_detections": len(self.detections),
        }


def run_from_dict(d: dict) -> CalibrationRun:
    return CalibrationRun(RigidTransform.from_dict(d["T_us_probe"]), UsIntrinsics.from_dict(d["intrinsics"]), d.get("run_id", ""), d.get("setting", ""))


def calibrate_frames(
    screen_frames, phantom_frames, calib_obs, probe_obs, world: SimWorld, run_id: str = "", setting: str = "", seed: int = 0
) -> CalibrationResult:
    """Full calibration: ROI and scale, image-plane pose in the phantom, then the probe offset."""
    intr, dets = calibrate_intrinsics(screen_frames, phantom_frames, world.geometry)
    T_calib_us = compute_T_calib_us(dets, intr, world.geometry)
    T_us_probe = extrinsics_from_observations(T_calib_us, calib_obs, probe_obs, world.calib_rig, world.probe_rig, world.cam, seed=seed)
    return CalibrationResult(CalibrationRun(T_us_probe, intr, run_id, setting), T_calib_us, dets)


def calibrate_session(session: CalibrationSession, run_id: str = "") -> CalibrationResult:
    return calibrate_frames(
        session.screen_frames, session.phantom_frames, session.calib_obs, session.probe_obs,
        session.world, run_id, session.spec.setting, session.seed,
    )


def cr_study(
    world: SimWorld | None = None,
    depths=(30.0, 40.0, 50.0),
    gains=(0.7, 1.3),
    repeats: int = 5,
    seed: int = 0,
    spec: CalibrationSpec | None = None,
) -> list[CalibrationRun]:
    """Independent calibrations over a depth x gain grid, ``repeats`` per setting."""
    world = world or SimWorld()
    base = spec or CalibrationSpec()
    runs = []
    k = 0
    for depth in depths:
        for gain in gains:
            for r in range(repeats):
                s = CalibrationSpec.from_dict({**base.to_dict(), "depth_mm": depth, "gain": gain})
                session = simulate_calibration(world, s, seed=seed * 100003 + k)
                runs.append(calibrate_session(session, run_id=f"{s.setting}_r{r}").run)
                k += 1
    return runs


# ---------------------------------------------------------------------------
# disk layout
# ---------------------------------------------------------------------------


def write_calibration_session(session: CalibrationSession, out_dir: str | Path) -> Path:
    """Layout: screen/ and phantom/ (PNG), corners.jsonl, meta.json."""
    out = Path(out_dir)
    (out / "screen").mkdir(parents=True, exist_ok=True)
    (out / "phantom").mkdir(exist_ok=True)
    for k, f in enumerate(session.screen_frames):
        write_png(out / "screen" / f"{k:04d}.png", f)
    for k, f in enumerate(session.phantom_frames):
        write_png(out / "phantom" / f"{k:04d}.png", f)
    write_corner_stream(out / "corners.jsonl", [o for pair in zip(session.calib_obs, session.probe_obs) for o in pair])
    dump_json(
        out / "meta.json",
        {
            "kind": "calibration",
            "seed": session.seed,
            "world": session.world.to_dict(),
            "calibration": session.spec.to_dict(),
            "intrinsics_gt": session.intr_gt.to_dict(),
            "geometry": session.world.geometry.to_dict(),
        },
    )
    return out


def read_calibration_session(directory: str | Path) -> CalibrationSession:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    stream = read_corner_stream(d / "corners.jsonl")
    return CalibrationSession(
        world=SimWorld.from_dict(meta["world"]),
        spec=CalibrationSpec.from_dict(meta["calibration"]),
        intr_gt=UsIntrinsics.from_dict(meta["intrinsics_gt"]),
        screen_frames=read_frames(d / "screen"),
        phantom_frames=read_frames(d / "phantom"),
        calib_obs=[o for o in stream if o.rig == "calib"],
        probe_obs=[o for o in stream if o.rig == "probe"],
        seed=int(meta["seed"]),
    )
