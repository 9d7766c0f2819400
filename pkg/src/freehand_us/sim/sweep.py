"""Simulated freehand sweeps, the tracking pipeline that consumes them, and session I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from freehand_us.errors import EmptyMask, PathMissesPhantom, ValidationError
from freehand_us.geom import FrameId, RigidTransform, UsIntrinsics, compose, invert
from freehand_us.pose import (
    CornerObservations,
    OneEuroParams,
    compute_T_us_ref,
    filter_pose_track,
    perturb,
    ransac_pnp,
    read_corner_stream,
    write_corner_stream,
)
from freehand_us.recon import TrackedFrame, TriMesh, read_stl, write_stl
from freehand_us.sim.phantom import Phantom, PhantomSpec, make_phantom
from freehand_us.sim.render import INSIDE_LEVEL, OUTSIDE_LEVEL, inside_mask, speckle_field, threshold_segment, to_uint8
from freehand_us.sim.world import SimWorld, project_markers


@dataclass(frozen=True)
class SweepSpec:
    """Straight probe sweep; ``start``/``end`` are transducer-face centres in Ref (mm)."""

    start: tuple[float, float, float] = (0.0, -15.0, 0.0)
    end: tuple[float, float, float] = (0.0, 15.0, 0.0)
    n_frames: int = 60
    frame_rate: float = 30.0
    pose_noise: tuple[float, float] = (0.0, 0.0)
    corner_noise: float = 0.0
    outlier_rate: float = 0.0
    depth_mm: float = 40.0
    speckle: float = 0.1
    camera_motion: float = 10.0

    def __post_init__(self) -> None:
        if self.n_frames < 2:
            raise ValidationError("a sweep needs at least 2 frames")
        if min(self.pose_noise) < 0 or self.corner_noise < 0 or self.speckle < 0:
            raise ValidationError("noise parameters must be non-negative")
        if not 0 <= self.outlier_rate < 1:
            raise ValidationError("outlier rate must lie in [0, 1)")
        if self.frame_rate <= 0:
            raise ValidationError("frame rate must be positive")

    def to_dict(self) -> dict:
        return {
            "start_mm": list(self.start),
            "end_mm": list(self.end),
            "n_frames": self.n_frames,
            "frame_rate_hz": self.frame_rate,
            "pose_noise": list(self.pose_noise),
            "corner_noise_px": self.corner_noise,
            "outlier_rate": self.outlier_rate,
            "depth_mm": self.depth_mm,
            "speckle": self.speckle,
            "camera_motion_mm": self.camera_motion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SweepSpec:
        base = cls()
        return cls(
            start=tuple(float(v) for v in d.get("start_mm", base.start)),
            end=tuple(float(v) for v in d.get("end_mm", base.end)),
            n_frames=int(d.get("n_frames", base.n_frames)),
            frame_rate=float(d.get("frame_rate_hz", base.frame_rate)),
            pose_noise=tuple(float(v) for v in d.get("pose_noise", base.pose_noise)),
            corner_noise=float(d.get("corner_noise_px", base.corner_noise)),
            outlier_rate=float(d.get("outlier_rate", base.outlier_rate)),
            depth_mm=float(d.get("depth_mm", base.depth_mm)),
            speckle=float(d.get("speckle", base.speckle)),
            camera_motion=float(d.get("camera_motion_mm", base.camera_motion)),
        )


@dataclass
class SimSession:
    """Everything one simulated sweep produces, time-aligned by frame index."""

    world: SimWorld
    sweep: SweepSpec
    phantom_spec: PhantomSpec
    intr: UsIntrinsics
    images: list[np.ndarray]
    masks: list[np.ndarray]
    timestamps: list[float]
    gt_poses: list[RigidTransform]  # US -> Ref
    probe_obs: list[CornerObservations]
    ref_obs: list[CornerObservations]
    gt_mesh: TriMesh
    volume_gt: float
    psi_gt: float
    seed: int = 0
    phantom: Phantom | None = field(default=None, repr=False)

    def ground_truth_frames(self) -> list[TrackedFrame]:
        return [TrackedFrame(im, m, p, t) for im, m, p, t in zip(self.images, self.masks, self.gt_poses, self.timestamps)]


def probe_pose(sweep: SweepSpec, k: int) -> RigidTransform:
    """Probe -> Ref at frame ``k``; the probe axes stay aligned with Ref."""
    a, b = np.asarray(sweep.start, float), np.asarray(sweep.end, float)
    return RigidTransform.from_rt(np.eye(3), a + (b - a) * k / (sweep.n_frames - 1), FrameId.PROBE, FrameId.REF)


def simulate_sweep(
    phantom_spec: PhantomSpec, sweep: SweepSpec, world: SimWorld | None = None, seed: int = 0
) -> SimSession:
    """Render a sweep across a phantom and synthesise the marker streams.

    Tracking noise (``pose_noise``) perturbs the probe pose the camera sees;
    images are rendered at the true pose.  Seeds are split so that each noise
    source is reproducible on its own.
    """
    world = world or SimWorld()
    phantom, gt_mesh, volume, psi = make_phantom(phantom_spec)
    intr = world.intrinsics(sweep.depth_mm)
    T_probe_us = invert(world.T_us_probe)
    times = [k / sweep.frame_rate for k in range(sweep.n_frames)]
    poses = [compose(probe_pose(sweep, k), T_probe_us) for k in range(sweep.n_frames)]
    inside = [inside_mask(phantom, p, intr) for p in poses]
    if not any(m.any() for m in inside):
        raise PathMissesPhantom("no frame of the sweep intersects the phantom")

    pose_rng, corner_rng, image_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    images, masks, probe_obs, ref_obs = [], [], [], []
    for k, t in enumerate(times):
        base = np.where(inside[k], INSIDE_LEVEL, OUTSIDE_LEVEL)
        img = to_uint8(base * speckle_field(base.shape, sweep.speckle, image_rng))
        try:
            mask = threshold_segment(img)
        except EmptyMask:
            mask = np.zeros(img.shape, dtype=bool)
        images.append(img)
        masks.append(mask)
        seen = perturb(probe_pose(sweep, k), *sweep.pose_noise, pose_rng) if max(sweep.pose_noise) > 0 else probe_pose(sweep, k)
        cam_from_ref = world.camera_pose(t, sweep.camera_motion)
        probe_obs.append(
            project_markers(world.probe_rig, compose(cam_from_ref, seen), world.cam, sweep.corner_noise, sweep.outlier_rate, corner_rng, t)
        )
        ref_obs.append(project_markers(world.ref_rig, cam_from_ref, world.cam, sweep.corner_noise, sweep.outlier_rate, corner_rng, t))
    return SimSession(world, sweep, phantom_spec, intr, images, masks, times, poses, probe_obs, ref_obs, gt_mesh, volume, psi, seed, phantom)


def track_frames(
    images: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    probe_obs: Sequence[CornerObservations],
    ref_obs: Sequence[CornerObservations],
    world: SimWorld,
    T_us_probe: RigidTransform,
    reproj_thresh_px: float = 2.0,
    one_euro: OneEuroParams | None = None,
    seed: int = 0,
) -> list[TrackedFrame]:
    """Per-frame ``US -> Ref`` poses from the two marker streams (motion-compensated).

    With ``one_euro`` set, the pose track is smoothed before compounding.
    """
    poses, times = [], []
    for k, (op, orf) in enumerate(zip(probe_obs, ref_obs)):
        cam_from_probe = ransac_pnp(world.probe_rig, op, world.cam, reproj_thresh_px, seed=seed + 2 * k).pose
        cam_from_ref = ransac_pnp(world.ref_rig, orf, world.cam, reproj_thresh_px, seed=seed + 2 * k + 1).pose
        T_us_ref = compute_T_us_ref(invert(cam_from_probe), T_us_probe, invert(cam_from_ref))
        poses.append(invert(T_us_ref))
        times.append(op.timestamp)
    if one_euro is not None:
        poses = filter_pose_track(poses, times, one_euro)
    return [TrackedFrame(im, m, p, t) for im, m, p, t in zip(images, masks, poses, times)]


def track_session(session: SimSession, T_us_probe: RigidTransform | None = None, **kwargs) -> list[TrackedFrame]:
    return track_frames(
        session.images, session.masks, session.probe_obs, session.ref_obs, session.world,
        T_us_probe if T_us_probe is not None else session.world.T_us_probe, seed=session.seed, **kwargs,
    )


# ---------------------------------------------------------------------------
# disk layout
# ---------------------------------------------------------------------------


def dump_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_png(path: str | Path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    img = Image.fromarray(arr).convert("1") if arr.dtype == bool else Image.fromarray(arr.astype(np.uint8), mode="L")
    img.save(path, optimize=False)


def read_png(path: str | Path, as_bool: bool = False) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127 if as_bool else arr


def write_session(session: SimSession, out_dir: str | Path) -> Path:
    """Session layout: frames/, masks/, corners.jsonl, poses.jsonl, meta.json, gt_mesh.stl."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    for k, (img, m) in enumerate(zip(session.images, session.masks)):
        write_png(out / "frames" / f"{k:04d}.png", img)
        write_png(out / "masks" / f"{k:04d}.png", m)
    interleaved = [o for pair in zip(session.probe_obs, session.ref_obs) for o in pair]
    write_corner_stream(out / "corners.jsonl", interleaved)
    with open(out / "poses.jsonl", "w") as fh:
        for t, p in zip(session.timestamps, session.gt_poses):
            fh.write(json.dumps({"t": t, "pose": p.to_dict()}, sort_keys=True) + "\n")
    write_stl(out / "gt_mesh.stl", session.gt_mesh)
    dump_json(
        out / "meta.json",
        {
            "kind": "sweep",
            "seed": session.seed,
            "world": session.world.to_dict(),
            "sweep": session.sweep.to_dict(),
            "phantom": session.phantom_spec.to_dict(),
            "intrinsics": session.intr.to_dict(),
            "volume_gt_cm3": session.volume_gt,
            "psi_gt": session.psi_gt,
            "n_frames": len(session.images),
        },
    )
    return out


def read_session(directory: str | Path) -> SimSession:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    n = int(meta["n_frames"])
    images = [read_png(d / "frames" / f"{k:04d}.png") for k in range(n)]
    masks = [read_png(d / "masks" / f"{k:04d}.png", as_bool=True) for k in range(n)]
    stream = read_corner_stream(d / "corners.jsonl")
    probe_obs = [o for o in stream if o.rig == "probe"]
    ref_obs = [o for o in stream if o.rig == "ref"]
    poses, times = [], []
    with open(d / "poses.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            times.append(float(rec["t"]))
            poses.append(RigidTransform.from_dict(rec["pose"]))
    return SimSession(
        world=SimWorld.from_dict(meta["world"]),
        sweep=SweepSpec.from_dict(meta["sweep"]),
        phantom_spec=PhantomSpec.from_dict(meta["phantom"]),
        intr=UsIntrinsics.from_dict(meta["intrinsics"]),
        images=images,
        masks=masks,
        timestamps=times,
        gt_poses=poses,
        probe_obs=probe_obs,
        ref_obs=ref_obs,
        gt_mesh=read_stl(d / "gt_mesh.stl"),
        volume_gt=float(meta["volume_gt_cm3"]),
        psi_gt=float(meta["psi_gt"]),
        seed=int(meta["seed"]),
    )
