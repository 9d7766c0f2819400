"""Simulated tabletop world: camera, marker rigs, probe mount and ledge phantom."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from freehand_us.errors import BehindCamera, FrameMismatch
from freehand_us.geom import FrameId, RigidTransform, RoiBox, UsIntrinsics, compose, invert
from freehand_us.intrinsics import LedgePhantomGeometry
from freehand_us.pose import CameraIntrinsics, CornerObservations, MarkerDetection, MarkerRigModel
from freehand_us.sim.render import as_rng

APERTURE_MM = 38.0
ROI_HEIGHT_PX = 400
SCREEN_SHAPE = (600, 800)
OUTLIER_MAX_PX = 50.0


def square_marker(center, u, v, side: float) -> np.ndarray:
    """Corners (TL, TR, BR, BL) of a square marker with in-plane axes ``u`` (right) and ``v`` (down)."""
    c, u, v = (np.asarray(a, dtype=float) for a in (center, u, v))
    h = side / 2.0
    return np.array([c - h * u - h * v, c + h * u - h * v, c + h * u + h * v, c - h * u + h * v])


def probe_rig_model(side: float = 20.0) -> MarkerRigModel:
    """Nine markers on three faces of a 50 mm cube mounted on the probe handle."""
    ex, ey, ez = np.eye(3)
    corners = []
    for a, b in [(-12, -12), (12, -12), (-12, 12)]:
        corners.append(square_marker((a, b, 140.0), ex, ey, side))
    for a, z in [(-12, 103.0), (12, 103.0), (12, 127.0)]:
        corners.append(square_marker((a, -25.0, z), ex, -ez, side))
    for b, z in [(-12, 103.0), (12, 115.0), (-12, 127.0)]:
        corners.append(square_marker((25.0, b, z), ey, -ez, side))
    return MarkerRigModel(tuple(range(0, 9)), np.array(corners), FrameId.PROBE)


def ref_rig_model(side: float = 30.0) -> MarkerRigModel:
    """Planar 2x2 marker board lying on the phantom surface (z = 0)."""
    ex, ey, _ = np.eye(3)
    corners = [square_marker((x, y, 0.0), ex, ey, side) for y in (-20.0, 20.0) for x in (50.0, 90.0)]
    return MarkerRigModel(tuple(range(20, 24)), np.array(corners), FrameId.REF)


def calib_rig_model(side: float = 20.0) -> MarkerRigModel:
    """Four markers on the top and front faces of the ledge phantom block."""
    ex, ey, ez = np.eye(3)
    corners = [
        square_marker((-15.0, 20.0, 40.0), ex, ey, side),
        square_marker((65.0, 20.0, 40.0), ex, ey, side),
        square_marker((0.0, -5.0, 20.0), ex, -ez, side),
        square_marker((50.0, -5.0, 20.0), ex, -ez, side),
    ]
    return MarkerRigModel(tuple(range(10, 14)), np.array(corners), FrameId.CALIB)


def look_at(eye, target, up=(0.0, 0.0, 1.0), src: FrameId = FrameId.REF) -> RigidTransform:
    """Pose mapping ``src`` coordinates into a camera at ``eye`` looking at ``target``."""
    eye, target, up = (np.asarray(a, dtype=float) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    cam_in_src = RigidTransform.from_rt(np.stack([x, y, z], axis=1), eye, FrameId.CAM, src)
    return invert(cam_in_src)


def default_T_us_probe() -> RigidTransform:
    """Probe -> US for the simulated mount: image plane below the face, slightly misaligned."""
    R = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])  # columns: US axes in Probe
    nominal = RigidTransform.from_rt(R, [-APERTURE_MM / 2, 0.0, 0.0], FrameId.US, FrameId.PROBE)
    mount = RigidTransform.from_rotvec(np.deg2rad([1.5, -1.0, 2.0]), [0.7, -0.4, 1.2], FrameId.PROBE, FrameId.PROBE)
    return invert(compose(mount, nominal))


def default_calib_from_slot() -> RigidTransform:
    """US -> Calib for a probe seated in the phantom slot (the slot plane is y = 20)."""
    R = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
    return RigidTransform.from_rt(R, [6.0, 20.0, 40.0], FrameId.US, FrameId.CALIB)


DEFAULT_LEDGE_DEPTHS = (8.0, 13.0, 23.0)
DEFAULT_EDGE_OFFSETS = ((13.0, 25.0), (8.0, 30.0), (4.0, 34.0))


def intrinsics_for_depth(depth_mm: float, screen_shape: tuple[int, int] = SCREEN_SHAPE) -> UsIntrinsics:
    """Machine display for an imaging depth: fixed 400 px tall viewport, width follows the aperture."""
    s = depth_mm / ROI_HEIGHT_PX
    w = int(round(APERTURE_MM / s))
    H, W = screen_shape
    roi = RoiBox((W - w) // 2, (H - ROI_HEIGHT_PX) // 2 + 20, w, ROI_HEIGHT_PX)
    return UsIntrinsics(s, roi, frame_shape=screen_shape)


@dataclass(frozen=True)
class SimWorld:
    cam: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(1400.0, 1400.0, 960.0, 540.0))
    probe_rig: MarkerRigModel = field(default_factory=probe_rig_model)
    ref_rig: MarkerRigModel = field(default_factory=ref_rig_model)
    calib_rig: MarkerRigModel = field(default_factory=calib_rig_model)
    T_us_probe: RigidTransform = field(default_factory=default_T_us_probe)
    calib_from_slot: RigidTransform = field(default_factory=default_calib_from_slot)
    ledge_depths: tuple[float, float, float] = DEFAULT_LEDGE_DEPTHS
    edge_offsets: tuple[tuple[float, float], ...] = DEFAULT_EDGE_OFFSETS
    screen_shape: tuple[int, int] = SCREEN_SHAPE
    camera_eye: tuple[float, float, float] = (40.0, -170.0, 260.0)
    camera_target: tuple[float, float, float] = (30.0, 0.0, 40.0)

    @property
    def geometry(self) -> LedgePhantomGeometry:
        return LedgePhantomGeometry.from_slot(self.ledge_depths, self.edge_offsets, self.calib_from_slot)

    def intrinsics(self, depth_mm: float) -> UsIntrinsics:
        return intrinsics_for_depth(depth_mm, self.screen_shape)

    def camera_pose(self, t: float = 0.0, motion: float = 0.0) -> RigidTransform:
        """Ref -> Cam; ``motion`` (mm) sways the hand-held camera over time."""
        eye = np.asarray(self.camera_eye, dtype=float)
        if motion:
            eye = eye + motion * np.array([math.sin(1.3 * t), math.cos(0.9 * t) - 1.0, 0.5 * math.sin(2.1 * t)])
        return look_at(eye, self.camera_target)

    def to_dict(self) -> dict:
        return {
            "camera": self.cam.to_dict(),
            "probe_rig": self.probe_rig.to_dict(),
            "ref_rig": self.ref_rig.to_dict(),
            "calib_rig": self.calib_rig.to_dict(),
            "T_us_probe": self.T_us_probe.to_dict(),
            "calib_from_slot": self.calib_from_slot.to_dict(),
            "ledge_depths_mm": list(self.ledge_depths),
            "edge_offsets_mm": [list(e) for e in self.edge_offsets],
            "screen_shape": list(self.screen_shape),
            "camera_eye_mm": list(self.camera_eye),
            "camera_target_mm": list(self.camera_target),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SimWorld:
        return cls(
            cam=CameraIntrinsics.from_dict(d["camera"]),
            probe_rig=MarkerRigModel.from_dict(d["probe_rig"]),
            ref_rig=MarkerRigModel.from_dict(d["ref_rig"]),
            calib_rig=MarkerRigModel.from_dict(d["calib_rig"]),
            T_us_probe=RigidTransform.from_dict(d["T_us_probe"]),
            calib_from_slot=RigidTransform.from_dict(d["calib_from_slot"]),
            ledge_depths=tuple(d["ledge_depths_mm"]),
            edge_offsets=tuple(tuple(e) for e in d["edge_offsets_mm"]),
            screen_shape=tuple(d["screen_shape"]),
            camera_eye=tuple(d["camera_eye_mm"]),
            camera_target=tuple(d["camera_target_mm"]),
        )


def project_markers(
    rig: MarkerRigModel,
    T_rig_cam: RigidTransform,
    cam: CameraIntrinsics,
    sigma_px: float = 0.0,
    outlier_rate: float = 0.0,
    seed: int | np.random.Generator | None = 0,
    timestamp: float = 0.0,
) -> CornerObservations:
    """Pinhole projection of every rig corner with Gaussian noise and gross outliers.

    ``T_rig_cam`` maps rig coordinates into the camera (rig -> Cam).  A
    fraction ``outlier_rate`` of corners (rounded) is displaced uniformly by
    up to 50 px per axis.
    """
    if T_rig_cam.src != rig.rig_frame or T_rig_cam.dst != FrameId.CAM:
        raise FrameMismatch(f"expected {rig.rig_frame.value}->Cam, got {T_rig_cam.src.value}->{T_rig_cam.dst.value}")
    rng = as_rng(seed)
    pts = T_rig_cam.apply(rig.corners_rig.reshape(-1, 3))
    if np.any(pts[:, 2] <= 0):
        raise BehindCamera("rig corner at or behind the camera plane")
    uv = np.stack([cam.fx * pts[:, 0] / pts[:, 2] + cam.cx, cam.fy * pts[:, 1] / pts[:, 2] + cam.cy], axis=1)
    if sigma_px > 0:
        uv = uv + rng.normal(scale=sigma_px, size=uv.shape)
    n_out = int(round(outlier_rate * len(uv)))
    if n_out:
        idx = rng.choice(len(uv), size=n_out, replace=False)
        uv[idx] += rng.uniform(-OUTLIER_MAX_PX, OUTLIER_MAX_PX, size=(n_out, 2))
    uv = uv.reshape(-1, 4, 2)
    dets = tuple(MarkerDetection(mid, uv[k]) for k, mid in enumerate(rig.marker_ids))
    return CornerObservations(float(timestamp), dets, rig.rig_frame.value.lower())
