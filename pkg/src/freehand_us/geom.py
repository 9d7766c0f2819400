"""Frame-tagged rigid transforms and the ultrasound pixel-to-millimetre map.

Convention: ``T^A_B`` maps coordinates expressed in frame ``B`` into frame
``A``.  A :class:`RigidTransform` stores this as ``src=B, dst=A`` so that
``compose(T^A_B, T^B_C) == T^A_C`` and inner frames must agree.

The ultrasound image frame ``US`` has its origin at the top-left ROI pixel,
``x`` along image columns (lateral), ``y`` along image rows (depth) and ``z``
normal to the image plane.  Pixel coordinates are ``(i, j) = (column, row)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from freehand_us.errors import FrameMismatch, OutsideRoi, ValidationError

ADMISSIBLE_DEPTHS_MM = tuple(float(d) for d in range(5, 101, 5))
MIN_ROI_SIDE_PX = 32


class FrameId(str, enum.Enum):
    CAM = "Cam"
    PROBE = "Probe"
    US = "US"
    CALIB = "Calib"
    REF = "Ref"


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z), Hamilton product
# ---------------------------------------------------------------------------


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise ValidationError("quaternion has zero or non-finite norm")
    q = q / n
    # canonical hemisphere keeps serialisation unique
    if q[0] < 0 or (q[0] == 0 and q[np.nonzero(q)[0][0]] < 0):
        q = -q
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def rotvec_to_quat(rv: np.ndarray) -> np.ndarray:
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv)
    if angle < 1e-12:
        return quat_normalize(np.array([1.0, *(0.5 * rv)]))
    axis = rv / angle
    return quat_normalize(np.array([np.cos(angle / 2), *(np.sin(angle / 2) * axis)]))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v
    angle = 2.0 * np.arctan2(s, q[0])
    return v / s * angle


def rotation_angle_deg(R: np.ndarray) -> float:
    """Angle of a rotation matrix in degrees."""
    c = (np.trace(R) - 1.0) / 2.0
    # atan2 keeps precision near zero where arccos does not
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def _as_frame(f: FrameId | str) -> FrameId:
    return f if isinstance(f, FrameId) else FrameId(f)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation mapping ``src`` coordinates into ``dst``.

    ``quat`` is a unit quaternion ``(w, x, y, z)``; ``t`` is in mm.
    """

    quat: np.ndarray
    t: np.ndarray
    src: FrameId
    dst: FrameId

    def __post_init__(self) -> None:
        q = quat_normalize(self.quat)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValidationError("translation must be finite")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "src", _as_frame(self.src))
        object.__setattr__(self, "dst", _as_frame(self.dst))

    @classmethod
    def identity(cls, src: FrameId | str, dst: FrameId | str) -> RigidTransform:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), src, dst)

    @classmethod
    def from_matrix(cls, M: np.ndarray, src: FrameId | str, dst: FrameId | str) -> RigidTransform:
        M = np.asarray(M, dtype=float)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3], src, dst)

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray, src: FrameId | str, dst: FrameId | str) -> RigidTransform:
        return cls(matrix_to_quat(R), t, src, dst)

    @classmethod
    def from_rotvec(cls, rotvec: np.ndarray, t: np.ndarray, src: FrameId | str, dst: FrameId | str) -> RigidTransform:
        return cls(rotvec_to_quat(rotvec), t, src, dst)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.t
        return M

    @property
    def rotvec(self) -> np.ndarray:
        return quat_to_rotvec(self.quat)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an ``(..., 3)`` array of points from ``src`` into ``dst``."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.t

    def inverse(self) -> RigidTransform:
        q_inv = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        t_inv = -(quat_to_matrix(q_inv) @ self.t)
        return RigidTransform(q_inv, t_inv, self.dst, self.src)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def retag(self, src: FrameId | str, dst: FrameId | str) -> RigidTransform:
        return RigidTransform(self.quat, self.t, src, dst)

    def to_dict(self) -> dict[str, Any]:
        return {
            "from": self.src.value,
            "to": self.dst.value,
            "quat": [float(v) for v in self.quat],
            "t_mm": [float(v) for v in self.t],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RigidTransform:
        return cls(np.asarray(d["quat"], float), np.asarray(d["t_mm"], float), d["from"], d["to"])

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return (
            self.src == other.src
            and self.dst == other.dst
            and np.allclose(self.matrix, other.matrix, atol=atol, rtol=0)
        )

    def __repr__(self) -> str:
        return (
            f"RigidTransform({self.src.value}->{self.dst.value}, "
            f"quat={np.round(self.quat, 6).tolist()}, t={np.round(self.t, 4).tolist()})"
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``compose(T^A_B, T^B_C) = T^A_C``."""
    if a.src != b.dst:
        raise FrameMismatch(f"cannot compose {a.src.value}->{a.dst.value} after {b.src.value}->{b.dst.value}")
    q = quat_multiply(a.quat, b.quat)
    t = quat_to_matrix(a.quat) @ b.t + a.t
    return RigidTransform(q, t, b.src, a.dst)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def transform_point(t: RigidTransform, p: np.ndarray) -> np.ndarray:
    return t.apply(p)


def pose_error(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """(translation error in mm, rotation error in degrees) between two poses."""
    dt = float(np.linalg.norm(a.t - b.t))
    dr = rotation_angle_deg(a.rotation.T @ b.rotation)
    return dt, dr


def mean_transform(transforms: list[RigidTransform]) -> RigidTransform:
    """Chordal L2 mean of rotations, arithmetic mean of translations."""
    if not transforms:
        raise ValidationError("need at least one transform")
    src, dst = transforms[0].src, transforms[0].dst
    for tr in transforms:
        if tr.src != src or tr.dst != dst:
            raise FrameMismatch("cannot average transforms between different frames")
    Rsum = sum(tr.rotation for tr in transforms)
    U, _, Vt = np.linalg.svd(Rsum)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    t = np.mean([tr.t for tr in transforms], axis=0)
    return RigidTransform.from_rt(U @ D @ Vt, t, src, dst)


# ---------------------------------------------------------------------------
# ultrasound intrinsics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoiBox:
    x: int
    y: int
    w: int
    h: int

    def contains(self, i: float, j: float) -> bool:
        return self.x <= i < self.x + self.w and self.y <= j < self.y + self.h

    def crop(self, image: np.ndarray) -> np.ndarray:
        return image[self.y : self.y + self.h, self.x : self.x + self.w]

    def iou(self, other: RoiBox) -> float:
        x0, y0 = max(self.x, other.x), max(self.y, other.y)
        x1 = min(self.x + self.w, other.x + other.w)
        y1 = min(self.y + self.h, other.y + other.h)
        inter = max(0, x1 - x0) * max(0, y1 - y0)
        union = self.w * self.h + other.w * other.h - inter
        return inter / union if union else 0.0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class UsIntrinsics:
    """Pixel scale ``s_us`` (mm/px) and the active region of the screen frame."""

    s_us: float
    roi: RoiBox
    frame_shape: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if isinstance(self.roi, (tuple, list)):
            object.__setattr__(self, "roi", RoiBox(*[int(v) for v in self.roi]))
        if not (self.s_us > 0 and np.isfinite(self.s_us)):
            raise ValidationError(f"s_us must be positive, got {self.s_us}")
        if self.roi.w < MIN_ROI_SIDE_PX or self.roi.h < MIN_ROI_SIDE_PX:
            raise ValidationError(f"ROI sides must be >= {MIN_ROI_SIDE_PX} px, got {self.roi}")
        if self.roi.x < 0 or self.roi.y < 0:
            raise ValidationError("ROI must lie inside the frame")
        if self.frame_shape is not None:
            h, w = self.frame_shape
            if self.roi.x + self.roi.w > w or self.roi.y + self.roi.h > h:
                raise ValidationError("ROI must lie inside the frame")

    @property
    def depth_mm(self) -> float:
        return self.s_us * self.roi.h

    @property
    def K_us(self) -> np.ndarray:
        """4x4 homogeneous pixel-to-millimetre matrix."""
        s, x, y = self.s_us, self.roi.x, self.roi.y
        return np.array(
            [
                [s, 0.0, 0.0, -x * s],
                [0.0, s, 0.0, -y * s],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )

    def to_dict(self) -> dict[str, Any]:
        return {"s_us_mm_per_px": float(self.s_us), "roi": list(self.roi.as_tuple())}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> UsIntrinsics:
        return cls(float(d["s_us_mm_per_px"]), RoiBox(*[int(v) for v in d["roi"]]))


def pixel_to_us(intr: UsIntrinsics, pixel: np.ndarray) -> np.ndarray:
    """Map full-frame pixel(s) ``(i, j)`` to US-frame millimetres (z = 0).

    Accepts a single pixel or an ``(n, 2)`` array.  Raises :class:`OutsideRoi`
    if any pixel falls outside the ROI box.
    """
    p = np.asarray(pixel, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    roi = intr.roi
    inside = (p[:, 0] >= roi.x) & (p[:, 0] < roi.x + roi.w) & (p[:, 1] >= roi.y) & (p[:, 1] < roi.y + roi.h)
    if not np.all(inside):
        raise OutsideRoi(f"pixel {p[~inside][0].tolist()} outside ROI {roi.as_tuple()}")
    out = np.zeros((len(p), 3))
    out[:, 0] = intr.s_us * (p[:, 0] - roi.x)
    out[:, 1] = intr.s_us * (p[:, 1] - roi.y)
    return out[0] if single else out


def us_to_pixel(intr: UsIntrinsics, point: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pixel_to_us` for in-plane points (z is ignored)."""
    p = np.asarray(point, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    out = np.stack([p[:, 0] / intr.s_us + intr.roi.x, p[:, 1] / intr.s_us + intr.roi.y], axis=1)
    return out[0] if single else out


def crop_to_us(intr: UsIntrinsics, pixel: np.ndarray) -> np.ndarray:
    """Like :func:`pixel_to_us` but for coordinates relative to the ROI crop."""
    p = np.asarray(pixel, dtype=float)
    return pixel_to_us(intr, p + np.array([intr.roi.x, intr.roi.y], dtype=float))
