"""Fiducial pose tracking and the probe extrinsic chain.

Marker rigs are tracked monocularly: corner observations are matched to the
rig model and the rig pose is solved jointly over all visible corners
(Perspective-n-Point, optionally wrapped in RANSAC) and then smoothed with a
1-euro filter.  Kabsch registration of the ledge keypoints gives the image
plane pose inside the calibration phantom, and the extrinsic chain combines
the three into the fixed US-to-probe offset and per-frame US-to-reference
poses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from freehand_us.errors import (
    DegenerateConfiguration,
    FrameMismatch,
    InsufficientConsensus,
    NoConvergence,
    NonMonotonicTimestamp,
    ValidationError,
)
from freehand_us.geom import (
    FrameId,
    RigidTransform,
    UsIntrinsics,
    compose,
    crop_to_us,
    invert,
    mean_transform,
    quat_multiply,
    quat_normalize,
    rotvec_to_quat,
)
from freehand_us.intrinsics import LedgeDetection, LedgePhantomGeometry

# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 1920
    height: int = 1080

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d.get("width", 1920)), int(d.get("height", 1080)))


@dataclass(frozen=True)
class MarkerRigModel:
    """Square fiducials rigidly attached to one tracked object.

    ``corners_rig`` has shape ``(n_markers, 4, 3)`` in mm, in the rig frame.
    """

    marker_ids: tuple[int, ...]
    corners_rig: np.ndarray
    rig_frame: FrameId

    def __post_init__(self) -> None:
        corners = np.asarray(self.corners_rig, dtype=float)
        ids = tuple(int(i) for i in self.marker_ids)
        if corners.shape != (len(ids), 4, 3):
            raise ValidationError(f"corners_rig must be ({len(ids)}, 4, 3), got {corners.shape}")
        if len(set(ids)) != len(ids):
            raise ValidationError("marker ids must be unique")
        frame = FrameId(self.rig_frame)
        pts = corners.reshape(-1, 3)
        rank = np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-6)
        if frame in (FrameId.PROBE, FrameId.CALIB) and rank < 3:
            raise ValidationError(f"{frame.value} rig must be non-planar")
        object.__setattr__(self, "corners_rig", corners)
        object.__setattr__(self, "marker_ids", ids)
        object.__setattr__(self, "rig_frame", frame)

    def corner(self, marker_id: int) -> np.ndarray:
        return self.corners_rig[self.marker_ids.index(marker_id)]

    def to_dict(self) -> dict:
        return {"rig_frame": self.rig_frame.value, "marker_ids": list(self.marker_ids), "corners_rig_mm": self.corners_rig.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> MarkerRigModel:
        return cls(tuple(d["marker_ids"]), np.asarray(d["corners_rig_mm"], float), d["rig_frame"])


@dataclass(frozen=True)
class MarkerDetection:
    marker_id: int
    px: np.ndarray  # (4, 2)


@dataclass(frozen=True)
class CornerObservations:
    timestamp: float
    detections: tuple[MarkerDetection, ...]
    rig: str = "probe"

    def correspondences(self, model: MarkerRigModel) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (3D rig points, 2D pixels) for markers known to ``model``."""
        X, uv = [], []
        for det in self.detections:
            if det.marker_id in model.marker_ids:
                X.append(model.corner(det.marker_id))
                uv.append(np.asarray(det.px, float).reshape(4, 2))
        if not X:
            return np.zeros((0, 3)), np.zeros((0, 2))
        return np.concatenate(X), np.concatenate(uv)

    def to_json(self) -> str:
        markers = [{"id": d.marker_id, "px": np.asarray(d.px).tolist()} for d in self.detections]
        return json.dumps({"t": self.timestamp, "rig": self.rig, "markers": markers}, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> CornerObservations:
        d = json.loads(line)
        dets = tuple(MarkerDetection(int(m["id"]), np.asarray(m["px"], float)) for m in d["markers"])
        return cls(float(d["t"]), dets, d.get("rig", "probe"))


def write_corner_stream(path: str | Path, observations: Iterable[CornerObservations]) -> None:
    with open(path, "w") as fh:
        for obs in observations:
            fh.write(obs.to_json() + "\n")


def read_corner_stream(path: str | Path) -> list[CornerObservations]:
    with open(path) as fh:
        return [CornerObservations.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# projection helpers
# ---------------------------------------------------------------------------


def project(R: np.ndarray, t: np.ndarray, X: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    p = X @ R.T + t
    z = p[:, 2]
    return np.stack([cam.fx * p[:, 0] / z + cam.cx, cam.fy * p[:, 1] / z + cam.cy], axis=1)


def reprojection_errors(pose: RigidTransform, X: np.ndarray, uv: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    p = pose.apply(X)
    bad = p[:, 2] <= 1e-6
    pred = project(pose.rotation, pose.t, X, cam)
    err = np.linalg.norm(pred - uv, axis=1)
    err[bad] = np.inf
    return err


def _normalized(uv: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    return np.stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy], axis=1)


def _spread(X: np.ndarray) -> np.ndarray:
    return np.linalg.svd(X - X.mean(axis=0), compute_uv=False)


def _check_configuration(X: np.ndarray, uv: np.ndarray) -> None:
    if len(X) != len(uv):
        raise ValidationError("model and image point counts differ")
    if len(X) < 4:
        raise DegenerateConfiguration(f"need at least 4 correspondences, got {len(X)}")
    s = _spread(X)
    if s[0] < 1e-9 or s[1] < 1e-9 * max(1.0, s[0]):
        raise DegenerateConfiguration("model points are collinear or coincident")


def _nearest_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def _hartley(pts: np.ndarray) -> np.ndarray:
    dim = pts.shape[1]
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(dim) / d if d > 0 else 1.0
    T = np.eye(dim + 1)
    T[:dim, :dim] *= s
    T[:dim, dim] = -s * c
    return T


def _init_dlt(X: np.ndarray, xn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    T3, T2 = _hartley(X), _hartley(xn)
    Xh = (T3 @ np.c_[X, np.ones(len(X))].T).T
    xh = (T2 @ np.c_[xn, np.ones(len(xn))].T).T
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xh[:, [0]] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xh[:, [1]] * Xh
    P = np.linalg.svd(A)[2][-1].reshape(3, 4)
    P = np.linalg.inv(T2) @ P @ T3
    depth = P[2] @ np.c_[X, np.ones(n)].T
    if np.sum(depth > 0) < n / 2:
        P = -P
    U, S, Vt = np.linalg.svd(P[:, :3])
    R = _nearest_rotation(P[:, :3])
    return R, P[:, 3] / S.mean()


def _init_planar(X: np.ndarray, xn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = X.mean(axis=0)
    _, _, Vt = np.linalg.svd(X - c)
    e1, e2 = Vt[0], Vt[1]
    e3 = np.cross(e1, e2)
    ab = np.stack([(X - c) @ e1, (X - c) @ e2], axis=1)
    Ta, Tx = _hartley(ab), _hartley(xn)
    abh = (Ta @ np.c_[ab, np.ones(len(ab))].T).T
    xh = (Tx @ np.c_[xn, np.ones(len(xn))].T).T
    n = len(X)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = abh
    A[0::2, 6:9] = -xh[:, [0]] * abh
    A[1::2, 3:6] = abh
    A[1::2, 6:9] = -xh[:, [1]] * abh
    H = np.linalg.svd(A)[2][-1].reshape(3, 3)
    H = np.linalg.inv(Tx) @ H @ Ta
    lam = 2.0 / (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
    if H[2, 2] * lam < 0:
        lam = -lam
    r1, r2, tp = lam * H[:, 0], lam * H[:, 1], lam * H[:, 2]
    Rb = _nearest_rotation(np.stack([r1, r2, np.cross(r1, r2)], axis=1))
    B = np.stack([e1, e2, e3], axis=1)
    R = Rb @ B.T
    return R, tp - R @ c


def _init_posit(X: np.ndarray, xn: np.ndarray, iters: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Scaled-orthographic iteration for few non-coplanar points."""
    A = X[1:] - X[0]
    B = np.linalg.pinv(A)
    eps = np.zeros(len(X) - 1)
    R = np.eye(3)
    Z0 = 1.0
    for _ in range(iters):
        xp = xn[1:, 0] * (1 + eps) - xn[0, 0]
        yp = xn[1:, 1] * (1 + eps) - xn[0, 1]
        I, J = B @ xp, B @ yp
        nI, nJ = np.linalg.norm(I), np.linalg.norm(J)
        if nI < 1e-12 or nJ < 1e-12:
            raise DegenerateConfiguration("scaled-orthographic solve collapsed")
        s = math.sqrt(nI * nJ)
        i, j = I / nI, J / nJ
        k = np.cross(i, j)
        k /= np.linalg.norm(k)
        R = _nearest_rotation(np.stack([i, np.cross(k, i), k]))
        Z0 = 1.0 / s
        new_eps = A @ R[2] / Z0
        if np.max(np.abs(new_eps - eps)) < 1e-10:
            eps = new_eps
            break
        eps = new_eps
    p0 = np.array([xn[0, 0] * Z0, xn[0, 1] * Z0, Z0])
    return R, p0 - R @ X[0]


def initial_pose(X: np.ndarray, uv: np.ndarray, cam: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Linear initial pose: homography if planar, DLT if >= 6 points, else POSIT."""
    _check_configuration(X, uv)
    xn = _normalized(uv, cam)
    s = _spread(X)
    if s[2] < 1e-6 * s[0]:
        return _init_planar(X, xn)
    if len(X) >= 6:
        return _init_dlt(X, xn)
    return _init_posit(X, xn)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt refinement
# ---------------------------------------------------------------------------


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _residuals(R, t, X, uv, cam):
    p = X @ R.T + t
    if np.any(p[:, 2] <= 1e-6):
        return None, None
    z = p[:, 2]
    pred = np.stack([cam.fx * p[:, 0] / z + cam.cx, cam.fy * p[:, 1] / z + cam.cy], axis=1)
    return (pred - uv).ravel(), p


def _jacobian(p: np.ndarray, t: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    n = len(p)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = cam.fx / z
    dproj[:, 0, 2] = -cam.fx * x / z**2
    dproj[:, 1, 1] = cam.fy / z
    dproj[:, 1, 2] = -cam.fy * y / z**2
    rx = p - t  # R X
    # d(exp(w) R X)/dw at w=0 is -[RX]x
    dp_dw = np.zeros((n, 3, 3))
    dp_dw[:, 0, 1], dp_dw[:, 0, 2] = rx[:, 2], -rx[:, 1]
    dp_dw[:, 1, 0], dp_dw[:, 1, 2] = -rx[:, 2], rx[:, 0]
    dp_dw[:, 2, 0], dp_dw[:, 2, 1] = rx[:, 1], -rx[:, 0]
    J = np.concatenate([dproj @ dp_dw, dproj], axis=2)
    return J.reshape(2 * n, 6)


@dataclass
class PnPResult:
    pose: RigidTransform
    rms_px: float
    iterations: int
    cost_history: list[float] = field(default_factory=list)


def refine_pose_lm(
    R: np.ndarray,
    t: np.ndarray,
    X: np.ndarray,
    uv: np.ndarray,
    cam: CameraIntrinsics,
    max_iter: int = 100,
    tol: float = 1e-12,
) -> tuple[np.ndarray, np.ndarray, list[float], int]:
    """Minimise squared reprojection error; only cost-decreasing steps are accepted."""
    r, p = _residuals(R, t, X, uv, cam)
    if r is None:
        raise NoConvergence("initial pose places points behind the camera")
    cost = float(r @ r)
    history = [cost]
    J = _jacobian(p, t, cam)
    lam = 1e-3
    for it in range(1, max_iter + 1):
        JtJ = J.T @ J
        g = J.T @ r
        if np.max(np.abs(g)) < 1e-14 * max(1.0, cost) or cost < 1e-24:
            return R, t, history, it
        accepted = False
        while lam < 1e16:
            A = JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-12))
            delta = -np.linalg.solve(A, g)
            R_new = _rotvec_matrix(delta[:3]) @ R
            t_new = t + delta[3:]
            r_new, p_new = _residuals(R_new, t_new, X, uv, cam)
            if r_new is not None and float(r_new @ r_new) < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # no descent direction left: at a local minimum
            return R, t, history, it
        new_cost = float(r_new @ r_new)
        R, t, r, p = _nearest_rotation(R_new), t_new, r_new, p_new
        J = _jacobian(p, t, cam)
        lam = max(lam / 10.0, 1e-12)
        improvement = cost - new_cost
        cost = new_cost
        history.append(cost)
        if improvement <= tol * max(cost, 1e-12) or np.linalg.norm(delta) < 1e-12:
            return R, t, history, it
    raise NoConvergence(f"Levenberg-Marquardt did not converge in {max_iter} iterations")


def _rotvec_matrix(w: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(w)
    if angle < 1e-15:
        return np.eye(3) + _skew(w)
    k = _skew(w / angle)
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k


def solve_pnp_points(
    X: np.ndarray,
    uv: np.ndarray,
    cam: CameraIntrinsics,
    src: FrameId | str = FrameId.PROBE,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    max_iter: int = 100,
) -> PnPResult:
    X = np.asarray(X, float)
    uv = np.asarray(uv, float)
    _check_configuration(X, uv)
    R0, t0 = init if init is not None else initial_pose(X, uv, cam)
    R, t, history, it = refine_pose_lm(R0, t0, X, uv, cam, max_iter=max_iter)
    pose = RigidTransform.from_rt(R, t, src, FrameId.CAM)
    rms = math.sqrt(history[-1] / len(X))
    return PnPResult(pose, rms, it, history)


def solve_pnp(model: MarkerRigModel, obs: CornerObservations, cam: CameraIntrinsics, max_iter: int = 100) -> PnPResult:
    """Rig pose in the camera (rig -> Cam) from all visible marker corners."""
    X, uv = obs.correspondences(model)
    return solve_pnp_points(X, uv, cam, src=model.rig_frame, max_iter=max_iter)


@dataclass
class RansacResult:
    pose: RigidTransform
    inliers: np.ndarray  # indices into the stacked correspondences
    rms_px: float
    iterations: int


def ransac_pnp_points(
    X: np.ndarray,
    uv: np.ndarray,
    cam: CameraIntrinsics,
    reproj_thresh_px: float = 2.0,
    max_iters: int = 200,
    seed: int = 0,
    confidence: float = 0.999,
    src: FrameId | str = FrameId.PROBE,
) -> RansacResult:
    X = np.asarray(X, float)
    uv = np.asarray(uv, float)
    n = len(X)
    if n < 4:
        raise DegenerateConfiguration(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best_inliers: np.ndarray | None = None
    best_key = (-1, np.inf)
    best_pose = None
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        sample = rng.choice(n, 4, replace=False)
        try:
            fit = solve_pnp_points(X[sample], uv[sample], cam, src=src, max_iter=30)
        except (DegenerateConfiguration, NoConvergence, np.linalg.LinAlgError):
            continue
        err = reprojection_errors(fit.pose, X, uv, cam)
        inl = np.nonzero(err < reproj_thresh_px)[0]
        key = (len(inl), float(np.sum(np.minimum(err, reproj_thresh_px))))
        if key[0] > best_key[0] or (key[0] == best_key[0] and key[1] < best_key[1]):
            best_key, best_inliers, best_pose = key, inl, fit.pose
            w = len(inl) / n
            if w >= 1.0:
                needed = it
            elif w > 0:
                needed = int(math.ceil(math.log(1 - confidence) / math.log(1 - w**4)))
    if best_inliers is None or len(best_inliers) < 4:
        raise InsufficientConsensus("no hypothesis gathered 4 inliers")
    inliers = best_inliers
    pose = best_pose
    for _ in range(3):
        fit = solve_pnp_points(X[inliers], uv[inliers], cam, src=src, init=(pose.rotation, pose.t))
        pose = fit.pose
        new = np.nonzero(reprojection_errors(pose, X, uv, cam) < reproj_thresh_px)[0]
        if len(new) < 4 or np.array_equal(new, inliers):
            break
        inliers = new
    rms = float(np.sqrt(np.mean(reprojection_errors(pose, X[inliers], uv[inliers], cam) ** 2)))
    return RansacResult(pose, inliers, rms, it)


def ransac_pnp(
    model: MarkerRigModel,
    obs: CornerObservations,
    cam: CameraIntrinsics,
    reproj_thresh_px: float = 2.0,
    max_iters: int = 200,
    seed: int = 0,
) -> RansacResult:
    """RANSAC over minimal 4-corner samples, refit on the consensus set."""
    X, uv = obs.correspondences(model)
    return ransac_pnp_points(X, uv, cam, reproj_thresh_px, max_iters, seed, src=model.rig_frame)


# ---------------------------------------------------------------------------
# 1-euro filter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OneEuroParams:
    min_cutoff: float = 0.5
    beta: float = 0.007
    d_cutoff: float = 1.0

    def __post_init__(self) -> None:
        if self.min_cutoff <= 0 or self.d_cutoff <= 0 or self.beta < 0:
            raise ValidationError("need min_cutoff > 0, d_cutoff > 0, beta >= 0")


@dataclass(frozen=True)
class OneEuroState:
    value: np.ndarray | None = None  # [tx, ty, tz, qw, qx, qy, qz]
    derivative: np.ndarray | None = None
    timestamp: float | None = None


def smoothing_factor(dt: float, cutoff: float | np.ndarray) -> float | np.ndarray:
    tau = 1.0 / (2.0 * math.pi * cutoff)
    return 1.0 / (1.0 + tau / dt)


def one_euro_vector(
    state: OneEuroState, params: OneEuroParams, x: np.ndarray, t: float
) -> tuple[OneEuroState, np.ndarray]:
    """Component-wise 1-euro step on an arbitrary vector signal."""
    x = np.asarray(x, dtype=float)
    if state.value is None:
        return OneEuroState(x.copy(), np.zeros_like(x), float(t)), x.copy()
    dt = float(t) - state.timestamp
    if not dt > 0:
        raise NonMonotonicTimestamp(f"timestamp {t} does not follow {state.timestamp}")
    dx = (x - state.value) / dt
    a_d = smoothing_factor(dt, params.d_cutoff)
    dx_hat = a_d * dx + (1 - a_d) * state.derivative
    cutoff = params.min_cutoff + params.beta * np.abs(dx_hat)
    a = smoothing_factor(dt, cutoff)
    x_hat = a * x + (1 - a) * state.value
    return OneEuroState(x_hat, dx_hat, float(t)), x_hat


def one_euro_step(
    state: OneEuroState, params: OneEuroParams, pose: RigidTransform, t: float
) -> tuple[OneEuroState, RigidTransform]:
    """Filter a pose: translation per axis, rotation on hemisphere-aligned quaternion components."""
    q = pose.quat.copy()
    if state.value is not None and float(np.dot(q, state.value[3:])) < 0:
        q = -q
    new_state, x_hat = one_euro_vector(state, params, np.concatenate([pose.t, q]), t)
    q_hat = quat_normalize(x_hat[3:])
    if float(np.dot(q_hat, x_hat[3:])) < 0:
        q_hat = -q_hat
    # keep the renormalised quaternion as filter memory
    value = np.concatenate([x_hat[:3], q_hat])
    new_state = OneEuroState(value, new_state.derivative, new_state.timestamp)
    return new_state, RigidTransform(q_hat, x_hat[:3], pose.src, pose.dst)


class OneEuroPoseFilter:
    """Stateful convenience wrapper around :func:`one_euro_step`."""

    def __init__(self, params: OneEuroParams | None = None):
        self.params = params or OneEuroParams()
        self.state = OneEuroState()

    def __call__(self, pose: RigidTransform, t: float) -> RigidTransform:
        self.state, out = one_euro_step(self.state, self.params, pose, t)
        return out


def filter_pose_track(
    poses: Sequence[RigidTransform], times: Sequence[float], params: OneEuroParams | None = None
) -> list[RigidTransform]:
    f = OneEuroPoseFilter(params)
    return [f(p, t) for p, t in zip(poses, times)]


# ---------------------------------------------------------------------------
# Kabsch and the extrinsic chain
# ---------------------------------------------------------------------------


def kabsch(
    P: np.ndarray, Q: np.ndarray, src: FrameId | str = FrameId.REF, dst: FrameId | str = FrameId.REF
) -> RigidTransform:
    """Least-squares rigid transform mapping points ``P`` onto ``Q``."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise ValidationError("P and Q must both be (n, 3)")
    if len(P) < 3:
        raise DegenerateConfiguration("need at least 3 point pairs")
    s = _spread(P)
    if s[0] < 1e-9 or s[1] < 1e-9 * max(1.0, s[0]):
        raise DegenerateConfiguration("source points are collinear or coincident")
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    H = (P - cp).T @ (Q - cq)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform.from_rt(R, cq - R @ cp, src, dst)


def compute_T_calib_us(
    detection: LedgeDetection | Sequence[LedgeDetection], intr: UsIntrinsics, geometry: LedgePhantomGeometry
) -> RigidTransform:
    """Image-plane pose in the phantom (US -> Calib) from ledge keypoints.

    Several detections of a static probe may be passed; their keypoints are
    registered jointly.
    """
    dets = [detection] if isinstance(detection, LedgeDetection) else list(detection)
    P = np.concatenate([crop_to_us(intr, d.keypoints_px) for d in dets])
    Q = np.concatenate([geometry.keypoints_calib] * len(dets))
    return kabsch(P, Q, FrameId.US, FrameId.CALIB)


def _expect(t: RigidTransform, src: FrameId, dst: FrameId, name: str) -> None:
    if t.src != src or t.dst != dst:
        raise FrameMismatch(f"{name} must map {src.value}->{dst.value}, got {t.src.value}->{t.dst.value}")


def compute_T_us_probe(
    T_calib_us: RigidTransform, T_calib_cam: RigidTransform, T_probe_cam: RigidTransform
) -> RigidTransform:
    """Fixed probe offset ``T^US_Probe = (T^Calib_US)^-1 T^Calib_Cam (T^Probe_Cam)^-1``.

    Inputs follow the ``T^A_B: B -> A`` convention, so ``T_calib_cam`` maps
    Cam -> Calib (the inverse of a PnP result).  The result maps Probe -> US.
    """
    _expect(T_calib_us, FrameId.US, FrameId.CALIB, "T_calib_us")
    _expect(T_calib_cam, FrameId.CAM, FrameId.CALIB, "T_calib_cam")
    _expect(T_probe_cam, FrameId.CAM, FrameId.PROBE, "T_probe_cam")
    return compose(compose(invert(T_calib_us), T_calib_cam), invert(T_probe_cam))


def compute_T_us_ref(
    T_probe_cam: RigidTransform, T_us_probe: RigidTransform, T_ref_cam: RigidTransform
) -> RigidTransform:
    """``T^US_Ref = T^US_Cam (T^Ref_Cam)^-1`` with ``T^US_Cam = T^US_Probe T^Probe_Cam``.

    The result maps Ref -> US; invert it to place image points in Ref.
    """
    _expect(T_probe_cam, FrameId.CAM, FrameId.PROBE, "T_probe_cam")
    _expect(T_us_probe, FrameId.PROBE, FrameId.US, "T_us_probe")
    _expect(T_ref_cam, FrameId.CAM, FrameId.REF, "T_ref_cam")
    return compose(compose(T_us_probe, T_probe_cam), invert(T_ref_cam))


def extrinsics_from_observations(
    T_calib_us: RigidTransform,
    calib_obs: Sequence[CornerObservations],
    probe_obs: Sequence[CornerObservations],
    calib_rig: MarkerRigModel,
    probe_rig: MarkerRigModel,
    cam: CameraIntrinsics,
    reproj_thresh_px: float = 2.0,
    seed: int = 0,
) -> RigidTransform:
    """Average ``T^US_Probe`` over synchronised calib/probe observation pairs."""
    estimates = []
    for k, (oc, op) in enumerate(zip(calib_obs, probe_obs)):
        cam_from_calib = ransac_pnp(calib_rig, oc, cam, reproj_thresh_px, seed=seed + 2 * k).pose
        cam_from_probe = ransac_pnp(probe_rig, op, cam, reproj_thresh_px, seed=seed + 2 * k + 1).pose
        estimates.append(compute_T_us_probe(T_calib_us, invert(cam_from_calib), invert(cam_from_probe)))
    if not estimates:
        raise ValidationError("no observation pairs supplied")
    return mean_transform(estimates)


def random_rotation_quat(rng: np.random.Generator) -> np.ndarray:
    return quat_normalize(rng.normal(size=4))


def perturb(pose: RigidTransform, sigma_t: float, sigma_r_deg: float, rng: np.random.Generator) -> RigidTransform:
    """Rotate by a random small angle about the pose origin, then jitter the translation."""
    dq = rotvec_to_quat(rng.normal(scale=math.radians(sigma_r_deg), size=3))
    return RigidTransform(quat_multiply(dq, pose.quat), pose.t + rng.normal(scale=sigma_t, size=3), pose.src, pose.dst)
