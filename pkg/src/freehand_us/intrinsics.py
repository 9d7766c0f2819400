"""Ultrasound intrinsic calibration from raw screen captures.

Two stages: the active viewport (ROI) is located from temporal pixel activity
over a short screen recording, then the millimetre-per-pixel scale is
recovered from frames of the ledge phantom, whose three horizontal ledges
appear as bright lines at known depths.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from skimage.transform import hough_line, hough_line_peaks

from freehand_us.errors import (
    DimensionMismatch,
    FreehandError,
    NoActiveRegion,
    NoLines,
    NoValidTriplet,
    SnapDivergence,
    TooFewFrames,
    ValidationError,
)
from freehand_us.geom import ADMISSIBLE_DEPTHS_MM, RigidTransform, RoiBox, UsIntrinsics

logger = logging.getLogger(__name__)

MIN_SCREEN_FRAMES = 10
MIN_SCALE_ESTIMATES = 5
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ActivityMap:
    values: np.ndarray
    binary: np.ndarray
    threshold: float


@dataclass(frozen=True)
class LedgePhantomGeometry:
    """Known geometry of the three-ledge calibration phantom.

    Attributes:
        ledge_depths: depths of L1, L2, L3 below the transducer face (mm),
            strictly increasing.
        edge_offsets: ``(3, 2)`` lateral ``[start, stop]`` of each ledge (mm),
            measured in the image-plane coordinates of a seated probe.
        keypoints_calib: ``(4, 3)`` Calib-frame positions of the keypoints in
            the order (L1 start, L1 stop, L2 stop, L3 start).
    """

    ledge_depths: np.ndarray
    edge_offsets: np.ndarray
    keypoints_calib: np.ndarray

    def __post_init__(self) -> None:
        depths = np.asarray(self.ledge_depths, dtype=float).reshape(3)
        offsets = np.asarray(self.edge_offsets, dtype=float).reshape(3, 2)
        kps = np.asarray(self.keypoints_calib, dtype=float).reshape(4, 3)
        if not np.all(np.diff(depths) > 0):
            raise ValidationError("ledge depths must be strictly increasing")
        if np.any(offsets[:, 1] <= offsets[:, 0]):
            raise ValidationError("each ledge needs start < stop")
        centred = kps - kps.mean(axis=0)
        if np.linalg.matrix_rank(centred, tol=1e-6) < 2:
            raise ValidationError("keypoints must span a 2D configuration")
        object.__setattr__(self, "ledge_depths", depths)
        object.__setattr__(self, "edge_offsets", offsets)
        object.__setattr__(self, "keypoints_calib", kps)

    @property
    def spacing_ratio(self) -> float:
        d = self.ledge_depths
        return float((d[1] - d[0]) / (d[2] - d[1]))

    def keypoints_slot(self) -> np.ndarray:
        """Keypoints in the image-plane coordinates of a seated probe (z = 0)."""
        d, e = self.ledge_depths, self.edge_offsets
        return np.array(
            [[e[0, 0], d[0], 0.0], [e[0, 1], d[0], 0.0], [e[1, 1], d[1], 0.0], [e[2, 0], d[2], 0.0]]
        )

    @classmethod
    def from_slot(cls, ledge_depths, edge_offsets, calib_from_slot: RigidTransform) -> LedgePhantomGeometry:
        tmp = cls(ledge_depths, edge_offsets, np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float))
        return cls(tmp.ledge_depths, tmp.edge_offsets, calib_from_slot.apply(tmp.keypoints_slot()))

    def to_dict(self) -> dict:
        return {
            "ledge_depths_mm": self.ledge_depths.tolist(),
            "edge_offsets_mm": self.edge_offsets.tolist(),
            "keypoints_calib_mm": self.keypoints_calib.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> LedgePhantomGeometry:
        return cls(d["ledge_depths_mm"], d["edge_offsets_mm"], d["keypoints_calib_mm"])

    @classmethod
    def from_file(cls, path: str | Path) -> LedgePhantomGeometry:
        return cls.from_dict(load_config(path))


@dataclass(frozen=True)
class Line:
    """A near-horizontal line in ROI-crop pixel coordinates."""

    row: float  # row at the image's centre column
    slope: float  # d(row)/d(col)
    col_start: float
    col_stop: float
    score: float
    center_col: float

    def row_at(self, col: float) -> float:
        return self.row + (col - self.center_col) * self.slope

    def scaled(self, k: float) -> Line:
        return Line(self.row * k, self.slope, self.col_start * k, self.col_stop * k, self.score, self.center_col * k)


@dataclass(frozen=True)
class LedgeDetection:
    """Matched ledge triplet; keypoints are in ROI-crop pixel coordinates."""

    lines: tuple[Line, Line, Line]
    keypoints_px: np.ndarray
    scale_estimate: float


# ---------------------------------------------------------------------------
# ROI
# ---------------------------------------------------------------------------


def _stack(frames: Sequence[np.ndarray]) -> np.ndarray:
    shapes = {np.shape(f) for f in frames}
    if len(shapes) > 1:
        raise DimensionMismatch(f"frames have differing shapes {sorted(shapes)}")
    stack = np.asarray(frames, dtype=float)
    if stack.ndim != 3:
        raise DimensionMismatch("frames must be 2D grayscale images")
    return stack


def compute_activity_map(
    frames: Sequence[np.ndarray], low_pct: float = 5.0, high_pct: float = 95.0, threshold: float = 5.0
) -> ActivityMap:
    """Per-pixel temporal standard deviation after percentile clipping."""
    if len(frames) < MIN_SCREEN_FRAMES:
        raise TooFewFrames(f"need at least {MIN_SCREEN_FRAMES} frames, got {len(frames)}")
    if not 0 <= low_pct < high_pct <= 100:
        raise ValidationError("need 0 <= low_pct < high_pct <= 100")
    stack = _stack(frames)
    lo, hi = np.percentile(stack, [low_pct, high_pct], axis=0)
    values = np.clip(stack, lo, hi).std(axis=0)
    return ActivityMap(values, values > threshold, threshold)


def fit_roi(activity: ActivityMap | np.ndarray, min_area_frac: float = 0.01) -> RoiBox:
    """Bounding box of the largest 8-connected active component.

    Components smaller than ``min_area_frac`` of the frame are ignored.
    """
    binary = activity.binary if isinstance(activity, ActivityMap) else np.asarray(activity, dtype=bool)
    labels, n = ndimage.label(binary, structure=EIGHT_CONNECTED)
    if n == 0:
        raise NoActiveRegion("activity map has no active pixels")
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes))
    if sizes[best] < min_area_frac * binary.size:
        raise NoActiveRegion("no active component above the minimum area")
    sl = ndimage.find_objects(labels)[best]
    return RoiBox(sl[1].start, sl[0].start, sl[1].stop - sl[1].start, sl[0].stop - sl[0].start)


# ---------------------------------------------------------------------------
# ledge lines
# ---------------------------------------------------------------------------


def enhance_horizontal(image: np.ndarray, kernel_len: int = 15, background: int = 21) -> np.ndarray:
    """Horizontal 1 x k mean minus a taller local-background mean, clipped at 0."""
    img = np.asarray(image, dtype=float)
    line = ndimage.uniform_filter(img, size=(1, kernel_len), mode="nearest")
    bg = ndimage.uniform_filter(img, size=(background, kernel_len), mode="nearest")
    return np.clip(line - bg, 0.0, None)


def _extent(response: np.ndarray, row: float, slope: float, center: float) -> tuple[float, float]:
    """Half-maximum crossings of the line response along the line."""
    h, w = response.shape
    cols = np.arange(w)
    rows = row + (cols - center) * slope
    r0 = np.rint(rows).astype(int)
    band = np.stack([response[np.clip(r0 + k, 0, h - 1), cols] for k in (-1, 0, 1)])
    prof = ndimage.median_filter(band.max(axis=0), size=5, mode="nearest")
    peak = prof.max()
    if peak <= 0:
        return 0.0, float(w - 1)
    above = prof >= 0.5 * peak
    lab, n = ndimage.label(above)
    sizes = np.bincount(lab.ravel())[1:]
    run = np.nonzero(lab == int(np.argmax(sizes)) + 1)[0]
    a, b = int(run[0]), int(run[-1])
    half = 0.5 * peak

    def cross(i_out: int, i_in: int) -> float:
        if i_out < 0 or i_out >= w:
            return float(i_in)
        lo, hi = prof[i_out], prof[i_in]
        if hi == lo:
            return float(i_in)
        return i_out + (half - lo) / (hi - lo) * (i_in - i_out)

    return cross(a - 1, a), cross(b + 1, b)


def detect_ledge_lines(
    us_image: np.ndarray,
    kernel_len: int = 15,
    background: int = 21,
    angle_window_deg: float = 5.0,
    angle_step_deg: float = 0.25,
    response_frac: float = 0.4,
    min_response: float = 10.0,
    min_votes: int | None = None,
    min_separation_px: int = 6,
    max_lines: int = 10,
) -> list[Line]:
    """Candidate near-horizontal lines, sorted by Hough accumulator score.

    The image is line-enhanced, thresholded at ``response_frac`` of its peak
    response (and never below ``min_response``), and passed to a Hough
    transform limited to ``+-angle_window_deg`` around horizontal.
    """
    img = np.asarray(us_image, dtype=float)
    h, w = img.shape
    response = enhance_horizontal(img, kernel_len, background)
    peak = float(response.max())
    edges = response > max(min_response, response_frac * peak)
    if min_votes is None:
        min_votes = max(20, int(0.1 * w))
    if edges.sum() < min_votes:
        raise NoLines("no line-like structure in image")
    n_theta = int(round(2 * angle_window_deg / angle_step_deg)) + 1
    thetas = np.deg2rad(90.0 + np.linspace(-angle_window_deg, angle_window_deg, n_theta))
    acc, th, dist = hough_line(edges, theta=thetas)
    scores, angles, rhos = hough_line_peaks(
        acc, th, dist, min_distance=min_separation_px, min_angle=n_theta, threshold=min_votes, num_peaks=max_lines
    )
    center = (w - 1) / 2.0
    lines = []
    for score, theta, rho in zip(scores, angles, rhos):
        slope = -np.cos(theta) / np.sin(theta)
        row_c = (rho - center * np.cos(theta)) / np.sin(theta)
        row_c = _refine_centroid(response, row_c, slope, center)
        start, stop = _extent(response, row_c, slope, center)
        lines.append(Line(float(row_c), float(slope), start, stop, float(score), center))
    if len(lines) < 3:
        raise NoLines(f"only {len(lines)} candidate lines above the accumulator threshold")
    return sorted(lines, key=lambda ln: -ln.score)


def _refine_centroid(response: np.ndarray, row: float, slope: float, center: float, half: int = 4) -> float:
    """Sub-pixel line position: response-weighted centroid across the line."""
    h, w = response.shape
    cols = np.arange(w)
    line_rows = row + (cols - center) * slope
    base = np.rint(line_rows).astype(int)
    offs = np.arange(-half, half + 1)
    rr = base[None, :] + offs[:, None]
    vals = np.where((rr >= 0) & (rr < h), response[np.clip(rr, 0, h - 1), cols[None, :]], 0.0)
    total = vals.sum()
    if total <= 0:
        return float(row)
    # mean offset of response mass from the ideal line, over all columns
    resid = (rr - line_rows[None, :]) * vals
    return float(row + resid.sum() / total)


def find_ledge_triplet(lines: Sequence[Line], geometry: LedgePhantomGeometry, ratio_tol: float = 0.05) -> LedgeDetection:
    """Pick the line triple whose spacing ratio best matches the phantom.

    Keypoints: both ends of L1, the stop end of L2 and the start end of L3.
    """
    if len(lines) < 3:
        raise NoValidTriplet("need at least 3 candidate lines")
    ordered = sorted(lines, key=lambda ln: ln.row)
    target = geometry.spacing_ratio
    best = None
    for a, b, c in itertools.combinations(ordered, 3):
        lower, upper = b.row - a.row, c.row - b.row
        if lower <= 0 or upper <= 0:
            continue
        err = abs((lower / upper) / target - 1.0)
        if err > ratio_tol:
            continue
        key = (err, -(a.score + b.score + c.score))
        if best is None or key < best[0]:
            best = (key, (a, b, c))
    if best is None:
        raise NoValidTriplet("no line triple matches the phantom spacing ratio")
    l1, l2, l3 = best[1]
    kp = np.array(
        [
            [l1.col_start, l1.row_at(l1.col_start)],
            [l1.col_stop, l1.row_at(l1.col_stop)],
            [l2.col_stop, l2.row_at(l2.col_stop)],
            [l3.col_start, l3.row_at(l3.col_start)],
        ]
    )
    d = geometry.ledge_depths
    scale = float((d[2] - d[0]) / (l3.row - l1.row))
    return LedgeDetection((l1, l2, l3), kp, scale)


def pool_and_snap_scale(
    per_frame_scales: Sequence[float], h_roi: int, depths: Sequence[float] = ADMISSIBLE_DEPTHS_MM, max_rel_dev: float = 0.1
) -> float:
    """Median-pool scale estimates and snap the imaging depth to the admissible set."""
    s = np.asarray(per_frame_scales, dtype=float)
    if len(s) < MIN_SCALE_ESTIMATES:
        raise TooFewFrames(f"need at least {MIN_SCALE_ESTIMATES} scale estimates, got {len(s)}")
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise ValidationError("scale estimates must be positive")
    depth = float(np.median(s)) * h_roi
    allowed = np.asarray(depths, dtype=float)
    snapped = float(allowed[np.argmin(np.abs(allowed - depth))])
    if abs(depth - snapped) > max_rel_dev * snapped:
        raise SnapDivergence(f"pooled depth {depth:.3f} mm is not within {max_rel_dev:.0%} of {snapped} mm")
    return snapped / h_roi


def calibrate_intrinsics(
    screen_frames: Sequence[np.ndarray],
    phantom_frames: Sequence[np.ndarray],
    geometry: LedgePhantomGeometry,
    *,
    activity_threshold: float = 5.0,
    min_area_frac: float = 0.01,
    ratio_tol: float = 0.05,
) -> tuple[UsIntrinsics, list[LedgeDetection]]:
    """ROI from ``screen_frames``, scale from ``phantom_frames``.

    Frames where no valid triplet is found are skipped; if none succeed, the
    error of the first frame is re-raised.
    """
    roi = fit_roi(compute_activity_map(screen_frames, threshold=activity_threshold), min_area_frac)
    detections: list[LedgeDetection] = []
    first_error: FreehandError | None = None
    for k, frame in enumerate(phantom_frames):
        crop = roi.crop(np.asarray(frame))
        try:
            detections.append(find_ledge_triplet(detect_ledge_lines(crop), geometry, ratio_tol))
        except (NoLines, NoValidTriplet) as exc:
            logger.debug("phantom frame %d rejected: %s", k, exc)
            first_error = first_error or exc
    if not detections:
        assert first_error is not None
        raise first_error
    s_us = pool_and_snap_scale([d.scale_estimate for d in detections], roi.h)
    frame_shape = np.shape(screen_frames[0])
    return UsIntrinsics(s_us, roi, frame_shape=(int(frame_shape[0]), int(frame_shape[1]))), detections


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        with open(path, "rb") as fh:
            try:
                return tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ValidationError(f"{path}: {exc}") from exc
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def read_frame(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG or PGM frame."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def read_frames(directory: str | Path, pattern: str = "*.png") -> list[np.ndarray]:
    paths = sorted(Path(directory).glob(pattern))
    if not paths and pattern == "*.png":
        paths = sorted(Path(directory).glob("*.pgm"))
    return [read_frame(p) for p in paths]
