"""Two-level ultrasound rendering, the threshold segmentation oracle and screen synthesis."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from freehand_us.errors import EmptyMask, FrameMismatch
from freehand_us.geom import FrameId, RigidTransform, RoiBox, UsIntrinsics
from freehand_us.intrinsics import LedgePhantomGeometry

INSIDE_LEVEL = 20.0
OUTSIDE_LEVEL = 160.0
SEGMENT_THRESHOLD = 90


def as_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def speckle_field(shape: tuple[int, int], sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-mean log-normal multiplicative noise; all ones when ``sigma == 0``."""
    if sigma <= 0:
        return np.ones(shape)
    return np.exp(sigma * rng.standard_normal(shape) - 0.5 * sigma**2)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def roi_points_us(intr: UsIntrinsics) -> np.ndarray:
    """US-frame coordinates of every ROI pixel, row-major."""
    rr, cc = np.mgrid[0 : intr.roi.h, 0 : intr.roi.w]
    return np.stack([intr.s_us * cc.ravel(), intr.s_us * rr.ravel(), np.zeros(rr.size)], axis=1)


def inside_mask(shape, plane_pose: RigidTransform, intr: UsIntrinsics) -> np.ndarray:
    """Analytic cross-section: ROI pixels whose centre lies inside ``shape``."""
    if plane_pose.src != FrameId.US or plane_pose.dst != FrameId.REF:
        raise FrameMismatch("plane pose must map US->Ref")
    return shape.contains(plane_pose.apply(roi_points_us(intr))).reshape(intr.roi.h, intr.roi.w)


def render_us_frame(
    shape,
    plane_pose: RigidTransform,
    intr: UsIntrinsics,
    speckle: float = 0.1,
    seed: int | np.random.Generator | None = 0,
) -> np.ndarray:
    """ROI-sized anechoic rendering: dark inside ``shape``, bright outside, with speckle."""
    inside = inside_mask(shape, plane_pose, intr)
    base = np.where(inside, INSIDE_LEVEL, OUTSIDE_LEVEL)
    return to_uint8(base * speckle_field(base.shape, speckle, as_rng(seed)))


def threshold_segment(image: np.ndarray, threshold: float = SEGMENT_THRESHOLD) -> np.ndarray:
    """Pixels below ``threshold``, restricted to the largest 8-connected component."""
    dark = np.asarray(image) < threshold
    labels, n = ndimage.label(dark, structure=np.ones((3, 3), bool))
    if n == 0:
        raise EmptyMask("no pixel below the segmentation threshold")
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


# ---------------------------------------------------------------------------
# ledge phantom
# ---------------------------------------------------------------------------


def _coverage(centers: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Overlap of unit pixels centred at ``centers`` with the interval ``[lo, hi]``."""
    return np.clip(np.minimum(centers + 0.5, hi) - np.maximum(centers - 0.5, lo), 0.0, 1.0)


def render_ledge_image(
    geometry: LedgePhantomGeometry,
    intr: UsIntrinsics,
    gain: float = 1.0,
    speckle: float = 0.3,
    seed: int | np.random.Generator | None = 0,
    thickness_mm: float = 0.5,
    reverberation: bool = True,
) -> np.ndarray:
    """ROI crop of a probe seated in the ledge phantom.

    Each ledge is a bright band centred at its depth and spanning its lateral
    offsets, antialiased by exact pixel-area coverage.  A faint reverberation
    of L1 appears at twice its depth.
    """
    rng = as_rng(seed)
    h, w, s = intr.roi.h, intr.roi.w, intr.s_us
    rows, cols = np.arange(h, dtype=float), np.arange(w, dtype=float)
    bands = []
    for depth, (start, stop) in zip(geometry.ledge_depths, geometry.edge_offsets):
        bands.append((depth, start, stop, 1.0))
    if reverberation:
        d1, (a1, b1) = geometry.ledge_depths[0], geometry.edge_offsets[0]
        bands.append((2 * d1, a1, b1, 0.3))
    bright = np.zeros((h, w))
    half = 0.5 * thickness_mm / s
    for depth, start, stop, weight in bands:
        cr = _coverage(rows, depth / s - half, depth / s + half)
        cc = _coverage(cols, start / s, stop / s)
        bright = np.maximum(bright, weight * np.outer(cr, cc))
    tissue = 60.0 * speckle_field((h, w), speckle, rng)
    ledge = 230.0 * speckle_field((h, w), 0.5 * speckle, rng)
    return to_uint8(gain * (tissue + bright * (ledge - tissue)))


# ---------------------------------------------------------------------------
# machine screen
# ---------------------------------------------------------------------------


def live_tissue(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """A fresh speckled tissue texture, as seen while scanning."""
    return to_uint8(90.0 * speckle_field(shape, 0.5, rng))


class ScreenLayout:
    """Static screen chrome plus small blinking widgets around a live viewport."""

    def __init__(self, frame_shape: tuple[int, int], roi: RoiBox, seed: int | np.random.Generator | None = 0, n_blinkers: int = 3):
        rng = as_rng(seed)
        self.frame_shape = frame_shape
        self.roi = roi
        H, W = frame_shape
        static = np.zeros(frame_shape)
        # text-like static labels
        for _ in range(12):
            bh, bw = rng.integers(6, 12), rng.integers(20, 80)
            y, x = rng.integers(0, H - bh), rng.integers(0, W - bw)
            static[y : y + bh, x : x + bw] = rng.integers(100, 220) * (rng.random((bh, bw)) > 0.5)
        self.static = static
        self.blinkers = []
        keep_out = (roi.x - 4, roi.y - 4, roi.x + roi.w + 4, roi.y + roi.h + 4)
        tries = 0
        while len(self.blinkers) < n_blinkers and tries < 1000:
            tries += 1
            bh, bw = int(rng.integers(6, 12)), int(rng.integers(8, 40))
            y, x = int(rng.integers(0, H - bh)), int(rng.integers(0, W - bw))
            if x + bw > keep_out[0] and x < keep_out[2] and y + bh > keep_out[1] and y < keep_out[3]:
                continue
            self.blinkers.append((y, x, bh, bw))

    def compose(self, viewport: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
        """Full screen frame ``k`` with ``viewport`` (ROI-sized) pasted into the ROI."""
        frame = self.static.copy()
        for y, x, bh, bw in self.blinkers:
            # clocks tick, cursors blink
            frame[y : y + bh, x : x + bw] = 200.0 * (rng.random((bh, bw)) > 0.5) if k % 2 else 0.0
        r = self.roi
        frame[r.y : r.y + r.h, r.x : r.x + r.w] = viewport
        return to_uint8(frame)


def render_screen_sequence(
    frame_shape: tuple[int, int], roi: RoiBox, n_frames: int = 30, seed: int | np.random.Generator | None = 0
) -> list[np.ndarray]:
    """Machine-screen frames while scanning: live viewport plus blinking UI."""
    rng = as_rng(seed)
    layout = ScreenLayout(frame_shape, roi, rng)
    return [layout.compose(live_tissue((roi.h, roi.w), rng), k, rng) for k in range(n_frames)]


def embed_in_screen(viewport: np.ndarray, frame_shape: tuple[int, int], roi: RoiBox) -> np.ndarray:
    frame = np.zeros(frame_shape, dtype=np.uint8)
    frame[roi.y : roi.y + roi.h, roi.x : roi.x + roi.w] = viewport
    return frame
