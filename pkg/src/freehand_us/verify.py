"""Mesh/image-plane verification and calibration reproducibility.

The reconstructed mesh is intersected with an image plane through its signed
distance field, giving a predicted cross-section that can be overlaid on the
live frame and scored against a segmentation with the Dice coefficient.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from freehand_us.errors import DimensionMismatch, FrameMismatch, OpenMesh, TooFewRuns, ValidationError
from freehand_us.geom import FrameId, RigidTransform, UsIntrinsics, invert, pixel_to_us
from freehand_us.recon import TriMesh

# Fixed, deliberately skewed ray directions for the parity vote.
_RAY_DIRECTIONS = np.array(
    [
        [0.5773, 0.5774, 0.5775],
        [-0.2673, 0.8018, -0.5347],
        [0.8165, -0.4082, -0.4083],
    ]
)
_RAY_DIRECTIONS = _RAY_DIRECTIONS / np.linalg.norm(_RAY_DIRECTIONS, axis=1, keepdims=True)


@dataclass(frozen=True)
class SliceMask:
    mask: np.ndarray
    plane_pose: RigidTransform
    provenance: str = "predicted"

    def __post_init__(self) -> None:
        if self.provenance not in ("predicted", "ground_truth", "segmented"):
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))


@dataclass(frozen=True)
class CalibrationRun:
    """One calibration result; ``T_us_probe`` maps Probe -> US."""

    T_us_probe: RigidTransform
    intr: UsIntrinsics
    run_id: str = ""
    setting: str = ""

    def __post_init__(self) -> None:
        if self.T_us_probe.src != FrameId.PROBE or self.T_us_probe.dst != FrameId.US:
            raise FrameMismatch("T_us_probe must map Probe->US")


# ---------------------------------------------------------------------------
# signed distance
# ---------------------------------------------------------------------------


def point_triangle_distance_sq(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared distance between paired rows of points and triangles (Ericson's region test)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    closest = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(cond, value):
        sel = cond & ~done
        closest[sel] = value[sel] if value.ndim == 2 else value
        done[sel] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        assign(np.ones(len(p), bool), a + ab * v[:, None] + ac * w[:, None])
    diff = p - closest
    return np.einsum("ij,ij->i", diff, diff)


def unsigned_distance(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Exact distance to the nearest triangle, pruned with k-d trees."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    a, b, c = mesh.corners
    centroids = (a + b + c) / 3.0
    rad = np.max(np.stack([np.linalg.norm(x - centroids, axis=1) for x in (a, b, c)]), axis=0)
    d_vertex, _ = cKDTree(mesh.vertices).query(pts)
    tree = cKDTree(centroids)
    candidates = tree.query_ball_point(pts, d_vertex + rad.max() + 1e-9)
    counts = np.array([len(cand) for cand in candidates])
    tri = np.concatenate([np.asarray(cand, dtype=np.int64) for cand in candidates]) if counts.sum() else np.zeros(0, np.int64)
    owner = np.repeat(np.arange(len(pts)), counts)
    best = d_vertex**2
    chunk = 2_000_000
    for s in range(0, len(tri), chunk):
        o, t = owner[s : s + chunk], tri[s : s + chunk]
        d2 = point_triangle_distance_sq(pts[o], a[t], b[t], c[t])
        np.minimum.at(best, o, d2)
    return np.sqrt(best)


def _ray_crossings(mesh: TriMesh, points: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Number of triangles hit by the ray ``p + s * direction`` for ``s > 0``."""
    d = direction
    u = np.cross(d, [1.0, 0.0, 0.0] if abs(d[0]) < 0.9 else [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    w = np.cross(d, u)
    basis = np.stack([u, w], axis=1)
    a, b, c = (x @ basis for x in mesh.corners)
    da, db, dc = (x @ d for x in mesh.corners)
    p2 = points @ basis
    pd = points @ d

    lo = np.minimum(np.minimum(a, b), c)
    hi = np.maximum(np.maximum(a, b), c)
    cell = max(float(np.median(hi - lo)) * 2.0, 1e-6)
    origin = np.minimum(lo.min(axis=0), p2.min(axis=0)) - cell
    nx, ny = (np.maximum(hi.max(axis=0), p2.max(axis=0)) - origin) // cell + 2
    nx, ny = int(nx), int(ny)
    ilo = ((lo - origin) // cell).astype(np.int64)
    ihi = ((hi - origin) // cell).astype(np.int64)

    # triangle -> covered cells, as (cell id, triangle id) pairs
    spans = (ihi - ilo + 1)
    n_cells = spans[:, 0] * spans[:, 1]
    tri_ids = np.repeat(np.arange(len(a)), n_cells)
    local = np.arange(n_cells.sum()) - np.repeat(np.cumsum(n_cells) - n_cells, n_cells)
    cx = ilo[tri_ids, 0] + local % spans[tri_ids, 0]
    cy = ilo[tri_ids, 1] + local // spans[tri_ids, 0]
    cell_ids = cx * ny + cy
    order = np.argsort(cell_ids, kind="stable")
    cell_sorted, tri_sorted = cell_ids[order], tri_ids[order]
    starts = np.searchsorted(cell_sorted, np.arange(nx * ny))
    ends = np.searchsorted(cell_sorted, np.arange(nx * ny), side="right")

    pc = ((p2 - origin) // cell).astype(np.int64)
    pcell = pc[:, 0] * ny + pc[:, 1]
    counts = ends[pcell] - starts[pcell]
    owner = np.repeat(np.arange(len(points)), counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tri = tri_sorted[np.repeat(starts[pcell], counts) + offs]

    q = p2[owner]
    A, B, C = a[tri], b[tri], c[tri]
    v0, v1, v2 = B - A, C - A, q - A
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = (v2[:, 0] * v1[:, 1] - v1[:, 0] * v2[:, 1]) / den
        gamma = (v0[:, 0] * v2[:, 1] - v2[:, 0] * v0[:, 1]) / den
    alpha = 1.0 - beta - gamma
    inside = (np.abs(den) > 1e-15) & (alpha >= 0) & (beta >= 0) & (gamma >= 0)
    depth = alpha * da[tri] + beta * db[tri] + gamma * dc[tri]
    hit = inside & (depth > pd[owner])
    return np.bincount(owner[hit], minlength=len(points))


def inside_mesh(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Inside test by ray parity, majority vote over three fixed directions."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    votes = sum((_ray_crossings(mesh, pts, d) % 2).astype(int) for d in _RAY_DIRECTIONS)
    return votes >= 2


def mesh_sdf(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Signed distance (mm) to a closed mesh, negative inside."""
    if not mesh.is_watertight():
        raise OpenMesh("signed distance needs a closed, oriented mesh")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dist = unsigned_distance(mesh, pts)
    sign = np.where(inside_mesh(mesh, pts), -1.0, 1.0)
    return sign * dist


# ---------------------------------------------------------------------------
# slice overlay
# ---------------------------------------------------------------------------


def slice_intersection(mesh: TriMesh, plane_pose: RigidTransform, intr: UsIntrinsics, stride: int = 2) -> SliceMask:
    """Predicted cross-section of ``mesh`` in the image plane at ``plane_pose`` (US -> Ref).

    Every ``stride``-th ROI pixel is classified by the sign of the mesh SDF
    (``sdf <= 0`` means inside); the remaining pixels copy their nearest
    evaluated neighbour.  Pixels outside the mesh bounding box are outside
    without evaluation.
    """
    if plane_pose.src != FrameId.US or plane_pose.dst != FrameId.REF:
        raise FrameMismatch("plane pose must map US->Ref")
    if not mesh.is_watertight():
        raise OpenMesh("slice intersection needs a closed, oriented mesh")
    h, w = intr.roi.h, intr.roi.w
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    us = np.stack([intr.s_us * cc.ravel(), intr.s_us * rr.ravel(), np.zeros(rr.size)], axis=1)
    ref = plane_pose.apply(us)
    lo, hi = mesh.vertices.min(axis=0) - 1e-9, mesh.vertices.max(axis=0) + 1e-9
    cand = np.all((ref >= lo) & (ref <= hi), axis=1)
    coarse = np.zeros(rr.size, dtype=bool)
    if np.any(cand):
        coarse[cand] = inside_mesh(mesh, ref[cand])
    coarse = coarse.reshape(rr.shape)
    ri = np.clip(np.rint(np.arange(h) / stride).astype(int), 0, len(rows) - 1)
    ci = np.clip(np.rint(np.arange(w) / stride).astype(int), 0, len(cols) - 1)
    return SliceMask(coarse[np.ix_(ri, ci)], plane_pose, "predicted")


def dice(a: SliceMask | np.ndarray, b: SliceMask | np.ndarray) -> float:
    ma = a.mask if isinstance(a, SliceMask) else np.asarray(a, dtype=bool)
    mb = b.mask if isinstance(b, SliceMask) else np.asarray(b, dtype=bool)
    if ma.shape != mb.shape:
        raise DimensionMismatch(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def overlay_rgb(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Grayscale frame with the mask painted into the green channel."""
    g = np.asarray(image, dtype=np.uint8)
    rgb = np.stack([g, g, g], axis=-1)
    m = np.asarray(mask, dtype=bool)
    rgb[m, 1] = 255
    rgb[m, 0] = rgb[m, 0] // 2
    rgb[m, 2] = rgb[m, 2] // 2
    return rgb


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path, optimize=False)


def write_rgb_png(path: str | Path, rgb: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, optimize=False)


# ---------------------------------------------------------------------------
# calibration reproducibility
# ---------------------------------------------------------------------------


def roi_center_pixel(intr: UsIntrinsics) -> tuple[float, float]:
    return (intr.roi.x + intr.roi.w // 2, intr.roi.y + intr.roi.h // 2)


def _mapped_points(runs: Sequence[CalibrationRun], test_pixel) -> np.ndarray:
    return np.array([invert(r.T_us_probe).apply(pixel_to_us(r.intr, np.asarray(test_pixel, float))) for r in runs])


def calibration_reproducibility(runs: Sequence[CalibrationRun], test_pixel=None) -> tuple[float, float]:
    """Spread of one image pixel mapped into the probe frame by each run.

    Returns the mean and standard deviation of the distances of the mapped
    points from their centroid (mm).  ``test_pixel`` defaults to the ROI centre.
    """
    if len(runs) < 2:
        raise TooFewRuns(f"need at least 2 runs, got {len(runs)}")
    dims = {(r.intr.roi.w, r.intr.roi.h) for r in runs}
    if len(dims) > 1:
        raise DimensionMismatch(f"runs have differing ROI sizes {sorted(dims)}")
    if test_pixel is None:
        test_pixel = roi_center_pixel(runs[0].intr)
    d = _cr_distances(runs, test_pixel)
    return float(d.mean()), float(d.std())


def _cr_distances(runs: Sequence[CalibrationRun], test_pixel) -> np.ndarray:
    pts = _mapped_points(runs, test_pixel)
    return np.linalg.norm(pts - pts.mean(axis=0), axis=1)


def cr_report(runs: Sequence[CalibrationRun], test_pixel: str = "center") -> dict:
    """CR per imaging setting plus two pooled aggregates.

    ``all_runs`` pools every run's distance to its own setting centroid;
    ``mean_of_settings`` averages the per-setting CR means.  ``test_pixel`` is
    ``"center"`` or one of ``"top_left"``, ``"top_right"``, ``"bottom_left"``,
    ``"bottom_right"`` (ROI corners, for stress reporting).
    """
    if len(runs) < 2:
        raise TooFewRuns(f"need at least 2 runs, got {len(runs)}")
    groups: dict[str, list[CalibrationRun]] = defaultdict(list)
    for r in runs:
        key = r.setting or f"{r.intr.roi.w}x{r.intr.roi.h}@{r.intr.s_us:.6f}"
        groups[key].append(r)
    per_setting = {}
    pooled = []
    for key in sorted(groups):
        grp = groups[key]
        if len(grp) < 2:
            raise TooFewRuns(f"setting {key} has a single run")
        px = _named_pixel(grp[0].intr, test_pixel)
        d = _cr_distances(grp, px)
        pooled.append(d)
        per_setting[key] = {"mean_mm": float(d.mean()), "std_mm": float(d.std()), "n_runs": len(grp), "test_pixel": list(px)}
    allv = np.concatenate(pooled)
    means = [v["mean_mm"] for v in per_setting.values()]
    return {
        "mean_mm": float(allv.mean()),
        "std_mm": float(allv.std()),
        "n_runs": int(len(allv)),
        "test_pixel": test_pixel,
        "mean_of_settings_mm": float(np.mean(means)),
        "range_of_settings_mm": [float(min(means)), float(max(means))],
        "per_setting": per_setting,
    }


def _named_pixel(intr: UsIntrinsics, name: str) -> tuple[float, float]:
    r = intr.roi
    table = {
        "center": roi_center_pixel(intr),
        "top_left": (r.x, r.y),
        "top_right": (r.x + r.w - 1, r.y),
        "bottom_left": (r.x, r.y + r.h - 1),
        "bottom_right": (r.x + r.w - 1, r.y + r.h - 1),
    }
    if name not in table:
        raise ValidationError(f"unknown test pixel {name!r}")
    return table[name]


def write_cr_json(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
