"""Freehand compounding, voxelisation, meshing and volumetry.

Segmented, tracked ultrasound frames are compounded into a point cloud in the
reference frame, resampled onto a regular voxel grid, closed and filled,
meshed with marching cubes and smoothed.  Volume comes from the divergence
theorem on the closed mesh.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, sparse
from skimage import measure

from freehand_us.errors import (
    DimensionMismatch,
    EmptyCloud,
    EmptySurface,
    FrameMismatch,
    NonPositiveAxis,
    OpenMesh,
    ValidationError,
)
from freehand_us.geom import FrameId, RigidTransform, UsIntrinsics

logger = logging.getLogger(__name__)

MM3_PER_CM3 = 1000.0
GRID_MARGIN = 2
# Just below 0.5 so saddle faces of the binary field resolve the same way in
# both neighbouring cells; exactly 0.5 leaves cracks on ambiguous faces.
MC_LEVEL = 0.5 - 1e-6


@dataclass(frozen=True)
class TrackedFrame:
    """ROI-cropped image, its segmentation and the US -> Ref pose."""

    image: np.ndarray
    mask: np.ndarray
    pose: RigidTransform
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if np.shape(self.image) != np.shape(self.mask):
            raise DimensionMismatch("image and mask shapes differ")
        if self.pose.src != FrameId.US or self.pose.dst != FrameId.REF:
            raise FrameMismatch(f"frame pose must map US->Ref, got {self.pose.src.value}->{self.pose.dst.value}")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    intensities: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        inten = np.asarray(self.intensities).reshape(-1)
        if len(pts) != len(inten):
            raise DimensionMismatch("points and intensities differ in length")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensities", inten)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class VoxelGrid:
    """Boolean occupancy on a regular grid; voxel ``k`` spans ``origin + [k, k+1) * spacing``."""

    origin: np.ndarray
    spacing: float
    occupancy: np.ndarray
    fraction: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.spacing > 0:
            raise ValidationError("voxel spacing must be positive")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "occupancy", np.asarray(self.occupancy, dtype=bool))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.occupancy.shape)

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def centers(self, index: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(index, float) + 0.5) * self.spacing

    def with_occupancy(self, occupancy: np.ndarray) -> VoxelGrid:
        return VoxelGrid(self.origin, self.spacing, occupancy)


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))

    @property
    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v, f = self.vertices, self.triangles
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.corners
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def signed_volume_mm3(self) -> float:
        a, b, c = self.corners
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def is_watertight(self) -> bool:
        """Every edge shared by exactly two triangles with opposite directions."""
        if len(self.triangles) == 0:
            return False
        f = self.triangles
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        undirected = np.sort(directed, axis=1)
        _, counts = np.unique(undirected, axis=0, return_counts=True)
        if np.any(counts != 2):
            return False
        _, dcounts = np.unique(directed, axis=0, return_counts=True)
        return bool(np.all(dcounts == 1))

    def translated(self, offset: np.ndarray) -> TriMesh:
        return TriMesh(self.vertices + np.asarray(offset, float), self.triangles)

    def transformed(self, T: RigidTransform) -> TriMesh:
        return TriMesh(T.apply(self.vertices), self.triangles)

    def flipped(self) -> TriMesh:
        return TriMesh(self.vertices, self.triangles[:, ::-1])


# ---------------------------------------------------------------------------
# compounding and voxelisation
# ---------------------------------------------------------------------------


def _frame_pixels(frame: TrackedFrame, stride: int, masked_only: bool) -> tuple[np.ndarray, np.ndarray]:
    sub = frame.mask[::stride, ::stride] if masked_only else np.ones_like(frame.mask[::stride, ::stride], bool)
    rows, cols = np.nonzero(sub)
    return rows * stride, cols * stride


def _check_frames(frames: Sequence[TrackedFrame], intr: UsIntrinsics) -> None:
    for fr in frames:
        if np.shape(fr.mask) != (intr.roi.h, intr.roi.w):
            raise DimensionMismatch(f"frame shape {np.shape(fr.mask)} != ROI {(intr.roi.h, intr.roi.w)}")


def compound(frames: Sequence[TrackedFrame], intr: UsIntrinsics, stride: int = 2) -> PointCloud:
    """Map every ``stride``-th masked pixel of every frame into Ref.

    Output order is frame-major, then row-major within a frame.
    """
    _check_frames(frames, intr)
    pts, inten = [], []
    for fr in frames:
        rows, cols = _frame_pixels(fr, stride, masked_only=True)
        if len(rows) == 0:
            continue
        us = np.stack([intr.s_us * cols, intr.s_us * rows, np.zeros(len(rows))], axis=1)
        pts.append(fr.pose.apply(us))
        inten.append(np.asarray(fr.image)[rows, cols])
    if not pts:
        raise EmptyCloud("no masked pixels in any frame")
    return PointCloud(np.concatenate(pts), np.concatenate(inten))


def _grid_frame(points: np.ndarray, spacing: float, margin: int = GRID_MARGIN) -> tuple[np.ndarray, np.ndarray, tuple]:
    pmin = points.min(axis=0)
    idx = np.floor((points - pmin) / spacing).astype(np.int64) + margin
    dims = tuple(int(d) for d in idx.max(axis=0) + margin + 1)
    return pmin - margin * spacing, idx, dims


def voxelize(cloud: PointCloud, spacing: float = 1.0) -> VoxelGrid:
    """Occupancy is true for every voxel containing at least one point.

    The grid origin sits two voxels below the cloud's minimum corner.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot voxelise an empty cloud")
    origin, idx, dims = _grid_frame(cloud.points, spacing)
    occ = np.zeros(dims, dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return VoxelGrid(origin, spacing, occ)


def resample_voxels(
    frames: Sequence[TrackedFrame],
    intr: UsIntrinsics,
    spacing: float = 1.0,
    stride: int = 2,
    level: float = 0.5,
) -> VoxelGrid:
    """Estimate the segmentation at each voxel centre by trilinear splatting.

    Every sampled pixel (masked or not) near the masked cloud is splatted onto
    the eight surrounding voxel centres with trilinear weights; a voxel is
    occupied where the weighted mask average reaches ``level``.  Unlike
    :func:`voxelize` this does not dilate the surface by up to one voxel.
    The grid is laid out exactly as :func:`voxelize` lays it out for the
    masked cloud.
    """
    cloud = compound(frames, intr, stride)
    origin, _, dims = _grid_frame(cloud.points, spacing)
    num = np.zeros(dims)
    den = np.zeros(dims)
    shape = np.array(dims)
    for fr in frames:
        rows, cols = _frame_pixels(fr, stride, masked_only=False)
        us = np.stack([intr.s_us * cols, intr.s_us * rows, np.zeros(len(rows))], axis=1)
        u = (fr.pose.apply(us) - origin) / spacing - 0.5
        base = np.floor(u).astype(np.int64)
        keep = np.all((base >= 0) & (base < shape - 1), axis=1)
        if not np.any(keep):
            continue
        u, base = u[keep], base[keep]
        val = np.asarray(fr.mask, dtype=float)[rows[keep], cols[keep]]
        frac = u - base
        for corner in np.ndindex(2, 2, 2):
            c = np.array(corner)
            w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
            flat = np.ravel_multi_index((base + c).T, dims)
            np.add.at(den.reshape(-1), flat, w)
            np.add.at(num.reshape(-1), flat, w * val)
    fraction = np.divide(num, den, out=np.zeros_like(num), where=den > 1e-9)
    occ = (den > 1e-9) & (fraction >= level)
    return VoxelGrid(origin, spacing, occ, fraction)


def fill_solid(grid: VoxelGrid, closing_radius: int = 1) -> VoxelGrid:
    """Morphological closing with a cubic element, then interior hole filling."""
    if grid.count == 0:
        raise EmptyCloud("grid has no occupied voxels")
    pad = closing_radius + 1
    occ = np.pad(grid.occupancy, pad)
    if closing_radius > 0:
        cube = np.ones((2 * closing_radius + 1,) * 3, dtype=bool)
        occ = ndimage.binary_erosion(ndimage.binary_dilation(occ, cube), cube)
    occ = ndimage.binary_fill_holes(occ, structure=ndimage.generate_binary_structure(3, 1))
    occ = occ[pad:-pad, pad:-pad, pad:-pad]
    return grid.with_occupancy(occ)


# ---------------------------------------------------------------------------
# meshing
# ---------------------------------------------------------------------------


def marching_cubes(grid: VoxelGrid) -> TriMesh:
    """Iso-surface at 0.5 of the binary field sampled at voxel centres."""
    if grid.count == 0:
        raise EmptySurface("grid has no occupied voxels")
    vol = np.pad(grid.occupancy, 1).astype(np.float32)
    s = grid.spacing
    verts, faces, _, _ = measure.marching_cubes(vol, level=MC_LEVEL, spacing=(s, s, s), allow_degenerate=False)
    if len(faces) == 0:
        raise EmptySurface("marching cubes produced no triangles")
    verts = verts.astype(float) + grid.origin + 0.5 * s - s
    mesh = TriMesh(verts, faces)
    if mesh.signed_volume_mm3() < 0:
        mesh = mesh.flipped()
    if not mesh.is_watertight():
        raise OpenMesh("marching cubes output is not closed")
    return mesh


def vertex_adjacency(mesh: TriMesh) -> sparse.csr_matrix:
    f = mesh.triangles
    i = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
    j = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
    n = len(mesh.vertices)
    A = sparse.coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n)).tocsr()
    A.data[:] = 1.0
    return A


def smooth_mesh(mesh: TriMesh, iterations: int = 10, lam: float = 0.5, mu: float = -0.53) -> TriMesh:
    """Taubin smoothing: alternating shrink (``lam``) and inflate (``mu``) steps."""
    if iterations <= 0:
        return TriMesh(mesh.vertices.copy(), mesh.triangles.copy())
    A = vertex_adjacency(mesh)
    deg = np.asarray(A.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    W = sparse.diags(1.0 / deg) @ A
    v = mesh.vertices.copy()
    for _ in range(iterations):
        v = v + lam * (W @ v - v)
        v = v + mu * (W @ v - v)
    return TriMesh(v, mesh.triangles.copy())


def mesh_volume(mesh: TriMesh) -> float:
    """Enclosed volume in cm^3 (divergence theorem)."""
    if not mesh.is_watertight():
        raise OpenMesh("mesh is not closed and consistently oriented")
    return abs(mesh.signed_volume_mm3()) / MM3_PER_CM3


def sphericity(mesh: TriMesh, return_raw: bool = False) -> float | tuple[float, float]:
    """``pi^(1/3) (6V)^(2/3) / A``, clamped to [0, 1]."""
    volume = mesh_volume(mesh) * MM3_PER_CM3
    area = mesh.area()
    if volume <= 0 or area <= 0:
        raise OpenMesh("sphericity needs positive volume and area")
    raw = math.pi ** (1 / 3) * (6 * volume) ** (2 / 3) / area
    psi = min(max(raw, 0.0), 1.0)
    if raw > 1.0:
        logger.debug("sphericity %.6f clamped to 1", raw)
    return (psi, raw) if return_raw else psi


def ellipsoid_volume(l: float, w: float, h: float) -> float:
    """Clinical ellipsoid estimate ``pi/6 * l * w * h`` (mm in, cm^3 out)."""
    if min(l, w, h) <= 0:
        raise NonPositiveAxis(f"axes must be positive, got {(l, w, h)}")
    return math.pi / 6.0 * l * w * h / MM3_PER_CM3


# ---------------------------------------------------------------------------
# mesh primitives
# ---------------------------------------------------------------------------


def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Subdivided icosahedron with outward-facing triangles."""
    p = (1 + 5**0.5) / 2
    v = [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p],
         [0, -1, -p], [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = np.array(v, float)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(f, np.int64)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.ravel()
        mids = verts[uniq[:, 0]] + verts[uniq[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        m = len(faces)
        a, b, c = faces.T
        ab, bc, ca = inv[:m] + len(verts), inv[m : 2 * m] + len(verts), inv[2 * m :] + len(verts)
        verts = np.vstack([verts, mids])
        faces = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
    mesh = TriMesh(verts * radius + np.asarray(center, float), faces)
    return mesh if mesh.signed_volume_mm3() > 0 else mesh.flipped()


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriMesh:
    sx, sy, sz = np.broadcast_to(np.asarray(size, float), (3,)) / 2
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]) + np.asarray(center, float)
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    mesh = TriMesh(v, f)
    return mesh if mesh.signed_volume_mm3() > 0 else mesh.flipped()


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class Reconstruction:
    cloud: PointCloud
    grid: VoxelGrid
    mesh: TriMesh
    volume_cm3: float
    sphericity: float


def reconstruct(
    frames: Sequence[TrackedFrame],
    intr: UsIntrinsics,
    spacing: float = 1.0,
    stride: int = 2,
    closing_radius: int = 1,
    smooth_iterations: int = 10,
    occupancy: str = "resample",
) -> Reconstruction:
    """Frames -> cloud -> voxels -> closed grid -> mesh -> volume.

    ``occupancy="resample"`` uses :func:`resample_voxels`; ``"any"`` uses the
    point-in-voxel rule of :func:`voxelize`, which inflates volumes by roughly
    half a voxel of surface thickness.
    """
    if stride * intr.s_us > spacing:
        raise ValidationError(f"pixel stride {stride} x {intr.s_us:.4f} mm exceeds voxel spacing {spacing} mm")
    cloud = compound(frames, intr, stride)
    if occupancy == "resample":
        grid = resample_voxels(frames, intr, spacing, stride)
    elif occupancy == "any":
        grid = voxelize(cloud, spacing)
    else:
        raise ValidationError(f"unknown occupancy rule {occupancy!r}")
    if grid.count == 0:
        raise EmptySurface("no voxel reached the occupancy level")
    grid = fill_solid(grid, closing_radius)
    mesh = smooth_mesh(marching_cubes(grid), smooth_iterations)
    return Reconstruction(cloud, grid, mesh, mesh_volume(mesh), float(sphericity(mesh)))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_cloud_ply(path: str | Path, cloud: PointCloud) -> None:
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(cloud)}",
        "property float x", "property float y", "property float z", "property uchar intensity", "end_header",
    ]
    body = [f"{x:.6f} {y:.6f} {z:.6f} {int(i)}" for (x, y, z), i in zip(cloud.points, cloud.intensities)]
    Path(path).write_text("\n".join(lines + body) + "\n")


def write_mesh_ply(path: str | Path, mesh: TriMesh) -> None:
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
        "property float x", "property float y", "property float z",
        f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header",
    ]
    body = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines + body) + "\n")


def write_stl(path: str | Path, mesh: TriMesh, header: str = "freehand_us mesh") -> None:
    a, b, c = mesh.corners
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    rec = np.zeros(len(a), dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    rec["n"] = n
    rec["v"] = np.stack([a, b, c], axis=1)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii")[:80].ljust(80, b"\0"))
        fh.write(struct.pack("<I", len(a)))
        fh.write(rec.tobytes())


def read_stl(path: str | Path, decimals: int = 5) -> TriMesh:
    """Read a binary STL, merging coincident vertices."""
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<I", data[80:84])
    rec = np.frombuffer(data[84 : 84 + 50 * n], dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    tri = rec["v"].astype(float).reshape(-1, 3)
    uniq, inv = np.unique(np.round(tri, decimals), axis=0, return_inverse=True)
    return TriMesh(uniq, inv.reshape(-1, 3))


GRID_MAGIC = b"FHVOX1\n"


def write_grid(path: str | Path, grid: VoxelGrid) -> None:
    """Raw grid: magic line, one JSON header line, then C-order packed occupancy bits."""
    header = {"dims": list(grid.dims), "origin_mm": grid.origin.tolist(), "spacing_mm": grid.spacing, "order": "C"}
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.packbits(grid.occupancy.ravel(order="C")).tobytes())


def read_grid(path: str | Path) -> VoxelGrid:
    data = Path(path).read_bytes()
    if not data.startswith(GRID_MAGIC):
        raise ValidationError("not a voxel grid file")
    rest = data[len(GRID_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    dims = tuple(header["dims"])
    bits = np.unpackbits(np.frombuffer(rest[nl + 1 :], dtype=np.uint8))[: int(np.prod(dims))]
    return VoxelGrid(np.asarray(header["origin_mm"]), float(header["spacing_mm"]), bits.astype(bool).reshape(dims))
