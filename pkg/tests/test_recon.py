import math
from collections import deque

import numpy as np
import pytest
from scipy import integrate

from conftest import random_transform
from freehand_us.errors import EmptyCloud, EmptySurface, FrameMismatch, NonPositiveAxis, OpenMesh, ValidationError
from freehand_us.geom import FrameId, RigidTransform, RoiBox, UsIntrinsics, compose
from freehand_us.recon import (
    PointCloud,
    TrackedFrame,
    TriMesh,
    VoxelGrid,
    box_mesh,
    compound,
    ellipsoid_volume,
    fill_solid,
    icosphere,
    marching_cubes,
    mesh_volume,
    read_grid,
    read_stl,
    reconstruct,
    smooth_mesh,
    sphericity,
    voxelize,
    write_cloud_ply,
    write_grid,
    write_mesh_ply,
    write_stl,
)

US, REF = FrameId.US, FrameId.REF
INTR = UsIntrinsics(0.2, RoiBox(10, 10, 40, 40))


def _frame(mask, pose=None, image=None):
    mask = np.asarray(mask, bool)
    image = np.full(mask.shape, 50, np.uint8) if image is None else image
    return TrackedFrame(image, mask, pose or RigidTransform.identity(US, REF))


def _sphere_surface(n, r, rng):
    u = rng.normal(size=(n, 3))
    return r * u / np.linalg.norm(u, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# compounding
# ---------------------------------------------------------------------------


def test_compound_single_pixel_at_origin():
    m = np.zeros((40, 40), bool)
    m[0, 0] = True
    cloud = compound([_frame(m)], INTR, stride=1)
    assert np.array_equal(cloud.points, [[0.0, 0.0, 0.0]])
    assert cloud.intensities.tolist() == [50]


def test_compound_offset_frames():
    m = np.zeros((40, 40), bool)
    m[3:7, 10:12] = True
    lifted = RigidTransform.from_rt(np.eye(3), [0, 0, 1], US, REF)
    cloud = compound([_frame(m), _frame(m, lifted)], INTR, stride=1)
    a, b = np.split(cloud.points, 2)
    assert np.allclose(b - a, [0, 0, 1])
    # row-major within a frame
    assert np.allclose(a[0], [10 * 0.2, 3 * 0.2, 0])
    assert np.allclose(a[1], [11 * 0.2, 3 * 0.2, 0])


def test_compound_empty():
    with pytest.raises(EmptyCloud):
        compound([_frame(np.zeros((40, 40)))], INTR)


def test_compound_equivariance(rng):
    masks = [rng.random((40, 40)) > 0.7 for _ in range(3)]
    poses = [random_transform(rng, US, REF) for _ in range(3)]
    G = random_transform(rng, REF, REF)
    base = compound([_frame(m, p) for m, p in zip(masks, poses)], INTR)
    moved = compound([_frame(m, compose(G, p)) for m, p in zip(masks, poses)], INTR)
    assert np.allclose(moved.points, G.apply(base.points), atol=1e-9)


def test_frame_invariants():
    with pytest.raises(FrameMismatch):
        _frame(np.zeros((40, 40)), RigidTransform.identity(REF, US))
    with pytest.raises(ValidationError):
        TrackedFrame(np.zeros((4, 4)), np.zeros((4, 5), bool), RigidTransform.identity(US, REF))


# ---------------------------------------------------------------------------
# voxels
# ---------------------------------------------------------------------------


def test_voxelize_single_point():
    g = voxelize(PointCloud([[3.3, -1.2, 8.0]], [0]), 1.0)
    assert g.count == 1
    assert g.dims == (5, 5, 5)
    assert np.allclose(g.origin, [1.3, -3.2, 6.0])


def test_voxelize_close_points_deterministic():
    g = voxelize(PointCloud([[0.0, 0.0, 0.0], [0.4, 0.0, 0.0]], [0, 0]), 1.0)
    assert g.count == 1
    g = voxelize(PointCloud([[0.0, 0.0, 0.0], [0.4, 0.0, 0.0]], [0, 0]), 0.3)
    assert g.count == 2


def test_voxelize_order_invariant(rng):
    pts = rng.normal(scale=5, size=(500, 3))
    a = voxelize(PointCloud(pts, np.zeros(500)))
    b = voxelize(PointCloud(pts[rng.permutation(500)], np.zeros(500)))
    assert np.array_equal(a.occupancy, b.occupancy) and np.array_equal(a.origin, b.origin)


def _dense_voxel_keys(g, r, rng):
    dense = _sphere_surface(3_000_000, r, rng)
    idx = np.floor((dense - g.origin) / g.spacing).astype(int)
    return {tuple(k) for k in np.unique(idx, axis=0)}


def test_voxelize_sphere_surface_vs_dense_oracle(rng):
    # 100k samples cover corner-clipped voxels densely enough for a 10% match
    pts = _sphere_surface(100_000, 10.0, rng)
    g = voxelize(PointCloud(pts, np.zeros(len(pts))), 1.0)
    oracle = _dense_voxel_keys(g, 10.0, rng)
    assert abs(g.count - len(oracle)) <= 0.1 * len(oracle)


@pytest.mark.xfail(strict=True, reason="10k samples on a 10 mm sphere miss corner-clipped voxels (about 18% short)")
def test_voxelize_sphere_surface_10k_samples(rng):
    pts = _sphere_surface(10_000, 10.0, rng)
    g = voxelize(PointCloud(pts, np.zeros(len(pts))), 1.0)
    oracle = _dense_voxel_keys(g, 10.0, rng)
    assert abs(g.count - len(oracle)) <= 0.1 * len(oracle)


def test_voxelize_sparse_samples_are_subset_of_dense(rng):
    pts = _sphere_surface(10_000, 10.0, rng)
    g = voxelize(PointCloud(pts, np.zeros(len(pts))), 1.0)
    got = {tuple(k) for k in np.argwhere(g.occupancy)}
    assert got <= _dense_voxel_keys(g, 10.0, rng)
    assert g.count < len(got | _dense_voxel_keys(g, 10.0, rng))


def _manual_closing(occ, r):
    """Dilate then erode by shifting; an independent morphological oracle."""
    offsets = [(a, b, c) for a in range(-r, r + 1) for b in range(-r, r + 1) for c in range(-r, r + 1)]
    pad = np.pad(occ, r)
    dil = np.zeros_like(pad)
    n = pad.shape
    for a, b, c in offsets:
        dil[max(a, 0) : n[0] + min(a, 0), max(b, 0) : n[1] + min(b, 0), max(c, 0) : n[2] + min(c, 0)] |= pad[
            max(-a, 0) : n[0] - max(a, 0), max(-b, 0) : n[1] - max(b, 0), max(-c, 0) : n[2] - max(c, 0)
        ]
    ero = np.ones_like(dil)
    big = np.pad(dil, r, constant_values=False)
    for a, b, c in offsets:
        ero &= big[r + a : r + a + n[0], r + b : r + b + n[1], r + c : r + c + n[2]]
    return ero[r:-r, r:-r, r:-r]


def _flood_fill(occ):
    """Mark empty voxels reachable from the border (6-connected); everything else is solid."""
    outside = np.zeros_like(occ)
    q = deque()
    nx, ny, nz = occ.shape
    for idx in np.ndindex(occ.shape):
        if (0 in idx or idx[0] == nx - 1 or idx[1] == ny - 1 or idx[2] == nz - 1) and not occ[idx]:
            outside[idx] = True
            q.append(idx)
    while q:
        x, y, z = q.popleft()
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            p = (x + dx, y + dy, z + dz)
            if 0 <= p[0] < nx and 0 <= p[1] < ny and 0 <= p[2] < nz and not occ[p] and not outside[p]:
                outside[p] = True
                q.append(p)
    return ~outside


def test_fill_solid_cube_unchanged():
    occ = np.zeros((14, 14, 14), bool)
    occ[2:12, 2:12, 2:12] = True
    g = VoxelGrid(np.zeros(3), 1.0, occ)
    assert np.array_equal(fill_solid(g, 1).occupancy, occ)


def test_fill_solid_shell_with_gaps_matches_flood_fill():
    n = 26
    c = (np.indices((n, n, n)).T + 0.5 - n / 2).T
    r = np.sqrt((c**2).sum(axis=0))
    shell = (r >= 8) & (r < 9.5)
    # 2 x 2 holes straight through the shell at the six poles
    mid = slice(n // 2 - 1, n // 2 + 1)
    for axis in range(3):
        for side in (slice(0, n // 2), slice(n // 2, n)):
            idx = [mid, mid, mid]
            idx[axis] = side
            shell[tuple(idx)] = False
    assert not _flood_fill(shell)[r < 8].any()  # leaky before closing
    filled = fill_solid(VoxelGrid(np.zeros(3), 1.0, shell), 1).occupancy
    oracle = _flood_fill(_manual_closing(shell, 1))
    assert np.array_equal(filled, oracle)
    assert filled[r < 9.5].all()


def test_fill_solid_superposition():
    occ = np.zeros((40, 20, 20), bool)
    occ[3:12, 3:12, 3:12] = True
    occ[6:9, 6:9, 6:9] = False
    occ[25:35, 5:15, 5:15] = True
    occ[28:31, 8:11, 8:11] = False
    g = VoxelGrid(np.zeros(3), 1.0, occ)
    left, right = occ.copy(), occ.copy()
    left[20:] = False
    right[:20] = False
    total = fill_solid(g).count
    assert total == fill_solid(g.with_occupancy(left)).count + fill_solid(g.with_occupancy(right)).count
    assert total == 9**3 + 10**3


def test_fill_solid_idempotent(rng):
    occ = rng.random((20, 20, 20)) > 0.8
    g = fill_solid(VoxelGrid(np.zeros(3), 1.0, occ))
    assert np.array_equal(fill_solid(g).occupancy, g.occupancy)


# ---------------------------------------------------------------------------
# meshing
# ---------------------------------------------------------------------------


def test_single_voxel_octahedron():
    occ = np.zeros((3, 3, 3), bool)
    occ[1, 1, 1] = True
    mesh = marching_cubes(VoxelGrid(np.zeros(3), 2.0, occ))
    assert mesh.is_watertight()
    assert len(mesh.triangles) == 8
    # octahedron with half-spacing radius: (4/3) (s/2)^3
    assert mesh_volume(mesh) * 1000 == pytest.approx(8.0 / 6.0, rel=1e-4)


def test_cube_volume_within_5_percent():
    occ = np.zeros((14, 14, 14), bool)
    occ[2:12, 2:12, 2:12] = True
    mesh = marching_cubes(VoxelGrid(np.zeros(3), 1.5, occ))
    assert mesh.is_watertight()
    assert mesh_volume(mesh) * 1000 == pytest.approx(1000 * 1.5**3, rel=0.05)


def test_marching_cubes_empty():
    with pytest.raises(EmptySurface):
        marching_cubes(VoxelGrid(np.zeros(3), 1.0, np.zeros((4, 4, 4), bool)))


def test_marching_cubes_outward_and_placed():
    occ = np.zeros((10, 10, 10), bool)
    occ[3:7, 3:7, 3:7] = True
    g = VoxelGrid(np.array([5.0, -2.0, 1.0]), 1.0, occ)
    mesh = marching_cubes(g)
    assert mesh.signed_volume_mm3() > 0
    assert np.allclose(mesh.vertices.mean(axis=0), g.centers(np.array([4.5, 4.5, 4.5])), atol=1e-6)


def test_smooth_zero_iterations_identity():
    m = icosphere(5.0, 2)
    s = smooth_mesh(m, 0)
    assert np.array_equal(s.vertices, m.vertices) and np.array_equal(s.triangles, m.triangles)


def test_smooth_noisy_sphere(rng):
    m = icosphere(10.0, 4)
    noisy = TriMesh(m.vertices + rng.normal(scale=0.3, size=m.vertices.shape), m.triangles)
    rms = lambda mesh: float(np.sqrt(np.mean((np.linalg.norm(mesh.vertices, axis=1) - 10.0) ** 2)))  # noqa: E731
    smoothed = smooth_mesh(noisy, 10)
    assert rms(smoothed) <= rms(noisy) / 2
    assert smoothed.is_watertight()


def test_smooth_sphere_volume_preserved():
    m = icosphere(10.0, 4)
    assert mesh_volume(smooth_mesh(m, 10)) == pytest.approx(mesh_volume(m), rel=0.01)


def test_mesh_volume_examples():
    assert mesh_volume(box_mesh(10.0)) == pytest.approx(1.0, abs=1e-12)
    r = 7.4365
    assert mesh_volume(icosphere(r, 4)) == pytest.approx(4 / 3 * math.pi * r**3 / 1000, rel=0.005)
    m = icosphere(5.0, 2)
    with pytest.raises(OpenMesh):
        mesh_volume(TriMesh(m.vertices, m.triangles[1:]))


def test_mesh_volume_orientation_independent():
    m = icosphere(5.0, 3)
    assert mesh_volume(m.flipped()) == pytest.approx(mesh_volume(m))


def test_sphericity_examples():
    assert sphericity(icosphere(3.0, 5)) >= 0.999
    assert sphericity(box_mesh(4.0)) == pytest.approx(math.pi ** (1 / 3) * 6 ** (2 / 3) / 6, abs=1e-9)
    assert sphericity(box_mesh(4.0)) == pytest.approx(0.806, abs=5e-4)


def test_sphericity_prolate_vs_quadrature():
    a, b = 3.0, 1.0
    unit = icosphere(1.0, 6)
    mesh = TriMesh(unit.vertices * [a, b, b], unit.triangles)
    # surface of revolution: A = 2 pi int y sqrt(1 + y'^2) dx with y = b sqrt(1 - x^2/a^2)
    integrand = lambda x: 2 * math.pi * b * math.sqrt(1 - x**2 / a**2 + (b * x / a**2) ** 2)  # noqa: E731
    area, _ = integrate.quad(integrand, -a, a)
    V = 4 / 3 * math.pi * a * b * b
    oracle = math.pi ** (1 / 3) * (6 * V) ** (2 / 3) / area
    e = math.sqrt(1 - b**2 / a**2)
    closed = 2 * math.pi * b**2 * (1 + a / (b * e) * math.asin(e))
    assert area == pytest.approx(closed, rel=1e-9)
    assert oracle == pytest.approx(0.8461, abs=1e-4)
    assert sphericity(mesh) == pytest.approx(oracle, rel=0.01)


def test_ellipsoid_volume_examples():
    assert ellipsoid_volume(20, 20, 20) == pytest.approx(4.189, abs=5e-4)
    r = 7.396
    assert ellipsoid_volume(2 * r, 2 * r, 2 * r) == pytest.approx(4 / 3 * math.pi * r**3 / 1000, rel=1e-12)
    with pytest.raises(NonPositiveAxis):
        ellipsoid_volume(0, 1, 1)


@pytest.mark.parametrize("spacing", [1.0, 2.0])
def test_pipeline_sphericity_at_most_one(spacing, rng):
    pts = _sphere_surface(40_000, 10.0, rng)
    g = fill_solid(voxelize(PointCloud(pts, np.zeros(len(pts))), spacing))
    psi, raw = sphericity(marching_cubes(g), return_raw=True)
    assert 0 < psi <= 1.0 and psi == min(raw, 1.0)


@pytest.mark.xfail(strict=True, reason="point-in-voxel occupancy carries a shell bias; error ratio 2 mm -> 1 mm is about 0.6")
def test_volume_error_halves_with_any_occupancy(rng):
    r = 10.0
    true = 4 / 3 * math.pi * r**3 / 1000
    pts = _sphere_surface(400_000, r, rng)
    cloud = PointCloud(pts, np.zeros(len(pts)))
    err = {s: abs(mesh_volume(marching_cubes(fill_solid(voxelize(cloud, s)))) - true) for s in (2.0, 1.0)}
    assert err[1.0] <= err[2.0] / 2


@pytest.mark.parametrize("r", [7.396, 10.0])
def test_volume_error_shrinks_with_spacing(r):
    true = 4 / 3 * math.pi * r**3 / 1000
    frames, intr = _disk_frames(r, step=0.25)
    err = {s: abs(reconstruct(frames, intr, spacing=s).volume_cm3 - true) for s in (2.0, 1.0)}
    assert err[1.0] <= err[2.0] / 2


# ---------------------------------------------------------------------------
# pipeline and files
# ---------------------------------------------------------------------------


def _disk_frames(r_mm=5.0, n=41, step=None):
    side = int(round(20 * (r_mm + 3)))
    c = side * 0.05
    intr = UsIntrinsics(0.1, RoiBox(0, 0, side, side))
    rr, cc = np.mgrid[0:side, 0:side] * 0.1
    frames = []
    zs = np.arange(-r_mm - 2, r_mm + 2 + 1e-9, step) if step else np.linspace(-r_mm - 1, r_mm + 1, n)
    for z in zs:
        rad2 = r_mm**2 - z**2
        mask = (cc - c) ** 2 + (rr - c) ** 2 <= rad2 if rad2 > 0 else np.zeros((side, side), bool)
        frames.append(_frame(mask, RigidTransform.from_rt(np.eye(3), [0, 0, z], US, REF)))
    return frames, intr


def test_reconstruct_sphere_from_slices():
    frames, intr = _disk_frames()
    rec = reconstruct(frames, intr)
    assert rec.volume_cm3 == pytest.approx(4 / 3 * math.pi * 125 / 1000, rel=0.04)
    assert rec.mesh.is_watertight()
    assert 0.9 < rec.sphericity <= 1.0


def test_reconstruct_stride_guard():
    frames, intr = _disk_frames()
    with pytest.raises(ValidationError):
        reconstruct(frames, intr, spacing=1.0, stride=11)
    with pytest.raises(ValidationError):
        reconstruct(frames, intr, occupancy="mean")


def test_stl_round_trip(tmp_path):
    m = icosphere(4.0, 3, center=(1, 2, 3))
    write_stl(tmp_path / "m.stl", m)
    back = read_stl(tmp_path / "m.stl")
    assert back.is_watertight()
    assert len(back.vertices) == len(m.vertices)
    assert mesh_volume(back) == pytest.approx(mesh_volume(m), rel=1e-5)
    assert (tmp_path / "m.stl").stat().st_size == 84 + 50 * len(m.triangles)


def test_grid_round_trip(tmp_path, rng):
    g = VoxelGrid(np.array([1.5, -2.0, 3.25]), 0.5, rng.random((7, 9, 11)) > 0.5)
    write_grid(tmp_path / "g.fhvox", g)
    back = read_grid(tmp_path / "g.fhvox")
    assert np.array_equal(back.occupancy, g.occupancy)
    assert np.array_equal(back.origin, g.origin) and back.spacing == g.spacing


def test_ply_headers(tmp_path):
    m = box_mesh(2.0)
    write_mesh_ply(tmp_path / "m.ply", m)
    text = (tmp_path / "m.ply").read_text().splitlines()
    assert text[0] == "ply" and "element vertex 8" in text and "element face 12" in text
    write_cloud_ply(tmp_path / "c.ply", PointCloud([[0, 0, 0], [1, 2, 3]], [7, 9]))
    lines = (tmp_path / "c.ply").read_text().splitlines()
    assert "property uchar intensity" in lines
    assert lines[-1] == "1.000000 2.000000 3.000000 9"
