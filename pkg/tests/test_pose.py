import itertools

import numpy as np
import pytest

from conftest import random_transform
from freehand_us.errors import (
    DegenerateConfiguration,
    FrameMismatch,
    InsufficientConsensus,
    NonMonotonicTimestamp,
    ValidationError,
)
from freehand_us.geom import FrameId, RigidTransform, compose, invert, pose_error, rotvec_to_quat, quat_to_matrix
from freehand_us.intrinsics import LedgeDetection, LedgePhantomGeometry, detect_ledge_lines, find_ledge_triplet
from freehand_us.pose import (
    MarkerRigModel,
    OneEuroParams,
    OneEuroState,
    compute_T_calib_us,
    compute_T_us_probe,
    compute_T_us_ref,
    kabsch,
    one_euro_step,
    project,
    ransac_pnp,
    ransac_pnp_points,
    read_corner_stream,
    smoothing_factor,
    solve_pnp,
    solve_pnp_points,
    write_corner_stream,
)
from freehand_us.sim.render import render_ledge_image
from freehand_us.sim.world import look_at, project_markers

US, REF, PROBE, CAM, CALIB = FrameId.US, FrameId.REF, FrameId.PROBE, FrameId.CAM, FrameId.CALIB


def _three_marker_rig(world) -> MarkerRigModel:
    """Twelve corners: one marker from each face of the probe cube."""
    full = world.probe_rig
    return MarkerRigModel((0, 3, 6), full.corners_rig[[0, 3, 6]], PROBE)


def _cam_from_probe(rng, distance=300.0):
    eye = rng.normal(size=3)
    eye[2] = abs(eye[2]) + 0.5
    eye = distance * eye / np.linalg.norm(eye) + np.array([0, 0, 120.0])
    return look_at(eye, (0, 0, 120.0), src=PROBE)


# ---------------------------------------------------------------------------
# PnP
# ---------------------------------------------------------------------------


def test_pnp_noiseless_round_trip(world, rng):
    rig = _three_marker_rig(world)
    for _ in range(10):
        T = _cam_from_probe(rng)
        obs = project_markers(rig, T, world.cam)
        res = solve_pnp(rig, obs, world.cam)
        dt, dr = pose_error(res.pose, T)
        assert dt < 0.01 and dr < 0.01
        assert res.rms_px < 1e-6
        assert (res.pose.src, res.pose.dst) == (PROBE, CAM)


def test_pnp_noisy_translation_error(world, rng):
    rig = _three_marker_rig(world)
    errs = []
    for k in range(100):
        T = _cam_from_probe(rng)
        res = solve_pnp(rig, project_markers(rig, T, world.cam, 0.5, seed=k), world.cam)
        errs.append(pose_error(res.pose, T)[0])
    assert max(errs) < 2.0


def test_pnp_cost_never_increases(world, rng):
    rig = world.probe_rig
    obs = project_markers(rig, _cam_from_probe(rng), world.cam, 1.0, seed=3)
    hist = solve_pnp(rig, obs, world.cam).cost_history
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_pnp_degenerate(world):
    X = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
    with pytest.raises(DegenerateConfiguration):
        solve_pnp_points(X, np.zeros((3, 2)), world.cam)
    X4 = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], float)
    uv = project(np.eye(3), np.array([0, 0, 300.0]), X4, world.cam)
    with pytest.raises(DegenerateConfiguration):
        solve_pnp_points(X4, uv, world.cam)


def test_pnp_planar_rig(world, rng):
    T = look_at((60, -150, 250), (70, 0, 0), src=REF)
    res = solve_pnp(world.ref_rig, project_markers(world.ref_rig, T, world.cam), world.cam)
    dt, dr = pose_error(res.pose, T)
    assert dt < 1e-6 and dr < 1e-6


def test_ransac_rejects_displaced_corners(world, rng):
    rig = world.calib_rig  # 16 corners
    T = look_at((0, -250, 200), (25, 10, 30), src=CALIB)
    obs = project_markers(rig, T, world.cam)
    X, uv = obs.correspondences(rig)
    uv = uv.copy()
    uv[12:] += np.array([50.0, -50.0])
    res = ransac_pnp_points(X, uv, world.cam, 2.0, seed=1, src=CALIB)
    assert np.array_equal(np.sort(res.inliers), np.arange(12))
    dt, dr = pose_error(res.pose, T)
    assert dt < 0.01 and dr < 0.01


def test_ransac_all_inliers_equals_pnp(world, rng):
    rig = world.probe_rig
    obs = project_markers(rig, _cam_from_probe(rng), world.cam, 0.3, seed=2)
    r = ransac_pnp(rig, obs, world.cam, 2.0, seed=0)
    p = solve_pnp(rig, obs, world.cam)
    assert len(r.inliers) == 36
    assert r.pose.allclose(p.pose, atol=1e-6)


def test_ransac_adversarial_common_wrong_pose(world):
    """Four corners that all agree on a wrong pose are accepted as that pose."""
    rig = world.calib_rig
    X = rig.corners_rig[0]
    wrong = look_at((30, -200, 260), (0, 20, 40), src=CALIB)
    uv = project(wrong.rotation, wrong.t, X, world.cam)
    res = ransac_pnp_points(X, uv, world.cam, 2.0, seed=0, src=CALIB)
    assert len(res.inliers) == 4
    dt, dr = pose_error(res.pose, wrong)
    assert dt < 1e-3 and dr < 1e-3


def test_ransac_is_reproducible(world, rng):
    rig = world.probe_rig
    obs = project_markers(rig, _cam_from_probe(rng), world.cam, 0.5, 0.25, seed=9)
    a = ransac_pnp(rig, obs, world.cam, seed=17)
    b = ransac_pnp(rig, obs, world.cam, seed=17)
    assert np.array_equal(a.pose.quat, b.pose.quat) and np.array_equal(a.pose.t, b.pose.t)
    assert np.array_equal(a.inliers, b.inliers)


def test_ransac_insufficient(world):
    X = world.calib_rig.corners_rig.reshape(-1, 3)[:6]
    uv = np.random.default_rng(0).uniform(0, 1000, (6, 2))
    with pytest.raises((InsufficientConsensus, DegenerateConfiguration)):
        ransac_pnp_points(X, uv, world.cam, 0.01, seed=0)


def test_corner_stream_round_trip(tmp_path, world):
    obs = [project_markers(world.probe_rig, _cam_from_probe(np.random.default_rng(k)), world.cam, 0.5, seed=k, timestamp=k / 30) for k in range(3)]
    write_corner_stream(tmp_path / "c.jsonl", obs)
    back = read_corner_stream(tmp_path / "c.jsonl")
    assert [o.timestamp for o in back] == [o.timestamp for o in obs]
    assert back[0].rig == "probe"
    X0, uv0 = obs[1].correspondences(world.probe_rig)
    X1, uv1 = back[1].correspondences(world.probe_rig)
    assert np.array_equal(X0, X1) and np.array_equal(uv0, uv1)


# ---------------------------------------------------------------------------
# 1-euro filter
# ---------------------------------------------------------------------------


def _run_filter(poses, times, params):
    state, out = OneEuroState(), []
    for p, t in zip(poses, times):
        state, f = one_euro_step(state, params, p, t)
        out.append(f)
    return out


def test_one_euro_dc_convergence(rng):
    T = random_transform(rng, PROBE, CAM)
    out = _run_filter([T] * 100, np.arange(100) / 30, OneEuroParams())
    assert out[-1].allclose(T, atol=1e-6)


def test_one_euro_noise_reduction(rng):
    base = RigidTransform.from_rt(np.eye(3), [10, 20, 300], PROBE, CAM)
    noisy = [RigidTransform(base.quat, base.t + rng.normal(size=3), PROBE, CAM) for _ in range(1000)]
    out = _run_filter(noisy, np.arange(1000) / 30, OneEuroParams())
    t_in = np.array([p.t for p in noisy])
    t_out = np.array([p.t for p in out])
    assert np.all(t_out.std(axis=0) < 0.3 * t_in.std(axis=0))


def _settle_steps(beta):
    a = RigidTransform.identity(PROBE, CAM)
    b = RigidTransform.from_rt(np.eye(3), [10, 0, 0], PROBE, CAM)
    poses = [a] * 10 + [b] * 200
    out = _run_filter(poses, np.arange(len(poses)) / 30, OneEuroParams(beta=beta))
    return next(k for k, p in enumerate(out[10:]) if p.t[0] >= 9.0)


def test_one_euro_step_settles_faster_with_beta():
    steps = [_settle_steps(b) for b in (0.0, 0.05, 0.5, 5.0)]
    assert all(s < 200 for s in steps)
    assert all(b <= a for a, b in zip(steps, steps[1:]))
    assert steps[-1] < steps[0]


def test_one_euro_beta_zero_is_exponential_lowpass(rng):
    xs = rng.normal(size=(50, 3)) * 5
    poses = [RigidTransform(np.array([1.0, 0, 0, 0]), x, PROBE, CAM) for x in xs]
    times = np.arange(50) / 30
    out = _run_filter(poses, times, OneEuroParams(min_cutoff=2.0, beta=0.0))
    a = smoothing_factor(1 / 30, 2.0)
    y = xs[0].copy()
    for k in range(1, 50):
        y = a * xs[k] + (1 - a) * y
        assert np.allclose(out[k].t, y, atol=1e-12)


def test_one_euro_hemisphere_alignment():
    q = rotvec_to_quat(np.array([0, 0, 0.2]))
    a = RigidTransform(q, np.zeros(3), PROBE, CAM)
    b = RigidTransform(-q, np.zeros(3), PROBE, CAM)  # same rotation, flipped sign
    out = _run_filter([a, b, a, b], [0, 0.1, 0.2, 0.3], OneEuroParams())
    for o in out:
        assert pose_error(o, a)[1] < 1e-9


def test_one_euro_timestamps():
    T = RigidTransform.identity(PROBE, CAM)
    state, _ = one_euro_step(OneEuroState(), OneEuroParams(), T, 1.0)
    with pytest.raises(NonMonotonicTimestamp):
        one_euro_step(state, OneEuroParams(), T, 1.0)
    with pytest.raises(ValidationError):
        OneEuroParams(min_cutoff=0.0)


# ---------------------------------------------------------------------------
# Kabsch
# ---------------------------------------------------------------------------


def _objective(R, t, P, Q):
    return float(np.sum((P @ R.T + t - Q) ** 2))


def test_kabsch_identity_and_exact(rng):
    P = rng.normal(scale=20, size=(6, 3))
    assert kabsch(P, P).allclose(RigidTransform.identity(REF, REF), atol=1e-12)
    T = random_transform(rng, REF, REF)
    got = kabsch(P, T.apply(P))
    assert got.allclose(T, atol=1e-9)
    assert _objective(got.rotation, got.t, P, T.apply(P)) <= _objective(T.rotation, T.t, P, T.apply(P)) + 1e-12


def test_kabsch_reflection_against_grid_oracle():
    P = np.array([[0, 0, 0], [10, 0, 0], [0, 6, 0], [0, 0, 3]], float)
    Q = P * np.array([1, 1, -1]) + np.array([1, 2, 3])  # mirror image
    T = kabsch(P, Q)
    assert np.linalg.det(T.rotation) == pytest.approx(1.0)
    best = _objective(T.rotation, T.t, P, Q)
    cq = Q.mean(axis=0)
    cp = P.mean(axis=0)
    # exhaustive grid over rotation vectors around the returned rotation
    steps = np.deg2rad(np.linspace(-6, 6, 13))
    for a, b, c in itertools.product(steps, steps, steps):
        R = quat_to_matrix(rotvec_to_quat(np.array([a, b, c]))) @ T.rotation
        assert _objective(R, cq - R @ cp, P, Q) >= best - 1e-9
    # and a coarse global sweep
    g = np.random.default_rng(0)
    for _ in range(3000):
        q = g.normal(size=4)
        R = quat_to_matrix(q / np.linalg.norm(q))
        assert _objective(R, cq - R @ cp, P, Q) >= best - 1e-9


def test_kabsch_degenerate():
    with pytest.raises(DegenerateConfiguration):
        kabsch(np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]], float), np.zeros((3, 3)))
    with pytest.raises(DegenerateConfiguration):
        kabsch(np.zeros((4, 3)), np.zeros((4, 3)))


# ---------------------------------------------------------------------------
# extrinsic chain
# ---------------------------------------------------------------------------


def test_T_calib_us_identity_case():
    g = LedgePhantomGeometry.from_slot((5, 10, 20), ((2, 20), (4, 22), (6, 24)), RigidTransform.identity(US, CALIB))
    from freehand_us.geom import RoiBox, UsIntrinsics

    intr = UsIntrinsics(0.1, RoiBox(0, 0, 300, 300))
    det = LedgeDetection((None, None, None), g.keypoints_slot()[:, :2] / 0.1, 0.1)
    T = compute_T_calib_us(det, intr, g)
    assert T.allclose(RigidTransform.identity(US, CALIB), atol=1e-9)


def test_T_calib_us_coincident_keypoints():
    from freehand_us.geom import RoiBox, UsIntrinsics

    g = LedgePhantomGeometry.from_slot((5, 10, 20), ((2, 20), (4, 22), (6, 24)), RigidTransform.identity(US, CALIB))
    intr = UsIntrinsics(0.1, RoiBox(0, 0, 300, 300))
    det = LedgeDetection((None, None, None), np.full((4, 2), 7.0), 0.1)
    with pytest.raises(DegenerateConfiguration):
        compute_T_calib_us(det, intr, g)


@pytest.mark.parametrize("depth", [30.0, 40.0, 50.0])
def test_T_calib_us_from_rendered_frames(world, depth):
    intr = world.intrinsics(depth)
    rng = np.random.default_rng(int(depth))
    dets = [
        find_ledge_triplet(detect_ledge_lines(render_ledge_image(world.geometry, intr, 1.0, 0.3, rng)), world.geometry)
        for _ in range(5)
    ]
    dt, dr = pose_error(compute_T_calib_us(dets, intr, world.geometry), world.calib_from_slot)
    assert dt < 0.5 and dr < 0.5


def test_T_us_probe_identity_and_mismatch():
    ident = compute_T_us_probe(
        RigidTransform.identity(US, CALIB), RigidTransform.identity(CAM, CALIB), RigidTransform.identity(CAM, PROBE)
    )
    assert ident.allclose(RigidTransform.identity(PROBE, US))
    with pytest.raises(FrameMismatch):
        compute_T_us_probe(
            RigidTransform.identity(CALIB, US), RigidTransform.identity(CAM, CALIB), RigidTransform.identity(CAM, PROBE)
        )


def test_T_us_probe_from_simulated_chain(world, rng):
    calib_from_us = world.calib_from_slot
    for _ in range(5):
        cam_from_calib = random_transform(rng, CALIB, CAM, 200)
        cam_from_probe = compose(cam_from_calib, compose(calib_from_us, world.T_us_probe))
        got = compute_T_us_probe(calib_from_us, invert(cam_from_calib), invert(cam_from_probe))
        assert got.allclose(world.T_us_probe, atol=1e-9)
        # the chain maps US keypoints onto their Calib positions
        kp_us = world.geometry.keypoints_slot()
        chain = compose(invert(cam_from_calib), compose(cam_from_probe, invert(got)))
        assert np.allclose(chain.apply(kp_us), world.geometry.keypoints_calib, atol=1e-9)


def test_T_us_ref_examples(world, rng):
    cam_from_probe = random_transform(rng, PROBE, CAM)
    cam_is_ref = RigidTransform.identity(CAM, REF)
    got = compute_T_us_ref(invert(cam_from_probe), world.T_us_probe, cam_is_ref)
    assert got.allclose(compose(world.T_us_probe, invert(cam_from_probe)).retag(REF, US), atol=1e-12)
    ident = compute_T_us_ref(RigidTransform.identity(CAM, PROBE), RigidTransform.identity(PROBE, US), RigidTransform.identity(CAM, REF))
    assert ident.allclose(RigidTransform.identity(REF, US))
    with pytest.raises(FrameMismatch):
        compute_T_us_ref(RigidTransform.identity(PROBE, CAM), world.T_us_probe, cam_is_ref)


def test_T_us_ref_invariant_to_camera_motion(world, rng):
    ref_from_probe = RigidTransform.from_rt(np.eye(3), [3, -4, 1], PROBE, REF)
    reference = None
    for t in np.linspace(0, 2, 7):
        cam_from_ref = world.camera_pose(t, 25.0)
        cam_from_probe = compose(cam_from_ref, ref_from_probe)
        T = compute_T_us_ref(invert(cam_from_probe), world.T_us_probe, invert(cam_from_ref))
        reference = reference or T
        assert T.allclose(reference, atol=1e-9)
