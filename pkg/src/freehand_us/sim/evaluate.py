"""Volume-error evaluation: full reconstruction versus the orthogonal-plane ellipsoid baseline."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from freehand_us.errors import ValidationError
from freehand_us.geom import FrameId, RigidTransform, quat_multiply, rotvec_to_quat
from freehand_us.recon import TriMesh, ellipsoid_volume, reconstruct
from freehand_us.sim.phantom import Phantom, PhantomSpec, make_phantom
from freehand_us.sim.render import render_us_frame, threshold_segment
from freehand_us.sim.sweep import SimSession, SweepSpec, dump_json, simulate_sweep, track_session
from freehand_us.sim.world import SimWorld

NODULE_CENTER = (0.0, 0.0, -20.0)
PSI_BINS = (0.6, 0.7, 0.8, 0.9, 1.0)
BASELINE_DEPTH_MM = 50.0
METHODS = ("ellipsoid_baseline", "reconstruction")


def _orientation(tilt_x_deg: float, tilt_z_deg: float) -> tuple[float, float, float, float]:
    """Long (local x) axis along the sweep direction, then tilted."""
    along = rotvec_to_quat(np.array([0.0, 0.0, math.pi / 2]))
    tilt = quat_multiply(rotvec_to_quat(np.deg2rad([tilt_x_deg, 0.0, 0.0])), rotvec_to_quat(np.deg2rad([0.0, 0.0, tilt_z_deg])))
    return tuple(float(v) for v in quat_multiply(tilt, along))


def default_phantom_set(volume_cm3: float = 1.69) -> list[PhantomSpec]:
    """Eight fixed-volume phantoms with sphericity from 1.0 down to about 0.63."""
    rows = [
        ("sphere", "sphere", (1, 1, 1), ()),
        ("ellipsoid_2to1", "ellipsoid", (2, 1, 1), ()),
        ("bumpy_sphere", "perturbed", (1, 1, 1), ((3, 2, 0.3), (4, 1, 0.2))),
        ("bumpy_2to1", "perturbed", (2, 1, 1), ((3, 2, 0.3), (4, 1, 0.2))),
        ("bumpy_2.5to1", "perturbed", (2.5, 1, 0.8), ((2, 1, 0.25), (3, 3, 0.25))),
        ("perturbed_3to1", "perturbed", (3, 1, 1), ((2, 2, 0.25), (3, 1, 0.25))),
        ("flat_3to1", "perturbed", (3, 1, 0.6), ((3, 2, 0.3), (4, 3, 0.2))),
        ("flat_lobed_3to1", "perturbed", (3, 1.2, 0.5), ((3, 2, 0.25), (4, 1, 0.25))),
    ]
    specs = []
    for k, (name, shape, axes, harm) in enumerate(rows):
        orient = (1.0, 0.0, 0.0, 0.0) if shape == "sphere" else _orientation(12.0 + 3 * k, 8.0 - 2 * k)
        specs.append(PhantomSpec(shape, volume_cm3, tuple(float(a) for a in axes), harm, orient, NODULE_CENTER, name))
    return specs


def sweep_for(mesh: TriMesh, spacing_mm: float = 0.5, margin_mm: float = 3.0, **kwargs) -> SweepSpec:
    """Sweep along Ref y covering ``mesh`` with ``margin_mm`` on both ends."""
    lo, hi = mesh.vertices[:, 1].min() - margin_mm, mesh.vertices[:, 1].max() + margin_mm
    n = int(math.ceil((hi - lo) / spacing_mm)) + 1
    return SweepSpec(start=(0.0, float(lo), 0.0), end=(0.0, float(hi), 0.0), n_frames=n, **kwargs)


def mesh_moments(mesh: TriMesh) -> tuple[float, np.ndarray, np.ndarray]:
    """Volume, centroid and second central moment (per unit volume) of a closed mesh."""
    a, b, c = mesh.corners
    v = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
    s = a + b + c
    vol = v.sum()
    centroid = (v[:, None] * s).sum(axis=0) / 4.0 / vol
    outer = sum(np.einsum("i,ij,ik->jk", v, x, x) for x in (a, b, c)) + np.einsum("i,ij,ik->jk", v, s, s)
    second = outer / 20.0 / vol
    return float(vol), centroid, second - np.outer(centroid, centroid)


def principal_axes(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Centroid and principal directions as columns, longest first."""
    _, centroid, cov = mesh_moments(mesh)
    w, vec = np.linalg.eigh(cov)
    vec = vec[:, np.argsort(w)[::-1]]
    if np.linalg.det(vec) < 0:
        vec[:, 2] = -vec[:, 2]
    return centroid, vec


def _plane_through(center: np.ndarray, x_axis: np.ndarray, y_axis: np.ndarray, intr) -> RigidTransform:
    """US -> Ref pose whose ROI centre sits on ``center``."""
    R = np.stack([x_axis, y_axis, np.cross(x_axis, y_axis)], axis=1)
    half = intr.s_us * np.array([(intr.roi.w - 1) / 2.0, (intr.roi.h - 1) / 2.0, 0.0])
    return RigidTransform.from_rt(R, center - R @ half, FrameId.US, FrameId.REF)


def _extents(mask: np.ndarray, s: float) -> tuple[float, float]:
    rows, cols = np.nonzero(mask)
    if rows.min() == 0 or cols.min() == 0 or rows.max() == mask.shape[0] - 1 or cols.max() == mask.shape[1] - 1:
        raise ValidationError("phantom cross-section touches the field-of-view border")
    return s * (cols.max() - cols.min() + 1), s * (rows.max() - rows.min() + 1)


def ellipsoid_baseline(phantom: Phantom, mesh: TriMesh, world: SimWorld | None = None, speckle: float = 0.1, seed: int = 0) -> dict:
    """Caliper-style estimate from two orthogonal planes through the centroid.

    Plane A holds the longest and middle principal axes, plane B the longest
    and shortest; the longest axis runs down the image.  Extents are the
    segmented mask spans.
    """
    world = world or SimWorld()
    intr = world.intrinsics(BASELINE_DEPTH_MM)
    c, axes = principal_axes(mesh)
    e1, e2, e3 = axes.T
    rng = np.random.default_rng(seed)
    mask_a = threshold_segment(render_us_frame(phantom, _plane_through(c, e2, e1, intr), intr, speckle, rng))
    mask_b = threshold_segment(render_us_frame(phantom, _plane_through(c, e3, e1, intr), intr, speckle, rng))
    width, length = _extents(mask_a, intr.s_us)
    height, _ = _extents(mask_b, intr.s_us)
    return {"length_mm": length, "width_mm": width, "height_mm": height, "volume_cm3": ellipsoid_volume(length, width, height)}


def simulate_phantom_sessions(
    specs: Iterable[PhantomSpec], world: SimWorld | None = None, seed: int = 0, **sweep_kwargs
) -> list[SimSession]:
    world = world or SimWorld()
    sessions = []
    for k, spec in enumerate(specs):
        _, mesh, _, _ = make_phantom(spec)
        sessions.append(simulate_sweep(spec, sweep_for(mesh, **sweep_kwargs), world, seed=seed + k))
    return sessions


def _psi_bin(psi: float) -> str:
    k = int(np.clip(np.searchsorted(PSI_BINS, psi, side="right") - 1, 0, len(PSI_BINS) - 2))
    lo, hi = PSI_BINS[k], PSI_BINS[k + 1]
    return f"[{lo:.1f},{hi:.1f}{']' if k == len(PSI_BINS) - 2 else ')'}"


def evaluate(sessions: Sequence[SimSession], methods: Sequence[str] = METHODS, smooth_iterations: int = 10) -> dict:
    """Absolute volume error per phantom and method, with means per sphericity bin."""
    for m in methods:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}")
    rows = []
    for k, session in enumerate(sessions):
        phantom, mesh, v_gt, psi = make_phantom(session.phantom_spec)
        row = {"name": session.phantom_spec.name or f"phantom{k}", "psi_gt": psi, "volume_gt_cm3": v_gt, "seed": session.seed}
        if "ellipsoid_baseline" in methods:
            base = ellipsoid_baseline(phantom, mesh, session.world, session.sweep.speckle, session.seed)
            row["ellipsoid_baseline_cm3"] = base["volume_cm3"]
            row["ellipsoid_baseline_abs_err_cm3"] = abs(base["volume_cm3"] - v_gt)
        if "reconstruction" in methods:
            rec = reconstruct(track_session(session), session.intr, smooth_iterations=smooth_iterations)
            row["reconstruction_cm3"] = rec.volume_cm3
            row["reconstruction_abs_err_cm3"] = abs(rec.volume_cm3 - v_gt)
            row["reconstruction_psi"] = rec.sphericity
        row["psi_bin"] = _psi_bin(psi)
        rows.append(row)
    bins: dict[str, dict] = {}
    for row in rows:
        b = bins.setdefault(row["psi_bin"], {"n": 0, **{m: [] for m in methods}})
        b["n"] += 1
        for m in methods:
            b[m].append(row[f"{m}_abs_err_cm3"])
    summary = {
        key: {"n": val["n"], **{f"{m}_mean_abs_err_cm3": float(np.mean(val[m])) for m in methods}}
        for key, val in sorted(bins.items())
    }
    return {"methods": list(methods), "phantoms": rows, "psi_bins": summary}


CSV_FIELDS = (
    "name", "psi_gt", "psi_bin", "volume_gt_cm3", "ellipsoid_baseline_cm3", "ellipsoid_baseline_abs_err_cm3",
    "reconstruction_cm3", "reconstruction_abs_err_cm3", "reconstruction_psi", "seed",
)


def write_report(report: dict, out_dir: str | Path, stem: str = "evaluation") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out / f"{stem}.json", out / f"{stem}.csv"
    dump_json(json_path, report)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in report["phantoms"]:
            writer.writerow(row)
    return json_path, csv_path
