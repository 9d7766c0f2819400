"""Fixed-volume nodule phantoms with an analytic inside test."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from freehand_us.errors import NonStarConvex, ValidationError
from freehand_us.geom import quat_normalize, quat_to_matrix
from freehand_us.recon import TriMesh, icosphere

DEFAULT_VOLUME_CM3 = 1.69
# sum of |coefficients| of unit-peak harmonics; keeps the radius >= 0.5
MAX_PERTURBATION = 0.5


@functools.lru_cache(maxsize=8)
def _unit_sphere(subdivisions: int) -> TriMesh:
    return icosphere(1.0, subdivisions)


def real_sph_harm(l: int, m: int, u: np.ndarray) -> np.ndarray:
    """Real spherical harmonic on unit vectors ``u``, rescaled so its peak magnitude is at most 1.

    Evaluated in Cartesian form: the m-th derivative of the Legendre
    polynomial in ``z`` times the real or imaginary part of ``(x + iy)^|m|``.
    """
    u = np.atleast_2d(u)
    am = abs(m)
    dP = np.polynomial.legendre.Legendre.basis(l).deriv(am)(u[:, 2]) if am <= l else np.zeros(len(u))
    norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am))
    if m == 0:
        val = norm * dP
    else:
        w = (u[:, 0] + 1j * u[:, 1]) ** am
        val = math.sqrt(2.0) * norm * dP * (w.real if m > 0 else w.imag)
    return val / math.sqrt((2 * l + 1) / (4 * math.pi))


@dataclass(frozen=True)
class PhantomSpec:
    """Shape family plus target volume.

    ``shape`` is ``"sphere"``, ``"ellipsoid"`` or ``"perturbed"``.  ``axes``
    gives relative semi-axes (only their ratios matter); ``harmonics`` maps
    ``(l, m)`` to the amplitude of a unit-peak real harmonic added to the
    unit radius before the axis stretch.
    """

    shape: str = "sphere"
    target_volume: float = DEFAULT_VOLUME_CM3
    axes: tuple[float, float, float] = (1.0, 1.0, 1.0)
    harmonics: tuple[tuple[int, int, float], ...] = ()
    orientation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    name: str = ""

    def __post_init__(self) -> None:
        if self.shape not in ("sphere", "ellipsoid", "perturbed"):
            raise ValidationError(f"unknown phantom shape {self.shape!r}")
        if not self.target_volume > 0:
            raise ValidationError("target volume must be positive")
        if min(self.axes) <= 0:
            raise ValidationError("axes must be positive")
        if self.shape == "sphere" and (len(set(self.axes)) > 1 or self.harmonics):
            raise ValidationError("a sphere has equal axes and no harmonics")

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "target_volume_cm3": self.target_volume,
            "axes": list(self.axes),
            "harmonics": [list(h) for h in self.harmonics],
            "orientation": list(self.orientation),
            "center_mm": list(self.center),
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PhantomSpec:
        return cls(
            shape=d.get("shape", "sphere"),
            target_volume=float(d.get("target_volume_cm3", DEFAULT_VOLUME_CM3)),
            axes=tuple(float(a) for a in d.get("axes", (1.0, 1.0, 1.0))),
            harmonics=tuple((int(h[0]), int(h[1]), float(h[2])) for h in d.get("harmonics", ())),
            orientation=tuple(float(q) for q in d.get("orientation", (1.0, 0.0, 0.0, 0.0))),
            center=tuple(float(c) for c in d.get("center_mm", (0.0, 0.0, 0.0))),
            name=d.get("name", ""),
        )


@dataclass(frozen=True)
class Phantom:
    """Star-shaped solid ``{c + R diag(k*axes) (rho(u) u)}`` with ``rho = 1 + sum a_lm Y_lm``."""

    spec: PhantomSpec
    scale: float
    rotation: np.ndarray = field(repr=False)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.spec.center, dtype=float)

    @property
    def semi_axes(self) -> np.ndarray:
        return self.scale * np.asarray(self.spec.axes, dtype=float)

    def radial(self, u: np.ndarray) -> np.ndarray:
        rho = np.ones(len(np.atleast_2d(u)))
        for l, m, a in self.spec.harmonics:
            rho = rho + a * real_sph_harm(l, m, u)
        return rho

    @property
    def radius_bound(self) -> float:
        """No surface point lies farther than this from the centre."""
        return float(self.semi_axes.max() * (1.0 + sum(abs(a) for _, _, a in self.spec.harmonics)))

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        d = p - self.center
        out = np.zeros(len(p), dtype=bool)
        near = np.einsum("ij,ij->i", d, d) <= self.radius_bound**2
        q = (d[near] @ self.rotation) / self.semi_axes
        r = np.linalg.norm(q, axis=1)
        if not self.spec.harmonics:
            out[near] = r <= 1.0
            return out
        u = q / np.where(r > 0, r, 1.0)[:, None]
        out[near] = r <= self.radial(u)
        return out

    def surface_points(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(u)
        return (self.radial(u)[:, None] * u * self.semi_axes) @ self.rotation.T + self.center

    def mesh(self, subdivisions: int = 5) -> TriMesh:
        unit = _unit_sphere(subdivisions)
        return TriMesh(self.surface_points(unit.vertices), unit.triangles)

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.mesh(3).vertices - self.center, axis=1).max())


def _unit_volume(harmonics, n_polar: int = 48, n_azim: int = 96) -> float:
    """Volume of ``r <= rho(u)``, i.e. ``(1/3) * integral of rho^3`` over the sphere."""
    x, w = np.polynomial.legendre.leggauss(n_polar)
    phi = 2 * np.pi * np.arange(n_azim) / n_azim
    ct, ph = np.meshgrid(x, phi, indexing="ij")
    st = np.sqrt(1 - ct**2)
    u = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    rho = np.ones(len(u))
    for l, m, a in harmonics:
        rho = rho + a * real_sph_harm(l, m, u)
    weights = (w[:, None] * np.full(n_azim, 2 * np.pi / n_azim)[None, :]).ravel()
    return float((rho**3 * weights).sum() / 3.0)


def _check_star(harmonics) -> None:
    total = sum(abs(a) for _, _, a in harmonics)
    if total > MAX_PERTURBATION:
        raise NonStarConvex(f"perturbation amplitude {total:.3f} exceeds the bound {MAX_PERTURBATION}")
    for l, m, _ in harmonics:
        if l < 1 or abs(m) > l:
            raise ValidationError(f"invalid harmonic index ({l}, {m})")


def make_phantom(spec: PhantomSpec, mesh_subdivisions: int = 5) -> tuple[Phantom, TriMesh, float, float]:
    """Scale ``spec`` to its target volume.

    Returns the implicit shape, a ground-truth mesh, the exact volume (cm^3)
    and the sphericity.  Sphericity uses the exact volume and a
    Richardson-extrapolated area from two fine tessellations.
    """
    _check_star(spec.harmonics)
    unit = _unit_volume(spec.harmonics) * float(np.prod(spec.axes))
    scale = (spec.target_volume * 1000.0 / unit) ** (1.0 / 3.0)
    rot = quat_to_matrix(quat_normalize(np.asarray(spec.orientation, dtype=float)))
    phantom = Phantom(spec, scale, rot)
    volume_mm3 = unit * scale**3
    if spec.shape == "sphere":
        psi = 1.0
    else:
        a6 = phantom.mesh(6).area()
        a7 = phantom.mesh(7).area()
        area = a7 + (a7 - a6) / 3.0
        psi = float(math.pi ** (1 / 3) * (6 * volume_mm3) ** (2 / 3) / area)
    return phantom, phantom.mesh(mesh_subdivisions), volume_mm3 / 1000.0, psi

