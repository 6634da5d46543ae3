"""Branch direction fields of V-lines and pointwise geometric quantities.

A vertex x carries two unit ray directions u(x), v(x).  Supported families:
constant directions (linear detector arrays), focal directions pointing at a
fixed focus outside the unit disc (circular arrays), and user-supplied
straight-line fields.  Everything downstream (quadrature, stencil
coefficients, transport drifts) is built from the quantities computed here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateGeometry

#: Radius of the disc that carries all phantom support.  Fields vanish near
#: the unit circle so one-sided stencils never touch nonzero data.
DEFAULT_SUPPORT_RADIUS = 0.9

#: |det(v, u)| below this is treated as degenerate (inversions divide by it).
DEGENERACY_EPS = 1e-8

#: Points sampled along each ray when checking straightness.
STRAIGHTNESS_SAMPLES = 16

# Step for the fallback finite-difference divergence of custom fields.
_FD_STEP = 1e-5


def perp(vecs: np.ndarray) -> np.ndarray:
    """90-degree rotation (a, b) -> (-b, a), applied along the last axis."""
    out = np.empty_like(vecs)
    out[..., 0] = -vecs[..., 1]
    out[..., 1] = vecs[..., 0]
    return out


def _unit_rows(vecs):
    norms = np.linalg.norm(vecs, axis=-1, keepdims=True)
    return vecs / norms


@dataclass(frozen=True)
class DirectionPair:
    """The pair of branch direction fields u(x), v(x).

    Use the ``constant``, ``focal`` or ``custom`` constructors; ``custom``
    takes a vectorized callable mapping points of shape (..., 2) to a tuple
    (u, v) of arrays of the same shape.
    """

    kind: str
    u: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    focus_u: Optional[np.ndarray] = None
    focus_v: Optional[np.ndarray] = None
    func: Optional[Callable] = None

    @staticmethod
    def constant(u, v) -> "DirectionPair":
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        for name, d in (("u", u), ("v", v)):
            if abs(np.linalg.norm(d) - 1.0) > 1e-12:
                raise ValueError(f"constant direction {name} must be unit length")
        if abs(v[0] * u[1] - v[1] * u[0]) <= DEGENERACY_EPS:
            raise DegenerateGeometry("constant directions are linearly dependent")
        return DirectionPair(kind="constant", u=u, v=v)

    @staticmethod
    def focal(focus_u, focus_v) -> "DirectionPair":
        fu = np.asarray(focus_u, dtype=float)
        fv = np.asarray(focus_v, dtype=float)
        # Foci strictly outside the closed unit disc keep the fields C^1 on it.
        for name, f in (("focus_u", fu), ("focus_v", fv)):
            if np.linalg.norm(f) <= 1.0:
                raise ValueError(f"{name} must lie strictly outside the unit disc")
        return DirectionPair(kind="focal", focus_u=fu, focus_v=fv)

    @staticmethod
    def custom(func: Callable) -> "DirectionPair":
        return DirectionPair(kind="custom", func=func)

    # -- vectorized field evaluation ------------------------------------

    def u_at(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.kind == "constant":
            return np.broadcast_to(self.u, pts.shape).copy()
        if self.kind == "focal":
            return _unit_rows(self.focus_u - pts)
        return np.asarray(self.func(pts)[0], dtype=float)

    def v_at(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.kind == "constant":
            return np.broadcast_to(self.v, pts.shape).copy()
        if self.kind == "focal":
            return _unit_rows(self.focus_v - pts)
        return np.asarray(self.func(pts)[1], dtype=float)

    def div_u_at(self, pts: np.ndarray) -> np.ndarray:
        return self._div(pts, branch="u")

    def div_v_at(self, pts: np.ndarray) -> np.ndarray:
        return self._div(pts, branch="v")

    def _div(self, pts, branch):
        pts = np.asarray(pts, dtype=float)
        if self.kind == "constant":
            return np.zeros(pts.shape[:-1])
        if self.kind == "focal":
            focus = self.focus_u if branch == "u" else self.focus_v
            # Closed form: div (x0-x)/|x0-x| = -1/|x0-x| in the plane.
            return -1.0 / np.linalg.norm(focus - pts, axis=-1)
        field = self.u_at if branch == "u" else self.v_at
        e1 = np.array([_FD_STEP, 0.0])
        e2 = np.array([0.0, _FD_STEP])
        d1 = (field(pts + e1)[..., 0] - field(pts - e1)[..., 0]) / (2 * _FD_STEP)
        d2 = (field(pts + e2)[..., 1] - field(pts - e2)[..., 1]) / (2 * _FD_STEP)
        return d1 + d2


@dataclass(frozen=True)
class GeomSample:
    """All pointwise geometric quantities at a single vertex."""

    u: np.ndarray
    v: np.ndarray
    c_uv: float
    c_perp_uv: float
    div_u: float
    div_v: float
    det_vu: float


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_exit: float


@dataclass(frozen=True)
class ValidationReport:
    """Worst-case violations of the straight-field hypotheses on a grid."""

    max_unit_norm_error: float
    max_straightness_error: float
    min_abs_det: float
    tol: float
    passed: bool


def geometry_fields(pair: DirectionPair, pts: np.ndarray) -> dict:
    """Vectorized bundle of u, v, c_uv, c_perp_uv, div_u, div_v, det_vu."""
    u = pair.u_at(pts)
    v = pair.v_at(pts)
    c_uv = np.sum(u * v, axis=-1)
    c_perp_uv = np.sum(u * perp(v), axis=-1)
    det_vu = v[..., 0] * u[..., 1] - v[..., 1] * u[..., 0]
    return {
        "u": u,
        "v": v,
        "c_uv": c_uv,
        "c_perp_uv": c_perp_uv,
        "div_u": pair.div_u_at(pts),
        "div_v": pair.div_v_at(pts),
        "det_vu": det_vu,
    }


def sample_geometry(pair: DirectionPair, x, eps: float = DEGENERACY_EPS) -> GeomSample:
    """Evaluate all pointwise quantities at one vertex x.

    Raises DegenerateGeometry when |det(v, u)| < eps there.
    """
    x = np.asarray(x, dtype=float)
    g = geometry_fields(pair, x[None, :])
    det = float(g["det_vu"][0])
    if abs(det) < eps:
        raise DegenerateGeometry(f"|det(v,u)| = {abs(det):.3e} at x = {x}")
    return GeomSample(
        u=g["u"][0],
        v=g["v"][0],
        c_uv=float(g["c_uv"][0]),
        c_perp_uv=float(g["c_perp_uv"][0]),
        div_u=float(g["div_u"][0]),
        div_v=float(g["div_v"][0]),
        det_vu=det,
    )


def ray_exit_length(points: np.ndarray, dirs: np.ndarray, radius: float) -> np.ndarray:
    """Largest t >= 0 with |p + t d| <= radius, vectorized; 0 when the ray misses.

    This is the positive root of |p + t d|^2 = radius^2 (directions unit);
    clamped to 0 for outside points whose ray points away from the disc.
    """
    points = np.asarray(points, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    b = np.sum(points * dirs, axis=-1)
    c = np.sum(points * points, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0.0
    t = np.zeros(points.shape[:-1])
    root = -b[hit] + np.sqrt(disc[hit])
    t[hit] = np.maximum(root, 0.0)
    return t


def trace_ray(pair: DirectionPair, x, branch: str = "u",
              radius: float = DEFAULT_SUPPORT_RADIUS) -> Ray:
    """Ray from x along the requested branch, cut at the support-disc exit."""
    x = np.asarray(x, dtype=float)
    d = (pair.u_at if branch.lower() == "u" else pair.v_at)(x[None, :])[0]
    t = float(ray_exit_length(x[None, :], d[None, :], radius)[0])
    return Ray(origin=x, direction=d, t_exit=t)


def validate_hypotheses(pair: DirectionPair, grid, tol: float = 1e-6) -> ValidationReport:
    """Check unit norm, straightness and linear independence on grid nodes.

    Straightness samples STRAIGHTNESS_SAMPLES points along each branch ray
    inside the unit disc and measures max |d(x + t d(x)) - d(x)|.
    """
    pts = grid.nodes().reshape(-1, 2)
    pts = pts[np.linalg.norm(pts, axis=-1) <= 1.0]
    unit_err = 0.0
    straight_err = 0.0
    for field in (pair.u_at, pair.v_at):
        d = field(pts)
        unit_err = max(unit_err, float(np.max(np.abs(np.linalg.norm(d, axis=-1) - 1.0))))
        t_exit = ray_exit_length(pts, d, 1.0)
        for frac in np.linspace(0.0, 1.0, STRAIGHTNESS_SAMPLES):
            probe = pts + (frac * t_exit)[:, None] * d
            straight_err = max(straight_err, float(np.max(np.abs(field(probe) - d))))
    det = geometry_fields(pair, pts)["det_vu"]
    min_det = float(np.min(np.abs(det)))
    passed = unit_err <= tol and straight_err <= tol and min_det > DEGENERACY_EPS
    return ValidationReport(
        max_unit_norm_error=unit_err,
        max_straightness_error=straight_err,
        min_abs_det=min_det,
        tol=tol,
        passed=passed,
    )
