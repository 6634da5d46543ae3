"""Grids, scalar/vector field containers, phantoms and grid calculus.

Fields live on uniform Cartesian grids over the square [-1, 1]^2 (or, for
internal resampling work, on arbitrary axis-aligned rectangles with the same
spacing convention).  Phantom test fields carry an analytic callable next to
their node samples so ray quadrature can be made grid-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import SupportViolation
from .geometry import DEFAULT_SUPPORT_RADIUS, DirectionPair, perp

# Relative level below which a Gaussian phantom is treated as zero.
GAUSSIAN_TRUNCATION = 1e-12
_GAUSS_CUT_SIGMAS = float(np.sqrt(-np.log(GAUSSIAN_TRUNCATION)))  # ~5.26


@dataclass(frozen=True)
class Grid2D:
    """Uniform n-by-n node grid on the square [-1, 1]^2."""

    n: int

    def __post_init__(self):
        if self.n < 16:
            raise ValueError("Grid2D needs n >= 16")

    @property
    def spacing(self) -> float:
        return 2.0 / (self.n - 1)

    @property
    def x1(self) -> np.ndarray:
        return -1.0 + self.spacing * np.arange(self.n)

    @property
    def x2(self) -> np.ndarray:
        return -1.0 + self.spacing * np.arange(self.n)

    @property
    def shape(self):
        return (self.n, self.n)

    def nodes(self) -> np.ndarray:
        """(n, n, 2) array of node coordinates, axis 0 indexing x1."""
        a, b = np.meshgrid(self.x1, self.x2, indexing="ij")
        return np.stack([a, b], axis=-1)


@dataclass(frozen=True)
class RectGrid:
    """Axis-aligned rectangular grid with uniform spacing (internal helper)."""

    x1_min: float
    x2_min: float
    n1: int
    n2: int
    spacing: float

    @property
    def x1(self) -> np.ndarray:
        return self.x1_min + self.spacing * np.arange(self.n1)

    @property
    def x2(self) -> np.ndarray:
        return self.x2_min + self.spacing * np.arange(self.n2)

    @property
    def shape(self):
        return (self.n1, self.n2)

    def nodes(self) -> np.ndarray:
        a, b = np.meshgrid(self.x1, self.x2, indexing="ij")
        return np.stack([a, b], axis=-1)


GridLike = Union[Grid2D, RectGrid]


def grid_interpolator(grid: GridLike, values: np.ndarray, fill: float = 0.0):
    """Bilinear interpolator on a grid; points outside return ``fill``."""
    rgi = RegularGridInterpolator(
        (grid.x1, grid.x2), values, method="linear",
        bounds_error=False, fill_value=fill,
    )

    def sample(pts):
        pts = np.asarray(pts, dtype=float)
        return rgi(pts.reshape(-1, 2)).reshape(pts.shape[:-1])

    return sample


@dataclass(frozen=True)
class ScalarField:
    """Grid-sampled scalar function, optionally backed by an analytic callable."""

    grid: GridLike
    values: np.ndarray
    analytic: Optional[Callable] = None

    def sample(self, pts: np.ndarray) -> np.ndarray:
        """Values at arbitrary points: analytic when present, else bilinear."""
        if self.analytic is not None:
            return np.asarray(self.analytic(np.asarray(pts, dtype=float)))
        return grid_interpolator(self.grid, self.values)(pts)

    def to_csv(self, path) -> None:
        save_csv(path, self.values, self.grid)

    @staticmethod
    def from_csv(path) -> "ScalarField":
        values, grid = load_csv(path)
        return ScalarField(grid=grid, values=values)

    def to_pgm(self, path) -> None:
        save_pgm(path, self.values)


@dataclass(frozen=True)
class VectorField2:
    """Planar vector field f = (f1, f2) sampled on a grid."""

    grid: GridLike
    f1: np.ndarray
    f2: np.ndarray
    analytic: Optional[Callable] = None  # pts (..., 2) -> (..., 2)

    def sample(self, pts: np.ndarray) -> np.ndarray:
        if self.analytic is not None:
            return np.asarray(self.analytic(np.asarray(pts, dtype=float)))
        s1 = grid_interpolator(self.grid, self.f1)(pts)
        s2 = grid_interpolator(self.grid, self.f2)(pts)
        return np.stack([s1, s2], axis=-1)

    def perp(self) -> "VectorField2":
        """The rotated field f^perp = (-f2, f1)."""
        analytic = None
        if self.analytic is not None:
            inner = self.analytic
            analytic = lambda pts: perp(np.asarray(inner(pts)))
        return VectorField2(grid=self.grid, f1=-self.f2, f2=self.f1, analytic=analytic)


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianBump:
    """a * exp(-|x-c|^2 / sigma^2), numerically truncated at relative 1e-12."""

    center: tuple = (0.0, 0.0)
    sigma: float = 0.3
    amplitude: float = 1.0

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        r2 = np.sum((pts - np.asarray(self.center)) ** 2, axis=-1)
        vals = self.amplitude * np.exp(-r2 / self.sigma**2)
        cut = (_GAUSS_CUT_SIGMAS * self.sigma) ** 2
        return np.where(r2 <= cut, vals, 0.0)

    def grad(self, pts):
        pts = np.asarray(pts, dtype=float)
        d = pts - np.asarray(self.center)
        return (-2.0 / self.sigma**2) * d * self(pts)[..., None]

    def laplacian(self, pts):
        pts = np.asarray(pts, dtype=float)
        s = np.sum((pts - np.asarray(self.center)) ** 2, axis=-1) / self.sigma**2
        return (4.0 / self.sigma**2) * (s - 1.0) * self(pts)

    def support_radius(self) -> float:
        # Compact support is only approximate; 3 sigma puts the boundary
        # value at e^-9 ~ 1.2e-4 relative, the documented truncation regime.
        return float(np.linalg.norm(self.center)) + 3.0 * self.sigma


@dataclass(frozen=True)
class PolyBump:
    """a * (1 - |x-c|^2/r^2)^p inside radius r, exactly zero outside.

    p >= 3 keeps the field C^2 at the support boundary.
    """

    center: tuple = (0.0, 0.0)
    radius: float = 0.5
    power: int = 3
    amplitude: float = 1.0

    def __post_init__(self):
        if self.power < 3:
            raise ValueError("PolyBump power must be >= 3 for C^2 regularity")

    def _s(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.sum((pts - np.asarray(self.center)) ** 2, axis=-1) / self.radius**2

    def __call__(self, pts):
        s = self._s(pts)
        return np.where(s <= 1.0, self.amplitude * (1.0 - np.minimum(s, 1.0)) ** self.power, 0.0)

    def grad(self, pts):
        pts = np.asarray(pts, dtype=float)
        s = self._s(pts)
        base = np.where(s <= 1.0, (1.0 - np.minimum(s, 1.0)) ** (self.power - 1), 0.0)
        coef = -2.0 * self.amplitude * self.power / self.radius**2
        return coef * base[..., None] * (pts - np.asarray(self.center))

    def laplacian(self, pts):
        s = self._s(pts)
        inside = s <= 1.0
        sm = np.minimum(s, 1.0)
        coef = -4.0 * self.amplitude * self.power / self.radius**2
        vals = coef * (1.0 - sm) ** (self.power - 2) * (1.0 - self.power * sm)
        return np.where(inside, vals, 0.0)

    def support_radius(self) -> float:
        return float(np.linalg.norm(self.center)) + self.radius


@dataclass(frozen=True)
class PotentialPair:
    """Vector phantom f = grad(phi) + perp-grad(psi) from two scalar bumps."""

    phi: Optional[Union[GaussianBump, PolyBump]] = None
    psi: Optional[Union[GaussianBump, PolyBump]] = None

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape)
        if self.phi is not None:
            out += self.phi.grad(pts)
        if self.psi is not None:
            out += perp(self.psi.grad(pts))
        return out

    def support_radius(self) -> float:
        parts = [p.support_radius() for p in (self.phi, self.psi) if p is not None]
        return max(parts) if parts else 0.0


PhantomSpec = Union[GaussianBump, PolyBump, PotentialPair]


def _clip_to_disc(func, radius):
    def clipped(pts):
        pts = np.asarray(pts, dtype=float)
        inside = np.sum(pts * pts, axis=-1) <= radius * radius
        vals = np.asarray(func(pts))
        if vals.shape == pts.shape:  # vector-valued
            return np.where(inside[..., None], vals, 0.0)
        return np.where(inside, vals, 0.0)

    return clipped


def make_phantom(spec: PhantomSpec, grid: GridLike,
                 support_radius: float = DEFAULT_SUPPORT_RADIUS):
    """Sample a phantom on the grid, attaching the analytic callable.

    Raises SupportViolation when the declared support exceeds the support
    disc.  All returned fields are hard-zeroed outside that disc.
    """
    if spec.support_radius() > support_radius + 1e-12:
        raise SupportViolation(
            f"phantom support radius {spec.support_radius():.3f} exceeds {support_radius}"
        )
    analytic = _clip_to_disc(spec, support_radius)
    pts = grid.nodes()
    if isinstance(spec, PotentialPair):
        vals = analytic(pts)
        return VectorField2(grid=grid, f1=vals[..., 0], f2=vals[..., 1], analytic=analytic)
    return ScalarField(grid=grid, values=analytic(pts), analytic=analytic)


# ---------------------------------------------------------------------------
# Grid calculus
# ---------------------------------------------------------------------------


def partials(values: np.ndarray, spacing: float):
    """(d/dx1, d/dx2) by 2nd-order central differences, one-sided at edges."""
    d1 = np.gradient(values, spacing, axis=0, edge_order=2)
    d2 = np.gradient(values, spacing, axis=1, edge_order=2)
    return d1, d2


def dir_deriv_values(values: np.ndarray, spacing: float, dvecs: np.ndarray) -> np.ndarray:
    """Directional derivative of a grid array along a (n1, n2, 2) field."""
    d1, d2 = partials(values, spacing)
    return dvecs[..., 0] * d1 + dvecs[..., 1] * d2


_WHICH_TO_FIELD = {
    "D_u": ("u", False),
    "D_v": ("v", False),
    "Dperp_u": ("u", True),
    "Dperp_v": ("v", True),
}


def directional_derivative(g: ScalarField, pair: DirectionPair, which: str) -> ScalarField:
    """D_u g, D_v g, or their perp variants, as a new grid field."""
    branch, use_perp = _WHICH_TO_FIELD[which]
    pts = g.grid.nodes()
    d = pair.u_at(pts) if branch == "u" else pair.v_at(pts)
    if use_perp:
        d = perp(d)
    vals = dir_deriv_values(g.values, g.grid.spacing, d)
    return ScalarField(grid=g.grid, values=vals)


def div_curl(f: VectorField2):
    """(delta f, delta_perp f) = (d1 f1 + d2 f2, d1 f2 - d2 f1)."""
    h = f.grid.spacing
    d1f1, d2f1 = partials(f.f1, h)
    d1f2, d2f2 = partials(f.f2, h)
    div = ScalarField(grid=f.grid, values=d1f1 + d2f2)
    curl = ScalarField(grid=f.grid, values=d1f2 - d2f1)
    return div, curl


def gradient_field(g: ScalarField) -> VectorField2:
    d1, d2 = partials(g.values, g.grid.spacing)
    return VectorField2(grid=g.grid, f1=d1, f2=d2)


def perp_gradient_field(g: ScalarField) -> VectorField2:
    d1, d2 = partials(g.values, g.grid.spacing)
    return VectorField2(grid=g.grid, f1=-d2, f2=d1)


def helmholtz_decompose(f: VectorField2, tol: float = 1e-10):
    """Split f = grad(phi) + perp-grad(psi), potentials vanishing on the unit circle.

    Solves Laplace(phi) = div f and Laplace(psi) = curl f on the unit disc
    with zero Dirichlet data.
    """
    from .pde import PoissonProblem, poisson_dirichlet  # local import: pde uses fields

    div, curl = div_curl(f)
    phi = poisson_dirichlet(PoissonProblem(rhs=div, domain_radius=1.0, tol=tol))
    psi = poisson_dirichlet(PoissonProblem(rhs=curl, domain_radius=1.0, tol=tol))
    return phi, psi


# ---------------------------------------------------------------------------
# Error metrics
# ---------------------------------------------------------------------------


def disc_mask(grid: GridLike, radius: float = DEFAULT_SUPPORT_RADIUS,
              collar_cells: int = 2) -> np.ndarray:
    """Nodes inside the support disc shrunk by a collar of grid cells."""
    r = radius - collar_cells * grid.spacing
    pts = grid.nodes()
    return np.sum(pts * pts, axis=-1) <= r * r


def rel_l2(approx: np.ndarray, exact: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    if mask is None:
        mask = np.ones(approx.shape, dtype=bool)
    denom = float(np.linalg.norm(exact[mask]))
    if denom == 0.0:
        return float(np.linalg.norm(approx[mask]))
    return float(np.linalg.norm(approx[mask] - exact[mask]) / denom)


def rel_linf(approx: np.ndarray, exact: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    if mask is None:
        mask = np.ones(approx.shape, dtype=bool)
    denom = float(np.max(np.abs(exact[mask])))
    if denom == 0.0:
        return float(np.max(np.abs(approx[mask])))
    return float(np.max(np.abs(approx[mask] - exact[mask])) / denom)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_csv(path, values: np.ndarray, grid: GridLike) -> None:
    """Row-major CSV with a '# n=<n> spacing=<s>' header; bit-exact round trip."""
    n = values.shape[0]
    header = f"n={n} spacing={grid.spacing!r}"
    np.savetxt(path, values, fmt="%.17g", delimiter=",", header=header)


def load_csv(path):
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().lstrip("#").strip()
    meta = dict(item.split("=") for item in header.split())
    values = np.loadtxt(path, delimiter=",", skiprows=1)
    n = int(meta["n"])
    values = values.reshape(n, -1)
    grid = Grid2D(n=n)
    if abs(grid.spacing - float(meta["spacing"])) > 1e-15:
        # Not a standard square grid; rebuild a rect grid anchored at -1.
        grid = RectGrid(x1_min=-1.0, x2_min=-1.0, n1=values.shape[0],
                        n2=values.shape[1], spacing=float(meta["spacing"]))
    return values, grid


def save_pgm(path, values: np.ndarray) -> None:
    """16-bit binary PGM preview, min-max scaled."""
    lo = float(np.min(values))
    hi = float(np.max(values))
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    img = np.round((values - lo) * scale).astype(">u2")
    # PGM raster is rows top to bottom: show x2 upward, x1 to the right.
    img = img.T[::-1]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode())
        fh.write(img.tobytes())


def pad_grid(grid: GridLike, cells: int) -> RectGrid:
    """Extend a grid outward by whole cells on every side (same lattice)."""
    x1 = grid.x1
    x2 = grid.x2
    h = grid.spacing
    return RectGrid(
        x1_min=float(x1[0]) - cells * h,
        x2_min=float(x2[0]) - cells * h,
        n1=len(x1) + 2 * cells,
        n2=len(x2) + 2 * cells,
        spacing=h,
    )


def subgrid_slices(outer: GridLike, inner: GridLike):
    """Index slices of ``inner`` nodes within ``outer`` (same lattice assumed)."""
    h = outer.spacing
    i0 = int(round((inner.x1[0] - outer.x1[0]) / h))
    j0 = int(round((inner.x2[0] - outer.x2[0]) / h))
    if not (0 <= i0 and 0 <= j0 and i0 + len(inner.x1) <= len(outer.x1)
            and j0 + len(inner.x2) <= len(outer.x2)):
        raise ValueError("inner grid does not sit inside outer grid")
    return slice(i0, i0 + len(inner.x1)), slice(j0, j0 + len(inner.x2))
