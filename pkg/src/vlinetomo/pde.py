"""Poisson (disc, zero Dirichlet) and linear transport solvers.

The Poisson solver discretizes the Laplacian with the 5-point stencil,
switching to Shortley-Weller shortened arms where a neighbor falls outside
the circular boundary, and solves the resulting sparse system directly with
a residual check.  The transport solver integrates characteristics of the
drift backward to the support-disc inflow and accumulates the source with an
integrating-factor trapezoid rule on the stored path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import NoConvergence, NoExit, StalledCharacteristic
from .fields import GridLike, ScalarField
from .geometry import DEFAULT_SUPPORT_RADIUS

POISSON_TOL = 1e-10
_MIN_DRIFT = 1e-6


@dataclass(frozen=True)
class PoissonProblem:
    """Laplace(w) = rhs inside the disc of ``domain_radius``, w = 0 on the circle."""

    rhs: ScalarField
    domain_radius: float = 1.0
    tol: float = POISSON_TOL


def solve_poisson_disc(rhs_values: np.ndarray, x1: np.ndarray, x2: np.ndarray,
                       radius: float, tol: float = POISSON_TOL) -> np.ndarray:
    """Core solver on an axis-aligned grid; returns a full array, zero outside."""
    h = float(x1[1] - x1[0])
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    inside = X1**2 + X2**2 < radius**2
    k = int(np.count_nonzero(inside))
    if k == 0:
        return np.zeros_like(rhs_values)
    index = -np.ones(inside.shape, dtype=np.int64)
    index[inside] = np.arange(k)
    ii, jj = np.nonzero(inside)
    a = X1[inside]
    b = X2[inside]

    def padded_neighbor_inside(di, dj):
        ni = ii + di
        nj = jj + dj
        ok = (0 <= ni) & (ni < inside.shape[0]) & (0 <= nj) & (nj < inside.shape[1])
        nin = np.zeros(k, dtype=bool)
        nin[ok] = inside[ni[ok], nj[ok]]
        col = np.full(k, -1, dtype=np.int64)
        col[nin] = index[ni[nin], nj[nin]]
        return nin, col

    # Arm lengths toward the circle along each axis direction.
    half1 = np.sqrt(np.maximum(radius**2 - b**2, 0.0))
    half2 = np.sqrt(np.maximum(radius**2 - a**2, 0.0))
    arms = {}
    cols = {}
    for name, (di, dj), cut in (
        ("E", (1, 0), -a + half1),
        ("W", (-1, 0), a + half1),
        ("N", (0, 1), -b + half2),
        ("S", (0, -1), b + half2),
    ):
        nin, col = padded_neighbor_inside(di, dj)
        arms[name] = np.where(nin, h, cut)
        cols[name] = col

    hE, hW, hN, hS = arms["E"], arms["W"], arms["N"], arms["S"]
    diag = -2.0 / (hE * hW) - 2.0 / (hN * hS)
    rows = [np.arange(k)]
    colidx = [np.arange(k)]
    data = [diag]
    for name, other in (("E", "W"), ("W", "E"), ("N", "S"), ("S", "N")):
        coupled = cols[name] >= 0
        coef = 2.0 / (arms[name] * (arms[name] + arms[other]))
        rows.append(np.arange(k)[coupled])
        colidx.append(cols[name][coupled])
        data.append(coef[coupled])
    mat = sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(colidx))),
        shape=(k, k),
    )
    rhs = rhs_values[inside]
    sol = spsolve(mat, rhs)
    scale = max(float(np.linalg.norm(rhs)), 1e-300)
    residual = float(np.linalg.norm(mat @ sol - rhs)) / scale
    if residual > tol:
        raise NoConvergence(f"Poisson residual {residual:.2e} exceeds {tol:.1e}")
    out = np.zeros_like(rhs_values, dtype=float)
    out[inside] = sol
    return out


def poisson_dirichlet(problem: PoissonProblem) -> ScalarField:
    grid = problem.rhs.grid
    values = solve_poisson_disc(problem.rhs.values, grid.x1, grid.x2,
                                problem.domain_radius, problem.tol)
    return ScalarField(grid=grid, values=values)


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransportProblem:
    """(drift . grad) h + absorption * h = source, h = 0 on the inflow boundary.

    ``drift`` and ``absorption`` are vectorized callables of points (..., 2);
    ``source`` is a grid field (sampled analytically when it carries a
    callable).  The unknown is supported in the disc of ``support_radius``,
    which supplies the zero inflow value.
    """

    drift: Callable
    absorption: Callable
    source: ScalarField
    inflow_value: float = 0.0
    support_radius: float = DEFAULT_SUPPORT_RADIUS


def _unit_drift(problem, pts):
    d = np.asarray(problem.drift(pts), dtype=float)
    mag = np.linalg.norm(d, axis=-1)
    if np.any(mag < _MIN_DRIFT):
        raise StalledCharacteristic(
            f"|drift| fell below {_MIN_DRIFT:.0e} along a characteristic"
        )
    return d / mag[..., None], mag


def _coeffs_along(problem, pts):
    """(absorption, source) divided by |drift|: the unit-speed ODE coefficients."""
    _, mag = _unit_drift(problem, pts)
    a = np.asarray(problem.absorption(pts), dtype=float)
    q = np.asarray(problem.source.sample(pts), dtype=float)
    return a / mag, q / mag


def transport_solve(problem: TransportProblem, grid: GridLike,
                    step_factor: float = 0.5, max_path_length: float = 4.0,
                    chunk: int = 8192) -> ScalarField:
    """Method of characteristics for the linear transport problem.

    Characteristics are traced backward (RK4 on the unit-speed drift, step =
    ``step_factor`` * spacing) from every node inside the support disc until
    they leave it; the stored path is then integrated forward from the exit
    point with an integrating-factor trapezoid scheme.
    """
    rho = problem.support_radius
    ds = step_factor * grid.spacing
    cap = int(np.ceil(max_path_length / ds)) + 1
    nodes = grid.nodes().reshape(-1, 2)
    inside = np.sum(nodes * nodes, axis=-1) <= rho * rho
    out = np.zeros(len(nodes))
    sel_idx = np.nonzero(inside)[0]
    for lo in range(0, len(sel_idx), chunk):
        idx = sel_idx[lo:lo + chunk]
        out[idx] = _solve_chunk(problem, nodes[idx], rho, ds, cap)
    return ScalarField(grid=grid, values=out.reshape(grid.shape))


def _rk4_backward(problem, x, ds):
    def rhs(p):
        return -_unit_drift(problem, p)[0]

    k1 = rhs(x)
    k2 = rhs(x + 0.5 * ds * k1)
    k3 = rhs(x + 0.5 * ds * k2)
    k4 = rhs(x + ds * k3)
    return x + (ds / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _circle_crossing(p0, p1, rho):
    """Fraction lam in (0, 1] with |p0 + lam (p1 - p0)| = rho (p0 inside)."""
    d = p1 - p0
    aa = np.sum(d * d, axis=-1)
    bb = np.sum(p0 * d, axis=-1)
    cc = np.sum(p0 * p0, axis=-1) - rho * rho
    disc = np.maximum(bb * bb - aa * cc, 0.0)
    lam = (-bb + np.sqrt(disc)) / np.maximum(aa, 1e-300)
    return np.clip(lam, 0.0, 1.0)


def _solve_chunk(problem, starts, rho, ds, cap):
    c = len(starts)
    x = starts.copy()
    active = np.ones(c, dtype=bool)
    a0, q0 = _coeffs_along(problem, x)
    atil = [a0]
    qtil = [q0]
    seglens = []
    for _ in range(cap):
        if not active.any():
            break
        x_new = x.copy()
        x_new[active] = _rk4_backward(problem, x[active], ds)
        seg = np.where(active, ds, 0.0)
        r2 = np.sum(x_new * x_new, axis=-1)
        crossed = active & (r2 > rho * rho)
        if crossed.any():
            lam = _circle_crossing(x[crossed], x_new[crossed], rho)
            x_new[crossed] = x[crossed] + lam[:, None] * (x_new[crossed] - x[crossed])
            seg[crossed] = lam * ds
        a_new = np.zeros(c)
        q_new = np.zeros(c)
        if active.any():
            a_new[active], q_new[active] = _coeffs_along(problem, x_new[active])
        atil.append(a_new)
        qtil.append(q_new)
        seglens.append(seg)
        active &= ~crossed
        x = x_new
    if active.any():
        raise NoExit(
            f"{int(active.sum())} characteristics exceeded path length "
            f"{cap * ds:.2f} without leaving the support disc"
        )
    # Forward sweep from the exit points back to the nodes.  Segments past a
    # node's exit have zero length, so the recurrence is a no-op there.
    h = np.full(c, float(problem.inflow_value))
    for j in range(len(seglens) - 1, -1, -1):
        length = seglens[j]
        d_a = 0.5 * length * (atil[j] + atil[j + 1])
        decay = np.exp(-d_a)
        h = decay * h + 0.5 * length * (decay * qtil[j + 1] + qtil[j])
    return h
