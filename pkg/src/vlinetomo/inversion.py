"""Reconstruction pipelines for every inversion result of the transforms.

Covers: repeated directional differentiation of moment divergent-beam data,
componentwise recovery from the two unweighted ray transforms, curl/div
recovery from the alpha = 1 V-line transforms with the Poisson potential
route, transport-equation inversion of the weighted scalar V-line transform,
the two-stage moment pipelines, and the constant-direction alpha != 0 routes
(tilde-coordinate Poisson solves and the explicit closed-form moment
formulas).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateGeometry, DegenerateMap, GeometryMismatch, NoExit
from .fields import (
    Grid2D,
    GridLike,
    RectGrid,
    ScalarField,
    VectorField2,
    dir_deriv_values,
    grid_interpolator,
    gradient_field,
    pad_grid,
    partials,
    perp_gradient_field,
    subgrid_slices,
)
from .forward import (
    LONGITUDINAL,
    MOMENT_LONGITUDINAL,
    MOMENT_TRANSVERSE,
    TRANSVERSE,
    VLINE_SCALAR,
    TransformData,
    pair_to_dict,
    ray_quadrature,
    vlt_vector,
)
from .geometry import DEGENERACY_EPS, DirectionPair, geometry_fields, perp
from .pde import PoissonProblem, POISSON_TOL, TransportProblem, poisson_dirichlet, solve_poisson_disc, transport_solve

_SHADOW_CAP = 40.0


def _same_geometry(a: DirectionPair, b: DirectionPair) -> bool:
    if a is b:
        return True
    if a.kind != b.kind or a.kind == "custom":
        return a is b
    da, db = pair_to_dict(a), pair_to_dict(b)
    return all(np.allclose(da[key], db[key]) for key in da if key != "kind")


def _check_shared(data1: TransformData, data2: TransformData):
    if data1.grid.shape != data2.grid.shape or not _same_geometry(data1.pair, data2.pair):
        raise GeometryMismatch("data sets do not share grid and geometry")
    if abs(data1.alpha - data2.alpha) > 1e-14:
        raise GeometryMismatch("data sets carry different weights alpha")


# ---------------------------------------------------------------------------
# Section 4: alpha = 0
# ---------------------------------------------------------------------------


def invert_moment_dbt(data: TransformData, pair: DirectionPair) -> ScalarField:
    """Recover h from its k-th moment divergent beam transform.

    The fundamental theorem of calculus along the straight branch gives
    D_d V^0 h = -h and D_d V^k h = -k V^(k-1) h, hence k+1 directional
    derivatives (and a factorial) undo the k-th moment transform.
    """
    grid = data.grid
    d = (pair.u_at if data.branch == "u" else pair.v_at)(grid.nodes())
    vals = data.values
    for _ in range(data.k + 1):
        vals = dir_deriv_values(vals, grid.spacing, d)
    vals = vals * ((-1.0) ** (data.k + 1) / math.factorial(data.k))
    return ScalarField(grid=grid, values=vals)


def recover_vector_from_dbt(dataL: TransformData, dataT: TransformData,
                            pair: DirectionPair) -> VectorField2:
    """f = u (D_u L0 f) + u_perp (D_u T0 f), pointwise in the vertex."""
    _check_shared(dataL, dataT)
    grid = dataL.grid
    u = pair.u_at(grid.nodes())
    du_l = dir_deriv_values(dataL.values, grid.spacing, u)
    du_t = dir_deriv_values(dataT.values, grid.spacing, u)
    f1 = u[..., 0] * du_l - u[..., 1] * du_t
    f2 = u[..., 1] * du_l + u[..., 0] * du_t
    return VectorField2(grid=grid, f1=f1, f2=f2)


# ---------------------------------------------------------------------------
# Section 5: alpha = 1
# ---------------------------------------------------------------------------


def _second_order_bracket(data: TransformData, geo) -> np.ndarray:
    """[D_v D_u + (div(u) c_uv + div(v)) D_u] applied to the data grid."""
    h = data.grid.spacing
    du = dir_deriv_values(data.values, h, geo["u"])
    dvdu = dir_deriv_values(du, h, geo["v"])
    return dvdu + (geo["div_u"] * geo["c_uv"] + geo["div_v"]) * du


def recover_deltas_vlt1(dataL: TransformData, dataT: TransformData,
                        pair: DirectionPair):
    """Recover (curl f, div f) from the alpha = 1 longitudinal/transverse data."""
    _check_shared(dataL, dataT)
    grid = dataL.grid
    geo = geometry_fields(pair, grid.nodes())
    det = geo["det_vu"]
    if np.min(np.abs(det)) < DEGENERACY_EPS:
        raise DegenerateGeometry("det(v, u) vanishes on the grid")
    curl = ScalarField(grid=grid, values=_second_order_bracket(dataL, geo) / det)
    div = ScalarField(grid=grid, values=-_second_order_bracket(dataT, geo) / det)
    return curl, div


def recover_potentials_vlt1(dataL: TransformData, dataT: TransformData,
                            pair: DirectionPair, tol: float = POISSON_TOL):
    """Solve the two Dirichlet problems for the potentials and rebuild f."""
    curl, div = recover_deltas_vlt1(dataL, dataT, pair)
    psi = poisson_dirichlet(PoissonProblem(rhs=curl, domain_radius=1.0, tol=tol))
    phi = poisson_dirichlet(PoissonProblem(rhs=div, domain_radius=1.0, tol=tol))
    grad_phi = gradient_field(phi)
    pgrad_psi = perp_gradient_field(psi)
    f = VectorField2(grid=dataL.grid, f1=grad_phi.f1 + pgrad_psi.f1,
                     f2=grad_phi.f2 + pgrad_psi.f2)
    return phi, psi, f


# ---------------------------------------------------------------------------
# Section 6: scalar V-line transform, any alpha
# ---------------------------------------------------------------------------


def invert_vline_scalar(data: TransformData, alpha: float, pair: DirectionPair,
                        step_factor: float = 0.5) -> ScalarField:
    """Recover h from the weighted V-line transform by transport along alpha u + v.

    Assembles the first-order PDE
        (alpha D_u + D_v) h + [alpha du + dv + c_uv du + alpha c_uv dv] h
            = -[c_uv du + dv] D_u data - D_v D_u data
    (du, dv the branch divergences) and solves it by the method of
    characteristics with zero inflow on the support-disc boundary.
    """
    grid = data.grid
    geo = geometry_fields(pair, grid.nodes())
    h = grid.spacing
    du_data = dir_deriv_values(data.values, h, geo["u"])
    dvdu_data = dir_deriv_values(du_data, h, geo["v"])
    source_vals = -(geo["c_uv"] * geo["div_u"] + geo["div_v"]) * du_data - dvdu_data
    source = ScalarField(grid=grid, values=source_vals)

    def drift(pts):
        return alpha * pair.u_at(pts) + pair.v_at(pts)

    def absorption(pts):
        du = pair.div_u_at(pts)
        dv = pair.div_v_at(pts)
        c = np.sum(pair.u_at(pts) * pair.v_at(pts), axis=-1)
        return alpha * du + dv + c * du + alpha * c * dv

    problem = TransportProblem(drift=drift, absorption=absorption, source=source,
                               support_radius=data.rho)
    return transport_solve(problem, grid, step_factor=step_factor)


# ---------------------------------------------------------------------------
# Section 5 (moments): two-stage recovery from a transform and its 1st moment
# ---------------------------------------------------------------------------


def recover_vector_from_vlt1_moments(data_primary: TransformData,
                                     data_moment: TransformData,
                                     pair: DirectionPair, channel: str,
                                     tol: float = POISSON_TOL,
                                     step_factor: float = 0.5,
                                     return_potentials: bool = False):
    """Recover f from (L1 f, L1^1 f) or (T1 f, T1^1 f).

    Stage 1 recovers one potential through the Poisson route; stage 2
    forward-models the moment transform of that part, leaving the weight -1
    scalar V-line transform of the other potential, which the transport
    inversion recovers.
    """
    if channel not in (LONGITUDINAL, TRANSVERSE):
        raise ValueError(f"channel must be longitudinal or transverse, got {channel!r}")
    grid = data_primary.grid
    rho = data_primary.rho
    geo = geometry_fields(pair, grid.nodes())
    det = geo["det_vu"]
    if np.min(np.abs(det)) < DEGENERACY_EPS:
        raise DegenerateGeometry("det(v, u) vanishes on the grid")
    bracket = _second_order_bracket(data_primary, geo)
    if channel == LONGITUDINAL:
        # Stage 1: L1 data determines curl f, hence psi.
        rhs = ScalarField(grid=grid, values=bracket / det)
        psi = poisson_dirichlet(PoissonProblem(rhs=rhs, domain_radius=1.0, tol=tol))
        known = perp_gradient_field(psi)
        sim = vlt_vector(known, 1.0, pair, MOMENT_LONGITUDINAL, rho=rho,
                         step_factor=step_factor)
    else:
        # Stage 1: T1 data determines div f, hence phi.
        rhs = ScalarField(grid=grid, values=-bracket / det)
        phi = poisson_dirichlet(PoissonProblem(rhs=rhs, domain_radius=1.0, tol=tol))
        known = gradient_field(phi)
        sim = vlt_vector(known, 1.0, pair, MOMENT_TRANSVERSE, rho=rho,
                         step_factor=step_factor)
    # Stage 2: the moment residual is the weight -1 scalar V-line transform
    # of the remaining potential.
    residual = TransformData(grid=grid, values=data_moment.values - sim.values,
                             kind=VLINE_SCALAR, alpha=-1.0, pair=pair, rho=rho)
    other = invert_vline_scalar(residual, -1.0, pair, step_factor=step_factor)
    if channel == LONGITUDINAL:
        phi = other
    else:
        psi = other
    grad_phi = gradient_field(phi)
    pgrad_psi = perp_gradient_field(psi)
    f = VectorField2(grid=grid, f1=grad_phi.f1 + pgrad_psi.f1,
                     f2=grad_phi.f2 + pgrad_psi.f2)
    if return_potentials:
        return f, phi, psi
    return f


# ---------------------------------------------------------------------------
# Section 7: constant directions, alpha != 0
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TildeMap:
    """Weight-dependent linear coordinate change for constant symmetric pairs."""

    alpha: float
    u: np.ndarray
    forward_matrix: np.ndarray
    inverse_matrix: np.ndarray

    def to_tilde(self, pts):
        return np.asarray(pts, dtype=float) @ self.forward_matrix.T

    def from_tilde(self, pts):
        return np.asarray(pts, dtype=float) @ self.inverse_matrix.T

    def partial_rows(self):
        """Coefficient rows expressing tilde partials through plain partials."""
        u1, u2 = self.u
        a = self.alpha
        return (np.array([-(1 + a) * u1 * u2, (1 - a) * u2**2]),
                np.array([(1 - a) * u1**2, -(1 + a) * u1 * u2]))


def make_tilde_map(alpha: float, u) -> TildeMap:
    u = np.asarray(u, dtype=float)
    u1, u2 = u
    if alpha == 0.0 or u1 * u2 == 0.0:
        raise DegenerateMap("tilde map needs alpha != 0 and u1*u2 != 0")
    fwd = (-1.0 / (4.0 * alpha)) * np.array([
        [(1 + alpha) / (u1 * u2), (1 - alpha) / u2**2],
        [(1 - alpha) / u1**2, (1 + alpha) / (u1 * u2)],
    ])
    inv = np.array([
        [-(1 + alpha) * u1 * u2, (1 - alpha) * u1**2],
        [(1 - alpha) * u2**2, -(1 + alpha) * u1 * u2],
    ])
    return TildeMap(alpha=float(alpha), u=u, forward_matrix=fwd, inverse_matrix=inv)


def tilde_partials(values: np.ndarray, spacing: float, tmap: TildeMap):
    """(d/d tilde-x1, d/d tilde-x2) of grid values, no resampling involved."""
    d1, d2 = partials(values, spacing)
    r1, r2 = tmap.partial_rows()
    return r1[0] * d1 + r1[1] * d2, r2[0] * d1 + r2[1] * d2


def _square_rect_grid(half_extent: float, n: int) -> RectGrid:
    spacing = 2.0 * half_extent / (n - 1)
    return RectGrid(x1_min=-half_extent, x2_min=-half_extent, n1=n, n2=n,
                    spacing=spacing)


def tilde_image_grid(tmap: TildeMap, grid: GridLike) -> RectGrid:
    """Square grid covering the image of ``grid`` under the coordinate change."""
    corners = np.array([[grid.x1[0], grid.x2[0]], [grid.x1[0], grid.x2[-1]],
                        [grid.x1[-1], grid.x2[0]], [grid.x1[-1], grid.x2[-1]]])
    ext = float(np.max(np.abs(tmap.to_tilde(corners))))
    n = max(grid.shape)
    return _square_rect_grid(ext, n)


def tilde_transform(field, tmap: TildeMap, direction: str):
    """Resample a field between original and tilde coordinates (bilinear)."""
    if direction not in ("forward", "inverse"):
        raise ValueError("direction must be 'forward' or 'inverse'")
    if direction == "forward":
        out_grid: GridLike = tilde_image_grid(tmap, field.grid)
        back = tmap.from_tilde
    else:
        out_grid = Grid2D(n=max(field.grid.shape))
        back = tmap.to_tilde
    src = back(out_grid.nodes())
    if isinstance(field, VectorField2):
        vals = field.sample(src)
        return VectorField2(grid=out_grid, f1=vals[..., 0], f2=vals[..., 1])
    return ScalarField(grid=out_grid, values=field.sample(src))


def _require_symmetric_constant(pair: DirectionPair):
    if pair.kind != "constant":
        raise DegenerateMap("constant-direction route needs a constant pair")
    u1, u2 = pair.u
    if abs(pair.v[0] + u1) > 1e-12 or abs(pair.v[1] - u2) > 1e-12:
        raise DegenerateMap("constant pair must be in symmetric form v = (-u1, u2)")
    if u1 * u2 == 0.0:
        raise DegenerateMap("symmetric pair needs u1*u2 != 0")
    return float(u1), float(u2)


def recover_vector_const_poisson(dataL: TransformData, dataT: TransformData,
                                 tmap: TildeMap, tol: float = POISSON_TOL,
                                 margin: float = 1.15) -> VectorField2:
    """Recover f from (L_alpha f, T_alpha f) through tilde-coordinate Poisson solves.

    D_u D_v of the two data grids yields the tilde curl and divergence of f;
    the componentwise tilde Laplacians assemble from their tilde partials and
    are inverted on a disc enclosing the mapped support with zero boundary
    data.
    """
    _check_shared(dataL, dataT)
    pair = dataL.pair
    u1, u2 = _require_symmetric_constant(pair)
    if abs(tmap.alpha - dataL.alpha) > 1e-12 or not np.allclose(tmap.u, pair.u):
        raise DegenerateMap("tilde map does not match the data weight/geometry")
    grid = dataL.grid
    h = grid.spacing
    nodes = grid.nodes()
    uvec = pair.u_at(nodes)
    vvec = pair.v_at(nodes)

    def dudv(values):
        return dir_deriv_values(dir_deriv_values(values, h, vvec), h, uvec)

    curl_t = dudv(dataL.values)          # tilde-curl of f
    div_t = -dudv(dataT.values)          # tilde-div of f
    d1_div, d2_div = tilde_partials(div_t, h, tmap)
    d1_curl, d2_curl = tilde_partials(curl_t, h, tmap)
    rhs1 = d1_div - d2_curl              # tilde-Laplacian of f1
    rhs2 = d2_div + d1_curl              # tilde-Laplacian of f2

    sv_max = float(np.max(np.linalg.svd(tmap.forward_matrix, compute_uv=False)))
    r_tilde = dataL.rho * sv_max
    tgrid = _square_rect_grid(margin * r_tilde, max(grid.shape))
    src_pts = tmap.from_tilde(tgrid.nodes())
    comps = []
    for rhs in (rhs1, rhs2):
        rhs_t = grid_interpolator(grid, rhs)(src_pts)
        w = solve_poisson_disc(rhs_t, tgrid.x1, tgrid.x2, 1.05 * r_tilde, tol)
        comps.append(grid_interpolator(tgrid, w)(tmap.to_tilde(nodes)))
    return VectorField2(grid=grid, f1=comps[0], f2=comps[1])


# -- closed-form moment route ------------------------------------------------


@dataclass(frozen=True, eq=False)
class MomentDirections:
    """Auxiliary directions and constants of the closed-form moment formulas."""

    alpha: float
    u: np.ndarray
    w_alpha: np.ndarray
    wt_alpha: np.ndarray
    w: np.ndarray
    wt: np.ndarray
    C_w: float
    C_wt: float
    gamma: np.ndarray
    gamma_norm: float


def moment_directions(alpha: float, u) -> MomentDirections:
    u = np.asarray(u, dtype=float)
    u1, u2 = u
    if alpha == 0.0 or u1 * u2 == 0.0:
        raise DegenerateMap("moment formulas need alpha != 0 and u1*u2 != 0")
    w_alpha = np.array([-(1 - alpha) * u1, (1 + alpha) * u2])
    wt_alpha = np.array([(1 + alpha) * u1, -(1 - alpha) * u2])
    w = w_alpha / np.linalg.norm(w_alpha)
    wt = wt_alpha / np.linalg.norm(wt_alpha)
    c_w = (1 + alpha) / np.linalg.norm(w_alpha)
    # Near alpha = 1 the wt coefficient vanishes identically; pin it to avoid 0/0.
    c_wt = 0.0 if abs(1 - alpha) < 1e-12 else (1 - alpha) / np.linalg.norm(wt_alpha)
    raw = c_w * wt + c_wt * w
    gamma_norm = float(np.linalg.norm(raw))
    if gamma_norm == 0.0:
        raise DegenerateMap("degenerate gamma direction")
    return MomentDirections(alpha=float(alpha), u=u, w_alpha=w_alpha,
                            wt_alpha=wt_alpha, w=w, wt=wt, C_w=float(c_w),
                            C_wt=float(c_wt), gamma=raw / gamma_norm,
                            gamma_norm=gamma_norm)


def shadow_exit_t(points: np.ndarray, ray_dir, beam_dir, rho: float,
                  cap: float = _SHADOW_CAP) -> np.ndarray:
    """Largest t >= 0 keeping p + t*ray inside the beam shadow of the support disc.

    The shadow of the disc of radius rho along a unit beam direction b is the
    convex set of points whose +b ray meets the disc: the disc itself plus
    the half-strip behind it.  Candidates are ray intersections with the
    bounding half-circle and the two strip edges; the largest valid one is
    the exit.  Raises NoExit when a ray never leaves (data ray parallel to
    the strip), signalled by membership at the cap length.
    """
    p = np.asarray(points, dtype=float)
    r = np.asarray(ray_dir, dtype=float)
    b = np.asarray(beam_dir, dtype=float)
    bp = np.array([-b[1], b[0]])
    m = len(p)
    best = np.zeros(m)

    def consider(t, cond):
        nonlocal best
        ok = (t >= 0.0) & cond & np.isfinite(t)
        best = np.where(ok, np.maximum(best, t), best)

    # Half-circle |y| = rho with y.b >= 0.
    rb = float(np.dot(r, b))
    pb = p @ b
    pbp = p @ bp
    bq = p @ r
    cq = np.sum(p * p, axis=-1) - rho * rho
    disc = bq * bq - cq
    has = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    for root in (-bq - sq, -bq + sq):
        y_b = pb + root * rb
        consider(root, has & (y_b >= -1e-12))
    # Strip edges y.bp = +-rho with y.b <= 0.
    rbp = float(np.dot(r, bp))
    if abs(rbp) > 1e-14:
        for edge in (rho, -rho):
            t = (edge - pbp) / rbp
            y_b = pb + t * rb
            consider(t, y_b <= 1e-12)
    # Stuck rays: still inside the shadow at the cap.
    end = p + cap * r
    e_b = end @ b
    e_bp = end @ bp
    member = np.where(e_b >= 0.0,
                      np.sum(end * end, axis=-1) <= rho * rho,
                      np.abs(e_bp) <= rho)
    if np.any(member):
        raise NoExit("a data ray never leaves the shadow of the support disc")
    return best


def _shadow_exit_union(points, ray_dir, beam_dirs, rho, cap=_SHADOW_CAP):
    t = np.zeros(len(points))
    for b in beam_dirs:
        t = np.maximum(t, shadow_exit_t(points, ray_dir, b, rho, cap))
    return t


def _lattice_cover(bbox, reference: GridLike, pad_cells: int) -> RectGrid:
    """Smallest lattice-aligned rect grid covering bbox, padded outward."""
    h = reference.spacing
    x1_lo = reference.x1[0]
    x2_lo = reference.x2[0]
    i0 = int(np.floor((bbox[0] - x1_lo) / h)) - pad_cells
    i1 = int(np.ceil((bbox[1] - x1_lo) / h)) + pad_cells
    j0 = int(np.floor((bbox[2] - x2_lo) / h)) - pad_cells
    j1 = int(np.ceil((bbox[3] - x2_lo) / h)) + pad_cells
    return RectGrid(x1_min=x1_lo + i0 * h, x2_min=x2_lo + j0 * h,
                    n1=i1 - i0 + 1, n2=j1 - j0 + 1, spacing=h)


def _reach_grid(grid: GridLike, ray_dir, beam_dirs, rho, pad_cells: int) -> RectGrid:
    """Lattice grid covering ``grid`` plus everything its shadow rays touch."""
    pts = grid.nodes().reshape(-1, 2)
    t = _shadow_exit_union(pts, ray_dir, beam_dirs, rho)
    ends = pts + t[:, None] * np.asarray(ray_dir, dtype=float)
    allpts = np.vstack([pts, ends])
    bbox = (allpts[:, 0].min(), allpts[:, 0].max(),
            allpts[:, 1].min(), allpts[:, 1].max())
    return _lattice_cover(bbox, grid, pad_cells)


def _stage_grids(dirs: MomentDirections, base: GridLike, rho: float):
    """(inner, mid, outer) grids of the moment pipeline, on the base lattice."""
    inner = pad_grid(base, 2)
    mid = _reach_grid(inner, dirs.gamma, (dirs.w, dirs.wt), rho, pad_cells=2)
    mid_p = pad_grid(mid, 2)
    u = dirs.u
    v = np.array([-u[0], u[1]])
    outer = _reach_grid(mid_p, dirs.wt, (u, v), rho, pad_cells=2)
    outer2 = _reach_grid(mid_p, dirs.w, (u, v), rho, pad_cells=2)
    bbox = (min(outer.x1[0], outer2.x1[0]), max(outer.x1[-1], outer2.x1[-1]),
            min(outer.x2[0], outer2.x2[0]), max(outer.x2[-1], outer2.x2[-1]))
    outer = _lattice_cover(bbox, base, 0)
    return inner, mid_p, outer


def moment_data_grid(dirs: MomentDirections, n: int,
                     rho: float) -> RectGrid:
    """Grid on which forward data must be supplied to the moment formulas.

    The closed-form pipelines integrate the data along rays that leave the
    square, so the transforms have to be measured on this enlarged grid
    (same spacing as the n-node square grid).
    """
    return _stage_grids(dirs, Grid2D(n=n), rho)[2]


def _dbt_const(values_grid: GridLike, values: np.ndarray, out_grid: GridLike,
               ray_dir, beam_dirs, rho, step: float) -> np.ndarray:
    """Divergent beam transform of grid data along a constant direction."""
    pts = out_grid.nodes().reshape(-1, 2)
    t_up = _shadow_exit_union(pts, ray_dir, beam_dirs, rho)
    sampler = grid_interpolator(values_grid, values)
    dirs_arr = np.broadcast_to(np.asarray(ray_dir, dtype=float), pts.shape)

    def eval_fn(p, idx):
        return sampler(p)

    vals = ray_quadrature(pts, dirs_arr, t_up, eval_fn, k=0, step=step)
    return vals.reshape(out_grid.shape)


def recover_vector_const_moments(data_primary: TransformData,
                                 data_moment: TransformData,
                                 dirs: MomentDirections, channel: str,
                                 out_grid: Optional[Grid2D] = None,
                                 step_factor: float = 0.5) -> VectorField2:
    """Explicit closed-form recovery of f from a transform and its 1st moment.

    Implements the printed operator pipelines for the longitudinal pair
    (L_alpha f, L^1_alpha f) or the transverse pair (T_alpha f, T^1_alpha f)
    with constant symmetric directions.  Data must be supplied on (at least)
    the grid returned by ``moment_data_grid``.
    """
    _check_shared(data_primary, data_moment)
    pair = data_primary.pair
    u1, u2 = _require_symmetric_constant(pair)
    if not np.allclose(dirs.u, pair.u) or abs(dirs.alpha - data_primary.alpha) > 1e-12:
        raise DegenerateMap("moment directions do not match the data geometry/weight")
    if channel not in (LONGITUDINAL, TRANSVERSE):
        raise ValueError(f"channel must be longitudinal or transverse, got {channel!r}")
    rho = data_primary.rho
    grid = data_primary.grid
    h = grid.spacing
    if out_grid is None:
        out_grid = Grid2D(n=int(round(2.0 / h)) + 1)
    inner, mid_p, needed = _stage_grids(dirs, out_grid, rho)
    for lo, hi, name in ((grid.x1[0], needed.x1[0], "x1 low"),
                         (grid.x2[0], needed.x2[0], "x2 low")):
        if lo > hi + 1e-9:
            raise GeometryMismatch(f"data grid too small ({name}); use moment_data_grid")
    if grid.x1[-1] < needed.x1[-1] - 1e-9 or grid.x2[-1] < needed.x2[-1] - 1e-9:
        raise GeometryMismatch("data grid too small; use moment_data_grid")

    u = np.asarray(pair.u, dtype=float)
    v = np.array([-u[0], u[1]])
    step = step_factor * h

    def slice_to(target: GridLike, values: np.ndarray) -> np.ndarray:
        s1, s2 = subgrid_slices(grid, target)
        return values[s1, s2]

    def const_dd(values, d):
        dvec = np.broadcast_to(np.asarray(d, dtype=float),
                               values.shape + (2,))
        return dir_deriv_values(values, h, dvec)

    # Stencil terms of the bracket, on the mid grid.
    prim_mid = slice_to(mid_p, data_primary.values)
    mom_mid = slice_to(mid_p, data_moment.values)
    dudv_mom = const_dd(const_dd(mom_mid, v), u)
    sum_prim = const_dd(prim_mid, u) + const_dd(prim_mid, v)

    def dbt_on_mid(direction):
        vals = _dbt_const(grid, data_primary.values, mid_p, direction,
                          (u, v), rho, step)
        return const_dd(const_dd(vals, v), u)

    norm_w = float(np.linalg.norm(dirs.w_alpha))
    norm_wt = float(np.linalg.norm(dirs.wt_alpha))

    def assemble(bracket_vals, outer_dir, lead):
        x_gamma = _dbt_const(mid_p, bracket_vals, inner, dirs.gamma,
                             (dirs.w, dirs.wt), rho, step)
        deriv = const_dd(x_gamma, outer_dir)
        s1, s2 = subgrid_slices(inner, out_grid)
        return lead * deriv[s1, s2]

    if channel == LONGITUDINAL:
        bracket1 = dudv_mom + sum_prim
        if dirs.C_wt != 0.0:
            bracket1 = bracket1 - dirs.C_wt * dbt_on_mid(dirs.wt)
        f1 = assemble(bracket1, dirs.wt,
                      -1.0 / (u1 * norm_w * dirs.gamma_norm))
        bracket2 = dudv_mom + sum_prim + dirs.C_w * dbt_on_mid(dirs.w)
        f2 = assemble(bracket2, dirs.w,
                      -1.0 / (u2 * norm_wt * dirs.gamma_norm))
    else:
        bracket1 = dudv_mom + sum_prim + dirs.C_w * dbt_on_mid(dirs.w)
        f1 = assemble(bracket1, dirs.w,
                      1.0 / (u2 * norm_wt * dirs.gamma_norm))
        bracket2 = dudv_mom + sum_prim
        if dirs.C_wt != 0.0:
            bracket2 = bracket2 - dirs.C_wt * dbt_on_mid(dirs.wt)
        f2 = assemble(bracket2, dirs.wt,
                      -1.0 / (u1 * norm_w * dirs.gamma_norm))
    return VectorField2(grid=out_grid, f1=f1, f2=f2)
