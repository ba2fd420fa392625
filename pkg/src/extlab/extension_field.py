"""Fourier extension fields, square functions and L^q norms on balls.

The extension of a sphere density h is

    F(x) = integral  h(xi) exp(-2 pi i x.xi) dsigma(xi),

evaluated either exactly (quadrature sum, ``method="direct"``), through the
self-certifying gridding path (``method="gridded"``, full grids only), or --
for cap-decomposed densities -- through the pruned cap-local kernels that
also produce the square function in the same pass.

Norms on balls use the full grid when it fits the point/memory budget and a
stratified radial-shell estimator with jackknife standard errors otherwise.
"""

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels
from .budget import check_alloc, fits
from .errors import CertificationError, LabError
from .nufft import type1_grid
from .reports import RatioReport
from .sphere_caps import (CapSystem, Quadrature, cap_measure, gl_tables,
                          sphere_measure)

TWO_PI = 2.0 * np.pi

FULL_GRID_MAX_POINTS = 1 << 21

# pruning / oversampling defaults for the cap-local field kernels;
# certified on every square-function call by a no-prune double-resolution
# comparison at spot-check points
PRUNE_Q = {2: 16.0, 3: 16.0}
OSF = {2: 4.5, 3: 4.5}
CERT_TOL = {2: 2e-5, 3: 5e-3}
CERT_POINTS = 16


def default_q(n):
    return 2.0 * n / (n - 1.0)


# ----------------------------------------------------------------------
# grids and fields
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Sampling description for field evaluation on [-L, L]^n."""

    dimension: int
    box_radius: float
    spacing: float = 0.25
    policy: str = "full"  # full | stratified
    samples: int = 1 << 16
    strata: int = 32
    groups: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.spacing > 0.25 + 1e-12:
            raise LabError("grid spacing must be <= 1/4 (sphere bandwidth)")
        if self.box_radius <= 0:
            raise LabError("box_radius must be positive")
        if self.policy not in ("full", "stratified"):
            raise LabError(f"unknown sampling policy {self.policy!r}")

    @property
    def side(self):
        return int(round(2.0 * self.box_radius / self.spacing)) + 1

    @property
    def shape(self):
        return (self.side,) * self.dimension

    @property
    def point_count(self):
        return self.side ** self.dimension

    def axis(self):
        return -self.box_radius + self.spacing * np.arange(self.side)

    def full_points(self):
        check_alloc(self.point_count * self.dimension * 8, "full grid points")
        ax = [self.axis()] * self.dimension
        mesh = np.meshgrid(*ax, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def radius_grid(self):
        ax = self.axis()
        if self.dimension == 2:
            return np.sqrt(ax[:, None] ** 2 + ax[None, :] ** 2)
        return np.sqrt(ax[:, None, None] ** 2 + ax[None, :, None] ** 2
                       + ax[None, None, :] ** 2)

    def sample_ball(self, ball_radius=None):
        """Stratified samples in the ball: equal-volume radial shells times
        uniform directions."""
        r_max = self.box_radius if ball_radius is None else ball_radius
        n = self.dimension
        k = self.strata
        m = max(1, self.samples // k)
        rng = np.random.default_rng((self.seed, 0x5A11))
        edges = r_max * (np.arange(k + 1) / k) ** (1.0 / n)
        u = rng.uniform(size=k * m)
        lo = np.repeat(edges[:-1] ** n, m)
        hi = np.repeat(edges[1:] ** n, m)
        radii = (lo + u * (hi - lo)) ** (1.0 / n)
        if n == 2:
            ang = rng.uniform(0.0, TWO_PI, size=k * m)
            dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        else:
            dirs = rng.normal(size=(k * m, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        points = radii[:, None] * dirs
        info = SampleInfo(ball_radius=r_max, shell_edges=edges,
                          shell_idx=np.repeat(np.arange(k), m),
                          group_idx=np.arange(k * m) % self.groups,
                          radii=radii)
        return points, info


@dataclass
class SampleInfo:
    ball_radius: float
    shell_edges: np.ndarray
    shell_idx: np.ndarray
    group_idx: np.ndarray
    radii: np.ndarray


@dataclass
class Field:
    """Field values, either a full grid array or sampled points."""

    grid: GridSpec
    values: np.ndarray
    kind: str = "full"  # full | sampled
    points: np.ndarray = None
    sample: SampleInfo = None
    method: dict = dc_field(default_factory=dict)

    def is_full(self):
        return self.kind == "full"


# ----------------------------------------------------------------------
# densities
# ----------------------------------------------------------------------

class Density:
    """Sphere density written in cap coordinates:

        g(xi) = sum_a  sign_a sqrt(coeff_a) exp(2 pi i mod_a.xi) phi_a(xi)

    with nonnegative coefficients, signs in {-1, +1} and phi_a the cap
    partition bumps.  Node values are re-evaluable from the coefficients.
    """

    def __init__(self, system: CapSystem, coeffs, signs=None, mods=None):
        m = system.cap_count
        self.system = system
        self.coeffs = np.asarray(coeffs, dtype=np.float64)
        if self.coeffs.shape != (m,):
            raise LabError("coefficient count must match cap count")
        if np.any(self.coeffs < 0):
            raise LabError("cap coefficients must be nonnegative")
        self.signs = (np.ones(m) if signs is None
                      else np.asarray(signs, dtype=np.float64))
        if not np.all(np.isin(self.signs, (-1.0, 1.0))):
            raise LabError("signs must be +-1")
        self.mods = (np.zeros((m, system.dimension)) if mods is None
                     else np.asarray(mods, dtype=np.float64))
        if self.mods.shape != (m, system.dimension):
            raise LabError("modulation offsets must be (caps, n)")
        self._node_values = None

    @property
    def is_zero(self):
        return not np.any(self.coeffs)

    @property
    def sqrt_coeffs(self):
        return self.signs * np.sqrt(self.coeffs)

    def max_modulation(self):
        return float(np.max(np.linalg.norm(self.mods, axis=1))) \
            if len(self.mods) else 0.0

    def values_at_quad(self, quad: Quadrature):
        """Density values at the nodes of an arbitrary sphere quadrature."""
        sysm = self.system
        denom = sysm.raw_bump_sum(quad.nodes)
        vals = np.zeros(quad.count, dtype=np.complex128)
        for k in range(sysm.cap_count):
            sc = self.sqrt_coeffs[k]
            if sc == 0.0:
                continue
            idx = _window_indices(quad, sysm, k)
            if len(idx) == 0:
                continue
            pts = quad.nodes[idx]
            if sysm.dimension == 2:
                thk = sysm.theta0 + k * sysm.step
                ang = np.arctan2(pts[:, 1], pts[:, 0])
                d = np.abs((ang - thk + np.pi) % TWO_PI - np.pi)
            else:
                d = np.arccos(np.clip(pts @ sysm.centers[k], -1, 1))
            raw = kernels._eta_np(d / sysm.support_radii[k])
            term = sc * raw / denom[idx]
            if np.any(self.mods[k]):
                term = term * np.exp(2j * np.pi * (pts @ self.mods[k]))
            vals[idx] += term
        return vals

    def node_values(self):
        if self._node_values is None:
            self._node_values = self.values_at_quad(self.system.quadrature)
        return self._node_values

    def total_mass(self):
        """integral |g| dsigma (bounds the extension pointwise)."""
        q = self.system.quadrature
        return float(np.sum(q.weights * np.abs(self.node_values())))

    def sphere_lq_norm(self, qexp):
        q = self.system.quadrature
        v = np.abs(self.node_values())
        if np.isinf(qexp):
            return float(v.max()) if len(v) else 0.0
        return float(np.sum(q.weights * v ** qexp) ** (1.0 / qexp))


def _window_indices(quad, system, k):
    """Quadrature nodes within cap k's bump support."""
    if quad is system.quadrature:
        return system.node_windows(k)
    # generic path for foreign quadratures (e.g. average grids)
    rho = system.support_radii[k]
    c = system.centers[k]
    if system.dimension == 2:
        ang = quad.node_phi
        thk = np.arctan2(c[1], c[0])
        d = np.abs((ang - thk + np.pi) % TWO_PI - np.pi)
        return np.nonzero(d < rho)[0]
    # ring windows
    ring_theta, ring_start, ring_count = quad.rings
    thc = np.arccos(np.clip(c[2], -1, 1))
    phc = np.arctan2(c[1], c[0]) % TWO_PI
    cosr = np.cos(rho)
    parts = []
    for rg in np.nonzero(np.abs(ring_theta - thc) <= rho)[0]:
        thr = ring_theta[rg]
        cnt = ring_count[rg]
        st0 = ring_start[rg]
        denom = np.sin(thc) * np.sin(thr)
        if denom < 1e-15:
            if np.cos(thc) * np.cos(thr) >= cosr:
                parts.append(st0 + np.arange(cnt))
            continue
        carg = (cosr - np.cos(thc) * np.cos(thr)) / denom
        if carg >= 1.0:
            continue
        if carg <= -1.0:
            parts.append(st0 + np.arange(cnt))
            continue
        dmax = np.arccos(carg)
        stepq = TWO_PI / cnt
        j_lo = int(np.ceil((phc - dmax) / stepq - 0.5))
        j_hi = int(np.floor((phc + dmax) / stepq - 0.5))
        if j_hi - j_lo + 1 >= cnt:
            parts.append(st0 + np.arange(cnt))
        else:
            parts.append(st0 + (np.arange(j_lo, j_hi + 1) % cnt))
    return (np.unique(np.concatenate(parts)) if parts
            else np.empty(0, dtype=np.int64))


def random_cap_density(system, seed, modulate=0.0, coeff_low=0.5):
    """Random cap-constant density: coefficients in [coeff_low, 1],
    Rademacher signs, optional modulations within |mod| <= modulate."""
    rng = np.random.default_rng((seed, 0xD17))
    m = system.cap_count
    coeffs = rng.uniform(coeff_low, 1.0, size=m)
    signs = rng.choice([-1.0, 1.0], size=m)
    mods = np.zeros((m, system.dimension))
    if modulate > 0:
        mods = rng.uniform(-modulate, modulate, size=(m, system.dimension))
    return Density(system, coeffs, signs, mods)


# ----------------------------------------------------------------------
# extension evaluation
# ----------------------------------------------------------------------

def _require_bandwidth(system, needed):
    have = system.certified_max_frequency
    if have + 1e-9 < needed:
        raise CertificationError(
            f"quadrature certified to |x| = {have}, needs {needed}")


def extend(density_or_values, grid: GridSpec, method="direct", system=None,
           points=None):
    """Extension field on the grid (or given points).

    direct: exact quadrature sum at each evaluation point.
    gridded: spreading + FFT + deconvolution, full grids only; the gridding
    path self-certifies against direct evaluation (1e-6 relative).
    """
    t0 = time.time()
    if isinstance(density_or_values, Density):
        density = density_or_values
        system = density.system
        node_vals = density.node_values()
        if density.max_modulation() > grid.box_radius + 1e-9:
            raise LabError("modulation offsets exceed the evaluation box")
    else:
        if system is None:
            raise LabError("raw node values need an explicit cap system")
        node_vals = np.asarray(density_or_values, dtype=np.complex128)
    quad = system.quadrature
    strengths = quad.weights * node_vals

    if points is not None:
        _require_bandwidth(system, float(np.max(np.linalg.norm(points,
                                                               axis=1))))
        vals = kernels.direct_sum(points, quad.nodes, strengths)
        return Field(grid, vals, kind="sampled", points=points,
                     method={"path": "direct", "runtime_s": time.time() - t0})

    if grid.policy == "stratified":
        pts, info = grid.sample_ball()
        _require_bandwidth(system, info.ball_radius)
        vals = kernels.direct_sum(pts, quad.nodes, strengths)
        return Field(grid, vals, kind="sampled", points=pts, sample=info,
                     method={"path": "direct", "runtime_s": time.time() - t0})

    _require_bandwidth(system,
                       grid.box_radius * np.sqrt(grid.dimension))
    if method == "direct":
        pts = grid.full_points()
        vals = kernels.direct_sum(pts, quad.nodes, strengths)
        vals = vals.reshape(grid.shape)
    elif method == "gridded":
        origin = np.full(grid.dimension, -grid.box_radius)
        vals = type1_grid(quad.nodes, strengths, origin, grid.spacing,
                          grid.shape)
    else:
        raise LabError(f"unknown extension method {method!r}")
    return Field(grid, vals, kind="full",
                 method={"path": method, "runtime_s": time.time() - t0})


# ----------------------------------------------------------------------
# cap-local fast path: per-cap fields, square function, sign ensembles
# ----------------------------------------------------------------------

def _gl_pack(system, r_max):
    osf = OSF[system.dimension]
    rho_max = float(np.max(system.support_radii))
    need = int(np.ceil(2.0 * osf * rho_max * max(r_max, 1.0))) + 16
    gl = gl_tables(need)
    return gl


def cap_field_data(density, points, signs_matrix=None, prune_q=None,
                   osf=None, certify=True):
    """One pass over (points x caps): returns the square-function values

        sq(x) = sum_a coeff_a |F_a(x)|^2

    and, for each row of ``signs_matrix``, the assembled density field
    sum_a s_a sqrt(coeff_a) F_a(x).  All cap-local quadrature is certified
    by a no-prune, double-oversampling comparison at spot-check points.
    """
    sysm = density.system
    n = sysm.dimension
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if signs_matrix is None:
        signs_matrix = np.empty((0, sysm.cap_count))
    signs_matrix = np.atleast_2d(np.asarray(signs_matrix, dtype=np.float64))
    pq = PRUNE_Q[n] if prune_q is None else prune_q
    so = OSF[n] if osf is None else osf
    r_max = (float(np.max(np.linalg.norm(points, axis=1)))
             + density.max_modulation())
    gl = _gl_pack(sysm, r_max)
    sqrtc = np.sqrt(density.coeffs)  # unsigned; signs enter via the matrix

    if n == 2:
        if sysm.step is None:
            raise LabError("circle cap system lacks the uniform layout")
        args = (sysm.theta0, sysm.step, sysm.cap_count,
                float(sysm.support_radii[0]), density.coeffs, sqrtc,
                density.mods, signs_matrix, gl)
        sq, g = kernels.cap_fields_2d(points, *args, prune_q=pq, osf=so)
    else:
        args = (sysm.frames, sysm.support_radii, sysm.bump_tables(),
                density.coeffs, sqrtc, density.mods, signs_matrix, gl)
        sq, g = kernels.cap_fields_3d(points, *args, prune_q=pq, osf=so)

    if certify and len(points) > 1:
        rng = np.random.default_rng(0xCE87)
        take = rng.choice(len(points), size=min(CERT_POINTS, len(points)),
                          replace=False)
        if n == 2:
            sq_ref, g_ref = kernels.cap_fields_2d(
                points[take], *args, prune_q=1e18, osf=2.0 * so)
        else:
            sq_ref, g_ref = kernels.cap_fields_3d(
                points[take], *args, prune_q=1e18, osf=2.0 * so)
        scale = max(float(np.max(sq_ref)), 1e-300)
        rel = float(np.max(np.abs(sq[take] - sq_ref)) / scale)
        tol = CERT_TOL[n]
        if rel > tol:
            raise CertificationError(
                f"cap-local square function check failed: rel {rel:.2e} "
                f"> {tol}")
        if signs_matrix.shape[0]:
            gs = max(float(np.max(np.abs(g_ref))), 1e-300)
            relg = float(np.max(np.abs(g[take] - g_ref)) / gs)
            if relg > 10.0 * tol:
                raise CertificationError(
                    f"cap-local field check failed: rel {relg:.2e}")
    return sq, g


def square_function(density, grid: GridSpec, points=None, certify=True):
    """Pointwise sqrt(sum_a |extension of g_a|^2) as a Field."""
    t0 = time.time()
    if points is not None:
        sq, _ = cap_field_data(density, points, certify=certify)
        return Field(grid, np.sqrt(sq), kind="sampled", points=points,
                     method={"path": "cap-local",
                             "runtime_s": time.time() - t0})
    if grid.policy == "stratified":
        pts, info = grid.sample_ball()
        sq, _ = cap_field_data(density, pts, certify=certify)
        return Field(grid, np.sqrt(sq), kind="sampled", points=pts,
                     sample=info, method={"path": "cap-local",
                                          "runtime_s": time.time() - t0})
    pts = grid.full_points()
    sq = np.empty(grid.point_count)
    chunk = 1 << 17
    for i in range(0, len(pts), chunk):
        sq[i:i + chunk], _ = cap_field_data(density, pts[i:i + chunk],
                                            certify=certify and i == 0)
    return Field(grid, np.sqrt(sq).reshape(grid.shape), kind="full",
                 method={"path": "cap-local", "runtime_s": time.time() - t0})


# ----------------------------------------------------------------------
# norms
# ----------------------------------------------------------------------

def lq_norm(field: Field, ball_radius, qexp, return_stderr=False):
    """L^q norm over the ball |x| <= ball_radius.

    Full grids: Riemann sum with cell volume h^n (q = inf: grid max).
    Sampled fields: stratified shell estimator; the standard error of the
    norm comes from a delete-one-group jackknife.
    """
    grid = field.grid
    if ball_radius > grid.box_radius + 1e-9:
        raise LabError("ball exceeds the sampled box")
    if field.is_full():
        r = grid.radius_grid()
        mask = r <= ball_radius
        v = np.abs(field.values)[mask]
        if np.isinf(qexp):
            out = float(v.max()) if v.size else 0.0
        else:
            out = float((np.sum(v ** qexp)
                         * grid.spacing ** grid.dimension) ** (1.0 / qexp))
        return (out, None) if return_stderr else out

    info = field.sample
    if info is None:
        raise LabError("sampled field lacks stratification info")
    if ball_radius > info.ball_radius + 1e-9:
        raise LabError("ball exceeds the sampled ball")
    n = grid.dimension
    vols = _shell_volumes(info.shell_edges, ball_radius, n)
    v = np.abs(field.values)
    if np.isinf(qexp):
        out = float(np.max(v[info.radii <= ball_radius], initial=0.0))
        return (out, None) if return_stderr else out
    pw = v ** qexp
    inside = info.radii <= ball_radius

    def estimate(drop_group=None):
        keep = inside if drop_group is None else \
            inside & (info.group_idx != drop_group)
        total = 0.0
        for k in range(len(vols)):
            if vols[k] == 0.0:
                continue
            sel = keep & (info.shell_idx == k)
            cnt = int(np.sum(sel))
            if cnt:
                total += vols[k] * float(np.sum(pw[sel])) / cnt
        return total ** (1.0 / qexp)

    out = estimate()
    if not return_stderr:
        return out
    groups = int(np.max(info.group_idx)) + 1
    thetas = np.array([estimate(g) for g in range(groups)])
    se = float(np.sqrt((groups - 1) / groups
                       * np.sum((thetas - thetas.mean()) ** 2)))
    return out, se


def _shell_volumes(edges, ball_radius, n):
    unit = np.pi if n == 2 else 4.0 * np.pi / 3.0
    lo = np.minimum(edges[:-1], ball_radius)
    hi = np.minimum(edges[1:], ball_radius)
    return unit * (hi ** n - lo ** n)


# ----------------------------------------------------------------------
# measured inequalities
# ----------------------------------------------------------------------

def auto_grid(n, box_radius, seed=0, samples=1 << 16, spacing=0.25):
    side = int(round(2 * box_radius / spacing)) + 1
    policy = "full" if (side ** n <= FULL_GRID_MAX_POINTS
                        and fits(side ** n * 40)) else "stratified"
    return GridSpec(n, box_radius, spacing, policy, samples=samples,
                    seed=seed)


def rlp_extension_ratio(density, delta, qexp=None, grid=None, seed=0,
                        samples=1 << 16):
    """Extension norm over B(0, 1/delta) against the square-function norm.

    The density must be cap-constant at scale ~ sqrt(delta), which the
    Density type guarantees by construction.
    """
    t0 = time.time()
    sysm = density.system
    n = sysm.dimension
    q = default_q(n) if qexp is None else qexp
    ball = 1.0 / delta
    if grid is None:
        grid = auto_grid(n, ball, seed=seed, samples=samples)
    report = RatioReport(module="extension_field", op="rlp_extension_ratio",
                         n=n, delta=delta, q=q, seed=seed, lhs=0.0, rhs=0.0)
    if density.is_zero:
        report.degenerate = True
        report.runtime_seconds = time.time() - t0
        return report

    signs = density.signs.reshape(1, -1)
    if grid.policy == "stratified":
        pts, info = grid.sample_ball(ball)
        sq, g = cap_field_data(density, pts, signs_matrix=signs)
        fld = Field(grid, np.abs(g[:, 0]), kind="sampled", points=pts,
                    sample=info)
        sfld = Field(grid, np.sqrt(sq), kind="sampled", points=pts,
                     sample=info)
        report.lhs, se_l = lq_norm(fld, ball, q, return_stderr=True)
        report.rhs, se_r = lq_norm(sfld, ball, q, return_stderr=True)
        report.stderr = float(np.hypot(se_l or 0.0, se_r or 0.0))
        report.method = {"norm": "stratified", "samples": len(pts)}
    else:
        pts = grid.full_points()
        sq = np.empty(grid.point_count)
        gv = np.empty(grid.point_count, dtype=np.complex128)
        chunk = 1 << 17
        for i in range(0, len(pts), chunk):
            s, g = cap_field_data(density, pts[i:i + chunk],
                                  signs_matrix=signs,
                                  certify=(i == 0))
            sq[i:i + chunk] = s
            gv[i:i + chunk] = g[:, 0]
        fld = Field(grid, gv.reshape(grid.shape))
        sfld = Field(grid, np.sqrt(sq).reshape(grid.shape))
        report.lhs = lq_norm(fld, ball, q)
        report.rhs = lq_norm(sfld, ball, q)
        report.method = {"norm": "full", "points": grid.point_count}
    if report.rhs == 0.0:
        report.degenerate = True
    report.runtime_seconds = time.time() - t0
    return report.check()


def restriction_ratio(density, R, qexp=None, grid=None, seed=0,
                      samples=1 << 16):
    """Extension norm over B(0, R) against (log R)^{(n-1)/(2n)} ||g||_q."""
    t0 = time.time()
    sysm = density.system
    n = sysm.dimension
    q = default_q(n) if qexp is None else qexp
    if R < 4.0:
        raise LabError("restriction ratio needs R >= 4")
    report = RatioReport(module="extension_field", op="restriction_ratio",
                         n=n, R=R, q=q, seed=seed, lhs=0.0, rhs=0.0)
    if density.is_zero:
        report.degenerate = True
        report.runtime_seconds = time.time() - t0
        return report
    if grid is None:
        grid = auto_grid(n, R, seed=seed, samples=samples)
    signs = density.signs.reshape(1, -1)
    if grid.policy == "stratified":
        pts, info = grid.sample_ball(R)
        _, g = cap_field_data(density, pts, signs_matrix=signs)
        fld = Field(grid, np.abs(g[:, 0]), kind="sampled", points=pts,
                    sample=info)
        report.lhs, se = lq_norm(fld, R, q, return_stderr=True)
        report.stderr = se
    else:
        fld = extend(density, grid, method="gridded")
        report.lhs = lq_norm(fld, R, q)
    gnorm = density.sphere_lq_norm(q)
    report.rhs = float(np.log(R) ** ((n - 1) / (2.0 * n)) * gnorm)
    if report.rhs == 0.0:
        report.degenerate = True
    report.runtime_seconds = time.time() - t0
    return report.check()


# ----------------------------------------------------------------------
# local sphere averages and the dyadic average bound
# ----------------------------------------------------------------------

def average_grid(n, spacing):
    """Uniform product grid on the sphere with exact zonal weights.

    All rings share one azimuth count, which makes the discrete cap
    averages exactly mean-preserving on the circle and nearly so on the
    sphere."""
    if n == 2:
        m = int(np.ceil(TWO_PI / spacing))
        ang = (np.arange(m) + 0.5) * (TWO_PI / m)
        nodes = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return Quadrature(nodes, np.full(m, TWO_PI / m), 0.0, node_phi=ang)
    n_th = int(np.ceil(np.pi / spacing))
    m_ph = 2 * int(np.ceil(np.pi / spacing))
    check_alloc(n_th * m_ph * 6 * 8, "average grid")
    edges = np.linspace(0.0, np.pi, n_th + 1)
    theta = 0.5 * (edges[:-1] + edges[1:])
    zone = TWO_PI * (np.cos(edges[:-1]) - np.cos(edges[1:]))
    phi = (np.arange(m_ph) + 0.5) * (TWO_PI / m_ph)
    st = np.sin(theta)
    nodes = np.empty((n_th * m_ph, 3))
    weights = np.empty(n_th * m_ph)
    node_theta = np.empty(n_th * m_ph)
    node_phi = np.empty(n_th * m_ph)
    for i in range(n_th):
        sl = slice(i * m_ph, (i + 1) * m_ph)
        nodes[sl, 0] = st[i] * np.cos(phi)
        nodes[sl, 1] = st[i] * np.sin(phi)
        nodes[sl, 2] = np.cos(theta[i])
        weights[sl] = zone[i] / m_ph
        node_theta[sl] = theta[i]
        node_phi[sl] = phi
    rings = (theta, np.arange(n_th, dtype=np.int64) * m_ph,
             np.full(n_th, m_ph, dtype=np.int64))
    return Quadrature(nodes, weights, 0.0, rings=rings,
                      node_theta=node_theta, node_phi=node_phi)


def at_average(quad: Quadrature, u, t):
    """Cap average (A_t u)(omega) at the quadrature nodes.

    A_t u(omega) is the w-weighted mean of u over nodes within geodesic
    distance t; on uniform circle grids the discrete operator preserves
    the mean exactly."""
    if not 0.0 < t <= np.pi:
        raise LabError("average scale t must lie in (0, pi]")
    u = np.asarray(u, dtype=np.float64)
    if quad.rings is None:
        # circle: symmetric window of half-width t
        m = quad.count
        stepq = TWO_PI / m
        kwin = int(np.floor(t / stepq + 1e-12))
        csum = np.concatenate([[0.0], np.cumsum(np.tile(u, 3))])
        i = np.arange(m) + m
        win = csum[i + kwin + 1] - csum[i - kwin]
        return win / (2 * kwin + 1)
    return kernels.ring_average(u, quad.weights, quad.rings,
                                quad.node_theta, quad.node_phi, t)


def dyadic_average_bound(density, R, spacing=None, refine=False):
    """Dyadic-in-t discretization of the multiscale average functional

        ( int_{1/sqrt(R)}^{1}  int  (A_t |g|^2)^{n/(n-1)} dsigma  dt/t
        ) ^ {(n-1)/(2n)}

    with trapezoid weights in log t (so a constant g gives exactly
    (sigma * log(R)/2)^{(n-1)/(2n)}).  With refine=True an extra half-step
    level grid is evaluated and the relative gap reported.
    """
    t0 = time.time()
    n = density.system.dimension
    if R < 4.0:
        raise LabError("needs R >= 4")
    t_min = R ** -0.5
    if spacing is None:
        spacing = max(t_min / 10.0, density.system.scale / 10.0)
        spacing = min(spacing, t_min / 4.0)
    quad = average_grid(n, spacing)
    g = density.values_at_quad(quad)
    u = np.abs(g) ** 2
    p = n / (n - 1.0)

    def level_value(t):
        a = at_average(quad, u, t)
        return float(np.sum(quad.weights * a ** p))

    k_max = int(round(np.log2(1.0 / t_min)))
    ts = 2.0 ** -np.arange(k_max + 1)
    vals = [level_value(t) for t in ts]
    w = np.full(len(ts), np.log(2.0))
    w[0] *= 0.5
    w[-1] *= 0.5
    total = float(np.dot(w, vals))
    out = total ** ((n - 1.0) / (2.0 * n))
    details = {"t_levels": ts.tolist(), "level_integrals": vals,
               "spacing": spacing, "runtime_s": time.time() - t0}
    if refine:
        ts2 = 2.0 ** -(0.5 * np.arange(2 * k_max + 1))
        vals2 = [level_value(t) for t in ts2]
        w2 = np.full(len(ts2), 0.5 * np.log(2.0))
        w2[0] *= 0.5
        w2[-1] *= 0.5
        out2 = float(np.dot(w2, vals2)) ** ((n - 1.0) / (2.0 * n))
        details["refined"] = out2
        details["refine_gap"] = abs(out2 - out) / max(out2, 1e-300)
    return out, details
