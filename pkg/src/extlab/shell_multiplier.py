"""Multiplier-side picture: radial shell filters on a periodic grid.

The operator multiplies the FFT of a periodic field by a smooth profile of
the radial distance to the unit sphere, Phi((|xi| - 1)/delta), and the cap
pieces additionally carry the angular partition bumps.  Because the shell
is thin, multipliers are stored sparsely (lattice indices + values).
"""

import time
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .budget import check_alloc, fits
from .bumps import STANDARD_PROFILE
from .errors import LabError
from .reports import RatioReport
from .sphere_caps import CapSystem, cap_decompose

TWO_PI = 2.0 * np.pi


@dataclass
class PeriodicField:
    """Complex samples of a P-periodic field, m points per side."""

    dimension: int
    period: float
    values: np.ndarray  # shape (m,) * n

    def __post_init__(self):
        m = self.values.shape[0]
        if m % 2 != 0:
            raise LabError("samples per side must be even")
        if self.values.ndim != self.dimension:
            raise LabError("value array rank must match the dimension")

    @property
    def side(self):
        return self.values.shape[0]

    @property
    def freq_spacing(self):
        return 1.0 / self.period

    def coords(self):
        """Grid coordinates per axis, centered: x in [-P/2, P/2)."""
        m = self.side
        return (np.arange(m) - m // 2) * (self.period / m)


class ShellGeometry:
    """Frequency-lattice view of the delta-shell around the unit sphere."""

    def __init__(self, n, period, side, delta):
        if 1.0 / period > delta / 8.0 + 1e-12:
            raise LabError(
                f"lattice does not resolve the shell: 1/P = {1/period} "
                f"> delta/8 = {delta/8}")
        self.n = n
        self.period = period
        self.side = side
        self.delta = delta
        freqs = scipy.fft.fftfreq(side, d=period / side)
        if n == 2:
            fx = freqs[:, None]
            fy = freqs[None, :]
            r = np.sqrt(fx * fx + fy * fy)
            mask = np.abs(r - 1.0) < delta
            self.idx = np.nonzero(mask.ravel())
            rr = r.ravel()[self.idx]
            xi = np.stack([np.broadcast_to(fx, r.shape).ravel()[self.idx],
                           np.broadcast_to(fy, r.shape).ravel()[self.idx]],
                          axis=1)
        else:
            check_alloc(side ** 3 * 8, "shell lattice scan")
            fx = freqs[:, None, None]
            fy = freqs[None, :, None]
            fz = freqs[None, None, :]
            r = np.sqrt(fx * fx + fy * fy + fz * fz)
            mask = np.abs(r - 1.0) < delta
            self.idx = np.nonzero(mask.ravel())
            rr = r.ravel()[self.idx]
            xi = np.stack(
                [np.broadcast_to(f, r.shape).ravel()[self.idx]
                 for f in (fx, fy, fz)], axis=1)
        self.radii = rr
        self.points = xi
        self.dirs = xi / rr[:, None]

    @property
    def count(self):
        return len(self.radii)


_GEOM_CACHE = {}


def shell_geometry(n, period, side, delta):
    key = (n, float(period), int(side), float(delta))
    if key not in _GEOM_CACHE:
        _GEOM_CACHE.clear()  # keep at most one (they are large)
        _GEOM_CACHE[key] = ShellGeometry(n, period, side, delta)
    return _GEOM_CACHE[key]


def default_field_shape(n, delta, period_factor=8.0, modes_per_unit=4):
    """Torus size P = period_factor/delta, sampled to resolve |xi| <= 2."""
    period = period_factor / delta
    side = int(2 ** np.ceil(np.log2(modes_per_unit * period)))
    check_alloc(side ** n * 16, "periodic field")
    return period, side


def random_shell_field(n, delta, seed, period_factor=8.0):
    """Random field with spectrum supported on the delta-shell (the
    extremal class for reverse square-function inequalities)."""
    period, side = default_field_shape(n, delta, period_factor)
    geom = shell_geometry(n, period, side, delta)
    rng = np.random.default_rng((seed, 0x5E11))
    coef = rng.normal(size=geom.count) + 1j * rng.normal(size=geom.count)
    spec = np.zeros(side ** n, dtype=np.complex128)
    spec[geom.idx] = coef
    spec = spec.reshape((side,) * n)
    vals = scipy.fft.ifftn(spec, workers=-1, norm="forward")
    return PeriodicField(n, period, vals)


def _apply_sparse_multiplier(field, delta, mult_values, geom):
    spec = scipy.fft.fftn(field.values, workers=-1)
    out = np.zeros_like(spec).reshape(-1)
    out[geom.idx] = spec.reshape(-1)[geom.idx] * mult_values
    return PeriodicField(field.dimension, field.period,
                         scipy.fft.ifftn(out.reshape(spec.shape),
                                         workers=-1))


def apply_shell(field: PeriodicField, delta, profile=STANDARD_PROFILE):
    """Radial shell filter: multiply the spectrum by Phi((|xi|-1)/delta)."""
    geom = shell_geometry(field.dimension, field.period, field.side, delta)
    mult = profile((geom.radii - 1.0) / delta)
    return _apply_sparse_multiplier(field, delta, mult, geom)


def apply_cap_multiplier(field: PeriodicField, system: CapSystem, k, delta,
                         profile=STANDARD_PROFILE):
    """One cap piece: shell profile times the angular bump phi_k."""
    geom = shell_geometry(field.dimension, field.period, field.side, delta)
    mult = profile((geom.radii - 1.0) / delta) \
        * system.bump_values(k, geom.dirs)
    return _apply_sparse_multiplier(field, delta, mult, geom)


def _cap_multiplier_values(system, geom, delta, profile):
    """Sparse multiplier values for every cap (list of arrays)."""
    shell = profile((geom.radii - 1.0) / delta)
    denom = system.raw_bump_sum(geom.dirs)
    out = []
    for k in range(system.cap_count):
        if system.dimension == 2:
            thk = system.theta0 + k * system.step
            ang = np.arctan2(geom.dirs[:, 1], geom.dirs[:, 0])
            d = np.abs((ang - thk + np.pi) % TWO_PI - np.pi)
        else:
            d = np.arccos(np.clip(geom.dirs @ system.centers[k], -1, 1))
        from .kernels import _eta_np
        raw = _eta_np(d / system.support_radii[k])
        out.append(shell * raw / denom)
    return out


def lattice_lq_norm(field: PeriodicField, qexp, ball_radius=None):
    """L^q norm of the periodic field, optionally restricted to a ball."""
    v = np.abs(field.values)
    if ball_radius is not None:
        ax = field.coords()
        if field.dimension == 2:
            r = np.sqrt(ax[:, None] ** 2 + ax[None, :] ** 2)
        else:
            r = np.sqrt(ax[:, None, None] ** 2 + ax[None, :, None] ** 2
                        + ax[None, None, :] ** 2)
        v = v[r <= ball_radius]
    cell = (field.period / field.side) ** field.dimension
    if np.isinf(qexp):
        return float(v.max()) if v.size else 0.0
    return float((np.sum(v ** qexp) * cell) ** (1.0 / qexp))


def _cap_system_for(n, delta, profile):
    return cap_decompose(n, min(np.sqrt(delta), np.pi / 4), profile)


def rlp_multiplier_ratio(field: PeriodicField, delta, qexp=None, local=False,
                         system=None, profile=STANDARD_PROFILE, seed=None):
    """Reverse square-function ratio on the torus:

        lhs = || S f ||_q,   rhs = || (sum_a |S_a f|^2)^(1/2) ||_q

    local=True restricts both norms to |x| <= 1/delta (needs P >= 4/delta).
    """
    t0 = time.time()
    n = field.dimension
    q = 2.0 * n / (n - 1.0) if qexp is None else qexp
    if local and field.period < 4.0 / delta - 1e-9:
        raise LabError("local ratio needs period >= 4/delta")
    ball = (1.0 / delta) if local else None
    if system is None:
        system = _cap_system_for(n, delta, profile)
    geom = shell_geometry(n, field.period, field.side, delta)
    full = apply_shell(field, delta, profile)
    lhs = lattice_lq_norm(full, q, ball)
    mults = _cap_multiplier_values(system, geom, delta, profile)
    spec = scipy.fft.fftn(field.values, workers=-1)
    flat = spec.reshape(-1)
    sq = np.zeros_like(field.values, dtype=np.float64)
    recon = np.zeros_like(flat)
    for mv in mults:
        piece = np.zeros_like(flat)
        piece[geom.idx] = flat[geom.idx] * mv
        recon[geom.idx] += flat[geom.idx] * mv
        vals = scipy.fft.ifftn(piece.reshape(spec.shape), workers=-1)
        sq += np.abs(vals) ** 2
    sqf = PeriodicField(n, field.period, np.sqrt(sq).astype(np.complex128))
    rhs = lattice_lq_norm(sqf, q, ball)
    # exact reconstruction check: sum of cap multipliers == shell multiplier
    full_mult = profile((geom.radii - 1.0) / delta)
    recon_err = float(np.max(np.abs(
        sum(mults) - full_mult))) if len(mults) else 0.0
    rep = RatioReport(module="shell_multiplier", op="rlp_multiplier_ratio",
                      n=n, delta=delta, q=q, r=2.0, seed=seed,
                      lhs=lhs, rhs=rhs,
                      method={"local": local, "recon_err": recon_err})
    if rhs == 0.0:
        rep.degenerate = True
    rep.runtime_seconds = time.time() - t0
    return rep.check()


def decoupling_rule(n, qexp):
    """Pairing rule for the inner exponent: r = 2 below the critical q,
    dual of q(n-1)/n above it (r = 1 at q = infinity)."""
    qc = 2.0 * n / (n - 1.0)
    if qexp < 2.0:
        raise LabError("needs q >= 2")
    if qexp <= qc:
        return 2.0
    if np.isinf(qexp):
        return 1.0
    rp = qexp * (n - 1.0) / n
    return rp / (rp - 1.0)


def decoupling_ratio(field: PeriodicField, delta, qexp, rexp=None,
                     local=False, system=None, profile=STANDARD_PROFILE,
                     seed=None):
    """Square-function ratio with an l^r sum over caps inside the L^q norm;
    r defaults to the standard rule for the given q."""
    t0 = time.time()
    n = field.dimension
    r = decoupling_rule(n, qexp) if rexp is None else rexp
    if r < 1.0:
        raise LabError("invalid inner exponent r")
    ball = (1.0 / delta) if local else None
    if local and field.period < 4.0 / delta - 1e-9:
        raise LabError("local ratio needs period >= 4/delta")
    if system is None:
        system = _cap_system_for(n, delta, profile)
    geom = shell_geometry(n, field.period, field.side, delta)
    full = apply_shell(field, delta, profile)
    lhs = lattice_lq_norm(full, qexp, ball)
    mults = _cap_multiplier_values(system, geom, delta, profile)
    spec = scipy.fft.fftn(field.values, workers=-1)
    flat = spec.reshape(-1)
    acc = np.zeros_like(field.values, dtype=np.float64)
    for mv in mults:
        piece = np.zeros_like(flat)
        piece[geom.idx] = flat[geom.idx] * mv
        vals = scipy.fft.ifftn(piece.reshape(spec.shape), workers=-1)
        if np.isinf(qexp) and r == 1.0:
            acc += np.abs(vals)
        else:
            acc += np.abs(vals) ** r
    inner = acc if (np.isinf(qexp) and r == 1.0) else acc ** (1.0 / r)
    sqf = PeriodicField(n, field.period, inner.astype(np.complex128))
    rhs = lattice_lq_norm(sqf, qexp, ball)
    rep = RatioReport(module="shell_multiplier", op="decoupling_ratio",
                      n=n, delta=delta, q=qexp, r=r, seed=seed,
                      lhs=lhs, rhs=rhs, method={"local": local})
    if rhs == 0.0:
        rep.degenerate = True
    rep.runtime_seconds = time.time() - t0
    return rep.check()


def shell_kernel_mass_outside(n, delta, radius_factor=8.0,
                              profile=STANDARD_PROFILE):
    """Fraction of the |kernel| mass of the shell filter outside
    |x| <= radius_factor/delta (checks spatial localization at scale
    1/delta)."""
    period, side = default_field_shape(n, delta, period_factor=32.0,
                                       modes_per_unit=2)
    geom = shell_geometry(n, period, side, delta)
    spec = np.zeros(side ** n, dtype=np.complex128)
    spec[geom.idx] = profile((geom.radii - 1.0) / delta)
    kern = scipy.fft.ifftn(spec.reshape((side,) * n), workers=-1,
                           norm="forward")
    f = PeriodicField(n, period, kern)
    ax = f.coords()
    if n == 2:
        rr = np.sqrt(ax[:, None] ** 2 + ax[None, :] ** 2)
    else:
        rr = np.sqrt(ax[:, None, None] ** 2 + ax[None, :, None] ** 2
                     + ax[None, None, :] ** 2)
    total = np.abs(kern)
    outside = float(total[rr > radius_factor / delta].sum())
    return outside / float(total.sum())


def sumset_overlap_stats(delta, min_separation=2, samples_per_scale=2.0):
    """Maximum overlap multiplicity of pairwise differences of the shell
    pieces (n = 2): rasterize every difference set E_a - E_b for caps at
    separation >= min_separation arcs and count how many pairs cover each
    delta-cell.  Bounded multiplicity is the essential-disjointness
    mechanism behind the n = 2 reverse square-function theorem."""
    from .kernels import sumset_multiplicity
    t0 = time.time()
    s = np.sqrt(delta)
    m = int(np.ceil(TWO_PI / s))
    step = TWO_PI / m
    cang = step * np.arange(m)
    arc_half = step / 2.0
    hcell = delta
    gx0 = -(2.0 + 4.0 * delta)
    ncell = int(np.ceil(2.0 * abs(gx0) / hcell))
    check_alloc(ncell * ncell * 8, "difference-set grid")
    n_ang = max(4, int(np.ceil(samples_per_scale * (2 * arc_half) / delta)))
    n_rad = max(4, int(np.ceil(samples_per_scale * 4.0)))
    mx, counts = sumset_multiplicity(cang, arc_half, delta, n_ang, n_rad,
                                     gx0, hcell, ncell, min_separation)
    return {"delta": delta, "caps": m, "max_multiplicity": int(mx),
            "cells_hit": int(np.count_nonzero(counts)),
            "runtime_s": time.time() - t0}
