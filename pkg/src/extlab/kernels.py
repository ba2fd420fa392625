"""Hot numerical kernels.

Every function here exists in two versions: a numba ``@njit`` kernel and a
pure-numpy fallback with identical signature and semantics.  The backend is
chosen at import time by :mod:`extlab._backend` (env ``LAB_DISABLE_NUMBA``).
Within one backend all loops are deterministic: parallel regions write to
disjoint per-point slots and reductions happen in fixed index order.

Conventions
-----------
* plane-wave sign: fields are sums of ``exp(-2*pi*i * x.xi)``
* cap bumps are ``eta(d/rho) / D`` where D is the partition denominator
* per-cap quadrature is Gauss-Legendre across the cap, sized by the local
  frequency ``|x| * rho`` times an oversampling factor
"""

import numpy as np

from ._backend import USE_NUMBA, njit, prange

TWO_PI = 2.0 * np.pi


# ----------------------------------------------------------------------
# scalar bump helpers (duplicated in numba and numpy flavours)
# ----------------------------------------------------------------------

@njit(cache=True, inline="always")
def _eta(t):
    a = abs(t)
    if a >= 1.0:
        return 0.0
    return np.exp(1.0 - 1.0 / (1.0 - a * a))


def _eta_np(t):
    out = np.zeros_like(t)
    m = np.abs(t) < 1.0
    tm = t[m]
    out[m] = np.exp(1.0 - 1.0 / (1.0 - tm * tm))
    return out


@njit(cache=True, inline="always")
def _wrap_pi(a):
    while a > np.pi:
        a -= TWO_PI
    while a <= -np.pi:
        a += TWO_PI
    return a


@njit(cache=True, inline="always")
def _pou_denom_circle(theta, theta0, step, m, rho):
    """Partition denominator for a uniform circle layout at angle theta."""
    j0 = int(np.floor((theta - theta0) / step + 0.5))
    d = 0.0
    for jj in range(j0 - 3, j0 + 4):
        dth = _wrap_pi(theta - theta0 - jj * step)
        d += _eta(dth / rho)
    return d


def _pou_denom_circle_np(theta, theta0, step, m, rho):
    theta = np.asarray(theta, dtype=np.float64)
    j0 = np.floor((theta - theta0) / step + 0.5)
    d = np.zeros_like(theta)
    for off in range(-3, 4):
        dth = theta - theta0 - (j0 + off) * step
        dth = (dth + np.pi) % TWO_PI - np.pi
        d += _eta_np(dth / rho)
    return d


# ----------------------------------------------------------------------
# direct quadrature sum:  F(x) = sum_j s_j exp(-2 pi i x.xi_j)
# ----------------------------------------------------------------------

@njit(cache=True, parallel=True, fastmath=True)
def _direct_sum_nb(points, nodes, s_re, s_im):
    npts = points.shape[0]
    m = nodes.shape[0]
    nd = points.shape[1]
    out_re = np.empty(npts)
    out_im = np.empty(npts)
    for p in prange(npts):
        acc_re = 0.0
        acc_im = 0.0
        for j in range(m):
            ph = 0.0
            for d in range(nd):
                ph += points[p, d] * nodes[j, d]
            ph *= -TWO_PI
            c = np.cos(ph)
            s = np.sin(ph)
            acc_re += s_re[j] * c - s_im[j] * s
            acc_im += s_re[j] * s + s_im[j] * c
        out_re[p] = acc_re
        out_im[p] = acc_im
    return out_re, out_im


def _direct_sum_np(points, nodes, s_re, s_im):
    strengths = s_re + 1j * s_im
    npts = points.shape[0]
    out = np.zeros(npts, dtype=np.complex128)
    chunk = max(1, int(8_000_000 // max(1, nodes.shape[0])))
    for i in range(0, npts, chunk):
        ph = points[i:i + chunk] @ nodes.T
        out[i:i + chunk] = np.exp(-2j * np.pi * ph) @ strengths
    return out.real.copy(), out.imag.copy()


def direct_sum(points, nodes, strengths):
    """Exact (quadrature) field values at arbitrary points."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    nodes = np.ascontiguousarray(nodes, dtype=np.float64)
    s = np.asarray(strengths, dtype=np.complex128)
    f = _direct_sum_nb if USE_NUMBA else _direct_sum_np
    re, im = f(points, nodes, np.ascontiguousarray(s.real),
               np.ascontiguousarray(s.imag))
    return re + 1j * im


# ----------------------------------------------------------------------
# table-driven sin/cos (the cap-field inner loops are trig-bound)
# ----------------------------------------------------------------------

_TRIG_N = 1 << 14
_TRIG_ARG = np.linspace(0.0, TWO_PI, _TRIG_N + 1)
_COS_TAB = np.cos(np.append(_TRIG_ARG, _TRIG_ARG[1]))
_SIN_TAB = np.sin(np.append(_TRIG_ARG, _TRIG_ARG[1]))
_TRIG_SCALE = _TRIG_N / TWO_PI


@njit(cache=True, inline="always")
def _cis(arg):
    """cos+isin from a linear-interpolated table (abs err ~ 2e-8)."""
    u = arg * (1.0 / TWO_PI)
    u = (u - np.floor(u)) * _TRIG_N
    i = int(u)
    f = u - i
    c = _COS_TAB[i]
    s = _SIN_TAB[i]
    return c + f * (_COS_TAB[i + 1] - c), s + f * (_SIN_TAB[i + 1] - s)


@njit(cache=True, inline="always")
def _cubic_w(f):
    # Catmull-Rom weights for fractional offset f in [0,1)
    f2 = f * f
    f3 = f2 * f
    w0 = -0.5 * f3 + f2 - 0.5 * f
    w1 = 1.5 * f3 - 2.5 * f2 + 1.0
    w2 = -1.5 * f3 + 2.0 * f2 + 0.5 * f
    w3 = 0.5 * f3 - 0.5 * f2
    return w0, w1, w2, w3


@njit(cache=True, inline="always")
def _cubic_1d(tab, x, nmax):
    """Catmull-Rom interpolation on a uniform table, clamped ends."""
    i = int(np.floor(x))
    if i < 0:
        i = 0
    if i > nmax - 2:
        i = nmax - 2
    f = x - i
    w0, w1, w2, w3 = _cubic_w(f)
    i0 = i - 1 if i > 0 else 0
    i3 = i + 2 if i + 2 <= nmax - 1 else nmax - 1
    return w0 * tab[i0] + w1 * tab[i] + w2 * tab[i + 1] + w3 * tab[i3]


def bump_table_circle(theta0, step, rho, nsamp=2048):
    """The shared cap-bump profile of a uniform circle layout.

    For equal arcs every normalized bump is the same function of the
    offset t from its center: eta(t/rho) over the periodic denominator.
    """
    t = np.linspace(-rho, rho, nsamp + 1)
    denom = np.zeros_like(t)
    for j in range(-3, 4):
        denom += _eta_np((t - j * step) / rho)
    return _eta_np(t / rho) / denom


# ----------------------------------------------------------------------
# per-cap fields on the circle (n = 2)
#
# For each point x and cap k with coefficient c_k, modulation mod_k and
# support radius rho, evaluate
#     F_k(x) = integral  phi_k(xi) exp(-2 pi i (x - mod_k).xi) dsigma(xi)
# by cap-local Gauss-Legendre, then accumulate
#     sq[x]   += c_k |F_k|^2
#     g[x, d] += signs[d, k] sqrt(c_k) F_k      (one slot per sign draw)
# Far caps are pruned by a stationary-phase criterion; prune_q = inf keeps
# everything (used by the self-certification pass).
# ----------------------------------------------------------------------

@njit(cache=True, parallel=True, fastmath=True)
def _cap_fields_2d_nb(points, theta0, step, mcaps, rho, btab1, coeffs, sqrtc,
                      mods, signs, gl_nodes, gl_weights, gl_off, nlev,
                      prune_q, osf, out_sq, out_g_re, out_g_im):
    npts = points.shape[0]
    ndr = signs.shape[0]
    nb1 = btab1.shape[0] - 1
    tscale = nb1 / (2.0 * rho)
    for p in prange(npts):
        x0 = points[p, 0]
        x1 = points[p, 1]
        acc_sq = 0.0
        for k in range(mcaps):
            ck = coeffs[k]
            sck = sqrtc[k]
            if ck == 0.0 and sck == 0.0:
                continue
            y0 = x0 - mods[k, 0]
            y1 = x1 - mods[k, 1]
            r = np.sqrt(y0 * y0 + y1 * y1)
            thk = theta0 + k * step
            if r > 1e-12:
                ang = np.arctan2(y1, y0)
                adist = abs(_wrap_pi(ang - thk))
                pdist = min(adist, np.pi - adist)
                gap = pdist - 1.25 * rho
                if gap > 0.0 and r * np.sin(gap) * rho > prune_q:
                    continue
            need = osf * rho * r + 48.0
            lev = 0
            for l in range(nlev):
                lev = l
                if gl_off[l + 1] - gl_off[l] >= need:
                    break
            lo = gl_off[lev]
            hi = gl_off[lev + 1]
            # phase: -2 pi (y . xi(thk + t)) = -2 pi R cos(thk + t - angy)
            f_re = 0.0
            f_im = 0.0
            ck0 = np.cos(thk)
            sk0 = np.sin(thk)
            a_lin = -TWO_PI * (y0 * ck0 + y1 * sk0)  # coeff of cos(t)
            b_lin = -TWO_PI * (-y0 * sk0 + y1 * ck0)  # coeff of sin(t)
            for j in range(lo, hi):
                t = rho * gl_nodes[j]
                bump = _cubic_1d(btab1, (t + rho) * tscale, nb1 + 1)
                w = rho * gl_weights[j] * bump
                ct = np.cos(t)
                st = np.sin(t)
                c, s = _cis(a_lin * ct + b_lin * st)
                f_re += w * c
                f_im += w * s
            acc_sq += ck * (f_re * f_re + f_im * f_im)
            for d in range(ndr):
                sc = signs[d, k] * sck
                out_g_re[p, d] += sc * f_re
                out_g_im[p, d] += sc * f_im
        out_sq[p] = acc_sq


def _cap_fields_2d_np(points, theta0, step, mcaps, rho, btab1, coeffs, sqrtc,
                      mods, signs, gl_nodes, gl_weights, gl_off, nlev,
                      prune_q, osf, out_sq, out_g_re, out_g_im):
    npts = points.shape[0]
    ndr = signs.shape[0]
    sizes = np.diff(gl_off)
    for k in range(mcaps):
        ck = coeffs[k]
        if ck == 0.0 and sqrtc[k] == 0.0:
            continue
        y = points - mods[k]
        r = np.hypot(y[:, 0], y[:, 1])
        thk = theta0 + k * step
        ang = np.arctan2(y[:, 1], y[:, 0])
        adist = np.abs((ang - thk + np.pi) % TWO_PI - np.pi)
        pdist = np.minimum(adist, np.pi - adist)
        gap = np.maximum(0.0, pdist - 1.25 * rho)
        keep = (r <= 1e-12) | (r * np.sin(gap) * rho <= prune_q)
        if not np.any(keep):
            continue
        need = osf * rho * r + 48.0
        lev = np.searchsorted(np.append(sizes, np.inf), need, side="left")
        lev = np.minimum(lev, nlev - 1)
        fk = np.zeros(npts, dtype=np.complex128)
        for l in np.unique(lev[keep]):
            sel = keep & (lev == l)
            lo, hi = gl_off[l], gl_off[l + 1]
            t = rho * gl_nodes[lo:hi]
            denom = np.zeros_like(t)
            for j in range(-3, 4):
                denom += _eta_np((t - j * step) / rho)
            bump = _eta_np(t / rho) / denom
            w = rho * gl_weights[lo:hi] * bump
            th = thk + t
            xi = np.stack([np.cos(th), np.sin(th)], axis=1)
            ph = y[sel] @ xi.T
            fk[sel] = np.exp(-2j * np.pi * ph) @ w
        out_sq += ck * np.abs(fk) ** 2
        for d in range(ndr):
            sc = signs[d, k] * sqrtc[k]
            out_g_re[:, d] += sc * fk.real
            out_g_im[:, d] += sc * fk.imag


def cap_fields_2d(points, theta0, step, mcaps, rho, coeffs, sqrtc, mods,
                  signs, gl, prune_q, osf):
    """Square function and per-draw density fields for a circle cap system.

    Returns (sq, g) with sq the sum of c_k |F_k|^2 per point and g the
    complex per-draw fields, shape (npoints, ndraws).
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    npts = points.shape[0]
    ndr = signs.shape[0]
    out_sq = np.zeros(npts)
    out_g_re = np.zeros((npts, ndr))
    out_g_im = np.zeros((npts, ndr))
    gl_nodes, gl_weights, gl_off = gl
    btab1 = bump_table_circle(theta0, step, float(rho))
    f = _cap_fields_2d_nb if USE_NUMBA else _cap_fields_2d_np
    f(points, theta0, step, mcaps, float(rho), btab1,
      np.ascontiguousarray(coeffs, dtype=np.float64),
      np.ascontiguousarray(sqrtc, dtype=np.float64),
      np.ascontiguousarray(mods, dtype=np.float64),
      np.ascontiguousarray(signs, dtype=np.float64),
      gl_nodes, gl_weights, gl_off, len(gl_off) - 1,
      prune_q, osf, out_sq, out_g_re, out_g_im)
    return out_sq, out_g_re + 1j * out_g_im


# ----------------------------------------------------------------------
# per-cap fields on the 2-sphere (n = 3)
#
# Caps carry a rotation frame (rows e1, e2, center), a support radius and
# a bicubic table of the bump phi_k = eta/D over local polar coordinates
# (theta', phi') in [0, rho] x [0, 2pi).  Ring structure: polar Gauss-
# Legendre nodes, uniform azimuth with a count set by the ring's own
# oscillation r * rho; the azimuth phase advances by rotation recurrence
# and the bump row is pre-blended per ring.
# ----------------------------------------------------------------------

@njit(cache=True, parallel=True, fastmath=True)
def _cap_fields_3d_nb(points, frames, rho, btab, coeffs, sqrtc, mods, signs,
                      gl_nodes, gl_weights, gl_off, nlev,
                      prune_q, osf, out_sq, out_g_re, out_g_im):
    npts = points.shape[0]
    mcaps = rho.shape[0]
    ndr = signs.shape[0]
    nth = btab.shape[1]
    nph = btab.shape[2]
    rowbuf_len = nph + 3
    for p in prange(npts):
        x0 = points[p, 0]
        x1 = points[p, 1]
        x2 = points[p, 2]
        rowvals = np.empty(rowbuf_len)
        acc_sq = 0.0
        for k in range(mcaps):
            ck = coeffs[k]
            sck = sqrtc[k]
            if ck == 0.0 and sck == 0.0:
                continue
            y0 = x0 - mods[k, 0]
            y1 = x1 - mods[k, 1]
            y2 = x2 - mods[k, 2]
            r = np.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
            rk = rho[k]
            c0 = frames[k, 2, 0]
            c1 = frames[k, 2, 1]
            c2 = frames[k, 2, 2]
            if r > 1e-12:
                ca = abs(y0 * c0 + y1 * c1 + y2 * c2) / r
                if ca > 1.0:
                    ca = 1.0
                pdist = np.arccos(ca)
                gap = pdist - 1.25 * rk
                if gap > 0.0 and r * np.sin(gap) * rk > prune_q:
                    continue
            need = 0.55 * osf * rk * r + 48.0
            lev = 0
            for l in range(nlev):
                lev = l
                if gl_off[l + 1] - gl_off[l] >= need:
                    break
            lo = gl_off[lev]
            hi = gl_off[lev + 1]
            nphi = 16 + int(1.55 * osf * rk * r)
            dphi = TWO_PI / nphi
            half = 0.5 * rk
            e10 = frames[k, 0, 0]
            e11 = frames[k, 0, 1]
            e12 = frames[k, 0, 2]
            e20 = frames[k, 1, 0]
            e21 = frames[k, 1, 1]
            e22 = frames[k, 1, 2]
            ya = y0 * e10 + y1 * e11 + y2 * e12
            yb = y0 * e20 + y1 * e21 + y2 * e22
            yc = y0 * c0 + y1 * c1 + y2 * c2
            # azimuth rotation recurrence
            cd = np.cos(dphi)
            sd = np.sin(dphi)
            col_step = nph / nphi
            f_re = 0.0
            f_im = 0.0
            for j in range(lo, hi):
                thloc = (gl_nodes[j] + 1.0) * half
                st = np.sin(thloc)
                zt = np.cos(thloc)
                # blend bump rows once per ring
                tx = thloc / rk * (nth - 1)
                ix = int(np.floor(tx))
                if ix < 0:
                    ix = 0
                if ix > nth - 2:
                    ix = nth - 2
                fx = tx - ix
                wx0, wx1, wx2, wx3 = _cubic_w(fx)
                i0 = ix - 1 if ix > 0 else 0
                i3 = ix + 2 if ix + 2 <= nth - 1 else nth - 1
                for c in range(nph):
                    rowvals[c] = (wx0 * btab[k, i0, c] + wx1 * btab[k, ix, c]
                                  + wx2 * btab[k, ix + 1, c]
                                  + wx3 * btab[k, i3, c])
                for c in range(3):
                    rowvals[nph + c] = rowvals[c]
                wring = gl_weights[j] * half * st * dphi
                amp_a = -TWO_PI * ya * st
                amp_b = -TWO_PI * yb * st
                base = -TWO_PI * yc * zt
                # phi starts at 0.5 * dphi
                cphi = np.cos(0.5 * dphi)
                sphi = np.sin(0.5 * dphi)
                colpos = 0.5 * col_step
                for jj in range(nphi):
                    # column interp (Catmull-Rom, periodic)
                    ic = int(colpos)
                    fc = colpos - ic
                    w0, w1, w2, w3 = _cubic_w(fc)
                    im1 = ic - 1
                    if im1 < 0:
                        im1 = nph - 1
                    bump = (w0 * rowvals[im1] + w1 * rowvals[ic]
                            + w2 * rowvals[ic + 1] + w3 * rowvals[ic + 2])
                    if bump != 0.0:
                        cc, ss = _cis(amp_a * cphi + amp_b * sphi + base)
                        w = wring * bump
                        f_re += w * cc
                        f_im += w * ss
                    cn = cphi * cd - sphi * sd
                    sphi = sphi * cd + cphi * sd
                    cphi = cn
                    colpos += col_step
                    if colpos >= nph:
                        colpos -= nph
            acc_sq += ck * (f_re * f_re + f_im * f_im)
            for d in range(ndr):
                sc = signs[d, k] * sck
                out_g_re[p, d] += sc * f_re
                out_g_im[p, d] += sc * f_im
        out_sq[p] = acc_sq


def _cap_fields_3d_np(points, frames, rho, btab, coeffs, sqrtc, mods, signs,
                      gl_nodes, gl_weights, gl_off, nlev,
                      prune_q, osf, out_sq, out_g_re, out_g_im):
    # plain per-cap loops, vectorized over points; fallback backend
    npts = points.shape[0]
    mcaps = rho.shape[0]
    ndr = signs.shape[0]
    nth = btab.shape[1]
    nph = btab.shape[2]
    sizes = np.diff(gl_off)
    from scipy.interpolate import RegularGridInterpolator
    th_ax = np.linspace(0.0, 1.0, nth)
    ph_ax = np.arange(nph + 3) - 1.0
    for k in range(mcaps):
        ck = coeffs[k]
        if ck == 0.0 and sqrtc[k] == 0.0:
            continue
        rk = rho[k]
        tab = np.concatenate([btab[k][:, -1:], btab[k], btab[k][:, :2]],
                             axis=1)
        interp = RegularGridInterpolator((th_ax, ph_ax), tab, method="cubic",
                                         bounds_error=False, fill_value=None)
        y = points - mods[k]
        r = np.linalg.norm(y, axis=1)
        ca = np.abs(y @ frames[k, 2]) / np.maximum(r, 1e-300)
        pdist = np.arccos(np.minimum(ca, 1.0))
        gap = np.maximum(0.0, pdist - 1.25 * rk)
        keep = (r <= 1e-12) | (r * np.sin(gap) * rk <= prune_q)
        if not np.any(keep):
            continue
        need = 0.55 * osf * rk * r + 48.0
        lev = np.minimum(np.searchsorted(np.append(sizes, np.inf), need),
                         nlev - 1)
        nphi_arr = 16 + (1.55 * osf * rk * r).astype(np.int64)
        fk = np.zeros(npts, dtype=np.complex128)
        half = 0.5 * rk
        for key in np.unique(np.stack([lev, nphi_arr], axis=1)[keep],
                             axis=0):
            l, nphi = int(key[0]), int(key[1])
            sel = keep & (lev == l) & (nphi_arr == nphi)
            lo, hi = gl_off[l], gl_off[l + 1]
            thloc = (gl_nodes[lo:hi] + 1.0) * half
            z = np.cos(thloc)
            st = np.sin(thloc)
            dphi = TWO_PI / nphi
            phl = (np.arange(nphi) + 0.5) * dphi
            loc = (st[:, None, None]
                   * (np.cos(phl)[None, :, None] * frames[k, 0]
                      + np.sin(phl)[None, :, None] * frames[k, 1])
                   + z[:, None, None] * frames[k, 2])
            tx = np.broadcast_to((thloc / rk)[:, None], (len(z), nphi))
            ty = np.broadcast_to((phl / TWO_PI * nph)[None, :],
                                 (len(z), nphi))
            bump = interp(np.stack([tx.ravel(), ty.ravel()], axis=1))
            w = (gl_weights[lo:hi, None] * half * st[:, None] * dphi
                 * bump.reshape(len(z), nphi))
            xi = loc.reshape(-1, 3)
            ph = y[sel] @ xi.T
            fk[sel] = np.exp(-2j * np.pi * ph) @ w.ravel()
        out_sq += ck * np.abs(fk) ** 2
        for d in range(ndr):
            sc = signs[d, k] * sqrtc[k]
            out_g_re[:, d] += sc * fk.real
            out_g_im[:, d] += sc * fk.imag


def cap_fields_3d(points, frames, rho, btab, coeffs, sqrtc, mods, signs,
                  gl, prune_q, osf):
    """Square function and per-draw density fields for a sphere cap system."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    npts = points.shape[0]
    ndr = signs.shape[0]
    out_sq = np.zeros(npts)
    out_g_re = np.zeros((npts, ndr))
    out_g_im = np.zeros((npts, ndr))
    gl_nodes, gl_weights, gl_off = gl
    f = _cap_fields_3d_nb if USE_NUMBA else _cap_fields_3d_np
    f(points, np.ascontiguousarray(frames, dtype=np.float64),
      np.ascontiguousarray(rho, dtype=np.float64),
      np.ascontiguousarray(btab, dtype=np.float64),
      np.ascontiguousarray(coeffs, dtype=np.float64),
      np.ascontiguousarray(sqrtc, dtype=np.float64),
      np.ascontiguousarray(mods, dtype=np.float64),
      np.ascontiguousarray(signs, dtype=np.float64),
      gl_nodes, gl_weights, gl_off, len(gl_off) - 1,
      prune_q, osf, out_sq, out_g_re, out_g_im)
    return out_sq, out_g_re + 1j * out_g_im


# ----------------------------------------------------------------------
# NUFFT spreading (type 1, exponential-of-semicircle kernel)
# ----------------------------------------------------------------------

@njit(cache=True, inline="always")
def _es_kernel(z, beta):
    q = 1.0 - z * z
    if q <= 0.0:
        return 0.0
    return np.exp(beta * (np.sqrt(q) - 1.0))


@njit(cache=True, fastmath=True)
def _spread_2d_nb(px, py, s_re, s_im, fine, w, beta):
    n0 = fine.shape[0]
    n1 = fine.shape[1]
    half = 0.5 * w
    m = px.shape[0]
    wx = np.empty(w)
    wy = np.empty(w)
    for j in range(m):
        ix0 = int(np.ceil(px[j] - half))
        iy0 = int(np.ceil(py[j] - half))
        for l in range(w):
            wx[l] = _es_kernel((ix0 + l - px[j]) / half, beta)
            wy[l] = _es_kernel((iy0 + l - py[j]) / half, beta)
        sj = complex(s_re[j], s_im[j])
        for a in range(w):
            ga = (ix0 + a) % n0
            va = sj * wx[a]
            for b in range(w):
                gb = (iy0 + b) % n1
                fine[ga, gb] += va * wy[b]


def _spread_2d_np(px, py, s_re, s_im, fine, w, beta):
    n0, n1 = fine.shape
    half = 0.5 * w
    s = s_re + 1j * s_im
    ix0 = np.ceil(px - half).astype(np.int64)
    iy0 = np.ceil(py - half).astype(np.int64)
    for a in range(w):
        zx = (ix0 + a - px) / half
        qx = np.maximum(0.0, 1.0 - zx * zx)
        wxa = np.where(qx > 0, np.exp(beta * (np.sqrt(qx) - 1.0)), 0.0)
        ga = (ix0 + a) % n0
        for b in range(w):
            zy = (iy0 + b - py) / half
            qy = np.maximum(0.0, 1.0 - zy * zy)
            wyb = np.where(qy > 0, np.exp(beta * (np.sqrt(qy) - 1.0)), 0.0)
            gb = (iy0 + b) % n1
            np.add.at(fine, (ga, gb), s * wxa * wyb)


@njit(cache=True, fastmath=True)
def _spread_3d_nb(px, py, pz, s_re, s_im, fine, w, beta):
    n0 = fine.shape[0]
    n1 = fine.shape[1]
    n2 = fine.shape[2]
    half = 0.5 * w
    m = px.shape[0]
    wx = np.empty(w)
    wy = np.empty(w)
    wz = np.empty(w)
    for j in range(m):
        ix0 = int(np.ceil(px[j] - half))
        iy0 = int(np.ceil(py[j] - half))
        iz0 = int(np.ceil(pz[j] - half))
        for l in range(w):
            wx[l] = _es_kernel((ix0 + l - px[j]) / half, beta)
            wy[l] = _es_kernel((iy0 + l - py[j]) / half, beta)
            wz[l] = _es_kernel((iz0 + l - pz[j]) / half, beta)
        sj = complex(s_re[j], s_im[j])
        for a in range(w):
            ga = (ix0 + a) % n0
            va = sj * wx[a]
            for b in range(w):
                gb = (iy0 + b) % n1
                vb = va * wy[b]
                for c in range(w):
                    gc = (iz0 + c) % n2
                    fine[ga, gb, gc] += vb * wz[c]


def _spread_3d_np(px, py, pz, s_re, s_im, fine, w, beta):
    n0, n1, n2 = fine.shape
    half = 0.5 * w
    s = s_re + 1j * s_im
    ix0 = np.ceil(px - half).astype(np.int64)
    iy0 = np.ceil(py - half).astype(np.int64)
    iz0 = np.ceil(pz - half).astype(np.int64)

    def kw(off, i0, pos):
        z = (i0 + off - pos) / half
        q = np.maximum(0.0, 1.0 - z * z)
        return np.where(q > 0, np.exp(beta * (np.sqrt(q) - 1.0)), 0.0)

    for a in range(w):
        wxa = kw(a, ix0, px)
        ga = (ix0 + a) % n0
        for b in range(w):
            wyb = kw(b, iy0, py)
            gb = (iy0 + b) % n1
            for c in range(w):
                wzc = kw(c, iz0, pz)
                gc = (iz0 + c) % n2
                np.add.at(fine, (ga, gb, gc), s * wxa * wyb * wzc)


def spread(positions, strengths, fine, w, beta):
    """Spread unit-normalized source positions onto the fine grid (in-place).

    positions are in grid units (0 <= p < nf per axis)."""
    s = np.asarray(strengths, dtype=np.complex128)
    sr = np.ascontiguousarray(s.real)
    si = np.ascontiguousarray(s.imag)
    if fine.ndim == 2:
        f = _spread_2d_nb if USE_NUMBA else _spread_2d_np
        f(np.ascontiguousarray(positions[:, 0]),
          np.ascontiguousarray(positions[:, 1]), sr, si, fine, w, beta)
    elif fine.ndim == 3:
        f = _spread_3d_nb if USE_NUMBA else _spread_3d_np
        f(np.ascontiguousarray(positions[:, 0]),
          np.ascontiguousarray(positions[:, 1]),
          np.ascontiguousarray(positions[:, 2]), sr, si, fine, w, beta)
    else:
        raise ValueError("spread supports 2-d and 3-d grids")


# ----------------------------------------------------------------------
# tube rasterization: accumulate sum_k c_k chi_{T_k} on a regular grid
# ----------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _tube_accumulate_2d_nb(origin, h, shape0, shape1, centers, dirs, lam,
                           length, coeffs, acc, stamp):
    ntubes = centers.shape[0]
    hw = 0.5 * lam + 1.5 * h
    for k in range(ntubes):
        wx = dirs[k, 0]
        wy = dirs[k, 1]
        cx = centers[k, 0]
        cy = centers[k, 1]
        ck = coeffs[k]
        nsteps = int(length / (0.5 * h)) + 2
        t0 = -0.5 * length
        dt = length / (nsteps - 1)
        for s in range(nsteps):
            t = t0 + s * dt
            px = cx + t * wx
            py = cy + t * wy
            i_lo = int(np.floor((px - hw - origin[0]) / h))
            i_hi = int(np.ceil((px + hw - origin[0]) / h))
            j_lo = int(np.floor((py - hw - origin[1]) / h))
            j_hi = int(np.ceil((py + hw - origin[1]) / h))
            if i_lo < 0:
                i_lo = 0
            if j_lo < 0:
                j_lo = 0
            if i_hi > shape0 - 1:
                i_hi = shape0 - 1
            if j_hi > shape1 - 1:
                j_hi = shape1 - 1
            for i in range(i_lo, i_hi + 1):
                gx = origin[0] + i * h - cx
                for j in range(j_lo, j_hi + 1):
                    if stamp[i, j] == k + 1:
                        continue
                    gy = origin[1] + j * h - cy
                    ax = gx * wx + gy * wy
                    if abs(ax) > 0.5 * length:
                        continue
                    qx = gx - ax * wx
                    qy = gy - ax * wy
                    if abs(-qx * wy + qy * wx) > 0.5 * lam:
                        continue
                    stamp[i, j] = k + 1
                    acc[i, j] += ck


def _tube_accumulate_2d_np(origin, h, shape0, shape1, centers, dirs, lam,
                           length, coeffs, acc, stamp):
    xs = origin[0] + h * np.arange(shape0)
    ys = origin[1] + h * np.arange(shape1)
    for k in range(centers.shape[0]):
        w = dirs[k]
        c = centers[k]
        lo = c - 0.5 * length * np.abs(w) - 0.5 * lam * np.abs(w[::-1]) - h
        hi = c + 0.5 * length * np.abs(w) + 0.5 * lam * np.abs(w[::-1]) + h
        i_lo, i_hi = np.searchsorted(xs, [lo[0], hi[0]])
        j_lo, j_hi = np.searchsorted(ys, [lo[1], hi[1]])
        gx = xs[i_lo:i_hi, None] - c[0]
        gy = ys[None, j_lo:j_hi] - c[1]
        ax = gx * w[0] + gy * w[1]
        perp = -(gx - ax * w[0]) * w[1] + (gy - ax * w[1]) * w[0]
        mask = (np.abs(ax) <= 0.5 * length) & (np.abs(perp) <= 0.5 * lam)
        acc[i_lo:i_hi, j_lo:j_hi][mask] += coeffs[k]


@njit(cache=True, fastmath=True)
def _tube_accumulate_3d_nb(origin, h, shape0, shape1, shape2, centers, dirs,
                           frames, lam, length, coeffs, acc, stamp):
    ntubes = centers.shape[0]
    hw = 0.5 * lam * np.sqrt(2.0) + 1.5 * h
    for k in range(ntubes):
        wx = dirs[k, 0]
        wy = dirs[k, 1]
        wz = dirs[k, 2]
        cx = centers[k, 0]
        cy = centers[k, 1]
        cz = centers[k, 2]
        ck = coeffs[k]
        nsteps = int(length / (0.5 * h)) + 2
        t0 = -0.5 * length
        dt = length / (nsteps - 1)
        for s in range(nsteps):
            t = t0 + s * dt
            px = cx + t * wx
            py = cy + t * wy
            pz = cz + t * wz
            i_lo = max(0, int(np.floor((px - hw - origin[0]) / h)))
            i_hi = min(shape0 - 1, int(np.ceil((px + hw - origin[0]) / h)))
            j_lo = max(0, int(np.floor((py - hw - origin[1]) / h)))
            j_hi = min(shape1 - 1, int(np.ceil((py + hw - origin[1]) / h)))
            l_lo = max(0, int(np.floor((pz - hw - origin[2]) / h)))
            l_hi = min(shape2 - 1, int(np.ceil((pz + hw - origin[2]) / h)))
            for i in range(i_lo, i_hi + 1):
                gx = origin[0] + i * h - cx
                for j in range(j_lo, j_hi + 1):
                    gy = origin[1] + j * h - cy
                    for l in range(l_lo, l_hi + 1):
                        if stamp[i, j, l] == k + 1:
                            continue
                        gz = origin[2] + l * h - cz
                        ax = gx * wx + gy * wy + gz * wz
                        if abs(ax) > 0.5 * length:
                            continue
                        qx = gx - ax * wx
                        qy = gy - ax * wy
                        qz = gz - ax * wz
                        u1 = (qx * frames[k, 0, 0] + qy * frames[k, 0, 1]
                              + qz * frames[k, 0, 2])
                        if abs(u1) > 0.5 * lam:
                            continue
                        u2 = (qx * frames[k, 1, 0] + qy * frames[k, 1, 1]
                              + qz * frames[k, 1, 2])
                        if abs(u2) > 0.5 * lam:
                            continue
                        stamp[i, j, l] = k + 1
                        acc[i, j, l] += ck


def _tube_accumulate_3d_np(origin, h, shape0, shape1, shape2, centers, dirs,
                           frames, lam, length, coeffs, acc, stamp):
    xs = origin[0] + h * np.arange(shape0)
    ys = origin[1] + h * np.arange(shape1)
    zs = origin[2] + h * np.arange(shape2)
    for k in range(centers.shape[0]):
        w = dirs[k]
        c = centers[k]
        half = 0.5 * length * np.abs(w) + 0.5 * lam * np.sqrt(2.0) + h
        i_lo, i_hi = np.searchsorted(xs, [c[0] - half[0], c[0] + half[0]])
        j_lo, j_hi = np.searchsorted(ys, [c[1] - half[1], c[1] + half[1]])
        l_lo, l_hi = np.searchsorted(zs, [c[2] - half[2], c[2] + half[2]])
        gx = xs[i_lo:i_hi, None, None] - c[0]
        gy = ys[None, j_lo:j_hi, None] - c[1]
        gz = zs[None, None, l_lo:l_hi] - c[2]
        ax = gx * w[0] + gy * w[1] + gz * w[2]
        qx = gx - ax * w[0]
        qy = gy - ax * w[1]
        qz = gz - ax * w[2]
        u1 = qx * frames[k, 0, 0] + qy * frames[k, 0, 1] + qz * frames[k, 0, 2]
        u2 = qx * frames[k, 1, 0] + qy * frames[k, 1, 1] + qz * frames[k, 1, 2]
        mask = ((np.abs(ax) <= 0.5 * length) & (np.abs(u1) <= 0.5 * lam)
                & (np.abs(u2) <= 0.5 * lam))
        acc[i_lo:i_hi, j_lo:j_hi, l_lo:l_hi][mask] += coeffs[k]


def tube_accumulate(origin, h, shape, centers, dirs, frames, lam, length,
                    coeffs, acc):
    """Accumulate the weighted tube superposition on a regular grid."""
    origin = np.asarray(origin, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    coeffs = np.ascontiguousarray(coeffs, dtype=np.float64)
    if len(shape) == 2:
        stamp = np.zeros(shape, dtype=np.int32) if USE_NUMBA else None
        f = _tube_accumulate_2d_nb if USE_NUMBA else _tube_accumulate_2d_np
        f(origin, h, shape[0], shape[1], centers, dirs, lam, length,
          coeffs, acc, stamp)
    else:
        frames = np.ascontiguousarray(frames, dtype=np.float64)
        stamp = np.zeros(shape, dtype=np.int32) if USE_NUMBA else None
        f = _tube_accumulate_3d_nb if USE_NUMBA else _tube_accumulate_3d_np
        f(origin, h, shape[0], shape[1], shape[2], centers, dirs, frames,
          lam, length, coeffs, acc, stamp)
    return acc


# ----------------------------------------------------------------------
# pointwise tube membership value: sum_k c_k chi_{T_k}(x)
# ----------------------------------------------------------------------

@njit(cache=True, parallel=True, fastmath=True)
def _membership_value_nb(points, centers, dirs, frames, lam, length, coeffs,
                         ndim):
    npts = points.shape[0]
    ntubes = centers.shape[0]
    out = np.zeros(npts)
    for p in prange(npts):
        acc = 0.0
        for k in range(ntubes):
            ax = 0.0
            for d in range(ndim):
                ax += (points[p, d] - centers[k, d]) * dirs[k, d]
            if abs(ax) > 0.5 * length:
                continue
            ok = True
            for f in range(ndim - 1):
                u = 0.0
                for d in range(ndim):
                    u += ((points[p, d] - centers[k, d] - ax * dirs[k, d])
                          * frames[k, f, d])
                if abs(u) > 0.5 * lam:
                    ok = False
                    break
            if ok:
                acc += coeffs[k]
        out[p] = acc
    return out


def _membership_value_np(points, centers, dirs, frames, lam, length, coeffs,
                         ndim):
    npts = points.shape[0]
    out = np.zeros(npts)
    for k in range(centers.shape[0]):
        y = points - centers[k]
        ax = y @ dirs[k]
        q = y - ax[:, None] * dirs[k]
        ok = np.abs(ax) <= 0.5 * length
        for f in range(ndim - 1):
            ok &= np.abs(q @ frames[k, f]) <= 0.5 * lam
        out[ok] += coeffs[k]
    return out


def membership_value(points, centers, dirs, frames, lam, length, coeffs):
    points = np.ascontiguousarray(points, dtype=np.float64)
    f = _membership_value_nb if USE_NUMBA else _membership_value_np
    return f(points, np.ascontiguousarray(centers, dtype=np.float64),
             np.ascontiguousarray(dirs, dtype=np.float64),
             np.ascontiguousarray(frames, dtype=np.float64),
             float(lam), float(length),
             np.ascontiguousarray(coeffs, dtype=np.float64),
             points.shape[1])


# ----------------------------------------------------------------------
# Kakeya maximal scan: per direction, max of tube averages over a
# grid-aligned translate lattice.  Tube cells per direction are given as
# integer offsets relative to the translate cell.
# ----------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _kakeya_scan_nb(fgrid, offs, ncells, cand_idx, stride):
    best = 0.0
    shape0 = fgrid.shape[0]
    shape1 = fgrid.shape[1]
    ncand = cand_idx.shape[0]
    for c in range(ncand):
        ci = cand_idx[c, 0]
        cj = cand_idx[c, 1]
        acc = 0.0
        for t in range(ncells):
            i = ci + offs[t, 0]
            j = cj + offs[t, 1]
            if 0 <= i < shape0 and 0 <= j < shape1:
                acc += fgrid[i, j]
        avg = acc / ncells
        if avg > best:
            best = avg
    return best


def _kakeya_scan_np(fgrid, offs, ncells, cand_idx, stride):
    best = 0.0
    shape = fgrid.shape
    for c in range(cand_idx.shape[0]):
        idx = cand_idx[c] + offs
        ok = np.all((idx >= 0) & (idx < np.array(shape)), axis=1)
        acc = fgrid[idx[ok, 0], idx[ok, 1]].sum() if np.any(ok) else 0.0
        avg = acc / ncells
        if avg > best:
            best = avg
    return best


def kakeya_scan(fgrid, offs, cand_idx):
    f = _kakeya_scan_nb if USE_NUMBA else _kakeya_scan_np
    return f(fgrid, np.ascontiguousarray(offs, dtype=np.int64),
             offs.shape[0], np.ascontiguousarray(cand_idx, dtype=np.int64), 0)


# ----------------------------------------------------------------------
# pair-difference multiplicity for shell pieces (the n = 2 L^4 mechanism)
# ----------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _sumset_mult_nb(cangles, arc_half, delta, n_ang, n_rad, gx0, hcell,
                    ncell, counts, stamp, min_sep):
    m = cangles.shape[0]
    maxmult = 0
    pair_id = 0
    for a in range(m):
        for b in range(m):
            sep = abs(a - b)
            if sep > m // 2:
                sep = m - sep
            if sep < min_sep:
                continue
            pair_id += 1
            for ia in range(n_ang):
                tha = cangles[a] + (-1.0 + 2.0 * ia / (n_ang - 1)) * arc_half
                ca = np.cos(tha)
                sa = np.sin(tha)
                for ra in range(n_rad):
                    rra = 1.0 + (-1.0 + 2.0 * ra / (n_rad - 1)) * delta
                    pax = rra * ca
                    pay = rra * sa
                    for ib in range(n_ang):
                        thb = (cangles[b]
                               + (-1.0 + 2.0 * ib / (n_ang - 1)) * arc_half)
                        cb = np.cos(thb)
                        sb = np.sin(thb)
                        for rb in range(n_rad):
                            rrb = 1.0 + (-1.0 + 2.0 * rb / (n_rad - 1)) * delta
                            zx = pax - rrb * cb
                            zy = pay - rrb * sb
                            i = int(np.floor((zx - gx0) / hcell))
                            j = int(np.floor((zy - gx0) / hcell))
                            if i < 0 or j < 0 or i >= ncell or j >= ncell:
                                continue
                            if stamp[i, j] == pair_id:
                                continue
                            stamp[i, j] = pair_id
                            counts[i, j] += 1
                            if counts[i, j] > maxmult:
                                maxmult = counts[i, j]
    return maxmult


def _sumset_mult_np(cangles, arc_half, delta, n_ang, n_rad, gx0, hcell,
                    ncell, counts, stamp, min_sep):
    m = cangles.shape[0]
    maxmult = 0
    th_off = np.linspace(-arc_half, arc_half, n_ang)
    r_off = 1.0 + np.linspace(-delta, delta, n_rad)
    for a in range(m):
        tha = cangles[a] + th_off
        pa = np.stack([np.outer(r_off, np.cos(tha)).ravel(),
                       np.outer(r_off, np.sin(tha)).ravel()], axis=1)
        for b in range(m):
            sep = min(abs(a - b), m - abs(a - b))
            if sep < min_sep:
                continue
            thb = cangles[b] + th_off
            pb = np.stack([np.outer(r_off, np.cos(thb)).ravel(),
                           np.outer(r_off, np.sin(thb)).ravel()], axis=1)
            z = pa[:, None, :] - pb[None, :, :]
            ij = np.floor((z.reshape(-1, 2) - gx0) / hcell).astype(np.int64)
            ok = np.all((ij >= 0) & (ij < ncell), axis=1)
            cells = np.unique(ij[ok, 0] * ncell + ij[ok, 1])
            np.add.at(counts.ravel(), cells, 1)
            mx = counts.ravel()[cells].max() if len(cells) else 0
            maxmult = max(maxmult, int(mx))
    return maxmult


def sumset_multiplicity(cangles, arc_half, delta, n_ang, n_rad, gx0, hcell,
                        ncell, min_sep):
    counts = np.zeros((ncell, ncell), dtype=np.int32)
    stamp = np.zeros((ncell, ncell), dtype=np.int32)
    f = _sumset_mult_nb if USE_NUMBA else _sumset_mult_np
    mx = f(np.ascontiguousarray(cangles, dtype=np.float64), arc_half, delta,
           n_ang, n_rad, gx0, hcell, ncell, counts, stamp, min_sep)
    return int(mx), counts


# ----------------------------------------------------------------------
# local averages over caps of radius t on ring-structured sphere grids
# ----------------------------------------------------------------------

@njit(cache=True, parallel=True, fastmath=True)
def _ring_average_nb(u, w, ring_theta, ring_start, ring_count, node_theta,
                     node_phi, t):
    nn = u.shape[0]
    nring = ring_theta.shape[0]
    out = np.empty(nn)
    cost = np.cos(t)
    for p in prange(nn):
        th = node_theta[p]
        ph = node_phi[p]
        cth = np.cos(th)
        sth = np.sin(th)
        num = 0.0
        den = 0.0
        for rg in range(nring):
            thr = ring_theta[rg]
            if abs(thr - th) > t:
                continue
            cnt = ring_count[rg]
            st0 = ring_start[rg]
            cr = np.cos(thr)
            sr = np.sin(thr)
            denom = sth * sr
            if denom < 1e-15:
                full = (cth * cr) >= cost
                if full:
                    for j in range(cnt):
                        num += w[st0 + j] * u[st0 + j]
                        den += w[st0 + j]
                continue
            carg = (cost - cth * cr) / denom
            if carg <= -1.0:
                for j in range(cnt):
                    num += w[st0 + j] * u[st0 + j]
                    den += w[st0 + j]
                continue
            if carg >= 1.0:
                continue
            dmax = np.arccos(carg)
            step = TWO_PI / cnt
            # node phi values are (j + 0.5) * step
            j_lo = int(np.ceil((ph - dmax) / step - 0.5))
            j_hi = int(np.floor((ph + dmax) / step - 0.5))
            if j_hi - j_lo + 1 >= cnt:
                for j in range(cnt):
                    num += w[st0 + j] * u[st0 + j]
                    den += w[st0 + j]
            else:
                for jj in range(j_lo, j_hi + 1):
                    j = jj % cnt
                    num += w[st0 + j] * u[st0 + j]
                    den += w[st0 + j]
        out[p] = num / den if den > 0.0 else 0.0
    return out


def _ring_average_np(u, w, ring_theta, ring_start, ring_count, node_theta,
                     node_phi, t):
    nn = u.shape[0]
    out = np.empty(nn)
    cost = np.cos(t)
    nring = len(ring_theta)
    for p in range(nn):
        th = node_theta[p]
        ph = node_phi[p]
        num = 0.0
        den = 0.0
        for rg in range(nring):
            thr = ring_theta[rg]
            if abs(thr - th) > t:
                continue
            cnt = ring_count[rg]
            st0 = ring_start[rg]
            denom = np.sin(th) * np.sin(thr)
            carg = 2.0
            if denom >= 1e-15:
                carg = (cost - np.cos(th) * np.cos(thr)) / denom
            if denom < 1e-15 or carg <= -1.0:
                if denom < 1e-15 and (np.cos(th) * np.cos(thr)) < cost:
                    continue
                sl = slice(st0, st0 + cnt)
                num += (w[sl] * u[sl]).sum()
                den += w[sl].sum()
                continue
            if carg >= 1.0:
                continue
            dmax = np.arccos(carg)
            step = TWO_PI / cnt
            j_lo = int(np.ceil((ph - dmax) / step - 0.5))
            j_hi = int(np.floor((ph + dmax) / step - 0.5))
            if j_hi - j_lo + 1 >= cnt:
                idx = np.arange(cnt)
            else:
                idx = np.arange(j_lo, j_hi + 1) % cnt
            num += (w[st0 + idx] * u[st0 + idx]).sum()
            den += w[st0 + idx].sum()
        out[p] = num / den if den > 0 else 0.0
    return out


def ring_average(u, w, rings, node_theta, node_phi, t):
    """Cap average A_t on a ring-structured sphere grid (n = 3)."""
    ring_theta, ring_start, ring_count = rings
    f = _ring_average_nb if USE_NUMBA else _ring_average_np
    return f(np.ascontiguousarray(u, dtype=np.float64),
             np.ascontiguousarray(w, dtype=np.float64),
             ring_theta, ring_start, ring_count,
             node_theta, node_phi, float(t))
