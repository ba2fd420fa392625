"""Cap decompositions of the circle and the 2-sphere.

A :class:`CapSystem` covers S^{n-1} (n = 2, 3) with caps at one angular
scale and carries

* a smooth partition of unity: raw bumps ``eta(d/rho)`` around each center,
  normalized pointwise by their sum, so ``sum_a phi_a == 1`` exactly;
* spherical quadrature sized for a certified oscillation bandwidth
  (node spacing <= 1/(8 F));
* an optional parent map into a coarser system.

n = 2 uses equal arcs, n = 3 equal-area zonal bands cut into sectors.
Bumps are supported in the dilate-by-2 of their cap.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .budget import check_alloc
from .bumps import STANDARD_PROFILE, BumpProfile
from .errors import CertificationError, LabError
from .io_utils import b64_read, b64_write

TWO_PI = 2.0 * np.pi

# Gauss-Legendre level ladder shared by the cap-local quadratures
_GL_SIZES = (8, 12, 16, 24, 32, 48, 64, 96, 128, 192, 256, 384, 512, 768,
             1024, 1536, 2048)
_PHI_FACTOR = 1.6  # azimuth nodes per polar node (n = 3)

_GL_CACHE = {}


def gl_tables(max_size):
    """Packed GL node/weight tables on [-1,1] for sizes up to max_size."""
    sizes = [s for s in _GL_SIZES if s <= max_size]
    if not sizes:
        sizes = [_GL_SIZES[0]]
    if sizes[-1] < max_size:
        bigger = [s for s in _GL_SIZES if s >= max_size]
        sizes.append(bigger[0] if bigger else _GL_SIZES[-1])
    key = tuple(sizes)
    if key not in _GL_CACHE:
        nodes = []
        weights = []
        off = [0]
        for s in sizes:
            x, w = np.polynomial.legendre.leggauss(s)
            nodes.append(x)
            weights.append(w)
            off.append(off[-1] + s)
        _GL_CACHE[key] = (np.concatenate(nodes), np.concatenate(weights),
                          np.array(off, dtype=np.int64))
    return _GL_CACHE[key]


def phi_counts(gl_off):
    # azimuth counts per level: enough nodes for the ring oscillation
    # (2 pi r rho cycles when the polar count is ~4.5 r rho + bump floor)
    sizes = np.diff(gl_off)
    mphi = np.maximum(16, np.ceil(_PHI_FACTOR * (sizes - 40)) + 16)
    mphi = mphi.astype(np.int64)
    return mphi + (mphi % 2)


def geodesic_distance(a, b):
    """Angle between unit vectors; raises on non-unit input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for v in (a, b):
        n = np.linalg.norm(v, axis=-1)
        if np.any(np.abs(n - 1.0) > 1e-9):
            raise LabError("geodesic_distance expects unit vectors")
    return np.arccos(np.clip(np.sum(a * b, axis=-1), -1.0, 1.0))


def sphere_measure(n):
    return TWO_PI if n == 2 else 2.0 * TWO_PI


def cap_measure(n, t):
    """Measure of a geodesic cap of radius t."""
    return 2.0 * t if n == 2 else TWO_PI * (1.0 - np.cos(t))


@dataclass(frozen=True)
class Cap:
    index: int
    center: np.ndarray
    angular_scale: float
    support_radius: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.center) - 1.0) > 1e-12:
            raise LabError("cap center must be a unit vector")
        if not 0.0 < self.angular_scale <= np.pi:
            raise LabError("cap scale out of (0, pi]")


class Quadrature:
    """Sphere quadrature with ring structure (n = 3) or a uniform circle."""

    def __init__(self, nodes, weights, max_frequency, rings=None,
                 node_theta=None, node_phi=None):
        self.nodes = nodes
        self.weights = weights
        self.max_frequency = float(max_frequency)
        self.rings = rings  # (ring_theta, ring_start, ring_count)
        self.node_theta = node_theta
        self.node_phi = node_phi

    @property
    def count(self):
        return len(self.weights)


def _circle_quadrature(f):
    m = int(np.ceil(TWO_PI * 8.0 * max(f, 1.0)))
    check_alloc(m * 3 * 8, "circle quadrature")
    ang = np.arange(m) * (TWO_PI / m)
    nodes = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    weights = np.full(m, TWO_PI / m)
    return Quadrature(nodes, weights, f, node_phi=ang)


def _sphere_quadrature(f):
    nrings = int(np.ceil(np.pi * 8.0 * max(f, 1.0)))
    t, wt = np.polynomial.legendre.leggauss(nrings)
    theta = np.arccos(t[::-1])
    wt = wt[::-1]
    counts = np.maximum(8, np.ceil(TWO_PI * 8.0 * max(f, 1.0)
                                   * np.sin(theta))).astype(np.int64)
    total = int(counts.sum())
    check_alloc(total * 5 * 8, "sphere quadrature")
    nodes = np.empty((total, 3))
    weights = np.empty(total)
    node_theta = np.empty(total)
    node_phi = np.empty(total)
    start = np.zeros(nrings, dtype=np.int64)
    pos = 0
    for i in range(nrings):
        m = counts[i]
        start[i] = pos
        phi = (np.arange(m) + 0.5) * (TWO_PI / m)
        st = np.sin(theta[i])
        nodes[pos:pos + m, 0] = st * np.cos(phi)
        nodes[pos:pos + m, 1] = st * np.sin(phi)
        nodes[pos:pos + m, 2] = np.cos(theta[i])
        weights[pos:pos + m] = wt[i] * TWO_PI / m
        node_theta[pos:pos + m] = theta[i]
        node_phi[pos:pos + m] = phi
        pos += m
    rings = (theta.copy(), start, counts)
    return Quadrature(nodes, weights, f, rings=rings,
                      node_theta=node_theta, node_phi=node_phi)


def build_quadrature(n, f):
    return _circle_quadrature(f) if n == 2 else _sphere_quadrature(f)


class CapSystem:
    """Caps + partition of unity + quadrature at one angular scale."""

    BTAB_SHAPE = (48, 96)

    def __init__(self, dimension, scale, centers, support_radii, profile,
                 quadrature, parent=None, parent_map=None, theta0=None,
                 step=None):
        self.dimension = int(dimension)
        self.scale = float(scale)
        self.centers = np.asarray(centers, dtype=np.float64)
        self.support_radii = np.asarray(support_radii, dtype=np.float64)
        self.profile = profile
        self.quadrature = quadrature
        self.parent = parent
        self.parent_map = parent_map
        self.theta0 = theta0  # n = 2 uniform layout
        self.step = step
        self._frames = None
        self._btab = None
        self._neighbors = None
        self._node_cap = None
        self._support_cache = {}
        self._cap_integrals = None

    # -- basic structure ------------------------------------------------

    @property
    def cap_count(self):
        return self.centers.shape[0]

    def caps(self):
        return [Cap(i, self.centers[i], self.scale, self.support_radii[i])
                for i in range(self.cap_count)]

    @property
    def certified_max_frequency(self):
        return self.quadrature.max_frequency

    def center_angles(self):
        if self.dimension != 2:
            raise LabError("center_angles is a circle-system accessor")
        return self.theta0 + self.step * np.arange(self.cap_count)

    @property
    def frames(self):
        """Per-cap orthonormal frames, rows (e1, e2, center); n = 3 only."""
        if self._frames is None:
            c = self.centers
            ref = np.zeros_like(c)
            pick = np.abs(c[:, 2]) < 0.9
            ref[pick, 2] = 1.0
            ref[~pick, 0] = 1.0
            e1 = np.cross(ref, c)
            e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
            e2 = np.cross(c, e1)
            self._frames = np.stack([e1, e2, c], axis=1)
        return self._frames

    def neighbors(self, k):
        """Caps whose bump support overlaps cap k's support."""
        if self._neighbors is None:
            self._neighbors = []
            cos_d = self.centers @ self.centers.T
            reach = self.support_radii[:, None] + self.support_radii[None, :]
            adj = cos_d > np.cos(np.minimum(reach, np.pi))
            for i in range(self.cap_count):
                self._neighbors.append(np.nonzero(adj[i])[0])
        return self._neighbors[k]

    # -- partition of unity ---------------------------------------------

    def raw_bump_sum(self, points):
        """Denominator D = sum of raw bumps at arbitrary unit vectors."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.dimension == 2:
            ang = np.arctan2(points[:, 1], points[:, 0])
            return kernels._pou_denom_circle_np(
                ang, self.theta0, self.step, self.cap_count,
                float(self.support_radii[0]))
        out = np.zeros(points.shape[0])
        chunk = max(1, int(4_000_000 // max(1, self.cap_count)))
        for i in range(0, points.shape[0], chunk):
            d = np.arccos(np.clip(points[i:i + chunk] @ self.centers.T,
                                  -1.0, 1.0))
            out[i:i + chunk] = kernels._eta_np(
                d / self.support_radii[None, :]).sum(axis=1)
        return out

    def bump_values(self, k, points):
        """phi_k at arbitrary unit vectors (exact eta/D)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.dimension == 2:
            ang = np.arctan2(points[:, 1], points[:, 0])
            thk = self.theta0 + k * self.step
            d = np.abs((ang - thk + np.pi) % TWO_PI - np.pi)
            raw = kernels._eta_np(d / self.support_radii[k])
        else:
            d = np.arccos(np.clip(points @ self.centers[k], -1.0, 1.0))
            raw = kernels._eta_np(d / self.support_radii[k])
        return raw / self.raw_bump_sum(points)

    def partition_sum(self, points):
        """sum_a phi_a, evaluated cap by cap (should be 1)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        denom = self.raw_bump_sum(points)
        total = np.zeros(points.shape[0])
        if self.dimension == 2:
            ang = np.arctan2(points[:, 1], points[:, 0])
            for k in range(self.cap_count):
                thk = self.theta0 + k * self.step
                d = np.abs((ang - thk + np.pi) % TWO_PI - np.pi)
                total += kernels._eta_np(d / self.support_radii[k])
        else:
            chunk = max(1, int(4_000_000 // max(1, self.cap_count)))
            for i in range(0, points.shape[0], chunk):
                d = np.arccos(np.clip(points[i:i + chunk] @ self.centers.T,
                                      -1.0, 1.0))
                total[i:i + chunk] = kernels._eta_np(
                    d / self.support_radii[None, :]).sum(axis=1)
        return total / denom

    # -- bump tables for the n = 3 field kernels -------------------------

    def bump_tables(self):
        if self.dimension != 3:
            raise LabError("bump tables exist for n = 3 systems only")
        if self._btab is None:
            nth, nph = self.BTAB_SHAPE
            m = self.cap_count
            check_alloc(m * nth * nph * 8, "cap bump tables")
            tab = np.empty((m, nth, nph))
            frames = self.frames
            phi = (np.arange(nph)) * (TWO_PI / nph)
            cp, sp = np.cos(phi), np.sin(phi)
            for k in range(m):
                rho = self.support_radii[k]
                th = np.linspace(0.0, rho, nth)
                st, ct = np.sin(th), np.cos(th)
                xi = (st[:, None, None] * (cp[None, :, None] * frames[k, 0]
                                           + sp[None, :, None] * frames[k, 1])
                      + ct[:, None, None] * frames[k, 2])
                pts = xi.reshape(-1, 3)
                nb = self.neighbors(k)
                d = np.arccos(np.clip(pts @ self.centers[nb].T, -1.0, 1.0))
                denom = kernels._eta_np(
                    d / self.support_radii[nb][None, :]).sum(axis=1)
                raw = kernels._eta_np(th / rho)
                tab[k] = (raw[:, None]
                          / denom.reshape(nth, nph))
            self._btab = tab
        return self._btab

    # -- quadrature-backed evaluations ------------------------------------

    def node_windows(self, k, radius=None):
        """Indices of quadrature nodes within `radius` of cap k's center."""
        key = (k, radius)
        if key in self._support_cache:
            return self._support_cache[key]
        rho = self.support_radii[k] if radius is None else radius
        q = self.quadrature
        if self.dimension == 2:
            thk = self.theta0 + k * self.step
            m = q.count
            stepq = TWO_PI / m
            j_lo = int(np.ceil((thk - rho) / stepq))
            j_hi = int(np.floor((thk + rho) / stepq))
            idx = np.arange(j_lo, j_hi + 1) % m
        else:
            ring_theta, ring_start, ring_count = q.rings
            c = self.centers[k]
            thc = np.arccos(np.clip(c[2], -1, 1))
            phc = np.arctan2(c[1], c[0]) % TWO_PI
            sel = np.nonzero(np.abs(ring_theta - thc) <= rho)[0]
            parts = []
            cosr = np.cos(rho)
            for rg in sel:
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
            idx = (np.unique(np.concatenate(parts))
                   if parts else np.empty(0, dtype=np.int64))
        self._support_cache[key] = idx
        return idx

    def bump_at_nodes(self, k):
        """(indices, phi_k values) at the cap's support nodes."""
        idx = self.node_windows(k)
        if len(idx) == 0:
            return idx, np.empty(0)
        return idx, self.bump_values(k, self.quadrature.nodes[idx])

    def cap_integrals(self):
        """integral of phi_a dsigma per cap, by quadrature."""
        if self._cap_integrals is None:
            out = np.empty(self.cap_count)
            for k in range(self.cap_count):
                idx, vals = self.bump_at_nodes(k)
                out[k] = float(np.sum(self.quadrature.weights[idx] * vals))
            self._cap_integrals = out
        return self._cap_integrals

    @property
    def node_cap(self):
        """Nearest-center cap index per quadrature node."""
        if self._node_cap is None:
            q = self.quadrature
            best = np.full(q.count, np.inf)
            idx = np.zeros(q.count, dtype=np.int32)
            for k in range(self.cap_count):
                w = self.node_windows(k, radius=self.support_radii[k])
                d = np.arccos(np.clip(q.nodes[w] @ self.centers[k], -1, 1))
                upd = d < best[w]
                best[w[upd]] = d[upd]
                idx[w[upd]] = k
            self._node_cap = idx
        return self._node_cap

    # -- misc -------------------------------------------------------------

    def rotated(self, angle):
        """Rotated copy (n = 2): caps and quadrature turn together."""
        if self.dimension != 2:
            raise LabError("rotated() is n = 2 only")
        rot = np.array([[np.cos(angle), -np.sin(angle)],
                        [np.sin(angle), np.cos(angle)]])
        q = self.quadrature
        qr = Quadrature(q.nodes @ rot.T, q.weights.copy(), q.max_frequency,
                        node_phi=(q.node_phi + angle) % TWO_PI)
        return CapSystem(2, self.scale, self.centers @ rot.T,
                         self.support_radii.copy(), self.profile, qr,
                         theta0=self.theta0 + angle, step=self.step)

    def to_json(self):
        doc = {
            "dimension": self.dimension,
            "scale": self.scale,
            "cap_count": self.cap_count,
            "centers": b64_write(self.centers),
            "support_radii": b64_write(self.support_radii),
            "theta0": self.theta0,
            "step": self.step,
            "certified_max_frequency": self.certified_max_frequency,
            "quadrature_nodes": b64_write(self.quadrature.nodes),
            "quadrature_weights": b64_write(self.quadrature.weights),
            "parent_map": (None if self.parent_map is None
                           else self.parent_map.tolist()),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text, profile=STANDARD_PROFILE):
        doc = json.loads(text)
        n = doc["dimension"]
        m = doc["cap_count"]
        centers = b64_read(doc["centers"]).reshape(m, n)
        nodes = b64_read(doc["quadrature_nodes"]).reshape(-1, n)
        weights = b64_read(doc["quadrature_weights"])
        if n == 2:
            ang = np.arctan2(nodes[:, 1], nodes[:, 0])
            quad = Quadrature(nodes, weights, doc["certified_max_frequency"],
                              node_phi=ang)
        else:
            quad = build_quadrature(3, doc["certified_max_frequency"])
        sys = cls(n, doc["scale"], centers, b64_read(doc["support_radii"]),
                  profile, quad, theta0=doc["theta0"], step=doc["step"])
        if doc["parent_map"] is not None:
            sys.parent_map = np.array(doc["parent_map"], dtype=np.int64)
        return sys


# ----------------------------------------------------------------------
# constructions
# ----------------------------------------------------------------------

def _default_bandwidth(s):
    return max(8.0, 2.0 / s)


def cap_decompose(n, s, profile=STANDARD_PROFILE, bandwidth=None):
    """Decompose S^{n-1} into caps at angular scale s."""
    if n not in (2, 3):
        raise LabError(f"unsupported dimension {n}")
    if not 0.0 < s <= np.pi / 4:
        raise LabError(f"cap scale {s} out of range (0, pi/4]")
    f = bandwidth if bandwidth is not None else _default_bandwidth(s)
    if n == 2:
        m = int(np.ceil(TWO_PI / s))
        step = TWO_PI / m
        ang = step * np.arange(m)
        centers = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        radii = np.full(m, step)
        return CapSystem(2, s, centers, radii, profile,
                         build_quadrature(2, f), theta0=0.0, step=step)
    centers, radii = _zonal_centers(s)
    return CapSystem(3, s, centers, radii, profile, build_quadrature(3, f))


def _zonal_centers(s, hemisphere=False, cell_area=None):
    """Equal-area zonal band construction; returns centers and support
    radii (2x the cell circumradius)."""
    th_max = np.pi / 2 if hemisphere else np.pi
    area = cell_area if cell_area is not None else s * s
    nb = max(1, int(round(th_max / s)))
    edges = np.linspace(0.0, th_max, nb + 1)
    centers = []
    radii = []
    for i in range(nb):
        t0, t1 = edges[i], edges[i + 1]
        band_area = TWO_PI * (np.cos(t0) - np.cos(t1))
        k = max(1, int(round(band_area / area)))
        polar = (i == 0) or (not hemisphere and i == nb - 1)
        if polar and nb >= 3:
            k = 1
        thc = 0.5 * (t0 + t1)
        if polar and k == 1:
            thc = t0 if i == 0 else t1
            if i == 0:
                thc = 0.0
            else:
                thc = np.pi
        offs = 0.5 * (i % 2)
        for j in range(k):
            phc = (j + offs) * TWO_PI / k
            centers.append([np.sin(thc) * np.cos(phc),
                            np.sin(thc) * np.sin(phc),
                            np.cos(thc)])
            if polar and k == 1:
                circum = t1 - t0
            else:
                # distance from center to cell corners
                half_phi = np.pi / k
                corners = []
                for tt in (t0, t1):
                    ca = (np.sin(thc) * np.sin(tt) * np.cos(half_phi)
                          + np.cos(thc) * np.cos(tt))
                    corners.append(np.arccos(np.clip(ca, -1, 1)))
                circum = max(corners)
            radii.append(2.0 * min(circum, np.pi / 2))
    return np.array(centers), np.array(radii)


def refine(coarse, fine_scale, mode="independent", bandwidth=None):
    """Fine CapSystem whose parent_map points into `coarse`.

    mode "independent": fresh decomposition at fine_scale, parents by
    nearest center.  mode "aligned": exact subdivision of each coarse cap
    (equal arcs / equal-area sub-cells), so children counts are uniform.
    """
    if fine_scale >= coarse.scale:
        raise LabError("fine_scale must be smaller than the coarse scale")
    n = coarse.dimension
    f = bandwidth if bandwidth is not None else _default_bandwidth(fine_scale)
    if mode == "independent":
        fine = cap_decompose(n, fine_scale, coarse.profile, bandwidth=f)
        d = np.arccos(np.clip(fine.centers @ coarse.centers.T, -1, 1))
        fine.parent_map = np.argmin(d, axis=1)
        fine.parent = coarse
        return fine
    if mode != "aligned":
        raise LabError(f"unknown refine mode {mode!r}")
    if n == 2:
        k = max(2, int(round(coarse.scale / fine_scale)))
        m = coarse.cap_count * k
        step = TWO_PI / m
        theta0 = coarse.theta0 - coarse.step / 2 + step / 2
        ang = theta0 + step * np.arange(m)
        centers = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        radii = np.full(m, step)
        fine = CapSystem(2, fine_scale, centers, radii, coarse.profile,
                         build_quadrature(2, f), theta0=theta0, step=step)
        fine.parent_map = (np.arange(m) // k) % coarse.cap_count
        fine.parent = coarse
        return fine
    # n = 3 aligned: subdivide along the zonal structure of the coarse
    # system is not available in general (centers may come from a net),
    # so subdivide each cap's nearest-region via a fresh fine zonal grid.
    fine = cap_decompose(3, fine_scale, coarse.profile, bandwidth=f)
    d = np.arccos(np.clip(fine.centers @ coarse.centers.T, -1, 1))
    fine.parent_map = np.argmin(d, axis=1)
    fine.parent = coarse
    return fine


def caps_from_directions(net_dirs, scale, profile=STANDARD_PROFILE,
                         bandwidth=None):
    """Cap system centered at the given directions plus their antipodes.

    Used by the two-scale pipeline, where one cap per tube direction is
    required; the antipodal copies complete the cover of the sphere."""
    net_dirs = np.asarray(net_dirs, dtype=np.float64)
    n = net_dirs.shape[1]
    centers = np.concatenate([net_dirs, -net_dirs], axis=0)
    f = bandwidth if bandwidth is not None else _default_bandwidth(scale)
    if n == 2:
        m = centers.shape[0]
        ang = np.arctan2(centers[:, 1], centers[:, 0]) % TWO_PI
        order = np.argsort(ang)
        gaps = np.diff(np.append(ang[order], ang[order][0] + TWO_PI))
        if np.ptp(gaps) > 1e-9:
            raise LabError("n=2 direction nets must be uniform")
        step = TWO_PI / m
        sysm = CapSystem(2, scale, centers[order], np.full(m, step), profile,
                         build_quadrature(2, f), theta0=ang[order][0],
                         step=step)
        sysm.direction_index = order.argsort()[:len(net_dirs)]
        return sysm
    # n = 3: covering radius of the +- net bounds the support radius
    d = np.arccos(np.clip(centers @ centers.T, -1, 1))
    np.fill_diagonal(d, np.inf)
    spacing = d.min(axis=1)
    rho = np.minimum(2.0 * 1.1 * np.maximum(spacing, scale), np.pi / 2)
    sysm = CapSystem(3, scale, centers, rho, profile, build_quadrature(3, f))
    sysm.direction_index = np.arange(len(net_dirs))
    # coverage check: bump sum must be bounded below
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(2000, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    if sysm.raw_bump_sum(pts).min() <= 1e-6:
        raise CertificationError("direction caps do not cover the sphere")
    return sysm


# ----------------------------------------------------------------------
# bandwidth certification
# ----------------------------------------------------------------------

def quadrature_for_bandwidth(system, max_frequency, rng_seed=0,
                             certify=True):
    """Return a copy of `system` whose quadrature resolves plane waves up
    to |x| = max_frequency (node spacing <= 1/(8 max_frequency)).

    Certification: the constant integral must be exact to 1e-9 and the
    oscillatory integral at 10 random |x| <= max_frequency must match a
    doubled-resolution reference to 1e-6 relative.
    """
    if max_frequency <= 0:
        raise LabError("max_frequency must be positive")
    if system.quadrature.max_frequency >= max_frequency:
        return system
    quad = build_quadrature(system.dimension, max_frequency)
    out = CapSystem(system.dimension, system.scale, system.centers,
                    system.support_radii, system.profile, quad,
                    parent=system.parent, parent_map=system.parent_map,
                    theta0=system.theta0, step=system.step)
    if hasattr(system, "direction_index"):
        out.direction_index = system.direction_index
    if certify:
        certify_quadrature(out.dimension, quad, max_frequency, rng_seed)
    return out


def certify_quadrature(n, quad, max_frequency, rng_seed=0):
    total = float(np.sum(quad.weights))
    target = sphere_measure(n)
    if abs(total - target) > 1e-9 * target:
        raise CertificationError(
            f"constant integral {total} != {target}")
    rng = np.random.default_rng((rng_seed, int(max_frequency * 1024)))
    pts = rng.normal(size=(10, n))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts *= max_frequency * rng.uniform(0.2, 1.0, size=(10, 1))
    ref_quad = build_quadrature(n, 2.0 * max_frequency)
    val = kernels.direct_sum(pts, quad.nodes,
                             quad.weights.astype(np.complex128))
    ref = kernels.direct_sum(pts, ref_quad.nodes,
                             ref_quad.weights.astype(np.complex128))
    scaleref = np.maximum(np.abs(ref), 1e-12 * target)
    rel = np.max(np.abs(val - ref) / scaleref)
    if rel > 1e-6:
        raise CertificationError(
            f"oscillatory quadrature check failed: rel err {rel:.3e}")
    return rel
