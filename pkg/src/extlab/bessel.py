"""Bessel function J0 oracle.

Independent reference used to validate oscillatory sphere quadrature: the
circle average of a plane wave is 2*pi*J0(2*pi*r).  Two classical methods
cross-check each other:

* power series around 0 (used for |x| <= 12),
* Miller's downward recurrence normalized by J0 + 2*sum J_{2k} = 1
  (any x, used for |x| > 12).

Both are implemented from scratch on purpose; no scipy.special here.
"""

import numpy as np


def j0_series(x):
    """Power series; accurate for |x| <= ~12 (float64)."""
    x = abs(float(x))
    q = 0.25 * x * x
    term = 1.0
    total = 1.0
    for k in range(1, 200):
        term *= -q / (k * k)
        total += term
        if abs(term) < 1e-18 * max(1.0, abs(total)):
            break
    return total


def j0_miller(x):
    """Downward recurrence J_{k-1} = (2k/x) J_k - J_{k+1}, normalized."""
    x = abs(float(x))
    if x < 1e-8:
        return 1.0 - 0.25 * x * x
    m = int(x + 20.0 + 12.0 * x**0.5)
    if m % 2 == 1:
        m += 1
    jp = 0.0  # J_{k+1}
    jc = 1e-300  # J_k (arbitrary seed, fixed by normalization)
    j0 = 0.0
    even_sum = 0.0  # sum over even orders >= 2
    for k in range(m, 0, -1):
        jm = (2.0 * k / x) * jc - jp
        jp = jc
        jc = jm
        if k - 1 == 0:
            j0 = jc
        elif (k - 1) % 2 == 0:
            even_sum += jc
        if abs(jc) > 1e250:
            jc *= 1e-250
            jp *= 1e-250
            even_sum *= 1e-250
            j0 *= 1e-250
    norm = j0 + 2.0 * even_sum
    return j0 / norm


def j0(x):
    """J0 for scalars or arrays, series/recurrence switched at |x| = 12."""
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    flat = np.atleast_1d(arr).ravel()
    out = np.empty_like(flat)
    for i, v in enumerate(flat):
        out[i] = j0_series(v) if abs(v) <= 12.0 else j0_miller(v)
    out = out.reshape(np.atleast_1d(arr).shape)
    return float(out[0]) if scalar else out


def circle_mean_plane_wave(r):
    """Exact value of the S^1 integral of exp(-2*pi*i x.xi) at |x| = r."""
    return 2.0 * np.pi * j0(2.0 * np.pi * np.asarray(r, dtype=np.float64))


def sphere_mean_plane_wave(r):
    """Exact value of the S^2 integral of exp(-2*pi*i x.xi) at |x| = r."""
    r = np.asarray(r, dtype=np.float64)
    z = 2.0 * np.pi * r
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(z < 1e-8, 4.0 * np.pi * (1 - z * z / 6.0),
                       4.0 * np.pi * np.sin(z) / np.where(z == 0, 1.0, z))
    return out
