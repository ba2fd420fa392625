"""Smooth compactly supported bump profiles.

One profile class serves every smooth cutoff in the lab: the radial shell
profile, the cap bumps of a partition of unity, and their refinements.  The
standard profile is

    eta(t) = exp(1 - 1/(1 - t^2))   for |t| < 1,   0 otherwise,

which is C^infinity, even, equals 1 at t = 0 and vanishes with all
derivatives at t = +-1.
"""

from dataclasses import dataclass

import numpy as np


def _std_profile(t):
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - ti * ti))
    return out


@dataclass(frozen=True)
class BumpProfile:
    """Smooth even function supported in [-1, 1], positive on (-1, 1).

    derivative_bound_order: number of derivatives guaranteed bounded
    (checked by finite differences in the test suite; the standard profile
    is C^infinity so any order is valid).
    """

    name: str = "exp-reciprocal"
    derivative_bound_order: int = 8

    def __call__(self, t):
        if self.name != "exp-reciprocal":
            raise ValueError(f"unknown profile {self.name!r}")
        return _std_profile(t)

    def derivative(self, t, k, h=None):
        """k-th derivative by central finite differences (test support)."""
        if k == 0:
            return self(t)
        if h is None:
            # balance truncation vs roundoff for repeated differencing
            h = 1e-2 if k <= 3 else 2e-2
        t = np.asarray(t, dtype=np.float64)
        # binomial central stencil
        acc = np.zeros_like(t)
        for j in range(k + 1):
            coeff = (-1.0) ** j * _binom(k, j)
            acc += coeff * self(t + (k / 2.0 - j) * h)
        return acc / h**k


def _binom(n, k):
    out = 1.0
    for i in range(k):
        out *= (n - i) / (i + 1)
    return out


STANDARD_PROFILE = BumpProfile()
