"""Analytic scattering by a homogeneous circular cylinder (2-D TM).

Used as an independent oracle for the discrete forward model.  The
incident field is the unit line source H0^(2)(k |r - r_s|), expanded with
Graf's addition theorem; the interior field is a Bessel series in the
cylinder wavenumber.
"""

import numpy as np
from scipy import special


def _dj(n, z):
    return special.jvp(n, z)


def _dh(n, z):
    return special.h2vp(n, z)


def mie_scattered_field(k, radius, contrast, source, points, n_max=None):
    """Scattered field at ``points`` (P, 2) for a line source at ``source`` (2,).

    The cylinder is centered at the origin.  Observation points and the source
    must lie outside the cylinder.
    """
    source = np.asarray(source, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    k1 = k * np.sqrt(1 + contrast)
    ka, k1a = k * radius, k1 * radius
    if n_max is None:
        n_max = int(abs(k1a) + 4 * abs(k1a) ** (1 / 3) + 12)
    rho_s = np.hypot(*source)
    phi_s = np.arctan2(source[1], source[0])
    rho = np.hypot(points[:, 0], points[:, 1])
    phi = np.arctan2(points[:, 1], points[:, 0])

    out = np.zeros(len(points), dtype=complex)
    for n in range(-n_max, n_max + 1):
        a_n = special.hankel2(n, k * rho_s)
        num = k1 * _dj(n, k1a) * special.jv(n, ka) - k * special.jv(n, k1a) * _dj(n, ka)
        den = k * special.jv(n, k1a) * _dh(n, ka) - k1 * _dj(n, k1a) * special.hankel2(n, ka)
        c_n = a_n * num / den
        out += c_n * special.hankel2(n, k * rho) * np.exp(1j * n * (phi - phi_s))
    return out
