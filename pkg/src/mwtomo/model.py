"""Discrete 2-D TM scattering model.

Pulse basis / point matching on a square lattice, with cells replaced by
equal-area discs for the Green-function integrals.  Time convention is
exp(+j w t): lossy media have Im(contrast) <= 0 and outgoing waves are
H0^(2).

Array layout used throughout the package:

* contrast ``x``: shape ``(n,)``
* currents ``W``: shape ``(M, n)``, row ``i`` is the current of emitter ``i``
* data ``Y``: shape ``(M, N)``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy import special

from .errors import ConfigError, SolverError

C0 = 299_792_458.0


def hankel2(order, z):
    """Hankel function of the second kind, H_order^(2)(z) = J - jY."""
    return special.hankel2(order, z)


@dataclass(frozen=True)
class ImagingSetup:
    """Geometry, frequency, background medium and antenna layout.

    ``domain_side`` defaults to one background wavelength and ``ring_radius``
    to ``0.71 * domain_side``, just outside the corners of the domain.
    """

    frequency: float = 1e9
    background_permittivity: complex = 1.0
    domain_side: float | None = None
    grid_side: int = 32
    num_emitters: int = 32
    num_receivers: int = 32
    ring_radius: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.frequency > 0:
            raise ConfigError(f"frequency must be > 0, got {self.frequency}")
        if self.grid_side < 2:
            raise ConfigError(f"grid_side must be >= 2, got {self.grid_side}")
        if self.num_emitters < 1 or self.num_receivers < 1:
            raise ConfigError("num_emitters and num_receivers must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        object.__setattr__(self, "background_permittivity", complex(self.background_permittivity))
        if self.domain_side is None:
            object.__setattr__(self, "domain_side", self.wavelength)
        if not self.domain_side > 0:
            raise ConfigError(f"domain_side must be > 0, got {self.domain_side}")
        if self.ring_radius is None:
            object.__setattr__(self, "ring_radius", 0.71 * self.domain_side)
        half_diag = self.domain_side * math.sqrt(2) / 2
        if not self.ring_radius > half_diag:
            raise ConfigError(
                f"ring_radius {self.ring_radius} must exceed the domain half-diagonal "
                f"{half_diag} (antennas inside D)"
            )

    @property
    def wavenumber(self) -> complex:
        k0 = 2 * math.pi * self.frequency / C0
        return k0 * np.sqrt(self.background_permittivity)

    @property
    def wavelength(self) -> float:
        return 2 * math.pi / self.wavenumber.real

    @property
    def n(self) -> int:
        return self.grid_side**2


@dataclass(frozen=True)
class GridGeometry:
    centers: np.ndarray  # (n, 2), row-major, x fastest
    cell_size: float
    equivalent_radius: float
    grid_side: int
    domain_side: float

    @property
    def n(self) -> int:
        return self.centers.shape[0]


def build_grid(setup: ImagingSetup) -> GridGeometry:
    ns = setup.grid_side
    cs = setup.domain_side / ns
    coords = -setup.domain_side / 2 + (np.arange(ns) + 0.5) * cs
    gx, gy = np.meshgrid(coords, coords)  # gx varies along axis 1 -> x fastest
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    return GridGeometry(centers, cs, cs / math.sqrt(math.pi), ns, setup.domain_side)


def ring_positions(count: int, radius: float) -> np.ndarray:
    theta = 2 * np.pi * np.arange(count) / count
    return radius * np.column_stack([np.cos(theta), np.sin(theta)])


def green_offdiag(k, a, rho):
    """Integral of k^2 g over a disc of radius ``a`` seen from distance ``rho > a``."""
    return -(1j * np.pi * k * a / 2) * special.jv(1, k * a) * hankel2(0, k * rho)


def green_self(k, a):
    """Integral of k^2 g over a disc of radius ``a`` seen from its center."""
    ka = k * a
    return -(1j / 2) * (np.pi * ka * hankel2(1, ka) - 2j)


@dataclass(frozen=True)
class ScatteringOperators:
    """Frozen linear model: G_O (N x n), G_D (n x n), incident fields (M x n).

    Operators are applied to row-stacked batches; the ``observe``/``couple``
    methods are the only place where the dense matrices are touched, so
    wrapping them is enough to count operator applications.
    """

    go: np.ndarray
    gd: np.ndarray
    incident: np.ndarray
    wavenumber: complex
    emitters: np.ndarray | None = None
    receivers: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.gd.shape[0]

    @property
    def num_emitters(self) -> int:
        return self.incident.shape[0]

    @property
    def num_receivers(self) -> int:
        return self.go.shape[0]

    def observe(self, W):
        """G_O w for each row of W."""
        return W @ self.go.T

    def observe_adj(self, R):
        """G_O^H r for each row of R."""
        return R @ self.go.conj()

    def couple(self, W):
        """G_D w for each row of W."""
        return W @ self.gd.T

    def couple_adj(self, V):
        """G_D^H v for each row of V."""
        return V @ self.gd.conj()

    def couple_abs2_adj(self, u):
        """|G_D|^T u for a real vector u; the one dense product the preconditioner needs."""
        return u @ self.abs2_gd

    @cached_property
    def abs2_gd(self) -> np.ndarray:
        return np.abs(self.gd) ** 2

    @cached_property
    def go_col_norms2(self) -> np.ndarray:
        """diag(G_O^H G_O)."""
        return np.sum(np.abs(self.go) ** 2, axis=0)

    def scaled(self, factor: float) -> "ScatteringOperators":
        return replace(self, go=self.go * factor)


def build_operators(setup: ImagingSetup, grid: GridGeometry) -> ScatteringOperators:
    k = setup.wavenumber
    a = grid.equivalent_radius
    half = setup.domain_side / 2
    emitters = ring_positions(setup.num_emitters, setup.ring_radius)
    receivers = ring_positions(setup.num_receivers, setup.ring_radius)
    for name, pts in (("emitter", emitters), ("receiver", receivers)):
        inside = np.all(np.abs(pts) < half, axis=1)
        if np.any(inside):
            raise ConfigError(f"{name} {int(np.argmax(inside))} lies inside the imaging domain")

    c = grid.centers
    rho = np.hypot(c[:, None, 0] - c[None, :, 0], c[:, None, 1] - c[None, :, 1])
    np.fill_diagonal(rho, 1.0)
    gd = green_offdiag(k, a, rho)
    np.fill_diagonal(gd, green_self(k, a))
    # exact symmetry: distances are computed symmetrically, enforce bitwise anyway
    gd = np.triu(gd) + np.triu(gd, 1).T

    rho_o = np.hypot(receivers[:, None, 0] - c[None, :, 0], receivers[:, None, 1] - c[None, :, 1])
    go = green_offdiag(k, a, rho_o)
    rho_i = np.hypot(emitters[:, None, 0] - c[None, :, 0], emitters[:, None, 1] - c[None, :, 1])
    incident = hankel2(0, k * rho_i)
    return ScatteringOperators(go, gd, incident, k, emitters, receivers)


@dataclass(frozen=True)
class MeasurementSet:
    data: np.ndarray  # (M, N)
    snr_db: float = math.inf
    seed: int | None = None
    frequency: float | None = None

    @property
    def num_emitters(self) -> int:
        return self.data.shape[0]

    @property
    def num_receivers(self) -> int:
        return self.data.shape[1]


def forward_solve(x, ops: ScatteringOperators):
    """Solve the coupling equation exactly for every illumination.

    Returns ``(W, MeasurementSet)`` with noiseless data ``Y = W G_O^T``.
    """
    x = np.asarray(x, dtype=complex)
    n = ops.n
    system = np.eye(n, dtype=complex) - x[:, None] * ops.gd
    rhs = (x[None, :] * ops.incident).T
    try:
        W = np.linalg.solve(system, rhs).T
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"forward system is singular: {exc}", condition=math.inf) from exc
    if not np.all(np.isfinite(W)):
        raise SolverError("forward solve produced non-finite currents",
                          condition=float(np.linalg.cond(system)))
    resid = np.linalg.norm(x * (ops.incident + ops.couple(W)) - W)
    scale = np.linalg.norm(W)
    if scale > 0 and resid > 1e-8 * scale:
        cond = float(np.linalg.cond(system))
        raise SolverError(f"forward system numerically singular (cond ~ {cond:.3e})", condition=cond)
    return W, MeasurementSet(ops.observe(W))


def add_noise(m: MeasurementSet, snr_db: float, seed: int) -> MeasurementSet:
    """Add circular complex white Gaussian noise at a global SNR."""
    if math.isinf(snr_db) and snr_db > 0:
        return replace(m, snr_db=math.inf, seed=seed)
    y = m.data
    power = np.sum(np.abs(y) ** 2) / (y.size * 10 ** (snr_db / 10))
    rng = np.random.default_rng(seed)
    noise = math.sqrt(power / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return replace(m, data=y + noise, snr_db=float(snr_db), seed=seed)


def total_field(x, w_i, ops: ScatteringOperators, i: int):
    """E0_i + G_D w_i.  ``x`` is unused but kept so call sites read like the model."""
    return ops.incident[i] + ops.couple(w_i)


# -- phantoms -----------------------------------------------------------------

SMALL_OUTER = 1 - 0.5j
SMALL_INNER = 0.5 - 1j
PHANTOMS = ("small-square", "large-square", "circular", "homogeneous", "one-cylinder", "two-cylinders")
# purely real dielectric rods standing in for a laboratory target
ROD_CONTRAST = 1.0
ROD_RADIUS = 0.15
_SUBSAMPLES = 8


def _coverage(grid: GridGeometry, inside) -> np.ndarray:
    """Fraction of each cell covered by the region ``inside(px, py)``."""
    s = _SUBSAMPLES
    offs = ((np.arange(s) + 0.5) / s - 0.5) * grid.cell_size
    ox, oy = np.meshgrid(offs, offs)
    px = grid.centers[:, 0:1] + ox.ravel()[None, :]
    py = grid.centers[:, 1:2] + oy.ravel()[None, :]
    return inside(px, py).mean(axis=1)


def _square(side):
    return lambda px, py: (np.abs(px) < side / 2) & (np.abs(py) < side / 2)


def _disc(radius, cx=0.0, cy=0.0):
    return lambda px, py: (px - cx) ** 2 + (py - cy) ** 2 < radius**2


def make_phantom(kind, grid: GridGeometry, wavelength: float | None = None,
                 contrast: complex | None = None, radius: float | None = None) -> np.ndarray:
    """Contrast vector of a named test object.

    Cells straddling a boundary get the area-weighted contrast (8x8
    sub-sampling).  ``wavelength`` defaults to ``grid.domain_side``.
    ``kind`` may also be a ``("homogeneous", contrast, radius)`` tuple.
    """
    if isinstance(kind, tuple):
        kind, contrast, radius = kind
    lam = grid.domain_side if wavelength is None else wavelength
    if kind in ("small-square", "large-square"):
        scale = 3.0 if kind == "large-square" else 1.0
        outer = _coverage(grid, _square(lam / 2))
        inner = _coverage(grid, _square(lam / 4))
        x = scale * (SMALL_OUTER * (outer - inner) + SMALL_INNER * inner)
    elif kind == "circular":
        x = (2.0 + 0j) * _coverage(grid, _disc(lam / 2))
    elif kind == "one-cylinder":
        x = ROD_CONTRAST * _coverage(grid, _disc(ROD_RADIUS * lam, 0.1 * lam, 0.05 * lam)) + 0j
    elif kind == "two-cylinders":
        r = ROD_RADIUS * lam
        cover = _coverage(grid, _disc(r, -0.22 * lam, 0.0)) + _coverage(grid, _disc(r, 0.22 * lam, 0.0))
        x = ROD_CONTRAST * cover + 0j
    elif kind == "homogeneous":
        if contrast is None or radius is None:
            raise ConfigError("homogeneous phantom needs contrast and radius")
        x = complex(contrast) * _coverage(grid, _disc(radius))
    else:
        raise ConfigError(f"unknown phantom kind {kind!r}; expected one of {PHANTOMS}")
    return np.asarray(x, dtype=complex)
