"""Two-term penalized criterion, its gradients and quadratic sub-forms.

F = F1 + lam * F2 + lam_r * Freg with

    F1   = sum_i ||y_i - G_O w_i||^2
    F2   = sum_i ||X (E0_i + G_D w_i) - w_i||^2
    Freg = ||D x||^2

Gradient convention: every gradient is twice the Wirtinger derivative with
respect to the conjugate variable, so that for f(v) = v^H A v - 2 Re(b^H v)
the gradient is 2 (A v - b) and the directional derivative along d is
Re(g^H d).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse

from .errors import ConfigError, UndefinedWeightError
from .model import GridGeometry, MeasurementSet, ScatteringOperators

CSI = "csi"


@dataclass(frozen=True)
class CriterionParams:
    """``lam`` is a positive float (fixed weight) or ``"csi"`` (contrast-adaptive)."""

    lam: float | str = 0.01
    lambda_reg: float = 0.0
    diff: sparse.spmatrix | None = None

    def __post_init__(self):
        if self.lam != CSI and not (isinstance(self.lam, (int, float)) and self.lam > 0):
            raise ConfigError(f"lam must be > 0 or 'csi', got {self.lam!r}")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be >= 0")
        if self.lambda_reg > 0 and self.diff is None:
            raise ConfigError("lambda_reg > 0 needs a difference operator")

    @property
    def adaptive(self) -> bool:
        return self.lam == CSI

    def with_lam(self, lam):
        return CriterionParams(lam, self.lambda_reg, self.diff)


@dataclass(frozen=True)
class CriterionValue:
    f1: float
    f2: float
    f_reg: float
    lambda_used: float
    lambda_reg: float = 0.0

    @property
    def total(self) -> float:
        return self.f1 + self.lambda_used * self.f2 + self.lambda_reg * self.f_reg


@dataclass(frozen=True)
class QuadraticForm:
    """f(v) = v^H H v - 2 Re(b^H v) + const, with H applied matrix-free."""

    apply_hessian: Callable[[np.ndarray], np.ndarray]
    linear_term: np.ndarray
    dim: int

    def value(self, v) -> float:
        """f(v) up to the unknown constant."""
        return float(np.vdot(v, self.apply_hessian(v)).real - 2 * np.vdot(self.linear_term, v).real)

    def gradient(self, v):
        return 2 * (self.apply_hessian(v) - self.linear_term)


def _sq(a) -> float:
    return float(np.vdot(a, a).real)


def difference_operator(grid: GridGeometry | int) -> sparse.csr_matrix:
    """First differences between horizontal then vertical grid neighbours.

    Accepts a grid or just its side length.
    """
    ns = grid if isinstance(grid, (int, np.integer)) else grid.grid_side
    idx = np.arange(ns * ns).reshape(ns, ns)
    left, right = idx[:, :-1].ravel(), idx[:, 1:].ravel()
    up, down = idx[:-1, :].ravel(), idx[1:, :].ravel()
    a = np.concatenate([left, up])
    b = np.concatenate([right, down])
    rows = np.arange(a.size)
    data = np.concatenate([-np.ones(a.size), np.ones(a.size)])
    D = sparse.coo_matrix((data, (np.concatenate([rows, rows]), np.concatenate([a, b]))),
                          shape=(a.size, ns * ns))
    return D.tocsr()


def _reg(x, params):
    if params.diff is None:
        return 0.0
    return _sq(params.diff @ x)


def illumination_power(x, ops: ScatteringOperators):
    """sum_i ||X E0_i||^2."""
    return float(np.sum(np.abs(x) ** 2 * np.sum(np.abs(ops.incident) ** 2, axis=0)))


def lambda_csi(x, data: MeasurementSet, ops: ScatteringOperators) -> float:
    denom = illumination_power(x, ops)
    if denom <= 0:
        raise UndefinedWeightError("contrast-adaptive weight undefined for a zero contrast")
    return float(np.sum(np.abs(data.data) ** 2) / denom)


def weight(x, data, ops, params: CriterionParams) -> float:
    return lambda_csi(x, data, ops) if params.adaptive else float(params.lam)


def residuals(x, W, ops, data, gw=None, ow=None):
    """Observation residual r1, coupling residual r2 and total fields."""
    if gw is None:
        gw = ops.couple(W)
    if ow is None:
        ow = ops.observe(W)
    etot = ops.incident + gw
    return data.data - ow, x * etot - W, etot


def eval_criterion(x, W, ops, data, params: CriterionParams, gw=None, ow=None) -> CriterionValue:
    r1, r2, _ = residuals(x, W, ops, data, gw, ow)
    return CriterionValue(_sq(r1), _sq(r2), _reg(x, params), weight(x, data, ops, params),
                          params.lambda_reg)


def grad_x(x, W, ops, data, params: CriterionParams, mode="exact", gw=None, ow=None):
    """Gradient of F with respect to the contrast.

    ``mode="csi-approx"`` drops the F2 * grad(lambda) term that appears
    under the contrast-adaptive weight.
    """
    if mode not in ("exact", "csi-approx"):
        raise ConfigError(f"unknown gradient mode {mode!r}")
    if gw is None:
        gw = ops.couple(W)
    etot = ops.incident + gw
    r2 = x * etot - W
    lam = weight(x, data, ops, params)
    g = 2 * lam * np.sum(etot.conj() * r2, axis=0)
    if params.adaptive and mode == "exact":
        e2 = np.sum(np.abs(ops.incident) ** 2, axis=0)
        g = g + _sq(r2) * (-2 * lam * e2 * x / illumination_power(x, ops))
    if params.lambda_reg > 0:
        D = params.diff
        g = g + 2 * params.lambda_reg * (D.T @ (D @ x))
    return g


def grad_w_all(x, W, ops, data, params: CriterionParams, gw=None, ow=None):
    """Gradients with respect to every current at once, shape (M, n)."""
    r1, r2, _ = residuals(x, W, ops, data, gw, ow)
    lam = weight(x, data, ops, params)
    return -2 * ops.observe_adj(r1) + 2 * lam * (ops.couple_adj(x.conj() * r2) - r2)


def grad_w(i, x, W, ops, data, params: CriterionParams):
    Wi = W[i]
    r1 = data.data[i] - ops.observe(Wi)
    r2 = x * (ops.incident[i] + ops.couple(Wi)) - Wi
    lam = weight(x, data, ops, params)
    return -2 * ops.observe_adj(r1) + 2 * lam * (ops.couple_adj(x.conj() * r2) - r2)


def w_quadratic(i, x, ops, data, params: CriterionParams, lam=None) -> QuadraticForm:
    """F as a quadratic function of w_i with x and the other currents fixed.

    H v = G_O^H G_O v + lam (X G_D - I)^H (X G_D - I) v
    b_i = G_O^H y_i - lam (X G_D - I)^H X E0_i
    """
    if lam is None:
        lam = weight(x, data, ops, params)
    xc = x.conj()

    def coupling_adj(r):
        return ops.couple_adj(xc * r) - r

    def apply_hessian(v):
        s = x * ops.couple(v) - v
        return ops.observe_adj(ops.observe(v)) + lam * coupling_adj(s)

    b = ops.observe_adj(data.data[i]) - lam * coupling_adj(x * ops.incident[i])
    return QuadraticForm(apply_hessian, b, ops.n)


def x_quadratic(W, ops, params: CriterionParams, gw=None, lam=None) -> QuadraticForm:
    """F as a quadratic function of x with the currents fixed (fixed weight only).

    H v = lam sum_i |Delta_i|^2 v + lam_r D^T D v,   b = lam sum_i conj(Delta_i) w_i
    """
    if lam is None:
        if params.adaptive:
            raise ConfigError("the quadratic form in x needs a fixed weight")
        lam = float(params.lam)
    if gw is None:
        gw = ops.couple(W)
    etot = ops.incident + gw
    diag = lam * np.sum(np.abs(etot) ** 2, axis=0)
    b = lam * np.sum(etot.conj() * W, axis=0)
    D, lr = params.diff, params.lambda_reg

    def apply_hessian(v):
        out = diag * v
        if lr > 0:
            out = out + lr * (D.T @ (D @ v))
        return out

    return QuadraticForm(apply_hessian, b, W.shape[1])


def pixel_minimizer(W, etot):
    """Per-pixel minimizer of F2 in x for fixed currents (no regularization)."""
    num = np.sum(etot.conj() * W, axis=0)
    den = np.sum(np.abs(etot) ** 2, axis=0)
    out = np.zeros_like(num)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def mse(x, x_true) -> float:
    ref = _sq(x_true)
    if ref == 0:
        raise ValueError("reconstruction error undefined for a zero reference contrast")
    return _sq(np.asarray(x) - x_true) / ref
