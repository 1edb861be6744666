"""Complex-valued conjugate-gradient machinery.

Linear CG, nonlinear Polak-Ribiere-Polyak CG with an optional diagonal
preconditioner, the exact step length for the two-term criterion (a quartic
in the step) and the inverse-diagonal-Hessian preconditioner.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .criterion import CriterionParams
from .errors import NumericalError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CgStopRule:
    """Stop once ||g||^2 <= ||g0||^2 / reduction, at max_iters, or below floor."""

    reduction: float = 10.0
    max_iters: int = 1000
    floor: float = 0.0

    def __post_init__(self):
        if not self.reduction >= 1:
            raise ValueError("reduction factor must be >= 1")

    def done(self, k, rho, rho0) -> bool:
        return k >= self.max_iters or rho <= self.floor or rho <= rho0 / self.reduction and k > 0


def _re_dot(a, b) -> float:
    return float(np.vdot(a, b).real)


def linear_cg(quad, v0, stop: CgStopRule, g0=None, on_step=None):
    """Minimize v^H H v - 2 Re(b^H v) from ``v0``.

    ``g0`` may carry a precomputed H v0 - b to save one Hessian product (the
    linear term is then never read).  ``on_step(alpha, p)`` is called after
    each update v += alpha p.  Returns ``(v, iterations, rho_trace)``.
    """
    v = np.array(v0, dtype=complex, copy=True)
    if g0 is not None:
        g = np.array(g0, dtype=complex, copy=True)
    elif np.any(v):
        g = quad.apply_hessian(v) - quad.linear_term
    else:
        g = -np.asarray(quad.linear_term, dtype=complex)
    rho = _re_dot(g, g)
    rho0 = rho
    trace = [rho]
    k = 0
    p = None
    rho_old = rho
    hscale = None
    while not stop.done(k, rho, rho0):
        p = -g if k == 0 else -g + (rho / rho_old) * p
        h = quad.apply_hessian(p)
        php = _re_dot(p, h)
        pp = _re_dot(p, p)
        if hscale is None:
            hscale = max(abs(php) / max(pp, 1e-300), 1e-300)
        if php <= -1e-12 * hscale * pp:
            raise NumericalError(f"non-positive curvature p^H H p = {php:.3e} in linear CG")
        if php <= 0:
            break
        alpha = rho / php
        v += alpha * p
        g += alpha * h
        if on_step is not None:
            on_step(alpha, p)
        rho_old = rho
        rho = _re_dot(g, g)
        if not math.isfinite(rho):
            raise NumericalError("linear CG diverged (non-finite gradient)")
        trace.append(rho)
        k += 1
    return v, k, trace


@dataclass
class CgTrace:
    values: list = field(default_factory=list)
    grad_norms2: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    restarts: int = 0


def preconditioned_cg(f, grad, line_search, precond, v0, stop: CgStopRule, callback=None):
    """Nonlinear PRP conjugate gradient with diagonal preconditioning.

    ``precond(v)`` returns the positive diagonal of P (or ``None`` for the
    identity); ``line_search(v, p, g)`` returns the step length.  Directions
    failing Re(g^H p) < 0 are reset to -P g.  ``callback(k, v, g)`` may return
    True to stop early.
    """
    v = np.array(v0, dtype=complex, copy=True)
    g = grad(v)
    rho0 = _re_dot(g, g)
    trace = CgTrace()
    trace.values.append(f(v))
    trace.grad_norms2.append(rho0)
    k = 0
    p = g_old = None
    while True:
        if callback is not None and callback(k, v, g):
            break
        rho = _re_dot(g, g)
        if stop.done(k, rho, rho0):
            break
        P = precond(v) if precond is not None else None
        if P is not None:
            P = _clamp(P)
        Pg = g if P is None else P * g
        if k == 0:
            p = -Pg
        else:
            Pg_old = g_old if P is None else P * g_old
            beta = _re_dot(g - g_old, Pg) / _re_dot(g_old, Pg_old)
            p = -Pg + beta * p
            if _re_dot(g, p) >= 0:
                p = -Pg
                trace.restarts += 1
        alpha = line_search(v, p, g)
        if not math.isfinite(alpha):
            raise NumericalError(f"line search returned a non-finite step {alpha}")
        v = v + alpha * p
        g_old = g
        g = grad(v)
        k += 1
        trace.steps.append(alpha)
        trace.values.append(f(v))
        trace.grad_norms2.append(_re_dot(g, g))
    return v, trace


def nonlinear_prp_cg(f, grad, line_search, v0, stop: CgStopRule, callback=None):
    return preconditioned_cg(f, grad, line_search, None, v0, stop, callback)


def _clamp(P):
    P = np.asarray(P, dtype=float)
    top = np.max(P)
    floor = 1e-12 * top if top > 0 else 1e-300
    bad = ~(P > floor)
    if np.any(bad):
        log.warning("clamping %d preconditioner entries to %.3e", int(bad.sum()), floor)
        P = np.where(bad, floor, P)
    return P


# -- cubic roots ----------------------------------------------------------------


_EPS = np.finfo(float).eps


def _poly(c, t):
    c3, c2, c1, c0 = c
    return ((c3 * t + c2) * t + c1) * t + c0


def _polish(c, t, iters=8):
    """Newton refinement, keeping only steps that reduce the residual."""
    c3, c2, c1, _ = c
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(iters):
            d = (3 * c3 * t + 2 * c2) * t + c1
            if d == 0:
                break
            t_new = t - _poly(c, t) / d
            if not abs(_poly(c, t_new)) < abs(_poly(c, t)):
                break
            t = t_new
    return t


def _quadratic_roots(a, b, c):
    """Real roots of a t^2 + b t + c, rescaled to avoid over/underflow."""
    if a == 0:
        if b == 0:
            return []
        return [float(-c / b)]
    with np.errstate(over="ignore"):
        B, C = np.float64(b) / a, np.float64(c) / a
    if not (math.isfinite(B) and math.isfinite(C)):
        return [float(-c / b)] if b != 0 else []
    s = max(abs(B), math.sqrt(abs(C)))
    if s == 0:
        return [0.0, 0.0]
    B, C = float(B) / s, float(C) / s / s
    disc = B * B - 4 * C
    if disc < 0:
        return []
    q = -0.5 * (B + math.copysign(math.sqrt(disc), B))
    if q == 0:
        return [0.0, 0.0]
    return sorted([q * s, C / q * s])


def _monic_cardano(a, b, c):
    """Real roots of t^3 + a t^2 + b t + c with |a|, |b|, |c| <= 1."""
    p = b - a * a / 3
    q = 2 * a**3 / 27 - a * b / 3 + c
    disc = (q / 2) ** 2 + (p / 3) ** 3
    shift = -a / 3
    if disc > 0 or p >= 0:
        if disc <= 0:
            return [shift]
        u = np.cbrt(-q / 2 - math.copysign(math.sqrt(disc), q))
        return [u - p / (3 * u) + shift if u != 0 else shift]
    r = math.sqrt(-p / 3)
    arg = max(-1.0, min(1.0, (-q / 2) / r**3))
    phi = math.acos(arg)
    return [2 * r * math.cos((phi - 2 * math.pi * j) / 3) + shift for j in range(3)]


def cubic_real_roots(c3, c2, c1, c0):
    """Real roots of c3 t^3 + c2 t^2 + c1 t + c0.

    The polynomial is rescaled to unit-size monic form, one root is taken
    from Cardano's formulas (trigonometric branch when all three are real)
    and Newton-polished, and the rest come from the deflated quadratic.
    """
    c3, c2, c1, c0 = (float(c) for c in (c3, c2, c1, c0))
    if c3 == c2 == c1 == c0 == 0:
        raise ValueError("all-zero polynomial has no isolated roots")
    if c3 == 0:
        return [t for t in _quadratic_roots(c2, c1, c0) if math.isfinite(t)]
    with np.errstate(over="ignore"):
        a, b, c = np.float64(c2) / c3, np.float64(c1) / c3, np.float64(c0) / c3
    if not (math.isfinite(a) and math.isfinite(b) and math.isfinite(c)):
        # ratios overflow: the leading term is negligible at float range
        return [t for t in _quadratic_roots(c2, c1, c0) if math.isfinite(t)]
    s = max(abs(a), math.sqrt(abs(b)), abs(c) ** (1 / 3))
    if s == 0:
        return [0.0, 0.0, 0.0]
    scaled = (1.0, a / s, b / s / s, c / s / s / s)
    cands = _monic_cardano(*scaled[1:])
    r = _polish(scaled, max(cands, key=abs))
    # deflate by (t - r) into t^2 + e1 t + e0 in the original units: from the
    # constant term up when r dominates the other roots, from the top down
    # otherwise (each order is the stable one for its case)
    r = float(r * s)
    a, b, c = float(a), float(b), float(c)
    if r != 0 and abs(r) >= abs(c) ** (1 / 3):
        e0 = -c / r
        e1 = (e0 - b) / r
    else:
        e1 = a + r
        e0 = b + r * e1
    disc = e1 * e1 - 4 * e0
    if -8 * _EPS * max(e1 * e1, abs(e0)) <= disc < 0:
        e0 = e1 * e1 / 4  # double root blurred by rounding
    monic = (1.0, a, b, c)
    roots = [r] + [_polish(monic, t) for t in _quadratic_roots(1.0, e1, e0)]
    return sorted(float(t) for t in roots if math.isfinite(t))


# -- exact step length ------------------------------------------------------------


@dataclass(frozen=True)
class LineSearchPolynomial:
    """F(a) = r0 + a r1 + a^2 r2 + a^3 r3 + a^4 r4."""

    r0: float
    r1: float
    r2: float
    r3: float = 0.0
    r4: float = 0.0

    def __call__(self, a):
        return (((self.r4 * a + self.r3) * a + self.r2) * a + self.r1) * a + self.r0


def minimize_quartic(poly: LineSearchPolynomial):
    """Global minimizer over real steps; returns ``(alpha, stagnated)``."""
    if poly.r4 == 0 and poly.r3 == 0:
        if poly.r2 > 0:
            return -poly.r1 / (2 * poly.r2), False
        return 0.0, True
    if poly.r4 < 0:
        raise NumericalError(f"negative quartic coefficient {poly.r4}")
    roots = cubic_real_roots(4 * poly.r4, 3 * poly.r3, 2 * poly.r2, poly.r1)
    if not roots:
        return 0.0, True
    vals = [poly(t) for t in roots]
    best = min(vals)
    tol = 1e-14 * max(abs(best), abs(poly.r0), 1e-300)
    ties = [t for t, val in zip(roots, vals) if val <= best + tol]
    return min(ties, key=abs), False


def quartic_coefficients(x, W, px, PW, ops, data, params: CriterionParams, gw=None, ow=None,
                         gp=None, op=None, lam=None) -> LineSearchPolynomial:
    """Coefficients of F(x + a px, W + a PW) for a fixed weight.

    ``gw``/``ow``/``gp``/``op`` are G_D W, G_O W, G_D PW, G_O PW; any left
    as None is computed.
    """
    if lam is None:
        if params.adaptive:
            raise ValueError("the quartic step polynomial needs a fixed weight")
        lam = float(params.lam)
    gw = ops.couple(W) if gw is None else gw
    ow = ops.observe(W) if ow is None else ow
    gp = ops.couple(PW) if gp is None else gp
    op = ops.observe(PW) if op is None else op
    etot = ops.incident + gw
    r1 = data.data - ow
    r2 = x * etot - W
    q2 = px * etot + x * gp - PW
    s2 = px * gp
    R0 = _re_dot(r1, r1) + lam * _re_dot(r2, r2)
    R1 = 2 * (-_re_dot(r1, op) + lam * _re_dot(r2, q2))
    R2 = _re_dot(op, op) + lam * (2 * _re_dot(r2, s2) + _re_dot(q2, q2))
    R3 = 2 * lam * _re_dot(q2, s2)
    R4 = lam * _re_dot(s2, s2)
    if params.lambda_reg > 0:
        D, lr = params.diff, params.lambda_reg
        rr, dp = D @ x, D @ px
        R0 += lr * _re_dot(rr, rr)
        R1 += 2 * lr * _re_dot(rr, dp)
        R2 += lr * _re_dot(dp, dp)
    return LineSearchPolynomial(R0, R1, R2, R3, R4)


def line_search_quartic(x, W, px, PW, ops, data, params, **cached):
    """Exact step along (px, PW): the real root of F'(a) minimizing F(a)."""
    alpha, _ = minimize_quartic(quartic_coefficients(x, W, px, PW, ops, data, params, **cached))
    return alpha


# -- preconditioner -------------------------------------------------------------------


@dataclass(frozen=True)
class DiagonalPreconditioner:
    """Inverse Hessian diagonal: x block followed by M identical w blocks."""

    inverse_diag: np.ndarray
    n: int

    @property
    def x_block(self):
        return self.inverse_diag[: self.n]

    @property
    def w_block(self):
        return self.inverse_diag[self.n : 2 * self.n]


def hessian_diagonals(x, ops, params: CriterionParams, gw, lam=None):
    """Diagonals of Q (x block) and A (w block)."""
    if lam is None:
        lam = float(params.lam)
    etot = ops.incident + gw
    q = lam * np.sum(np.abs(etot) ** 2, axis=0)
    if params.lambda_reg > 0:
        D = params.diff
        q = q + params.lambda_reg * np.asarray(D.multiply(D).sum(axis=0)).ravel()
    # diag((X G_D - I)^H (X G_D - I)) = |G_D|^T |x|^2 - 2 Re(diag(G_D) x) + 1
    coupling = ops.couple_abs2_adj(np.abs(x) ** 2) - 2 * np.real(np.diag(ops.gd) * x) + 1
    a = ops.go_col_norms2 + lam * coupling
    return q, a


def build_preconditioner(x, W, ops, params: CriterionParams, gw=None, lam=None):
    gw = ops.couple(W) if gw is None else gw
    q, a = hessian_diagonals(x, ops, params, gw, lam)
    diag = np.concatenate([q, np.tile(a, W.shape[0])])
    top = np.max(diag)
    floor = 1e-12 * top
    bad = ~(diag > floor)
    if np.any(bad):
        log.warning("clamping %d Hessian diagonal entries to %.3e", int(bad.sum()), floor)
        diag = np.where(bad, floor, diag)
    return DiagonalPreconditioner(1.0 / diag, ops.n)
