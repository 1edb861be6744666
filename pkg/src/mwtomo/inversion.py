"""Inversion drivers: CSI, alternated CG for CSI, simultaneous (P)CG.

All drivers keep G_D W and G_O W cached and update them incrementally, so
the operator-application count recorded in the trace reflects the real
dense work.  One count is one dense matrix applied to one vector.
"""

from __future__ import annotations

import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from numpy.polynomial import polynomial as npoly

from . import criterion as crit
from .criterion import CriterionParams
from .errors import ConfigError
from .model import MeasurementSet
from .optim import (
    CgStopRule,
    LineSearchPolynomial,
    build_preconditioner,
    linear_cg,
    minimize_quartic,
    nonlinear_prp_cg,
    preconditioned_cg,
    quartic_coefficients,
)

ALGORITHMS = ("csi", "acg-csi", "simultaneous-cg", "simultaneous-pcg")


@dataclass(frozen=True)
class InversionOptions:
    algorithm: str = "acg-csi"
    lam: float | str = 0.01
    lambda_reg: float = 0.0
    gradient_mode: str = "exact"
    inner_reduction: float = 10.0
    inner_max_iters: int = 200
    overrelax_w: float = 1.5
    overrelax_x: float = 1.5
    max_outer: int = 200
    grad_floor: float = 0.0
    f_rel_floor: float = 1e-8
    f_rel_window: int = 5
    max_ops: int | None = None
    parallel_w: bool = False
    init: str = "backprop"
    current_scale: float = 1.0
    preconditioner: str = "diagonal"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        for name in ("overrelax_w", "overrelax_x"):
            theta = getattr(self, name)
            if not 1 <= theta < 2:
                raise ConfigError(f"{name} must lie in [1, 2), got {theta}")
        if not self.inner_reduction >= 1:
            raise ConfigError("inner_reduction must be >= 1")
        if self.gradient_mode not in ("exact", "csi-approx"):
            raise ConfigError(f"unknown gradient_mode {self.gradient_mode!r}")
        if self.init not in ("zero", "backprop"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.preconditioner not in ("diagonal", "identity"):
            raise ConfigError(f"unknown preconditioner {self.preconditioner!r}")
        if not self.current_scale > 0:
            raise ConfigError("current_scale must be > 0")
        if self.max_outer < 0:
            raise ConfigError("max_outer must be >= 0")
        CriterionParams(self.lam, 0.0)  # validates lam

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown inversion option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class InversionState:
    x: np.ndarray
    W: np.ndarray
    iteration: int = 0
    memory: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TraceRow:
    iter: int
    time_s: float
    F: float
    F1: float
    F2: float
    Freg: float
    lam: float
    grad_x_norm: float
    mse: float
    op_count: int


TRACE_COLUMNS = ("iter", "time_s", "F", "F1", "F2", "Freg", "lambda", "grad_x_norm", "mse", "op_count")


@dataclass
class InversionTrace:
    rows: list = field(default_factory=list)
    stop_reason: str = ""

    def column(self, name):
        attr = "lam" if name == "lambda" else name
        return np.array([getattr(r, attr) for r in self.rows])

    def __len__(self):
        return len(self.rows)


class CountingOperators:
    """Delegating wrapper that tallies dense operator applications."""

    def __init__(self, ops):
        self._ops = ops
        self.count = 0
        self._lock = threading.Lock()

    def _tally(self, a, k=None):
        with self._lock:
            self.count += k if k is not None else (1 if np.ndim(a) == 1 else a.shape[0])

    def observe(self, W):
        self._tally(W)
        return self._ops.observe(W)

    def observe_adj(self, R):
        self._tally(R)
        return self._ops.observe_adj(R)

    def couple(self, W):
        self._tally(W)
        return self._ops.couple(W)

    def couple_adj(self, V):
        self._tally(V)
        return self._ops.couple_adj(V)

    def couple_abs2_adj(self, u):
        self._tally(u, 1)
        return self._ops.couple_abs2_adj(u)

    def __getattr__(self, name):
        return getattr(self._ops, name)


def make_params(opts: InversionOptions, n: int) -> CriterionParams:
    ns = math.isqrt(n)
    diff = crit.difference_operator(ns) if ns * ns == n else None
    if opts.lambda_reg > 0 and diff is None:
        raise ConfigError("regularization needs a square grid")
    return CriterionParams(opts.lam, opts.lambda_reg, diff)


def init_state(ops, data: MeasurementSet, mode="backprop", params: CriterionParams | None = None):
    """Starting point.  Returns ``(state, gw, ow)`` with G_D W and G_O W."""
    M, n = ops.incident.shape
    if mode == "zero":
        if params is not None and params.adaptive:
            raise ConfigError("zero initialization leaves the contrast-adaptive weight undefined; "
                              "use backprop")
        zeros = np.zeros((M, n), dtype=complex)
        return InversionState(np.zeros(n, dtype=complex), zeros), zeros.copy(), np.zeros_like(data.data)
    if mode != "backprop":
        raise ConfigError(f"unknown init mode {mode!r}")
    B = ops.observe_adj(data.data)
    GB = ops.observe(B)
    num = np.sum(np.abs(B) ** 2, axis=1)
    den = np.sum(np.abs(GB) ** 2, axis=1)
    eta = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    W = eta[:, None] * B
    ow = eta[:, None] * GB
    gw = ops.couple(W)
    x = crit.pixel_minimizer(W, ops.incident + gw)
    return InversionState(x, W), gw, ow


def _start(cops, data, opts, params, start):
    if start is None:
        return init_state(cops, data, opts.init, params)
    x = np.array(start.x, dtype=complex, copy=True)
    W = np.array(start.W, dtype=complex, copy=True)
    if params.adaptive and not np.any(x):
        raise ConfigError("a zero starting contrast leaves the contrast-adaptive weight undefined")
    return InversionState(x, W), cops.couple(W), cops.observe(W)


class _Recorder:
    def __init__(self, ops, data, params, opts, truth, observer=None):
        self.ops, self.data, self.params, self.opts, self.truth = ops, data, params, opts, truth
        self.observer = observer
        self.trace = InversionTrace()
        self.t0 = time.perf_counter()
        self.g0 = None
        self.calm = 0

    def record(self, k, x, W, gw, ow):
        val = crit.eval_criterion(x, W, self.ops, self.data, self.params, gw=gw, ow=ow)
        g = crit.grad_x(x, W, self.ops, self.data, self.params, "exact", gw=gw)
        gnorm = float(np.linalg.norm(g))
        err = crit.mse(x, self.truth) if self.truth is not None else math.nan
        row = TraceRow(k, time.perf_counter() - self.t0, val.total, val.f1, val.f2, val.f_reg,
                       val.lambda_used, gnorm, err, self.ops.count)
        self.trace.rows.append(row)
        if self.observer is not None:
            self.observer(k, x, W)
        return row

    def should_stop(self) -> bool:
        rows, opts = self.trace.rows, self.opts
        last = rows[-1]
        if last.iter >= opts.max_outer:
            self.trace.stop_reason = "max_outer"
            return True
        if opts.max_ops is not None and last.op_count >= opts.max_ops:
            self.trace.stop_reason = "max_ops"
            return True
        if opts.grad_floor > 0 and last.grad_x_norm <= opts.grad_floor * rows[0].grad_x_norm:
            self.trace.stop_reason = "grad_floor"
            return True
        if len(rows) >= 2 and opts.f_rel_floor > 0:
            prev = rows[-2].F
            if abs(last.F - prev) <= opts.f_rel_floor * abs(prev):
                self.calm += 1
            else:
                self.calm = 0
            if self.calm >= opts.f_rel_window:
                self.trace.stop_reason = "f_rel_floor"
                return True
        if not math.isfinite(last.F):
            self.trace.stop_reason = "non-finite"
            return True
        return False


def _prp_direction(g, mem, key):
    """Polak-Ribiere direction for one block, conjugated with its last visit."""
    prev = mem.get(key)
    if prev is None:
        p = -g
    else:
        g_old, p_old = prev
        beta = float(np.vdot(g - g_old, g).real) / float(np.vdot(g_old, g_old).real)
        p = -g + beta * p_old
        if np.vdot(g, p).real >= 0:
            p = -g
    return p


def _adaptive_x_step(x, p, r2, q2, ops, data, params):
    """Exact step in x for F1 + lam_csi(x) F2 + lam_r Freg (W fixed).

    lam_csi F2 is a ratio of quadratics in the step, so stationary points are
    roots of a polynomial of degree <= 5.
    """
    c = float(np.sum(np.abs(data.data) ** 2))
    e2 = np.sum(np.abs(ops.incident) ** 2, axis=0)
    num = np.array([np.vdot(r2, r2).real, 2 * np.vdot(r2, q2).real, np.vdot(q2, q2).real])
    den = np.array([np.sum(e2 * np.abs(x) ** 2), 2 * np.sum(e2 * (x.conj() * p).real),
                    np.sum(e2 * np.abs(p) ** 2)])
    reg = np.zeros(3)
    if params.lambda_reg > 0:
        D = params.diff
        dx, dp = D @ x, D @ p
        reg = params.lambda_reg * np.array([np.vdot(dx, dx).real, 2 * np.vdot(dx, dp).real,
                                            np.vdot(dp, dp).real])

    def F(a):
        return c * npoly.polyval(a, num) / npoly.polyval(a, den) + npoly.polyval(a, reg)

    stationary = c * npoly.polysub(npoly.polymul(npoly.polyder(num), den),
                                   npoly.polymul(num, npoly.polyder(den)))
    stationary = npoly.polyadd(stationary, npoly.polymul(npoly.polyder(reg),
                                                        npoly.polymul(den, den)))
    stationary = np.trim_zeros(np.atleast_1d(stationary), "b")
    candidates = [0.0]
    if stationary.size > 1 and np.all(np.isfinite(stationary)):
        for r in npoly.polyroots(stationary):
            if abs(r.imag) <= 1e-8 * (1 + abs(r.real)) and npoly.polyval(r.real, den) > 0:
                candidates.append(float(r.real))
    vals = [F(a) for a in candidates]
    return candidates[int(np.argmin(vals))]


def run_csi(ops, data, opts: InversionOptions, truth=None, start=None, observer=None):
    """Original CSI: one PRP step per current, then one per contrast, per sweep.

    Each block keeps its conjugation memory across sweeps.
    """
    cops = CountingOperators(ops)
    params = make_params(opts, ops.n)
    state, gw, ow = _start(cops, data, opts, params, start)
    x, W = state.x, state.W
    rec = _Recorder(cops, data, params, opts, truth, observer)
    rec.record(0, x, W, gw, ow)
    mem = state.memory
    M = W.shape[0]
    k = 0
    while not rec.should_stop():
        lam = crit.weight(x, data, cops, params)
        xc = x.conj()
        for i in range(M):
            r1 = data.data[i] - ow[i]
            r2 = x * (ops.incident[i] + gw[i]) - W[i]
            g = -2 * cops.observe_adj(r1) + 2 * lam * (cops.couple_adj(xc * r2) - r2)
            p = _prp_direction(g, mem, ("w", i))
            gp = cops.couple(p)
            op = cops.observe(p)
            s = x * gp - p
            poly = LineSearchPolynomial(
                0.0,
                2 * (-np.vdot(r1, op).real + lam * np.vdot(r2, s).real),
                np.vdot(op, op).real + lam * np.vdot(s, s).real,
            )
            alpha, _ = minimize_quartic(poly)
            W[i] += alpha * p
            gw[i] += alpha * gp
            ow[i] += alpha * op
            mem[("w", i)] = (g, p)

        etot = ops.incident + gw
        r2 = x * etot - W
        g = crit.grad_x(x, W, cops, data, params, opts.gradient_mode, gw=gw)
        p = _prp_direction(g, mem, "x")
        q2 = p * etot
        if params.adaptive and opts.gradient_mode == "exact":
            alpha = _adaptive_x_step(x, p, r2, q2, cops, data, params)
        else:
            lam = crit.weight(x, data, cops, params)
            r1c = 2 * lam * np.vdot(r2, q2).real
            r2c = lam * np.vdot(q2, q2).real
            if params.lambda_reg > 0:
                D = params.diff
                dx, dp = D @ x, D @ p
                r1c += 2 * params.lambda_reg * np.vdot(dx, dp).real
                r2c += params.lambda_reg * np.vdot(dp, dp).real
            alpha, _ = minimize_quartic(LineSearchPolynomial(0.0, r1c, r2c))
        x = x + alpha * p
        mem["x"] = (g, p)
        k += 1
        rec.record(k, x, W, gw, ow)
    state.x, state.W, state.iteration = x, W, k
    return state, rec.trace


def run_acg_csi(ops, data, opts: InversionOptions, truth=None, start=None, observer=None):
    """Alternated conjugate gradient: truncated linear CG per block, overrelaxed."""
    if opts.lam == crit.CSI:
        raise ConfigError("alternated CG needs a fixed weight: with the contrast-adaptive weight "
                          "F is no longer quadratic in x, so the linear CG sub-problems are undefined")
    cops = CountingOperators(ops)
    params = make_params(opts, ops.n)
    lam = float(params.lam)
    state, gw, ow = _start(cops, data, opts, params, start)
    x, W = state.x, state.W
    rec = _Recorder(cops, data, params, opts, truth, observer)
    rec.record(0, x, W, gw, ow)
    M = W.shape[0]
    adj_data = cops.observe_adj(data.data)
    stop = CgStopRule(opts.inner_reduction, opts.inner_max_iters)
    tw, tx = opts.overrelax_w, opts.overrelax_x

    def solve_block(i):
        # gradient at the warm start from the cached G_D w_i, G_O w_i:
        # A w - b = G_O^H (G_O w - y) + lam (X G_D - I)^H r2
        xc = x.conj()
        r2 = x * (ops.incident[i] + gw[i]) - W[i]
        g0 = cops.observe_adj(ow[i]) - adj_data[i] + lam * (cops.couple_adj(xc * r2) - r2)
        last = {}
        acc = [gw[i].copy(), ow[i].copy()]

        def apply_hessian(v):
            gv, ov = cops.couple(v), cops.observe(v)
            last["p"] = (gv, ov)
            sv = x * gv - v
            return cops.observe_adj(ov) + lam * (cops.couple_adj(xc * sv) - sv)

        def on_step(alpha, p):
            gv, ov = last["p"]
            acc[0] += alpha * gv
            acc[1] += alpha * ov

        quad = crit.QuadraticForm(apply_hessian, None, ops.n)
        w_cg, _, _ = linear_cg(quad, W[i], stop, g0=g0, on_step=on_step)
        return (W[i] + tw * (w_cg - W[i]), gw[i] + tw * (acc[0] - gw[i]),
                ow[i] + tw * (acc[1] - ow[i]))

    k = 0
    pool = ThreadPoolExecutor(max_workers=M) if opts.parallel_w else None
    try:
        while not rec.should_stop():
            results = list(pool.map(solve_block, range(M))) if pool else [solve_block(i) for i in range(M)]
            for i, (w_new, gwi, owi) in enumerate(results):
                W[i], gw[i], ow[i] = w_new, gwi, owi
            quad = crit.x_quadratic(W, cops, params, gw=gw, lam=lam)
            x_cg, _, _ = linear_cg(quad, x, stop)
            x = x + tx * (x_cg - x)
            k += 1
            rec.record(k, x, W, gw, ow)
    finally:
        if pool:
            pool.shutdown()
    state.x, state.W, state.iteration = x, W, k
    return state, rec.trace


class _StackedProblem:
    """F on v = (x, c W) for simultaneous updates, with G_D W / G_O W cached."""

    def __init__(self, ops, data, params, x, W, gw, ow, scale):
        self.ops, self.data, self.params, self.c = ops, data, params, scale
        self.n, self.M = x.size, W.shape[0]
        self._set(self.pack(x, W), x, W, gw, ow)
        self._pending = None

    def pack(self, x, W):
        return np.concatenate([x, (self.c * W).ravel()])

    def split(self, v):
        return v[: self.n], v[self.n :].reshape(self.M, self.n) / self.c

    def _set(self, v, x, W, gw, ow):
        self.v, self.x, self.W, self.gw, self.ow = v, x, W, gw, ow

    def sync(self, v):
        if v is self.v or np.array_equal(v, self.v):
            return
        if self._pending is not None and np.array_equal(v, self._pending[0]):
            self._set(*self._pending)
        else:
            x, W = self.split(v)
            self._set(v, x, W, self.ops.couple(W), self.ops.observe(W))
        self._pending = None

    def value(self, v):
        self.sync(v)
        return crit.eval_criterion(self.x, self.W, self.ops, self.data, self.params,
                                   gw=self.gw, ow=self.ow).total

    def gradient(self, v):
        self.sync(v)
        gx = crit.grad_x(self.x, self.W, self.ops, self.data, self.params, gw=self.gw)
        gW = crit.grad_w_all(self.x, self.W, self.ops, self.data, self.params, gw=self.gw, ow=self.ow)
        return np.concatenate([gx, (gW / self.c).ravel()])

    def line_search(self, v, p, g):
        self.sync(v)
        px, PW = self.split(p)
        gp, op = self.ops.couple(PW), self.ops.observe(PW)
        poly = quartic_coefficients(self.x, self.W, px, PW, self.ops, self.data, self.params,
                                    gw=self.gw, ow=self.ow, gp=gp, op=op)
        alpha, _ = minimize_quartic(poly)
        v_next = v + alpha * p
        x_next, W_next = self.split(v_next)
        self._pending = (v_next, x_next, W_next, self.gw + alpha * gp, self.ow + alpha * op)
        return alpha

    def precond(self, v):
        self.sync(v)
        P = build_preconditioner(self.x, self.W, self.ops, self.params, gw=self.gw)
        # Hessian in the scaled currents is diag(A) / c^2
        out = P.inverse_diag.copy()
        out[self.n :] *= self.c**2
        return out

    def identity(self, v):
        return np.ones(self.n * (self.M + 1))


def run_simultaneous(ops, data, opts: InversionOptions, truth=None, start=None, observer=None):
    """Nonlinear (preconditioned) CG on the stacked vector (x, w_1..w_M)."""
    if opts.lam == crit.CSI:
        raise ConfigError("simultaneous CG needs a fixed weight (the quartic step assumes it)")
    cops = CountingOperators(ops)
    params = make_params(opts, ops.n)
    state, gw, ow = _start(cops, data, opts, params, start)
    prob = _StackedProblem(cops, data, params, state.x, state.W, gw, ow, opts.current_scale)
    rec = _Recorder(cops, data, params, opts, truth, observer)

    def callback(k, v, g):
        prob.sync(v)
        rec.record(k, prob.x, prob.W, prob.gw, prob.ow)
        return rec.should_stop()

    stop = CgStopRule(reduction=math.inf, max_iters=opts.max_outer + 1)
    if opts.algorithm == "simultaneous-cg":
        v, _ = nonlinear_prp_cg(prob.value, prob.gradient, prob.line_search, prob.v, stop, callback)
    else:
        pre = prob.precond if opts.preconditioner == "diagonal" else prob.identity
        v, _ = preconditioned_cg(prob.value, prob.gradient, prob.line_search, pre, prob.v, stop,
                                 callback)
    prob.sync(v)
    state.x, state.W = prob.x, prob.W
    state.iteration = rec.trace.rows[-1].iter
    return state, rec.trace


def run_inversion(ops, data, opts: InversionOptions, truth=None, start=None, observer=None):
    """Dispatch on ``opts.algorithm``.

    ``start`` overrides the configured initialization; ``observer(k, x, W)``
    sees every recorded iterate (read-only).
    """
    if opts.algorithm == "csi":
        return run_csi(ops, data, opts, truth, start, observer)
    if opts.algorithm == "acg-csi":
        return run_acg_csi(ops, data, opts, truth, start, observer)
    return run_simultaneous(ops, data, opts, truth, start, observer)
