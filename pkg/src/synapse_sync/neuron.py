"""Conductance-based relaxation neurons and their singular-limit geometry.

Each neuron obeys

    tau(v) dx/dt = -x + x_inf(v)
    eps dv/dt    = f(x, v) + (E_syn - v) m

with ``f(x, v) = g_L (E_L - v) + g_Ca m_inf(v) (E_Ca - v) + g_K x (E_K - v) + I``
and ``m >= 0`` the synaptic drive.  Because ``f`` is affine in ``x`` the voltage
nullcline is the graph of a closed-form function ``x^m(v)``, so knees and
branches reduce to one-dimensional root finding.

Only the time-constant family :class:`PiecewiseTimeConstant` has a singular
limit, which is what the slow/fast branch flows and travel-time tables need.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .errors import (
    DegenerateFlowError,
    DomainError,
    GeometryError,
    NotNShapedError,
    NumericError,
    OffBranchError,
)

H_MIN = 1e-8
KNEE_GRID = 2000
KNEE_XTOL = 1e-13


def _out(values, like):
    """Return a float for scalar input, an array otherwise."""
    if np.ndim(like) == 0:
        return float(np.asarray(values).reshape(()))
    return np.asarray(values, dtype=float)


def _logistic(z):
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(z, dtype=float))


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TanhSigmoid:
    """Smooth sigmoid ``0.5 + 0.5 tanh((v - center) / width)``."""

    center: float = 0.0
    width: float = 0.15

    @property
    def breakpoints(self):
        return ()

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        return _out(0.5 + 0.5 * np.tanh((v - self.center) / self.width), v)

    def derivative(self, v):
        v = np.asarray(v, dtype=float)
        t = np.tanh((v - self.center) / self.width)
        return _out(0.5 * (1.0 - t * t) / self.width, v)

    def smooth(self, v, kappa):
        return self(v)


@dataclass(frozen=True)
class Step:
    """Heaviside step equal to 1 for ``v >= at``; logistic of width kappa when smoothed."""

    at: float = 0.0

    @property
    def breakpoints(self):
        return (self.at,)

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        return _out(np.where(v >= self.at, 1.0, 0.0), v)

    def derivative(self, v):
        v = np.asarray(v, dtype=float)
        return _out(np.zeros_like(v), v)

    def smooth(self, v, kappa):
        v = np.asarray(v, dtype=float)
        if kappa <= 0:
            return self(v)
        return _out(_logistic((v - self.at) / kappa), v)


@dataclass(frozen=True)
class CoshTimeConstant:
    """Smooth time constant ``1 / cosh((v - center) / width)``.

    It has no ultrafast regime, so it supports ODE simulation only.
    """

    center: float = -0.1
    width: float = 0.29
    singular = False

    @property
    def breakpoints(self):
        return ()

    def __call__(self, v, eps=None, kappa=0.0):
        v = np.asarray(v, dtype=float)
        return _out(1.0 / np.cosh((v - self.center) / self.width), v)

    def derivative(self, v):
        v = np.asarray(v, dtype=float)
        u = (v - self.center) / self.width
        return _out(-np.tanh(u) / np.cosh(u) / self.width, v)

    def slow_limit(self, v):
        raise GeometryError("cosh time constant has no singular limit")

    def fast_rate(self, v):
        raise GeometryError("cosh time constant has no singular limit")


@dataclass(frozen=True)
class PiecewiseTimeConstant:
    """Ultrafast / fast / slow time-constant profile.

    ``eps**q`` at or above ``threshold``, ``eps**q + tau_knee`` on
    ``[v_break, threshold)`` and ``eps**q + tau_deep`` below ``v_break``; the
    whole profile is multiplied by ``scale``.
    """

    tau_knee: float = 30.0
    tau_deep: float = 5.0
    v_break: float = -0.258
    threshold: float = 0.01
    q: float = 0.5
    scale: float = 1.0
    singular = True

    def __post_init__(self):
        if min(self.tau_knee, self.tau_deep, self.q, self.scale) <= 0:
            raise DomainError("time constants, q and scale must be positive")
        if not self.v_break < self.threshold:
            raise DomainError("v_break must lie below the threshold")

    @property
    def breakpoints(self):
        return (self.v_break, self.threshold)

    def __call__(self, v, eps, kappa=0.0):
        v = np.asarray(v, dtype=float)
        base = eps**self.q
        if kappa <= 0:
            tau = np.where(v >= self.threshold, base,
                           np.where(v >= self.v_break, base + self.tau_knee, base + self.tau_deep))
        else:
            tau = (base + self.tau_knee * _logistic((self.threshold - v) / kappa)
                   + (self.tau_deep - self.tau_knee) * _logistic((self.v_break - v) / kappa))
        return _out(self.scale * tau, v)

    def slow_limit(self, v):
        """Limit of tau as eps -> 0; zero above threshold."""
        v = np.asarray(v, dtype=float)
        tau = np.where(v >= self.threshold, 0.0,
                       np.where(v >= self.v_break, self.tau_knee, self.tau_deep))
        return _out(self.scale * tau, v)

    def fast_rate(self, v):
        """Limit of eps**q / tau as eps -> 0; zero below threshold."""
        v = np.asarray(v, dtype=float)
        return _out(np.where(v >= self.threshold, 1.0 / self.scale, 0.0), v)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NeuronModel:
    """Parameters of one neuron; immutable and hashable."""

    g_L: float
    g_Ca: float
    g_K: float
    E_L: float = -0.4
    E_Ca: float = 1.0
    E_K: float = -0.7
    E_syn: float = 1.0
    I_app: float = 0.4
    activation: TanhSigmoid = TanhSigmoid(0.0, 0.15)
    gating: TanhSigmoid | Step = Step(0.0)
    time_constant: PiecewiseTimeConstant | CoshTimeConstant = PiecewiseTimeConstant()
    threshold: float = 0.01
    margin: float = 0.36
    x_box: tuple = (0.0, 1.0)
    v_box: tuple = (-0.7, 1.0)
    kappa: float = 1e-3

    def __post_init__(self):
        if min(self.g_L, self.g_K) <= 0 or self.g_Ca < 0:
            raise DomainError("conductances must be positive")
        if self.margin < 0 or self.kappa < 0:
            raise DomainError("margin and smoothing width must be nonnegative")
        if self.E_syn < self.v_box[1]:
            raise DomainError("E_syn must not lie below the top of the voltage box")
        if not (self.x_box[0] < self.x_box[1] and self.v_box[0] < self.v_box[1]):
            raise DomainError("empty domain box")
        object.__setattr__(self, "x_box", tuple(float(b) for b in self.x_box))
        object.__setattr__(self, "v_box", tuple(float(b) for b in self.v_box))

    def f(self, x, v, m=0.0):
        """Perturbed voltage field without any domain check."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        val = (self.g_L * (self.E_L - v) + self.g_Ca * self.activation(v) * (self.E_Ca - v)
               + self.g_K * x * (self.E_K - v) + self.I_app + (self.E_syn - v) * m)
        return _out(val, x + v)

    def with_time_scale(self, factor):
        """Copy with the whole time-constant profile multiplied by ``factor``."""
        tc = self.time_constant
        if not isinstance(tc, PiecewiseTimeConstant):
            raise GeometryError("only piecewise profiles can be rescaled")
        return replace(self, time_constant=replace(tc, scale=tc.scale * factor))


def piecewise_neuron(g_L, g_Ca, g_K, *, tau_knee=30.0, tau_deep=5.0, q=0.5,
                     threshold=0.01, v_break=-0.258, margin=0.36, kappa=1e-3):
    """Neuron with a step gating nullcline at v = 0 and the piecewise profile."""
    return NeuronModel(
        g_L=g_L, g_Ca=g_Ca, g_K=g_K,
        gating=Step(0.0),
        time_constant=PiecewiseTimeConstant(tau_knee, tau_deep, v_break, threshold, q),
        threshold=threshold, margin=margin, kappa=kappa,
    )


def smooth_neuron(g_L=0.5, g_Ca=1.0, g_K=2.0, *, threshold=0.0):
    """Smooth Morris-Lecar type neuron with tanh gating and cosh time constant."""
    return NeuronModel(
        g_L=g_L, g_Ca=g_Ca, g_K=g_K,
        gating=TanhSigmoid(-0.1, 0.145),
        time_constant=CoshTimeConstant(-0.1, 0.29),
        threshold=threshold, margin=0.0,
    )


def in_domain(model, x, v, tol=0.0):
    (x0, x1), (v0, v1) = model.x_box, model.v_box
    x = np.asarray(x)
    v = np.asarray(v)
    return (x >= x0 - tol) & (x <= x1 + tol) & (v >= v0 - tol) & (v <= v1 + tol)


def eval_f(model, x, v, m=0.0, *, check_domain=True):
    """``f(x, v) + (E_syn - v) m`` with unsmoothed nonlinearities."""
    if np.any(np.asarray(m) < 0):
        raise DomainError("perturbation level must be nonnegative")
    if check_domain and not np.all(in_domain(model, x, v)):
        raise DomainError("(x, v) outside the domain box")
    return model.f(x, v, m)


def nullcline_root(model, m, v):
    """Closed-form root ``x^m(v)`` of ``f^m(., v) = 0``; requires ``v > E_K``."""
    v = np.asarray(v, dtype=float)
    if np.any(v <= model.E_K):
        raise GeometryError("closed-form nullcline root needs v > E_K")
    return _out(_x_null(model, m, v), v)


def _x_null(model, m, v):
    num = (model.g_L * (model.E_L - v) + model.g_Ca * model.activation(v) * (model.E_Ca - v)
           + model.I_app + m * (model.E_syn - v))
    return num / (model.g_K * (v - model.E_K))


def _slope_numerator(model, m, v):
    """Numerator of d x^m / dv; same sign as the slope."""
    act = model.activation(v)
    num = (model.g_L * (model.E_L - v) + model.g_Ca * act * (model.E_Ca - v)
           + model.I_app + m * (model.E_syn - v))
    dnum = (-model.g_L + model.g_Ca * (model.activation.derivative(v) * (model.E_Ca - v) - act)
            - m)
    return dnum * (v - model.E_K) - num


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def _bisect_decreasing(fun, lo, hi, target, iters=80):
    """Vectorised bisection for ``fun(v) = target`` with ``fun`` decreasing on [lo, hi]."""
    lo = np.broadcast_to(np.asarray(lo, dtype=float), target.shape).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), target.shape).copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = fun(mid) > target
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.all(hi - lo <= 4 * np.spacing(np.abs(hi) + np.abs(lo) + 1e-300)):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class NullclineGeometry:
    """Knees and branches of the voltage nullcline at a fixed drive level."""

    model: NeuronModel
    level: float
    v_left: float
    x_left: float
    v_right: float
    x_right: float
    v_floor: float
    v_ceiling: float
    knee_tolerance: float = KNEE_XTOL

    @property
    def left_knee(self):
        return (self.x_left, self.v_left)

    @property
    def right_knee(self):
        return (self.x_right, self.v_right)

    def x_of_v(self, v):
        return _x_null(self.model, self.level, np.asarray(v, dtype=float))

    def _branch(self, x, lo, hi, sign, x_lo_end, x_hi_end, name):
        x = np.asarray(x, dtype=float)
        xs = np.atleast_1d(x)
        tlo = 1e-12 * (1.0 + abs(x_lo_end))
        thi = 1e-12 * (1.0 + abs(x_hi_end))
        if np.any(xs < x_lo_end - tlo) or np.any(xs > x_hi_end + thi):
            bad = xs[(xs < x_lo_end - tlo) | (xs > x_hi_end + thi)][0]
            raise OffBranchError(
                f"x = {bad:.6g} outside the {name} branch range [{x_lo_end:.6g}, {x_hi_end:.6g}]")
        xs = np.clip(xs, x_lo_end, x_hi_end)
        fun = (lambda v: sign * self.x_of_v(v))
        v = _bisect_decreasing(fun, lo, hi, sign * xs)
        return _out(v, x)

    def v_small(self, x):
        """Lower branch: the smallest root, ``v <= v_left``."""
        return self._branch(x, self.v_floor, self.v_left, 1.0, self.x_left,
                            float(self.x_of_v(self.v_floor)), "lower")

    def v_middle(self, x):
        """Middle branch between the knees (x^m increasing there)."""
        return self._branch(x, self.v_left, self.v_right, -1.0, self.x_left, self.x_right,
                            "middle")

    def v_large(self, x):
        """Upper branch: the largest root, ``v >= v_right``."""
        return self._branch(x, self.v_right, self.v_ceiling, 1.0,
                            float(self.x_of_v(self.v_ceiling)), self.x_right, "upper")


def _locate_knees(model, m):
    v_floor = max(model.v_box[0], model.E_K + 1e-12)
    v_ceiling = model.v_box[1]
    grid = np.linspace(v_floor, v_ceiling, KNEE_GRID)
    q = _slope_numerator(model, m, grid)
    sign = np.sign(q)
    changes = np.nonzero(sign[:-1] * sign[1:] < 0)[0]
    if len(changes) != 2 or q[changes[0]] > 0:
        raise NotNShapedError(
            f"expected one minimum followed by one maximum of x^m(v), found {len(changes)} extrema")
    knees = []
    for k in changes:
        knees.append(brentq(lambda v: _slope_numerator(model, m, v), grid[k], grid[k + 1],
                            xtol=KNEE_XTOL, rtol=4 * np.finfo(float).eps))
    return v_floor, v_ceiling, knees[0], knees[1]


@lru_cache(maxsize=8192)
def _geometry(model, m):
    v_floor, v_ceiling, v_l, v_r = _locate_knees(model, m)
    x_l = float(_x_null(model, m, v_l))
    x_r = float(_x_null(model, m, v_r))
    if not (model.x_box[0] <= x_l < x_r <= model.x_box[1]):
        raise GeometryError(f"knees outside the domain box at level m = {m}")
    return NullclineGeometry(model, m, v_l, x_l, v_r, x_r, v_floor, v_ceiling)


def compute_geometry(model, m=0.0):
    """Knees and branches of ``f^m = 0`` for ``m`` in ``[0, margin]``."""
    m = float(m)
    if m < 0 or m > model.margin * (1 + 1e-12) + 1e-15:
        raise DomainError(f"level m = {m} outside [0, {model.margin}]")
    return _geometry(model, min(m, model.margin) if m > model.margin else m)


def knee_curves(model, levels):
    """Arrays ``(x_left(m), x_right(m))`` over the given levels."""
    geo = [compute_geometry(model, m) for m in levels]
    return np.array([g.x_left for g in geo]), np.array([g.x_right for g in geo])


# ---------------------------------------------------------------------------
# Assumption checks
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    passed: bool
    detail: str = ""
    witness: object = None


@dataclass
class AssumptionReport:
    checks: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks.values())

    def failures(self):
        return [k for k, c in self.checks.items() if not c.passed]

    def as_dict(self):
        return {k: {"passed": bool(c.passed), "detail": c.detail} for k, c in self.checks.items()}


def check_assumptions(model, grid_density=50):
    """Structural checks of the N shape, singular-limit profile and drive margin.

    Failures are reported, never raised.
    """
    rep = AssumptionReport()
    try:
        geo0 = compute_geometry(model, 0.0)
        rep.checks["A1.n_shape"] = CheckResult(True, f"knees at v = {geo0.v_left:.6f}, {geo0.v_right:.6f}")
    except GeometryError as exc:
        rep.checks["A1.n_shape"] = CheckResult(False, str(exc))
        geo0 = None

    v_lo = max(model.v_box[0], model.E_K + 1e-9)
    vg = np.linspace(v_lo, model.v_box[1], 8 * grid_density + 1)
    diff = _x_null(model, 0.0, vg) - model.gating(vg)
    crossings = np.nonzero(np.sign(diff[:-1]) * np.sign(diff[1:]) < 0)[0]
    if geo0 is not None and len(crossings) == 1:
        vc = 0.5 * (vg[crossings[0]] + vg[crossings[0] + 1])
        ok = geo0.v_left < vc < geo0.v_right
        rep.checks["A1.intersection"] = CheckResult(
            ok, f"single crossing near v = {vc:.4f}" + ("" if ok else " off the middle branch"), vc)
    else:
        rep.checks["A1.intersection"] = CheckResult(False, f"{len(crossings)} crossings", crossings)

    xg = np.linspace(model.x_box[0], model.x_box[1], grid_density + 1)
    X, V = np.meshgrid(xg, vg)
    fx = model.f(X, V)
    side = np.sign(_x_null(model, 0.0, V) - X)
    bad = (side != 0) & (np.sign(fx) != side)
    rep.checks["A1.sign"] = CheckResult(not bad.any(), f"{int(bad.sum())} sign violations")

    tc = model.time_constant
    if not getattr(tc, "singular", False):
        rep.checks["A2.limits"] = CheckResult(False, "time-constant profile has no singular limit")
    else:
        below = vg[vg < model.threshold]
        above = vg[vg >= model.threshold]
        ok = (np.all(tc.slow_limit(below) > 0) and np.all(tc.fast_rate(below) == 0)
              and np.all(tc.slow_limit(above) == 0) and np.all(tc.fast_rate(above) > 0)
              and tc.threshold == model.threshold)
        rep.checks["A2.limits"] = CheckResult(ok, "limits switch at the threshold" if ok
                                              else "limit profile inconsistent with threshold")

    levels = np.linspace(0.0, model.margin, grid_density)
    (x0, x1), (v0, v1) = model.x_box, model.v_box
    inward = True
    witness = None
    for m in levels:
        if np.any(model.f(xg, v0, m) < 0) or np.any(model.f(xg, v1, m) > 0):
            inward, witness = False, ("v edge", m)
            break
    if inward:
        gx = model.gating(vg)
        if np.any(gx - x0 < 0) or np.any(gx - x1 > 0):
            inward, witness = False, ("x edge", None)
    rep.checks["A3.invariance"] = CheckResult(inward, "field points inward on the box edges"
                                              if inward else f"outward at {witness}", witness)

    try:
        geos = [compute_geometry(model, m) for m in levels]
        vl = max(g.v_left for g in geos)
        vr = min(g.v_right for g in geos)
        ok = vl < model.threshold < vr
        rep.checks["A3.knee_order"] = CheckResult(
            ok, f"max left-knee v = {vl:.5f}, min right-knee v = {vr:.5f}", (vl, vr))
        ok = geos[-1].x_left < geos[0].x_right
        rep.checks["A3.margin"] = CheckResult(
            ok, f"x_left(M) = {geos[-1].x_left:.5f}, x_right(0) = {geos[0].x_right:.5f}")
        xl = np.array([g.x_left for g in geos])
        xr = np.array([g.x_right for g in geos])
        mono = bool(np.all(np.diff(xl) >= -1e-12) and np.all(np.diff(xr) >= -1e-12))
        rep.checks["A3.knee_monotone"] = CheckResult(mono, "knees move right with m" if mono
                                                     else "knee moved left")
    except GeometryError as exc:
        for key in ("A3.knee_order", "A3.margin", "A3.knee_monotone"):
            rep.checks[key] = CheckResult(False, str(exc))
    return rep


def slope_bound(model, v):
    """``(v - E_K)(E_Ca - v) m_inf'(v) - (E_Ca - E_K) m_inf(v)``.

    The nullcline slope at ``v`` is positive iff ``g_Ca`` times this exceeds
    ``g_L (E_L - E_K) + m (E_syn - E_K) + I``.
    """
    act = model.activation
    return _out((v - model.E_K) * (model.E_Ca - v) * act.derivative(v)
                - (model.E_Ca - model.E_K) * act(v), np.asarray(v))


@dataclass
class FamilyBound:
    bound_at_threshold: float
    bound_at_gate: float
    margin_bound: float
    margin: float

    @property
    def passed(self):
        return self.margin < self.margin_bound


def family_margin_bound(g_L_range, g_Ca_range, template=None, gate_voltage=0.0):
    """Largest drive keeping both ``gate_voltage`` and the threshold on the middle
    branch for every neuron of a conductance box."""
    t = template or piecewise_neuron(g_L_range[1], g_Ca_range[0], 3.0)
    b_th = slope_bound(t, t.threshold)
    b_gate = slope_bound(t, gate_voltage)
    worst = min(b_th, b_gate)
    bound = (worst * g_Ca_range[0] - g_L_range[1] * (t.E_L - t.E_K) - t.I_app) / (t.E_syn - t.E_K)
    return FamilyBound(b_th, b_gate, bound, t.margin)


# ---------------------------------------------------------------------------
# Branch flows
# ---------------------------------------------------------------------------


def slow_interval(model):
    """``(x_left(0), x_right(M))``: range of the gating variable between spikes."""
    return compute_geometry(model, 0.0).x_left, compute_geometry(model, model.margin).x_right


def slow_flow(model, x, geometry=None, h_min=H_MIN):
    """Singular-limit drift ``h(x)`` along the lower branch at zero drive."""
    tc = model.time_constant
    if not getattr(tc, "singular", False):
        raise GeometryError("slow flow needs a profile with a singular limit")
    geo = geometry or compute_geometry(model, 0.0)
    lo, hi = geo.x_left, compute_geometry(model, model.margin).x_right
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    tol = 1e-12 * (1 + hi)
    if np.any(xa < lo - tol) or np.any(xa > hi + tol):
        raise DomainError(f"x outside the slow interval [{lo:.6g}, {hi:.6g}]")
    v = geo.v_small(np.clip(xa, lo, hi))
    tau = tc.slow_limit(v)
    if np.any(tau <= 0):
        raise DegenerateFlowError("lower branch reaches the suprathreshold regime")
    h = (model.gating(v) - xa) / tau
    if np.any(h > -h_min):
        raise DegenerateFlowError(f"slow flow above -{h_min:g} at x = {xa[h > -h_min][0]:.6g}")
    return _out(h, x)


def fast_flow(model, m, x, geometry=None, h_min=H_MIN):
    """Singular-limit drift ``H^m(x)`` along the upper branch (fast time units)."""
    tc = model.time_constant
    if not getattr(tc, "singular", False):
        raise GeometryError("fast flow needs a profile with a singular limit")
    geo = geometry or compute_geometry(model, m)
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(xa > geo.x_right + 1e-12 * (1 + geo.x_right)):
        raise OffBranchError(f"x beyond the right knee x = {geo.x_right:.6g} at m = {geo.level}")
    v = geo.v_large(xa)
    H = tc.fast_rate(v) * (model.gating(v) - xa)
    if np.any(H < h_min):
        raise DegenerateFlowError("fast flow not bounded away from zero")
    return _out(H, x)


def knee_sensitivity(model, geometry=None, fd_check=True, rel_tol=0.01):
    """``(dx_left/dm, dx_right/dm)`` at ``m = 0``.

    Uses the envelope formula ``(E_syn - v_knee) / (g_K (v_knee - E_K))`` and,
    optionally, confirms it with a central difference in ``m``.
    """
    geo = geometry or compute_geometry(model, 0.0)

    def slope(v):
        return (model.E_syn - v) / (model.g_K * (v - model.E_K))

    dl, dr = slope(geo.v_left), slope(geo.v_right)
    if fd_check:
        h = 1e-4 * (model.margin if model.margin > 0 else 1.0)
        up, dn = _geometry(model, h), _geometry(model, -h)
        fl = (up.x_left - dn.x_left) / (2 * h)
        fr = (up.x_right - dn.x_right) / (2 * h)
        if abs(fl - dl) > rel_tol * abs(dl) or abs(fr - dr) > rel_tol * abs(dr):
            raise GeometryError(
                f"knee sensitivity mismatch: formula ({dl:.6g}, {dr:.6g}) vs difference ({fl:.6g}, {fr:.6g})")
    return float(dl), float(dr)


# ---------------------------------------------------------------------------
# Travel-time tables
# ---------------------------------------------------------------------------


def _adaptive_simpson(g, a, b, fa, fb, tol, max_depth=50):
    """Vectorised adaptive Simpson integration of ``g`` over many cells."""
    out = np.zeros(len(a))
    idx = np.arange(len(a))
    fm = g(0.5 * (a + b))
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    A, B, FA, FM, FB, S, T = a, b, fa, fm, fb, whole, tol
    for _ in range(max_depth):
        M = 0.5 * (A + B)
        both = g(np.concatenate([0.5 * (A + M), 0.5 * (M + B)]))
        fl, fr = both[: len(A)], both[len(A):]
        sl = (M - A) / 6.0 * (FA + 4.0 * fl + FM)
        sr = (B - M) / 6.0 * (FM + 4.0 * fr + FB)
        err = sl + sr - S
        ok = np.abs(err) <= 15.0 * T
        np.add.at(out, idx[ok], (sl + sr + err / 15.0)[ok])
        k = ~ok
        if not k.any():
            return out
        A, M_, B = A[k], M[k], B[k]
        FA, FM_, FB, fl, fr = FA[k], FM[k], FB[k], fl[k], fr[k]
        idx = np.concatenate([idx[k], idx[k]])
        T = np.concatenate([T[k], T[k]]) / 2.0
        S = np.concatenate([sl[k], sr[k]])
        A, B = np.concatenate([A, M_]), np.concatenate([M_, B])
        FA, FB = np.concatenate([FA, FM_]), np.concatenate([FM_, FB])
        FM = np.concatenate([fl, fr])
    raise NumericError("adaptive quadrature did not converge")


class TravelTimeTable:
    """Monotone table of ``T(x) = int_lower^x dx' / |flow(x')|`` and its inverse.

    Cells are integrated with adaptive Simpson; between nodes the table uses the
    cubic Hermite interpolant built from the exact node derivatives
    ``1/|flow|``, and inversion refines the bracketing cell with safeguarded
    Newton steps on that cubic.  Flow breakpoints are table nodes, so each cell
    integrates a smooth function.
    """

    def __init__(self, flow, lower, upper, breakpoints=(), *, tolerance=1e-10,
                 min_nodes=10_001, h_min=H_MIN, label=""):
        lower, upper = float(lower), float(upper)
        if not upper > lower:
            raise DomainError("travel-time interval is empty")
        self.lower, self.upper, self.label = lower, upper, label
        self.tolerance = tolerance
        cuts = sorted({lower, upper, *[float(b) for b in breakpoints if lower < b < upper]})
        span = upper - lower

        def g(x):
            r = np.abs(np.asarray(flow(x), dtype=float))
            if np.any(r < h_min):
                raise DegenerateFlowError(f"|flow| below {h_min:g} in table {label!r}")
            return 1.0 / r

        xs, gs, ints = [], [], []
        for a, b in zip(cuts[:-1], cuts[1:]):
            n = max(16, int(math.ceil(min_nodes * (b - a) / span)))
            nodes = np.linspace(a, b, n + 1)
            nudge = max(1e-12 * (b - a), 8 * np.spacing(max(abs(a), abs(b))))
            probe = nodes.copy()
            probe[0] += nudge
            probe[-1] -= nudge
            gn = g(probe)
            cell_tol = tolerance * np.diff(nodes) / span
            ints.append(_adaptive_simpson(g, nodes[:-1], nodes[1:], gn[:-1], gn[1:], cell_tol))
            xs.append(nodes)
            gs.append(gn)
        # Cells: consecutive nodes within each piece; left/right derivatives per cell.
        self._x0 = np.concatenate([x[:-1] for x in xs])
        self._x1 = np.concatenate([x[1:] for x in xs])
        self._g0 = np.concatenate([v[:-1] for v in gs])
        self._g1 = np.concatenate([v[1:] for v in gs])
        widths = self._x1 - self._x0
        cell = np.concatenate(ints)
        self._c0 = np.concatenate([[0.0], np.cumsum(cell)[:-1]])
        self._c1 = self._c0 + cell
        self.total = float(self._c1[-1])
        secant = cell / widths
        al, be = self._g0 / secant, self._g1 / secant
        if np.any(al * al + be * be > 9.0):
            raise NumericError(f"travel-time table {label!r} not monotone; refine the grid")
        self.nodes = np.concatenate([self._x0, [upper]])
        self.times = np.concatenate([self._c0, [self.total]])

    def __len__(self):
        return len(self.nodes)

    def _cubic(self, k, s):
        return _hermite(self, k, s)

    def _cubic_ds(self, k, s):
        return _hermite_ds(self, k, s)

    def __call__(self, x):
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        tol = 1e-12 * (1.0 + abs(self.upper))
        if np.any(xa < self.lower - tol) or np.any(xa > self.upper + tol):
            raise DomainError(f"x outside [{self.lower:.12g}, {self.upper:.12g}] in table {self.label!r}")
        xa = np.clip(xa, self.lower, self.upper)
        k = np.clip(np.searchsorted(self._x0, xa, side="right") - 1, 0, len(self._x0) - 1)
        s = (xa - self._x0[k]) / (self._x1[k] - self._x0[k])
        return _out(self._cubic(k, s), x)

    def inverse(self, t):
        ta = np.atleast_1d(np.asarray(t, dtype=float))
        tol = 1e-12 * (1.0 + self.total)
        if np.any(ta < -tol) or np.any(ta > self.total + tol):
            raise DomainError(f"time outside [0, {self.total:.12g}] in table {self.label!r}")
        ta = np.clip(ta, 0.0, self.total)
        k = np.clip(np.searchsorted(self._c0, ta, side="right") - 1, 0, len(self._c0) - 1)
        x = _hermite_solve(self, k, ta)
        x = np.where(ta >= self.total, self.upper, np.where(ta <= 0, self.lower, x))
        return _out(x, t)


def _hermite(tab, k, s):
    w = tab._x1[k] - tab._x0[k]
    s2, s3 = s * s, s * s * s
    return ((2 * s3 - 3 * s2 + 1) * tab._c0[k] + (s3 - 2 * s2 + s) * w * tab._g0[k]
            + (-2 * s3 + 3 * s2) * tab._c1[k] + (s3 - s2) * w * tab._g1[k])


def _hermite_ds(tab, k, s):
    w = tab._x1[k] - tab._x0[k]
    s2 = s * s
    return ((6 * s2 - 6 * s) * (tab._c0[k] - tab._c1[k]) + (3 * s2 - 4 * s + 1) * w * tab._g0[k]
            + (3 * s2 - 2 * s) * w * tab._g1[k])


def _hermite_solve(tab, k, ta):
    """Safeguarded Newton for ``cubic_k(s) = ta`` on ``s in [0, 1]``; returns x."""
    c0, c1 = tab._c0[k], tab._c1[k]
    lo, hi = np.zeros_like(ta), np.ones_like(ta)
    s = np.clip((ta - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.0, 1.0)
    for _ in range(40):
        r = _hermite(tab, k, s) - ta
        lo = np.where(r < 0, s, lo)
        hi = np.where(r > 0, s, hi)
        d = _hermite_ds(tab, k, s)
        step = np.where(d > 0, s - r / np.where(d > 0, d, 1.0), 0.5 * (lo + hi))
        bad = (step <= lo) | (step >= hi)
        new = np.where(bad, 0.5 * (lo + hi), step)
        if np.all(np.abs(new - s) <= 4e-16) or np.all(r == 0):
            s = new
            break
        s = new
    return tab._x0[k] + s * (tab._x1[k] - tab._x0[k])


class TableBank:
    """Several travel-time tables evaluated together, one query per table.

    Cells of all tables are concatenated; lookups shift each query by a
    per-table offset so that one ``searchsorted`` finds every cell.
    """

    def __init__(self, tables):
        self.tables = list(tables)
        self.lower = np.array([t.lower for t in self.tables])
        self.upper = np.array([t.upper for t in self.tables])
        self.total = np.array([t.total for t in self.tables])
        span = self.upper - self.lower
        self._xoff = np.concatenate([[0.0], np.cumsum(span + 1.0)[:-1]])
        self._toff = np.concatenate([[0.0], np.cumsum(self.total + 1.0)[:-1]])
        self._start = np.concatenate([[0], np.cumsum([len(t._x0) for t in self.tables])[:-1]])
        self._stop = self._start + np.array([len(t._x0) for t in self.tables])
        for name in ("_x0", "_x1", "_c0", "_c1", "_g0", "_g1"):
            setattr(self, name, np.concatenate([getattr(t, name) for t in self.tables]))
        owner = np.repeat(np.arange(len(self.tables)), self._stop - self._start)
        self._xkey = self._x0 - self.lower[owner] + self._xoff[owner]
        self._tkey = self._c0 + self._toff[owner]

    def __len__(self):
        return len(self.tables)

    def _cell(self, keys, query):
        k = np.searchsorted(keys, query, side="right") - 1
        return np.clip(k, self._start, self._stop - 1)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        tol = 1e-12 * (1.0 + np.abs(self.upper))
        if np.any(x < self.lower - tol) or np.any(x > self.upper + tol):
            bad = int(np.nonzero((x < self.lower - tol) | (x > self.upper + tol))[0][0])
            raise DomainError(f"x[{bad}] = {x[bad]:.12g} outside [{self.lower[bad]:.12g}, "
                              f"{self.upper[bad]:.12g}]")
        x = np.clip(x, self.lower, self.upper)
        k = self._cell(self._xkey, x - self.lower + self._xoff)
        s = np.clip((x - self._x0[k]) / (self._x1[k] - self._x0[k]), 0.0, 1.0)
        return _hermite(self, k, s)

    def inverse(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * (1.0 + self.total)
        if np.any(t < -tol) or np.any(t > self.total + tol):
            bad = int(np.nonzero((t < -tol) | (t > self.total + tol))[0][0])
            raise DomainError(f"t[{bad}] = {t[bad]:.12g} outside [0, {self.total[bad]:.12g}]")
        t = np.clip(t, 0.0, self.total)
        k = self._cell(self._tkey, t + self._toff)
        x = _hermite_solve(self, k, t)
        return np.where(t >= self.total, self.upper, np.where(t <= 0, self.lower, x))


def _branch_cuts(model, geo, lower_branch):
    cuts = []
    for vb in (*model.time_constant.breakpoints, *model.gating.breakpoints):
        if lower_branch and geo.v_floor < vb < geo.v_left:
            cuts.append(float(geo.x_of_v(vb)))
        if not lower_branch and geo.v_right < vb < geo.v_ceiling:
            cuts.append(float(geo.x_of_v(vb)))
    return cuts


def slow_travel_table(model, tolerance=1e-10, min_nodes=10_001, h_min=H_MIN):
    """Table of the time to drift from ``x`` down to the left knee at zero drive."""
    geo = compute_geometry(model, 0.0)
    lo, hi = slow_interval(model)
    return TravelTimeTable(lambda x: slow_flow(model, x, geo, h_min=0.0), lo, hi,
                           _branch_cuts(model, geo, True), tolerance=tolerance,
                           min_nodes=min_nodes, h_min=h_min, label="slow")


def fast_travel_table(model, m, tolerance=1e-10, min_nodes=10_001, h_min=H_MIN):
    """Table of the fast time to rise from ``x_left(0)`` to ``x`` on the level-m upper branch."""
    geo = compute_geometry(model, m)
    lo = compute_geometry(model, 0.0).x_left
    return TravelTimeTable(lambda x: fast_flow(model, m, x, geo, h_min=0.0), lo, geo.x_right,
                           _branch_cuts(model, geo, False), tolerance=tolerance,
                           min_nodes=min_nodes, h_min=h_min, label=f"fast m={m:.6g}")
