"""Phase metric, contraction constants and the existence / convergence checkers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DomainError, NoInvariantSetError, NonConvergenceError
from .ifsim import IFNetwork, absorb, advance_to_jump, cycle_map, knee_roots
from .network import firing_layerings, layered_indegree, min_tree_indegree
from .neuron import (
    compute_geometry,
    fast_flow,
    knee_sensitivity,
    slow_flow,
)

GRID = 2000
LEVELS = 50


def phase_metric(net: IFNetwork, p, q):
    """``max_i [tau_i(p_i) - tau_i(q_i)] - min_i [...]``."""
    diff = net.phase(p) - net.phase(q)
    return float(diff.max() - diff.min())


# ---------------------------------------------------------------------------
# Contraction constants
# ---------------------------------------------------------------------------


def _grid_max(fun, lo, hi, cuts=(), n=GRID):
    """Max of a piecewise-smooth scalar function on [lo, hi]: grid plus
    golden-section refinement at the best cell.  Returns ``(value, argmax)``."""
    pts = [np.linspace(lo, hi, n)]
    for c in cuts:
        if lo < c < hi:
            d = 1e-12 * max(1.0, abs(c))
            pts.append([c - d, c + d])
    xs = np.unique(np.concatenate(pts))
    vals = np.asarray(fun(xs), dtype=float)
    k = int(np.argmax(vals))
    best, arg = float(vals[k]), float(xs[k])
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, len(xs) - 1)]
    if b > a:
        res = minimize_scalar(lambda z: -float(fun(np.array([z]))[0]), bounds=(a, b),
                              method="bounded", options={"xatol": 1e-10})
        if res.success and -res.fun > best:
            best, arg = float(-res.fun), float(res.x)
    return best, arg


def _slow_cuts(model):
    geo = compute_geometry(model, 0.0)
    return [float(geo.x_of_v(vb)) for vb in model.time_constant.breakpoints + model.gating.breakpoints
            if geo.v_floor < vb < geo.v_left]


@dataclass
class ContractionConstants:
    c_sf: float
    c_fs: float
    r_ff: float
    n: int
    witnesses: list = field(default_factory=list)

    @property
    def r_bar(self):
        return self.r_ff ** (self.n + 1)

    @property
    def product(self):
        return self.c_sf * self.r_bar * self.c_fs

    def as_dict(self):
        return {"c_sf": self.c_sf, "c_fs": self.c_fs, "r_ff": self.r_ff, "r_bar": self.r_bar,
                "product": self.product}


def neuron_constants(model, grid=GRID, levels=LEVELS):
    """Per-neuron ``(c_sf, c_fs, r_ff, witness)``."""
    M = model.margin
    geo0 = compute_geometry(model, 0.0)
    geoM = compute_geometry(model, M)
    cuts = _slow_cuts(model)

    def sf(x):
        return np.abs(slow_flow(model, x, geo0)) / fast_flow(model, M, x, geoM)

    def fs(x):
        return fast_flow(model, M, x, geoM) / np.abs(slow_flow(model, x, geo0))

    c_sf, a_sf = _grid_max(sf, geo0.x_left, geoM.x_left, cuts, grid)
    c_fs, a_fs = _grid_max(fs, geo0.x_right, geoM.x_right, cuts, grid)

    ms = np.linspace(0.0, M, levels)
    xs = np.linspace(geo0.x_left, geoM.x_right, grid)
    H = np.full((levels, grid), np.nan)
    tops = []
    for a, m in enumerate(ms):
        geo = compute_geometry(model, m)
        tops.append(geo.x_right)
        ok = xs <= geo.x_right
        H[a, ok] = fast_flow(model, m, xs[ok], geo)
    r_ff = 1.0
    for a in range(levels):
        for b in range(levels):
            ok = ~np.isnan(H[a]) & ~np.isnan(H[b])
            if ok.any():
                r_ff = max(r_ff, float(np.max(H[a, ok] / H[b, ok])))
    return c_sf, c_fs, r_ff, {"c_sf_at": a_sf, "c_fs_at": a_fs}


def contraction_constants(models, n=None, grid=GRID, levels=LEVELS):
    """Network-wide maxima of the per-neuron compression ratios."""
    per = [neuron_constants(m, grid, levels) for m in models]
    return ContractionConstants(
        c_sf=max(p[0] for p in per), c_fs=max(p[1] for p in per), r_ff=max(p[2] for p in per),
        n=len(models) if n is None else n, witnesses=[p[3] for p in per])


def check_monotonicity(constants: ContractionConstants):
    """``(c_sf * c_fs < 1 / r_bar, margin)``."""
    margin = 1.0 / constants.r_bar - constants.c_sf * constants.c_fs
    return bool(margin > 0), float(margin)


# ---------------------------------------------------------------------------
# Existence of a synchronous fixed point
# ---------------------------------------------------------------------------


def fast_roots(net: IFNetwork):
    """Neurons whose zero-drive period does not exceed any neuron's
    maximally advanced cycle time ``tau_i(x_right_i(g_i d_i))``."""
    top = net.phase(net.knees_right(net.max_level))
    return np.nonzero(net.periods <= top.min())[0]


@dataclass
class ExistenceResult:
    root: int
    passed: bool
    layers: list
    dbar: np.ndarray
    in_fast_set: bool
    weak_limit: bool
    weak_layers: list


def _layered(net, root, joins):
    placed = np.zeros(net.n, dtype=bool)
    placed[root] = True
    layers = [[int(root)]]
    dbar = np.zeros(net.n)
    while True:
        d = net.A @ placed.astype(float)
        new = [i for i in np.nonzero(~placed & (d > 0))[0] if joins(i, d[i])]
        if not new:
            break
        for i in new:
            dbar[i] = d[i]
        placed[new] = True
        layers.append([int(i) for i in new])
    return placed, layers, dbar


def existence_condition(net: IFNetwork, root):
    """Layered test that a synchronous spike rooted at ``root`` recruits everyone.

    Also runs the linearised (weak-coupling limit) version of the test, built
    from knee sensitivities and the slow-flow speed at the knees.
    """
    top = net.phase(net.knees_right(net.max_level))
    own = net.periods[root]

    def joins(i, d):
        return top[i] - own < net.slow[i](net.knee_left(i, net.gains[i] * d))

    placed, layers, dbar = _layered(net, root, joins)

    sens = [knee_sensitivity(m, fd_check=False) for m in net.models]
    speed_lo = np.array([abs(slow_flow(m, net.x_low[i])) for i, m in enumerate(net.models)])
    speed_hi = np.array([abs(slow_flow(m, net.x_right0[i])) for i, m in enumerate(net.models)])
    deg = net.graph.in_degree

    def weak(i, d):
        return sens[i][1] * deg[i] / speed_hi[i] < sens[i][0] * d / speed_lo[i]

    wplaced, wlayers, _ = _layered(net, root, weak)
    return ExistenceResult(int(root), bool(placed.all()), layers, dbar,
                           bool(root in fast_roots(net)), bool(wplaced.all()), wlayers)


# ---------------------------------------------------------------------------
# Synchronous region and fixed point
# ---------------------------------------------------------------------------


def syn_region_membership(net: IFNetwork, p):
    """``(member, witness)``: does the chain reaction at ``p`` recruit everyone?"""
    sp = absorb(net, p)
    missing = np.nonzero(~sp.firing)[0]
    return bool(sp.synchronous), (int(missing[0]) if len(missing) else None)


def syn_region_by_boxes(net: IFNetwork, p):
    """Membership through the union of layering boxes (exponential; small N)."""
    p = np.asarray(p, dtype=float)
    roots = np.nonzero(knee_roots(net, p))[0]
    for j in roots:
        for layers in firing_layerings(net.graph, int(j)):
            dbar = layered_indegree(net.graph, layers)
            ok = True
            for i in range(net.n):
                if i == j:
                    continue
                if not p[i] < net.knee_left(i, net.gains[i] * dbar[i]):
                    ok = False
                    break
            if ok:
                return True
    return False


def random_syn_point(net: IFNetwork, rng, root=None, max_tries=10_000):
    """Rejection-sample a jump point whose chain reaction recruits everyone."""
    for _ in range(max_tries):
        j = int(rng.integers(net.n)) if root is None else int(root)
        x = rng.uniform(net.x_low, net.knees_left(net.max_level))
        x[j] = net.x_low[j]
        if syn_region_membership(net, x)[0] and knee_roots(net, x).sum() == 1:
            return x
    raise NoInvariantSetError("could not sample a synchronous jump point")


@dataclass
class FixedPointResult:
    point: np.ndarray
    iterations: int
    residual: float
    distances: list
    tail_ratio: float
    rate: float = float("nan")


def find_fixed_point(net: IFNetwork, p0, max_iter=500, tol=1e-10, tail=10):
    """Iterate the cycle map from a synchronous jump point until ``d(R p, p) < tol``.

    The reported ratio is the largest successive-difference ratio among the
    last ``tail`` steps whose differences are still well above round-off.
    """
    p = np.asarray(p0, dtype=float)
    if not syn_region_membership(net, p)[0]:
        raise NoInvariantSetError("starting point is outside the synchronous region")
    dists = []
    for k in range(max_iter):
        q, sp, _ = cycle_map(net, p)
        if not sp.synchronous:
            raise NoInvariantSetError(f"iterate {k} left the synchronous region")
        d = phase_metric(net, q, p)
        dists.append(d)
        p = q
        if d < tol:
            q, sp, _ = cycle_map(net, p)
            if not sp.synchronous:
                raise NoInvariantSetError("fixed point is not synchronous")
            resid = phase_metric(net, q, p)
            return FixedPointResult(p, k + 1, resid, dists, tail_ratio(dists, tol),
                                    linearized_rate(net, p))
    raise NonConvergenceError(f"no fixed point within {max_iter} iterations")


def tail_ratio(dists, tol=1e-10, tail=10, floor=1e4):
    d = np.asarray(dists)
    ok = [k for k in range(1, len(d)) if d[k - 1] > floor * tol and d[k] > 10 * tol]
    ratios = [d[k] / d[k - 1] for k in ok[-tail:]]
    return float(max(ratios)) if ratios else 0.0


def linearized_rate(net: IFNetwork, p, step=1e-7):
    """Spectral radius of the cycle map's Jacobian at ``p`` in phase coordinates.

    This is the limit of ``d_{k+1} / d_k`` near ``p``; unlike the finite tail of
    an iteration it does not depend on where the iteration started.  Central
    differences on the non-root phases; the root stays pinned at phase zero.
    """
    t0 = net.phase(p)
    root = int(np.argmin(t0))
    others = [i for i in range(net.n) if i != root]
    if not others:
        return 0.0
    h = step * float(net.periods.min())

    def image(t):
        q, _, _ = cycle_map(net, net.from_phase(t))
        tq = net.phase(q)
        return (tq - tq[root])[others]

    J = np.empty((len(others), len(others)))
    for a, i in enumerate(others):
        e = np.zeros(net.n)
        e[i] = h
        J[:, a] = (image(t0 + e) - image(t0 - e)) / (2 * h)
    return float(np.max(np.abs(np.linalg.eigvals(J))))


# ---------------------------------------------------------------------------
# Global convergence conditions
# ---------------------------------------------------------------------------


@dataclass
class GlobalReport:
    """Verdicts and margins of the two sufficient conditions.

    ``uniform_*`` bounds every jump point by the spanning-tree windows;
    ``refined_*`` narrows the box using the fast roots and allows a slack ``eta``.
    """

    monotone: bool
    compression_margin: float
    compression_ok: bool
    D_sp_uniform: float
    d_syn_uniform: float
    uniform_ok: bool
    uniform_margin: float
    x_low_f: np.ndarray
    refined_compression_ok: bool
    eta: float
    eta_star: float
    eta_star_ok: bool
    r_eta: float
    D_sp_refined: float
    d_syn_refined: float
    d_sp: float
    refined_ok: bool
    refined_margin: float
    d_under: np.ndarray

    def as_dict(self):
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def eta_ratio(net: IFNetwork, eta, grid=400, inner=40):
    """``max h(x)/h(x') - 1`` over ``x' in [max(x - eta, x_low), x]``; 0 for eta = 0."""
    if eta <= 0:
        return 0.0
    worst = 1.0
    for i, m in enumerate(net.models):
        top = net.knee_right(i, net.max_level[i])
        xs = np.linspace(net.x_low[i], top, grid)
        h = slow_flow(m, xs)
        for x, hx in zip(xs, h):
            xp = np.linspace(max(x - eta, net.x_low[i]), x, inner)
            worst = max(worst, float(np.max(hx / slow_flow(m, xp))))
    return worst - 1.0


def global_conditions(net: IFNetwork, constants: ContractionConstants, r=0.5, eta=0.0,
                      eta_star=0.0, exact_limit=10):
    """Sufficient conditions for convergence from the whole box of jump points."""
    n = net.n
    r = np.broadcast_to(np.asarray(r, dtype=float), (n,))
    g = net.gains
    mono, _ = check_monotonicity(constants)
    crc = constants.product
    d_under = np.array([min_tree_indegree(net.graph, i, exact_limit)[0] for i in range(n)])

    t_top = net.phase(net.knees_right(net.max_level))
    t_win = net.phase(net.knees_left(g * d_under))
    t_half = net.phase(net.knees_left(r * g * d_under))
    period = net.periods
    comp = np.inf
    for i in range(n):
        for j in range(n):
            if i != j:
                comp = min(comp, period[j] - (t_top[i] - t_half[i]))
    comp_ok = bool(comp > 0)
    D_u = 2.0 * float(np.max(t_top - t_win))
    ds_u = float(np.min(t_win - t_half))
    m_u = (1.0 - crc) * ds_u - (n - 1) * D_u
    uniform = bool(mono and comp_ok and m_u > 0)

    roots = fast_roots(net)
    x_f = np.full(n, np.inf)
    for j in roots:
        res = existence_condition(net, j)
        for i in range(n):
            if i == j:
                continue
            xi = net.knee_left(i, g[i] * res.dbar[i]) if res.dbar[i] > 0 else net.x_low[i]
            x_f[i] = min(x_f[i], xi)
    x_f = np.where(np.isfinite(x_f), x_f, net.x_low)
    mid = (1 - r) * net.x_low + r * x_f
    t_mid = net.phase(mid)
    mono_r = True
    for i in range(n):
        for j in range(n):
            if i != j and not t_top[i] - t_mid[i] < period[j]:
                mono_r = False
    gap = float(np.min((1 - r) * (x_f - net.x_low)))
    eta_ok = bool(0 <= eta_star < gap)
    r_eta = eta_ratio(net, eta)
    t_f = net.phase(np.maximum(x_f - eta_star, net.x_low))
    D_r = 2.0 * float(np.max(t_top - t_f))
    ds_r = float(np.min(t_f - t_mid))
    dsp = float(np.max(t_top))
    m_r = (1.0 - crc) * ds_r - r_eta * (dsp - ds_r) - (n - 1) * D_r
    refined = bool(mono and mono_r and eta_ok and m_r > 0)
    return GlobalReport(mono, float(comp), comp_ok, D_u, ds_u, uniform, float(m_u), x_f, mono_r,
                        eta, eta_star, eta_ok, r_eta, D_r, ds_r, dsp, refined, float(m_r), d_under)


# ---------------------------------------------------------------------------
# Raster statistics
# ---------------------------------------------------------------------------


@dataclass
class Dispersion:
    period: float
    starts: np.ndarray
    values: np.ndarray


def median_period(raster):
    by = {}
    for i, _, t in raster:
        by.setdefault(i, []).append(t)
    isis = [np.median(np.diff(sorted(ts))) for ts in by.values() if len(ts) > 1]
    if not isis:
        raise DomainError("raster needs at least one full cycle")
    return float(np.median(isis))


def spike_dispersion(raster, n, window=(-np.inf, np.inf), period=None):
    """Burst-wise spread of spike times relative to the median period.

    Bursts are split at gaps larger than a quarter period; a burst missing any
    of the ``n`` neurons gets dispersion infinity.
    """
    per = median_period(raster) if period is None else period
    rows = sorted((r for r in raster if window[0] <= r[2] <= window[1]), key=lambda r: r[2])
    if not rows:
        return Dispersion(per, np.array([]), np.array([]))
    bursts, cur = [], [rows[0]]
    for row in rows[1:]:
        if row[2] - cur[-1][2] > 0.25 * per:
            bursts.append(cur)
            cur = [row]
        else:
            cur.append(row)
    bursts.append(cur)
    starts = np.array([b[0][2] for b in bursts])
    vals = np.array([np.inf if len({r[0] for r in b}) < n else (b[-1][2] - b[0][2]) / per
                     for b in bursts])
    return Dispersion(per, starts, vals)
