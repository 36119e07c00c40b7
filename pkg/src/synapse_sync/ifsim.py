"""Event-driven singular-limit (integrate-and-fire) network engine.

Between spikes every neuron drifts down its lower branch independently, so its
state is summarised by the phase ``tau_i(x_i)``: the slow time left before it
reaches its left knee.  A knee arrival triggers a chain reaction (absorb), a
fast excursion along the upper branches (spike_map) and the return to the next
knee arrival (return_map).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, GeometryError, InvariantViolation
from .network import CouplingGraph
from .neuron import (
    PiecewiseTimeConstant,
    Step,
    TableBank,
    compute_geometry,
    fast_travel_table,
    slow_interval,
    slow_travel_table,
)


def _level_key(m):
    return round(float(m), 12)


class _FastWindow:
    """A fast table cut off at a lower right knee.

    Valid when the upper-branch flow does not depend on the drive, so the
    table built for the largest drive covers every smaller one.
    """

    def __init__(self, base, upper):
        self.base, self.lower, self.upper = base, base.lower, float(upper)
        self.total = float(base(self.upper))

    def __call__(self, x):
        if np.any(np.asarray(x) > self.upper + 1e-12 * (1.0 + abs(self.upper))):
            raise DomainError(f"x beyond the right knee {self.upper:.12g}")
        return self.base(np.minimum(x, self.upper))

    def inverse(self, t):
        return self.base.inverse(np.minimum(t, self.total))


def _drive_free_fast_flow(model, geo):
    """True when gating and fast rate are constant along the whole upper branch."""
    tc = model.time_constant
    return (isinstance(model.gating, Step) and isinstance(tc, PiecewiseTimeConstant)
            and geo.v_right >= max(model.gating.at, tc.threshold))


class IFNetwork:
    """Neurons, coupling graph and the travel-time tables the engine needs."""

    def __init__(self, models, graph: CouplingGraph, *, tolerance=1e-10, min_nodes=10_001,
                 tie_rel=1e-12):
        if len(models) != graph.n:
            raise DomainError("one model per neuron required")
        for mdl in models:
            if not getattr(mdl.time_constant, "singular", False):
                raise GeometryError("every neuron needs a time-constant profile with a singular limit")
        self.models = list(models)
        self.graph = graph
        self.n = graph.n
        self.tolerance = tolerance
        self.min_nodes = min_nodes
        self.A = graph.weights
        self.gains = np.asarray(graph.gains)
        self.max_level = self.gains * graph.in_degree
        for i, mdl in enumerate(self.models):
            if self.max_level[i] > mdl.margin * (1 + 1e-12):
                raise DomainError(f"neuron {i}: g*d = {self.max_level[i]:.6g} exceeds margin {mdl.margin}")
        self.slow = [slow_travel_table(m, tolerance, min_nodes) for m in self.models]
        self._bank = TableBank(self.slow)
        lo_hi = [slow_interval(m) for m in self.models]
        self.x_low = np.array([a for a, _ in lo_hi])
        self.x_top = np.array([b for _, b in lo_hi])
        self.x_right0 = np.array([compute_geometry(m, 0.0).x_right for m in self.models])
        self.periods = self.phase(self.x_right0)
        self.tie_tol = tie_rel * float(self.periods.min())
        self._fast = {}

    def knee_left(self, i, m):
        return compute_geometry(self.models[i], _level_key(m)).x_left

    def knee_right(self, i, m):
        return compute_geometry(self.models[i], _level_key(m)).x_right

    def knees_left(self, levels):
        return np.array([self.knee_left(i, m) for i, m in enumerate(levels)])

    def knees_right(self, levels):
        return np.array([self.knee_right(i, m) for i, m in enumerate(levels)])

    def fast(self, i, m):
        key = (i, _level_key(m))
        tab = self._fast.get(key)
        if tab is None:
            mdl = self.models[i]
            geo = compute_geometry(mdl, key[1])
            top = compute_geometry(mdl, mdl.margin)
            if _drive_free_fast_flow(mdl, geo) and _drive_free_fast_flow(mdl, top):
                base = self._fast.get((i, "base"))
                if base is None:
                    base = fast_travel_table(mdl, mdl.margin, self.tolerance, self.min_nodes)
                    self._fast[(i, "base")] = base
                tab = _FastWindow(base, geo.x_right)
            else:
                tab = fast_travel_table(mdl, key[1], self.tolerance, self.min_nodes)
            self._fast[key] = tab
        return tab

    def fast_bank(self):
        """Batched drive-independent fast tables, or None if some neuron lacks one."""
        if "bank" not in self._fast:
            tops = [self.fast(i, self.models[i].margin) for i in range(self.n)]
            ok = all(isinstance(t, _FastWindow) for t in tops)
            self._fast["bank"] = TableBank([t.base for t in tops]) if ok else None
        return self._fast["bank"]

    def phase(self, x):
        """Slow time each neuron needs to reach its left knee."""
        return self._bank(np.asarray(x, dtype=float))

    def from_phase(self, t):
        return self._bank.inverse(np.asarray(t, dtype=float))

    def levels(self, active):
        """Drive ``m_i = g_i * sum of alpha_ij over active presynaptic j``."""
        return self.gains * (self.A @ np.asarray(active, dtype=float))

    def with_gain_factor(self, factor):
        return IFNetwork(self.models, self.graph.with_gains(tuple(self.gains * factor)),
                         tolerance=self.tolerance, min_nodes=self.min_nodes)

    def random_state(self, rng):
        """Uniform draw over ``[x_left(0), x_right(0)]`` per neuron."""
        return rng.uniform(self.x_low, self.x_right0)


@dataclass
class IfState:
    x: np.ndarray
    time: float = 0.0
    cycle: int = 0


@dataclass
class SpikePoint:
    """Jump point together with the chain reaction it triggers."""

    x: np.ndarray
    roots: np.ndarray
    firing: np.ndarray
    layers: list
    edges: list
    levels: np.ndarray

    @property
    def synchronous(self):
        return bool(self.firing.all())


@dataclass
class SpikeResult:
    x: np.ndarray
    fast_time: float
    iterations: int
    jump_order: list = field(default_factory=list)


def advance_to_jump(net: IFNetwork, x):
    """Drift until the first knee arrival: ``(x_new, elapsed, roots)``."""
    t = net.phase(x)
    dt = float(t.min())
    rest = t - dt
    roots = rest <= net.tie_tol
    rest[roots] = 0.0
    x_new = net.from_phase(rest)
    x_new[roots] = net.x_low[roots]
    return x_new, dt, roots


def knee_roots(net: IFNetwork, x):
    """Neurons sitting at their left knee (within the tie tolerance)."""
    return net.phase(x) <= net.tie_tol


def absorb(net: IFNetwork, x, roots=None, coupled=True):
    """Layered chain reaction started by the knee-resident ``roots``."""
    x = np.asarray(x, dtype=float)
    roots = knee_roots(net, x) if roots is None else np.asarray(roots, dtype=bool)
    if not roots.any():
        raise DomainError("no neuron at its left knee")
    placed = roots.copy()
    layers = [np.nonzero(roots)[0]]
    edges = []
    while coupled:
        dbar = net.A @ placed.astype(float)
        cand = np.nonzero(~placed & (dbar > 0))[0]
        new = [j for j in cand if x[j] < net.knee_left(j, net.gains[j] * dbar[j])]
        if not new:
            break
        last = layers[-1]
        for j in new:
            edges.extend((int(k), int(j)) for k in last if net.A[j, k] > 0)
        new = np.array(new)
        placed[new] = True
        layers.append(new)
    return SpikePoint(x.copy(), roots, placed, layers, edges, net.levels(placed))


def spike_map(net: IFNetwork, point: SpikePoint, tie=None):
    """Fast excursion of the firing set; non-firing neurons are unchanged.

    Neurons reaching their right knees within ``tie`` (default: the network's
    tie tolerance) of each other jump together.
    """
    tie = net.tie_tol if tie is None else tie
    x = point.x.copy()
    active = point.firing.copy()
    fast_time = 0.0
    iterations = 0
    order = []
    while True:
        m = net.levels(active)
        changed = True
        while changed:
            changed = False
            for i in np.nonzero(active)[0]:
                if x[i] >= net.knee_right(i, m[i]):
                    active[i] = False
                    changed = True
                    order.append(int(i))
            if changed:
                m = net.levels(active)
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        iterations += 1
        if iterations > net.n:
            raise InvariantViolation("fast phase exceeded N iterations")
        tabs = [net.fast(i, m[i]) for i in idx]
        bank = net.fast_bank() if all(isinstance(t, _FastWindow) for t in tabs) else None
        if bank is not None:
            # One batched lookup for all firing neurons; idle slots query the table start.
            probe = bank.lower.copy()
            probe[idx] = np.maximum(x[idx], bank.lower[idx])
            pos = bank(probe)[idx]
            left = np.array([tab.total for tab in tabs]) - pos
        else:
            pos = np.array([tab(max(x[i], tab.lower)) for tab, i in zip(tabs, idx)])
            left = np.array([tab.total for tab in tabs]) - pos
        step = float(left.min())
        fast_time += step
        done = left - step <= tie
        if bank is not None:
            target = np.zeros(net.n)
            target[idx] = np.minimum(pos + step, bank.total[idx])
            moved = bank.inverse(target)
        for a, (tab, i) in enumerate(zip(tabs, idx)):
            if done[a]:
                x[i] = tab.upper
                active[i] = False
                order.append(int(i))
            else:
                x[i] = moved[i] if bank is not None else tab.inverse(pos[a] + step)
    return SpikeResult(x, fast_time, iterations, order)


def return_map(net: IFNetwork, x_plus):
    """``x_i -> tau_i^{-1}(tau_i(x_i) - min_j tau_j(x_j))``."""
    x_new, _, _ = advance_to_jump(net, x_plus)
    return x_new


def cycle_map(net: IFNetwork, p, coupled=True):
    """One full cycle ``R(p)`` from a jump point; returns ``(R(p), SpikePoint, elapsed)``."""
    sp = absorb(net, p, coupled=coupled)
    res = spike_map(net, sp)
    x_new, dt, _ = advance_to_jump(net, res.x)
    return x_new, sp, dt


@dataclass
class IfRun:
    raster: list
    events: list
    states: list
    final: IfState


def simulate_if(net: IFNetwork, x0, n_cycles=None, horizon=None, coupling_on_time=0.0,
                record_states=False, max_events=1_000_000):
    """Alternate drift, absorption and fast excursion.

    Stops once every neuron has spiked ``n_cycles`` times or the next event
    would fall after ``horizon``.  Raster rows are ``(neuron, cycle, time)``.
    """
    if n_cycles is None and horizon is None:
        raise DomainError("give n_cycles or horizon")
    x = np.asarray(x0, dtype=float).copy()
    t = 0.0
    counts = np.zeros(net.n, dtype=int)
    raster, events, states = [], [], []
    for _ in range(max_events):
        if n_cycles is not None and counts.min() >= n_cycles:
            break
        x_j, dt, roots = advance_to_jump(net, x)
        if horizon is not None and t + dt > horizon:
            break
        t += dt
        sp = absorb(net, x_j, roots, coupled=t >= coupling_on_time)
        for i in np.nonzero(sp.firing)[0]:
            raster.append((int(i), int(counts[i]), t))
            counts[i] += 1
        res = spike_map(net, sp)
        events.append((t, np.nonzero(sp.firing)[0].tolist(), res.fast_time))
        if record_states:
            states.append((t, x_j.copy(), res.x.copy()))
        x = res.x
    return IfRun(raster, events, states, IfState(x, t, int(counts.min())))
