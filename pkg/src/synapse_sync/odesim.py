"""Finite-epsilon simulation of the coupled network.

Fixed-step classical RK4, compiled with numba.  Step nonlinearities are
replaced by logistics of width kappa; spikes are detected on the fly as the
refined peak of each excursion above threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .errors import DomainError, InstabilityError, NumericError
from .network import CouplingGraph
from .neuron import CoshTimeConstant, PiecewiseTimeConstant, Step, TanhSigmoid

MODES = {"off": 0, "synaptic": 1, "diffusive": 2}
ESCAPE_TOL = 1e-3
_NP = 28


def _encode_sigmoid(s, kappa):
    if isinstance(s, TanhSigmoid):
        return 0.0, s.center, s.width
    if isinstance(s, Step):
        if kappa <= 0:
            raise DomainError("step nonlinearities need kappa > 0 in ODE mode")
        return 1.0, s.at, kappa
    raise DomainError(f"unsupported sigmoid {s!r}")


def _encode_model(mdl, eps, kappa):
    row = np.zeros(_NP)
    row[0:8] = (mdl.g_L, mdl.g_Ca, mdl.g_K, mdl.E_L, mdl.E_Ca, mdl.E_K, mdl.E_syn, mdl.I_app)
    row[8:10] = (mdl.activation.center, mdl.activation.width)
    row[10:13] = _encode_sigmoid(mdl.gating, kappa)
    tc = mdl.time_constant
    if isinstance(tc, CoshTimeConstant):
        row[13:16] = (0.0, tc.center, tc.width)
    elif isinstance(tc, PiecewiseTimeConstant):
        if kappa <= 0:
            raise DomainError("piecewise time constants need kappa > 0 in ODE mode")
        row[13] = 1.0
        row[16:23] = (eps**tc.q, tc.tau_knee, tc.tau_deep, tc.v_break, tc.threshold, tc.scale, kappa)
    else:
        raise DomainError(f"unsupported time constant {tc!r}")
    row[23] = mdl.threshold
    row[24:28] = (*mdl.x_box, *mdl.v_box)
    return row


@nb.njit(cache=True)
def _sig(kind, c, w, v):
    if kind == 0.0:
        return 0.5 + 0.5 * np.tanh((v - c) / w)
    return 0.5 + 0.5 * np.tanh(0.5 * (v - c) / w)


@nb.njit(cache=True)
def _tau(p, v):
    if p[13] == 0.0:
        return 1.0 / np.cosh((v - p[14]) / p[15])
    k = p[22]
    lo = 0.5 + 0.5 * np.tanh(0.5 * (p[20] - v) / k)
    dp = 0.5 + 0.5 * np.tanh(0.5 * (p[19] - v) / k)
    return p[21] * (p[16] + p[17] * lo + (p[18] - p[17]) * dp)


@nb.njit(cache=True)
def _rhs(P, ptr, src, wgt, sk, sc, sw, mode, eps, x, v, dx, dv):
    n = x.shape[0]
    for i in range(n):
        p = P[i]
        vi = v[i]
        act = 0.5 + 0.5 * np.tanh((vi - p[8]) / p[9])
        f = (p[0] * (p[3] - vi) + p[1] * act * (p[4] - vi) + p[2] * x[i] * (p[5] - vi) + p[7])
        drive = 0.0
        if mode == 1:
            for e in range(ptr[i], ptr[i + 1]):
                drive += wgt[e] * _sig(sk[e], sc[e], sw[e], v[src[e]])
            f += (p[6] - vi) * drive
        elif mode == 2:
            for e in range(ptr[i], ptr[i + 1]):
                drive += wgt[e] * (v[src[e]] - vi)
            f += drive
        dv[i] = f / eps
        dx[i] = (-x[i] + _sig(p[10], p[11], p[12], vi)) / _tau(p, vi)


@nb.njit(cache=True)
def _spike_step(i, t_k, dt, vk, th, prev1, prev2, inexc, best, best_t, spk_i, spk_t, nspk):
    """Advance the excursion tracker of neuron i by one sample; returns spike count."""
    if inexc[i]:
        a, b = prev2[i], prev1[i]
        if b >= a and b > vk and b > best[i]:
            den = a - 2.0 * b + vk
            off = 0.0 if den == 0.0 else 0.5 * (a - vk) / den
            best[i] = b
            best_t[i] = t_k - dt + off * dt
        if vk < th:
            inexc[i] = False
            if best[i] > -np.inf and nspk < spk_i.shape[0]:
                spk_i[nspk] = i
                spk_t[nspk] = best_t[i]
                nspk += 1
            elif best[i] > -np.inf:
                nspk += 1
    elif vk >= th and prev1[i] < th:
        inexc[i] = True
        best[i] = -np.inf
    prev2[i] = prev1[i]
    prev1[i] = vk
    return nspk


@nb.njit(cache=True)
def _detect(t, v, th):
    n = v.shape[1]
    steps = v.shape[0]
    spk_i = np.empty(steps, dtype=np.int64)
    spk_t = np.empty(steps)
    prev1 = v[0].copy()
    prev2 = v[0].copy()
    inexc = np.zeros(n, dtype=np.bool_)
    best = np.full(n, -np.inf)
    best_t = np.zeros(n)
    nspk = 0
    for k in range(1, steps):
        dt = t[k] - t[k - 1]
        for i in range(n):
            nspk = _spike_step(i, t[k], dt, v[k, i], th[i], prev1, prev2, inexc, best, best_t,
                               spk_i, spk_t, nspk)
    return spk_i[:nspk], spk_t[:nspk]


@nb.njit(cache=True)
def _integrate(P, ptr, src, wgt, sk, sc, sw, mode, eps, dt, n_steps, on_step, x, v, stride,
               rec_t, rec_x, rec_v, spk_i, spk_t):
    n = x.shape[0]
    k1x = np.empty(n); k1v = np.empty(n); k2x = np.empty(n); k2v = np.empty(n)
    k3x = np.empty(n); k3v = np.empty(n); k4x = np.empty(n); k4v = np.empty(n)
    tx = np.empty(n); tv = np.empty(n)
    th = P[:, 23]
    prev1 = v.copy()
    prev2 = v.copy()
    inexc = np.zeros(n, dtype=np.bool_)
    best = np.full(n, -np.inf)
    best_t = np.zeros(n)
    nspk = 0
    nrec = 0
    rec_t[0] = 0.0
    rec_x[0] = x
    rec_v[0] = v
    nrec = 1
    for s in range(n_steps):
        m = mode if s >= on_step else 0
        _rhs(P, ptr, src, wgt, sk, sc, sw, m, eps, x, v, k1x, k1v)
        for i in range(n):
            tx[i] = x[i] + 0.5 * dt * k1x[i]
            tv[i] = v[i] + 0.5 * dt * k1v[i]
        _rhs(P, ptr, src, wgt, sk, sc, sw, m, eps, tx, tv, k2x, k2v)
        for i in range(n):
            tx[i] = x[i] + 0.5 * dt * k2x[i]
            tv[i] = v[i] + 0.5 * dt * k2v[i]
        _rhs(P, ptr, src, wgt, sk, sc, sw, m, eps, tx, tv, k3x, k3v)
        for i in range(n):
            tx[i] = x[i] + dt * k3x[i]
            tv[i] = v[i] + dt * k3v[i]
        _rhs(P, ptr, src, wgt, sk, sc, sw, m, eps, tx, tv, k4x, k4v)
        t_new = (s + 1) * dt
        for i in range(n):
            x[i] += dt / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i])
            v[i] += dt / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i])
            p = P[i]
            if not (x[i] >= p[24] - 1e-3 and x[i] <= p[25] + 1e-3
                    and v[i] >= p[26] - 1e-3 and v[i] <= p[27] + 1e-3):
                return nrec, nspk, s + 1, i
            nspk = _spike_step(i, t_new, dt, v[i], th[i], prev1, prev2, inexc, best, best_t,
                               spk_i, spk_t, nspk)
        if (s + 1) % stride == 0 and nrec < rec_t.shape[0]:
            rec_t[nrec] = t_new
            rec_x[nrec] = x
            rec_v[nrec] = v
            nrec += 1
    return nrec, nspk, -1, -1


@dataclass
class OdeTrajectory:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    spikes: list
    meta: dict = field(default_factory=dict)

    def spike_times(self, i):
        return np.array([t for j, t in self.spikes if j == i])

    def raster(self):
        """Rows ``(neuron, cycle, time)`` ordered by time."""
        count = {}
        rows = []
        for j, t in self.spikes:
            rows.append((j, count.get(j, 0), t))
            count[j] = count.get(j, 0) + 1
        return rows


def _csr(graph, kappa):
    ptr = np.zeros(graph.n + 1, dtype=np.int64)
    src, wgt, sk, sc, sw = [], [], [], [], []
    for i in range(graph.n):
        idx, w = graph.in_neighbors(i)
        for j, a in zip(idx, w):
            code = _encode_sigmoid(graph.sigmoid(int(j), i), kappa[int(j)])
            src.append(int(j))
            wgt.append(graph.gains[i] * a)
            sk.append(code[0]); sc.append(code[1]); sw.append(code[2])
        ptr[i + 1] = len(src)
    return (ptr, np.array(src, dtype=np.int64), np.array(wgt, dtype=float),
            np.array(sk, dtype=float), np.array(sc, dtype=float), np.array(sw, dtype=float))


def random_init(models, rng):
    """Uniform draw over each neuron's domain box: ``(x0, v0)``."""
    x0 = np.array([rng.uniform(*m.x_box) for m in models])
    v0 = np.array([rng.uniform(*m.v_box) for m in models])
    return x0, v0


def simulate(models, graph: CouplingGraph, eps, horizon, init, dt=None,
             coupling_mode="synaptic", coupling_on_time=0.0, kappa=None, max_records=20_000):
    """Integrate the network from ``init = (x0, v0)`` up to ``horizon``.

    ``dt`` defaults to ``eps/20`` and may not exceed it.  The drive is off before
    ``coupling_on_time``.  Diffusive mode replaces the synaptic drive by
    ``g_i alpha_ij (v_j - v_i)``.
    """
    if coupling_mode not in MODES:
        raise DomainError(f"coupling mode must be one of {sorted(MODES)}")
    if len(models) != graph.n:
        raise DomainError("one model per neuron required")
    if eps <= 0 or horizon <= 0:
        raise DomainError("eps and horizon must be positive")
    dt = eps / 20.0 if dt is None else float(dt)
    if dt > eps / 20.0 * (1 + 1e-12):
        raise DomainError(f"dt = {dt:g} exceeds eps/20 = {eps / 20:g}")
    kap = np.array([m.kappa if kappa is None else kappa for m in models], dtype=float)
    P = np.array([_encode_model(m, eps, k) for m, k in zip(models, kap)])
    ptr, src, wgt, sk, sc, sw = _csr(graph, kap)
    x = np.array(init[0], dtype=float).copy()
    v = np.array(init[1], dtype=float).copy()
    n = graph.n
    n_steps = int(round(horizon / dt))
    on_step = int(np.ceil(coupling_on_time / dt - 1e-9))
    stride = max(1, n_steps // max_records)
    n_rec = n_steps // stride + 2
    rec_t, rec_x, rec_v = np.zeros(n_rec), np.zeros((n_rec, n)), np.zeros((n_rec, n))
    cap = int(min(n * (n_steps // 50 + 16), 5_000_000))
    spk_i, spk_t = np.zeros(cap, dtype=np.int64), np.zeros(cap)
    nrec, nspk, bad_step, bad_i = _integrate(P, ptr, src, wgt, sk, sc, sw, MODES[coupling_mode],
                                             float(eps), dt, n_steps, on_step, x, v, stride,
                                             rec_t, rec_x, rec_v, spk_i, spk_t)
    if bad_step >= 0:
        raise InstabilityError(
            f"neuron {bad_i} left its domain box at t = {bad_step * dt:.6g}; "
            "try a smaller dt or a larger kappa")
    if nspk > cap:
        raise NumericError("spike buffer overflow")
    order = np.argsort(spk_t[:nspk], kind="stable")
    spikes = [(int(spk_i[k]), float(spk_t[k])) for k in order]
    meta = {"method": "rk4", "dt": dt, "eps": eps, "kappa": kap.tolist(), "mode": coupling_mode,
            "coupling_on_time": coupling_on_time, "q": [getattr(m.time_constant, "q", None)
                                                         for m in models]}
    return OdeTrajectory(rec_t[:nrec], rec_x[:nrec], rec_v[:nrec], spikes, meta)


def detect_spikes(t, v, threshold):
    """Refined peak times of each excursion above threshold: ``[(neuron, time)]``.

    ``v`` has shape ``(samples,)`` or ``(samples, neurons)``.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    th = np.broadcast_to(np.asarray(threshold, dtype=float), (v.shape[1],)).copy()
    idx, tt = _detect(t, np.ascontiguousarray(v), th)
    order = np.argsort(tt, kind="stable")
    return [(int(idx[k]), float(tt[k])) for k in order]


def linearized_gains(model, traj: OdeTrajectory, g_coup, neuron=0):
    """Gains ``b(t), a(t), k(t)`` of the synchronization-error equation along a trajectory.

    Returns a dict of arrays keyed ``t, b, a, k``.
    """
    v = traj.v[:, neuron]
    x = traj.x[:, neuron]
    tc, gate, act = model.time_constant, model.gating, model.activation
    if not isinstance(tc, CoshTimeConstant) or not isinstance(gate, TanhSigmoid):
        raise DomainError("linearized gains need smooth gating and time constant")
    tau, dtau = tc(v), tc.derivative(v)
    xinf, dxinf = gate(v), gate.derivative(v)
    m, dm = act(v), act.derivative(v)
    b = (dtau * (x - xinf) + tau * dxinf) / tau**2
    a = (-model.g_L - (model.g_Ca + g_coup) * m + model.g_Ca * dm * (model.E_Ca - v)
         - model.g_K * x)
    k = g_coup * (model.E_syn - v) * dm
    return {"t": traj.t, "b": b, "a": a, "k": k}
