"""Command-line front end: config parsing, seeded draws, experiment dispatch and writers.

Usage::

    synapse-sync <mode> --config <path> [--seed N] [--out DIR]

Modes are ``ode``, ``if``, ``check``, ``analyze``, ``reproduce-fig1`` and
``reproduce-fig4``.  Exit status is 0 on success, 2 when the configuration or
the coupling fails validation and 3 on a numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    check_monotonicity,
    contraction_constants,
    existence_condition,
    fast_roots,
    find_fixed_point,
    global_conditions,
    random_syn_point,
    spike_dispersion,
)
from .errors import ConfigError, DomainError, NumericError, SynapseSyncError
from .ifsim import IFNetwork, simulate_if
from .network import (
    CouplingGraph,
    all_to_all_graph,
    ring_graph,
    strong_connectivity,
    validate_coupling,
)
from .neuron import check_assumptions, compute_geometry, piecewise_neuron, smooth_neuron
from .odesim import simulate

MODES = ("ode", "if", "check", "analyze", "reproduce-fig1", "reproduce-fig4")
FAMILY_RANGES = {"g_L": (0.3, 0.75), "g_Ca": (1.75, 2.25), "g_K": (2.75, 3.25)}
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


# ---------------------------------------------------------------------------
# Random stream
# ---------------------------------------------------------------------------


class SplitMix64:
    """SplitMix64 generator.

    Each call adds the golden-ratio increment ``0x9E3779B97F4A7C15`` to the
    64-bit state and mixes the result::

        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        z =  z ^ (z >> 31)

    all modulo 2**64.  A double in [0, 1) is the top 53 bits times 2**-53.
    Draws happen in call order, element by element, so any implementation of
    these few lines reproduces the populations and initial states.
    """

    MASK = (1 << 64) - 1
    GAMMA = 0x9E3779B97F4A7C15
    MIX1 = 0xBF58476D1CE4E5B9
    MIX2 = 0x94D049BB133111EB

    def __init__(self, seed):
        self.state = int(seed) & self.MASK

    def next_u64(self):
        self.state = (self.state + self.GAMMA) & self.MASK
        z = self.state
        z = ((z ^ (z >> 30)) * self.MIX1) & self.MASK
        z = ((z ^ (z >> 27)) * self.MIX2) & self.MASK
        return z ^ (z >> 31)

    def random(self):
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, low=0.0, high=1.0, size=None):
        """numpy-style broadcasting over ``low``/``high``; row-major draw order."""
        lo, hi = np.broadcast_arrays(np.asarray(low, dtype=float), np.asarray(high, dtype=float))
        shape = lo.shape if size is None else tuple(np.atleast_1d(size))
        lo, hi = np.broadcast_to(lo, shape), np.broadcast_to(hi, shape)
        out = np.empty(shape)
        for idx in np.ndindex(shape):
            u = self.random()
            out[idx] = lo[idx] + (hi[idx] - lo[idx]) * u
        return out if shape else float(out)

    def integers(self, n):
        """Uniform integer in ``[0, n)`` (multiply-shift on 64 bits)."""
        return int((self.next_u64() * int(n)) >> 64)


def seeded_population(ranges, seed, n):
    """``n`` triples ``(g_L, g_Ca, g_K)``, drawn neuron by neuron in that order."""
    rng = SplitMix64(seed)
    keys = ("g_L", "g_Ca", "g_K")
    for k in keys:
        lo, hi = ranges[k]
        if not lo <= hi:
            raise ConfigError(f"range for {k} is empty: [{lo}, {hi}]")
    return [tuple(rng.uniform(*ranges[k]) if ranges[k][0] < ranges[k][1] else float(ranges[k][0])
                  for k in keys) for _ in range(n)]


def _init_stream(seed):
    # Initial conditions use a stream decorrelated from the population draws.
    return SplitMix64((int(seed) ^ 0x5DEECE66D) & SplitMix64.MASK)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class PopulationSpec:
    n: int = 0
    ranges: dict = field(default_factory=lambda: dict(FAMILY_RANGES))
    neurons: list = None
    model: str = "piecewise"


@dataclass
class GraphSpec:
    kind: str = "ring"
    k: int = 1
    gain: float = 0.01
    weight: float = 1.0
    edges: list = None


@dataclass
class OutputSpec:
    raster: str = "raster.csv"
    report: str = "report.json"
    trajectory: str = None
    trajectory_stride: int = 10


@dataclass
class ExperimentConfig:
    mode: str
    seed: int = 1
    population: PopulationSpec = field(default_factory=PopulationSpec)
    graph: GraphSpec = field(default_factory=GraphSpec)
    tau_knee: float = 30.0
    tau_deep: float = 5.0
    taus: list = field(default_factory=lambda: [0.5, 5.0, 30.0])
    q: float = 0.5
    margin: float = 0.36
    threshold: float = 0.01
    eps: float = 4e-3
    kappa: float = None
    kappa_scale: float = 0.05
    dt: float = None
    horizon: float = None
    n_cycles: int = None
    coupling_on_time: float = 0.0
    coupling_mode: str = "synaptic"
    g_coup: float = 0.67
    fig1_eps: float = 0.02
    fig1_horizon: float = 60.0
    fig1_coupling_on: float = 15.0
    min_nodes: int = 10_001
    fixed_point_starts: int = 5
    output: OutputSpec = field(default_factory=OutputSpec)


_NESTED = {"population": PopulationSpec, "graph": GraphSpec, "output": OutputSpec}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = _build(_NESTED[k], v, f"{where}.{k}") if k in _NESTED else v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(data, mode=None, seed=None):
    """Validate a decoded JSON document; CLI arguments override ``mode``/``seed``."""
    data = dict(data)
    if mode is not None:
        data["mode"] = mode
    if seed is not None:
        data["seed"] = seed
    if "mode" not in data:
        raise ConfigError("missing required field 'mode'")
    cfg = _build(ExperimentConfig, data, "config")
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {list(MODES)}, got {cfg.mode!r}")
    if cfg.population.model not in ("piecewise", "smooth"):
        raise ConfigError("population.model must be 'piecewise' or 'smooth'")
    if cfg.graph.kind not in ("ring", "all-to-all", "edges"):
        raise ConfigError("graph.kind must be 'ring', 'all-to-all' or 'edges'")
    if cfg.coupling_mode not in ("synaptic", "diffusive", "off"):
        raise ConfigError("coupling_mode must be synaptic, diffusive or off")
    if cfg.mode in ("ode", "if", "check", "analyze"):
        if cfg.population.neurons is None and cfg.population.n < 1:
            raise ConfigError("population needs 'n' >= 1 or an explicit 'neurons' list")
    if cfg.mode == "if" and cfg.horizon is None and cfg.n_cycles is None:
        raise ConfigError("give 'horizon' or 'n_cycles'")
    if cfg.mode == "ode" and cfg.horizon is None:
        raise ConfigError("ode mode needs 'horizon'")
    return cfg


def load_config(path, mode=None, seed=None):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(data, mode, seed)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_models(cfg: ExperimentConfig, tau_knee=None):
    pop = cfg.population
    if pop.neurons is not None:
        triples = []
        for k, nd in enumerate(pop.neurons):
            try:
                triples.append((float(nd["g_L"]), float(nd["g_Ca"]), float(nd["g_K"])))
            except (KeyError, TypeError, ValueError):
                raise ConfigError(f"population.neurons[{k}] needs numeric g_L, g_Ca, g_K") from None
    else:
        triples = seeded_population({k: tuple(v) for k, v in pop.ranges.items()}, cfg.seed, pop.n)
    if pop.model == "smooth":
        return [smooth_neuron(*t) for t in triples]
    tk = cfg.tau_knee if tau_knee is None else tau_knee
    return [piecewise_neuron(*t, tau_knee=tk, tau_deep=cfg.tau_deep, q=cfg.q,
                             threshold=cfg.threshold, margin=cfg.margin) for t in triples]


def build_graph(cfg: ExperimentConfig, n, sigmoid=None) -> CouplingGraph:
    gs = cfg.graph
    if gs.kind == "ring":
        return ring_graph(n, gs.k, gs.gain, gs.weight, sigmoid)
    if gs.kind == "all-to-all":
        return all_to_all_graph(n, gs.gain, gs.weight, sigmoid)
    if not gs.edges:
        raise ConfigError("graph.kind 'edges' needs an 'edges' list of [j, i, alpha]")
    return CouplingGraph(n, tuple(tuple(e) for e in gs.edges), (gs.gain,),
                         None if sigmoid is None else (sigmoid,), (), "edges")


def ode_kappa(cfg: ExperimentConfig):
    return cfg.kappa if cfg.kappa is not None else cfg.kappa_scale * cfg.eps**cfg.q


def slow_manifold_init(models, rng):
    """x uniform on ``[x_left(0), x_right(0)]``, v on the lower branch."""
    x0, v0 = [], []
    for m in models:
        geo = compute_geometry(m, 0.0)
        x = rng.uniform(geo.x_left, geo.x_right)
        x0.append(x)
        v0.append(float(geo.v_small(x)))
    return np.array(x0), np.array(v0)


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def write_raster(path, rows):
    """``neuron_id,cycle,time`` CSV, LF line endings, rows ordered by time."""
    rows = sorted(rows, key=lambda r: (r[2], r[0]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("neuron_id,cycle,time\n")
        for i, c, t in rows:
            fh.write(f"{int(i)},{int(c)},{_fmt(t)}\n")


def write_trajectory(path, traj, stride=1):
    n = traj.v.shape[1]
    head = ["time"] + [f"x{i}" for i in range(n)] + [f"v{i}" for i in range(n)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(head) + "\n")
        for k in range(0, len(traj.t), max(1, int(stride))):
            vals = [traj.t[k], *traj.x[k], *traj.v[k]]
            fh.write(",".join(_fmt(v) for v in vals) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return obj


def write_report(path, report):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------


class ValidationFailure(SynapseSyncError):
    """Coupling or assumption validation failed; carries the report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def _validate(models, graph):
    cov = validate_coupling(graph, models)
    if cov.w1_failures():
        raise ValidationFailure(f"W1 violated for neurons {cov.w1_failures()}",
                                {"coupling": cov.as_dict()})
    return cov


def _dispersion_report(raster, n, window=(-math.inf, math.inf)):
    try:
        disp = spike_dispersion(raster, n, window)
    except DomainError:
        return {"period": None, "burst_starts": [], "dispersion": []}
    return {"period": disp.period, "burst_starts": disp.starts, "dispersion": disp.values}


def _run_if(cfg, models, out, tag=""):
    graph = build_graph(cfg, len(models))
    cov = _validate(models, graph)
    net = IFNetwork(models, graph, min_nodes=cfg.min_nodes)
    x0 = net.random_state(_init_stream(cfg.seed))
    run = simulate_if(net, x0, n_cycles=cfg.n_cycles, horizon=cfg.horizon,
                      coupling_on_time=cfg.coupling_on_time)
    write_raster(out / f"{tag}{cfg.output.raster}", run.raster)
    return {
        "engine": "if",
        "coupling": cov.as_dict(),
        "periods": net.periods,
        "spikes": len(run.raster),
        "final_time": run.final.time,
        "dispersion": _dispersion_report(run.raster, net.n, (cfg.coupling_on_time, math.inf)),
    }


def _run_ode(cfg, models, out, tag="", graph=None):
    graph = build_graph(cfg, len(models)) if graph is None else graph
    cov = _validate(models, graph)
    init = _box_init(models, _init_stream(cfg.seed))
    traj = simulate(models, graph, cfg.eps, cfg.horizon, init, dt=cfg.dt,
                    coupling_mode=cfg.coupling_mode, coupling_on_time=cfg.coupling_on_time,
                    kappa=ode_kappa(cfg) if cfg.population.model == "piecewise" else cfg.kappa)
    raster = traj.raster()
    write_raster(out / f"{tag}{cfg.output.raster}", raster)
    if cfg.output.trajectory:
        write_trajectory(out / f"{tag}{cfg.output.trajectory}", traj, cfg.output.trajectory_stride)
    return {
        "engine": "ode",
        "coupling": cov.as_dict(),
        "integrator": traj.meta,
        "spikes": len(raster),
        "dispersion": _dispersion_report(raster, graph.n, (cfg.coupling_on_time, math.inf)),
    }


def _box_init(models, rng):
    """Uniform over each neuron's domain box."""
    x0 = np.array([rng.uniform(*m.x_box) for m in models])
    v0 = np.array([rng.uniform(*m.v_box) for m in models])
    return x0, v0


def _run_check(cfg, models):
    graph = build_graph(cfg, len(models))
    cov = validate_coupling(graph, models)
    strong, isccs = strong_connectivity(graph)
    report = {
        "assumptions": [check_assumptions(m).as_dict() for m in models],
        "coupling": cov.as_dict(),
        "strongly_connected": strong,
        "isccs": isccs,
    }
    if cov.w1_failures():
        raise ValidationFailure(f"W1 violated for neurons {cov.w1_failures()}", report)
    return report


def _run_analyze(cfg, models):
    graph = build_graph(cfg, len(models))
    cov = _validate(models, graph)
    net = IFNetwork(models, graph, min_nodes=cfg.min_nodes)
    const = contraction_constants(models)
    mono, margin = check_monotonicity(const)
    exist = [existence_condition(net, j) for j in range(net.n)]
    report = {
        "assumptions": [check_assumptions(m).as_dict() for m in models],
        "coupling": cov.as_dict(),
        "constants": const.as_dict(),
        "monotone": mono,
        "monotone_margin": margin,
        "fast_roots": fast_roots(net),
        "existence": [{"root": e.root, "passed": e.passed, "layers": e.layers,
                       "in_fast_set": e.in_fast_set, "weak_limit": e.weak_limit} for e in exist],
        "global": global_conditions(net, const).as_dict(),
    }
    rng = _init_stream(cfg.seed)
    fps = []
    for _ in range(cfg.fixed_point_starts):
        try:
            fp = find_fixed_point(net, random_syn_point(net, rng))
            fps.append({"point": fp.point, "iterations": fp.iterations, "residual": fp.residual,
                        "tail_ratio": fp.tail_ratio, "rate": fp.rate})
        except SynapseSyncError as exc:
            fps.append({"error": type(exc).__name__, "detail": str(exc)})
    report["fixed_point"] = fps
    return report


def _fig1(cfg, out):
    """Two-neuron smooth pairs: identical, heterogeneous and diffusive."""
    base = smooth_neuron()
    other = smooth_neuron(0.25, 0.5, 4.0)
    sig = base.activation
    g2 = CouplingGraph(2, ((0, 1, 1.0), (1, 0, 1.0)), (cfg.g_coup,), (sig,), (), "pair")
    sub = dataclasses.replace(cfg, eps=cfg.fig1_eps, horizon=cfg.fig1_horizon,
                              coupling_on_time=cfg.fig1_coupling_on,
                              population=PopulationSpec(n=2, model="smooth"))
    report = {}
    for tag, models, mode in (("identical", [base, base], "synaptic"),
                              ("heterogeneous", [base, other], "synaptic"),
                              ("diffusive", [base, other], "diffusive")):
        run_cfg = dataclasses.replace(sub, coupling_mode=mode)
        report[tag] = _run_ode_pair(run_cfg, models, g2, out, f"{tag}_")
    return report


def _run_ode_pair(cfg, models, graph, out, tag):
    rng = _init_stream(cfg.seed)
    init = _box_init(models, rng)
    traj = simulate(models, graph, cfg.eps, cfg.horizon, init, dt=cfg.dt,
                    coupling_mode=cfg.coupling_mode, coupling_on_time=cfg.coupling_on_time)
    raster = traj.raster()
    write_raster(out / f"{tag}{cfg.output.raster}", raster)
    if cfg.output.trajectory:
        write_trajectory(out / f"{tag}{cfg.output.trajectory}", traj, cfg.output.trajectory_stride)
    return {"spikes": len(raster), "integrator": traj.meta,
            "dispersion": _dispersion_report(raster, 2, (cfg.coupling_on_time, math.inf))}


def _fig4(cfg, out):
    report = {}
    for tk in cfg.taus:
        models = build_models(cfg, tau_knee=float(tk))
        tag = f"tau{float(tk):g}_"
        run_cfg = cfg if cfg.n_cycles or cfg.horizon else dataclasses.replace(cfg, n_cycles=30)
        report[f"{float(tk):g}"] = _run_if(run_cfg, models, out, tag)
    return report


def run(cfg: ExperimentConfig, out_dir):
    """Dispatch one experiment; returns ``(exit_status, report)`` and writes artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"mode": cfg.mode, "seed": cfg.seed, "version": __version__,
              "config": dataclasses.asdict(cfg)}
    status = EXIT_OK
    try:
        if cfg.mode == "reproduce-fig1":
            report["runs"] = _fig1(cfg, out)
        else:
            if cfg.mode == "reproduce-fig4" and cfg.population.n < 1 and not cfg.population.neurons:
                raise ConfigError("reproduce-fig4 needs a population")
            models = build_models(cfg)
            if cfg.mode == "check":
                report.update(_run_check(cfg, models))
            elif cfg.mode == "analyze":
                report.update(_run_analyze(cfg, models))
            elif cfg.mode == "if":
                report.update(_run_if(cfg, models, out))
            elif cfg.mode == "ode":
                report.update(_run_ode(cfg, models, out))
            else:
                report["runs"] = _fig4(cfg, out)
    except ValidationFailure as exc:
        status = EXIT_INVALID
        report.update(exc.report)
        report["error"] = {"kind": "validation", "detail": str(exc)}
    except (ConfigError, DomainError) as exc:
        status = EXIT_INVALID
        report["error"] = {"kind": type(exc).__name__, "detail": str(exc)}
    except (NumericError, SynapseSyncError) as exc:
        status = EXIT_NUMERIC
        report["error"] = {"kind": type(exc).__name__, "detail": str(exc)}
    report["status"] = status
    write_report(out / cfg.output.report, report)
    return status, report


def main(argv=None):
    parser = argparse.ArgumentParser(prog="synapse-sync", description=__doc__.splitlines()[0])
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True, help="JSON experiment configuration")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--out", default=".", help="output directory")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.mode, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    status, report = run(cfg, args.out)
    if status != EXIT_OK:
        print(f"{report['error']['kind']}: {report['error']['detail']}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
