"""Directed coupling graphs, synaptic drive and graph-theoretic checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DomainError
from .neuron import Step, TanhSigmoid, compute_geometry


@dataclass(frozen=True)
class CouplingGraph:
    """Weighted digraph; edge ``(j, i, alpha)`` means j drives i with weight alpha.

    ``sigmoids[i]`` is the presynaptic sigmoid used on every edge into ``i``
    unless ``edge_sigmoids`` maps ``(j, i)`` to an override.
    """

    n: int
    edges: tuple
    gains: tuple
    sigmoids: tuple = None
    edge_sigmoids: tuple = ()
    generator: str = ""

    def __post_init__(self):
        if self.n < 1:
            raise DomainError("graph needs at least one neuron")
        edges = tuple((int(j), int(i), float(a)) for j, i, a in self.edges)
        seen = set()
        for j, i, a in edges:
            if not (0 <= j < self.n and 0 <= i < self.n):
                raise DomainError(f"edge ({j}, {i}) references a missing neuron")
            if i == j:
                raise DomainError(f"self-loop on neuron {i}")
            if a <= 0:
                raise DomainError(f"edge ({j}, {i}) has nonpositive weight {a}")
            if (j, i) in seen:
                raise DomainError(f"duplicate edge ({j}, {i})")
            seen.add((j, i))
        gains = tuple(float(g) for g in self.gains)
        if len(gains) == 1 and self.n > 1:
            gains = gains * self.n
        if len(gains) != self.n or min(gains) <= 0:
            raise DomainError("need one positive gain per neuron")
        sig = self.sigmoids if self.sigmoids is not None else (Step(0.0),) * self.n
        if len(sig) == 1 and self.n > 1:
            sig = tuple(sig) * self.n
        if len(sig) != self.n:
            raise DomainError("need one sigmoid per target neuron")
        object.__setattr__(self, "edges", tuple(sorted(edges, key=lambda e: (e[1], e[0]))))
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "sigmoids", tuple(sig))
        object.__setattr__(self, "edge_sigmoids", tuple(sorted(self.edge_sigmoids,
                                                               key=lambda e: (e[0], e[1]))))

    @cached_property
    def weights(self):
        """Dense matrix ``A[i, j] = alpha_ij``."""
        A = np.zeros((self.n, self.n))
        for j, i, a in self.edges:
            A[i, j] = a
        return A

    @cached_property
    def in_degree(self):
        return self.weights.sum(axis=1)

    @cached_property
    def _in_lists(self):
        A = self.weights
        return [(np.nonzero(A[i])[0], A[i][np.nonzero(A[i])[0]]) for i in range(self.n)]

    def in_neighbors(self, i):
        """``(indices, weights)`` of the presynaptic neighbours of ``i``."""
        return self._in_lists[i]

    def sigmoid(self, j, i):
        for jj, ii, s in self.edge_sigmoids:
            if (jj, ii) == (j, i):
                return s
        return self.sigmoids[i]

    def with_gains(self, gains):
        return CouplingGraph(self.n, self.edges, gains if np.ndim(gains) else (gains,),
                             self.sigmoids, self.edge_sigmoids, self.generator)


def ring_graph(n, k, gain, weight=1.0, sigmoid=None):
    """Neuron i receives from i+1, ..., i+k (mod n)."""
    if not 1 <= k < n:
        raise DomainError("ring needs 1 <= k < n")
    edges = [((i + s) % n, i, weight) for i in range(n) for s in range(1, k + 1)]
    return CouplingGraph(n, tuple(edges), (gain,), (sigmoid or Step(0.0),), (), f"ring{k}")


def all_to_all_graph(n, gain, weight=1.0, sigmoid=None):
    edges = [(j, i, weight) for i in range(n) for j in range(n) if i != j]
    return CouplingGraph(n, tuple(edges), (gain,), (sigmoid or Step(0.0),), (), "all-to-all")


def synaptic_drive(graph, i, v, smoothed=False, kappa=1e-3):
    """``g_i * sum_j alpha_ij S_ij(v_j)``; exact steps unless ``smoothed``."""
    v = np.asarray(v, dtype=float)
    idx, w = graph.in_neighbors(i)
    total = 0.0
    for j, a in zip(idx, w):
        s = graph.sigmoid(int(j), i)
        total += a * float(s.smooth(v[j], kappa) if smoothed else s(v[j]))
    return graph.gains[i] * total


@dataclass
class CouplingReport:
    w1: list
    w2: list
    windows: list

    @property
    def passed(self):
        return all(ok for _, ok, _ in self.w1) and all(ok for _, _, ok, _ in self.w2)

    def w1_failures(self):
        return [i for i, ok, _ in self.w1 if not ok]

    def as_dict(self):
        return {
            "passed": bool(self.passed),
            "w1": [{"neuron": i, "passed": bool(ok), "drive": val} for i, ok, val in self.w1],
            "w2_failures": [{"edge": [j, i], "detail": d} for j, i, ok, d in self.w2 if not ok],
            "windows": [list(w) for w in self.windows],
        }


def w2_window(model, levels=50):
    """``(max_m v_left(m), threshold)``: the sigmoid must be 0 below and 1 above."""
    cut = max(compute_geometry(model, m).v_left for m in np.linspace(0, model.margin, levels))
    return cut, model.threshold


def validate_coupling(graph, models, levels=50, probes=200):
    """Weak-coupling (W1) and sigmoid-window (W2) checks; never raises on failure."""
    if len(models) != graph.n:
        raise DomainError("one model per neuron required")
    w1 = []
    for i, mdl in enumerate(models):
        drive = graph.gains[i] * graph.in_degree[i]
        w1.append((i, bool(drive <= mdl.margin * (1 + 1e-12)), float(drive)))
    windows = [w2_window(m, levels) for m in models]
    w2 = []
    for j, i, _ in graph.edges:
        s = graph.sigmoid(j, i)
        cut, th = windows[j]
        v0, v1 = models[j].v_box
        low = np.linspace(v0, cut, probes)
        high = np.linspace(th, v1, probes)
        lo_ok = np.all(np.asarray(s(low)) == 0.0)
        hi_ok = np.all(np.asarray(s(high)) == 1.0)
        detail = "" if lo_ok and hi_ok else (
            "nonzero at or below the cutoff" if not lo_ok else "below one at or above threshold")
        w2.append((j, i, bool(lo_ok and hi_ok), detail))
    return CouplingReport(w1, w2, windows)


def strong_connectivity(graph):
    """``(strongly_connected, iSCCs)``; iSCCs are sorted lists of neuron ids."""
    A = csr_matrix(graph.weights.T > 0)  # row j -> column i for edge j -> i
    count, labels = connected_components(A, directed=True, connection="strong")
    fed = np.zeros(count, dtype=bool)
    for j, i, _ in graph.edges:
        if labels[j] != labels[i]:
            fed[labels[i]] = True
    comps = [sorted(np.nonzero(labels == c)[0].tolist()) for c in range(count) if not fed[c]]
    return count == 1, sorted(comps)


def _reach_through(graph, start_mask, allowed_mask):
    """Nodes reachable from ``start_mask`` via edges into ``allowed_mask``."""
    out = [0] * graph.n
    for j, i, _ in graph.edges:
        out[j] |= 1 << i
    seen, frontier = 0, start_mask
    while frontier:
        nxt = 0
        k = frontier
        while k:
            b = k & -k
            nxt |= out[b.bit_length() - 1]
            k ^= b
        nxt &= allowed_mask & ~seen
        seen |= nxt
        frontier = nxt
    return seen


def _candidates(graph, last_mask, placed_mask):
    cand = 0
    for j, i, _ in graph.edges:
        if last_mask >> j & 1 and not placed_mask >> i & 1:
            cand |= 1 << i
    return cand


def _subsets(mask):
    sub = mask
    while sub:
        yield sub
        sub = (sub - 1) & mask


def firing_layerings(graph, root):
    """Every spanning layering rooted at ``root``: each layer member has an
    in-neighbour in the previous layer.  Exponential; for small graphs."""
    full = (1 << graph.n) - 1

    def rec(placed, last, layers):
        if placed == full:
            yield [list(l) for l in layers]
            return
        rest = full & ~placed
        if _reach_through(graph, last, rest) != rest:
            return
        for sub in _subsets(_candidates(graph, last, placed)):
            layer = [b for b in range(graph.n) if sub >> b & 1]
            yield from rec(placed | sub, sub, layers + [layer])

    yield from rec(1 << root, 1 << root, [[root]])


def layered_indegree(graph, layers):
    """``dbar_i``: in-weight from strictly earlier layers, per neuron."""
    depth = np.empty(graph.n, dtype=int)
    for d, layer in enumerate(layers):
        depth[layer] = d
    A = graph.weights
    return np.array([A[i][depth < depth[i]].sum() for i in range(graph.n)])


def min_tree_indegree(graph, i, exact_limit=10):
    """``(dbar_min_i, exact)``: least in-weight neuron ``i`` can collect from
    earlier layers over all firing layerings with another root.

    Beyond ``exact_limit`` neurons the conservative bound ``min_k alpha_ik`` is
    returned with ``exact = False``.
    """
    idx, w = graph.in_neighbors(i)
    if len(idx) == 0:
        return 0.0, True
    bound = float(w.min())
    if graph.n > exact_limit:
        return bound, False
    A = graph.weights
    full = (1 << graph.n) - 1
    best = np.inf
    seen = set()

    def weight_from(mask):
        return sum(A[i, b] for b in range(graph.n) if mask >> b & 1)

    def rec(placed, last):
        nonlocal best
        key = (placed, last)
        if key in seen:
            return
        seen.add(key)
        if weight_from(placed) >= best:
            return
        rest = full & ~placed
        if _reach_through(graph, last, rest) != rest:
            return
        cand = _candidates(graph, last, placed)
        for sub in _subsets(cand):
            if sub >> i & 1:
                nxt = placed | sub
                rest2 = full & ~nxt
                if _reach_through(graph, sub, rest2) == rest2:
                    best = min(best, weight_from(placed))
            else:
                rec(placed | sub, sub)

    order = sorted(range(graph.n), key=lambda j: (A[i, j] == 0, A[i, j]))
    for root in order:
        if root != i:
            rec(1 << root, 1 << root)
    return float(best), True
