import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synapse_sync.errors import DomainError
from synapse_sync.network import (
    CouplingGraph,
    all_to_all_graph,
    firing_layerings,
    layered_indegree,
    min_tree_indegree,
    ring_graph,
    strong_connectivity,
    synaptic_drive,
    validate_coupling,
    w2_window,
)
from synapse_sync.neuron import Step, TanhSigmoid, piecewise_neuron


def test_ring_neighbourhoods():
    g = ring_graph(6, 2, 0.1)
    assert list(g.in_neighbors(0)[0]) == [1, 2]
    assert list(g.in_neighbors(5)[0]) == [0, 1]
    assert np.all(g.in_degree == 2)


@pytest.mark.parametrize("edges", [((0, 0, 1.0),), ((0, 1, 0.0),), ((0, 1, 1.0), (0, 1, 2.0)),
                                   ((0, 5, 1.0),)])
def test_bad_edges_rejected(edges):
    with pytest.raises(DomainError):
        CouplingGraph(3, edges, (0.1,))


def test_gain_broadcast_and_override():
    g = CouplingGraph(3, ((0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)), (0.2,))
    assert g.gains == (0.2, 0.2, 0.2)
    g2 = g.with_gains((0.1, 0.2, 0.3))
    assert g2.gains == (0.1, 0.2, 0.3) and g2.edges == g.edges
    with pytest.raises(DomainError):
        CouplingGraph(3, g.edges, (0.1, 0.2))


def test_synaptic_drive_sums_active_inputs():
    g = ring_graph(4, 2, 0.05, weight=2.0)
    v = np.array([-0.3, 0.2, 0.4, -0.1])
    assert synaptic_drive(g, 0, v) == pytest.approx(0.05 * 2.0 * 2)
    assert synaptic_drive(g, 1, v) == pytest.approx(0.05 * 2.0)
    assert synaptic_drive(g, 3, v) == pytest.approx(0.05 * 2.0)
    assert synaptic_drive(g, 2, v) == 0.0
    assert synaptic_drive(g, 2, v, smoothed=True, kappa=1e-3) < 1e-12


def test_w1_flags_overdriven_neuron():
    models = [piecewise_neuron(0.5, 2.0, 3.0)] * 4
    rep = validate_coupling(ring_graph(4, 3, 0.13), models)
    assert rep.w1_failures() == [0, 1, 2, 3]
    assert not rep.passed
    assert validate_coupling(ring_graph(4, 3, 0.12), models).passed


def test_w2_window_and_smooth_sigmoid_failure():
    mdl = piecewise_neuron(0.3, 1.75, 2.75)
    cut, th = w2_window(mdl)
    assert cut == pytest.approx(-0.1573, abs=1e-4) and th == 0.01
    g = ring_graph(3, 1, 0.1, sigmoid=TanhSigmoid(0.0, 0.15))
    rep = validate_coupling(g, [mdl] * 3)
    assert rep.w1_failures() == [] and not rep.passed


def _nx(graph):
    d = nx.DiGraph()
    d.add_nodes_from(range(graph.n))
    d.add_edges_from((j, i) for j, i, _ in graph.edges)
    return d


def _random_graph(n, p, seed):
    r = np.random.default_rng(seed)
    edges = [(j, i, 1.0) for j, i in itertools.permutations(range(n), 2) if r.random() < p]
    return CouplingGraph(n, tuple(edges), (0.01,))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.floats(0.05, 0.6), st.integers(0, 10_000))
def test_isccs_match_condensation(n, p, seed):
    g = _random_graph(n, p, seed)
    strong, isccs = strong_connectivity(g)
    d = _nx(g)
    cond = nx.condensation(d)
    want = sorted(sorted(cond.nodes[c]["members"]) for c in cond if cond.in_degree(c) == 0)
    assert isccs == want
    assert strong == nx.is_strongly_connected(d)


def test_two_disjoint_rings_have_two_isccs():
    edges = [(1, 0, 1.0), (0, 1, 1.0), (3, 2, 1.0), (2, 3, 1.0), (1, 4, 1.0)]
    strong, isccs = strong_connectivity(CouplingGraph(5, tuple(edges), (0.1,)))
    assert not strong and isccs == [[0, 1], [2, 3]]


def _brute_layerings(graph, root):
    """Ordered set partitions with root first, each member fed by the previous layer."""
    n = graph.n
    A = graph.weights
    others = [i for i in range(n) if i != root]
    out = []
    for labels in itertools.product(range(1, n), repeat=len(others)):
        depth = dict(zip(others, labels))
        depth[root] = 0
        used = sorted(set(depth.values()))
        if used != list(range(len(used))):
            continue
        if all(any(A[i, k] > 0 and depth[k] == depth[i] - 1 for k in range(n)) for i in others):
            layers = [sorted(i for i in range(n) if depth[i] == d) for d in used]
            out.append(layers)
    return sorted(out)


@pytest.mark.parametrize("graph", [ring_graph(5, 2, 0.1), ring_graph(4, 1, 0.1),
                                   all_to_all_graph(4, 0.1), _random_graph(5, 0.4, 3)])
def test_layerings_match_brute_force(graph):
    for root in range(graph.n):
        got = sorted([sorted(l) for l in lay] for lay in firing_layerings(graph, root))
        assert got == _brute_layerings(graph, root)


def test_ring_layering_count():
    assert sum(1 for _ in firing_layerings(ring_graph(5, 2, 0.1), 0)) == 8


def test_layered_indegree():
    g = ring_graph(4, 2, 0.1, weight=0.5)
    d = layered_indegree(g, [[0], [3, 2], [1]])
    # neuron i hears i+1 and i+2
    assert d.tolist() == [0.0, 1.0, 0.5, 0.5]


def _brute_min_indegree(graph, i):
    best = np.inf
    for root in range(graph.n):
        if root == i:
            continue
        for lay in firing_layerings(graph, root):
            best = min(best, layered_indegree(graph, lay)[i])
    return best


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 6), st.floats(0.3, 0.8), st.integers(0, 10_000))
def test_min_tree_indegree_matches_enumeration(n, p, seed):
    r = np.random.default_rng(seed)
    edges = [(j, i, float(r.choice([0.5, 1.0, 2.0]))) for j, i in itertools.permutations(range(n), 2)
             if r.random() < p]
    g = CouplingGraph(n, tuple(edges), (0.01,))
    if not strong_connectivity(g)[0]:
        return
    for i in range(n):
        val, exact = min_tree_indegree(g, i)
        assert exact and val == pytest.approx(_brute_min_indegree(g, i))


def test_min_tree_indegree_on_rings_and_complete_graphs():
    assert min_tree_indegree(ring_graph(6, 3, 0.1), 2) == (1.0, True)
    assert min_tree_indegree(all_to_all_graph(3, 0.1), 0) == (1.0, True)
    val, exact = min_tree_indegree(ring_graph(12, 3, 0.1, weight=0.7), 0, exact_limit=10)
    assert not exact and val == pytest.approx(0.7)
