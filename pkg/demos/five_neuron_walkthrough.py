"""Walk through the convergence analysis of a small heterogeneous ring.

    python demos/five_neuron_walkthrough.py

Five neurons drawn from the conductance box (seed 4), each listening to its
two forward neighbours with gain 0.04.  Prints the compression constants,
which neurons can lead a synchronous spike, and how fast the cycle map pulls
two jump points together.
"""
import numpy as np

from synapse_sync.analysis import (
    check_monotonicity,
    contraction_constants,
    existence_condition,
    fast_roots,
    find_fixed_point,
    phase_metric,
    random_syn_point,
)
from synapse_sync.cli import FAMILY_RANGES, SplitMix64, seeded_population
from synapse_sync.ifsim import IFNetwork, cycle_map
from synapse_sync.network import ring_graph, strong_connectivity
from synapse_sync.neuron import piecewise_neuron


def main():
    pars = seeded_population(FAMILY_RANGES, 4, 5)
    models = [piecewise_neuron(*p) for p in pars]
    net = IFNetwork(models, ring_graph(5, 2, 0.04))
    for i, p in enumerate(pars):
        print(f"neuron {i}: g_L={p[0]:.3f} g_Ca={p[1]:.3f} g_K={p[2]:.3f}  "
              f"free period {net.periods[i]:.3f}")
    print("strongly connected:", strong_connectivity(net.graph)[0])

    cc = contraction_constants(models)
    ok, margin = check_monotonicity(cc)
    print(f"c_sf={cc.c_sf:.4f} c_fs={cc.c_fs:.4f} r_bar={cc.r_bar:.3f} "
          f"product={cc.product:.4f}  monotone: {ok} (margin {margin:.3f})")

    for j in fast_roots(net):
        res = existence_condition(net, j)
        print(f"root {j}: recruits everyone: {res.passed}, layers {res.layers}")

    rng = SplitMix64(1)
    p, q = random_syn_point(net, rng), random_syn_point(net, rng)
    print("\ncycle   d(p, q)     ratio")
    d0 = phase_metric(net, p, q)
    for k in range(6):
        p, q = cycle_map(net, p)[0], cycle_map(net, q)[0]
        d = phase_metric(net, p, q)
        print(f"{k + 1:>5}   {d:.3e}   {d / d0:.4f}")
        d0 = d
        if d < 1e-13:
            break

    fp = find_fixed_point(net, random_syn_point(net, rng))
    lag = net.phase(fp.point)
    print(f"\nfixed point after {fp.iterations} cycles; phase lags {np.round(lag, 4)}")
    print(f"linearized rate {fp.rate:.4f} (bound {cc.product:.4f})")


if __name__ == "__main__":
    main()
