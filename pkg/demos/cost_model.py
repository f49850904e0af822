"""Walk through the analytical cost model on one small topology.

Shows the per-layer timing, how bottleneck balancing trades resources for
latency, and which point the energy target settles on.
"""

from streamnas import hwcost
from streamnas.topology import DSConv1D, Dense, GlobalAvgPool, MaxPool1D, Topology, infer_shapes

topo = Topology((DSConv1D(9, 2, 16), MaxPool1D(2), DSConv1D(5, 1, 32), GlobalAvgPool(), Dense(2)), 2, 512)
shapes = infer_shapes(topo)

print("per-layer timing at alpha = 1")
for layer, cost in zip(topo.layers, hwcost.topology_costs(topo, None, shapes)):
    print(f"  {layer.kind:8s} n_in={cost.n_in:4d} l={cost.l:6d} outputs={cost.outputs:4d} t_active={cost.t_active}")

print("\nbalancing trajectory (resources, cycles, energy)")
for unroll in hwcost.unroll_trajectory(topo, shapes):
    r = hwcost.evaluate(topo, unroll)
    print(f"  {unroll.resources:5d} {r.t_total_cycles:8d} {r.E_total:.3e} J")

for target in ("min_power", "min_energy", "max_throughput"):
    r = hwcost.evaluate(topo, hwcost.optimize_unrolling(topo, shapes, target))
    print(f"{target:15s} t={r.t_total_cycles} cycles P={r.P_total:.3f} W E={r.E_total:.3e} J")
