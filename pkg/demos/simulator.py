"""Compare the closed-form latency with the cycle-level FIFO simulation."""

import numpy as np

from streamnas import hwcost, pipesim
from streamnas.topology import DEFAULT_SPACE, decode, infer_shapes, random_genome

# the two-stage case that can be checked by hand: 15 cycles
hand = hwcost.chain_costs([(3, 2), (4, 5)])
print("hand case:", hwcost.pipeline_latency(hand)[0], "model,", pipesim.simulate_costs(hand).total_cycles, "simulated")

rng = np.random.default_rng(0)
for _ in range(5):
    topo = decode(random_genome(DEFAULT_SPACE, rng, 2, 256, max_active=5))
    shapes = infer_shapes(topo)
    unroll = hwcost.optimize_unrolling(topo, shapes, "max_throughput")
    costs = hwcost.topology_costs(topo, unroll, shapes)
    model, _ = hwcost.pipeline_latency(costs)
    sim = pipesim.simulate(topo, shapes, costs=costs)
    duty = " ".join(f"{d:.2f}" for d in pipesim.active_time_report(sim))
    print(f"{len(topo.layers)} layers: model {model} sim {sim.total_cycles} duty [{duty}]")
