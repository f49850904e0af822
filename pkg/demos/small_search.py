"""A short evolutionary search; prints the resulting Pareto front."""

from streamnas.data import generate_synthetic
from streamnas.nas import SearchConfig, pick, run_search
from streamnas.topology import decode
from streamnas.trainer import TrainConfig

ds = generate_synthetic(300, 256, seed=0)
config = SearchConfig(generations=3, children_per_generation=6, initial_random=6,
                      objectives=("energy_max", "neg_detection", "false_alarm"), train=TrainConfig(epochs=4))
result = run_search(config, ds, on_generation=lambda gen, archive: print(f"generation {gen}: {len(archive)} members"))

for m in result.archive.sorted_members():
    print(f"id {m.id:3d} E_max {m.cheap.values['energy_max']:.3e} J "
          f"detection {-m.expensive['neg_detection']:.3f} false alarm {m.expensive['false_alarm']:.3f}")
best = pick(result.archive, "energy_max")
print(f"lowest-energy pick, members within the hard limits first: id {best.id}",
      [layer.kind for layer in decode(best.genome).layers])
