"""Train a small network on synthetic data, then profile fixed-point formats."""

from streamnas.data import generate_synthetic
from streamnas.quantprofiler import accuracy_drift, assign_bits, profile
from streamnas.topology import DSConv1D, Dense, GlobalAvgPool, Topology
from streamnas.trainer import TrainConfig, train

ds = generate_synthetic(600, 512, seed=0)
topo = Topology((DSConv1D(9, 2, 32), DSConv1D(5, 2, 16), GlobalAvgPool(), Dense(2)), 2, 512)
params, metrics = train(topo, ds, TrainConfig(epochs=10))
print(f"validation detection {metrics.detection_rate:.3f}, false alarm {metrics.false_alarm_rate:.3f}")

x_cal, _ = ds.subset("train")
x_te, y_te = ds.subset("test")
prof = profile(params, topo, x_cal)
for bits in (8, 12, 16, 32):
    print(f"{bits:2d} bits: accuracy drift {accuracy_drift(params, topo, assign_bits(prof, bits), x_te, y_te):.4f}")
