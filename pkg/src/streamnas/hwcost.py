"""Analytical latency, power and energy models of the streaming pipeline.

Latency follows the pipelined fill recursion: a stage waits for its first
input window to fill at the upstream output rate, then needs ``l`` cycles per
output event, and the output rate propagates downstream as the slower of the
stage's own latency and the rate at which it receives fresh windows.

Power scales linearly in each layer's unroll factor and splits into an idle
part that burns for the whole runtime and a calculation part weighted by the
layer's duty cycle. Energy is runtime times power.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Sequence

from .errors import InvalidBudget, InvalidUnroll, ModelInconsistency
from .topology import (
    DSConv1D,
    Dense,
    GlobalAvgPool,
    LayerShape,
    LayerSpec,
    MaxPool1D,
    ShapeTrace,
    Topology,
    infer_shapes,
)

Objective = Literal["min_power", "min_energy", "max_throughput"]

# default total unroll resources for the max-alpha strategy, in alpha_pe*alpha_simd units
DEFAULT_BUDGET = 1024


@dataclass(frozen=True)
class LayerUnroll:
    alpha_pe: int = 1
    alpha_simd: int = 1

    @property
    def alpha(self) -> int:
        return self.alpha_pe * self.alpha_simd


@dataclass(frozen=True)
class UnrollConfig:
    layers: tuple[LayerUnroll, ...]
    batch_instances: int = 1

    @classmethod
    def ones(cls, n: int, batch_instances: int = 1) -> "UnrollConfig":
        return cls(tuple(LayerUnroll() for _ in range(n)), batch_instances)

    @property
    def resources(self) -> int:
        return sum(u.alpha for u in self.layers)

    def to_dict(self) -> dict:
        return {
            "batch_instances": self.batch_instances,
            "layers": [{"alpha_pe": u.alpha_pe, "alpha_simd": u.alpha_simd} for u in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UnrollConfig":
        return cls(
            tuple(LayerUnroll(int(u["alpha_pe"]), int(u["alpha_simd"])) for u in d["layers"]),
            int(d.get("batch_instances", 1)),
        )


@dataclass(frozen=True)
class LayerCost:
    """Per-layer timing in cycles.

    ``n_in`` is counted in upstream output events, ``stride`` is the number of
    fresh events consumed per output once the first window is full.
    """

    n_in: int
    l: int
    outputs: int
    stride: int = 1
    kind: str = "generic"

    @property
    def t_active(self) -> int:
        return self.outputs * self.l


@dataclass(frozen=True)
class UnitPower:
    p_idle_unit: float
    p_calc_unit: float


def _default_units() -> dict[str, UnitPower]:
    return {
        "dsconv": UnitPower(0.05, 0.20),
        "dense": UnitPower(0.05, 0.20),
        "maxpool": UnitPower(0.01, 0.02),
        "gap": UnitPower(0.01, 0.02),
        "generic": UnitPower(0.05, 0.20),
    }


@dataclass(frozen=True)
class CalibrationTable:
    units: dict[str, UnitPower] = field(default_factory=_default_units)
    p_board: float = 1.5
    clock_hz: float = 100e6

    def __post_init__(self):
        if self.clock_hz <= 0:
            raise ValueError("clock_hz must be positive")
        if self.p_board < 0 or any(u.p_idle_unit < 0 or u.p_calc_unit < 0 for u in self.units.values()):
            raise ValueError("calibration entries must be non-negative")

    def unit(self, kind: str) -> UnitPower:
        return self.units.get(kind, self.units.get("generic", UnitPower(0.0, 0.0)))

    def to_dict(self) -> dict:
        return {
            "units": {k: asdict(v) for k, v in sorted(self.units.items())},
            "p_board": self.p_board,
            "clock_hz": self.clock_hz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationTable":
        units = _default_units()
        for kind, v in d.get("units", {}).items():
            units[kind] = UnitPower(float(v["p_idle_unit"]), float(v["p_calc_unit"]))
        return cls(units, float(d.get("p_board", 1.5)), float(d.get("clock_hz", 100e6)))

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


DEFAULT_CALIBRATION = CalibrationTable()


CSV_FIELDS = (
    "t_total_cycles",
    "t_total_s",
    "P_total",
    "E_total",
    "throughput",
    "batch_instances",
    "resources",
    "p_board",
    "sigma",
    "alphas",
)


@dataclass(frozen=True)
class CostReport:
    t_total_cycles: int
    t_total_s: float
    sigma: tuple[int, ...]
    P_total: float
    E_total: float
    throughput: float
    batch_instances: int = 1
    resources: int = 0
    p_board: float = 0.0
    alphas: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma"] = list(self.sigma)
        d["alphas"] = list(self.alphas)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self) -> dict:
        d = self.to_dict()
        d["sigma"] = " ".join(map(str, self.sigma))
        d["alphas"] = " ".join(map(str, self.alphas))
        return {k: d[k] for k in CSV_FIELDS}

    @staticmethod
    def to_csv(reports: Iterable["CostReport"]) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.csv_row())
        return buf.getvalue()


def unroll_bounds(layer: LayerSpec, shape: LayerShape) -> tuple[int, int]:
    """Largest legal (alpha_pe, alpha_simd) for a layer."""
    c = shape.input_channels
    if isinstance(layer, DSConv1D):
        return layer.filters, c * layer.kernel_size
    if isinstance(layer, MaxPool1D):
        return c, 1
    if isinstance(layer, GlobalAvgPool):
        return c, shape.input_width
    if isinstance(layer, Dense):
        return layer.units, shape.input_width * c
    raise TypeError(f"unknown layer {layer!r}")


def layer_latency(layer: LayerSpec, shape: LayerShape, unroll: LayerUnroll = LayerUnroll()) -> LayerCost:
    pe_max, simd_max = unroll_bounds(layer, shape)
    pe, simd = unroll.alpha_pe, unroll.alpha_simd
    if not (1 <= pe <= pe_max and 1 <= simd <= simd_max):
        raise InvalidUnroll(
            f"{layer.kind}: alpha_pe={pe} (max {pe_max}), alpha_simd={simd} (max {simd_max})"
        )
    c = shape.input_channels
    if isinstance(layer, DSConv1D):
        l = math.ceil(layer.filters / pe) * math.ceil(c * layer.kernel_size / simd)
        # left padding is pre-filled, so fewer real values are needed for the first window
        n_in = max(1, layer.kernel_size - layer.padding)
        return LayerCost(n_in, l, shape.output_width, layer.stride, layer.kind)
    if isinstance(layer, MaxPool1D):
        l = math.ceil(c / pe) * layer.stride
        return LayerCost(layer.stride, l, shape.output_width, layer.stride, layer.kind)
    if isinstance(layer, GlobalAvgPool):
        l = math.ceil(c / pe) * math.ceil(shape.input_width / simd)
        return LayerCost(shape.input_width, l, 1, 1, layer.kind)
    if isinstance(layer, Dense):
        n_in_values = shape.input_width * c
        l = math.ceil(layer.units / pe) * math.ceil(n_in_values / simd)
        # one upstream event per input position; after GAP the whole vector is one event
        return LayerCost(shape.input_width, l, 1, 1, layer.kind)
    raise TypeError(f"unknown layer {layer!r}")


def topology_costs(topology: Topology, unroll: UnrollConfig | None = None,
                   shapes: ShapeTrace | None = None) -> list[LayerCost]:
    shapes = infer_shapes(topology) if shapes is None else shapes
    unroll = UnrollConfig.ones(len(topology.layers)) if unroll is None else unroll
    if len(unroll.layers) != len(topology.layers):
        raise InvalidUnroll(f"{len(unroll.layers)} unroll entries for {len(topology.layers)} layers")
    return [layer_latency(l, s, u) for l, s, u in zip(topology.layers, shapes, unroll.layers)]


def chain_costs(stages: Sequence[tuple[int, int]], final_outputs: int = 1) -> list[LayerCost]:
    """Unit-stride cost list from ``(n_in, l)`` pairs.

    Output counts are filled in backwards so that every stage produces exactly
    what its successor consumes.
    """
    outputs = [0] * len(stages)
    outputs[-1] = final_outputs
    for j in range(len(stages) - 2, -1, -1):
        outputs[j] = outputs[j + 1] - 1 + stages[j + 1][0]
    return [LayerCost(n, l, o) for (n, l), o in zip(stages, outputs)]


def pipeline_latency(costs: Sequence[LayerCost], sigma0: int = 1,
                     stride_aware: bool = True) -> tuple[int, list[int]]:
    """Total cycles for one sample and the per-stage output rates.

    ``sigma_j = max(l_j, s_j * sigma_{j-1})`` with ``s_j`` the stage's stride;
    ``stride_aware=False`` forces ``s_j = 1``, which ignores that a strided
    stage must wait for ``s_j`` fresh inputs between outputs.

    The result is the completion time of the slowest output stream. For a
    classifier this is the last stage's first (and only) output, i.e. the sum
    of fill terms; the maximum only matters when an upstream stage emits
    trailing outputs its successor never consumes.
    """
    if not costs:
        raise ValueError("empty pipeline")
    if sigma0 < 1:
        raise ValueError("sigma0 must be >= 1")
    prev = sigma0
    first_out = 0
    finish = 0
    sigmas = []
    for c in costs:
        first_out += (c.n_in - 1) * prev + c.l
        s = c.stride if stride_aware else 1
        sig = max(c.l, s * prev)
        sigmas.append(sig)
        finish = max(finish, first_out + (c.outputs - 1) * sig)
        prev = sig
    return finish, sigmas


def total_power(costs: Sequence[LayerCost], unroll: UnrollConfig,
                calib: CalibrationTable, t_total: float) -> float:
    """Effective power of the design, board power excluded."""
    p = 0.0
    for c, u in zip(costs, unroll.layers, strict=True):
        if c.t_active > t_total:
            raise ModelInconsistency(f"active time {c.t_active} exceeds total {t_total}")
        unit = calib.unit(c.kind)
        p += u.alpha * unit.p_idle_unit + u.alpha * (c.t_active / t_total) * unit.p_calc_unit
    return p


def idle_power(unroll: UnrollConfig, costs: Sequence[LayerCost], calib: CalibrationTable) -> float:
    return sum(u.alpha * calib.unit(c.kind).p_idle_unit for c, u in zip(costs, unroll.layers))


def total_energy(t_total_s: float, p_total: float) -> float:
    return t_total_s * p_total


def total_energy_decomposed(costs: Sequence[LayerCost], unroll: UnrollConfig,
                            calib: CalibrationTable, t_total_cycles: float) -> float:
    """Energy summed per layer: idle over the full runtime plus calc over active time."""
    inv_clk = 1.0 / calib.clock_hz
    e = 0.0
    for c, u in zip(costs, unroll.layers, strict=True):
        unit = calib.unit(c.kind)
        e += u.alpha * t_total_cycles * inv_clk * unit.p_idle_unit
        e += u.alpha * c.t_active * inv_clk * unit.p_calc_unit
    return e


def throughput(batch: int, t_total_s: float) -> float:
    return batch / t_total_s


def cost_report(costs: Sequence[LayerCost], unroll: UnrollConfig,
                calib: CalibrationTable = DEFAULT_CALIBRATION, sigma0: int = 1) -> CostReport:
    cycles, sigmas = pipeline_latency(costs, sigma0)
    t_s = cycles / calib.clock_hz
    p = total_power(costs, unroll, calib, cycles)
    return CostReport(
        t_total_cycles=cycles,
        t_total_s=t_s,
        sigma=tuple(sigmas),
        P_total=p,
        E_total=total_energy(t_s, p),
        throughput=throughput(unroll.batch_instances, t_s),
        batch_instances=unroll.batch_instances,
        resources=unroll.resources,
        p_board=calib.p_board,
        alphas=tuple(u.alpha for u in unroll.layers),
    )


def evaluate(topology: Topology, unroll: UnrollConfig | None = None,
             calib: CalibrationTable = DEFAULT_CALIBRATION, sigma0: int = 1) -> CostReport:
    shapes = infer_shapes(topology)
    unroll = UnrollConfig.ones(len(topology.layers)) if unroll is None else unroll
    return cost_report(topology_costs(topology, unroll, shapes), unroll, calib, sigma0)


def alpha_grid(bound: int) -> list[int]:
    """Legal unroll factors along one axis: the divisors of the loop bound."""
    return [a for a in range(1, bound + 1) if bound % a == 0]


def _next_on_grid(value: int, bound: int) -> int | None:
    for a in alpha_grid(bound):
        if a > value:
            return a
    return None


def unroll_trajectory(topology: Topology, shapes: ShapeTrace | None = None,
                      budget: int = DEFAULT_BUDGET, batch_instances: int = 1) -> list[UnrollConfig]:
    """Configurations visited by bottleneck balancing, starting from all ones.

    The bottleneck is the layer with the largest active time per sample
    (``outputs * l``, lowest index on ties); with strided layers the largest
    per-output latency alone does not identify the rate-limiting stage. Each
    step moves the bottleneck's ``alpha_pe`` to the next divisor of its bound,
    or ``alpha_simd`` once ``alpha_pe`` is exhausted. The walk ends when the
    next step would exceed ``budget`` or the bottleneck is fully unrolled.
    """
    shapes = infer_shapes(topology) if shapes is None else shapes
    n = len(topology.layers)
    if budget < n:
        raise InvalidBudget(f"budget {budget} cannot afford alpha=1 on {n} layers")
    config = [LayerUnroll() for _ in range(n)]
    bounds = [unroll_bounds(l, s) for l, s in zip(topology.layers, shapes)]
    active = [layer_latency(l, s).t_active for l, s in zip(topology.layers, shapes)]
    used = n
    visited = [UnrollConfig(tuple(config), batch_instances)]
    while True:
        b = max(range(n), key=lambda i: (active[i], -i))
        u = config[b]
        pe_max, simd_max = bounds[b]
        nxt = _next_on_grid(u.alpha_pe, pe_max)
        if nxt is not None:
            cand = replace(u, alpha_pe=nxt)
        else:
            nxt = _next_on_grid(u.alpha_simd, simd_max)
            if nxt is None:
                break
            cand = replace(u, alpha_simd=nxt)
        if used - u.alpha + cand.alpha > budget:
            break
        used += cand.alpha - u.alpha
        config[b] = cand
        active[b] = layer_latency(topology.layers[b], shapes[b], cand).t_active
        visited.append(UnrollConfig(tuple(config), batch_instances))
    return visited


def optimize_unrolling(topology: Topology, shapes: ShapeTrace | None = None,
                       objective: Objective = "min_energy", budget: int = DEFAULT_BUDGET,
                       batch_instances: int = 1,
                       calib: CalibrationTable = DEFAULT_CALIBRATION) -> UnrollConfig:
    """Pick unroll factors for one of the three implementation targets.

    ``min_power`` keeps every factor at one. The other objectives walk the
    bottleneck-balancing trajectory (see :func:`unroll_trajectory`) and return
    its best point: lowest energy for ``min_energy``, the earliest point of
    lowest latency for ``max_throughput``. Balancing past the point where the
    input stream limits the runtime only adds idle power, which is why the
    energy target does not simply spend the whole budget.
    """
    shapes = infer_shapes(topology) if shapes is None else shapes
    n = len(topology.layers)
    if budget < n:
        raise InvalidBudget(f"budget {budget} cannot afford alpha=1 on {n} layers")
    if objective == "min_power":
        return UnrollConfig.ones(n, batch_instances)
    if objective not in ("min_energy", "max_throughput"):
        raise ValueError(f"unknown objective {objective!r}")
    path = unroll_trajectory(topology, shapes, budget, batch_instances)
    reports = [evaluate(topology, u, calib) for u in path]
    if objective == "min_energy":
        key = [r.E_total for r in reports]
    else:
        key = [r.t_total_cycles for r in reports]
    return path[key.index(min(key))]
