"""Event-driven simulation of the streaming layer pipeline.

Each stage owns an input FIFO of ``fifo_depth`` events. A stage fires when
its FIFO holds a full window, it is idle, and its output FIFO has a free
slot; the firing lasts ``l`` cycles, after which one output event lands in
the downstream FIFO. Conv and pool stages drop ``stride`` events per firing
and keep the rest of the window for the overlap; GAP and dense stages take
their whole window. The source pushes one input position every ``sigma0``
cycles, all channels together, starting at cycle 0.

The analytical recursion in :mod:`streamnas.hwcost` assumes every stage emits
at a fixed period from its first output. Here that period emerges from the
event schedule, so disagreements show up as:

* padding: right-padding positions are free virtual values, so the last few
  outputs of a padded conv arrive faster than the steady-state period;
* backpressure: FIFOs shallower than a stage's backlog stall the upstream
  stages, which the analytical model does not represent;
* ``stride_aware=False`` in the analytical model, which ignores that strided
  stages wait for ``stride`` fresh inputs between outputs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

from .errors import Deadlock
from .hwcost import LayerCost, UnrollConfig, topology_costs
from .topology import DSConv1D, Dense, GlobalAvgPool, MaxPool1D, ShapeTrace, Topology, infer_shapes


@dataclass(frozen=True)
class Stage:
    window: int
    consume: int
    latency: int
    outputs: int
    left_pad: int = 0
    right_pad: int = 0


@dataclass
class StageState:
    buffer_fill: int = 0
    next_ready_cycle: int | None = None
    produced: int = 0
    fired: int = 0
    busy_cycles: int = 0
    idle_cycles: int = 0


@dataclass(frozen=True)
class SimResult:
    total_cycles: int
    busy_cycles: tuple[int, ...]
    idle_cycles: tuple[int, ...]
    produced: tuple[int, ...]
    fifo_high_water: tuple[int, ...]
    trace: tuple[tuple[int, int, str], ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "total_cycles": self.total_cycles,
            "busy_cycles": list(self.busy_cycles),
            "idle_cycles": list(self.idle_cycles),
            "produced": list(self.produced),
            "fifo_high_water": list(self.fifo_high_water),
        }


def stages_from_topology(topology: Topology, costs: Sequence[LayerCost],
                         shapes: ShapeTrace | None = None) -> tuple[list[Stage], int]:
    """Stages plus the number of input positions the source emits."""
    shapes = infer_shapes(topology) if shapes is None else shapes
    stages = []
    for layer, shape, c in zip(topology.layers, shapes, costs, strict=True):
        if isinstance(layer, DSConv1D):
            st = Stage(layer.kernel_size, layer.stride, c.l, c.outputs, layer.padding, layer.padding)
        elif isinstance(layer, MaxPool1D):
            st = Stage(layer.stride, layer.stride, c.l, c.outputs)
        elif isinstance(layer, (GlobalAvgPool, Dense)):
            st = Stage(shape.input_width, shape.input_width, c.l, c.outputs)
        else:
            raise TypeError(f"unknown layer {layer!r}")
        stages.append(st)
    return stages, topology.input_length


def stages_from_costs(costs: Sequence[LayerCost]) -> tuple[list[Stage], int]:
    """Generic stages that slide by ``stride``; the source emits just enough input."""
    stages = [Stage(c.n_in, c.stride, c.l, c.outputs) for c in costs]
    first = costs[0]
    return stages, (first.outputs - 1) * first.stride + first.n_in


def default_fifo_depth(stages: Sequence[Stage]) -> int:
    return max(s.window for s in stages)


def simulate_stages(stages: Sequence[Stage], source_length: int, fifo_depth: int | None = None,
                    sigma0: int = 1, trace: bool = False) -> SimResult:
    if fifo_depth is None:
        fifo_depth = default_fifo_depth(stages)
    if fifo_depth < 1:
        raise ValueError("fifo_depth must be >= 1")
    if sigma0 < 1:
        raise ValueError("sigma0 must be >= 1")
    n = len(stages)
    states = [StageState(buffer_fill=s.left_pad) for s in stages]
    high = [s.left_pad for s in stages]
    events: list[tuple[int, int, str]] = []
    emitted = 0
    src_next = 0
    t = 0
    finish = 0

    def push(j: int, count: int = 1):
        states[j].buffer_fill += count
        high[j] = max(high[j], states[j].buffer_fill)

    while True:
        changed = True
        while changed:
            changed = False
            for j, st in enumerate(states):
                if st.next_ready_cycle == t:
                    st.next_ready_cycle = None
                    st.produced += 1
                    finish = max(finish, t)
                    if trace:
                        events.append((t, j, "emit"))
                    if j + 1 < n:
                        push(j + 1)
                        if st.produced == stages[j].outputs:
                            push(j + 1, stages[j + 1].right_pad)
                    changed = True
            if emitted < source_length and src_next <= t and states[0].buffer_fill < fifo_depth:
                push(0)
                emitted += 1
                src_next = t + sigma0
                if trace:
                    events.append((t, -1, "emit"))
                if emitted == source_length:
                    push(0, stages[0].right_pad)
                changed = True
            for j, (s, st) in enumerate(zip(stages, states)):
                if st.next_ready_cycle is not None or st.fired == s.outputs:
                    continue
                if st.buffer_fill < s.window:
                    continue
                if j + 1 < n and states[j + 1].buffer_fill >= fifo_depth:
                    continue
                st.buffer_fill -= s.consume
                st.fired += 1
                st.busy_cycles += s.latency
                st.next_ready_cycle = t + s.latency
                if trace:
                    events.append((t, j, "fire"))
                changed = True

        if all(st.fired == s.outputs and st.next_ready_cycle is None for s, st in zip(stages, states)):
            break
        pending = [st.next_ready_cycle for st in states if st.next_ready_cycle is not None]
        if emitted < source_length and states[0].buffer_fill < fifo_depth:
            pending.append(max(src_next, t + 1))
        if not pending:
            # edge j is the FIFO into stage j; report one that is full yet short of a window
            starved = [j for j, (s, st) in enumerate(zip(stages, states))
                       if st.buffer_fill >= fifo_depth and st.buffer_fill < s.window]
            unfinished = [j for j, (s, st) in enumerate(zip(stages, states)) if st.fired < s.outputs]
            raise Deadlock((starved or unfinished)[0], t)
        t = min(pending)

    for st in states:
        st.idle_cycles = finish - st.busy_cycles
    return SimResult(
        total_cycles=finish,
        busy_cycles=tuple(st.busy_cycles for st in states),
        idle_cycles=tuple(st.idle_cycles for st in states),
        produced=tuple(st.produced for st in states),
        fifo_high_water=tuple(high),
        trace=tuple(events),
    )


def simulate(topology: Topology, shapes: ShapeTrace | None = None, unroll: UnrollConfig | None = None,
             costs: Sequence[LayerCost] | None = None, fifo_depth: int | None = None,
             sigma0: int = 1, trace: bool = False) -> SimResult:
    shapes = infer_shapes(topology) if shapes is None else shapes
    if costs is None:
        costs = topology_costs(topology, unroll, shapes)
    stages, length = stages_from_topology(topology, costs, shapes)
    return simulate_stages(stages, length, fifo_depth, sigma0, trace)


def simulate_costs(costs: Sequence[LayerCost], fifo_depth: int | None = None,
                   sigma0: int = 1, trace: bool = False) -> SimResult:
    stages, length = stages_from_costs(costs)
    return simulate_stages(stages, length, fifo_depth, sigma0, trace)


def active_time_report(result: SimResult) -> list[float]:
    """Measured duty cycle (busy / total) per stage."""
    return [b / result.total_cycles for b in result.busy_cycles]


def trace_csv(result: SimResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cycle", "stage", "event"])
    w.writerows(result.trace)
    return buf.getvalue()
