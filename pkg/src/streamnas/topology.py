"""Layer vocabulary, genome encoding with dormant genes, and shape inference.

A genome is a fixed number of slots. Each slot always carries a fully
specified layer, but only *active* slots reach the decoded network; dormant
slots keep drifting under mutation and can be switched back on later. Every
decoded network ends in the same fixed tail (global average pooling, then a
dense classifier) which is not part of the genome.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace
from typing import Any, Union

import numpy as np

from .errors import InvalidGenome, ShapeCollapse

BIT_WIDTHS = (4, 8, 16, 32)


@dataclass(frozen=True)
class DSConv1D:
    kernel_size: int
    stride: int
    filters: int
    padding: int = 0
    weight_bits: int = 8
    activation_bits: int = 8

    kind = "dsconv"


@dataclass(frozen=True)
class MaxPool1D:
    stride: int
    weight_bits: int = 8
    activation_bits: int = 8

    kind = "maxpool"


@dataclass(frozen=True)
class GlobalAvgPool:
    weight_bits: int = 8
    activation_bits: int = 8

    kind = "gap"


@dataclass(frozen=True)
class Dense:
    units: int
    weight_bits: int = 8
    activation_bits: int = 8

    kind = "dense"


LayerSpec = Union[DSConv1D, MaxPool1D, GlobalAvgPool, Dense]

_LAYER_TYPES = {cls.kind: cls for cls in (DSConv1D, MaxPool1D, GlobalAvgPool, Dense)}


def layer_to_dict(layer: LayerSpec) -> dict:
    d = {"type": layer.kind}
    d.update(layer.__dict__)
    return d


def layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    try:
        cls = _LAYER_TYPES[d.pop("type")]
    except KeyError as exc:
        raise InvalidGenome(f"unknown or missing layer type in {d!r}") from exc
    try:
        return cls(**d)
    except TypeError as exc:
        raise InvalidGenome(f"bad fields for {cls.__name__}: {exc}") from exc


@dataclass(frozen=True)
class SearchSpaceConfig:
    """Grids the hardware library supports, plus depth bounds.

    Depth counts searchable layers only; the GAP/Dense tail is excluded.
    """

    conv_filters: tuple[int, ...] = (4, 8, 16, 32, 64)
    conv_kernels: tuple[int, ...] = (3, 5, 7, 9)
    conv_strides: tuple[int, ...] = (1, 2, 3)
    conv_paddings: tuple[int, ...] = (0,)
    pool_strides: tuple[int, ...] = (2, 3, 4, 5)
    bit_widths: tuple[int, ...] = BIT_WIDTHS
    min_depth: int = 2
    max_depth: int = 15
    # probability that a freshly sampled slot holds a conv rather than a pool
    conv_probability: float = 0.75

    def __post_init__(self):
        for name in ("conv_filters", "conv_kernels", "conv_strides", "pool_strides", "bit_widths"):
            grid = getattr(self, name)
            if not grid or any(not isinstance(v, int) or v < 1 for v in grid):
                raise InvalidGenome(f"{name} must be a non-empty list of positive integers, got {list(grid)}")
        if not self.conv_paddings or any(not isinstance(v, int) or v < 0 for v in self.conv_paddings):
            raise InvalidGenome(f"conv_paddings must be non-negative integers, got {list(self.conv_paddings)}")
        if not 1 <= self.min_depth <= self.max_depth:
            raise InvalidGenome("depth bounds must satisfy 1 <= min_depth <= max_depth")
        if not 0 <= self.conv_probability <= 1:
            raise InvalidGenome("conv_probability must be in [0, 1]")

    def conv_grid(self) -> list[tuple[int, int, int, int]]:
        """All (filters, kernel, stride, padding) combinations."""
        return list(
            itertools.product(self.conv_filters, self.conv_kernels, self.conv_strides, self.conv_paddings)
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpaceConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidGenome(f"unknown search space keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


DEFAULT_SPACE = SearchSpaceConfig()
assert len(DEFAULT_SPACE.conv_grid()) == 60, "default conv grid must have 60 configurations"
assert len(DEFAULT_SPACE.pool_strides) == 4, "default pool grid must have 4 strides"


@dataclass(frozen=True)
class GeneSlot:
    active: bool
    layer: LayerSpec


@dataclass(frozen=True)
class Genome:
    slots: tuple[GeneSlot, ...]
    input_channels: int = 2
    input_length: int = 512
    num_classes: int = 2
    seed: int | None = None
    id: int | None = None

    @property
    def depth(self) -> int:
        return sum(s.active for s in self.slots)

    def to_dict(self, space: SearchSpaceConfig | None = None) -> dict:
        d: dict[str, Any] = {
            "schema": "streamnas.genome/1",
            "input_channels": self.input_channels,
            "input_length": self.input_length,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "id": self.id,
            "slots": [{"active": s.active, "layer": layer_to_dict(s.layer)} for s in self.slots],
        }
        if space is not None:
            d["grids"] = space.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Genome":
        try:
            slots = tuple(GeneSlot(bool(s["active"]), layer_from_dict(s["layer"])) for s in d["slots"])
            return cls(
                slots=slots,
                input_channels=int(d.get("input_channels", 2)),
                input_length=int(d.get("input_length", 512)),
                num_classes=int(d.get("num_classes", 2)),
                seed=d.get("seed"),
                id=d.get("id"),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidGenome(f"malformed genome document: {exc}") from exc


@dataclass(frozen=True)
class Topology:
    layers: tuple[LayerSpec, ...]
    input_channels: int = 2
    input_length: int = 512

    @property
    def body(self) -> tuple[LayerSpec, ...]:
        """Searchable layers, i.e. everything before the GAP/Dense tail."""
        if has_standard_tail(self):
            return self.layers[:-2]
        return self.layers

    @property
    def num_classes(self) -> int:
        return self.layers[-1].units if isinstance(self.layers[-1], Dense) else 0

    def to_dict(self) -> dict:
        return {
            "schema": "streamnas.topology/1",
            "input_channels": self.input_channels,
            "input_length": self.input_length,
            "layers": [layer_to_dict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        try:
            return cls(
                layers=tuple(layer_from_dict(l) for l in d["layers"]),
                input_channels=int(d["input_channels"]),
                input_length=int(d["input_length"]),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidGenome(f"malformed topology document: {exc}") from exc


def has_standard_tail(topology: Topology) -> bool:
    ls = topology.layers
    return len(ls) >= 2 and isinstance(ls[-2], GlobalAvgPool) and isinstance(ls[-1], Dense)


@dataclass(frozen=True)
class LayerShape:
    input_width: int
    input_channels: int
    output_width: int
    output_channels: int


ShapeTrace = tuple[LayerShape, ...]


def decode(genome: Genome) -> Topology:
    """Active slots in slot order, followed by the fixed GAP/Dense tail."""
    active = [s.layer for s in genome.slots if s.active]
    if len(active) < 2:
        raise InvalidGenome(f"genome has {len(active)} active slots, need at least 2")
    tail = (GlobalAvgPool(), Dense(units=genome.num_classes))
    return Topology(tuple(active) + tail, genome.input_channels, genome.input_length)


def encode(
    topology: Topology,
    max_depth: int = 15,
    space: SearchSpaceConfig = DEFAULT_SPACE,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
) -> Genome:
    """Write a topology's body into the leading slots; remaining slots are dormant.

    Dormant slots get random layers when ``rng`` is given, otherwise a copy of
    the smallest conv in the grid.
    """
    body = topology.body
    if len(body) > max_depth:
        raise InvalidGenome(f"topology depth {len(body)} exceeds max_depth {max_depth}")
    slots = [GeneSlot(True, layer) for layer in body]
    for _ in range(max_depth - len(body)):
        filler = random_layer(space, rng) if rng is not None else _default_conv(space)
        slots.append(GeneSlot(False, filler))
    return Genome(
        slots=tuple(slots),
        input_channels=topology.input_channels,
        input_length=topology.input_length,
        num_classes=topology.num_classes or 2,
        seed=seed,
    )


def _default_conv(space: SearchSpaceConfig) -> DSConv1D:
    return DSConv1D(
        kernel_size=space.conv_kernels[0],
        stride=space.conv_strides[0],
        filters=space.conv_filters[0],
        padding=space.conv_paddings[0],
    )


def random_layer(space: SearchSpaceConfig, rng: np.random.Generator) -> LayerSpec:
    wb = int(rng.choice(space.bit_widths))
    ab = int(rng.choice(space.bit_widths))
    if rng.random() < space.conv_probability:
        grid = space.conv_grid()
        f, k, s, p = grid[int(rng.integers(len(grid)))]
        return DSConv1D(kernel_size=k, stride=s, filters=f, padding=p, weight_bits=wb, activation_bits=ab)
    return MaxPool1D(stride=int(rng.choice(space.pool_strides)), weight_bits=wb, activation_bits=ab)


def random_genome(
    space: SearchSpaceConfig,
    rng: np.random.Generator,
    input_channels: int = 2,
    input_length: int = 512,
    num_classes: int = 2,
    max_active: int | None = None,
) -> Genome:
    """Sample a genome whose decoded topology infers shapes successfully.

    ``max_active`` caps the initial depth, which keeps the starting population
    shallow enough to survive long chains of strides.
    """
    upper = space.max_depth if max_active is None else min(max_active, space.max_depth)
    while True:
        depth = int(rng.integers(space.min_depth, upper + 1))
        active_idx = set(rng.choice(space.max_depth, size=depth, replace=False).tolist())
        slots = tuple(GeneSlot(i in active_idx, random_layer(space, rng)) for i in range(space.max_depth))
        g = Genome(slots, input_channels, input_length, num_classes)
        try:
            infer_shapes(decode(g))
        except ShapeCollapse:
            continue
        return g


def _conv_width(w_in: int, k: int, s: int, p: int) -> int:
    return (w_in + 2 * p - k) // s + 1


def infer_shapes(topology: Topology) -> ShapeTrace:
    width, channels = topology.input_length, topology.input_channels
    trace = []
    for i, layer in enumerate(topology.layers):
        if isinstance(layer, DSConv1D):
            out_w = _conv_width(width, layer.kernel_size, layer.stride, layer.padding)
            out_c = layer.filters
        elif isinstance(layer, MaxPool1D):
            out_w = width // layer.stride
            out_c = channels
        elif isinstance(layer, GlobalAvgPool):
            out_w, out_c = 1, channels
        elif isinstance(layer, Dense):
            out_w, out_c = 1, layer.units
        else:
            raise TypeError(f"unknown layer {layer!r}")
        if out_w <= 0:
            raise ShapeCollapse(i, out_w)
        trace.append(LayerShape(width, channels, out_w, out_c))
        width, channels = out_w, out_c
    return tuple(trace)


@dataclass(frozen=True)
class DepthViolation:
    depth: int
    min_depth: int
    max_depth: int


@dataclass(frozen=True)
class GridViolation:
    layer_index: int
    field: str
    value: int


@dataclass(frozen=True)
class ShapeViolation:
    layer_index: int


@dataclass(frozen=True)
class TailViolation:
    reason: str


Violation = Union[DepthViolation, GridViolation, ShapeViolation, TailViolation]


def validate(topology: Topology, space: SearchSpaceConfig = DEFAULT_SPACE) -> list[Violation]:
    """Every reason the topology falls outside the search space; empty if none."""
    out: list[Violation] = []
    if not has_standard_tail(topology):
        out.append(TailViolation("topology must end with GlobalAvgPool followed by Dense"))
    body = topology.body
    if not space.min_depth <= len(body) <= space.max_depth:
        out.append(DepthViolation(len(body), space.min_depth, space.max_depth))
    for i, layer in enumerate(body):
        checks: list[tuple[str, int, tuple[int, ...]]] = []
        if isinstance(layer, DSConv1D):
            checks = [
                ("filters", layer.filters, space.conv_filters),
                ("kernel_size", layer.kernel_size, space.conv_kernels),
                ("stride", layer.stride, space.conv_strides),
                ("padding", layer.padding, space.conv_paddings),
            ]
        elif isinstance(layer, MaxPool1D):
            checks = [("stride", layer.stride, space.pool_strides)]
        else:
            out.append(GridViolation(i, "type", 0))
        checks += [
            ("weight_bits", layer.weight_bits, space.bit_widths),
            ("activation_bits", layer.activation_bits, space.bit_widths),
        ]
        out.extend(GridViolation(i, name, v) for name, v, grid in checks if v not in grid)
    try:
        infer_shapes(topology)
    except ShapeCollapse as exc:
        out.append(ShapeViolation(exc.layer_index))
    return out


def param_count(topology: Topology) -> int:
    """Trainable parameter count.

    Depthwise kernels carry no bias, pointwise kernels and dense layers do.
    """
    total = 0
    for layer, shape in zip(topology.layers, infer_shapes(topology)):
        c = shape.input_channels
        if isinstance(layer, DSConv1D):
            total += c * layer.kernel_size + c * layer.filters + layer.filters
        elif isinstance(layer, Dense):
            n_in = shape.input_width * shape.input_channels
            total += n_in * layer.units + layer.units
    return total


def dumps(obj: Genome | Topology, space: SearchSpaceConfig | None = None) -> str:
    d = obj.to_dict(space) if isinstance(obj, Genome) else obj.to_dict()
    return json.dumps(d, indent=2, sort_keys=True)


def loads(text: str) -> Genome | Topology:
    """Parse either a genome or a topology document."""
    d = json.loads(text)
    if "slots" in d:
        return Genome.from_dict(d)
    return Topology.from_dict(d)


def with_layer(genome: Genome, index: int, layer: LayerSpec) -> Genome:
    slots = list(genome.slots)
    slots[index] = replace(slots[index], layer=layer)
    return replace(genome, slots=tuple(slots))
