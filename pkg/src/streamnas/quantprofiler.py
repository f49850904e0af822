"""Post-training fixed-point analysis.

Float inference over a calibration set records the value range of every
accumulator site (depthwise sum, pointwise sum, dense sum) and every layer
output. Each site then gets the narrowest integer part that covers its
observed range, and the remaining bits go to the fraction. Weights are sized
the same way from their own values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ProfileError
from .topology import Topology
from .trainer import Metrics, ModelParams, metrics_from_predictions, predict_logits, softmax_xent

EPS = 2.0 ** -20

Site = tuple[int, str]


@dataclass
class SiteRange:
    min: float = math.inf
    max: float = -math.inf

    @property
    def max_abs(self) -> float:
        return max(abs(self.min), abs(self.max))

    def update(self, a: np.ndarray) -> None:
        self.min = min(self.min, float(a.min()))
        self.max = max(self.max, float(a.max()))


@dataclass
class RangeProfile:
    sites: dict[Site, SiteRange] = field(default_factory=dict)
    weights: dict[Site, SiteRange] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def enc(d):
            return {f"{k[0]}:{k[1]}": {"min": v.min, "max": v.max, "max_abs": v.max_abs}
                    for k, v in sorted(d.items())}
        return {"sites": enc(self.sites), "weights": enc(self.weights)}

    @classmethod
    def from_dict(cls, d: dict) -> "RangeProfile":
        def dec(m):
            return {_site_key(k): SiteRange(v["min"], v["max"]) for k, v in m.items()}
        return cls(dec(d.get("sites", {})), dec(d.get("weights", {})))


def _site_key(s: str) -> Site:
    layer, role = s.split(":", 1)
    return int(layer), role


@dataclass(frozen=True)
class FixedPointFormat:
    total_bits: int
    int_bits: int
    frac_bits: int

    def __post_init__(self):
        if self.int_bits + self.frac_bits != self.total_bits or self.int_bits < 1:
            raise ValueError(f"inconsistent format {self}")

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def lo(self) -> float:
        return -(2.0 ** (self.int_bits - 1))

    @property
    def hi(self) -> float:
        return 2.0 ** (self.int_bits - 1) - self.lsb


@dataclass
class FormatTable:
    sites: dict[Site, FixedPointFormat]
    weights: dict[Site, FixedPointFormat]

    def to_dict(self) -> dict:
        def enc(d):
            return {f"{k[0]}:{k[1]}": {"total_bits": f.total_bits, "int_bits": f.int_bits,
                                       "frac_bits": f.frac_bits} for k, f in sorted(d.items())}
        return {"sites": enc(self.sites), "weights": enc(self.weights)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FormatTable":
        def dec(m):
            return {_site_key(k): FixedPointFormat(v["total_bits"], v["int_bits"], v["frac_bits"])
                    for k, v in m.items()}
        return cls(dec(d.get("sites", {})), dec(d.get("weights", {})))


def profile(params: ModelParams, topology: Topology, x_calib: np.ndarray) -> RangeProfile:
    if len(x_calib) == 0:
        raise ProfileError("calibration set is empty")
    prof = RangeProfile()

    def record(layer: int, role: str, a: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(a)):
            raise ProfileError(f"non-finite values at layer {layer} ({role})")
        prof.sites.setdefault((layer, role), SiteRange()).update(a)
        return a

    predict_logits(params, topology, x_calib, hook=record)
    for i, p in enumerate(params.layers):
        for name, w in p.items():
            prof.weights.setdefault((i, name), SiteRange()).update(w)
    return prof


def format_for(max_abs: float, total_bits: int) -> FixedPointFormat:
    if total_bits < 2:
        raise ValueError("total_bits must be >= 2")
    if max_abs <= 0:
        ib = 1
    else:
        ib = math.ceil(math.log2(max_abs + EPS)) + 1
    ib = min(max(ib, 1), total_bits)
    return FixedPointFormat(total_bits, ib, total_bits - ib)


def assign_bits(prof: RangeProfile, total_bits: int) -> FormatTable:
    return FormatTable(
        {k: format_for(v.max_abs, total_bits) for k, v in prof.sites.items()},
        {k: format_for(v.max_abs, total_bits) for k, v in prof.weights.items()},
    )


def quantize(a: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    """Round half away from zero onto the format grid, saturating at its bounds."""
    scaled = a * 2.0 ** fmt.frac_bits
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(q * fmt.lsb, fmt.lo, fmt.hi)


def quantize_params(params: ModelParams, formats: FormatTable) -> ModelParams:
    return ModelParams([
        {name: quantize(w, formats.weights[(i, name)]) for name, w in p.items()}
        for i, p in enumerate(params.layers)
    ])


@dataclass
class SaturationStats:
    counts: dict[Site, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def fixed_point_logits(params: ModelParams, topology: Topology, formats: FormatTable,
                       x: np.ndarray, stats: SaturationStats | None = None) -> np.ndarray:
    qparams = quantize_params(params, formats)

    def requant(layer: int, role: str, a: np.ndarray) -> np.ndarray:
        fmt = formats.sites[(layer, role)]
        if stats is not None:
            # values that rounding alone cannot bring into range
            over = (a > fmt.hi + fmt.lsb / 2) | (a < fmt.lo - fmt.lsb / 2)
            stats.counts[(layer, role)] = stats.counts.get((layer, role), 0) + int(over.sum())
        return quantize(a, fmt)

    return predict_logits(qparams, topology, x, hook=requant)


def simulate_fixed_point(params: ModelParams, topology: Topology, formats: FormatTable,
                         x: np.ndarray, labels: np.ndarray,
                         stats: SaturationStats | None = None) -> Metrics:
    logits = fixed_point_logits(params, topology, formats, x, stats)
    loss, _ = softmax_xent(logits, labels)
    return metrics_from_predictions(logits.argmax(axis=1), labels, loss)


def accuracy_drift(params: ModelParams, topology: Topology, formats: FormatTable,
                   x: np.ndarray, labels: np.ndarray) -> float:
    """Absolute accuracy difference between fixed-point and float inference."""
    float_pred = predict_logits(params, topology, x).argmax(axis=1)
    fixed = simulate_fixed_point(params, topology, formats, x, labels)
    return abs(fixed.accuracy - float(np.mean(float_pred == labels)))
