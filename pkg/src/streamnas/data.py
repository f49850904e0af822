"""Synthetic two-channel pulse-train dataset and CSV ingestion.

Negative samples are quasi-periodic pulse trains: the inter-pulse interval
jitters slightly around a per-sample base period. Positive samples share the
pulse shape and base period but have irregular rhythm: the interval spread is
multiplied, and pulses are randomly dropped or inserted. Both channels carry
the same beat sequence with different pulse morphologies, plus Gaussian noise
and a slow baseline wander.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, ParseError

# generator constants
BASE_PERIOD = (20.0, 24.0)  # samples between beats, drawn per sample
NORMAL_JITTER = 0.04  # interval std as a fraction of the period, negatives
IRREGULAR_JITTER = 0.30  # interval std as a fraction of the period, positives
P_EXTRA = 0.35  # per beat, positives: insert an ectopic beat inside the interval
P_DROP = 0.10  # per beat, positives: skip the beat
MIN_INTERVAL = 5.0
PULSE_WIDTH = 1.5
NOISE_STD = 0.15
WANDER_AMPLITUDE = 0.2


@dataclass
class Dataset:
    samples: np.ndarray  # (n, channels, width)
    labels: np.ndarray  # (n,) in {0, 1}
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.samples.shape[1]

    @property
    def width(self) -> int:
        return self.samples.shape[2]

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[split]
        return self.samples[idx], self.labels[idx]


def _beat_times(rng: np.random.Generator, width: int, positive: bool) -> np.ndarray:
    period = rng.uniform(*BASE_PERIOD)
    t = rng.uniform(0, period)
    beats = []
    jitter = IRREGULAR_JITTER if positive else NORMAL_JITTER
    while t < width:
        if positive and rng.random() < P_DROP:
            pass
        else:
            beats.append(t)
        interval = max(MIN_INTERVAL, period * (1.0 + jitter * rng.standard_normal()))
        if positive and rng.random() < P_EXTRA:
            beats.append(t + interval * rng.uniform(0.3, 0.6))
        t += interval
    return np.array(beats)


def _render(rng: np.random.Generator, beats: np.ndarray, width: int) -> np.ndarray:
    x = np.arange(width, dtype=np.float64)
    out = np.zeros((2, width))
    for b in beats:
        amp = rng.uniform(0.8, 1.2)
        d = x - b
        out[0] += amp * np.exp(-0.5 * (d / PULSE_WIDTH) ** 2)
        # biphasic morphology on the second lead, slightly delayed
        d2 = d - 2.0
        out[1] += -0.7 * amp * (d2 / PULSE_WIDTH) * np.exp(-0.5 * (d2 / PULSE_WIDTH) ** 2)
    phase = rng.uniform(0, 2 * np.pi)
    wander = WANDER_AMPLITUDE * np.sin(2 * np.pi * x / width * rng.uniform(0.5, 2.0) + phase)
    out += wander
    out += NOISE_STD * rng.standard_normal(out.shape)
    return out


def generate_synthetic(n: int, width: int = 512, seed: int = 0,
                       ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> Dataset:
    """Balanced synthetic dataset, already split train/val/test."""
    if n % 2:
        raise InvalidArgument(f"n must be even, got {n}")
    if width < 64:
        raise InvalidArgument(f"width must be >= 64, got {width}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.array([0, 1]), n // 2)
    rng.shuffle(labels)
    samples = np.empty((n, 2, width))
    for i, y in enumerate(labels):
        samples[i] = _render(rng, _beat_times(rng, width, bool(y)), width)
    ds = Dataset(samples, labels.astype(np.int64), seed=seed)
    return split(ds, ratios, seed)


def split(dataset: Dataset, ratios: tuple[float, ...] = (0.7, 0.15, 0.15), seed: int = 0,
          names: tuple[str, ...] = ("train", "val", "test")) -> Dataset:
    """Stratified split; every class is divided in the given proportions."""
    if len(ratios) != len(names):
        raise InvalidArgument("one ratio per split name")
    if any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise InvalidArgument(f"ratios must be non-negative and sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts: dict[str, list[np.ndarray]] = {k: [] for k in names}
    for cls in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == cls)
        rng.shuffle(idx)
        bounds = np.round(np.cumsum(ratios) * len(idx)).astype(int)
        start = 0
        for name, stop in zip(names, bounds):
            parts[name].append(idx[start:stop])
            start = stop
    splits = {k: np.sort(np.concatenate(v)) for k, v in parts.items()}
    return Dataset(dataset.samples, dataset.labels, splits, dataset.seed if dataset.seed is not None else seed)


@dataclass(frozen=True)
class CsvSchema:
    channels: int
    width: int
    label_column: int = -1


def load_csv(path: str | Path, schema: CsvSchema | None = None,
             ratios: tuple[float, float, float] = (0.7, 0.15, 0.15), seed: int = 0) -> Dataset:
    """Read one sample per row: channel-major values, then the label.

    Without an explicit schema the JSON sidecar (same stem, ``.json``) must
    provide ``channels`` and ``width``.
    """
    path = Path(path)
    if schema is None:
        meta = json.loads(path.with_suffix(".json").read_text())
        schema = CsvSchema(int(meta["channels"]), int(meta["width"]), int(meta.get("label_column", -1)))
    n_values = schema.channels * schema.width
    rows, labels = [], []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != n_values + 1:
                raise ParseError(f"expected {n_values + 1} columns, got {len(row)}", lineno)
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
            label = vals.pop(schema.label_column)
            if label not in (0.0, 1.0):
                raise ParseError(f"label must be 0 or 1, got {label}", lineno)
            rows.append(vals)
            labels.append(int(label))
    if not rows:
        raise ParseError("no samples in file")
    samples = np.asarray(rows).reshape(len(rows), schema.channels, schema.width)
    if not np.all(np.isfinite(samples)):
        raise ParseError("non-finite sample values")
    return split(Dataset(samples, np.asarray(labels, dtype=np.int64)), ratios, seed)


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Write rows plus the JSON sidecar read by :func:`load_csv`."""
    path = Path(path)
    flat = dataset.samples.reshape(len(dataset), -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for x, y in zip(flat, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
    meta = {"channels": dataset.channels, "width": dataset.width, "label_column": -1,
            "n": len(dataset), "seed": dataset.seed}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
