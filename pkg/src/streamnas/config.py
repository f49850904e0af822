"""Run configuration: one JSON document, versioned, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import CsvSchema, Dataset, generate_synthetic, load_csv
from .errors import ConfigError, StreamNASError
from .hwcost import DEFAULT_CALIBRATION, CalibrationTable
from .nas import SearchConfig
from .topology import DEFAULT_SPACE, SearchSpaceConfig
from .trainer import TrainConfig

SCHEMA = "streamnas.config/1"

_TOP_KEYS = {"schema", "seed", "output_dir", "calibration", "dataset", "space", "search", "train"}
_DATASET_KEYS = {"kind", "n", "width", "seed", "path", "channels", "label_column", "ratios"}
_SEARCH_KEYS = {f.name for f in fields(SearchConfig)} - {"train", "space", "seed"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass(frozen=True)
class DatasetSource:
    kind: str = "synthetic"
    n: int = 600
    width: int = 512
    seed: int = 0
    path: str | None = None
    channels: int | None = None
    label_column: int = -1
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def load(self) -> Dataset:
        if self.kind == "synthetic":
            return generate_synthetic(self.n, self.width, self.seed, self.ratios)
        schema = None
        if self.channels is not None:
            schema = CsvSchema(self.channels, self.width, self.label_column)
        return load_csv(self.path, schema, self.ratios, self.seed)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    calibration: CalibrationTable = DEFAULT_CALIBRATION
    dataset: DatasetSource = DatasetSource()
    space: SearchSpaceConfig = DEFAULT_SPACE
    search: SearchConfig = field(default_factory=SearchConfig)

    def with_overrides(self, seed: int | None = None, workers: int | None = None,
                       output_dir: str | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, search=replace(cfg.search, seed=seed))
        if workers is not None:
            cfg = replace(cfg, search=replace(cfg.search, worker_count=workers))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=output_dir)
        return cfg


def _check_keys(where: str, d, allowed: set[str]) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def parse_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    _check_keys("config", doc, _TOP_KEYS)
    if doc.get("schema", SCHEMA) != SCHEMA:
        raise ConfigError(f"config.schema: expected {SCHEMA!r}, got {doc['schema']!r}")
    try:
        seed = int(doc.get("seed", 0))
        calib = DEFAULT_CALIBRATION
        if doc.get("calibration") is not None:
            c = doc["calibration"]
            if isinstance(c, str):
                p = Path(c)
                if base_dir is not None and not p.is_absolute():
                    p = base_dir / p
                calib = CalibrationTable.load(p)
            else:
                calib = CalibrationTable.from_dict(c)

        ds = doc.get("dataset", {})
        _check_keys("dataset", ds, _DATASET_KEYS)
        ds = dict(ds)
        if "ratios" in ds:
            ds["ratios"] = tuple(ds["ratios"])
        if ds.get("kind", "synthetic") not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.kind: expected 'synthetic' or 'csv', got {ds['kind']!r}")
        if ds.get("kind") == "csv":
            if not ds.get("path"):
                raise ConfigError("dataset.path: required for csv datasets")
            if base_dir is not None and not Path(ds["path"]).is_absolute():
                ds["path"] = str(base_dir / ds["path"])
        dataset = DatasetSource(**ds)

        space_doc = doc.get("space", {})
        _check_keys("space", space_doc, set(SearchSpaceConfig.__dataclass_fields__))
        space = SearchSpaceConfig.from_dict(space_doc)

        tr = doc.get("train", {})
        _check_keys("train", tr, _TRAIN_KEYS)
        train = TrainConfig(**{"epochs": 8, **tr})

        se = doc.get("search", {})
        _check_keys("search", se, _SEARCH_KEYS)
        se = dict(se)
        if "objectives" in se:
            se["objectives"] = tuple(se["objectives"])
        search = SearchConfig(**se, seed=seed, train=train, space=space)
    except ConfigError:
        raise
    except (StreamNASError, ValueError, TypeError, OSError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(seed, doc.get("output_dir"), calib, dataset, space, search)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(doc, path.parent)
