"""Multi-objective evolutionary search over dormant-gene genomes.

Each generation samples parents uniformly from the Pareto archive, mutates
them, scores every child on the cheap analytical objectives, trains only the
most novel fraction, and folds the finished individuals back into the
archive. Training jobs are independent and may complete in any order; their
results are applied in id order once a generation's jobs are done, so the
search is reproducible for any worker count.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import hwcost
from .errors import CheckpointError, InvalidGenome, ShapeCollapse, StreamNASError
from .hwcost import DEFAULT_BUDGET, DEFAULT_CALIBRATION, CalibrationTable
from .topology import (
    DEFAULT_SPACE,
    GeneSlot,
    Genome,
    SearchSpaceConfig,
    decode,
    infer_shapes,
    param_count,
    random_genome,
    random_layer,
)
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

CHEAP_OBJECTIVES = (
    "params",
    "latency_min",
    "power_min",
    "energy_min",
    "latency_max",
    "power_max",
    "energy_max",
)
EXPENSIVE_OBJECTIVES = ("neg_detection", "false_alarm")
ALL_OBJECTIVES = CHEAP_OBJECTIVES + EXPENSIVE_OBJECTIVES


@dataclass(frozen=True)
class SearchConfig:
    generations: int = 100
    children_per_generation: int = 20
    p_flip: float = 0.1
    p_hyper: float = 0.15
    preselect_fraction: float = 0.5
    seed: int = 0
    worker_count: int = 1
    initial_random: int = 10
    initial_max_depth: int = 6
    detection_limit: float = 0.90
    false_alarm_limit: float = 0.20
    objectives: tuple[str, ...] = ALL_OBJECTIVES
    budget: int = DEFAULT_BUDGET
    train: TrainConfig = TrainConfig(epochs=8)
    space: SearchSpaceConfig = DEFAULT_SPACE

    def __post_init__(self):
        for name in ("children_per_generation", "worker_count", "initial_random", "budget"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.generations < 0:
            raise ValueError("generations must be non-negative")
        if not 0 < self.preselect_fraction <= 1:
            raise ValueError("preselect_fraction must be in (0, 1]")
        for p in (self.p_flip, self.p_hyper):
            if not 0 <= p <= 1:
                raise ValueError("mutation rates must be in [0, 1]")
        unknown = set(self.objectives) - set(ALL_OBJECTIVES)
        if unknown or not self.objectives:
            raise ValueError(f"unknown objectives {sorted(unknown)}")


@dataclass(frozen=True)
class CheapObjectives:
    feasible: bool
    values: dict[str, float] = field(default_factory=dict)
    max_alpha: tuple[int, ...] = ()


@dataclass
class Individual:
    genome: Genome
    id: int
    generation: int = 0
    parent: int | None = None
    cheap: CheapObjectives | None = None
    expensive: dict[str, float] | None = None
    status: str = "new"

    def objectives(self, names: Sequence[str]) -> np.ndarray:
        vals = dict(self.cheap.values)
        vals.update(self.expensive or {})
        return np.array([vals[n] for n in names], dtype=float)

    def meets_limits(self, detection: float = 0.90, false_alarm: float = 0.20) -> bool:
        if not self.expensive:
            return False
        return (-self.expensive["neg_detection"] >= detection
                and self.expensive["false_alarm"] <= false_alarm)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "generation": self.generation,
            "parent": self.parent,
            "status": self.status,
            "genome": self.genome.to_dict(),
            "cheap": None if self.cheap is None else {
                "feasible": self.cheap.feasible,
                "values": self.cheap.values,
                "max_alpha": list(self.cheap.max_alpha),
            },
            "expensive": self.expensive,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Individual":
        cheap = d.get("cheap")
        return cls(
            genome=Genome.from_dict(d["genome"]),
            id=int(d["id"]),
            generation=int(d["generation"]),
            parent=d.get("parent"),
            cheap=None if cheap is None else CheapObjectives(
                bool(cheap["feasible"]), dict(cheap["values"]), tuple(cheap.get("max_alpha", ()))),
            expensive=d.get("expensive"),
            status=d.get("status", "new"),
        )


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    """``a`` is no worse everywhere and strictly better somewhere (minimization)."""
    return bool(np.all(a <= b) and np.any(a < b))


class ParetoArchive:
    """Non-dominated set over a fixed list of minimized objectives."""

    def __init__(self, objectives: Sequence[str] = ALL_OBJECTIVES):
        self.objectives = tuple(objectives)
        self.members: list[Individual] = []
        self._vectors: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def insert(self, ind: Individual, vector: np.ndarray | None = None) -> bool:
        v = ind.objectives(self.objectives) if vector is None else np.asarray(vector, dtype=float)
        for w in self._vectors:
            if dominates(w, v):
                return False
        keep = [i for i, w in enumerate(self._vectors) if not dominates(v, w)]
        self.members = [self.members[i] for i in keep] + [ind]
        self._vectors = [self._vectors[i] for i in keep] + [v]
        return True

    def vectors(self) -> np.ndarray:
        return np.array(self._vectors).reshape(len(self._vectors), len(self.objectives))

    def ids(self) -> set[int]:
        return {m.id for m in self.members}

    def sorted_members(self) -> list[Individual]:
        return sorted(self.members, key=lambda m: m.id)


def pareto_update(archive: ParetoArchive, ind: Individual) -> ParetoArchive:
    archive.insert(ind)
    return archive


def hypervolume(points: np.ndarray, reference: np.ndarray, samples: np.ndarray | None = None,
                n_samples: int = 20000, seed: int = 0, lower: np.ndarray | None = None) -> float:
    """Volume dominated by ``points`` inside the box below ``reference``.

    Exact in two dimensions unless ``samples`` is given. Otherwise a Monte
    Carlo estimate: unit-cube ``samples`` are mapped onto the box
    ``[lower, reference]`` (``lower`` defaults to the componentwise minimum of
    the points). Fixing both the samples and ``lower`` makes the estimate
    monotone under archive updates.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    reference = np.asarray(reference, dtype=float)
    points = points[np.all(points < reference, axis=1)]
    if len(points) == 0:
        return 0.0
    if points.shape[1] == 2 and samples is None:
        pts = points[np.argsort(points[:, 0], kind="stable")]
        vol, best_y = 0.0, reference[1]
        for x, y in pts:
            if y < best_y:
                vol += (reference[0] - x) * (best_y - y)
                best_y = y
        return vol
    lower = points.min(axis=0) if lower is None else np.asarray(lower, dtype=float)
    if samples is None:
        samples = np.random.default_rng(seed).random((n_samples, points.shape[1]))
    box = lower + np.asarray(samples) * (reference - lower)
    covered = np.zeros(len(box), dtype=bool)
    for p in points:
        covered |= np.all(box >= p, axis=1)
    return float(covered.mean() * np.prod(reference - lower))


def mutate(genome: Genome, p_flip: float, p_hyper: float, rng: np.random.Generator,
           space: SearchSpaceConfig = DEFAULT_SPACE) -> Genome:
    """Flip activity and resample layers slot by slot, then repair the depth.

    Dormant slots mutate too; the change stays invisible until the slot is
    reactivated.
    """
    slots = []
    for s in genome.slots:
        u_flip, u_hyper = rng.random(2)
        active = (not s.active) if u_flip < p_flip else s.active
        layer = random_layer(space, rng) if u_hyper < p_hyper else s.layer
        slots.append(GeneSlot(active, layer))
    depth = sum(s.active for s in slots)
    for i, s in enumerate(slots):
        if depth >= space.min_depth:
            break
        if not s.active:
            slots[i] = GeneSlot(True, s.layer)
            depth += 1
    for i, s in enumerate(slots):
        if depth <= space.max_depth:
            break
        if s.active:
            slots[i] = GeneSlot(False, s.layer)
            depth -= 1
    return replace(genome, slots=tuple(slots), id=None)


def cheap_evaluate(genome: Genome, budget: int = DEFAULT_BUDGET,
                   calib: CalibrationTable = DEFAULT_CALIBRATION) -> CheapObjectives:
    """Parameter count and modeled latency/power/energy at minimal and maximal unrolling.

    The maximal-unrolling point is the energy-optimal configuration found by
    bottleneck balancing within ``budget``.
    """
    try:
        topo = decode(genome)
        shapes = infer_shapes(topo)
    except (ShapeCollapse, InvalidGenome):
        return CheapObjectives(False)
    lo = hwcost.evaluate(topo, hwcost.UnrollConfig.ones(len(topo.layers)), calib)
    budget = max(budget, len(topo.layers))
    u = hwcost.optimize_unrolling(topo, shapes, "min_energy", budget, calib=calib)
    hi = hwcost.evaluate(topo, u, calib)
    values = {
        "params": float(param_count(topo)),
        "latency_min": lo.t_total_s,
        "power_min": lo.P_total,
        "energy_min": lo.E_total,
        "latency_max": hi.t_total_s,
        "power_max": hi.P_total,
        "energy_max": hi.E_total,
    }
    return CheapObjectives(True, values, tuple(x.alpha for x in u.layers))


def _cheap_names(objectives: Sequence[str]) -> list[str]:
    names = [o for o in objectives if o in CHEAP_OBJECTIVES]
    return names or list(CHEAP_OBJECTIVES)


def novelty(children: Sequence[Individual], archive: ParetoArchive) -> list[float]:
    """Distance to the nearest archive member in min-max normalized cheap space."""
    names = _cheap_names(archive.objectives)
    if not children:
        return []
    cv = np.array([c.objectives(names) for c in children])
    if len(archive) == 0:
        return [math.inf] * len(children)
    av = np.array([m.objectives(names) for m in archive])
    both = np.vstack([cv, av])
    lo, hi = both.min(axis=0), both.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    cn, an = (cv - lo) / span, (av - lo) / span
    d = np.sqrt(((cn[:, None, :] - an[None, :, :]) ** 2).sum(-1)).min(axis=1)
    return d.tolist()


def preselect(children: Sequence[Individual], archive: ParetoArchive, fraction: float) -> list[Individual]:
    """Most novel feasible children, ``ceil(fraction * len(children))`` at most."""
    feasible = [c for c in children if c.cheap is not None and c.cheap.feasible]
    if not feasible:
        log.warning("no feasible children; generation skipped")
        return []
    k = math.ceil(fraction * len(children))
    scores = novelty(feasible, archive)
    order = sorted(range(len(feasible)), key=lambda i: (-scores[i], feasible[i].id))
    return [feasible[i] for i in order[:k]]


# worker side -----------------------------------------------------------------

_WORKER_DATASET = None


def _init_worker(dataset) -> None:
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def expensive_evaluate(genome: Genome, train_config: TrainConfig, dataset=None) -> dict[str, float]:
    """Train the decoded network and report validation detection/false-alarm rates."""
    dataset = _WORKER_DATASET if dataset is None else dataset
    topo = decode(genome)
    _, m = train(topo, dataset, train_config)
    return {
        "neg_detection": -m.detection_rate,
        "false_alarm": m.false_alarm_rate,
        "accuracy": m.accuracy,
        "loss": m.loss,
    }


def _job(genome: Genome, train_config: TrainConfig) -> tuple[dict | None, str | None, float, float]:
    started = time.time()
    try:
        return expensive_evaluate(genome, train_config), None, started, time.time()
    except Exception as exc:  # a failed job must not stop the search
        return None, f"{type(exc).__name__}: {exc}", started, time.time()


def _train_seed(seed: int, ind_id: int) -> int:
    return int(np.random.SeedSequence([seed, ind_id]).generate_state(1)[0])


# coordinator -----------------------------------------------------------------


@dataclass
class SearchResult:
    archive: ParetoArchive
    log: list[dict]
    evaluated: list[Individual]
    training_runs: dict[int, int]


class _Runner:
    def __init__(self, config: SearchConfig, dataset, out_dir: Path | None,
                 calib: CalibrationTable, job: Callable | None):
        self.config = config
        self.dataset = dataset
        self.out_dir = out_dir
        self.calib = calib
        self.job = job or _job
        self.log: list[dict] = []
        self.flushed = 0  # log entries already appended to run_log.jsonl
        self.evaluated: list[Individual] = []
        self.training_runs: dict[int, int] = {}
        self.next_id = 0
        self.pool = None
        if config.worker_count > 1 and job is None:
            self.pool = ProcessPoolExecutor(config.worker_count, initializer=_init_worker,
                                            initargs=(dataset,))
        elif job is None:
            _init_worker(dataset)

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def new_individual(self, genome: Genome, generation: int, parent: int | None) -> Individual:
        ind = Individual(replace(genome, id=self.next_id), self.next_id, generation, parent)
        self.next_id += 1
        ind.cheap = cheap_evaluate(ind.genome, self.config.budget, self.calib)
        if not ind.cheap.feasible:
            ind.status = "infeasible"
        return ind

    def run_jobs(self, inds: list[Individual]) -> None:
        cfg = self.config
        jobs = {ind.id: replace(cfg.train, seed=_train_seed(cfg.seed, ind.id)) for ind in inds}
        results: dict[int, tuple] = {}
        if self.pool is None:
            for ind in inds:
                results[ind.id] = self.job(ind.genome, jobs[ind.id])
        else:
            futs = {self.pool.submit(self.job, ind.genome, jobs[ind.id]): ind.id for ind in inds}
            for f in as_completed(futs):
                try:
                    results[futs[f]] = f.result()
                except Exception as exc:  # worker process died
                    results[futs[f]] = (None, f"{type(exc).__name__}: {exc}", 0.0, 0.0)
        for ind in sorted(inds, key=lambda i: i.id):
            metrics, error, started, finished = results[ind.id]
            if metrics is None:
                ind.status = "failed"
                log.warning("individual %d failed: %s", ind.id, error)
            else:
                ind.expensive = metrics
                ind.status = "trained"
            entry = ind.to_dict()
            entry.update(started=started, finished=finished, error=error)
            self.log.append(entry)

    def record_untrained(self, inds: Iterable[Individual]) -> None:
        for ind in inds:
            if ind.status == "new":
                ind.status = "not_selected"
            entry = ind.to_dict()
            entry.update(started=None, finished=None, error=None)
            self.log.append(entry)


def _write_log(path: Path, entries: Iterable[dict]) -> None:
    with path.open("a") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def save_checkpoint(path: Path, generation: int, archive: ParetoArchive, rng: np.random.Generator,
                    next_id: int, config: SearchConfig) -> None:
    doc = {
        "schema": "streamnas.checkpoint/1",
        "generation": generation,
        "next_id": next_id,
        "seed": config.seed,
        "objectives": list(archive.objectives),
        "rng_state": rng.bit_generator.state,
        "archive": [m.to_dict() for m in archive.sorted_members()],
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path: Path) -> tuple[int, ParetoArchive, np.random.Generator, int]:
    try:
        doc = json.loads(Path(path).read_text())
        archive = ParetoArchive(doc["objectives"])
        for d in doc["archive"]:
            archive.insert(Individual.from_dict(d))
        rng = np.random.default_rng()
        rng.bit_generator.state = doc["rng_state"]
        return int(doc["generation"]), archive, rng, int(doc["next_id"])
    except (OSError, ValueError, KeyError, TypeError, StreamNASError) as exc:
        raise CheckpointError(f"cannot restore checkpoint {path}: {exc}") from exc


def run_search(config: SearchConfig, dataset, out_dir: str | Path | None = None,
               calib: CalibrationTable = DEFAULT_CALIBRATION, resume: str | Path | None = None,
               job: Callable | None = None,
               on_generation: Callable[[int, ParetoArchive], None] | None = None) -> SearchResult:
    """Evolve for ``config.generations`` generations after the random initial population.

    With ``out_dir`` set, a checkpoint is written per generation and every
    evaluated individual is appended to ``run_log.jsonl``. ``job`` replaces
    the training job (genome, train config) -> (metrics, error, start, end).
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    runner = _Runner(config, dataset, out, calib, job)
    try:
        if resume is not None:
            start_gen, archive, rng, runner.next_id = load_checkpoint(Path(resume))
            if archive.objectives != tuple(config.objectives):
                raise CheckpointError("checkpoint objectives differ from the configuration")
            start_gen += 1
        else:
            rng = np.random.default_rng(config.seed)
            archive = ParetoArchive(config.objectives)
            g = dataset.samples.shape
            init = [
                runner.new_individual(
                    random_genome(config.space, rng, g[1], g[2], 2, config.initial_max_depth), 0, None)
                for _ in range(config.initial_random)
            ]
            runner.run_jobs(init)
            for ind in init:
                if ind.expensive is not None:
                    pareto_update(archive, ind)
            runner.training_runs[0] = len(init)
            runner.evaluated.extend(init)
            _after_generation(runner, out, 0, archive, rng, on_generation)
            start_gen = 1

        for gen in range(start_gen, config.generations + 1):
            members = archive.sorted_members()
            children = []
            for _ in range(config.children_per_generation):
                if members:
                    parent = members[int(rng.integers(len(members)))]
                    genome = mutate(parent.genome, config.p_flip, config.p_hyper, rng, config.space)
                    children.append(runner.new_individual(genome, gen, parent.id))
                else:
                    g = dataset.samples.shape
                    genome = random_genome(config.space, rng, g[1], g[2], 2, config.initial_max_depth)
                    children.append(runner.new_individual(genome, gen, None))
            chosen = preselect(children, archive, config.preselect_fraction)
            runner.run_jobs(chosen)
            runner.record_untrained(c for c in children if c not in chosen)
            runner.training_runs[gen] = len(chosen)
            for ind in sorted(chosen, key=lambda i: i.id):
                if ind.expensive is not None:
                    pareto_update(archive, ind)
            runner.evaluated.extend(children)
            _after_generation(runner, out, gen, archive, rng, on_generation)
    finally:
        runner.close()
    return SearchResult(archive, runner.log, runner.evaluated, runner.training_runs)


def _after_generation(runner: _Runner, out: Path | None, gen: int, archive: ParetoArchive,
                      rng: np.random.Generator, callback) -> None:
    if out is not None:
        save_checkpoint(out / "checkpoints" / f"gen_{gen:04d}.json", gen, archive, rng,
                        runner.next_id, runner.config)
        _write_log(out / "run_log.jsonl", runner.log[runner.flushed:])
        runner.flushed = len(runner.log)
    log.info("generation %d: archive size %d", gen, len(archive))
    if callback is not None:
        callback(gen, archive)


def replay_log(entries: Iterable[dict], objectives: Sequence[str]) -> ParetoArchive:
    """Rebuild an archive from run-log entries, in whatever order they are given."""
    archive = ParetoArchive(objectives)
    for e in entries:
        if e.get("expensive") and e.get("status") == "trained":
            archive.insert(Individual.from_dict(e))
    return archive


def pick(archive: ParetoArchive, objective: str, detection: float = 0.90,
         false_alarm: float = 0.20) -> Individual | None:
    """Best member for one objective, preferring members inside the hard limits."""
    members = archive.sorted_members()
    if not members:
        return None
    ok = [m for m in members if m.meets_limits(detection, false_alarm)]
    pool = ok or members
    return min(pool, key=lambda m: (m.objectives([objective])[0], m.id))
