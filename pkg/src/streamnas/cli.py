"""``streamnas`` command line.

Every command prints one JSON document on stdout and a short human-readable
table on stderr. Exit codes: 0 success, 1 runtime failure, 2 bad
configuration or input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import hwcost, pipesim, quantprofiler
from .config import DatasetSource, RunConfig, load_config
from .errors import (
    ConfigError,
    InvalidArgument,
    InvalidBudget,
    InvalidGenome,
    InvalidUnroll,
    ParseError,
    StreamNASError,
)
from .hwcost import CalibrationTable, UnrollConfig
from .nas import ALL_OBJECTIVES, Individual, ParetoArchive, pick, run_search
from .topology import Genome, Topology, decode, infer_shapes
from .trainer import evaluate as evaluate_model, load_params, save_params, train

log = logging.getLogger("streamnas")

_USAGE_ERRORS = (ConfigError, InvalidGenome, ParseError, InvalidUnroll, InvalidBudget, InvalidArgument)


SUMMARY_TARGETS = (
    # target, objective picked on, unrolling used for the reported costs
    ("low_power", "power_min", "min"),
    ("low_energy", "energy_max", "max"),
    ("high_throughput", "latency_max", "max"),
)


def _emit(doc: dict, table: list[tuple[str, object]] | None = None) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if table:
        width = max(len(k) for k, _ in table)
        for k, v in table:
            print(f"{k:<{width}}  {v}", file=sys.stderr)


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(args.seed, args.workers, args.out)


def _calibration(args, cfg: RunConfig) -> CalibrationTable:
    if getattr(args, "calib", None):
        try:
            return CalibrationTable.load(args.calib)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"calibration {args.calib}: {exc}") from exc
    return cfg.calibration


def _load_design(path: str):
    """A topology, a genome (decoded), or a stage-list document."""
    doc = _read_json(path)
    schema = doc.get("schema", "")
    if schema.startswith("streamnas.stages"):
        try:
            stages = [(int(s["n_in"]), int(s["l"])) for s in doc["stages"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: stages[*] need integer 'n_in' and 'l' ({exc})") from exc
        if not stages or any(n < 1 or l < 1 for n, l in stages):
            raise ParseError(f"{path}: stages must be non-empty with n_in >= 1 and l >= 1")
        return "stages", hwcost.chain_costs(stages, int(doc.get("final_outputs", 1))), int(doc.get("sigma0", 1))
    if schema.startswith("streamnas.genome"):
        return "topology", decode(Genome.from_dict(doc)), 1
    if schema.startswith("streamnas.topology"):
        return "topology", Topology.from_dict(doc), 1
    raise ParseError(f"{path}: schema must name a topology, genome or stage list, got {schema!r}")


def _unroll(spec: str | None, topology: Topology, budget: int, calib: CalibrationTable) -> UnrollConfig:
    n = len(topology.layers)
    if spec in (None, "min", "min_power"):
        return UnrollConfig.ones(n)
    if spec in ("max", "min_energy", "max_throughput"):
        objective = "min_energy" if spec == "max" else spec
        return hwcost.optimize_unrolling(topology, objective=objective, budget=budget, calib=calib)
    try:
        u = UnrollConfig.from_dict(_read_json(spec))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidUnroll(f"{spec}: layers[*] need 'alpha_pe' and 'alpha_simd' ({exc})") from exc
    if len(u.layers) != n:
        raise InvalidUnroll(f"{spec}: layers has {len(u.layers)} entries, topology has {n} layers")
    return u


def _out_dir(args, cfg: RunConfig) -> Path | None:
    out = args.out or cfg.output_dir
    if out is None:
        return None
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def _dataset(cfg: RunConfig, args, width: int):
    if args.config:
        return cfg.dataset.load()
    seed = args.seed if args.seed is not None else 0
    return DatasetSource(n=600, width=width, seed=seed).load()


# commands --------------------------------------------------------------------


def cmd_cost(args) -> int:
    cfg = _run_config(args)
    calib = _calibration(args, cfg)
    kind, design, sigma0 = _load_design(args.design)
    if kind == "stages":
        unroll = UnrollConfig.ones(len(design))
        report = hwcost.cost_report(design, unroll, calib, sigma0)
    else:
        infer_shapes(design)
        unroll = _unroll(args.unroll, design, args.budget, calib)
        report = hwcost.evaluate(design, unroll, calib)
    doc = {"report": report.to_dict(), "unroll": unroll.to_dict()}
    out = _out_dir(args, cfg)
    if out is not None:
        _write(out / "cost.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
        _write(out / "cost.csv", hwcost.CostReport.to_csv([report]))
    _emit(doc, [
        ("t_total [cycles]", report.t_total_cycles),
        ("t_total [s]", f"{report.t_total_s:.6g}"),
        ("P_total [W]", f"{report.P_total:.6g}"),
        ("E_total [J]", f"{report.E_total:.6g}"),
        ("throughput [1/s]", f"{report.throughput:.6g}"),
        ("resources", report.resources),
        ("sigma", " ".join(map(str, report.sigma))),
    ])
    return 0


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    calib = _calibration(args, cfg)
    kind, design, sigma0 = _load_design(args.design)
    if kind == "stages":
        costs = design
        result = pipesim.simulate_costs(costs, args.fifo_depth, sigma0, trace=args.trace)
    else:
        shapes = infer_shapes(design)
        unroll = _unroll(args.unroll, design, args.budget, calib)
        costs = hwcost.topology_costs(design, unroll, shapes)
        result = pipesim.simulate(design, shapes, costs=costs, fifo_depth=args.fifo_depth, trace=args.trace)
    analytical, sigma = hwcost.pipeline_latency(costs, sigma0)
    deviation = abs(analytical - result.total_cycles) / result.total_cycles
    duty_model = [c.t_active / analytical for c in costs]
    doc = {
        "simulation": result.to_dict(),
        "analytical_cycles": analytical,
        "sigma": list(sigma),
        "relative_deviation": deviation,
        "duty_simulated": pipesim.active_time_report(result),
        "duty_model": duty_model,
    }
    out = _out_dir(args, cfg)
    if args.trace and out is None:
        raise ConfigError("--trace needs --out (the trace is written as CSV)")
    if out is not None:
        _write(out / "simulate.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
        if args.trace:
            _write(out / "trace.csv", pipesim.trace_csv(result))
    _emit(doc, [
        ("simulated [cycles]", result.total_cycles),
        ("analytical [cycles]", analytical),
        ("relative deviation", f"{deviation:.4g}"),
    ])
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    kind, topo, _ = _load_design(args.design)
    if kind != "topology":
        raise ConfigError(f"{args.design}: eval needs a topology or genome, not a stage list")
    infer_shapes(topo)
    ds = _dataset(cfg, args, topo.input_length)
    if ds.width != topo.input_length or ds.channels != topo.input_channels:
        raise ConfigError(f"dataset shape ({ds.channels}, {ds.width}) does not match the topology input "
                          f"({topo.input_channels}, {topo.input_length})")
    tc = cfg.search.train
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    tc = replace(tc, seed=cfg.seed)
    params, val = train(topo, ds, tc)
    test = evaluate_model(params, topo, *ds.subset("test"))
    doc = {"validation": val.to_dict(), "test": test.to_dict(), "parameters": params.count()}
    out = _out_dir(args, cfg)
    if out is not None:
        save_params(params, topo, out / "model.snp")
        _write(out / "metrics.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _emit(doc, [
        ("split", "detection  false_alarm  accuracy"),
        ("validation", f"{val.detection_rate:.3f}      {val.false_alarm_rate:.3f}        {val.accuracy:.3f}"),
        ("test", f"{test.detection_rate:.3f}      {test.false_alarm_rate:.3f}        {test.accuracy:.3f}"),
    ])
    return 0


def cmd_profile(args) -> int:
    cfg = _run_config(args)
    try:
        params, topo = load_params(args.model)
    except OSError as exc:
        raise ConfigError(f"cannot read model {args.model}: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise ParseError(f"{args.model}: {exc}") from exc
    ds = _dataset(cfg, args, topo.input_length)
    x_cal, _ = ds.subset("train")
    x_te, y_te = ds.subset("test")
    prof = quantprofiler.profile(params, topo, x_cal)
    rows = []
    out = _out_dir(args, cfg)
    for bits in sorted(set(args.bits)):
        formats = quantprofiler.assign_bits(prof, bits)
        stats = quantprofiler.SaturationStats()
        quantprofiler.simulate_fixed_point(params, topo, formats, x_te, y_te, stats)
        drift = quantprofiler.accuracy_drift(params, topo, formats, x_te, y_te)
        rows.append({"total_bits": bits, "accuracy_drift": drift, "saturated_values": stats.total})
        if out is not None:
            _write(out / f"formats_{bits}.json", formats.to_json() + "\n")
    doc = {"drift": rows, "ranges": prof.to_dict()}
    if out is not None:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["total_bits", "accuracy_drift", "saturated_values"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        _write(out / "drift.csv", buf.getvalue())
    _emit(doc, [("bits", "drift  saturated")] + [
        (str(r["total_bits"]), f"{r['accuracy_drift']:.4f} {r['saturated_values']}") for r in rows])
    return 0


FRONT_FIELDS = ("id", "generation", "parent", "depth", "meets_limits") + ALL_OBJECTIVES + ("accuracy",)


def front_csv(archive: ParetoArchive, detection: float, false_alarm: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FRONT_FIELDS)
    for m in archive.sorted_members():
        vals = dict(m.cheap.values)
        vals.update(m.expensive)
        w.writerow([m.id, m.generation, "" if m.parent is None else m.parent, m.genome.depth,
                    int(m.meets_limits(detection, false_alarm))]
                   + [repr(float(vals[k])) for k in ALL_OBJECTIVES] + [repr(float(vals["accuracy"]))])
    return buf.getvalue()


def summary_rows(archive: ParetoArchive, detection: float, false_alarm: float) -> list[dict]:
    rows = []
    for target, objective, alpha in SUMMARY_TARGETS:
        m: Individual | None = pick(archive, objective, detection, false_alarm)
        if m is None:
            continue
        v = m.cheap.values
        t = v[f"latency_{alpha}"]
        rows.append({
            "target": target,
            "id": m.id,
            "unrolling": alpha,
            "depth": m.genome.depth,
            "params": int(v["params"]),
            "detection": -m.expensive["neg_detection"],
            "false_alarm": m.expensive["false_alarm"],
            "latency_s": t,
            "power_w": v[f"power_{alpha}"],
            "energy_j": v[f"energy_{alpha}"],
            "throughput": 1.0 / t,
            "meets_limits": m.meets_limits(detection, false_alarm),
        })
    return rows


def cmd_search(args) -> int:
    cfg = _run_config(args)
    if cfg.output_dir is None:
        raise ConfigError("search needs an output directory (--out or output_dir in the config)")
    ds = cfg.dataset.load()
    out = _out_dir(args, cfg)
    if args.resume is None:
        (out / "run_log.jsonl").unlink(missing_ok=True)
        for old in (out / "checkpoints").glob("gen_*.json") if (out / "checkpoints").exists() else ():
            old.unlink()
    sc = cfg.search
    result = run_search(sc, ds, out, cfg.calibration, resume=args.resume)
    archive = result.archive
    members = [m.to_dict() for m in archive.sorted_members()]
    _write(out / "archive.json", json.dumps({
        "schema": "streamnas.archive/1",
        "objectives": list(archive.objectives),
        "members": members,
    }, indent=1, sort_keys=True) + "\n")
    _write(out / "front.csv", front_csv(archive, sc.detection_limit, sc.false_alarm_limit))
    rows = summary_rows(archive, sc.detection_limit, sc.false_alarm_limit)
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write(out / "summary.csv", buf.getvalue())
    doc = {
        "archive_size": len(archive),
        "meeting_limits": sum(m.meets_limits(sc.detection_limit, sc.false_alarm_limit) for m in archive),
        "training_runs": sum(result.training_runs.values()),
        "summary": rows,
        "files": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()),
    }
    _emit(doc, [("target", "id  P[W]  E[J]  throughput[1/s]  det  fa")] + [
        (r["target"], f"{r['id']}  {r['power_w']:.4g}  {r['energy_j']:.4g}  {r['throughput']:.4g}  "
                      f"{r['detection']:.3f}  {r['false_alarm']:.3f}") for r in rows])
    return 0


# entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="seed overriding the configuration")
    common.add_argument("--workers", type=int, help="training worker processes (default 1)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--trace", action="store_true", help="write pipeline simulation traces as CSV")

    p = argparse.ArgumentParser(prog="streamnas", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", parents=[common], help="run the evolutionary search")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_search)

    for name, func, text in (("cost", cmd_cost, "analytical latency/power/energy"),
                             ("simulate", cmd_simulate, "event-driven pipeline simulation")):
        c = sub.add_parser(name, parents=[common], help=text)
        c.add_argument("design", help="topology, genome or stage-list JSON")
        c.add_argument("--unroll", help="min | max | min_energy | max_throughput | unroll JSON file")
        c.add_argument("--calib", help="calibration table JSON")
        c.add_argument("--budget", type=int, default=hwcost.DEFAULT_BUDGET)
        if name == "simulate":
            c.add_argument("--fifo-depth", type=int)
        c.set_defaults(func=func)

    pr = sub.add_parser("profile", parents=[common], help="fixed-point range profiling and drift")
    pr.add_argument("model", help="trained parameter container (from eval --out)")
    pr.add_argument("--bits", type=int, nargs="+", default=[8, 12, 16, 32])
    pr.set_defaults(func=cmd_profile)

    e = sub.add_parser("eval", parents=[common], help="train one topology and report metrics")
    e.add_argument("design", help="topology or genome JSON")
    e.add_argument("--epochs", type=int)
    e.set_defaults(func=cmd_eval)
    return p


def _log_level() -> int:
    raw = os.environ.get("HALF_LOG", "WARNING")
    if raw.isdigit():
        return int(raw)
    level = logging.getLevelName(raw.upper())
    return level if isinstance(level, int) else logging.WARNING


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=_log_level(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StreamNASError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
