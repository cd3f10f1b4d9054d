"""Command-line front end.

Every subcommand writes a tab-separated report whose leading ``#`` lines carry
the run manifest (subcommand, parameters, input digests, seed, version,
outputs). Metrics are printed to 6 significant digits; ``--out FILE`` also
writes ``FILE.json`` with full-precision values. Identical manifests give
byte-identical reports.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from bellch import __version__
from bellch.accidentals import scan_curve
from bellch.analysis import (
    AnalysisParams,
    DelaySet,
    histogram_per_trial,
    partition_analysis,
    scan_delays,
    scan_partitions,
    scan_windows,
)
from bellch.ingest import (
    CompiledFormatError,
    EventFormatError,
    compile_files,
    insert_missing_openings,
    load,
    parse_events,
    sort_events,
    store,
    write_events,
)
from bellch.metrics import SETTINGS, ch_linear
from bellch.quantum import AngleSet, EntangledState
from bellch.simulator import (
    SimConfig,
    SynthTiming,
    emit_synthetic_events,
    evaluate,
    expected_ch,
    optimal_angles,
    powell_search,
)

DATA_DIR_ENV = "BELLCH_DATA_DIR"


class CliError(Exception):
    pass


def fmt(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return f"{x:.6g}"
    if x is None:
        return "none"
    return str(x)


def _jsonable(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    parameters: dict[str, Any]
    inputs: dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    version: str = __version__
    outputs: list[str] = field(default_factory=list)

    def as_dict(self) -> dict[str, Any]:
        return _jsonable(
            {
                "subcommand": self.subcommand,
                "parameters": self.parameters,
                "inputs": self.inputs,
                "seed": self.seed,
                "version": self.version,
                "outputs": self.outputs,
            }
        )


@dataclass
class Report:
    manifest: RunManifest
    sections: list[tuple[str, list[str], list[list[Any]]]] = field(default_factory=list)
    data: dict[str, Any] = field(default_factory=dict)

    def table(self, name: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
        self.sections.append((name, list(header), [list(r) for r in rows]))

    def render(self) -> str:
        m = self.manifest.as_dict()
        lines = [f"# bellch {m['subcommand']}", "# manifest: " + json.dumps(m, sort_keys=True)]
        for key in sorted(m["parameters"]):
            lines.append(f"# {key}: {fmt(m['parameters'][key])}")
        for name, header, rows in self.sections:
            lines.append("")
            lines.append(f"# table: {name}")
            lines.append("\t".join(header))
            lines.extend("\t".join(fmt(v) for v in row) for row in rows)
        return "\n".join(lines) + "\n"

    def sidecar(self) -> str:
        doc = {"manifest": self.manifest.as_dict(), "data": _jsonable(self.data)}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def resolve_input(name: str) -> Path:
    p = Path(name)
    if not p.exists() and not p.is_absolute() and os.environ.get(DATA_DIR_ENV):
        alt = Path(os.environ[DATA_DIR_ENV]) / p
        if alt.exists():
            return alt
    if not p.exists():
        raise CliError(f"input file not found: {name}")
    return p


def _inputs(paths: Sequence[Path]) -> dict[str, str]:
    return {str(p): sha256_file(p) for p in paths}


def _emit(report: Report, out: Optional[str]) -> None:
    if out:
        report.manifest.outputs = sorted(set(report.manifest.outputs) | {out, out + ".json"})
        Path(out).write_text(report.render())
        Path(out + ".json").write_text(report.sidecar())
    else:
        sys.stdout.write(report.render())


def _parse_partition(value: str) -> Optional[int]:
    if value in ("all", "whole", "none"):
        return None
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("partition size must be >= 1 or 'all'")
    return n


def _floats(value: str) -> list[float]:
    """Comma list ``0.5,1,2`` or range ``start:stop:step`` (stop inclusive)."""
    if ":" in value:
        start, stop, step = (float(v) for v in value.split(":"))
        if step <= 0:
            raise argparse.ArgumentTypeError("range step must be positive")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(n)]
    return [float(v) for v in value.split(",") if v.strip()]


def _analysis_params(args) -> AnalysisParams:
    try:
        return AnalysisParams(
            window=args.window,
            delays=DelaySet(args.delay1, args.delay2),
            partition_size=args.partition,
            averaging=args.averaging,
            counting_mode=args.mode,
            period=args.period,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _params_dict(p: AnalysisParams) -> dict[str, Any]:
    return {
        "window_us": p.window,
        "delay_1_us": p.delays.delay_1,
        "delay_2_us": p.delays.delay_2,
        "partition_size": "all" if p.partition_size is None else p.partition_size,
        "averaging": p.averaging,
        "counting_mode": p.counting_mode,
        "period_us": p.period,
    }


def _load_compiled(name: str):
    path = resolve_input(name)
    try:
        return path, load(path)
    except CompiledFormatError as exc:
        raise CliError(f"{path}: {exc}") from None


# --- subcommands ---------------------------------------------------------------


def cmd_extract(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [resolve_input(p) for p in args.inputs]
    written = []
    rows = []
    for p in paths:
        events = parse_events(p)
        n_in = len(events)
        events = insert_missing_openings(events, args.period) if args.reinsert else sort_events(events)
        target = out_dir / p.name
        write_events(target, events)
        written.append(str(target))
        rows.append([p.name, n_in, len(events)])
    manifest = RunManifest(
        "extract",
        {"period_us": args.period, "reinsert_openings": args.reinsert},
        _inputs(paths),
        outputs=written,
    )
    report = Report(manifest)
    report.table("extracted", ["file", "events_in", "events_out"], rows)
    _emit(report, args.out)
    return 0


def cmd_compile(args) -> int:
    paths = [resolve_input(p) for p in args.inputs]
    try:
        compiled = compile_files(paths)
    except ValueError as exc:
        if isinstance(exc, EventFormatError):
            raise
        raise CliError(str(exc)) from None
    store(compiled, args.output)
    manifest = RunManifest("compile", {}, _inputs(paths), outputs=[args.output])
    report = Report(manifest)
    report.table(
        "summary",
        ["setting", "total_trials"],
        [[SETTINGS[i], int(compiled.total_trials[i])] for i in range(4)],
    )
    report.table("events", ["num_detection_events", "no_preceding_opening"], [[compiled.num_detection_events, int(compiled.orphans.sum())]])
    _emit(report, args.out)
    return 0


def _ch_fields(res) -> list[Any]:
    if res is None:
        return ["insufficient", "nan", "nan"]
    return [res.ch_linear, res.ch_ratio, res.violated]


def cmd_analyze(args) -> int:
    path, compiled = _load_compiled(args.binary)
    params = _analysis_params(args)
    pa = partition_analysis(compiled, params)
    whole = sum(pa.tables[1:], pa.tables[0])
    manifest = RunManifest("analyze", _params_dict(params), _inputs([path]))
    report = Report(manifest)
    report.table(
        "counts",
        ["setting", "singles_a", "coincidences", "singles_b", "trials"],
        [[SETTINGS[i], *whole.as_matrix()[i]] for i in range(4)],
    )
    try:
        overall = ch_linear(whole, params.averaging)
    except ValueError:
        overall = None
    report.table("whole_dataset", ["ch_linear", "ch_ratio", "violated"], [_ch_fields(overall)])
    rep = pa.report
    report.table(
        "positivity",
        ["positive", "sufficient", "total", "positivity", "sigma", "dropped_out_of_window"],
        [[rep.positive, rep.sufficient, rep.total, rep.positivity if rep.defined else "undefined", rep.sigma, pa.dropped]],
    )
    if args.per_partition:
        report.table(
            "partitions",
            ["index", "ch_linear", "ch_ratio", "violated"],
            [[i, *_ch_fields(r)] for i, r in enumerate(pa.results)],
        )
    report.data = {
        "counts": whole.as_matrix(),
        "whole_dataset": None if overall is None else overall.__dict__,
        "positivity": rep.__dict__,
        "dropped": pa.dropped,
        "partitions": [None if r is None else r.__dict__ for r in pa.results],
    }
    _emit(report, args.out)
    return 0


def cmd_scan(args) -> int:
    path, compiled = _load_compiled(args.binary)
    params = _analysis_params(args)
    pdict = _params_dict(params) | {"axis": args.axis}
    report = Report(RunManifest("scan", pdict, _inputs([path])))
    if args.axis == "delay":
        if not args.grid1 or not args.grid2:
            raise CliError("delay scan needs --grid1 and --grid2")
        pdict |= {"grid1": args.grid1, "grid2": args.grid2, "objective": args.objective}
        scan = scan_delays(compiled, params, _floats(args.grid1), _floats(args.grid2), args.objective)
        report.table("surface", ["delay_1_us", "delay_2_us", args.objective], scan.triples())
        report.table("best", ["delay_1_us", "delay_2_us"], [[scan.best.delay_1, scan.best.delay_2]])
        report.data = {"surface": scan.triples(), "best": [scan.best.delay_1, scan.best.delay_2]}
    elif args.axis == "window":
        if not args.grid:
            raise CliError("window scan needs --grid")
        pdict["grid"] = args.grid
        try:
            rows = scan_windows(compiled, params, _floats(args.grid))
        except ValueError as exc:
            raise CliError(str(exc)) from None
        _positivity_table(report, "window_us", rows)
    elif args.axis == "partition":
        if not args.grid:
            raise CliError("partition scan needs --grid")
        pdict["grid"] = args.grid
        sizes = [_parse_partition(v) for v in args.grid.split(",")]
        _positivity_table(report, "partition_size", scan_partitions(compiled, params, sizes))
    elif args.axis == "coincidence-window":
        if not args.grid:
            raise CliError("coincidence-window scan needs --grid (ns)")
        pdict |= {"grid": args.grid, "knee_ns": args.knee, "fraction": args.fraction}
        curve = scan_curve(
            compiled, params.delays, _floats(args.grid), knee=args.knee, fraction=args.fraction,
            averaging=params.averaging, period=params.period,
        )
        header = ["window_ns"] + [f"C_{s}" for s in SETTINGS] + ["ch"] + [f"dCdW_{s}" for s in SETTINGS]
        rows = [[w, *curve.counts[k], curve.ch[k], *curve.slopes[k]] for k, w in enumerate(curve.windows)]
        report.table("curve", header, rows)
        report.table("assessment", ["accidentals_negligible"], [[curve.accidentals_negligible]])
        report.data = {"curve": rows, "accidentals_negligible": curve.accidentals_negligible}
    _emit(report, args.out)
    return 0


def _positivity_table(report: Report, key: str, rows) -> None:
    out = []
    for value, pa in rows:
        rep = pa.report
        out.append(
            [
                "all" if value is None else value,
                rep.positivity if rep.defined else "insufficient",
                rep.positive,
                rep.sufficient,
                rep.total - rep.sufficient,
                rep.total,
                rep.sigma,
            ]
        )
    report.table("positivity", [key, "positivity", "positive", "sufficient", "insufficient", "total", "sigma"], out)
    report.data = {"rows": out}


def cmd_histogram(args) -> int:
    path, compiled = _load_compiled(args.binary)
    args.partition = None
    args.averaging = False
    args.mode = "full"
    params = _analysis_params(args)
    hist = histogram_per_trial(compiled, params, args.side, include_empty=args.include_empty)
    pdict = _params_dict(params) | {"side": args.side, "include_empty": args.include_empty}
    report = Report(RunManifest("histogram", pdict, _inputs([path])))
    report.table("histogram", ["detections", "trials"], sorted(hist.items()))
    report.data = {"histogram": hist}
    _emit(report, args.out)
    return 0


def _prediction_rows(report: Report, res, extra: dict[str, Any]) -> None:
    report.table(
        "prediction",
        ["mean_ch", "mean_ratio", "positivity", "replicates", "runs"],
        [[res.mean_ch, res.mean_ratio, res.positivity, res.replicates, res.runs]],
    )
    report.table("angles", ["a1", "a2", "b1", "b2"], [list(res.angles.as_tuple())])
    report.data = {"prediction": res.__dict__ | {"angles": list(res.angles.as_tuple())}, **extra}


def _angles_arg(values: Optional[list[float]], state, args) -> AngleSet:
    if values is not None:
        return AngleSet(*values)
    return optimal_angles(state, args.efficiency, args.noise, args.averaging, seed=args.seed)


def cmd_simulate(args) -> int:
    state = _state(args.r)
    angles = _angles_arg(args.angles, state, args)
    cfg = _sim_config(args, state, angles)
    res = evaluate(cfg, replicates=args.replicates)
    exp_ch, exp_ratio = expected_ch(cfg)
    pdict = _sim_params(args) | {"angles": list(angles.as_tuple()), "replicates": args.replicates}
    report = Report(RunManifest("simulate", pdict, seed=args.seed))
    _prediction_rows(report, res, {"expected_ch": exp_ch, "expected_ratio": exp_ratio})
    report.table("expected", ["expected_ch", "expected_ratio"], [[exp_ch, exp_ratio]])
    _emit(report, args.out)
    return 0


def cmd_search(args) -> int:
    state = _state(args.r)
    if args.restarts < 1:
        raise CliError("--restarts must be >= 1")
    res = powell_search(
        state, args.efficiency, args.noise, args.partition, args.averaging, args.restarts, args.seed,
        runs=args.runs, replicates=args.replicates, workers=args.workers,
    )
    pdict = _sim_params(args) | {"restarts": args.restarts, "replicates": args.replicates}
    report = Report(RunManifest("search", pdict, seed=args.seed))
    _prediction_rows(report, res, {"search_value": res.search_value})
    _emit(report, args.out)
    return 0


def cmd_synth(args) -> int:
    state = _state(args.r)
    angles = _angles_arg(args.angles, state, args)
    cfg = _sim_config(args, state, angles)
    timing = SynthTiming(
        period=args.period, window=args.opening, delay_1=args.delay1, delay_2=args.delay2,
        jitter=args.jitter, order=args.order, drop_alternate_openings=args.drop_alternate,
    )
    text = emit_synthetic_events(cfg, timing, args.trials_per_setting)
    Path(args.output).write_text(text)
    pdict = _sim_params(args) | {
        "angles": list(angles.as_tuple()),
        "period_us": args.period,
        "opening_us": args.opening,
        "delay_1_us": args.delay1,
        "delay_2_us": args.delay2,
        "jitter_ns": args.jitter,
        "order": args.order,
        "drop_alternate_openings": args.drop_alternate,
        "trials_per_setting": args.trials_per_setting,
    }
    report = Report(RunManifest("synth", pdict, seed=args.seed, outputs=[args.output]))
    report.table("synth", ["lines"], [[text.count("\n")]])
    report.table("angles", ["a1", "a2", "b1", "b2"], [list(angles.as_tuple())])
    _emit(report, args.out)
    return 0


def _state(r: float) -> EntangledState:
    try:
        return EntangledState(r)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _sim_config(args, state, angles) -> SimConfig:
    try:
        return SimConfig(
            state, angles, args.efficiency, args.noise, args.partition, args.runs, args.seed, args.averaging
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _sim_params(args) -> dict[str, Any]:
    return {
        "r": args.r,
        "efficiency": args.efficiency,
        "noise": args.noise,
        "partition_size": args.partition,
        "runs": args.runs,
        "averaging": args.averaging,
        "seed": args.seed,
        "counting_mode": "full",
    }


# --- parser --------------------------------------------------------------------


def _add_analysis_opts(p: argparse.ArgumentParser, partition: bool = True) -> None:
    p.add_argument("binary", help="compiled event file")
    p.add_argument("--window", type=float, default=2.5, help="opening window, microseconds (default 2.5)")
    p.add_argument("--delay1", type=float, default=0.0, help="side-1 delay, microseconds")
    p.add_argument("--delay2", type=float, default=0.0, help="side-2 delay, microseconds")
    p.add_argument("--period", type=float, default=40.0, help="opening period, microseconds (default 40)")
    if partition:
        p.add_argument("--partition", type=_parse_partition, default=10_000, help="detection events per partition, or 'all'")
        p.add_argument("--averaging", action="store_true", help="pool singles over runs sharing a setting")
        p.add_argument("--mode", choices=("full", "legacy"), default="full", help="counting mode")


def _add_sim_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--r", type=float, default=0.26, help="state maximality (default 0.26)")
    p.add_argument("--efficiency", type=float, default=0.75)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--partition", type=int, default=10_000, help="trials per setting per run")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--averaging", action="store_true")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bellch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"bellch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="sort event text files and reinsert missing openings")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--period", type=float, default=40.0, help="recorded opening period, microseconds")
    p.add_argument("--no-reinsert", dest="reinsert", action="store_false", help="do not add missing openings")
    p.add_argument("--out", help="report file (default stdout)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("compile", help="compile event text files into one binary file")
    p.add_argument("inputs", nargs="+", help="event text files, concatenated in the given order")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--out", help="report file (default stdout)")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("analyze", help="counts, CH metrics and positivity")
    _add_analysis_opts(p)
    p.add_argument("--per-partition", action="store_true", help="list every partition's metrics")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("scan", help="positivity or metric over a parameter grid")
    _add_analysis_opts(p)
    p.add_argument("--axis", choices=("window", "delay", "partition", "coincidence-window"), required=True)
    p.add_argument("--grid", help="values: 'a,b,c' or 'start:stop:step'")
    p.add_argument("--grid1", help="side-1 delays for --axis delay")
    p.add_argument("--grid2", help="side-2 delays for --axis delay")
    p.add_argument("--objective", choices=("ch", "coincidences"), default="ch")
    p.add_argument("--knee", type=float, default=500.0, help="ns; slopes beyond must be negligible")
    p.add_argument("--fraction", type=float, default=0.05, help="negligible slope as a fraction of C/W")
    p.add_argument("--out")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("histogram", help="detections-per-trial histogram for one side")
    _add_analysis_opts(p, partition=False)
    p.add_argument("--side", type=int, choices=(1, 2), default=1)
    p.add_argument("--include-empty", action="store_true", help="count openings without detections under 0")
    p.add_argument("--out")
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("simulate", help="quantum joint prediction at given (or optimal) angles")
    _add_sim_opts(p)
    p.add_argument("--angles", type=float, nargs=4, metavar=("A1", "A2", "B1", "B2"))
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("search", help="Powell search of the angle space")
    _add_sim_opts(p)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("synth", help="write a synthetic event text file")
    _add_sim_opts(p)
    p.add_argument("--angles", type=float, nargs=4, metavar=("A1", "A2", "B1", "B2"))
    p.add_argument("--trials-per-setting", type=int, default=None)
    p.add_argument("--period", type=float, default=40.0)
    p.add_argument("--opening", type=float, default=2.0, help="opening duration, microseconds")
    p.add_argument("--delay1", type=float, default=0.0)
    p.add_argument("--delay2", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0, help="ns")
    p.add_argument("--order", choices=("cycle", "block", "random"), default="cycle")
    p.add_argument("--drop-alternate", action="store_true", help="omit every second opening")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, EventFormatError, CompiledFormatError, OSError) as exc:
        print(f"bellch: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
