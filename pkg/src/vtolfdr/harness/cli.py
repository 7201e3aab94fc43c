"""``vtolfdr`` command line.

Exit codes: 0 success, 1 usage error, 2 input that cannot be parsed,
3 runtime failure (aborted simulation, failed allocation, or a suite check
that did not hold).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from ..alloc import ActuatorFailure, ActuatorLayout, AllocationError, FailureSet, allocate
from ..detector import DetectorConfig, FaultWindow, MissingColumnError, evaluate_detections, run_offline
from ..sim.scenario import AWARENESS, ScenarioError, load_scenario, run_scenario
from ..telemetry import TelemetryParseError, read_csv, write_csv
from .plot import write_plots
from .report import FORMATS, RunReport, write_json, write_run
from .suite import format_table, load_manifest, run_suite

log = logging.getLogger("vtolfdr")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None


def _print_json(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=False, default=float))


# ---------------------------------------------------------------------------
# simulate


def _simulate_one(path: str, out: str, seed: int | None, fmt: str | None, awareness: str | None) -> RunReport:
    sc = load_scenario(path)
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if awareness is not None:
        changes["awareness"] = awareness
        changes["name"] = f"{sc.name}_{awareness}" if awareness != sc.awareness else sc.name
    if changes:
        sc = sc.with_changes(**changes)
    return write_run(sc, run_scenario(sc), out, fmt)


def cmd_simulate(args) -> int:
    for p in args.scenarios:
        load_scenario(p)  # fail on a bad file before any run starts
    if args.jobs > 1 and len(args.scenarios) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            futures = [ex.submit(_simulate_one, p, args.out, args.seed, args.format, args.awareness)
                       for p in args.scenarios]
            reports = [f.result() for f in futures]
    else:
        reports = [_simulate_one(p, args.out, args.seed, args.format, args.awareness) for p in args.scenarios]
    status = EXIT_OK
    for r in sorted(reports, key=lambda r: r.scenario):
        rec = r.recovery
        conv = rec["convergence_time"]
        print(f"{r.scenario}: crash={rec['crash']} max_att_err={rec['max_attitude_error_deg']:.2f} deg "
              f"final_pos_err={rec['final_position_error']:.3f} m "
              f"convergence={'-' if conv is None else f'{conv:.2f} s'} -> {r.artifacts['telemetry']}")
        if rec["aborted"]:
            log.error("%s aborted: %s", r.scenario, rec["aborted"])
            status = EXIT_RUNTIME
    return status


# ---------------------------------------------------------------------------
# detect


def _parse_window(text: str) -> FaultWindow:
    try:
        start, _, end = text.partition(":")
        return FaultWindow(float(start), float(end) if end else None)
    except ValueError:
        raise UsageError(f"--truth expects START or START:END, got {text!r}") from None


def cmd_detect(args) -> int:
    truth = sorted(map(_parse_window, args.truth), key=lambda w: w.start) if args.truth else None
    try:
        table = read_csv(args.log)
    except FileNotFoundError:
        raise InputError(f"{args.log}: no such file") from None
    cfg_data = _read_json(args.config) if args.config else {}
    if "detector" in cfg_data and isinstance(cfg_data["detector"], dict):
        # a scenario file: use its detector section minus the sim-only switches
        cfg_data = {k: v for k, v in cfg_data["detector"].items() if k not in ("enabled", "noise_std")}
    try:
        cfg = DetectorConfig.from_dict(cfg_data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"detector config: {exc}") from None
    try:
        res = run_offline(table, cfg)
    except MissingColumnError:
        raise
    except ValueError as exc:  # non-monotone or non-finite time column
        raise InputError(f"{args.log}: {exc}") from None
    events = [{"time": e.time, "channel": e.channel, "z_score": e.z_score, "residual": e.residual}
              for e in res.events]
    doc = {"log": str(args.log), "events": events, "skipped_rows": res.skipped}
    if truth is not None:
        m = evaluate_detections(res.events, truth, args.tolerance)
        doc["metrics"] = m.to_dict()
    if args.out:
        out = Path(args.out)
        stem = Path(args.log).stem
        for name, tr in res.traces.items():
            if args.format == "json":
                write_json(out / f"{stem}_trace_{name}.json", {k: np.asarray(v, dtype=float).tolist() for k, v in tr.items()})
            else:
                write_csv(out / f"{stem}_trace_{name}.csv", tr)
        write_json(out / f"{stem}_events.json", doc)
    _print_json(doc)
    return EXIT_OK


# ---------------------------------------------------------------------------
# alloc


def _layout_from_problem(p: dict, n: int) -> ActuatorLayout:
    d = dict(p.get("layout") or {})
    d.setdefault("names", [f"u{i}" for i in range(n)])
    for key, default in (("u_min", -np.inf), ("u_max", np.inf)):
        d.setdefault(key, [default] * n)
    return ActuatorLayout.from_dict(d)


def _failures_from_problem(entries, layout: ActuatorLayout) -> FailureSet:
    out = []
    for e in entries or []:
        idx = e["index"] if "index" in e else layout.index(e["actuator"])
        out.append(ActuatorFailure(int(idx), e["mode"], e.get("value")))
    return FailureSet(out)


def cmd_alloc(args) -> int:
    p = _read_json(args.problem)
    try:
        B = np.asarray(p["B"], dtype=float)
        if B.ndim != 2:
            raise ValueError("B must be a matrix")
        dw = np.asarray(p["dw"], dtype=float)
        layout = _layout_from_problem(p, B.shape[1])
        R = p.get("R")
        R = None if R is None else np.asarray(R, dtype=float)
        failures = _failures_from_problem(p.get("failures"), layout)
        u_prev = p.get("u_prev")
        dt = p.get("dt")
        mask = p.get("row_mask")
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.problem}: invalid allocation problem: {exc!r}") from None
    try:
        res = allocate(B, dw, layout, R, failures, u_prev, dt, mask)
    except ValueError as exc:
        raise InputError(f"{args.problem}: {exc}") from None
    doc = {"names": list(layout.names), **res.to_dict()}
    if args.out:
        write_json(Path(args.out) / f"{Path(args.problem).stem}_result.json", doc)
    _print_json(doc)
    return EXIT_OK


# ---------------------------------------------------------------------------
# suite


def cmd_suite(args) -> int:
    manifest = load_manifest(args.config)
    if args.all and args.cases:
        raise UsageError("suite: give case names or --all, not both")
    res = run_suite(args.out, manifest, None if args.all else args.cases or None, args.seed, args.jobs,
                    args.format, detection=not args.no_detection)
    print(format_table(res))
    print(f"report: {res.report_path}")
    return EXIT_OK if res.ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# plot


def cmd_plot(args) -> int:
    try:
        table = read_csv(args.log)
    except FileNotFoundError:
        raise InputError(f"{args.log}: no such file") from None
    if "time" not in table:
        raise InputError(f"{args.log}: no time column")
    out = Path(args.out) if args.out else Path(args.log).with_suffix("")
    paths = write_plots(table, out, None if args.threshold <= 0 else args.threshold)
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="vtolfdr", description="Fault detection and failure-aware allocation for a tiltrotor VTOL.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="run scenario files (or bundled scenario names)")
    s.add_argument("scenarios", nargs="+")
    s.add_argument("--out", default="out")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--format", choices=FORMATS)
    s.add_argument("--awareness", choices=AWARENESS, help="override the allocator's failure knowledge")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("detect", help="replay the detector over a telemetry CSV")
    d.add_argument("log")
    d.add_argument("--config", help="detector config JSON (or a scenario file with a detector section)")
    d.add_argument("--truth", action="append", metavar="START[:END]", help="labelled fault window")
    d.add_argument("--tolerance", type=float, default=2.0)
    d.add_argument("--out")
    d.add_argument("--format", choices=FORMATS, default="csv")
    d.set_defaults(func=cmd_detect)

    a = sub.add_parser("alloc", help="solve one allocation problem given as JSON")
    a.add_argument("problem")
    a.add_argument("--out")
    a.set_defaults(func=cmd_alloc)

    u = sub.add_parser("suite", help="run the failure-case battery")
    u.add_argument("cases", nargs="*")
    u.add_argument("--all", action="store_true", help="every case in the manifest (the default)")
    u.add_argument("--config", help="suite manifest JSON")
    u.add_argument("--out", default="suite_out")
    u.add_argument("--seed", type=int)
    u.add_argument("--jobs", type=int, default=1)
    u.add_argument("--format", choices=FORMATS, default="csv")
    u.add_argument("--no-detection", action="store_true", help="skip the detection batch")
    u.set_defaults(func=cmd_suite)

    p = sub.add_parser("plot", help="SVG charts from a telemetry CSV")
    p.add_argument("log")
    p.add_argument("--out")
    p.add_argument("--threshold", type=float, default=5.0, help="z-score threshold line (<= 0 hides it)")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("--jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except MissingColumnError as exc:
        print(f"error: telemetry has no column {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ScenarioError, TelemetryParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AllocationError as exc:
        print(f"allocation failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
