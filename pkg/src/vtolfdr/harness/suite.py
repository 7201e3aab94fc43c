"""Failure-case battery: informed vs. unaware recovery plus a detection batch."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from ..detector import DetectionMetrics, DetectorConfig
from ..sim.scenario import Scenario, ScenarioError, load_scenario, run_scenario
from .report import RunReport, write_json, write_run

log = logging.getLogger(__name__)

MANIFEST = Path(__file__).resolve().parent / "suite.json"
METRICS = ("accuracy", "precision", "recall")


def load_manifest(path: str | Path | None = None) -> dict:
    p = MANIFEST if path is None else Path(path)
    try:
        with open(p, encoding="utf-8") as fh:
            m = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: {exc}") from exc
    if m.get("schema_version", 1) != 1:
        raise ScenarioError(f"unsupported suite schema_version {m['schema_version']}")
    if not isinstance(m.get("battery"), list):
        raise ScenarioError("suite manifest needs a 'battery' list")
    unknown = set(m.get("floors", {})) - set(METRICS)
    if unknown:
        raise ScenarioError(f"unknown metric floors: {sorted(unknown)}")
    return m


@dataclass(frozen=True)
class Job:
    kind: str  # "informed", "baseline" or "detection"
    case: str
    scenario: Scenario


def plan_jobs(manifest: Mapping, cases: list[str] | None = None, seed: int | None = None,
              detection: bool = True) -> list[Job]:
    battery = list(manifest["battery"])
    if cases:
        missing = [c for c in cases if c not in battery]
        if missing:
            raise ScenarioError(f"not in the battery: {missing}")
        battery = [c for c in battery if c in cases]
    jobs = []
    for case in battery:
        sc = load_scenario(case)
        if seed is not None:
            sc = sc.with_changes(seed=seed)
        jobs.append(Job("informed", case, sc.with_changes(awareness="informed")))
        base = manifest.get("baseline_awareness", "unaware")
        jobs.append(Job("baseline", case, sc.with_changes(name=f"{sc.name}_{base}", awareness=base)))
    det = manifest.get("detection")
    if detection and det:
        cfg = DetectorConfig.from_dict(det.get("detector", {}))
        names = det["scenarios"] if not cases else [c for c in det["scenarios"] if c in battery]
        for case in names:
            sc = load_scenario(case)
            changes = dict(name=f"{sc.name}_detect", awareness=det.get("awareness", "detected"),
                           detector=cfg, noise_std=float(det.get("noise_std", 0.0)))
            if "duration" in det:
                changes["duration"] = float(det["duration"])
            if seed is not None:
                changes["seed"] = seed
            jobs.append(Job("detection", case, sc.with_changes(**changes)))
    return jobs


def _run_job(job: Job, out_dir: str, fmt: str, tolerance: float) -> RunReport:
    result = run_scenario(job.scenario)
    return write_run(job.scenario, result, out_dir, fmt, tolerance)


@dataclass
class SuiteResult:
    reports: list[RunReport]
    rows: list[dict]
    detection: DetectionMetrics | None
    violations: list[str] = field(default_factory=list)
    report_path: Path | None = None

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": list(self.violations),
            "cases": self.rows,
            "detection": None if self.detection is None else self.detection.to_dict(),
            "runs": [r.to_dict() for r in self.reports],
        }


def run_suite(out_dir: str | Path, manifest: Mapping | None = None, cases: list[str] | None = None,
              seed: int | None = None, jobs: int = 1, fmt: str = "csv", detection: bool = True) -> SuiteResult:
    """Run the battery and write ``suite_report.json`` into ``out_dir``.

    A run is a violation when an informed scenario crashes or the pooled
    detection metrics fall below the manifest floors.
    """
    manifest = load_manifest() if manifest is None else manifest
    work = plan_jobs(manifest, cases, seed, detection)
    out = Path(out_dir)
    tolerance = float(manifest.get("detection", {}).get("tolerance", 2.0))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futures = [ex.submit(_run_job, j, str(out), fmt, tolerance) for j in work]
            reports = [f.result() for f in futures]
    else:
        reports = [_run_job(j, str(out), fmt, tolerance) for j in work]
    by_job = sorted(zip(work, reports), key=lambda jr: jr[1].scenario)

    rows, violations = [], []
    for case in dict.fromkeys(j.case for j in work if j.kind == "informed"):
        inf = next(r for j, r in by_job if j.case == case and j.kind == "informed")
        base = next(r for j, r in by_job if j.case == case and j.kind == "baseline")
        a, b = inf.recovery["max_attitude_error_deg"], base.recovery["max_attitude_error_deg"]
        rows.append({
            "case": case,
            "informed_crash": inf.crashed,
            "baseline_crash": base.crashed,
            "informed_max_attitude_error_deg": a,
            "baseline_max_attitude_error_deg": b,
            "informed_better": a is not None and b is not None and a < b,
            "convergence_time": inf.recovery["convergence_time"],
        })
        if inf.crashed:
            violations.append(f"{case}: crashed with the informed allocator")

    det_reports = [r for j, r in by_job if j.kind == "detection"]
    pooled = None
    if det_reports:
        pooled = DetectionMetrics()
        for r in det_reports:
            pooled = pooled + DetectionMetrics.from_dict(r.detector)
        for name, floor in manifest.get("floors", {}).items():
            value = getattr(pooled, name)
            if value < floor:
                violations.append(f"detection {name} {value:.4f} below floor {floor}")

    res = SuiteResult([r for _, r in by_job], rows, pooled, violations)
    res.report_path = write_json(out / "suite_report.json", res.to_dict())
    return res


def format_table(res: SuiteResult) -> str:
    def num(v, fmt="{:.1f}"):
        return "-" if v is None else fmt.format(v)

    lines = [f"{'case':<26}{'informed':>10}{'att_err':>9}{'unaware':>10}{'att_err':>9}{'conv_s':>8}"]
    for r in res.rows:
        lines.append(
            f"{r['case']:<26}{'CRASH' if r['informed_crash'] else 'ok':>10}{num(r['informed_max_attitude_error_deg']):>9}"
            f"{'CRASH' if r['baseline_crash'] else 'ok':>10}{num(r['baseline_max_attitude_error_deg']):>9}"
            f"{num(r['convergence_time'], '{:.2f}'):>8}"
        )
    if res.detection is not None:
        d = res.detection
        lines.append(
            f"detection: tp={d.tp} fp={d.fp} fn={d.fn} tn={d.tn} accuracy={d.accuracy:.3f} "
            f"precision={d.precision:.3f} recall={d.recall:.3f} mean_latency={num(d.mean_latency, '{:.3f}')} s"
        )
    for v in res.violations:
        lines.append(f"VIOLATION: {v}")
    return "\n".join(lines)
