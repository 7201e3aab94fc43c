"""Run reports: what one scenario run produced and where it was written."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..detector import DetectionMetrics, FaultWindow, evaluate_detections
from ..sim.scenario import Scenario, SimResult
from ..telemetry import write_csv
from .evaluation import convergence_time

DETECTION_TOLERANCE = 2.0
FORMATS = ("csv", "json")


@dataclass
class RunReport:
    scenario: str
    awareness: str
    recovery: dict
    detector: dict | None = None
    artifacts: dict[str, str] = field(default_factory=dict)

    @property
    def crashed(self) -> bool:
        return bool(self.recovery["crash"])

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "awareness": self.awareness, "recovery": self.recovery,
                "detector": self.detector, "artifacts": dict(self.artifacts)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["scenario"], d["awareness"], d["recovery"], d.get("detector"), d.get("artifacts", {}))


def fault_windows(scenario: Scenario) -> list[FaultWindow]:
    """One open-ended window from the first injection; failures are never repaired in flight."""
    if not scenario.failures:
        return []
    return [FaultWindow(min(f.time for f in scenario.failures))]


def detection_metrics(scenario: Scenario, result: SimResult,
                      tolerance: float = DETECTION_TOLERANCE) -> DetectionMetrics | None:
    if scenario.detector is None:
        return None
    return evaluate_detections(result.events, fault_windows(scenario), tolerance)


def recovery_summary(result: SimResult, band: float = 0.05) -> dict:
    s = result.summary
    t_inj = s["injection_time"]
    conv = None
    if t_inj is not None and not result.crashed:
        conv = convergence_time(result.log, t_inj, band)
    return {
        "crash": s["crash"],
        "crash_time": s["crash_time"],
        "aborted": s["aborted"],
        "max_attitude_error_deg": s["max_attitude_error_deg"],
        "final_position_error": s["final_position_error"],
        "convergence_time": conv,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(data), fh, indent=2)
        fh.write("\n")
    return path


def write_telemetry(path: Path, log: dict, fmt: str = "csv") -> Path:
    if fmt == "csv":
        return write_csv(path, log)
    if fmt == "json":
        # repr-exact floats; NaN is kept as the JSON extension literal
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({k: np.asarray(v, dtype=float).tolist() for k, v in log.items()}, fh)
        return path
    raise ValueError(f"format must be one of {FORMATS}")


def write_run(scenario: Scenario, result: SimResult, out_dir: str | Path, fmt: str | None = None,
              tolerance: float = DETECTION_TOLERANCE) -> RunReport:
    """Write ``<name>.<fmt>`` and ``<name>_summary.json`` and return the run report."""
    fmt = fmt or scenario.output.get("format", "csv")
    out = Path(out_dir)
    tel_path = write_telemetry(out / f"{scenario.name}.{fmt}", result.log, fmt)
    metrics = detection_metrics(scenario, result, tolerance)
    report = RunReport(
        scenario=scenario.name,
        awareness=scenario.awareness,
        recovery=recovery_summary(result),
        detector=None if metrics is None else metrics.to_dict(),
    )
    summary = {**result.summary, "convergence_time": report.recovery["convergence_time"],
               "detection": report.detector}
    sum_path = write_json(out / f"{scenario.name}_summary.json", summary)
    report.artifacts = {"telemetry": str(tel_path), "summary": str(sum_path)}
    return report
