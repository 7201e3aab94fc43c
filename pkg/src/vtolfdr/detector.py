"""Online fault detection from commanded/measured signal pairs.

Each channel fits an ARX model of ``output`` against ``input`` with
exponentially weighted recursive least squares. The one-step prediction
error is standardized against its running statistics; a sustained large
Z-score raises a :class:`DetectionEvent`.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .telemetry import Table

log = logging.getLogger(__name__)


class InsufficientHistoryError(RuntimeError):
    """The channel has not yet seen enough samples to form a regressor."""


class NonFiniteSampleError(ValueError):
    """A NaN or infinite value reached an estimator or monitor update."""


class MissingColumnError(KeyError):
    pass


# ---------------------------------------------------------------------------
# Model and state types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArxConfig:
    """ARX model orders: ``na`` output lags, ``nb`` input lags, ``nk`` dead time."""

    na: int = 2
    nb: int = 2
    nk: int = 1

    def __post_init__(self):
        for name in ("na", "nb", "nk"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")
        if self.na + self.nb < 1:
            raise ValueError("na + nb must be at least 1")

    @property
    def n_params(self) -> int:
        return self.na + self.nb

    @property
    def fill_samples(self) -> int:
        """Samples needed before the first regressor can be formed."""
        return max(self.na, self.nb + self.nk)


@dataclass
class RlsEstimator:
    config: ArxConfig
    theta: np.ndarray
    cov: np.ndarray
    forgetting: float = 0.995
    samples_seen: int = 0

    @classmethod
    def create(cls, config: ArxConfig, forgetting: float = 0.995, cov_init: float = 1e6) -> "RlsEstimator":
        if not 0.0 < forgetting <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")
        if cov_init <= 0:
            raise ValueError("cov_init must be positive")
        n = config.n_params
        return cls(config, np.zeros(n), cov_init * np.eye(n), float(forgetting))


@dataclass
class ResidualMonitor:
    """Running residual statistics and the debounced Z-score alarm.

    Statistics are exponentially weighted with ``smoothing``. While fewer than
    ``1 / (1 - smoothing)`` samples have been absorbed the weight is ``1/(n+1)``
    (an exact running mean/variance), except that during warm-up the
    effective memory is capped at ``warmup_memory`` samples so the large
    residuals of a still-converging estimator are flushed before alarms arm.
    """

    warmup_samples: int = 200
    z_threshold: float = 5.0
    debounce: int = 3
    smoothing: float = 0.999
    sigma_floor: float = 1e-6
    warmup_memory: int = 20
    mean: float = 0.0
    var: float = 0.0
    count: int = 0
    over_count: int = 0
    latched: bool = False

    def __post_init__(self):
        if self.z_threshold <= 0:
            raise ValueError("z_threshold must be positive")
        if self.debounce < 1:
            raise ValueError("debounce must be at least 1")
        if not 0.0 < self.smoothing < 1.0:
            raise ValueError("smoothing must lie in (0, 1)")
        if self.warmup_samples < 0 or self.warmup_memory < 1:
            raise ValueError("warmup_samples must be >= 0 and warmup_memory >= 1")

    @property
    def armed(self) -> bool:
        return self.count >= self.warmup_samples

    def reset_alarm(self) -> None:
        self.over_count = 0
        self.latched = False


@dataclass(frozen=True)
class DetectionEvent:
    time: float
    channel: str
    z_score: float
    residual: float


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    input_signal: str
    output_signal: str


@dataclass
class DetectorChannel:
    name: str
    input_signal: str
    output_signal: str
    estimator: RlsEstimator
    monitor: ResidualMonitor
    # most recent first; inputs include the current sample once pushed
    y_hist: deque = field(default_factory=deque)
    u_hist: deque = field(default_factory=deque)
    last_prediction: float = math.nan
    last_residual: float = math.nan
    last_z: float = math.nan
    last_alarmed: bool = False

    def __post_init__(self):
        cfg = self.estimator.config
        self.y_hist = deque(self.y_hist, maxlen=cfg.na)
        self.u_hist = deque(self.u_hist, maxlen=cfg.nb + cfg.nk)

    @property
    def config(self) -> ArxConfig:
        return self.estimator.config

    @property
    def history_full(self) -> bool:
        cfg = self.config
        return len(self.y_hist) == cfg.na and len(self.u_hist) == cfg.nb + cfg.nk


@dataclass
class DetectorConfig:
    arx: ArxConfig = field(default_factory=ArxConfig)
    forgetting: float = 0.995
    cov_init: float = 1e6
    smoothing: float = 0.999
    sigma_floor: float = 1e-6
    z_threshold: float = 5.0
    debounce: int = 3
    warmup_samples: int = 200
    warmup_memory: int = 20
    channels: list[ChannelSpec] = field(default_factory=lambda: list(DEFAULT_CHANNELS))

    @classmethod
    def from_dict(cls, data: Mapping) -> "DetectorConfig":
        data = dict(data)
        data.pop("schema_version", None)
        data.pop("enabled", None)
        arx = data.pop("arx", None)
        channels = data.pop("channels", None)
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown detector config keys: {sorted(unknown)}")
        cfg = cls(**data)
        if arx is not None:
            cfg.arx = ArxConfig(**arx)
        if channels is not None:
            cfg.channels = [
                ChannelSpec(c["name"], c["input"], c["output"]) if isinstance(c, Mapping) else ChannelSpec(*c)
                for c in channels
            ]
        return cfg

    def to_dict(self) -> dict:
        return {
            "arx": {"na": self.arx.na, "nb": self.arx.nb, "nk": self.arx.nk},
            "forgetting": self.forgetting,
            "cov_init": self.cov_init,
            "smoothing": self.smoothing,
            "sigma_floor": self.sigma_floor,
            "z_threshold": self.z_threshold,
            "debounce": self.debounce,
            "warmup_samples": self.warmup_samples,
            "warmup_memory": self.warmup_memory,
            "channels": [{"name": c.name, "input": c.input_signal, "output": c.output_signal} for c in self.channels],
        }

    def make_channel(self, spec: ChannelSpec) -> DetectorChannel:
        return DetectorChannel(
            spec.name,
            spec.input_signal,
            spec.output_signal,
            RlsEstimator.create(self.arx, self.forgetting, self.cov_init),
            ResidualMonitor(
                warmup_samples=self.warmup_samples,
                z_threshold=self.z_threshold,
                debounce=self.debounce,
                smoothing=self.smoothing,
                sigma_floor=self.sigma_floor,
                warmup_memory=self.warmup_memory,
            ),
        )

    def make_channels(self) -> list[DetectorChannel]:
        return [self.make_channel(s) for s in self.channels]


# Allocator-predicted body torque against measured body rate, per axis.
DEFAULT_CHANNELS = (
    ChannelSpec("roll", "tau_alloc_x", "meas_p"),
    ChannelSpec("pitch", "tau_alloc_y", "meas_q"),
    ChannelSpec("yaw", "tau_alloc_z", "meas_r"),
)


# ---------------------------------------------------------------------------
# Vectorized kernels
#
# Every update runs on a leading batch axis of K independent channels. Sums
# are accumulated column by column in a fixed order, so a channel's arithmetic
# does not depend on K: the scalar API (K=1), the offline replay and the
# detector embedded in the simulator produce bit-identical numbers.
# ---------------------------------------------------------------------------


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] == 0:
        return np.zeros(a.shape[0])
    s = a[:, 0] * b[:, 0]
    for j in range(1, a.shape[1]):
        s = s + a[:, j] * b[:, j]
    return s


def _rls_kernel(theta, P, phi, y, lam):
    pred = _dot(phi, theta)
    res = y - pred
    n = theta.shape[1]
    P_phi = np.stack([_dot(P[:, i, :], phi) for i in range(n)], axis=1)
    denom = lam + _dot(phi, P_phi)
    gain = P_phi / denom[:, None]
    theta_new = theta + gain * res[:, None]
    P_new = (P - gain[:, :, None] * P_phi[:, None, :]) / lam
    P_new = 0.5 * (P_new + P_new.transpose(0, 2, 1))
    return pred, res, theta_new, P_new


def _monitor_kernel(mean, var, count, over, res, mask, p: ResidualMonitor):
    sigma = np.maximum(np.sqrt(var), p.sigma_floor)
    z = (res - mean) / sigma
    armed = count >= p.warmup_samples
    over_thr = armed & (np.abs(z) >= p.z_threshold)
    absorb = mask & ~over_thr
    capped = np.minimum(count, p.warmup_memory)
    n_eff = np.where(armed, capped + count - p.warmup_samples, capped)
    w = np.maximum(1.0 - p.smoothing, 1.0 / (n_eff + 1))
    delta = res - mean
    mean = np.where(absorb, mean + w * delta, mean)
    var = np.where(absorb, (1.0 - w) * (var + w * delta * delta), var)
    count = count + absorb
    over = np.where(mask, np.where(over_thr, over + 1, 0), over)
    return z, mean, var, count, over, mask & (over >= p.debounce)


# ---------------------------------------------------------------------------
# Operations on a single channel
# ---------------------------------------------------------------------------


def build_regressor(channel: DetectorChannel) -> np.ndarray:
    """``[y(t-1)..y(t-na), u(t-nk)..u(t-nk-nb+1)]``."""
    if not channel.history_full:
        raise InsufficientHistoryError(
            f"channel {channel.name!r} needs {channel.config.fill_samples} samples of history"
        )
    cfg = channel.config
    u = list(channel.u_hist)
    return np.array(list(channel.y_hist) + u[cfg.nk : cfg.nk + cfg.nb], dtype=float)


def _check_phi(estimator: RlsEstimator, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.shape != estimator.theta.shape:
        raise ValueError(f"regressor has shape {phi.shape}, expected {estimator.theta.shape}")
    return phi


def predict(estimator: RlsEstimator, phi: np.ndarray) -> float:
    phi = _check_phi(estimator, phi)
    return float(_dot(phi[None], estimator.theta[None])[0])


def rls_update(estimator: RlsEstimator, phi: np.ndarray, y: float) -> float:
    """Exponentially weighted RLS step, in place. Returns the prior residual."""
    phi = _check_phi(estimator, phi)
    if not (np.all(np.isfinite(phi)) and math.isfinite(y)):
        raise NonFiniteSampleError("non-finite regressor or output; update rejected")
    _, res, theta, P = _rls_kernel(
        estimator.theta[None], estimator.cov[None], phi[None], np.array([float(y)]), estimator.forgetting
    )
    estimator.theta, estimator.cov = theta[0], P[0]
    estimator.samples_seen += 1
    return float(res[0])


def monitor_update(monitor: ResidualMonitor, residual: float) -> tuple[float, bool]:
    """Score ``residual`` against the running statistics, then absorb it.

    Returns ``(z, alarmed)``. Statistics are not updated while the armed
    monitor sees ``|z| >= z_threshold``.
    """
    if not math.isfinite(residual):
        raise NonFiniteSampleError("non-finite residual")
    z, mean, var, count, over, alarmed = _monitor_kernel(
        np.array([monitor.mean]), np.array([monitor.var]), np.array([monitor.count]),
        np.array([monitor.over_count]), np.array([float(residual)]), np.array([True]), monitor,
    )
    monitor.mean, monitor.var = float(mean[0]), float(var[0])
    monitor.count, monitor.over_count = int(count[0]), int(over[0])
    return float(z[0]), bool(alarmed[0])


def channel_step(channel: DetectorChannel, u_t: float, y_t: float, time: float) -> DetectionEvent | None:
    """Advance one channel by one sample; return an event when the alarm latches."""
    if not (math.isfinite(u_t) and math.isfinite(y_t)):
        raise NonFiniteSampleError(f"channel {channel.name!r}: non-finite sample at t={time}")
    channel.u_hist.appendleft(float(u_t))
    channel.last_prediction = channel.last_residual = channel.last_z = math.nan
    channel.last_alarmed = False
    event = None
    if channel.history_full:
        phi = build_regressor(channel)
        channel.last_prediction = predict(channel.estimator, phi)
        residual = rls_update(channel.estimator, phi, y_t)
        z, alarmed = monitor_update(channel.monitor, residual)
        channel.last_residual, channel.last_z, channel.last_alarmed = residual, z, alarmed
        if alarmed and not channel.monitor.latched:
            channel.monitor.latched = True
            event = DetectionEvent(float(time), channel.name, z, residual)
    if channel.config.na:
        channel.y_hist.appendleft(float(y_t))
    return event


# ---------------------------------------------------------------------------
# Many channels in lockstep
# ---------------------------------------------------------------------------


class DetectorBank:
    """K detector channels sharing one configuration, advanced together.

    Per-channel arithmetic matches :func:`channel_step` exactly. A sample that
    is non-finite for one channel is skipped for that channel only.
    """

    def __init__(self, config: DetectorConfig, specs: Sequence[ChannelSpec] | None = None):
        self.config = config
        self.specs = list(config.channels if specs is None else specs)
        self.names = [s.name for s in self.specs]
        if len(set(self.names)) != len(self.names):
            raise ValueError("channel names must be unique")
        k, cfg = len(self.specs), config.arx
        n = cfg.n_params
        self.theta = np.zeros((k, n))
        self.cov = np.broadcast_to(config.cov_init * np.eye(n), (k, n, n)).copy()
        self.y_hist = np.zeros((k, cfg.na))
        self.u_hist = np.zeros((k, cfg.nb + cfg.nk))
        self.y_fill = np.zeros(k, dtype=int)
        self.u_fill = np.zeros(k, dtype=int)
        self.mean = np.zeros(k)
        self.var = np.zeros(k)
        self.count = np.zeros(k, dtype=int)
        self.over = np.zeros(k, dtype=int)
        self.latched = np.zeros(k, dtype=bool)
        self.skipped = np.zeros(k, dtype=int)
        self._monitor = config.make_channel(ChannelSpec("_", "_", "_")).monitor
        self.last_prediction = np.full(k, np.nan)
        self.last_residual = np.full(k, np.nan)
        self.last_z = np.full(k, np.nan)
        self.last_alarmed = np.zeros(k, dtype=bool)

    def __len__(self) -> int:
        return len(self.specs)

    def step(self, u, y, time: float) -> list[DetectionEvent]:
        cfg = self.config.arx
        u = np.asarray(u, dtype=float)
        y = np.asarray(y, dtype=float)
        valid = np.isfinite(u) & np.isfinite(y)
        self.skipped += ~valid
        if cfg.nb + cfg.nk:
            shifted = np.concatenate([u[:, None], self.u_hist[:, :-1]], axis=1)
            self.u_hist = np.where(valid[:, None], shifted, self.u_hist)
            self.u_fill = np.minimum(self.u_fill + valid, cfg.nb + cfg.nk)
        full = valid & (self.u_fill >= cfg.nb + cfg.nk) & (self.y_fill >= cfg.na)

        phi = np.concatenate([self.y_hist, self.u_hist[:, cfg.nk : cfg.nk + cfg.nb]], axis=1)
        phi = np.where(full[:, None], phi, 0.0)
        pred, res, theta, cov = _rls_kernel(self.theta, self.cov, phi, np.where(full, y, 0.0), self.config.forgetting)
        self.theta = np.where(full[:, None], theta, self.theta)
        self.cov = np.where(full[:, None, None], cov, self.cov)
        z, self.mean, self.var, self.count, self.over, alarmed = _monitor_kernel(
            self.mean, self.var, self.count, self.over, res, full, self._monitor
        )
        fire = alarmed & ~self.latched
        self.latched |= fire

        self.last_prediction = np.where(full, pred, np.nan)
        self.last_residual = np.where(full, res, np.nan)
        self.last_z = np.where(full, z, np.nan)
        self.last_alarmed = alarmed

        if cfg.na:
            shifted = np.concatenate([y[:, None], self.y_hist[:, :-1]], axis=1)
            self.y_hist = np.where(valid[:, None], shifted, self.y_hist)
            self.y_fill = np.minimum(self.y_fill + valid, cfg.na)

        return [DetectionEvent(float(time), self.names[i], float(z[i]), float(res[i])) for i in np.flatnonzero(fire)]

    def reset_alarms(self) -> None:
        self.over[:] = 0
        self.latched[:] = False


# ---------------------------------------------------------------------------
# Offline replay
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ("time", "y", "y_hat", "residual", "z", "alarmed")


@dataclass
class OfflineResult:
    events: list[DetectionEvent]
    traces: dict[str, Table]
    skipped: dict[str, int]


def sort_events(events: Iterable[DetectionEvent]) -> list[DetectionEvent]:
    return sorted(events, key=lambda e: (e.time, e.channel))


def run_offline(log_table: Mapping[str, np.ndarray], config: DetectorConfig) -> OfflineResult:
    """Replay every configured channel over a telemetry table.

    Rows with a non-finite input or output are skipped for that channel and
    counted in ``skipped``; their trace rows hold NaN.
    """
    if not log_table or all(len(c) == 0 for c in log_table.values()):
        return OfflineResult([], {s.name: {k: np.empty(0) for k in TRACE_COLUMNS} for s in config.channels}, {})
    if "time" not in log_table:
        raise MissingColumnError("time")
    time = np.asarray(log_table["time"], dtype=float)
    if np.any(~np.isfinite(time)):
        raise ValueError("time column contains non-finite values")
    if np.any(np.diff(time) < 0):
        raise ValueError("time column is not monotone non-decreasing")
    for spec in config.channels:
        for col in (spec.input_signal, spec.output_signal):
            if col not in log_table:
                raise MissingColumnError(col)

    bank = DetectorBank(config)
    U = np.column_stack([np.asarray(log_table[s.input_signal], dtype=float) for s in bank.specs])
    Y = np.column_stack([np.asarray(log_table[s.output_signal], dtype=float) for s in bank.specs])
    n, k = Y.shape
    y_hat = np.full((n, k), np.nan)
    res = np.full((n, k), np.nan)
    zs = np.full((n, k), np.nan)
    alarmed = np.zeros((n, k), dtype=bool)
    events: list[DetectionEvent] = []
    for i in range(n):
        events.extend(bank.step(U[i], Y[i], time[i]))
        y_hat[i], res[i], zs[i], alarmed[i] = bank.last_prediction, bank.last_residual, bank.last_z, bank.last_alarmed

    traces: dict[str, Table] = {}
    skipped: dict[str, int] = {}
    for j, name in enumerate(bank.names):
        skipped[name] = int(bank.skipped[j])
        if skipped[name]:
            log.warning("channel %s: skipped %d non-finite rows", name, skipped[name])
        traces[name] = {
            "time": time.copy(), "y": Y[:, j].copy(), "y_hat": y_hat[:, j],
            "residual": res[:, j], "z": zs[:, j], "alarmed": alarmed[:, j],
        }
    return OfflineResult(sort_events(events), traces, skipped)

# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FaultWindow:
    """A labelled fault: onset ``start`` and optional end (``None``: until end of log)."""

    start: float
    end: float | None = None


@dataclass
class DetectionMetrics:
    """Event- and sequence-level detection counts.

    A sequence counts as correct when it has no false positive and no false
    negative; a fault-free sequence with no events is a true negative.
    ``accuracy`` is correct sequences over all sequences.
    """

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    sequences: int = 0
    correct_sequences: int = 0
    latencies: list[float] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.correct_sequences / self.sequences if self.sequences else math.nan

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else math.nan

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else math.nan

    @property
    def mean_latency(self) -> float:
        return float(np.mean(self.latencies)) if self.latencies else math.nan

    @property
    def max_latency(self) -> float:
        return float(np.max(self.latencies)) if self.latencies else math.nan

    def __add__(self, other: "DetectionMetrics") -> "DetectionMetrics":
        return DetectionMetrics(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
            self.sequences + other.sequences,
            self.correct_sequences + other.correct_sequences,
            self.latencies + other.latencies,
        )

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "sequences": self.sequences, "correct_sequences": self.correct_sequences,
            "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
            "mean_latency": self.mean_latency, "max_latency": self.max_latency,
            "latencies": list(self.latencies),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetectionMetrics":
        return cls(int(d["tp"]), int(d["fp"]), int(d["fn"]), int(d["tn"]), int(d["sequences"]),
                   int(d["correct_sequences"]), [float(x) for x in d.get("latencies", [])])


def evaluate_detections(
    events: Sequence[DetectionEvent], truth: Sequence[FaultWindow], tolerance: float
) -> DetectionMetrics:
    """Score the events of one sequence (one flight/log) against its fault windows.

    The first event within ``[start, start + tolerance]`` of a window is a true
    positive. Events outside every window are false positives. Events inside a
    window but after the tolerance are neither; the window is then missed.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be nonnegative")
    windows = list(truth)
    for a, b in zip(windows, windows[1:]):
        a_end = math.inf if a.end is None else a.end
        if b.start < a.start:
            raise ValueError("fault windows must be sorted by start time")
        if b.start <= max(a_end, a.start + tolerance):
            raise ValueError("fault windows overlap")
    m = DetectionMetrics(sequences=1)
    times = sorted(e.time for e in events)
    for w in windows:
        hits = [t for t in times if w.start <= t <= w.start + tolerance]
        if hits:
            m.tp += 1
            m.latencies.append(hits[0] - w.start)
        else:
            m.fn += 1

    def inside(t: float) -> bool:
        for w in windows:
            end = math.inf if w.end is None else w.end
            if w.start <= t <= max(end, w.start + tolerance):
                return True
        return False

    m.fp = sum(1 for t in times if not inside(t))
    if not windows and not times:
        m.tn = 1
    m.correct_sequences = int(m.fp == 0 and m.fn == 0)
    return m


def aggregate_metrics(per_sequence: Iterable[DetectionMetrics]) -> DetectionMetrics:
    total = DetectionMetrics()
    for m in per_sequence:
        total = total + m
    return total
