"""Join/leave/crash workload generation.

Times are simulated seconds. Arrival rates are given per hour and the
diurnal period in hours, matching how session statistics are usually quoted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

__all__ = [
    "ChurnConfigError",
    "TraceFormatError",
    "ChurnModel",
    "TraceEvent",
    "ChurnTrace",
    "FluctuationPoint",
    "sample_arrivals",
    "sample_session",
    "sample_sessions",
    "generate_trace",
    "fluctuation_rate",
]

HOUR = 3600.0
SESSION_KINDS = ("exponential", "pareto", "none")
ACTIONS = ("join", "leave", "crash")

SeedLike = Union[int, np.random.Generator, None]


class ChurnConfigError(ValueError):
    pass


class TraceFormatError(ValueError):
    pass


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class ChurnModel:
    base_rate: float = 128.0  # arrivals per hour
    diurnal_amplitude: float = 0.0
    period: float = 24.0  # hours
    session_dist: str = "exponential"
    session_mean: float = 1800.0  # seconds
    pareto_shape: float = 1.5
    pareto_scale: float = 120.0  # seconds
    crash_fraction: float = 0.5

    def __post_init__(self):
        if self.base_rate < 0:
            raise ChurnConfigError("base_rate must be >= 0")
        if not 0.0 <= self.diurnal_amplitude < 1.0:
            raise ChurnConfigError("diurnal_amplitude must lie in [0, 1)")
        if self.period <= 0:
            raise ChurnConfigError("period must be > 0")
        if self.session_dist not in SESSION_KINDS:
            raise ChurnConfigError(f"session_dist must be one of {SESSION_KINDS}")
        if self.session_mean <= 0 or self.pareto_shape <= 0 or self.pareto_scale <= 0:
            raise ChurnConfigError("session distribution parameters must be > 0")
        if not 0.0 <= self.crash_fraction <= 1.0:
            raise ChurnConfigError("crash_fraction must lie in [0, 1]")

    @property
    def peak_rate(self) -> float:
        """Upper bound of the arrival rate, per second."""
        return self.base_rate / HOUR * (1.0 + self.diurnal_amplitude)

    def rate_at(self, t):
        """Instantaneous arrival rate per second at time ``t`` (seconds)."""
        phase = 2.0 * np.pi * np.asarray(t, dtype=float) / (self.period * HOUR)
        return self.base_rate / HOUR * (1.0 + self.diurnal_amplitude * np.sin(phase))


def sample_arrivals(model: ChurnModel, horizon: float, seed: SeedLike = None) -> np.ndarray:
    """Sorted arrival times in ``[0, horizon)`` from the diurnal Poisson process.

    A homogeneous process at the peak rate is thinned down to ``rate_at``.
    """
    if horizon <= 0:
        raise ChurnConfigError("horizon must be > 0")
    rng = _rng(seed)
    peak = model.peak_rate
    if peak == 0.0:
        return np.empty(0)
    n = rng.poisson(peak * horizon)
    times = np.sort(rng.uniform(0.0, horizon, size=n))
    keep = rng.uniform(0.0, peak, size=n) < model.rate_at(times)
    return times[keep]


def sample_sessions(model: ChurnModel, n: int, seed: SeedLike = None, clamp: Optional[float] = None) -> np.ndarray:
    rng = _rng(seed)
    if model.session_dist == "exponential":
        out = rng.exponential(model.session_mean, size=n)
    elif model.session_dist == "pareto":
        out = model.pareto_scale * (1.0 + rng.pareto(model.pareto_shape, size=n))
    else:
        out = np.full(n, np.inf)
    if clamp is not None:
        out = np.minimum(out, clamp)
    return out


def sample_session(model: ChurnModel, seed: SeedLike = None, clamp: Optional[float] = None) -> float:
    return float(sample_sessions(model, 1, seed, clamp)[0])


@dataclass(frozen=True, order=True)
class TraceEvent:
    time: float
    peer_id: int
    action: str

    def to_line(self) -> str:
        return f"{self.time!r}\t{self.peer_id}\t{self.action}"


@dataclass
class ChurnTrace:
    events: List[TraceEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def validate(self, linenos: Optional[Sequence[int]] = None) -> None:
        """Raise :class:`TraceFormatError` unless times are ordered and each
        peer alternates join then departure."""
        last_time = -math.inf
        joined_at = {}
        departed = set()
        for i, ev in enumerate(self.events, 1):
            where = f"line {linenos[i - 1]}" if linenos else f"event {i}"
            if ev.action not in ACTIONS:
                raise TraceFormatError(f"{where}: unknown action {ev.action!r}")
            if ev.time < last_time:
                raise TraceFormatError(f"{where}: time {ev.time} goes backwards")
            last_time = ev.time
            pid = ev.peer_id
            if ev.action == "join":
                # peer ids name a single lifetime
                if pid in joined_at or pid in departed:
                    raise TraceFormatError(f"{where}: peer {pid} joins twice")
                joined_at[pid] = ev.time
            else:
                if pid not in joined_at:
                    raise TraceFormatError(f"{where}: peer {pid} departs without a live session")
                if not ev.time > joined_at.pop(pid):
                    raise TraceFormatError(f"{where}: peer {pid} departs at its join time")
                departed.add(pid)

    def to_text(self) -> str:
        return "".join(ev.to_line() + "\n" for ev in self.events)

    @classmethod
    def from_text(cls, text: str) -> "ChurnTrace":
        events, linenos = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TraceFormatError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                t, pid, action = float(parts[0]), int(parts[1]), parts[2].strip()
            except ValueError as exc:
                raise TraceFormatError(f"line {lineno}: {exc}") from None
            if action not in ACTIONS:
                raise TraceFormatError(f"line {lineno}: unknown action {action!r}")
            events.append(TraceEvent(t, pid, action))
            linenos.append(lineno)
        trace = cls(events)
        trace.validate(linenos)
        return trace

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: Union[str, Path]) -> "ChurnTrace":
        return cls.from_text(Path(path).read_text())

    def population_at(self, t: float, initial: int = 0) -> int:
        n = initial
        for ev in self.events:
            if ev.time > t:
                break
            n += 1 if ev.action == "join" else -1
        return n


def generate_trace(
    model: ChurnModel,
    horizon: float,
    seed: SeedLike = None,
    initial_peers: int = 0,
    warmup: float = 0.0,
) -> ChurnTrace:
    """Churn trace over ``[0, warmup + horizon)``.

    ``initial_peers`` join evenly spread over the warmup and draw sessions
    counted from the end of warmup; churn arrivals start after warmup.
    Departures falling past the end are dropped, those peers stay.
    """
    rng = _rng(seed)
    end = warmup + horizon
    rows = []
    if initial_peers:
        joins = np.arange(initial_peers) * (warmup / initial_peers if warmup > 0 else 0.0)
        departs = warmup + sample_sessions(model, initial_peers, rng)
        rows.extend(zip(joins, departs))
    arrivals = warmup + sample_arrivals(model, horizon, rng) if horizon > 0 else np.empty(0)
    rows.extend(zip(arrivals, arrivals + sample_sessions(model, len(arrivals), rng)))
    crash = rng.uniform(size=len(rows)) < model.crash_fraction
    events = []
    for pid, ((t_join, t_dep), crashed) in enumerate(zip(rows, crash)):
        events.append(TraceEvent(float(t_join), pid, "join"))
        if t_dep < end and t_dep > t_join:
            events.append(TraceEvent(float(t_dep), pid, "crash" if crashed else "leave"))
    events.sort(key=lambda ev: (ev.time, ev.action != "join", ev.peer_id))
    return ChurnTrace(events)


@dataclass(frozen=True)
class FluctuationPoint:
    start: float
    events: int
    mean_population: float
    rate: float  # events per peer per second
    absolute_rate: float  # events per second


def fluctuation_rate(
    trace: Union[ChurnTrace, Sequence[TraceEvent]],
    window: float,
    horizon: Optional[float] = None,
    initial_population: int = 0,
) -> List[FluctuationPoint]:
    """Joins plus departures per window, normalized by mean live population."""
    if window <= 0:
        raise ChurnConfigError("window must be > 0")
    events = list(trace)
    if horizon is None:
        if not events:
            return []
        horizon = events[-1].time + 1e-9
    n_windows = max(1, math.ceil(horizon / window))
    out = []
    pop = initial_population
    i = 0
    for w in range(n_windows):
        lo, hi = w * window, (w + 1) * window
        area = 0.0
        cursor = lo
        count = 0
        while i < len(events) and events[i].time < hi:
            ev = events[i]
            area += pop * (ev.time - cursor)
            cursor = ev.time
            pop += 1 if ev.action == "join" else -1
            count += 1
            i += 1
        area += pop * (hi - cursor)
        mean_pop = area / window
        if count == 0:
            rate = 0.0
        else:
            rate = count / (mean_pop * window) if mean_pop > 0 else math.inf
        out.append(FluctuationPoint(lo, count, mean_pop, rate, count / window))
    return out
