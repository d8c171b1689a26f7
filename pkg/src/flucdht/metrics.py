"""Run measurements, run reports, and the fluctuation-rate sweep."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from scipy import stats

__all__ = [
    "MAINTENANCE_KINDS",
    "DATA_KINDS",
    "MetricsError",
    "MetricsCollector",
    "RunReport",
    "SweepPoint",
    "SweepResult",
    "mann_kendall",
    "sweep",
    "knee_of",
    "reports_to_csv",
    "rows_to_csv",
    "sweep_to_csv",
    "to_json",
]

# Heartbeats, link repairs, RT updates, anti-entropy and replication transfers
# are maintenance; anything that exists per query is data-operation traffic.
MAINTENANCE_KINDS = frozenset(
    {
        "probe",
        "probe_ack",
        "prune",
        "repair",
        "link_add",
        "rt_update",
        "leave_notice",
        "join_request",
        "join_transfer",
        "member_announce",
        "ae_summary",
        "ae_request",
        "ae_data",
        "replicate",
    }
)
DATA_KINDS = frozenset({"query", "answer", "advice", "failure", "write"})


class MetricsError(RuntimeError):
    pass


@dataclass
class RunReport:
    seed: int = 0
    issued_lookups: int = 0
    lookup_succeeded: int = 0
    lookup_not_found: int = 0
    lookup_failed: int = 0
    lookup_pending: int = 0
    lookup_success_rate: Optional[float] = None
    stale_reads: int = 0
    mean_hops: Optional[float] = None
    max_hops: Optional[int] = None
    hop_histogram: Dict[int, int] = field(default_factory=dict)
    issued_writes: int = 0
    writes_acked: int = 0
    deferred_writes_applied: int = 0
    maintenance_msgs: int = 0
    maintenance_rate: float = 0.0  # per peer per hour
    data_op_msgs: int = 0
    maintenance_share: Optional[float] = None
    duplicate_queries: int = 0
    reissues: int = 0
    issuer_reissues: int = 0
    consistency_conflicts: int = 0
    unresolved_queries: int = 0
    convergence_time: Optional[float] = None
    degraded_interval_time: float = 0.0
    population_series: List[Tuple[float, int]] = field(default_factory=list)
    mean_population: float = 0.0
    extinct: bool = False
    joins: int = 0
    graceful_leaves: int = 0
    crashes: int = 0
    prunes: int = 0
    splits: int = 0
    coalesces: int = 0
    blocked_coalesces: int = 0
    fluctuation_rate: float = 0.0  # per peer per hour over the measured window
    invariant_violations: int = 0
    leaves: int = 0
    max_leaf_depth: int = 0
    events: int = 0

    def scalar_row(self) -> Dict[str, Any]:
        row = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "hop_histogram":
                value = ";".join(f"{h}:{n}" for h, n in sorted(value.items()))
            elif f.name == "population_series":
                continue
            row[f.name] = value
        return row


class MetricsCollector:
    """Counters fed by the overlay during one run; :meth:`finalize` builds the report."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.msg_counts: Counter = Counter()
        self.per_peer: Counter = Counter()
        self.counters: Counter = Counter()
        self.outcomes: Dict[int, Any] = {}
        self.population_series: List[Tuple[float, int]] = []
        self.convergence_at: Optional[float] = None
        self.quiesce_at: Optional[float] = None
        self.measure_from = 0.0
        self._degraded_since: Optional[float] = None
        self.degraded_time = 0.0
        self.finalized = False
        self.running = False

    # message accounting
    def on_send(self, src: int, msg: Any) -> None:
        self.msg_counts[msg.kind] += msg.weight
        self.per_peer[src] += msg.weight

    def count(self, kind: str, n: int = 1, peer_id: Optional[int] = None) -> None:
        """Charge messages that are modeled in bulk rather than sent one by one."""
        if n <= 0:
            return
        self.msg_counts[kind] += n
        if peer_id is not None:
            self.per_peer[peer_id] += n

    def record(self, kind: str, n: int = 1) -> None:
        if self.finalized:
            raise MetricsError("run already finalized")
        self.counters[kind] += n

    def track(self, outcome: Any) -> None:
        self.outcomes[outcome.query_id] = outcome

    def sample_population(self, now: float, n: int) -> None:
        self.population_series.append((now, n))

    def set_degraded(self, now: float, degraded: bool) -> None:
        if degraded and self._degraded_since is None:
            self._degraded_since = now
        elif not degraded and self._degraded_since is not None:
            self.degraded_time += now - self._degraded_since
            self._degraded_since = None

    def mark_converged(self, now: float) -> None:
        if self.convergence_at is None:
            self.convergence_at = now

    @property
    def maintenance_msgs(self) -> int:
        return sum(n for k, n in self.msg_counts.items() if k in MAINTENANCE_KINDS)

    @property
    def data_op_msgs(self) -> int:
        return sum(n for k, n in self.msg_counts.items() if k not in MAINTENANCE_KINDS)

    def finalize(self, now: float, **extra: Any) -> RunReport:
        if self.running:
            raise MetricsError("finalize called while the run is still in progress")
        self.set_degraded(now, False)
        r = RunReport(seed=self.seed)
        hops = Counter()
        for oc in self.outcomes.values():
            if oc.kind == "lookup":
                r.issued_lookups += 1
                status = oc.status
                if status == "found":
                    r.lookup_succeeded += 1
                    if oc.stale:
                        r.stale_reads += 1
                elif status == "not_found":
                    r.lookup_not_found += 1
                elif status == "failed":
                    r.lookup_failed += 1
                else:
                    r.lookup_pending += 1
                if status in ("found", "not_found"):
                    hops[oc.hops] += 1
            else:
                r.issued_writes += 1
                if oc.status == "found":
                    r.writes_acked += 1
            if oc.unresolved:
                r.unresolved_queries += 1
        settled = r.issued_lookups - r.lookup_pending
        r.lookup_success_rate = r.lookup_succeeded / settled if settled else None
        r.hop_histogram = dict(sorted(hops.items()))
        total = sum(hops.values())
        if total:
            r.mean_hops = sum(h * n for h, n in hops.items()) / total
            r.max_hops = max(hops)
        r.maintenance_msgs = self.maintenance_msgs
        r.data_op_msgs = self.data_op_msgs
        all_msgs = r.maintenance_msgs + r.data_op_msgs
        r.maintenance_share = r.maintenance_msgs / all_msgs if all_msgs else None
        r.population_series = list(self.population_series)
        measured = [n for t, n in self.population_series if t >= self.measure_from]
        r.mean_population = statistics.fmean(measured) if measured else 0.0
        span_h = max(now - self.measure_from, 1e-9) / 3600.0
        r.maintenance_rate = r.maintenance_msgs / (max(r.mean_population, 1.0) * span_h)
        c = self.counters
        r.duplicate_queries = c["duplicate_queries"]
        r.reissues = c["reissues"]
        r.issuer_reissues = c["issuer_reissues"]
        r.consistency_conflicts = c["consistency_conflicts"]
        r.deferred_writes_applied = c["deferred_writes_applied"]
        r.joins = c["joins"]
        r.graceful_leaves = c["graceful_leaves"]
        r.crashes = c["crashes"]
        r.prunes = c["prunes"]
        r.splits = c["splits"]
        r.coalesces = c["coalesces"]
        r.blocked_coalesces = c["blocked_coalesces"]
        r.invariant_violations = c["invariant_violations"]
        r.degraded_interval_time = self.degraded_time
        if self.convergence_at is not None and self.quiesce_at is not None:
            r.convergence_time = self.convergence_at - self.quiesce_at
        churn_events = c["churn_events_measured"]
        r.fluctuation_rate = churn_events / (max(r.mean_population, 1.0) * span_h)
        r.extinct = bool(self.population_series) and self.population_series[-1][1] == 0
        for k, v in extra.items():
            setattr(r, k, v)
        self.finalized = True
        return r


def mann_kendall(values: Sequence[float]) -> Dict[str, float]:
    """Mann-Kendall trend statistics for a series in index order.

    Returns Kendall's tau against the index and one-sided p-values for an
    increasing and a decreasing trend.
    """
    x = list(range(len(values)))
    if len(values) < 3 or len(set(values)) == 1:
        return {"tau": 0.0, "p_increasing": 1.0, "p_decreasing": 1.0}
    up = stats.kendalltau(x, values, alternative="greater")
    down = stats.kendalltau(x, values, alternative="less")
    return {"tau": float(up.statistic), "p_increasing": float(up.pvalue), "p_decreasing": float(down.pvalue)}


@dataclass
class SweepPoint:
    rate: float
    mean_success: Optional[float]
    mean_maintenance_share: Optional[float]
    half_width: Optional[float]
    runs: int
    flagged: bool = False
    measured_rate: float = 0.0


@dataclass
class SweepResult:
    points: List[SweepPoint]
    knee: Optional[float]
    floor: float
    runs: List[Dict[str, Any]] = field(default_factory=list)
    trend: Dict[str, float] = field(default_factory=dict)


def _mean_ci(xs: Sequence[float], level: float = 0.95) -> Tuple[Optional[float], Optional[float]]:
    if not xs:
        return None, None
    m = statistics.fmean(xs)
    if len(xs) < 2:
        return m, None
    sd = statistics.stdev(xs)
    return m, float(stats.t.ppf(0.5 + level / 2, len(xs) - 1)) * sd / math.sqrt(len(xs))


def knee_of(points: Sequence[Tuple[float, Optional[float]]], floor: float) -> Optional[float]:
    """Smallest rate whose success falls below ``floor``; None if it never does."""
    for rate, success in sorted(points, key=lambda p: p[0]):
        if success is not None and success < floor:
            return rate
    return None


def sweep(
    template: Any,
    rates: Sequence[float],
    seeds: Sequence[int],
    floor: float = 0.90,
    run: Optional[Callable[..., RunReport]] = None,
) -> SweepResult:
    """Run ``template`` at every fluctuation rate and seed and aggregate."""
    if not rates:
        raise ValueError("rates must be non-empty")
    if list(rates) != sorted(rates):
        raise ValueError("rates must be ascending")
    if run is None:
        from .runner import run_at_rate as run
    points, rows = [], []
    for rate in rates:
        succ, share, measured = [], [], []
        flagged = False
        for seed in seeds:
            rep = run(template, rate, seed)
            rows.append({"rate": rate, **rep.scalar_row()})
            if rep.extinct:
                flagged = True
                continue
            if rep.lookup_success_rate is not None:
                succ.append(rep.lookup_success_rate)
            if rep.maintenance_share is not None:
                share.append(rep.maintenance_share)
            measured.append(rep.fluctuation_rate)
        m, hw = _mean_ci(succ)
        points.append(
            SweepPoint(
                rate=rate,
                mean_success=m,
                mean_maintenance_share=statistics.fmean(share) if share else None,
                half_width=hw,
                runs=len(seeds),
                flagged=flagged,
                measured_rate=statistics.fmean(measured) if measured else 0.0,
            )
        )
    knee = knee_of([(p.rate, p.mean_success) for p in points if not p.flagged], floor)
    trend = mann_kendall([p.mean_success for p in points if p.mean_success is not None])
    return SweepResult(points, knee, floor, rows, trend)


def rows_to_csv(rows: List[Dict[str, Any]]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
    return buf.getvalue()


def reports_to_csv(reports: Sequence[RunReport], extra: Optional[Sequence[Dict[str, Any]]] = None) -> str:
    rows = []
    for i, rep in enumerate(reports):
        row = dict(extra[i]) if extra else {}
        row.update(rep.scalar_row())
        rows.append(row)
    return rows_to_csv(rows)


def sweep_to_csv(result: SweepResult) -> str:
    return rows_to_csv([asdict(p) for p in result.points])


def to_json(obj: Any) -> str:
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    return json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n"
