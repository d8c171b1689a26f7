"""Wire a scenario into one simulation run."""

from __future__ import annotations

import random
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np

from .churn import HOUR, ChurnTrace, generate_trace
from .keyspace import key_of_datum
from .metrics import MetricsCollector, RunReport
from .protocol import Overlay, Record
from .scenario import Scenario
from .simcore import Network, Simulator, apply_trace

__all__ = ["Simulation", "run_scenario", "trace_for", "scenario_at_rate", "run_at_rate"]


def _streams(seed: int) -> List[int]:
    # churn, network, protocol, workload
    return [int(x) for x in np.random.SeedSequence(seed).generate_state(4)]


def trace_for(scenario: Scenario) -> ChurnTrace:
    w = scenario.workload
    rng = np.random.default_rng(_streams(scenario.seed)[0])
    return generate_trace(scenario.churn, w.horizon, rng, w.initial_peers, w.warmup)


class Simulation:
    def __init__(self, scenario: Scenario, trace: Optional[ChurnTrace] = None):
        self.scenario = scenario
        w = scenario.workload
        _, s_net, s_proto, s_work = _streams(scenario.seed)
        self.trace = trace if trace is not None else trace_for(scenario)
        self.sim = Simulator()
        self.metrics = MetricsCollector(scenario.seed)
        self.net = Network(self.sim, scenario.network, random.Random(s_net), on_send=self.metrics.on_send)
        self.overlay = Overlay(
            self.sim,
            self.net,
            scenario.keyspace,
            scenario.protocol,
            scenario.backup,
            random.Random(s_proto),
            self.metrics,
            strict=scenario.check_invariants,
        )
        self.rng = random.Random(s_work)
        self.start = w.warmup
        self.quiesce_at = w.warmup + w.horizon
        self.end = scenario.end_time
        self.committed: Dict[int, bytes] = {}
        self.committed_at: Dict[int, float] = {}
        self._committed_keys: List[int] = []
        self._n_data = 0
        self.overlay.write_listeners.append(self._on_write_acked)
        self.metrics.measure_from = self.start
        self.metrics.quiesce_at = self.quiesce_at
        apply_trace(self.sim, self.trace, self)

    # churn hooks
    def join(self, pid: int) -> None:
        self._count_churn()
        self.overlay.join(pid)

    def leave(self, pid: int, graceful: bool) -> None:
        self._count_churn()
        self.overlay.leave(pid, graceful)

    def _count_churn(self) -> None:
        if self.start <= self.sim.now < self.quiesce_at:
            self.metrics.record("churn_events_measured")

    # workload
    def _new_datum(self) -> bytes:
        self._n_data += 1
        return f"datum-{self.scenario.seed}-{self._n_data}".encode()

    def _commit(self, key: int, value: bytes) -> None:
        if key not in self.committed:
            self._committed_keys.append(key)
        self.committed[key] = value
        self.committed_at[key] = self.sim.now

    def _on_write_acked(self, outcome) -> None:
        self._commit(outcome.key, outcome.value)

    def preload(self) -> None:
        ov = self.overlay
        for _ in range(self.scenario.workload.initial_data):
            datum = self._new_datum()
            key = key_of_datum(datum, ov.cfg)
            rec = Record(datum, 1, -1)
            for pid in ov.groups[ov.leaf_of(key)]:
                ov.peers[pid].store.merge(key, rec)
            self._commit(key, datum)
            self.committed_at[key] = -1.0

    def _pick_committed(self) -> Optional[int]:
        settle = self.scenario.workload.lookup_settle
        for _ in range(8):
            if not self._committed_keys:
                return None
            key = self.rng.choice(self._committed_keys)
            if self.sim.now - self.committed_at[key] >= settle:
                return key
        return None

    def issue_query(self) -> None:
        w = self.scenario.workload
        now = self.sim.now
        nxt = now + self.rng.expovariate(w.query_rate)
        if nxt < self.quiesce_at:
            self.sim.schedule(nxt, self.issue_query)
        issuers = self.overlay.active_peers()
        if not issuers:
            return
        issuer = self.rng.choice(issuers)
        u = self.rng.random()
        key = self._pick_committed()
        if u < w.lookup_fraction and key is not None:
            issuer.issue("lookup", key, expected=self.committed[key])
        elif u < w.lookup_fraction + w.update_fraction and key is not None:
            issuer.issue("update", key, self._new_datum())
        else:
            datum = self._new_datum()
            issuer.issue("insert", key_of_datum(datum, self.overlay.cfg), datum)

    # periodic observers
    def _maintenance(self) -> None:
        self.overlay.maintenance_tick()
        self.sim.schedule_in(self.scenario.protocol.heartbeat_period, self._maintenance)

    def _sample(self) -> None:
        self.metrics.sample_population(self.sim.now, self.overlay.live_population())
        self.sim.schedule_in(self.scenario.workload.sample_period, self._sample)

    def _check_convergence(self) -> None:
        if self.overlay.stores_converged():
            self.metrics.mark_converged(self.sim.now)
            return
        self.sim.schedule_in(self.scenario.protocol.anti_entropy_period / 10, self._check_convergence)

    def run(self) -> RunReport:
        w = self.scenario.workload
        self.sim.schedule(self.start, self.preload)
        if w.query_rate > 0:
            self.sim.schedule(self.start + self.rng.expovariate(w.query_rate), self.issue_query)
        self.sim.schedule(self.scenario.protocol.heartbeat_period, self._maintenance)
        self.sim.schedule(0.0, self._sample)
        self.sim.schedule(self.quiesce_at, self._check_convergence)
        self.metrics.running = True
        stats = self.sim.run_until(self.end)
        self.metrics.running = False
        leaves = list(self.overlay.groups)
        return self.metrics.finalize(
            self.sim.now,
            leaves=len(leaves),
            max_leaf_depth=max(iv.depth for iv in leaves),
            events=stats.dispatched,
        )


def run_scenario(scenario: Scenario, trace: Optional[ChurnTrace] = None) -> RunReport:
    return Simulation(scenario, trace).run()


def scenario_at_rate(template: Scenario, rate: float, seed: Optional[int] = None) -> Scenario:
    """``template`` with churn set to ``rate`` joins+departures per peer per hour.

    The session mean is ``2 / rate`` hours and arrivals keep the initial
    population stationary; rate 0 means no churn at all.
    """
    if rate < 0:
        raise ValueError("rate must be >= 0")
    n0 = max(template.workload.initial_peers, 1)
    churn = template.churn
    if rate == 0:
        churn = replace(churn, base_rate=0.0, session_dist="none")
    else:
        mean_s = 2.0 * HOUR / rate
        churn = replace(churn, base_rate=n0 * HOUR / mean_s)
        if churn.session_dist == "pareto" and churn.pareto_shape > 1:
            churn = replace(churn, pareto_scale=mean_s * (churn.pareto_shape - 1) / churn.pareto_shape)
        else:
            churn = replace(churn, session_dist="exponential", session_mean=mean_s)
    out = replace(template, churn=churn)
    return out if seed is None else out.with_seed(seed)


def run_at_rate(template: Scenario, rate: float, seed: int) -> RunReport:
    return run_scenario(scenario_at_rate(template, rate, seed))
