"""Timeline simulation of elastic training under resize and failure events.

Three strategies are compared on the same event list:

* ``live``: prepare the target world in the background and switch at an
  iteration boundary (falls back to a checkpoint restart when the warning
  window is too short),
* ``cold``: stop, roll back to the last checkpoint, restart on the target,
* ``reshape``: like ``cold`` but loading a checkpoint that is resharded at
  load time, which shortens the load but keeps the full initialization.

Accounting is GPU-weighted: every simulated second is charged to the GPUs of
whichever world occupies it.
"""
from __future__ import annotations

import csv
import enum
import heapq
import io
import logging
import math
import random
import statistics
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .costmodel import CostModel, state_bytes_per_gpu
from .models import gpt_by_size
from .runtime import (GenerationStateMachine, IterationRecord, Phase, PrepKind, RuntimeStateError, prepare_time_s,
                      switch_cost)
from .topology import ModelSpec, ParallelConfig, check_config

log = logging.getLogger(__name__)

INF = float("inf")


class ScenarioError(ValueError):
    pass


class Strategy(str, enum.Enum):
    LIVE = "live"
    COLD = "cold"
    RESHAPE = "reshape"


class EventKind(str, enum.Enum):
    PLANNED = "planned"
    PREEMPTION_WARNING = "preemption_warning"
    FAIL_STOP = "fail_stop"


@dataclass(frozen=True)
class Event:
    time_s: float
    kind: EventKind
    target: ParallelConfig
    warning_window_s: float = INF


@dataclass
class ElasticityScenario:
    duration_s: float
    events: list[Event] = field(default_factory=list)
    regime: str = "custom"
    seed: int = 0
    checkpoint_interval: int = 100
    # fixed iteration time overrides the throughput model when set
    iteration_time_s: Optional[float] = None

    def validate(self, model: Optional[ModelSpec] = None):
        if self.duration_s < 0:
            raise ScenarioError("duration must be >= 0")
        if self.checkpoint_interval <= 0:
            raise ScenarioError("checkpoint_interval must be positive")
        last = -INF
        for i, ev in enumerate(self.events):
            if not ev.time_s > last:
                raise ScenarioError(f"event {i}: times must be strictly increasing")
            if ev.time_s < 0 or ev.time_s > self.duration_s:
                raise ScenarioError(f"event {i}: time {ev.time_s} outside [0, {self.duration_s}]")
            if ev.warning_window_s < 0:
                raise ScenarioError(f"event {i}: negative warning window")
            if ev.kind is EventKind.FAIL_STOP and ev.warning_window_s != 0:
                raise ScenarioError(f"event {i}: fail_stop events have no warning window")
            if model is not None:
                try:
                    check_config(ev.target, model)
                except ValueError as exc:
                    raise ScenarioError(f"event {i}: {exc}") from exc
            last = ev.time_s


# --- per-event latency models --------------------------------------------


@dataclass(frozen=True)
class RestartBreakdown:
    load_s: float
    init_s: float
    misc_s: float

    @property
    def total_s(self) -> float:
        return self.load_s + self.init_s + self.misc_s


def restart_latency(strategy: Strategy, config: ParallelConfig, model: ModelSpec, cost: CostModel) -> RestartBreakdown:
    if strategy is Strategy.LIVE:
        raise ValueError("restart_latency covers the checkpoint strategies only")
    state = state_bytes_per_gpu(model, config)
    load = cost.load_s(config.world_size, state)
    if strategy is Strategy.RESHAPE:
        load *= cost.reshape_load_factor
    return RestartBreakdown(load, cost.init_s(config.world_size, state), cost.misc_restart_s)


@dataclass(frozen=True)
class LiveLatency:
    prepare_s: float
    drain_s: float
    transfer_s: float
    swap_s: float
    transfer_bytes: float  # persistent state moved over links
    transfer_param_bytes: float  # the parameter share of it

    @property
    def pause_s(self) -> float:
        return self.drain_s + self.transfer_s + self.swap_s


def live_event_latency(old: ParallelConfig, new: ParallelConfig, model: ModelSpec, cost: CostModel) -> LiveLatency:
    sc = switch_cost(old, new, model, cost)
    scale = model.bytes_per_element / model.state_multiplier
    return LiveLatency(prepare_time_s(old, new, model, cost), sc.drain_s, sc.transfer_s, sc.swap_s,
                       sc.transfer_bytes, sc.transfer_bytes * scale)


def _prep_credit(kinds: Iterable[PrepKind], config: ParallelConfig, model: ModelSpec, cost: CostModel) -> float:
    """Restart time saved by shadow-world work that finished before a failure."""
    world = config.world_size
    saved = {
        PrepKind.TCP_BOOTSTRAP: cost.process_spawn_s + cost.tcp_bootstrap_s,
        PrepKind.TOPOLOGY_DISCOVERY: cost.topology_discovery_s(world),
        PrepKind.COMMUNICATOR_SETUP: cost.communicator_setup_s(world),
        PrepKind.MOCK_WARMUP: cost.warmup_s(state_bytes_per_gpu(model, config)),
    }
    return sum(saved.get(k, 0.0) for k in kinds)


# --- results ---------------------------------------------------------------

CSV_COLUMNS = ("event_index", "t_event_s", "kind", "strategy", "pause_s", "phase_load_s", "phase_init_s",
               "phase_transfer_s", "phase_swap_s", "phase_drain_s", "phase_misc_s", "fallback")


@dataclass
class EventOutcome:
    event_index: int
    t_event_s: float
    kind: EventKind
    strategy: Strategy
    pause_s: float = 0.0
    phase_load_s: float = 0.0
    phase_init_s: float = 0.0
    phase_transfer_s: float = 0.0
    phase_swap_s: float = 0.0
    phase_drain_s: float = 0.0
    phase_misc_s: float = 0.0
    fallback: bool = False

    def row(self) -> list:
        return [self.event_index, f"{self.t_event_s:.6f}", self.kind.value, self.strategy.value] + \
            [f"{getattr(self, c):.6f}" for c in CSV_COLUMNS[4:-1]] + [int(self.fallback)]


@dataclass(frozen=True)
class Segment:
    """One stretch of simulated time charged to ``world`` GPUs."""
    start_s: float
    end_s: float
    world: int
    kind: str  # iteration | lost | pause | recovery
    slowdown: float = 1.0

    @property
    def gpu_s(self) -> float:
        return (self.end_s - self.start_s) * self.world


@dataclass
class SimResult:
    strategy: Strategy
    duration_s: float
    events: list[EventOutcome]
    timeline: list[Segment]
    allocated_gpu_s: float = 0.0
    useful_gpu_s: float = 0.0
    downtime_gpu_s: float = 0.0
    rollback_gpu_s: float = 0.0
    interference_gpu_s: float = 0.0
    idle_gpu_s: float = 0.0
    duty_cycle: float = 1.0

    @property
    def total_downtime_s(self) -> float:
        return sum(e.pause_s for e in self.events)

    @property
    def goodput_fraction(self) -> float:
        if self.allocated_gpu_s <= 0:
            # nothing ran; report the steady-state ceiling
            return self.duty_cycle
        return self.useful_gpu_s / self.allocated_gpu_s

    @property
    def wasted_gpu_hours(self) -> float:
        return (self.allocated_gpu_s - self.useful_gpu_s) / 3600.0

    def summary(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "goodput": round(self.goodput_fraction, 9),
            "wasted_gpu_hours": round(self.wasted_gpu_hours, 9),
            "total_downtime_s": round(self.total_downtime_s, 9),
            "events": len(self.events),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for e in self.events:
            w.writerow(e.row())
        return buf.getvalue()

    def summary_csv(self) -> str:
        s = self.summary()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(s))
        w.writerow([f"{v:.9f}" if isinstance(v, float) else v for v in s.values()])
        return buf.getvalue()


def _account(result: SimResult, duty_cycle: float):
    useful = interference = rollback = downtime = idle = 0.0
    for seg in result.timeline:
        g = seg.gpu_s
        if seg.kind == "iteration":
            base = g / seg.slowdown
            useful += base * duty_cycle
            idle += base * (1.0 - duty_cycle)
            interference += g - base
        elif seg.kind == "lost":
            rollback += g
        else:
            downtime += g
    result.useful_gpu_s = useful
    result.interference_gpu_s = interference
    result.rollback_gpu_s = rollback
    result.downtime_gpu_s = downtime
    result.idle_gpu_s = idle
    result.allocated_gpu_s = useful + interference + rollback + downtime + idle


# --- the engine --------------------------------------------------------------


def _iteration_segments(records: Iterable[IterationRecord], kind: str) -> list[Segment]:
    return [Segment(r.start_s, r.end_s, r.world, kind, r.slowdown) for r in records]


class _Run:
    def __init__(self, model: ModelSpec, initial: ParallelConfig, scenario: ElasticityScenario, cost: CostModel,
                 strategy: Strategy):
        self.model = model
        self.scenario = scenario
        self.cost = cost
        self.strategy = strategy
        self.sm = GenerationStateMachine(initial, model, cost, checkpoint_interval=scenario.checkpoint_interval,
                                         iteration_time_s=scenario.iteration_time_s)
        self.outcomes: list[EventOutcome] = []
        self.recoveries: list[Segment] = []
        self.deadlines: list[tuple[float, int]] = []
        self.done: set[int] = set()

    # restarts shared by every strategy
    def _restart(self, index: int, t: float, target: ParallelConfig, strategy: Strategy, credit_kinds=()):
        bd = restart_latency(strategy, target, self.model, self.cost)
        credit = min(_prep_credit(credit_kinds, target, self.model, self.cost), bd.init_s)
        total = bd.total_s - credit
        window = self.sm.switch_window
        if window is not None:
            # a transfer cut short still paused training until the failure
            self.recoveries.append(Segment(window[0], t, max(self.sm.active.world_size, self.sm.shadow.world_size),
                                           "pause"))
        self.sm.abort_and_fallback(t, recovery_s=total, resume_config=target)
        self.recoveries.append(Segment(t, t + total, target.world_size, "recovery"))
        out = self.outcomes[index]
        out.pause_s = total
        out.phase_load_s = bd.load_s
        out.phase_init_s = bd.init_s - credit
        out.phase_misc_s = bd.misc_s
        out.fallback = self.strategy is Strategy.LIVE
        self.done.add(index)

    def _at(self, t: float) -> float:
        # events that land inside a recovery are handled once it ends
        return max(t, self.sm.now)

    def _fire_deadlines(self, upto: float):
        while self.deadlines and self.deadlines[0][0] <= upto:
            d, index = heapq.heappop(self.deadlines)
            if index in self.done:
                continue
            t = self._at(d)
            self.sm.advance(t)
            if index in self._switched():
                continue
            ev = self.scenario.events[index]
            log.info("event %d: handoff missed its %.0f s window, falling back", index, ev.warning_window_s)
            self._fallback(index, t, ev.target)

    def _switched(self) -> set:
        return {s.tag for s in self.sm.switches}

    def _fallback(self, index: int, t: float, target: ParallelConfig):
        sm = self.sm
        credit = ()
        if sm.shadow_tag == index and sm.phase in (Phase.PREPARE, Phase.READY, Phase.SWITCH):
            credit = [k.kind for k in sm.tasks if k.completed]
        # anything queued up to this event is superseded by the restart
        while sm.queue and index in [q[2] for q in sm.queue]:
            _, _, tag = sm.queue.popleft()
            if tag != index:
                self.done.add(tag)
        self._restart(index, t, target, Strategy.COLD, credit)

    def run(self) -> SimResult:
        sc = self.scenario
        for i, ev in enumerate(sc.events):
            self.outcomes.append(EventOutcome(i, ev.time_s, ev.kind, self.strategy))
        for i, ev in enumerate(sc.events):
            if self.strategy is Strategy.LIVE:
                self._fire_deadlines(ev.time_s)
            t = self._at(ev.time_s)
            if t > sc.duration_s:
                break
            self.sm.advance(t)
            if self.strategy is not Strategy.LIVE:
                self._restart(i, t, ev.target, self.strategy)
                continue
            if ev.kind is EventKind.FAIL_STOP:
                self._fallback(i, t, ev.target)
                continue
            target = ev.target.with_generation(self.sm.active.generation_id + 1 + len(self.sm.queue)
                                               + (self.sm.phase in (Phase.PREPARE, Phase.READY, Phase.SWITCH)))
            self.sm.trigger_resize(target, ev.warning_window_s, tag=i)
            if math.isfinite(ev.warning_window_s):
                heapq.heappush(self.deadlines, (t + ev.warning_window_s, i))
        if self.strategy is Strategy.LIVE:
            self._fire_deadlines(sc.duration_s)
        end = sc.duration_s
        if self.sm.now <= end:
            self.sm.advance(end)
        return self._collect(end)

    def _collect(self, end: float) -> SimResult:
        sm = self.sm
        segs = _iteration_segments(sm.iterations, "iteration") + _iteration_segments(sm.lost, "lost")
        # both worlds are held for the whole pause, so charge the larger one
        for s in sm.switches:
            segs.append(Segment(s.start_s, s.end_s, max(s.old.world_size, s.new.world_size), "pause"))
            out = self.outcomes[s.tag]
            out.pause_s, out.phase_drain_s = s.cost.pause_s, s.cost.drain_s
            out.phase_transfer_s, out.phase_swap_s = s.cost.transfer_s, s.cost.swap_s
        if sm.switch_window is not None:
            segs.append(Segment(sm.switch_window[0], end,
                                max(sm.active.world_size, sm.shadow.world_size), "pause"))
        elif sm.iteration_start_s < end:
            # the final partial iteration still produced useful work
            segs.append(Segment(sm.iteration_start_s, end, sm.active.world_size, "iteration",
                                sm.iteration_slowdown))
        segs += self.recoveries
        clipped = []
        for s in segs:
            if s.start_s >= end:
                continue
            clipped.append(s if s.end_s <= end else Segment(s.start_s, end, s.world, s.kind, s.slowdown))
        clipped.sort(key=lambda s: (s.start_s, s.end_s))
        result = SimResult(self.strategy, end, self.outcomes, clipped, duty_cycle=self.cost.duty_cycle)
        _account(result, self.cost.duty_cycle)
        return result


def run_scenario(model: ModelSpec, initial: ParallelConfig, scenario: ElasticityScenario, cost: CostModel,
                 strategy: Strategy) -> SimResult:
    """Simulate ``scenario`` under one strategy.  Deterministic for fixed inputs."""
    strategy = Strategy(strategy)
    check_config(initial, model)
    scenario.validate(model)
    return _Run(model, initial, scenario, cost, strategy).run()


# --- reports ----------------------------------------------------------------


@dataclass(frozen=True)
class SpeedupRow:
    model: str
    old: tuple[int, int, int]
    new: tuple[int, int, int]
    reference: str
    reference_s: float
    baselines: dict

    def ratio(self, strategy: Strategy) -> float:
        return self.baselines[Strategy(strategy).value] / self.reference_s


def default_transition(size: float, model: ModelSpec) -> tuple[ParallelConfig, ParallelConfig]:
    """Scale-out 16 -> 32 GPUs used for the per-size speedup table."""
    tp = 8 if size >= 30 else 4
    dp = 1 if size >= 30 else 2
    old = ParallelConfig.create(tp, 2, dp, model.num_layers)
    return old, old.next_generation(tp, 4, dp)


def event_downtime(strategy: Strategy, old: ParallelConfig, new: ParallelConfig, model: ModelSpec,
                   cost: CostModel) -> float:
    strategy = Strategy(strategy)
    if strategy is Strategy.LIVE:
        return live_event_latency(old, new, model, cost).pause_s
    return restart_latency(strategy, new, model, cost).total_s


def speedup_report(model_sizes: Sequence[float], cost: CostModel, *,
                   strategies: Sequence[Strategy] = (Strategy.COLD, Strategy.RESHAPE),
                   reference: Strategy = Strategy.LIVE, reference_cost: Optional[CostModel] = None,
                   transition: Callable = default_transition) -> list[SpeedupRow]:
    rows = []
    for size in model_sizes:
        model = gpt_by_size(size)
        old, new = transition(size, model)
        ref = event_downtime(reference, old, new, model, reference_cost or cost)
        base = {Strategy(s).value: event_downtime(s, old, new, model, cost) for s in strategies}
        rows.append(SpeedupRow(model.name, old.degrees, new.degrees, Strategy(reference).value, ref, base))
    return rows


# --- calibration ------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseTrace:
    """Measured phase totals (seconds) of one restart on ``config``."""
    model: ModelSpec
    config: ParallelConfig
    phases: dict


@dataclass
class CalibrationReport:
    fitted: CostModel
    divergence: dict = field(default_factory=dict)  # (trace index, phase) -> relative error
    unresolved: list = field(default_factory=list)
    flagged: list = field(default_factory=list)
    tolerance: float = 0.05

    @property
    def defined(self) -> bool:
        return bool(self.divergence)

    @property
    def max_divergence(self) -> Optional[float]:
        return max(self.divergence.values()) if self.divergence else None


_INIT_FIELDS = ("process_spawn_s", "tcp_bootstrap_s", "topology_discovery_base_s", "topology_discovery_per_rank_s",
                "communicator_setup_base_s", "communicator_setup_per_rank_s", "warmup_base_s", "warmup_per_GB_s")


def _simulated(trace: PhaseTrace, cost: CostModel) -> dict:
    bd = restart_latency(Strategy.COLD, trace.config, trace.model, cost)
    return {"load": bd.load_s, "init": bd.init_s, "misc": bd.misc_s, "total": bd.total_s}


def calibrate(cost: CostModel, traces: Sequence[PhaseTrace], tolerance: float = 0.05) -> CalibrationReport:
    """Fit restart constants to measured phase totals.

    Each phase is fitted by the median of measured/simulated ratios, so one
    trace is reproduced exactly and a single outlying trace cannot drag the
    fit; its divergence then shows up in the report.
    """
    known = ("load", "init", "misc")
    if not traces:
        return CalibrationReport(cost, unresolved=list(known), tolerance=tolerance)
    fitted = cost
    unresolved = []
    for phase in known:
        pairs = [(t.phases[phase], _simulated(t, cost)[phase]) for t in traces if phase in t.phases]
        ratios = [m / s for m, s in pairs if s > 0]
        if not ratios:
            unresolved.append(phase)
            continue
        r = statistics.median(ratios)
        if phase == "load":
            fitted = fitted.replace(storage_bw_Gbps_per_gpu=fitted.storage_bw_Gbps_per_gpu / r,
                                    storage_aggregate_GBps=fitted.storage_aggregate_GBps / r)
        elif phase == "init":
            fitted = fitted.replace(**{f: getattr(fitted, f) * r for f in _INIT_FIELDS})
        else:
            fitted = fitted.replace(misc_restart_s=statistics.median(m for m, _ in pairs))
    for t in traces:
        unknown = set(t.phases) - set(known) - {"total"}
        unresolved += sorted(unknown - set(unresolved))
    divergence = {}
    flagged = []
    for i, t in enumerate(traces):
        sim = _simulated(t, fitted)
        for phase, measured in t.phases.items():
            if phase not in sim or measured <= 0:
                continue
            err = abs(sim[phase] - measured) / measured
            divergence[(i, phase)] = err
            if err > tolerance:
                flagged.append((i, phase))
    return CalibrationReport(fitted, divergence, unresolved, flagged, tolerance)


# --- scenario builders ---------------------------------------------------------------

HOUR = 3600.0

# regime -> mean interval between events (s)
REGIMES = {"low": 3600.0, "medium": 1800.0, "high": 600.0}


def alternating_scenario(duration_s: float, interval_s: float, configs: Sequence[ParallelConfig], *,
                         jitter: float = 0.0, seed: int = 0, warning_window_s: float = INF,
                         kind: EventKind = EventKind.PLANNED, regime: str = "custom",
                         checkpoint_interval: int = 100, iteration_time_s: Optional[float] = None,
                         count: Optional[int] = None) -> ElasticityScenario:
    """Events every ``interval_s`` (offset by half an interval), cycling through ``configs``.

    ``jitter`` moves each event uniformly by up to that fraction of the interval.
    """
    rng = random.Random(seed)
    n = count if count is not None else int(duration_s // interval_s)
    events = []
    for k in range(n):
        t = (k + 0.5) * interval_s + rng.uniform(-jitter, jitter) * interval_s
        t = min(max(t, 0.0), duration_s)
        window = 0.0 if kind is EventKind.FAIL_STOP else warning_window_s
        events.append(Event(round(t, 6), kind, configs[(k + 1) % len(configs)], window))
    return ElasticityScenario(duration_s, events, regime, seed, checkpoint_interval, iteration_time_s)


# the calibrated testbed workload: a 14B model alternating between 32 and 16 GPUs
TESTBED_ITERATION_S = 3.7
REGIME_SEED = 43
DAY_SEED = 48
DAY_EVENTS = 47
DAY_CHECKPOINT_INTERVAL = 20


def regime_configs(model: ModelSpec) -> tuple[ParallelConfig, ParallelConfig]:
    full = ParallelConfig.create(4, 4, 2, model.num_layers)
    return full, full.next_generation(4, 4, 1)


def day_configs(model: ModelSpec) -> tuple[ParallelConfig, ParallelConfig]:
    full = ParallelConfig.create(2, 8, 2, model.num_layers)
    return full, full.next_generation(2, 4, 2)


def volatility_regime_scenario(regime: str, model: ModelSpec, *, duration_s: float = 8 * HOUR,
                               seed: int = REGIME_SEED, warning_window_s: float = INF,
                               checkpoint_interval: int = 100) -> tuple[ParallelConfig, ElasticityScenario]:
    """Planned events every regime interval (20% jitter); returns (initial config, scenario)."""
    if regime not in REGIMES:
        raise ScenarioError(f"unknown regime {regime!r}; expected one of {sorted(REGIMES)}")
    full, half = regime_configs(model)
    sc = alternating_scenario(duration_s, REGIMES[regime], [full, half], jitter=0.2, seed=seed,
                              warning_window_s=warning_window_s, regime=regime,
                              checkpoint_interval=checkpoint_interval,
                              iteration_time_s=TESTBED_ITERATION_S)
    return full, sc


def day_scenario(model: ModelSpec, *, seed: int = DAY_SEED,
                 warning_window_s: float = INF) -> tuple[ParallelConfig, ElasticityScenario]:
    """24 hours with 47 resize events between 32 and 16 GPUs."""
    full, half = day_configs(model)
    sc = alternating_scenario(24 * HOUR, 24 * HOUR / DAY_EVENTS, [full, half], jitter=0.2, seed=seed,
                              warning_window_s=warning_window_s, regime="day",
                              checkpoint_interval=DAY_CHECKPOINT_INTERVAL,
                              iteration_time_s=TESTBED_ITERATION_S, count=DAY_EVENTS)
    return full, sc


def large_scale_configs(model: ModelSpec) -> tuple[ParallelConfig, ParallelConfig]:
    """Scale-out from 512 to 1024 GPUs at TP8 x PP8."""
    half = ParallelConfig.create(8, 8, 8, model.num_layers)
    return half, half.next_generation(8, 8, 16)
