"""Generation state machine for live reconfiguration.

One mutator owns the machine.  Background preparation is modeled as timed
tasks; the active world keeps iterating while they run, and the only pause is
the drain + transfer + swap window at an iteration boundary.
"""
from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .costmodel import (CostModel, parameter_only, state_bytes_per_gpu, transfer_state_bytes,
                        transfer_time_s)
from .planner import compute_transfer_plan
from .topology import ModelSpec, ParallelConfig, check_config

log = logging.getLogger(__name__)


class Phase(str, enum.Enum):
    STABLE = "Stable"
    PREPARE = "Prepare"
    READY = "Ready"
    SWITCH = "Switch"
    CLEANUP = "Cleanup"


_FORWARD = {
    Phase.STABLE: Phase.PREPARE,
    Phase.PREPARE: Phase.READY,
    Phase.READY: Phase.SWITCH,
    Phase.SWITCH: Phase.CLEANUP,
    Phase.CLEANUP: Phase.STABLE,
}
# abort edges: a pending handoff may be dropped before the switch commits
_ABORT = {Phase.PREPARE, Phase.READY, Phase.SWITCH}


class RuntimeStateError(RuntimeError):
    pass


class StaleGenerationError(RuntimeStateError):
    pass


class PrepKind(str, enum.Enum):
    TCP_BOOTSTRAP = "tcp_bootstrap"
    TOPOLOGY_DISCOVERY = "topology_discovery"
    COMMUNICATOR_SETUP = "communicator_setup"
    MOCK_WARMUP = "mock_warmup"
    PLAN_COMPUTE = "plan_compute"


@dataclass
class PrepTask:
    kind: PrepKind
    ranks: tuple[int, ...]
    start_s: float
    duration_s: float
    completed: bool = False

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s


@dataclass(frozen=True)
class GenerationState:
    phase: Phase
    active_gen: ParallelConfig
    shadow_gen: Optional[ParallelConfig]
    iteration: int

    def __post_init__(self):
        if self.iteration < 0:
            raise RuntimeStateError("iteration must be non-negative")
        has_shadow = self.phase in (Phase.PREPARE, Phase.READY, Phase.SWITCH, Phase.CLEANUP)
        if has_shadow != (self.shadow_gen is not None):
            raise RuntimeStateError(f"shadow generation {'missing' if has_shadow else 'present'} in {self.phase.value}")
        if self.shadow_gen is not None and self.phase is not Phase.CLEANUP \
                and self.shadow_gen.generation_id != self.active_gen.generation_id + 1:
            raise RuntimeStateError("shadow generation must be active + 1")

    @property
    def generations(self) -> tuple[int, ...]:
        if self.shadow_gen is None:
            return (self.active_gen.generation_id,)
        return (self.active_gen.generation_id, self.shadow_gen.generation_id)


@dataclass(frozen=True)
class TransitionRecord:
    timestamp: float
    phase_from: Phase
    phase_to: Phase
    gen_active: int
    gen_shadow: Optional[int]
    pause_accrued_s: float = 0.0


@dataclass(frozen=True)
class IterationRecord:
    index: int
    start_s: float
    end_s: float
    world: int
    slowdown: float
    generation_id: int

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class SwitchRecord:
    tag: object
    start_s: float
    end_s: float
    cost: SwitchCost
    old: ParallelConfig
    new: ParallelConfig


@dataclass(frozen=True)
class AllocationRequest:
    purpose: str
    nbytes: int
    generation_id: int


@dataclass(frozen=True)
class FallbackOutcome:
    recovery_mode: str  # "checkpoint" unless the failure hit after the commit
    reusable_prep: frozenset
    resume_iteration: int
    lost_iterations: int
    handoff_aborted: bool


@dataclass(frozen=True)
class SwitchCost:
    drain_s: float
    transfer_s: float
    swap_s: float
    transfer_bytes: float

    @property
    def pause_s(self) -> float:
        return self.drain_s + self.transfer_s + self.swap_s


# --- mock collectives -----------------------------------------------------


@dataclass
class MockCollectiveLedger:
    calls: dict[int, list[tuple[str, int]]] = field(default_factory=dict)
    transport_bytes: int = 0

    def record(self, rank: int, name: str, payload_bytes: int):
        self.calls.setdefault(rank, []).append((name, int(payload_bytes)))

    def __len__(self):
        return sum(len(v) for v in self.calls.values())


class MockProcessGroup:
    """Process group stand-in used while a cold rank warms up.

    Every collective is recorded and returns locally; nothing reaches a
    transport, so active ranks can never block on a joiner.
    """

    def __init__(self, rank: int, ledger: MockCollectiveLedger):
        self.rank = rank
        self.ledger = ledger

    def _intercept(self, name: str, nbytes: int):
        self.ledger.record(self.rank, name, nbytes)

    def all_reduce(self, nbytes: int):
        self._intercept("all_reduce", nbytes)

    def all_gather(self, nbytes: int):
        self._intercept("all_gather", nbytes)

    def reduce_scatter(self, nbytes: int):
        self._intercept("reduce_scatter", nbytes)

    def broadcast(self, nbytes: int):
        self._intercept("broadcast", nbytes)

    def send(self, nbytes: int, peer: int):
        self._intercept(f"send:{peer}", nbytes)

    def recv(self, nbytes: int, peer: int):
        self._intercept(f"recv:{peer}", nbytes)

    def barrier(self):
        self._intercept("barrier", 0)


def simulate_mock_warmup(rank: int, cost: CostModel, *, cold: bool = True, state_bytes: float = 0.0,
                         ledger: Optional[MockCollectiveLedger] = None, steps: int = 2,
                         bucket_bytes: int = 25 << 20):
    """Warm up one rank against mock collectives.

    Returns ``(duration_s, ledger)``.  Warm ranks (already compiled) take 0 s
    and record nothing.
    """
    ledger = ledger if ledger is not None else MockCollectiveLedger()
    if not cold:
        return 0.0, ledger
    pg = MockProcessGroup(rank, ledger)
    pg.barrier()
    pg.broadcast(bucket_bytes)
    for _ in range(steps):
        # forward/backward activations, gradient buckets, optimizer step
        pg.send(bucket_bytes, rank + 1)
        pg.recv(bucket_bytes, rank - 1)
        pg.reduce_scatter(bucket_bytes)
        pg.all_gather(bucket_bytes)
        pg.all_reduce(bucket_bytes)
    pg.barrier()
    if ledger.transport_bytes != 0:
        raise RuntimeStateError("mock warmup leaked bytes onto the transport")
    return cost.warmup_s(state_bytes), ledger


# --- cost helpers ---------------------------------------------------------


def switch_cost(old: ParallelConfig, new: ParallelConfig, model: ModelSpec, cost: CostModel) -> SwitchCost:
    """Pause components of a live switch from ``old`` to ``new``."""
    params = parameter_only(model)
    plan = compute_transfer_plan(old, new, params, validate=False)
    world = max(old.world_size, new.world_size)
    return SwitchCost(cost.drain_s(old.world_size), transfer_time_s(plan, params, cost, world),
                      cost.swap_s, transfer_state_bytes(plan, params))


def cold_ranks(old: ParallelConfig, new: ParallelConfig) -> tuple[int, ...]:
    """Ranks that have no live process yet.  Persisting ranks never warm up again."""
    existing = set(old.ranks)
    return tuple(r for r in new.ranks if r not in existing)


def schedule_prep(old: ParallelConfig, new: ParallelConfig, model: ModelSpec, cost: CostModel,
                  t0: float) -> list[PrepTask]:
    cold = cold_ranks(old, new)
    world = new.world_size
    everyone = tuple(new.ranks)
    s = cost.process_spawn_s if cold else 0.0
    boot = PrepTask(PrepKind.TCP_BOOTSTRAP, everyone, t0 + s, cost.tcp_bootstrap_s)
    disc = PrepTask(PrepKind.TOPOLOGY_DISCOVERY, everyone, t0 + s, cost.topology_discovery_s(world))
    comm_start = max(boot.end_s, disc.end_s)
    tasks = [
        PrepTask(PrepKind.PLAN_COMPUTE, (), t0, cost.plan_compute_s),
        boot,
        disc,
        PrepTask(PrepKind.COMMUNICATOR_SETUP, everyone, comm_start, cost.communicator_setup_s(world)),
    ]
    if cold:
        tasks.append(PrepTask(PrepKind.MOCK_WARMUP, cold, t0 + s,
                              cost.warmup_s(state_bytes_per_gpu(model, new))))
    return tasks


def prepare_time_s(old: ParallelConfig, new: ParallelConfig, model: ModelSpec, cost: CostModel) -> float:
    return max(t.end_s for t in schedule_prep(old, new, model, cost, 0.0))


# --- the state machine ----------------------------------------------------


class GenerationStateMachine:
    """Single-mutator lifecycle of the active and shadow worlds."""

    def __init__(self, config: ParallelConfig, model: ModelSpec, cost: CostModel, *,
                 checkpoint_interval: int = 100, start_s: float = 0.0,
                 iteration_time_s: Optional[float] = None):
        if checkpoint_interval <= 0:
            raise ValueError("checkpoint_interval must be positive")
        check_config(config, model)
        self.model = model
        self.cost = cost
        self.checkpoint_interval = checkpoint_interval
        self._fixed_iteration_s = iteration_time_s
        self.phase = Phase.STABLE
        self.active = config
        self.shadow: Optional[ParallelConfig] = None
        self.now = start_s
        self.iteration = 0
        self.tasks: list[PrepTask] = []
        self.queue: deque = deque()
        self.log: list[TransitionRecord] = []
        self.iterations: list[IterationRecord] = []
        self.lost: list[IterationRecord] = []
        self.allocations: list[AllocationRequest] = []
        self.mock_ledger = MockCollectiveLedger()
        self.warning_deadline: Optional[float] = None
        self._iter_start = start_s
        self._iter_slowdown = 1.0
        self.switches: list[SwitchRecord] = []
        self.configs: dict[int, ParallelConfig] = {config.generation_id: config}
        self.shadow_tag = None
        self._switch: Optional[tuple[float, float, SwitchCost]] = None
        self._cleanup_end: Optional[float] = None

    # --- observers ------------------------------------------------------

    def snapshot(self) -> GenerationState:
        return GenerationState(self.phase, self.active, self.shadow, self.iteration)

    @property
    def total_pause_s(self) -> float:
        return sum(r.pause_accrued_s for r in self.log)

    def base_iteration_s(self, config: Optional[ParallelConfig] = None) -> float:
        if self._fixed_iteration_s is not None:
            return self._fixed_iteration_s
        return self.cost.iteration_time_s(config or self.active, self.model)

    @property
    def switch_window(self) -> Optional[tuple[float, float]]:
        """(start, end) of the pause in progress, if any."""
        return None if self._switch is None else self._switch[:2]

    @property
    def iteration_start_s(self) -> float:
        return self._iter_start

    @property
    def iteration_slowdown(self) -> float:
        return self._iter_slowdown

    def slowdown(self) -> float:
        """Iteration-time multiplier from background preparation."""
        if self.phase in (Phase.PREPARE, Phase.READY):
            return 1.0 + self.cost.interference_factor
        return 1.0

    def lookup(self, generation_id: int) -> ParallelConfig:
        """Routing lookup; references to a retired generation always fail."""
        if generation_id == self.active.generation_id:
            return self.active
        if self.shadow is not None and generation_id == self.shadow.generation_id \
                and self.phase in (Phase.PREPARE, Phase.READY, Phase.SWITCH):
            return self.shadow
        if generation_id < self.active.generation_id:
            raise StaleGenerationError(f"generation {generation_id} retired; active is {self.active.generation_id}")
        raise RuntimeStateError(f"unknown generation {generation_id}")

    # --- transitions ----------------------------------------------------

    def _move(self, to: Phase, t: float, pause: float = 0.0):
        if _FORWARD[self.phase] is not to and not (to is Phase.STABLE and self.phase in _ABORT):
            raise RuntimeStateError(f"illegal transition {self.phase.value} -> {to.value}")
        rec = TransitionRecord(t, self.phase, to, self.active.generation_id,
                               self.shadow.generation_id if self.shadow else None, pause)
        self.log.append(rec)
        log.debug("t=%.3f %s -> %s (gen %d)", t, self.phase.value, to.value, self.active.generation_id)
        self.phase = to

    def trigger_resize(self, target: ParallelConfig, warning_window_s: float = float("inf"),
                       now: Optional[float] = None, tag=None) -> GenerationState:
        """Start preparing ``target`` in the background, or queue it if a handoff is under way."""
        if now is not None:
            self.advance(now)
        if target.generation_id <= self.active.generation_id:
            raise RuntimeStateError(f"target generation {target.generation_id} is not newer than "
                                    f"active {self.active.generation_id}")
        if warning_window_s < 0:
            raise ValueError("warning window must be >= 0")
        check_config(target, self.model)
        if self.phase is not Phase.STABLE:
            self.queue.append((target, warning_window_s, tag))
            log.info("resize to gen %d queued behind %s", target.generation_id, self.phase.value)
            return self.snapshot()
        if target.generation_id != self.active.generation_id + 1:
            raise RuntimeStateError(f"target generation must be {self.active.generation_id + 1}, "
                                    f"got {target.generation_id}")
        self._begin_prepare(target, warning_window_s, self.now, tag)
        return self.snapshot()

    def _begin_prepare(self, target: ParallelConfig, warning_window_s: float, t0: float, tag=None):
        self.shadow = target
        self.shadow_tag = tag
        self.configs[target.generation_id] = target
        self._move(Phase.PREPARE, t0)
        self.warning_deadline = t0 + warning_window_s
        self.tasks = schedule_prep(self.active, target, self.model, self.cost, t0)
        for r in cold_ranks(self.active, target):
            simulate_mock_warmup(r, self.cost, ledger=self.mock_ledger)
        # the only extra memory a handoff asks for
        self.allocations.append(AllocationRequest("staging", self.cost.staging_buffer_bytes, target.generation_id))
        self.allocations.append(AllocationRequest("communicator_metadata", self.cost.communicator_metadata_bytes,
                                                  target.generation_id))

    def _next_prep_end(self) -> Optional[float]:
        pending = [t.end_s for t in self.tasks if not t.completed]
        return min(pending) if pending else None

    def _iteration_end(self) -> float:
        return self._iter_start + self.base_iteration_s() * self._iter_slowdown

    def advance(self, now: float) -> GenerationState:
        """Move simulated time forward to ``now``, firing every due transition."""
        if now < self.now:
            raise RuntimeStateError(f"time went backwards: {now} < {self.now}")
        while True:
            candidates = []
            if self._switch is not None:
                candidates.append((self._switch[1], 0, "switch_done"))
            else:
                candidates.append((self._iteration_end(), 2, "boundary"))
            if self.phase is Phase.PREPARE:
                t = self._next_prep_end()
                if t is not None:
                    candidates.append((t, 1, "prep"))
            if self.phase is Phase.CLEANUP and self._cleanup_end is not None:
                candidates.append((self._cleanup_end, 3, "cleanup"))
            t, _, what = min(candidates)
            if t > now:
                break
            self.now = t
            if what == "prep":
                for task in self.tasks:
                    if not task.completed and task.end_s <= t:
                        task.completed = True
                if all(task.completed for task in self.tasks):
                    self._move(Phase.READY, t)
            elif what == "boundary":
                self._finish_iteration(t)
            elif what == "switch_done":
                self.atomic_switch()
            elif what == "cleanup":
                self._finish_cleanup(t)
        self.now = now
        return self.snapshot()

    def _finish_iteration(self, t: float):
        self.iterations.append(IterationRecord(self.iteration, self._iter_start, t, self.active.world_size,
                                               self._iter_slowdown, self.active.generation_id))
        self.iteration += 1
        if self.phase is Phase.READY:
            # consistent cut: no pipeline work is in flight at an iteration boundary
            sc = switch_cost(self.active, self.shadow, self.model, self.cost)
            self._move(Phase.SWITCH, t)
            self._switch = (t, t + sc.pause_s, sc)
        else:
            self._start_iteration(t)

    def _start_iteration(self, t: float):
        self._iter_start = t
        self._iter_slowdown = self.slowdown()

    def atomic_switch(self) -> GenerationState:
        if self.phase is not Phase.SWITCH or self._switch is None:
            raise RuntimeStateError(f"atomic_switch requires Switch, in {self.phase.value}")
        start, end, sc = self._switch
        if self.now < end:
            raise RuntimeStateError("transfer still in progress")
        old = self.active
        self.switches.append(SwitchRecord(self.shadow_tag, start, end, sc, old, self.shadow))
        self.active, self.shadow = self.shadow, old
        self._switch = None
        rec = TransitionRecord(end, Phase.SWITCH, Phase.CLEANUP, self.active.generation_id,
                               old.generation_id, sc.pause_s)
        self.log.append(rec)
        self.phase = Phase.CLEANUP
        self._cleanup_end = end + self.cost.cleanup_s
        self._start_iteration(end)
        return self.snapshot()

    def _finish_cleanup(self, t: float):
        # old world reclaimed off the critical path
        self.log.append(TransitionRecord(t, Phase.CLEANUP, Phase.STABLE, self.active.generation_id, None, 0.0))
        self.phase = Phase.STABLE
        self.shadow = None
        self.tasks = []
        self._cleanup_end = None
        self.warning_deadline = None
        self.shadow_tag = None
        self._drain_queue(t)

    def _drain_queue(self, t: float):
        if self.phase is not Phase.STABLE or not self.queue:
            return
        target, window, tag = self.queue.popleft()
        # generation ids of queued targets are re-stamped against the current active world
        target = target.with_generation(self.active.generation_id + 1)
        self._begin_prepare(target, window, t, tag)

    # --- failure handling -----------------------------------------------

    def checkpoint_floor(self, iteration: Optional[int] = None) -> int:
        n = self.iteration if iteration is None else iteration
        return (n // self.checkpoint_interval) * self.checkpoint_interval

    def abort_and_fallback(self, failure_time: float, recovery_s: float = 0.0,
                           resume_config: Optional[ParallelConfig] = None) -> FallbackOutcome:
        """Fail-stop at ``failure_time``: drop any uncommitted handoff and roll back to a checkpoint.

        Training resumes ``recovery_s`` later, on ``resume_config`` when the
        failure also changed the available ranks.
        """
        self.advance(failure_time)
        aborted = self.phase in _ABORT
        reusable = frozenset(t.kind for t in self.tasks if t.completed) if aborted else frozenset()
        if self._switch is None and failure_time > self._iter_start:
            # the iteration in flight never completes
            self.lost.append(IterationRecord(self.iteration, self._iter_start, failure_time,
                                             self.active.world_size, self._iter_slowdown,
                                             self.active.generation_id))
        n = self.iteration
        resume = self.checkpoint_floor(n)
        self.lost.extend(r for r in self.iterations if r.index >= resume)
        self.iterations = [r for r in self.iterations if r.index < resume]
        self.iteration = resume
        if aborted:
            # active state is intact at iteration n; the shadow copy is discarded
            self._switch = None
            self._move(Phase.STABLE, failure_time)
        elif self.phase is Phase.CLEANUP:
            self._move(Phase.STABLE, failure_time)
            self._cleanup_end = None
        self.shadow = None
        self.shadow_tag = None
        self.tasks = []
        self.warning_deadline = None
        if resume_config is not None:
            # never reuse the id of a discarded shadow
            self.active = resume_config.with_generation(max(self.configs) + 1)
            self.configs[self.active.generation_id] = self.active
        log.info("fail-stop at %.1f s: resume from iteration %d (lost %d)", failure_time, resume, n - resume)
        self.now = failure_time + recovery_s
        self._start_iteration(self.now)
        self._drain_queue(self.now)
        return FallbackOutcome("checkpoint", reusable, resume, n - resume, aborted)

    def cancel_handoff(self, now: float, new_target: Optional[ParallelConfig] = None,
                       warning_window_s: float = float("inf")) -> GenerationState:
        """A shadow rank vanished before the commit: drop the handoff, optionally re-prepare."""
        self.advance(now)
        if self.phase not in (Phase.PREPARE, Phase.READY):
            raise RuntimeStateError(f"nothing to cancel in {self.phase.value}")
        tag = self.shadow_tag
        self._move(Phase.STABLE, now)
        self.shadow = None
        self.shadow_tag = None
        self.tasks = []
        self.warning_deadline = None
        if new_target is not None:
            target = new_target.with_generation(self.active.generation_id + 1)
            check_config(target, self.model)
            self._begin_prepare(target, warning_window_s, now, tag)
        else:
            self._drain_queue(now)
        return self.snapshot()
