import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_handoff.costmodel import CostModel, state_bytes_per_gpu
from elastic_handoff.runtime import (GenerationState, GenerationStateMachine, MockCollectiveLedger, Phase, PrepKind,
                                     RuntimeStateError, StaleGenerationError, cold_ranks, prepare_time_s,
                                     schedule_prep, simulate_mock_warmup, switch_cost)
from elastic_handoff.topology import ParallelConfig

from helpers import toy

MODEL = toy(layers=4, dims=(16, 16))
COST = CostModel()
TAU = 1.0  # fixed iteration time keeps arithmetic readable


def base(**kw):
    return GenerationStateMachine(ParallelConfig.create(2, 2, 1, 4), MODEL, COST, iteration_time_s=TAU, **kw)


def grow(sm, tp=2, pp=2, dp=2):
    return ParallelConfig.create(tp, pp, dp, 4, generation_id=sm.active.generation_id + 1)


def run_to_stable(sm, limit=1000.0):
    t = sm.now
    while sm.phase is not Phase.STABLE and t < limit:
        t += 0.5
        sm.advance(t)
    return sm


# --- GenerationState ------------------------------------------------------------------


def test_state_rejects_shadow_in_stable():
    a = ParallelConfig.create(1, 1, 1, 4)
    with pytest.raises(RuntimeStateError):
        GenerationState(Phase.STABLE, a, a.with_generation(1), 0)


def test_state_rejects_non_successor_shadow():
    a = ParallelConfig.create(1, 1, 1, 4)
    with pytest.raises(RuntimeStateError):
        GenerationState(Phase.PREPARE, a, a.with_generation(5), 0)


# --- trigger_resize ------------------------------------------------------------------------


def test_trigger_scale_out_enters_prepare():
    sm = base()
    s = sm.trigger_resize(grow(sm))
    assert s.phase is Phase.PREPARE
    assert s.shadow_gen.generation_id == 1


def test_trigger_during_switch_is_queued():
    sm = base()
    sm.trigger_resize(grow(sm))
    while sm.phase is not Phase.SWITCH:
        sm.advance(sm.now + 0.25)
    before = sm.snapshot()
    after = sm.trigger_resize(grow(sm, 4, 1, 1).with_generation(2))
    assert after == before
    assert len(sm.queue) == 1


def test_non_monotonic_target_rejected():
    sm = base()
    with pytest.raises(RuntimeStateError):
        sm.trigger_resize(ParallelConfig.create(2, 2, 2, 4, generation_id=0))
    with pytest.raises(RuntimeStateError):
        sm.trigger_resize(ParallelConfig.create(2, 2, 2, 4, generation_id=3))


def test_active_world_keeps_iterating_during_prepare():
    sm = base()
    sm.trigger_resize(grow(sm))
    sm.advance(10.0)
    assert sm.phase in (Phase.PREPARE, Phase.READY)
    # iteration 0 started before the trigger; the next nine run 0.3% slower
    assert sm.iteration == 1 + math.floor(9.0 / (TAU * (1 + COST.interference_factor)))
    assert sm.total_pause_s == 0.0


# --- advance / switch --------------------------------------------------------------------------


def test_ready_waits_for_iteration_boundary():
    sm = base()
    sm.trigger_resize(grow(sm))
    ready_at = prepare_time_s(sm.active, sm.shadow, MODEL, COST)
    sm.advance(ready_at)
    assert sm.phase is Phase.READY
    boundary = math.ceil(ready_at * (1 + COST.interference_factor))  # coarse upper bound
    sm.advance(sm.iteration_start_s + TAU * sm.iteration_slowdown - 1e-9)
    assert sm.phase is Phase.READY
    assert sm.now < boundary + 1


def test_switch_pause_is_drain_transfer_swap():
    sm = base()
    target = grow(sm)
    expected = switch_cost(sm.active, target, MODEL, COST)
    sm.trigger_resize(target)
    run_to_stable(sm)
    assert sm.total_pause_s == pytest.approx(expected.drain_s + expected.transfer_s + expected.swap_s)
    [rec] = [r for r in sm.log if r.pause_accrued_s > 0]
    assert rec.phase_from is Phase.SWITCH and rec.phase_to is Phase.CLEANUP


def test_next_iteration_runs_on_new_generation():
    sm = base()
    sm.trigger_resize(grow(sm))
    run_to_stable(sm)
    sm.advance(sm.now + 3)
    sw = sm.switches[0]
    first_new = next(r for r in sm.iterations if r.start_s >= sw.end_s)
    assert first_new.start_s == pytest.approx(sw.end_s)
    assert first_new.generation_id == 1
    assert first_new.index == sm.iterations[sm.iterations.index(first_new) - 1].index + 1


def test_phase_sequence():
    sm = base()
    sm.trigger_resize(grow(sm))
    run_to_stable(sm)
    seq = [(r.phase_from, r.phase_to) for r in sm.log]
    assert seq == [(Phase.STABLE, Phase.PREPARE), (Phase.PREPARE, Phase.READY), (Phase.READY, Phase.SWITCH),
                   (Phase.SWITCH, Phase.CLEANUP), (Phase.CLEANUP, Phase.STABLE)]


# --- atomic_switch / lookup ---------------------------------------------------------------------


def test_stale_lookup_after_switch():
    sm = base()
    sm.trigger_resize(grow(sm))
    run_to_stable(sm)
    with pytest.raises(StaleGenerationError):
        sm.lookup(0)
    assert sm.lookup(1) is sm.active


def test_atomic_switch_requires_switch_phase():
    sm = base()
    with pytest.raises(RuntimeStateError):
        sm.atomic_switch()


def test_swap_is_sub_second_and_counted():
    sm = base()
    sm.trigger_resize(grow(sm))
    run_to_stable(sm)
    sw = sm.switches[0].cost
    assert sw.swap_s == 0.4 < 0.5
    assert sw.pause_s == pytest.approx(sw.drain_s + sw.transfer_s + 0.4)


# --- mock warmup --------------------------------------------------------------------------------


def test_cold_warmup_reads_cost_model_and_sends_nothing():
    d, ledger = simulate_mock_warmup(5, COST)
    assert d == COST.warmup_base_s
    assert len(ledger) > 0 and ledger.transport_bytes == 0


def test_warm_rank_takes_no_time():
    d, ledger = simulate_mock_warmup(5, COST, cold=False)
    assert d == 0.0 and len(ledger) == 0


def test_sixteen_cold_ranks_leave_active_iteration_time_within_factor():
    sm = base()
    target = ParallelConfig.create(2, 2, 5, 4, generation_id=1)
    assert len(cold_ranks(sm.active, target)) == 16
    sm.trigger_resize(target)
    sm.advance(20.0)
    durations = [r.duration_s for r in sm.iterations]
    assert max(durations) <= TAU * (1 + COST.interference_factor) + 1e-12
    assert len(sm.mock_ledger.calls) == 16 and sm.mock_ledger.transport_bytes == 0


def test_persisting_ranks_skip_warmup():
    old = ParallelConfig.create(2, 2, 1, 4)
    new = ParallelConfig.create(4, 1, 1, 4, generation_id=1)
    tasks = schedule_prep(old, new, MODEL, COST, 0.0)
    assert PrepKind.MOCK_WARMUP not in {t.kind for t in tasks}


def test_prep_schedule_shape():
    old = ParallelConfig.create(2, 2, 1, 4)
    new = ParallelConfig.create(2, 2, 2, 4, generation_id=1)
    tasks = {t.kind: t for t in schedule_prep(old, new, MODEL, COST, 100.0)}
    s = COST.process_spawn_s
    assert tasks[PrepKind.PLAN_COMPUTE].start_s == 100.0
    assert tasks[PrepKind.TCP_BOOTSTRAP].start_s == tasks[PrepKind.TOPOLOGY_DISCOVERY].start_s == 100.0 + s
    comm = tasks[PrepKind.COMMUNICATOR_SETUP]
    assert comm.start_s == max(tasks[PrepKind.TCP_BOOTSTRAP].end_s, tasks[PrepKind.TOPOLOGY_DISCOVERY].end_s)
    assert tasks[PrepKind.MOCK_WARMUP].ranks == (4, 5, 6, 7)
    assert tasks[PrepKind.MOCK_WARMUP].duration_s == COST.warmup_s(state_bytes_per_gpu(MODEL, new))


# --- allocations ---------------------------------------------------------------------------------


def test_only_staging_and_metadata_are_allocated():
    sm = base()
    sm.trigger_resize(grow(sm))
    run_to_stable(sm)
    sm.trigger_resize(ParallelConfig.create(4, 1, 1, 4, generation_id=2))
    run_to_stable(sm)
    purposes = {a.purpose for a in sm.allocations}
    assert purposes == {"staging", "communicator_metadata"}
    per_handoff = {}
    for a in sm.allocations:
        per_handoff[a.generation_id] = per_handoff.get(a.generation_id, 0) + a.nbytes
    assert set(per_handoff.values()) == {COST.staging_buffer_bytes + COST.communicator_metadata_bytes}


# --- interference ----------------------------------------------------------------------------------


@pytest.mark.parametrize("factor", [0.0, 0.003, 0.05])
def test_iterations_during_prepare_slow_by_factor(factor):
    cost = COST.replace(interference_factor=factor)
    sm = GenerationStateMachine(ParallelConfig.create(2, 2, 1, 4), MODEL, cost, iteration_time_s=TAU)
    sm.advance(3.0)
    sm.trigger_resize(grow(sm))
    sm.advance(10.0)
    # the slowdown is sampled when an iteration starts, so iteration 3 (started at 3.0) is unaffected
    stable = [r for r in sm.iterations if r.start_s < 4.0]
    prep = [r for r in sm.iterations if r.start_s >= 4.0]
    assert len(stable) == 4 and len(prep) >= 5
    assert all(r.duration_s == TAU for r in stable)
    assert all(r.duration_s == pytest.approx(TAU * (1 + factor), rel=0, abs=1e-12) for r in prep)


# --- fallback -----------------------------------------------------------------------------------------


def test_failure_during_prepare_reuses_completed_prep():
    sm = base(checkpoint_interval=10)
    sm.advance(25.0)
    sm.trigger_resize(grow(sm))
    sm.advance(sm.now + COST.plan_compute_s + 0.01)
    out = sm.abort_and_fallback(sm.now + 0.01)
    assert out.recovery_mode == "checkpoint" and out.handoff_aborted
    assert PrepKind.PLAN_COMPUTE in out.reusable_prep
    assert out.resume_iteration == 20 and out.resume_iteration <= 26
    assert sm.phase is Phase.STABLE and sm.active.generation_id == 0


def test_failure_during_switch_keeps_old_world():
    sm = base(checkpoint_interval=7)
    sm.trigger_resize(grow(sm))
    while sm.phase is not Phase.SWITCH:
        sm.advance(sm.now + 0.1)
    n = sm.iteration
    out = sm.abort_and_fallback(sm.now + 1e-3)
    assert out.handoff_aborted
    assert sm.active.generation_id == 0 and sm.shadow is None
    assert out.resume_iteration == (n // 7) * 7
    assert sm.total_pause_s == 0.0


def test_failure_in_stable_has_no_shadow_artifacts():
    sm = base(checkpoint_interval=4)
    sm.advance(9.5)
    out = sm.abort_and_fallback(9.5, recovery_s=30.0)
    assert not out.handoff_aborted and out.reusable_prep == frozenset()
    assert out.resume_iteration == 8 and out.lost_iterations == 1
    assert sm.now == 39.5 and sm.iteration == 8


def test_fallback_to_new_config_never_reuses_a_discarded_id():
    sm = base()
    sm.trigger_resize(grow(sm))
    sm.advance(sm.now + 1.0)
    sm.abort_and_fallback(sm.now, 10.0, ParallelConfig.create(4, 1, 1, 4))
    assert sm.active.generation_id == 2
    with pytest.raises(StaleGenerationError):
        sm.lookup(1)


# --- cancel ---------------------------------------------------------------------------------------------


def test_cancel_restarts_prepare_with_updated_target():
    sm = base()
    sm.trigger_resize(grow(sm), tag="a")
    sm.advance(3.0)
    s = sm.cancel_handoff(3.0, ParallelConfig.create(2, 2, 3, 4))
    assert s.phase is Phase.PREPARE and s.shadow_gen.dp == 3 and sm.shadow_tag == "a"
    assert s.shadow_gen.generation_id == 1
    assert sm.total_pause_s == 0.0 and sm.iteration == 2


def test_cancel_outside_prepare_fails():
    with pytest.raises(RuntimeStateError):
        base().cancel_handoff(0.0)


# --- model check -----------------------------------------------------------------------------------------

TARGETS = [(2, 2, 2), (4, 1, 1), (2, 1, 2), (1, 4, 1), (2, 2, 1), (4, 2, 2), (1, 1, 1)]

actions = st.lists(st.one_of(
    st.tuples(st.just("trigger"), st.sampled_from(TARGETS), st.sampled_from([math.inf, 5.0, 100.0])),
    st.tuples(st.just("advance"), st.floats(0.05, 60.0)),
    st.tuples(st.just("fail"), st.floats(0.0, 40.0), st.booleans()),
    st.tuples(st.just("cancel"), st.sampled_from(TARGETS)),
), min_size=1, max_size=10)


def check_invariants(sm, seen_tags, retired):
    s = sm.snapshot()  # constructor enforces shadow/phase consistency
    assert len(s.generations) <= 2
    for rec in sm.log:
        if rec.pause_accrued_s > 0:
            assert rec.phase_from is Phase.SWITCH
    for g in retired:
        with pytest.raises(RuntimeStateError):
            sm.lookup(g)
    queued = [tag for _, _, tag in sm.queue]
    assert queued == sorted(queued)
    if sm.shadow_tag is not None and sm.phase is not Phase.STABLE:
        if not seen_tags or seen_tags[-1] != sm.shadow_tag:
            seen_tags.append(sm.shadow_tag)
    assert seen_tags == sorted(seen_tags)
    if queued and seen_tags:
        assert queued[0] > seen_tags[-1]


@settings(max_examples=300)
@given(actions)
def test_state_machine_model_check(steps):
    sm = base(checkpoint_interval=5)
    seen, retired = [], set()
    tag = 0
    for step in steps:
        kind = step[0]
        if kind == "trigger":
            gen = sm.active.generation_id + 1 + len(sm.queue) + (sm.phase is not Phase.STABLE)
            sm.trigger_resize(ParallelConfig.create(*step[1], 4, generation_id=gen), step[2], tag=tag)
            tag += 1
        elif kind == "advance":
            sm.advance(sm.now + step[1])
        elif kind == "fail":
            n = None
            sm.advance(sm.now + step[1])
            n = sm.iteration
            old_active = sm.active.generation_id
            mid_switch = sm.phase is Phase.SWITCH
            out = sm.abort_and_fallback(sm.now, 10.0, ParallelConfig.create(2, 2, 1, 4) if step[2] else None)
            assert out.resume_iteration <= n and out.resume_iteration % 5 == 0
            assert sm.iteration == out.resume_iteration
            if mid_switch:
                assert out.handoff_aborted
            if step[2]:
                retired.add(old_active)
        elif kind == "cancel":
            if sm.phase in (Phase.PREPARE, Phase.READY):
                sm.cancel_handoff(sm.now, ParallelConfig.create(*step[1], 4))
            else:
                with pytest.raises(RuntimeStateError):
                    sm.cancel_handoff(sm.now)
        for sw in sm.switches:
            retired.add(sw.old.generation_id)
        check_invariants(sm, seen, retired)
    # generations of committed switches strictly increase
    gens = [sw.new.generation_id for sw in sm.switches]
    assert gens == sorted(set(gens))
