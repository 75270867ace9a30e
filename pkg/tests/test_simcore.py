import math
import random

import pytest

from errors import EmptyMetricsError, InvalidConfigError, StuckQueueError
from harness import load_config
from models import (
    ArrivalEvent,
    ChurnEvent,
    EventKind,
    ExperimentConfig,
    Job,
    JobSummary,
    NodeDescriptor,
    OverheadFlavor,
    Pool,
    Trace,
    TraceRecord,
)
from overlay import node_hex
from simcore import (
    BACKGROUND_POOL,
    EventQueue,
    OverheadModel,
    SimulationEngine,
    build_arrivals,
    build_churn,
    build_pools,
    build_workload,
    collect_metrics,
    job_runtime,
    provision_nodes,
    run_simulation,
    serial_baseline,
    steady_state_gap,
)


def node(node_id, pool, speed=1.0, memory=2048):
    return NodeDescriptor(id=node_id, vip=f"10.128.{node_id // 250}.{node_id % 250 + 1}", site=pool, pool=pool,
                          speed=speed, memory=memory)


def job(job_id, pool, submit=0.0, work=100.0, requirements="true", rank=None):
    return Job(job_id=job_id, owner=f"{pool}-user", origin_pool=pool, work=work, submit_time=submit,
               requirements=requirements, rank=rank)


# Runtimes


@pytest.mark.parametrize(
    "work,speed,flavor,expected",
    [
        (4080, 1.0, OverheadFlavor.NONE, 4080.0),
        (2220, 1.0, OverheadFlavor.VMWARE, 2464.2),
        (2220, 1.0, OverheadFlavor.XEN, 2242.2),
        (3600, 2.0, "none", 1800.0),
    ],
)
def test_job_runtime(work, speed, flavor, expected):
    assert job_runtime(work, speed, flavor) == pytest.approx(expected)


def test_vmware_factor_is_exact():
    assert job_runtime(1000, 1.0, OverheadFlavor.VMWARE) == pytest.approx(1000 * 1.11, rel=1e-12)
    assert job_runtime(1000, 1.0, OverheadFlavor.XEN) == pytest.approx(1000 * 1.01, rel=1e-12)


@pytest.mark.parametrize("speed", [0, -1.5])
def test_job_runtime_rejects_non_positive_speed(speed):
    with pytest.raises(InvalidConfigError):
        job_runtime(100, speed)


def test_overhead_multiplier_below_one_is_invalid():
    with pytest.raises(InvalidConfigError):
        OverheadModel(OverheadFlavor.NONE, 0.9)
    assert job_runtime(100, 1.0, OverheadModel(OverheadFlavor.NONE, 2.0)) == 200.0


# Event queue


def test_event_queue_orders_by_time_then_insertion_with_ticks_last():
    queue = EventQueue()
    queue.push(5.0, EventKind.NEGOTIATE_TICK, pool="a")
    queue.push(5.0, EventKind.SUBMIT, job="x")
    queue.push(1.0, EventKind.JOB_COMPLETE, job="y")
    queue.push(5.0, EventKind.SUBMIT, job="z")
    order = [(e.time, e.kind, e.payload.get("job") or e.payload.get("pool")) for e in (queue.pop() for _ in range(4))]
    assert order == [
        (1.0, EventKind.JOB_COMPLETE, "y"),
        (5.0, EventKind.SUBMIT, "x"),
        (5.0, EventKind.SUBMIT, "z"),
        (5.0, EventKind.NEGOTIATE_TICK, "a"),
    ]
    assert len(queue) == 0 and queue.peek() is None


# Engine


def run(pools, nodes, jobs, **kwargs):
    return SimulationEngine(pools, nodes, jobs, **kwargs).run()


def test_single_job_waits_for_the_next_tick():
    trace = run([Pool(pool_id="a", negotiation_interval=60)], [node(1, "a")], [job("j", "a", submit=5.0)])
    complete = [r for r in trace.records if r.kind is EventKind.JOB_COMPLETE]
    assert [r.t for r in complete] == [160.0]
    metrics = collect_metrics(trace)
    assert metrics.makespan == 155.0
    assert metrics.runtimes == [100.0]


def test_pigeonhole_makespan():
    for m in range(1, 9):
        nodes = [node(i, "a") for i in range(1, m + 1)]
        for n in range(1, 51):
            jobs = [job(f"j{k:03d}", "a") for k in range(n)]
            trace = run([Pool(pool_id="a", negotiation_interval=0)], nodes, jobs)
            assert collect_metrics(trace).makespan == math.ceil(n / m) * 100.0, (n, m)


def test_same_seed_same_trace():
    config = load_config("fig2")
    one = run_simulation(config, seed=3)
    two = run_simulation(config, seed=3)
    assert one.to_jsonl() == two.to_jsonl()
    assert one.to_jsonl().count('"kind":"JobComplete"') == 200


def test_trace_lines_carry_the_event_fields():
    trace = run([Pool(pool_id="a", negotiation_interval=0)], [node(1, "a")], [job("j", "a")], bits=16)
    first_start = next(r for r in trace.records if r.kind is EventKind.JOB_START)
    assert first_start.node == "0001"
    assert first_start.pool == "a"
    line = trace.to_jsonl().splitlines()[0]
    assert line.startswith('{"t":0.0,"kind":"NodeJoin"')


def test_unmatchable_job_is_a_stuck_queue_not_a_hang():
    jobs = [job("ok", "a"), job("huge", "a", requirements="other.Memory >= 100000")]
    with pytest.raises(StuckQueueError) as info:
        run([Pool(pool_id="a")], [node(1, "a")], jobs)
    assert info.value.stuck_jobs == ["huge"]
    assert "huge" in str(info.value)


def test_job_needing_a_departed_node_is_stuck():
    pools = [Pool(pool_id="a", negotiation_interval=0)]
    jobs = [job("late", "a", submit=50.0)]
    with pytest.raises(StuckQueueError, match="drained"):
        run(pools, [node(1, "a")], jobs, departures=[(10.0, 1)])


def test_nodes_can_arrive_later():
    pools = [Pool(pool_id="a", negotiation_interval=0)]
    trace = run(pools, [], [job("j", "a")], arrivals=[(30.0, node(1, "a"))])
    assert collect_metrics(trace).makespan == 130.0


def test_node_leave_requeues_the_running_job():
    pools = [Pool(pool_id="a", negotiation_interval=0)]
    nodes = [node(1, "a", speed=2.0), node(2, "a")]
    trace = run(pools, nodes, [job("j", "a")], departures=[(20.0, 1)])
    preempts = [r for r in trace.records if r.kind is EventKind.PREEMPT]
    assert len(preempts) == 1
    assert preempts[0].reason == "node-leave"
    assert preempts[0].work == pytest.approx(40.0)
    metrics = collect_metrics(trace)
    assert metrics.makespan == 120.0
    assert metrics.preemption_count == 0
    assert metrics.wasted_work == pytest.approx(40.0)
    assert metrics.completed_work + metrics.wasted_work == pytest.approx(metrics.processed_work)


def _random_preemption_case(rng):
    interval = rng.choice([0.0, 30.0, 60.0])
    pools = [
        Pool(pool_id="a", flock_targets=["b"], negotiation_interval=interval),
        Pool(pool_id="b", negotiation_interval=interval),
    ]
    ids = iter(rng.sample(range(1, 5000), 12))
    n_a, n_b = rng.randint(1, 4), rng.randint(2, 6)
    nodes = [node(next(ids), "a", speed=rng.choice([0.5, 1.0, 2.0])) for _ in range(n_a)]
    nodes += [node(next(ids), "b", speed=rng.choice([0.5, 1.0, 2.0])) for _ in range(n_b)]
    jobs = [job(f"a{k:02d}", "a", submit=rng.randint(0, 50), work=rng.choice([100.0, 250.0])) for k in range(rng.randint(3, 12))]
    local = rng.randint(1, n_b)
    jobs += [job(f"b{k:02d}", "b", submit=rng.randint(20, 400), work=rng.choice([50.0, 150.0])) for k in range(local)]
    return interval, pools, nodes, jobs


def test_randomized_preemption_scenarios_keep_every_invariant():
    rng = random.Random(2024)
    total_preemptions = 0
    for case in range(100):
        interval, pools, nodes, jobs = _random_preemption_case(rng)
        engine = SimulationEngine(pools, nodes, jobs)
        trace = engine.run()
        metrics = collect_metrics(trace)
        assert metrics.completed_jobs == len(jobs), case
        assert metrics.preemption_count == engine.scheduler.preemption_count
        assert metrics.completed_work + metrics.wasted_work == pytest.approx(metrics.processed_work)
        times = [r.t for r in trace.records]
        assert times == sorted(times)

        origin = {}
        submitted = set()
        first_start = {}
        for r in trace.records:
            if r.kind is EventKind.SUBMIT:
                submitted.add(r.job)
            elif r.kind is EventKind.JOB_START:
                assert r.job in submitted
                origin[r.job] = r.origin
                first_start.setdefault(r.job, r.t)
            elif r.kind is EventKind.PREEMPT:
                assert r.reason == "local-priority"
                assert origin[r.job].value == "flocked"
                assert r.job.startswith("a")
                total_preemptions += 1
        for j in jobs:
            if j.origin_pool == "b":
                # local jobs never wait more than one negotiation interval
                assert first_start[j.job_id] - j.submit_time <= interval, (case, j.job_id)
    assert total_preemptions > 0


def test_forced_double_preemption_still_completes():
    pools = [Pool(pool_id="a", flock_targets=["b"], negotiation_interval=0), Pool(pool_id="b", negotiation_interval=0)]
    nodes = [node(1, "b")]
    jobs = [job("far", "a", work=100.0), job("b1", "b", submit=10.0, work=10.0), job("b2", "b", submit=40.0, work=10.0)]
    trace = run(pools, nodes, jobs)
    preempts = [r for r in trace.records if r.kind is EventKind.PREEMPT]
    assert [(r.t, r.job) for r in preempts] == [(10.0, "far"), (40.0, "far")]
    metrics = collect_metrics(trace)
    assert metrics.preemption_count == 2
    assert metrics.wasted_work == pytest.approx(10.0 + 20.0)
    assert metrics.makespan == 150.0


# Workload construction


def test_provisioning_is_seeded():
    config = load_config("fig2")
    one = provision_nodes(config, 1)
    assert one == provision_nodes(config, 1)
    assert one != provision_nodes(config, 2)
    assert len(one) == 56
    assert len({n.id for n in one}) == 56
    with_host = provision_nodes(config, 1, include_submit_host=True)
    assert with_host[0].vip == "10.128.0.1"
    assert with_host[0].nat.value == "public"
    assert [n.id for n in with_host[1:]] == [n.id for n in one]


def test_scenario_workload_adds_pinned_background_jobs():
    config = load_config("scenario1")
    jobs = build_workload(config)
    background = [j for j in jobs if j.background]
    assert len(jobs) - len(background) == 160
    assert len(background) == 30 + 60 + 60 + 60
    assert all(j.origin_pool == BACKGROUND_POOL for j in background)
    assert background[0].requirements == 'other.PoolId == "ufl"'
    pools = build_pools(config)
    assert pools[-1].pool_id == BACKGROUND_POOL
    assert pools[-1].flock_targets == ["ufl", "umn", "nwu", "utexas"]


def test_extra_workload_batches():
    data = load_config("scenario1").model_dump()
    data["workloads"] = [{"name": "umn-local", "pool": "umn", "n_jobs": 3, "work": 10.0, "start": 100.0, "interval": 7.0}]
    config = ExperimentConfig.model_validate(data)
    extra = [j for j in build_workload(config) if j.job_id.startswith("umn-local")]
    assert [j.job_id for j in extra] == ["umn-local-0000", "umn-local-0001", "umn-local-0002"]
    assert [j.submit_time for j in extra] == [100.0, 107.0, 114.0]


def test_churn_selection_is_seeded_and_bounded():
    config = load_config("fig2")
    config.churn = [ChurnEvent(time=1000.0, site="utexas", count=5), ChurnEvent(time=2000.0, site="utexas", count=30)]
    nodes = provision_nodes(config, 0)
    departures = build_churn(config, nodes, 0)
    assert departures == build_churn(config, nodes, 0)
    assert len(departures) == 20
    assert len({n for _, n in departures}) == 20
    assert [t for t, _ in departures] == [1000.0] * 5 + [2000.0] * 15


def test_churn_run_completes_every_job():
    config = load_config("fig2")
    config.churn = [ChurnEvent(time=3000.0, site="nwu", count=8)]
    trace = run_simulation(config, seed=0)
    metrics = collect_metrics(trace)
    assert metrics.completed_jobs == 200
    leaves = [r for r in trace.records if r.kind is EventKind.NODE_LEAVE]
    assert len(leaves) == 8
    evictions = [r for r in trace.records if r.kind is EventKind.PREEMPT and r.reason == "node-leave"]
    assert len(evictions) == 8
    assert metrics.completed_work + metrics.wasted_work == pytest.approx(metrics.processed_work)


def test_arrivals_are_seeded_and_disjoint_from_provisioned_nodes():
    config = load_config("fig2")
    config.arrivals = [ArrivalEvent(time=500.0, site="ufl", count=3), ArrivalEvent(time=900.0, site="purdue", count=2)]
    arrivals = build_arrivals(config, 0)
    assert arrivals == build_arrivals(config, 0)
    assert [t for t, _ in arrivals] == [500.0] * 3 + [900.0] * 2
    assert [n.site for _, n in arrivals] == ["ufl"] * 3 + ["purdue"] * 2
    assert {n.speed for _, n in arrivals if n.site == "ufl"} == {1.58}
    assert {n.pool for _, n in arrivals} == {"archer"}
    existing = provision_nodes(config, 0, include_submit_host=True)
    assert not {n.id for _, n in arrivals} & {n.id for n in existing}
    assert not {n.vip for _, n in arrivals} & {n.vip for n in existing}
    assert provision_nodes(config, 0) == existing[1:]


def test_no_arrivals_section_means_no_late_nodes():
    assert build_arrivals(load_config("fig2"), 0) == []


def test_arrived_nodes_pick_up_queued_work():
    config = load_config("fig2")
    config.arrivals = [ArrivalEvent(time=1000.0, site="ufl", count=10)]
    trace = run_simulation(config, seed=0)
    assert collect_metrics(trace).completed_jobs == 200
    late = {node_hex(n.id, config.overlay.bits) for _, n in build_arrivals(config, 0)}
    joins = [r for r in trace.records if r.kind is EventKind.NODE_JOIN and r.node in late]
    assert len(joins) == 10
    assert {r.t for r in joins} == {1000.0}
    started = [r for r in trace.records if r.kind is EventKind.JOB_START and r.node in late]
    assert started
    assert min(r.t for r in started) >= 1000.0


def test_serial_baseline_is_back_to_back():
    config = load_config("scenario1")
    assert serial_baseline(config, 1.0) == 6_912_000.0
    fig2 = load_config("fig2")
    assert serial_baseline(fig2, 1.0) == pytest.approx(200 * 3600 * 1.11)


# Metrics


def _trace(runtimes):
    trace = Trace()
    for i, runtime in enumerate(runtimes):
        name = f"j{i}"
        trace.jobs[name] = JobSummary(owner="u", origin_pool="p", work=1.0, submit_time=0.0)
        trace.records.append(TraceRecord(t=0.0, kind=EventKind.SUBMIT, job=name, pool="p"))
        trace.records.append(TraceRecord(t=0.0, kind=EventKind.JOB_START, job=name, pool="p"))
    for i, runtime in sorted(enumerate(runtimes), key=lambda x: x[1]):
        trace.records.append(TraceRecord(t=float(runtime), kind=EventKind.JOB_COMPLETE, job=f"j{i}", pool="p"))
    trace.end_time = float(max(runtimes))
    return trace


def test_metrics_of_one_two_three():
    metrics = collect_metrics(_trace([3, 1, 2]))
    assert metrics.median_runtime == 2.0
    assert metrics.mean_runtime == 2.0
    assert metrics.makespan == 3.0
    assert metrics.cdf == [(1.0, 1), (2.0, 2), (3.0, 3)]
    assert metrics.steady_state_intercompletion == 1.0
    assert metrics.usage_by_owner == {"u": 6.0}


def test_cdf_is_monotone_and_ends_at_completed_count():
    rng = random.Random(0)
    metrics = collect_metrics(_trace([rng.randint(1, 500) for _ in range(40)]))
    times = [t for t, _ in metrics.cdf]
    counts = [c for _, c in metrics.cdf]
    assert times == sorted(times)
    assert counts == list(range(1, 41))
    assert metrics.completed_jobs == 40


def test_empty_trace_has_no_metrics():
    with pytest.raises(EmptyMetricsError):
        collect_metrics(Trace())


def test_steady_state_gap_uses_the_middle_half():
    assert steady_state_gap([]) == 0.0
    assert steady_state_gap([5.0]) == 0.0
    assert steady_state_gap([10.0 * i for i in range(100)]) == pytest.approx(10.0)
    # outliers at both ends do not move it
    times = [0.0] + [1000.0 + 10.0 * i for i in range(98)] + [1e6]
    assert steady_state_gap(times) == pytest.approx(10.0)
