"""
Discrete-event grid simulation
Seeded provisioning, a deterministic event loop over the pool scheduler, and trace metrics
"""

import heapq
import itertools
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import EmptyMetricsError, InvalidConfigError, StuckQueueError
from gridpool import GridScheduler, job_ad, resource_ad
from matchmaker import symmetric_match
from models import (
    EventKind,
    ExperimentConfig,
    Job,
    JobState,
    JobSummary,
    Metrics,
    NatClass,
    NodeDescriptor,
    OverheadFlavor,
    Pool,
    Trace,
    TraceRecord,
)
from overlay import VipAllocator, node_hex

logger = logging.getLogger(__name__)

OVERHEAD_MULTIPLIERS: Dict[OverheadFlavor, float] = {
    OverheadFlavor.VMWARE: 1.11,
    OverheadFlavor.XEN: 1.01,
    OverheadFlavor.NONE: 1.0,
}

BACKGROUND_POOL = "background"
BACKGROUND_OWNER = "community"
SUBMIT_SITE = "submit"

# ticks run after every other event at the same instant
PHASE_EVENT = 0
PHASE_TICK = 1


@dataclass(frozen=True)
class OverheadModel:
    flavor: OverheadFlavor = OverheadFlavor.NONE
    multiplier: float = 1.0

    def __post_init__(self):
        if self.multiplier < 1.0:
            raise InvalidConfigError(f"overhead multiplier must be >= 1.0, got {self.multiplier}")

    @classmethod
    def for_flavor(cls, flavor: Union[OverheadFlavor, str]) -> "OverheadModel":
        flavor = OverheadFlavor(flavor)
        return cls(flavor, OVERHEAD_MULTIPLIERS[flavor])


def job_runtime(work: float, speed: float, overhead: Union[OverheadModel, OverheadFlavor, str] = OverheadFlavor.NONE) -> float:
    if speed <= 0:
        raise InvalidConfigError(f"node speed must be positive, got {speed}")
    model = overhead if isinstance(overhead, OverheadModel) else OverheadModel.for_flavor(overhead)
    return (work / speed) * model.multiplier


@dataclass(order=True)
class SimEvent:
    time: float
    phase: int
    seq: int
    kind: EventKind = field(compare=False)
    payload: Dict[str, Any] = field(compare=False, default_factory=dict)


class EventQueue:
    """Binary heap ordered by (time, phase, insertion sequence)"""

    def __init__(self):
        self._heap: List[SimEvent] = []
        self._seq = itertools.count()

    def push(self, time: float, kind: EventKind, **payload) -> SimEvent:
        phase = PHASE_TICK if kind is EventKind.NEGOTIATE_TICK else PHASE_EVENT
        event = SimEvent(time, phase, next(self._seq), kind, payload)
        heapq.heappush(self._heap, event)
        return event

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)

    def peek(self) -> Optional[SimEvent]:
        return self._heap[0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)


# Provisioning and workload construction


def provision_nodes(config: ExperimentConfig, seed: int, include_submit_host: bool = False) -> List[NodeDescriptor]:
    """Seeded node ids and NAT classes, sequential virtual addresses

    The submit host is always drawn first so worker identities do not depend
    on whether it is included.
    """
    bits = config.overlay.bits
    ids = random.Random(f"{seed}:ids")
    nats = random.Random(f"{seed}:nat")
    mix = config.overlay.nat_mix
    classes = [NatClass.PUBLIC, NatClass.CONE, NatClass.SYMMETRIC]
    weights = [mix.public, mix.cone, mix.symmetric]
    vips = VipAllocator()
    used = set()

    def fresh_id() -> int:
        while True:
            candidate = ids.getrandbits(bits)
            if candidate not in used:
                used.add(candidate)
                return candidate

    submit = NodeDescriptor(
        id=fresh_id(), vip=vips.allocate(), site=SUBMIT_SITE,
        pool=config.experiment.submit_pool, speed=1.0, nat=NatClass.PUBLIC,
    )
    nodes = [submit] if include_submit_host else []
    for site in config.sites:
        for _ in range(site.nodes):
            nodes.append(
                NodeDescriptor(
                    id=fresh_id(), vip=vips.allocate(), site=site.name, pool=site.pool,
                    speed=site.speed, nat=nats.choices(classes, weights=weights)[0],
                    memory=site.memory, arch=site.arch,
                )
            )
    return nodes


def build_pools(config: ExperimentConfig) -> List[Pool]:
    pools = [
        Pool(pool_id=p.pool_id, flock_targets=list(p.flock_targets), negotiation_interval=p.negotiation_interval)
        for p in config.pools
    ]
    if config.experiment.background_occupancy > 0:
        submit = next(p for p in config.pools if p.pool_id == config.experiment.submit_pool)
        pools.append(
            Pool(
                pool_id=BACKGROUND_POOL,
                flock_targets=[p.pool_id for p in config.pools],
                negotiation_interval=submit.negotiation_interval,
            )
        )
    return pools


def build_workload(config: ExperimentConfig) -> List[Job]:
    exp = config.experiment
    jobs = [
        Job(
            job_id=f"j{i:04d}", owner=exp.owner, origin_pool=exp.submit_pool, work=exp.work,
            submit_time=i * exp.submit_link_delay, requirements=exp.job_requirements, rank=exp.job_rank,
        )
        for i in range(exp.n_jobs)
    ]
    for batch in config.workloads:
        jobs += [
            Job(
                job_id=f"{batch.name}-{i:04d}", owner=batch.owner, origin_pool=batch.pool, work=batch.work,
                submit_time=batch.start + i * batch.interval, requirements=batch.requirements, rank=batch.rank,
            )
            for i in range(batch.n_jobs)
        ]
    if exp.background_occupancy > 0:
        for pool in config.pools:
            members = sum(s.nodes for s in config.sites if s.pool == pool.pool_id)
            for i in range(round(exp.background_occupancy * members)):
                jobs.append(
                    Job(
                        job_id=f"bg-{pool.pool_id}-{i:04d}", owner=BACKGROUND_OWNER, origin_pool=BACKGROUND_POOL,
                        work=exp.background_work, submit_time=0.0,
                        requirements=f'other.PoolId == "{pool.pool_id}"', background=True,
                    )
                )
    return jobs


def build_churn(config: ExperimentConfig, nodes: Sequence[NodeDescriptor], seed: int) -> List[Tuple[float, int]]:
    rng = random.Random(f"{seed}:churn")
    departures: List[Tuple[float, int]] = []
    gone = set()
    for event in config.churn:
        site_nodes = sorted(n.id for n in nodes if n.site == event.site and n.id not in gone)
        chosen = rng.sample(site_nodes, min(event.count, len(site_nodes)))
        gone.update(chosen)
        departures += [(event.time, node_id) for node_id in sorted(chosen)]
    return departures


def build_arrivals(config: ExperimentConfig, seed: int) -> List[Tuple[float, NodeDescriptor]]:
    """Late joiners with ids and addresses disjoint from provision_nodes"""
    if not config.arrivals:
        return []
    existing = provision_nodes(config, seed, include_submit_host=True)
    used = {n.id for n in existing}
    vips = VipAllocator()
    for _ in existing:
        vips.allocate()
    ids = random.Random(f"{seed}:arrivals")
    nats = random.Random(f"{seed}:arrivals-nat")
    mix = config.overlay.nat_mix
    classes = [NatClass.PUBLIC, NatClass.CONE, NatClass.SYMMETRIC]
    weights = [mix.public, mix.cone, mix.symmetric]
    sites = {s.name: s for s in config.sites}
    arrivals: List[Tuple[float, NodeDescriptor]] = []
    for event in config.arrivals:
        site = sites[event.site]
        for _ in range(event.count):
            node_id = ids.getrandbits(config.overlay.bits)
            while node_id in used:
                node_id = ids.getrandbits(config.overlay.bits)
            used.add(node_id)
            node = NodeDescriptor(
                id=node_id, vip=vips.allocate(), site=site.name, pool=site.pool,
                speed=site.speed, nat=nats.choices(classes, weights=weights)[0],
                memory=site.memory, arch=site.arch,
            )
            arrivals.append((event.time, node))
    return arrivals


# Engine


class SimulationEngine:
    """Single-threaded event loop; all pool state changes happen here"""

    def __init__(
        self,
        pools: Iterable[Pool],
        nodes: Iterable[NodeDescriptor],
        jobs: Iterable[Job],
        overhead: Union[OverheadModel, OverheadFlavor, str] = OverheadFlavor.NONE,
        bits: int = 160,
        departures: Iterable[Tuple[float, int]] = (),
        arrivals: Iterable[Tuple[float, NodeDescriptor]] = (),
        check_invariants: bool = True,
    ):
        self.overhead = overhead if isinstance(overhead, OverheadModel) else OverheadModel.for_flavor(overhead)
        self.bits = bits
        self.check_invariants = check_invariants
        arrivals = list(arrivals)
        self.scheduler = GridScheduler(pools, [], runtime=lambda work, speed: job_runtime(work, speed, self.overhead))
        self.queue = EventQueue()
        self.now = 0.0
        self.trace = Trace()
        self._nodes: List[NodeDescriptor] = list(nodes)
        self._pending: Dict[str, float] = {}
        self._submitted: List[str] = []
        self._unfinished = set()
        self._waste_seen: Dict[str, float] = {}

        for node in self._nodes:
            self.queue.push(0.0, EventKind.NODE_JOIN, node=node)
        for t, node in arrivals:
            self.queue.push(t, EventKind.NODE_JOIN, node=node)
        for job in sorted(jobs, key=lambda j: (j.submit_time, j.job_id)):
            self.scheduler.add_job(job)
            self.trace.jobs[job.job_id] = JobSummary(
                owner=job.owner, origin_pool=job.origin_pool, work=job.work,
                submit_time=job.submit_time, background=job.background,
            )
            if not job.background:
                self._unfinished.add(job.job_id)
            self.queue.push(job.submit_time, EventKind.SUBMIT, job=job.job_id)
        for t, node_id in departures:
            self.queue.push(t, EventKind.NODE_LEAVE, node=node_id)
        self._all_nodes = self._nodes + [n for _, n in arrivals]

    def _hex(self, node_id: int) -> str:
        return node_hex(node_id, self.bits)

    def _record(self, kind: EventKind, **fields) -> None:
        self.trace.records.append(TraceRecord(t=self.now, kind=kind, **fields))

    def check_feasible(self) -> None:
        """Every workload job must match some node its pool can reach"""
        pools = self.scheduler.pools
        stuck = []
        for job_id in sorted(self._unfinished):
            job = self.scheduler.jobs[job_id]
            reach = {job.origin_pool, *pools[job.origin_pool].flock_targets}
            ad = job_ad(job)
            if not any(n.pool in reach and symmetric_match(ad, resource_ad(n)) for n in self._all_nodes):
                stuck.append(job_id)
        if stuck:
            raise StuckQueueError("no node can ever run these jobs", stuck)

    # tick bookkeeping

    def _request_tick(self, pool_id: str, in_round: bool = False) -> None:
        pool = self.scheduler.pools[pool_id]
        if not pool.queue:
            return
        interval = pool.negotiation_interval
        if interval == 0:
            due = self.now
        else:
            due = math.ceil(self.now / interval) * interval
            if in_round and due <= self.now:
                due = self.now + interval
        pending = self._pending.get(pool_id)
        if pending is not None and pending <= due:
            return
        self._pending[pool_id] = due
        self.queue.push(due, EventKind.NEGOTIATE_TICK, pool=pool_id)

    def _request_ticks_for_node(self, pool_id: str) -> None:
        self._request_tick(pool_id)
        for flocker in self.scheduler.pools_flocking_to(pool_id):
            self._request_tick(flocker)

    # handlers

    def _on_submit(self, event: SimEvent) -> None:
        job = self.scheduler.submit(event.payload["job"])
        self._submitted.append(job.job_id)
        self._record(EventKind.SUBMIT, job=job.job_id, pool=job.origin_pool)
        self._request_tick(job.origin_pool)

    def _on_join(self, event: SimEvent) -> None:
        node: NodeDescriptor = event.payload["node"]
        self.scheduler.add_node(node)
        self._record(EventKind.NODE_JOIN, node=self._hex(node.id), pool=node.pool)
        self._request_ticks_for_node(node.pool)

    def _on_leave(self, event: SimEvent) -> None:
        node_id = event.payload["node"]
        node = self.scheduler.nodes.get(node_id)
        if node is None:
            return
        for job in self.scheduler.remove_node(node_id, self.now):
            self._record(
                EventKind.PREEMPT, job=job.job_id, node=self._hex(node_id), pool=node.pool,
                reason="node-leave", work=self._waste_delta(job),
            )
            self._request_tick(job.origin_pool)
        self._record(EventKind.NODE_LEAVE, node=self._hex(node_id), pool=node.pool)

    def _waste_delta(self, job: Job) -> float:
        """Work lost by the run that just stopped"""
        delta = job.wasted_work - self._waste_seen.get(job.job_id, 0.0)
        self._waste_seen[job.job_id] = job.wasted_work
        return delta

    def _on_complete(self, event: SimEvent) -> None:
        job = self.scheduler.jobs[event.payload["job"]]
        if job.state is not JobState.RUNNING or len(job.history) != event.payload["epoch"]:
            return  # the run this event belonged to was preempted
        node_id = job.history[-1].node_id
        pool_id = job.history[-1].pool_id
        self.scheduler.complete(job.job_id, self.now)
        self._unfinished.discard(job.job_id)
        self._record(EventKind.JOB_COMPLETE, job=job.job_id, node=self._hex(node_id), pool=pool_id)
        self._request_ticks_for_node(pool_id)

    def _on_ticks(self, first: SimEvent) -> None:
        due = []
        event: Optional[SimEvent] = first
        while True:
            pool_id = event.payload["pool"]
            if self._pending.get(pool_id) == event.time:
                del self._pending[pool_id]
                due.append(pool_id)
            nxt = self.queue.peek()
            if nxt is None or nxt.kind is not EventKind.NEGOTIATE_TICK or nxt.time != first.time:
                break
            event = self.queue.pop()
        if not due:
            return
        for pool_id in due:
            self._record(EventKind.NEGOTIATE_TICK, pool=pool_id)
        assignments, preemptions = self.scheduler.negotiate_round(due, self.now)
        for p in preemptions:
            victim = self.scheduler.jobs[p.victim_job_id]
            self._record(
                EventKind.PREEMPT, job=victim.job_id, node=self._hex(p.node_id),
                pool=self.scheduler.nodes[p.node_id].pool, reason=p.reason, work=self._waste_delta(victim),
            )
        for a in assignments:
            job = self.scheduler.jobs[a.job_id]
            self._record(EventKind.JOB_START, job=a.job_id, node=self._hex(a.node_id), pool=a.pool_id, origin=a.origin)
            self.queue.push(
                self.now + self.scheduler.duration(a.job_id), EventKind.JOB_COMPLETE,
                job=a.job_id, epoch=len(job.history),
            )
        for p in preemptions:
            self._request_tick(self.scheduler.jobs[p.victim_job_id].origin_pool, in_round=True)

    def run(self) -> Trace:
        self.check_feasible()
        handlers = {
            EventKind.SUBMIT: self._on_submit,
            EventKind.NODE_JOIN: self._on_join,
            EventKind.NODE_LEAVE: self._on_leave,
            EventKind.JOB_COMPLETE: self._on_complete,
            EventKind.NEGOTIATE_TICK: self._on_ticks,
        }
        while self._unfinished:
            if not self.queue:
                raise StuckQueueError("event queue drained with jobs still waiting", self._unfinished)
            event = self.queue.pop()
            if event.time < self.now:
                raise StuckQueueError(f"event at t={event.time} arrived after t={self.now}", self._unfinished)
            self.now = event.time
            handlers[event.kind](event)
            if self.check_invariants:
                self.scheduler.check_conservation(self._submitted)
        return self._finish()

    def _finish(self) -> Trace:
        in_flight = 0.0
        for job_id in self.scheduler.running.values():
            if job_id is None:
                continue
            job = self.scheduler.jobs[job_id]
            elapsed = self.now - job.history[-1].start_time
            in_flight += min(1.0, elapsed / self.scheduler.duration(job_id)) * job.work
        self.trace.end_time = self.now
        self.trace.in_flight_work = in_flight
        self.trace.processed_work = self.scheduler.processed_work
        logger.info(
            f"simulation finished at t={self.now:.1f} after {len(self.trace.records)} trace records, "
            f"{self.scheduler.preemption_count} preemptions"
        )
        return self.trace


def run_simulation(config: ExperimentConfig, seed: int, nodes: Optional[List[NodeDescriptor]] = None) -> Trace:
    nodes = nodes if nodes is not None else provision_nodes(config, seed)
    engine = SimulationEngine(
        build_pools(config), nodes, build_workload(config),
        overhead=config.experiment.overhead, bits=config.overlay.bits,
        departures=build_churn(config, nodes, seed),
        arrivals=build_arrivals(config, seed),
    )
    return engine.run()


def serial_baseline(config: ExperimentConfig, speed: float) -> float:
    """Makespan of the main workload run back to back on one node"""
    pool = Pool(pool_id="baseline", negotiation_interval=0)
    node = NodeDescriptor(id=0, vip="10.128.0.1", site="baseline", pool="baseline", speed=speed)
    exp = config.experiment
    jobs = [
        Job(job_id=f"j{i:04d}", owner=exp.owner, origin_pool="baseline", work=exp.work, submit_time=0.0)
        for i in range(exp.n_jobs)
    ]
    trace = SimulationEngine([pool], [node], jobs, overhead=exp.overhead, bits=config.overlay.bits).run()
    return collect_metrics(trace).makespan


# Metrics


def steady_state_gap(completions: Sequence[float]) -> float:
    """Mean gap between consecutive completions across the middle half"""
    times = sorted(completions)
    n = len(times)
    if n < 2:
        return 0.0
    lo, hi = n // 4, n - n // 4
    span = hi - 1 - lo
    if span <= 0:
        return (times[-1] - times[0]) / (n - 1)
    return (times[hi - 1] - times[lo]) / span


def collect_metrics(trace: Trace) -> Metrics:
    workload = {j for j, s in trace.jobs.items() if not s.background}
    started: Dict[str, float] = {}
    runtimes: Dict[str, float] = {}
    completions: Dict[str, float] = {}
    open_runs: Dict[str, Tuple[float, str]] = {}
    usage_by_owner: Dict[str, float] = {}
    usage_by_pool: Dict[str, float] = {}
    preemptions = 0
    wasted = 0.0

    def close(job_id: str, t: float) -> None:
        start, pool = open_runs.pop(job_id)
        owner = trace.jobs[job_id].owner
        usage_by_owner[owner] = usage_by_owner.get(owner, 0.0) + (t - start)
        usage_by_pool[pool] = usage_by_pool.get(pool, 0.0) + (t - start)

    for record in trace.records:
        if record.kind is EventKind.JOB_START:
            started[record.job] = record.t
            open_runs[record.job] = (record.t, record.pool)
        elif record.kind is EventKind.JOB_COMPLETE:
            close(record.job, record.t)
            if record.job in workload:
                completions[record.job] = record.t
                runtimes[record.job] = record.t - started[record.job]
        elif record.kind is EventKind.PREEMPT:
            close(record.job, record.t)
            wasted += record.work or 0.0
            if record.reason == "local-priority":
                preemptions += 1
    for job_id in list(open_runs):
        close(job_id, trace.end_time)

    if not completions:
        raise EmptyMetricsError("trace holds no completed workload jobs")

    ordered = sorted(completions.values())
    values = np.array([runtimes[j] for j in sorted(runtimes)])
    first_submit = min(trace.jobs[j].submit_time for j in workload)
    return Metrics(
        runtimes=[float(v) for v in values],
        cdf=[(t, i + 1) for i, t in enumerate(ordered)],
        makespan=ordered[-1] - first_submit,
        median_runtime=float(np.median(values)),
        mean_runtime=float(np.mean(values)),
        steady_state_intercompletion=steady_state_gap(ordered),
        preemption_count=preemptions,
        wasted_work=wasted,
        completed_jobs=len(completions),
        completed_work=sum(trace.jobs[j].work for j in completions),
        in_flight_work=trace.in_flight_work,
        processed_work=trace.processed_work,
        usage_by_owner=dict(sorted(usage_by_owner.items())),
        usage_by_pool=dict(sorted(usage_by_pool.items())),
    )
