"""
Multi-pool negotiation
Local-first matchmaking, flocking to remote pools and preemption of flocked work
"""

import bisect
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from errors import InvariantViolation, SimulationError
from matchmaker import Ad, AdKind, rank_score, symmetric_match
from models import Assignment, Job, JobState, NodeDescriptor, Origin, Pool, PreemptionEvent

logger = logging.getLogger(__name__)

RuntimeFn = Callable[[float, float], float]


def resource_ad(node: NodeDescriptor) -> Ad:
    return Ad(
        AdKind.RESOURCE,
        {
            "Memory": node.memory,
            "Arch": node.arch,
            "Speed": node.speed,
            "Site": node.site,
            "PoolId": node.pool,
            "NodeId": node.id,
            "requirements": True,
        },
    )


def job_ad(job: Job) -> Ad:
    attributes = {
        "Owner": job.owner,
        "Work": job.work,
        "PoolId": job.origin_pool,
        "requirements": f"expr:{job.requirements}",
    }
    if job.rank:
        attributes["rank"] = f"expr:{job.rank}"
    return Ad(AdKind.JOB, attributes)


class GridScheduler:
    """Pools, their members and every job they have seen

    Mutated only by the simulation driver. Runtimes come from the injected
    callable so that overhead policy stays with the engine.
    """

    def __init__(self, pools: Iterable[Pool], nodes: Iterable[NodeDescriptor], runtime: RuntimeFn):
        self.pools: Dict[str, Pool] = {}
        for pool in pools:
            self.pools[pool.pool_id] = pool.model_copy(update={"members": [], "queue": []}, deep=True)
        self.runtime = runtime
        self.nodes: Dict[int, NodeDescriptor] = {}
        self.node_ads: Dict[int, Ad] = {}
        self.running: Dict[int, Optional[str]] = {}
        self.jobs: Dict[str, Job] = {}
        self.job_ads: Dict[str, Ad] = {}
        self.usage_by_owner: Dict[str, float] = {}
        self.usage_by_pool: Dict[str, float] = {}
        self.processed_work = 0.0
        self.preemption_count = 0
        self._durations: Dict[str, float] = {}
        self._match_cache: Dict[Tuple[str, int], Tuple[bool, float]] = {}
        for node in nodes:
            self.add_node(node)

    # membership

    def add_node(self, node: NodeDescriptor) -> None:
        if node.pool not in self.pools:
            raise SimulationError(f"node {node.id:x} placed in unknown pool '{node.pool}'")
        if node.id in self.nodes:
            raise SimulationError(f"node {node.id:x} already belongs to pool '{self.nodes[node.id].pool}'")
        self.nodes[node.id] = node
        self.node_ads[node.id] = resource_ad(node)
        self.running[node.id] = None
        bisect.insort(self.pools[node.pool].members, node.id)

    def remove_node(self, node_id: int, now: float) -> List[Job]:
        """Drop a departed node; a job running there goes back to its origin queue"""
        job_id = self.running[node_id]
        evicted = [] if job_id is None else [self.requeue_evicted(self.jobs[job_id], now)]
        node = self.nodes.pop(node_id)
        self.node_ads.pop(node_id)
        self.running.pop(node_id)
        self.pools[node.pool].members.remove(node_id)
        return evicted

    def pools_flocking_to(self, pool_id: str) -> List[str]:
        return [p.pool_id for p in self.pools.values() if pool_id in p.flock_targets]

    # jobs

    def add_job(self, job: Job, ad: Optional[Ad] = None) -> None:
        if job.origin_pool not in self.pools:
            raise SimulationError(f"job {job.job_id} submitted to unknown pool '{job.origin_pool}'")
        self.jobs[job.job_id] = job
        self.job_ads[job.job_id] = ad if ad is not None else job_ad(job)

    def _queue_key(self, job_id: str) -> Tuple[float, str]:
        return self.jobs[job_id].submit_time, job_id

    def enqueue(self, job: Job) -> None:
        job.state = JobState.QUEUED
        bisect.insort(self.pools[job.origin_pool].queue, job.job_id, key=self._queue_key)

    def submit(self, job_id: str) -> Job:
        job = self.jobs[job_id]
        self.enqueue(job)
        return job

    def _matches(self, job_id: str, node_id: int) -> Tuple[bool, float]:
        key = (job_id, node_id)
        cached = self._match_cache.get(key)
        if cached is None:
            ad, res = self.job_ads[job_id], self.node_ads[node_id]
            matched = symmetric_match(ad, res)
            cached = (matched, rank_score(ad, res) if matched else 0.0)
            self._match_cache[key] = cached
        return cached

    def _best(self, job_id: str, node_ids: Iterable[int]) -> Optional[int]:
        best: Optional[Tuple[float, int]] = None
        for node_id in node_ids:
            matched, rank = self._matches(job_id, node_id)
            if matched and (best is None or (-rank, node_id) < best):
                best = (-rank, node_id)
        return None if best is None else best[1]

    def idle_members(self, pool_id: str) -> List[int]:
        return [n for n in self.pools[pool_id].members if self.running[n] is None]

    def flock_candidates(self, pool_id: str, job_id: str) -> List[int]:
        """Idle matching nodes: local members first, then each flock target in order"""
        groups = [pool_id] + self.pools[pool_id].flock_targets
        return [n for p in groups for n in self.idle_members(p) if self._matches(job_id, n)[0]]

    # assignment

    def _assign(self, job: Job, node_id: int, now: float, origin: Origin) -> Assignment:
        if self.running[node_id] is not None:
            raise InvariantViolation(f"node {node_id:x} already runs {self.running[node_id]}")
        node = self.nodes[node_id]
        self.pools[job.origin_pool].queue.remove(job.job_id)
        assignment = Assignment(job_id=job.job_id, node_id=node_id, start_time=now, origin=origin, pool_id=node.pool)
        job.state = JobState.RUNNING
        job.history.append(assignment)
        self.running[node_id] = job.job_id
        self._durations[job.job_id] = self.runtime(job.work, node.speed)
        return assignment

    def duration(self, job_id: str) -> float:
        return self._durations[job_id]

    def _stop(self, job: Job, now: float) -> Tuple[Assignment, float]:
        """Release the node; returns the assignment and the fraction of work done"""
        current = job.current
        if current is None:
            raise InvariantViolation(f"job {job.job_id} is not running")
        self.running[current.node_id] = None
        busy = now - current.start_time
        duration = self._durations.pop(job.job_id)
        fraction = min(1.0, busy / duration) if duration > 0 else 1.0
        self.usage_by_owner[job.owner] = self.usage_by_owner.get(job.owner, 0.0) + busy
        self.usage_by_pool[current.pool_id] = self.usage_by_pool.get(current.pool_id, 0.0) + busy
        self.processed_work += fraction * job.work
        return current, fraction

    def complete(self, job_id: str, now: float) -> Job:
        job = self.jobs[job_id]
        self._stop(job, now)
        job.state = JobState.COMPLETED
        job.remaining_work = 0.0
        job.completion_time = now
        return job

    def _lose_progress(self, job: Job, now: float) -> Assignment:
        assignment, fraction = self._stop(job, now)
        job.wasted_work += fraction * job.work
        job.remaining_work = job.work
        self.enqueue(job)
        return assignment

    def requeue_preempted(self, job: Job, now: float) -> Job:
        """Kill and restart: back to the origin queue with full work remaining"""
        current = job.current
        if current is None or current.origin is not Origin.FLOCKED:
            raise InvariantViolation(f"job {job.job_id} is not a running flocked job and cannot be preempted")
        self._lose_progress(job, now)
        job.preemptions += 1
        self.preemption_count += 1
        return job

    def requeue_evicted(self, job: Job, now: float, reason: str = "node-leave") -> Job:
        self._lose_progress(job, now)
        logger.debug(f"job {job.job_id} evicted at t={now:.1f} ({reason})")
        return job

    # negotiation

    def _victim(self, pool: Pool, job_id: str) -> Optional[int]:
        """Member running the most recently started flocked job that job_id could use"""
        best: Optional[Tuple[float, int]] = None
        for node_id in pool.members:
            running = self.running[node_id]
            if running is None:
                continue
            current = self.jobs[running].current
            if current.origin is not Origin.FLOCKED or not self._matches(job_id, node_id)[0]:
                continue
            key = (-current.start_time, node_id)
            if best is None or key < best:
                best = key
        return None if best is None else best[1]

    def _local_phase(self, pool: Pool, now: float) -> Tuple[List[Assignment], List[PreemptionEvent]]:
        assignments: List[Assignment] = []
        preemptions: List[PreemptionEvent] = []
        for job_id in list(pool.queue):
            idle = self.idle_members(pool.pool_id)
            flocked_in = [
                n for n in pool.members
                if self.running[n] is not None and self.jobs[self.running[n]].current.origin is Origin.FLOCKED
            ]
            if not idle and not flocked_in:
                break
            job = self.jobs[job_id]
            node_id = self._best(job_id, idle)
            if node_id is not None:
                assignments.append(self._assign(job, node_id, now, Origin.LOCAL))
                continue
            node_id = self._victim(pool, job_id)
            if node_id is None:
                continue
            victim = self.jobs[self.running[node_id]]
            self.requeue_preempted(victim, now)
            preemptions.append(PreemptionEvent(victim_job_id=victim.job_id, node_id=node_id, time=now, preemptor_job_id=job_id))
            assignments.append(self._assign(job, node_id, now, Origin.LOCAL))
            logger.debug(f"t={now:.1f} {job_id} preempted {victim.job_id} on pool {pool.pool_id}")
        return assignments, preemptions

    def _flock_phase(self, pool: Pool, now: float) -> List[Assignment]:
        assignments: List[Assignment] = []
        if not pool.flock_targets:
            return assignments
        for job_id in list(pool.queue):
            idle_by_target = [(t, self.idle_members(t)) for t in pool.flock_targets]
            if not any(idle for _, idle in idle_by_target):
                break
            for _, idle in idle_by_target:
                node_id = self._best(job_id, idle)
                if node_id is not None:
                    assignments.append(self._assign(self.jobs[job_id], node_id, now, Origin.FLOCKED))
                    break
        return assignments

    def negotiate_cycle(self, pool_id: str, now: float) -> Tuple[List[Assignment], List[PreemptionEvent]]:
        return self.negotiate_round([pool_id], now)

    def negotiate_round(self, pool_ids: Sequence[str], now: float) -> Tuple[List[Assignment], List[PreemptionEvent]]:
        """Every due pool's local phase runs before any flock phase"""
        due = [p for p in self.pools if p in set(pool_ids)]
        assignments: List[Assignment] = []
        preemptions: List[PreemptionEvent] = []
        for pool_id in due:
            local, preempted = self._local_phase(self.pools[pool_id], now)
            assignments += local
            preemptions += preempted
        for pool_id in due:
            assignments += self._flock_phase(self.pools[pool_id], now)
        return assignments, preemptions

    # accounting

    def counts(self) -> Dict[JobState, int]:
        tally = {state: 0 for state in JobState}
        for job in self.jobs.values():
            tally[job.state] += 1
        return tally

    def check_conservation(self, submitted: Iterable[str]) -> None:
        submitted = list(submitted)
        queued = sum(len(p.queue) for p in self.pools.values())
        running = sum(1 for j in self.running.values() if j is not None)
        completed = sum(1 for j in submitted if self.jobs[j].state is JobState.COMPLETED)
        if queued + running + completed != len(submitted):
            raise InvariantViolation(
                f"conservation broken: {queued} queued + {running} running + {completed} completed "
                f"!= {len(submitted)} submitted"
            )
