from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Any, Dict, List, Literal, Optional, Tuple, Union
from enum import Enum


class NatClass(str, Enum):
    PUBLIC = "public"
    CONE = "cone"
    SYMMETRIC = "symmetric"


class LinkKind(str, Enum):
    DIRECT = "direct"
    RELAYED = "relayed"


class Origin(str, Enum):
    LOCAL = "local"
    FLOCKED = "flocked"


class JobState(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"


class EventKind(str, Enum):
    SUBMIT = "Submit"
    NEGOTIATE_TICK = "NegotiateTick"
    JOB_START = "JobStart"
    JOB_COMPLETE = "JobComplete"
    PREEMPT = "Preempt"
    NODE_JOIN = "NodeJoin"
    NODE_LEAVE = "NodeLeave"


class OverheadFlavor(str, Enum):
    VMWARE = "vmware"
    XEN = "xen"
    NONE = "none"


class NodeDescriptor(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int = Field(..., ge=0, description="Ring identifier")
    vip: str = Field(..., description="Virtual IPv4 address (dotted quad)")
    site: str
    pool: str
    speed: float = Field(..., gt=0, description="Normalized work units per second")
    nat: NatClass = NatClass.PUBLIC
    memory: int = Field(default=2048, gt=0, description="Memory in MB")
    arch: str = "x86"


class Pool(BaseModel):
    pool_id: str
    members: List[int] = []
    queue: List[str] = []
    flock_targets: List[str] = []
    negotiation_interval: float = Field(default=60.0, ge=0)


class Assignment(BaseModel):
    job_id: str
    node_id: int
    start_time: float
    origin: Origin
    pool_id: str  # pool owning the node


class PreemptionEvent(BaseModel):
    victim_job_id: str
    node_id: int
    time: float
    reason: str = "local-priority"
    preemptor_job_id: Optional[str] = None


class Job(BaseModel):
    job_id: str
    owner: str
    origin_pool: str
    work: float = Field(..., gt=0)
    submit_time: float = Field(default=0.0, ge=0)
    requirements: str = "true"
    rank: Optional[str] = None
    background: bool = False
    state: JobState = JobState.QUEUED
    remaining_work: Optional[float] = None
    preemptions: int = 0
    wasted_work: float = 0.0
    history: List[Assignment] = []
    completion_time: Optional[float] = None

    @model_validator(mode="after")
    def _full_work_remaining(self):
        if self.remaining_work is None:
            self.remaining_work = self.work
        return self

    @property
    def current(self) -> Optional[Assignment]:
        if self.state == JobState.RUNNING and self.history:
            return self.history[-1]
        return None


class TraceRecord(BaseModel):
    t: float
    kind: EventKind
    job: Optional[str] = None
    node: Optional[str] = None  # hex NodeId
    pool: Optional[str] = None
    origin: Optional[Origin] = None
    reason: Optional[str] = None
    work: Optional[float] = None


class JobSummary(BaseModel):
    owner: str
    origin_pool: str
    work: float
    submit_time: float
    background: bool = False


class Trace(BaseModel):
    records: List[TraceRecord] = []
    jobs: Dict[str, JobSummary] = {}
    end_time: float = 0.0
    in_flight_work: float = 0.0
    processed_work: float = 0.0

    def to_jsonl(self) -> str:
        return "".join(r.model_dump_json(exclude_none=True) + "\n" for r in self.records)


class Metrics(BaseModel):
    runtimes: List[float]
    cdf: List[Tuple[float, int]]
    makespan: float
    median_runtime: float
    mean_runtime: float
    steady_state_intercompletion: float
    preemption_count: int = 0
    wasted_work: float = 0.0
    completed_jobs: int = 0
    completed_work: float = 0.0
    in_flight_work: float = 0.0
    processed_work: float = 0.0
    usage_by_owner: Dict[str, float] = {}
    usage_by_pool: Dict[str, float] = {}


class DeliveryReceipt(BaseModel):
    hops: int
    path: List[int]
    relayed_links: int = 0
    payload_size: int = 0


class Frame(BaseModel):
    """Sealed payload travelling hop by hop through the overlay"""

    frame_id: int
    src: int
    dst: int
    ciphertext: str  # base64
    path: List[int] = []
    relay_to: Optional[int] = None


# Experiment configuration


class ExperimentSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    n_jobs: int = Field(..., gt=0)
    n_nodes: int = Field(..., gt=0)
    n_sites: int = Field(..., gt=0)
    work: float = Field(..., gt=0, description="Work units per job")
    overhead: OverheadFlavor = OverheadFlavor.VMWARE
    submit_link_delay: float = Field(default=5.0, ge=0, description="Seconds between job submissions")
    submit_pool: str
    owner: str = "archer-user"
    job_requirements: str = "true"
    job_rank: Optional[str] = "other.Speed"
    baseline_speed: Union[float, Literal["median"]] = "median"
    background_occupancy: float = Field(default=0.0, ge=0, lt=1)
    background_work: float = Field(default=1.0e12, gt=0)
    deadline: Optional[float] = Field(default=None, gt=0)

    @field_validator("baseline_speed")
    @classmethod
    def _positive_speed(cls, v):
        if v != "median" and v <= 0:
            raise ValueError("baseline_speed must be positive or 'median'")
        return v


class SiteSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    nodes: int = Field(..., gt=0)
    speed: float = Field(..., gt=0)
    pool: str
    memory: int = Field(default=2048, gt=0)
    arch: str = "x86"


class PoolSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pool_id: str = Field(..., min_length=1)
    flock_targets: List[str] = []
    negotiation_interval: float = Field(default=60.0, ge=0)


class NatMix(BaseModel):
    model_config = ConfigDict(extra="forbid")

    public: float = Field(default=0.4, ge=0)
    cone: float = Field(default=0.4, ge=0)
    symmetric: float = Field(default=0.2, ge=0)

    @model_validator(mode="after")
    def _some_weight(self):
        if self.public + self.cone + self.symmetric <= 0:
            raise ValueError("nat_mix weights must not all be zero")
        return self


class OverlaySection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    bits: int = Field(default=160, ge=4, le=160)
    near: int = Field(default=2, ge=1, description="Near successors/predecessors per side")
    seed: int = 0
    nat_mix: NatMix = NatMix()
    sample_pairs: int = Field(default=200, ge=0)
    injected_frames: int = Field(default=100, ge=0)
    transport: Literal["memory", "loopback"] = "memory"


class WorkloadSpec(BaseModel):
    """Extra job batch submitted to any pool, alongside the main workload"""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    pool: str
    n_jobs: int = Field(..., gt=0)
    work: float = Field(..., gt=0)
    owner: str = "archer-user"
    start: float = Field(default=0.0, ge=0)
    interval: float = Field(default=0.0, ge=0)
    requirements: str = "true"
    rank: Optional[str] = None


class ChurnEvent(BaseModel):
    model_config = ConfigDict(extra="forbid")

    time: float = Field(..., ge=0)
    site: str
    count: int = Field(..., gt=0)


class ArrivalEvent(BaseModel):
    """Nodes joining an existing site partway through a run"""

    model_config = ConfigDict(extra="forbid")

    time: float = Field(..., ge=0)
    site: str
    count: int = Field(..., gt=0)


class OutputSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    directory: Optional[str] = None
    summary: str = "summary.json"
    trace: str = "trace.jsonl"
    cdf: str = "cdf.csv"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentSection
    sites: List[SiteSpec] = Field(..., min_length=1)
    pools: List[PoolSpec] = Field(..., min_length=1)
    workloads: List[WorkloadSpec] = []
    overlay: OverlaySection = OverlaySection()
    churn: List[ChurnEvent] = []
    arrivals: List[ArrivalEvent] = []
    output: OutputSection = OutputSection()

    def semantic_violations(self) -> List[str]:
        """Cross-section consistency rules pydantic cannot express field by field"""
        problems: List[str] = []
        exp = self.experiment
        pool_ids = [p.pool_id for p in self.pools]
        known = set(pool_ids)

        total = sum(s.nodes for s in self.sites)
        if exp.n_nodes != total:
            problems.append(f"experiment.n_nodes is {exp.n_nodes} but sites sum to {total}")
        if exp.n_sites != len(self.sites):
            problems.append(f"experiment.n_sites is {exp.n_sites} but {len(self.sites)} sites are listed")
        for pid in sorted({p for p in pool_ids if pool_ids.count(p) > 1}):
            problems.append(f"duplicate pool_id '{pid}'")
        names = [s.name for s in self.sites]
        for name in sorted({n for n in names if names.count(n) > 1}):
            problems.append(f"duplicate site name '{name}'")
        if exp.submit_pool not in known:
            problems.append(f"experiment.submit_pool '{exp.submit_pool}' is not a configured pool")
        if "background" in known and exp.background_occupancy > 0:
            problems.append("pool id 'background' is reserved when background_occupancy > 0")
        for i, site in enumerate(self.sites):
            if site.pool not in known:
                problems.append(f"sites[{i}] '{site.name}' references unknown pool '{site.pool}'")
        for i, pool in enumerate(self.pools):
            for target in pool.flock_targets:
                if target not in known:
                    problems.append(f"pools[{i}] '{pool.pool_id}' flocks to unknown pool '{target}'")
                elif target == pool.pool_id:
                    problems.append(f"pools[{i}] '{pool.pool_id}' lists itself as a flock target")
            dupes = {t for t in pool.flock_targets if pool.flock_targets.count(t) > 1}
            for target in sorted(dupes):
                problems.append(f"pools[{i}] '{pool.pool_id}' repeats flock target '{target}'")
        for i, batch in enumerate(self.workloads):
            if batch.pool not in known:
                problems.append(f"workloads[{i}] '{batch.name}' submits to unknown pool '{batch.pool}'")
        batch_names = [b.name for b in self.workloads]
        for name in sorted({n for n in batch_names if batch_names.count(n) > 1}):
            problems.append(f"duplicate workload name '{name}'")
        site_names = set(names)
        for i, event in enumerate(self.churn):
            if event.site not in site_names:
                problems.append(f"churn[{i}] references unknown site '{event.site}'")
            else:
                size = next(s.nodes for s in self.sites if s.name == event.site)
                if event.count > size:
                    problems.append(f"churn[{i}] removes {event.count} nodes from site '{event.site}' of {size}")
        for i, event in enumerate(self.arrivals):
            if event.site not in site_names:
                problems.append(f"arrivals[{i}] references unknown site '{event.site}'")
        return problems


# Reports


class OverlayStats(BaseModel):
    nodes: int
    pairs: int
    delivered: int
    delivery_rate: float = Field(..., ge=0, le=1)
    mean_hops: float
    max_hops: int
    relayed_links: int = 0


class SecurityStats(BaseModel):
    certified_nodes: int
    injected_frames: int
    rejected_frames: int
    rejected_handshakes: int = 0


class BaselineStats(BaseModel):
    speed: float
    serial_makespan: float
    ratio: float  # serial makespan over grid makespan


class CapacityStats(BaseModel):
    runtime: float
    deadline: float
    effective_free_slots: int
    threshold_slots: int
    meets_deadline: bool


class Report(BaseModel):
    name: str
    seed: int
    metrics: Metrics
    baseline: BaselineStats
    overlay: OverlayStats
    security: SecurityStats
    capacity: Optional[CapacityStats] = None
    config: Dict[str, Any]
    trace: Optional[Trace] = Field(default=None, exclude=True)

    def summary(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")
