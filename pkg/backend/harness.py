"""
Experiment harness
Config loading, end-to-end experiment runs, capacity arithmetic and report files
"""

import base64
import json
import logging
import math
import random
import re
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from errors import ConfigError, InvalidConfigError, OverlayError, ReportError, SecurityError
from models import (
    BaselineStats,
    CapacityStats,
    ExperimentConfig,
    NatClass,
    NodeDescriptor,
    OutputSection,
    OverlayStats,
    Report,
    SecurityStats,
)
from overlay import Overlay
from secnet import DEFAULT_SUITE, CertificateAuthority, CryptoSuite, generate_identity
from settings import env_seed, profiles_dir
from simcore import (
    build_arrivals,
    build_churn,
    collect_metrics,
    job_runtime,
    provision_nodes,
    run_simulation,
    serial_baseline,
)
from transport import make_transport

logger = logging.getLogger(__name__)

BUILTIN_PROFILES = ("fig2", "scenario1")
SWEEP_RE = re.compile(r"^seeds=(-?\d+)\.\.(-?\d+)$")


# Configuration


def resolve_config_path(ref: Union[str, Path]) -> Path:
    path = Path(ref)
    if path.exists() or path.suffix:
        return path
    candidate = profiles_dir() / f"{ref}.json"
    if candidate.exists():
        return candidate
    raise ConfigError(f"no config file or built-in profile named '{ref}'")


def parse_config(data: Any, source: str = "config") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        violations = [f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()]
        raise ConfigError(f"{source}: invalid configuration", violations) from None
    violations = config.semantic_violations()
    if violations:
        raise ConfigError(f"{source}: inconsistent configuration", violations)
    return config


def load_config(ref: Union[str, Path]) -> ExperimentConfig:
    path = resolve_config_path(ref)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror or e}") from None
    if not text.strip():
        raise ConfigError(f"{path}: parse error at line 1: empty file, expected a JSON object", line=1)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: parse error at line {e.lineno} column {e.colno}: {e.msg}", line=e.lineno) from None
    return parse_config(data, source=str(path))


def resolve_seed(cli_seed: Optional[int], config: ExperimentConfig) -> int:
    """ARCHERSIM_SEED beats --seed, which beats the config's overlay seed"""
    from_env = env_seed()
    if from_env is not None:
        return from_env
    if cli_seed is not None:
        return cli_seed
    return config.overlay.seed


# Capacity arithmetic


def median_speed(config: ExperimentConfig) -> float:
    return float(np.median([s.speed for s in config.sites for _ in range(s.nodes)]))


def baseline_speed(config: ExperimentConfig) -> float:
    speed = config.experiment.baseline_speed
    return median_speed(config) if speed == "median" else float(speed)


def capacity_stats(config: ExperimentConfig, makespan: float) -> Optional[CapacityStats]:
    """Free node-slots reachable from the submit pool versus what the deadline needs"""
    exp = config.experiment
    if exp.deadline is None:
        return None
    runtime = job_runtime(exp.work, median_speed(config), exp.overhead)
    members = {p.pool_id: sum(s.nodes for s in config.sites if s.pool == p.pool_id) for p in config.pools}
    submit = next(p for p in config.pools if p.pool_id == exp.submit_pool)
    # local members count in full since local jobs preempt the background there
    slots = members[submit.pool_id]
    for target in submit.flock_targets:
        slots += members[target] - round(exp.background_occupancy * members[target])
    waves = math.floor(exp.deadline / runtime)
    threshold = math.ceil(exp.n_jobs / waves) if waves > 0 else exp.n_jobs + 1
    return CapacityStats(
        runtime=runtime,
        deadline=exp.deadline,
        effective_free_slots=slots,
        threshold_slots=threshold,
        meets_deadline=makespan <= exp.deadline,
    )


# Overlay sampling


def sample_delivery(overlay: Overlay, pairs: int, seed: int) -> OverlayStats:
    """Tunnel a payload between seeded random pairs of live nodes"""
    rng = random.Random(f"{seed}:pairs")
    live = overlay.live_ids()
    pairs = pairs if len(live) > 1 else 0
    delivered = 0
    relayed = 0
    hops: List[int] = []
    for i in range(pairs):
        src, dst = rng.sample(live, 2)
        vip = overlay.node(dst).descriptor.vip
        try:
            receipt = overlay.tunnel_send(src, vip, f"sample-{i}".encode())
        except (OverlayError, SecurityError) as e:
            logger.warning(f"sample {i} from {src:x} to {vip} failed: {e}")
            continue
        delivered += 1
        hops.append(receipt.hops)
        relayed += receipt.relayed_links
    return OverlayStats(
        nodes=len(live),
        pairs=pairs,
        delivered=delivered,
        delivery_rate=delivered / pairs if pairs else 1.0,
        mean_hops=float(np.mean(hops)) if hops else 0.0,
        max_hops=max(hops) if hops else 0,
        relayed_links=relayed,
    )


def overlay_demo(
    nodes: int,
    seed: int,
    pairs: int,
    bits: int = 160,
    transport: str = "memory",
    dump: Optional[Union[str, Path]] = None,
) -> Dict[str, Any]:
    """Standalone overlay of seeded nodes, stabilized and sampled for delivery"""
    if nodes < 1:
        raise InvalidConfigError("--nodes must be at least 1")
    if not 4 <= bits <= 160:
        raise InvalidConfigError("--bits must be between 4 and 160")
    if nodes > 2 ** (bits - 1):
        raise InvalidConfigError(f"{nodes} nodes do not fit a {bits}-bit ring")
    ids = random.Random(f"{seed}:ids")
    nats = random.Random(f"{seed}:nat")
    overlay = Overlay(bits=bits, seed=seed, transport=make_transport(transport), ca=CertificateAuthority(seed=f"{seed}:ca"))
    try:
        chosen = set()
        first: Optional[int] = None
        for i in range(nodes):
            node_id = ids.getrandbits(bits)
            while node_id in chosen:
                node_id = ids.getrandbits(bits)
            chosen.add(node_id)
            nat = NatClass.PUBLIC if i == 0 else nats.choices(list(NatClass), weights=[0.4, 0.4, 0.2])[0]
            descriptor = NodeDescriptor(id=node_id, vip=overlay.allocate_vip(), site="demo", pool="demo", speed=1.0, nat=nat)
            overlay.join(descriptor, bootstraps=[first] if first is not None else [])
            first = node_id if first is None else first
        overlay.stabilize()
        stats = sample_delivery(overlay, pairs, seed)
        if dump:
            Path(dump).write_text(overlay.topology_dump(), encoding="utf-8")
    finally:
        overlay.close()
    return stats.model_dump()


# Experiment


class Experiment:
    """One reproducible run: overlay, frame injection, simulation and baseline"""

    def __init__(
        self,
        config: ExperimentConfig,
        seed: int,
        suite: CryptoSuite = DEFAULT_SUITE,
        transport: Optional[str] = None,
    ):
        self.config = config
        self.seed = seed
        self.suite = suite
        self.transport_kind = transport or config.overlay.transport
        self.nodes: List[NodeDescriptor] = provision_nodes(config, seed, include_submit_host=True)

    @property
    def submit_host(self) -> NodeDescriptor:
        return self.nodes[0]

    @property
    def workers(self) -> List[NodeDescriptor]:
        return self.nodes[1:]

    def build_overlay(self) -> Overlay:
        ov = self.config.overlay
        ca = CertificateAuthority(seed=f"{self.seed}:ca", suite=self.suite)
        overlay = Overlay(
            bits=ov.bits, near=ov.near, seed=self.seed, transport=make_transport(self.transport_kind), ca=ca,
        )
        first = self.submit_host.id
        for node in self.nodes:
            overlay.join(node, bootstraps=[first])
        overlay.stabilize()
        logger.info(f"overlay built: {len(overlay.live_ids())} nodes on a {ov.bits}-bit ring")
        return overlay

    def apply_churn(self, overlay: Overlay) -> None:
        departures = build_churn(self.config, self.workers, self.seed)
        arrivals = build_arrivals(self.config, self.seed)
        if not departures and not arrivals:
            return
        for _, node_id in departures:
            overlay.fail(node_id)
        for _, node in arrivals:
            overlay.join(node, bootstraps=[self.submit_host.id])
        overlay.stabilize()
        logger.info(f"{len(departures)} nodes failed and {len(arrivals)} joined; overlay restabilized")

    def measure_delivery(self, overlay: Overlay) -> OverlayStats:
        return sample_delivery(overlay, self.config.overlay.sample_pairs, self.seed)

    def inject_frames(self, overlay: Overlay) -> SecurityStats:
        """Frames from outside the certified membership, in four flavors"""
        rng = random.Random(f"{self.seed}:inject")
        live = overlay.live_ids()
        count = self.config.overlay.injected_frames if len(live) > 1 else 0
        rogue_ca = CertificateAuthority(seed=f"{self.seed}:rogue", suite=self.suite)
        handshakes_before = overlay.security["rejected_handshakes"]
        if count and overlay.last_frame is None:
            src, dst = rng.sample(live, 2)
            overlay.tunnel_send(src, overlay.node(dst).descriptor.vip, b"capture")
        delivered = 0
        for i in range(count):
            dst = rng.choice(live)
            vip = overlay.node(dst).descriptor.vip
            garbage = rng.randbytes(rng.randint(1, 96))
            flavor = i % 4
            if flavor == 0:
                rogue_id = rng.getrandbits(overlay.bits)
                creds = rogue_ca.issue(generate_identity(rogue_id, "rogue", self.suite), 2**40)
                ok = overlay.inject_frame(rogue_id, vip, garbage, credentials=creds)
            elif flavor == 1:
                ok = overlay.inject_frame(rng.getrandbits(overlay.bits), vip, garbage)
            elif flavor == 2:
                claimed = rng.choice([x for x in live if x != dst])
                ok = overlay.inject_frame(claimed, vip, garbage)
            else:
                captured = overlay.last_frame
                ok = overlay.inject_frame(
                    captured.src, overlay.node(captured.dst).descriptor.vip, base64.b64decode(captured.ciphertext)
                )
            delivered += int(ok)
        if delivered:
            logger.error(f"{delivered} of {count} injected frames were delivered")
        certified = sum(1 for x in live if overlay.node(x).credentials is not None)
        return SecurityStats(
            certified_nodes=certified,
            injected_frames=count,
            rejected_frames=count - delivered,
            rejected_handshakes=overlay.security["rejected_handshakes"] - handshakes_before,
        )

    def run(self) -> Report:
        name = self.config.experiment.name
        logger.info(f"experiment '{name}' starting with seed {self.seed}")
        overlay = self.build_overlay()
        try:
            self.apply_churn(overlay)
            overlay_stats = self.measure_delivery(overlay)
            security_stats = self.inject_frames(overlay)
        finally:
            overlay.close()

        trace = run_simulation(self.config, self.seed, nodes=self.workers)
        metrics = collect_metrics(trace)
        speed = baseline_speed(self.config)
        serial = serial_baseline(self.config, speed)
        report = Report(
            name=name,
            seed=self.seed,
            metrics=metrics,
            baseline=BaselineStats(speed=speed, serial_makespan=serial, ratio=serial / metrics.makespan),
            overlay=overlay_stats,
            security=security_stats,
            capacity=capacity_stats(self.config, metrics.makespan),
            config=self.config.model_dump(mode="json"),
            trace=trace,
        )
        logger.info(
            f"experiment '{name}' done: makespan {metrics.makespan:.0f}s, median {metrics.median_runtime:.0f}s"
        )
        return report


def run_experiment(ref: Union[str, Path, ExperimentConfig], seed: Optional[int] = None, **kwargs) -> Report:
    config = ref if isinstance(ref, ExperimentConfig) else load_config(ref)
    return Experiment(config, resolve_seed(seed, config), **kwargs).run()


def run_fig2(seed: Optional[int] = None, **kwargs) -> Report:
    return run_experiment("fig2", seed, **kwargs)


def run_scenario1(seed: Optional[int] = None, **kwargs) -> Report:
    return run_experiment("scenario1", seed, **kwargs)


# Reports


def emit_report(report: Report, out_dir: Union[str, Path], output: Optional[OutputSection] = None) -> Dict[str, Path]:
    if report.trace is None:
        raise ReportError("report carries no trace to write")
    output = output or OutputSection.model_validate(report.config.get("output", {}))
    out = Path(out_dir)
    paths = {"summary": out / output.summary, "trace": out / output.trace, "cdf": out / output.cdf}
    cdf = pd.DataFrame(report.metrics.cdf, columns=["time_seconds", "jobs_completed"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths["summary"].write_text(json.dumps(report.summary(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        paths["trace"].write_text(report.trace.to_jsonl(), encoding="utf-8")
        cdf.to_csv(paths["cdf"], index=False, float_format="%.3f", lineterminator="\n")
    except OSError as e:
        raise ReportError(f"cannot write report to {out}: {e.strerror or e}") from None
    logger.info(f"report written to {out}")
    return paths


def load_summary(out_dir: Union[str, Path]) -> Dict[str, Any]:
    path = Path(out_dir) / "summary.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ReportError(f"cannot read {path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise ReportError(f"{path} is not a report summary: {e.msg}") from None


def summary_table(summary: Dict[str, Any]) -> pd.DataFrame:
    metrics = summary["metrics"]
    rows = [
        ("experiment", summary["name"]),
        ("seed", summary["seed"]),
        ("completed jobs", metrics["completed_jobs"]),
        ("median runtime (s)", round(metrics["median_runtime"], 1)),
        ("mean runtime (s)", round(metrics["mean_runtime"], 1)),
        ("makespan (s)", round(metrics["makespan"], 1)),
        ("steady-state gap (s)", round(metrics["steady_state_intercompletion"], 2)),
        ("preemptions", metrics["preemption_count"]),
        ("serial baseline (s)", round(summary["baseline"]["serial_makespan"], 1)),
        ("speedup", round(summary["baseline"]["ratio"], 2)),
        ("overlay delivery", summary["overlay"]["delivery_rate"]),
        ("overlay mean hops", round(summary["overlay"]["mean_hops"], 2)),
        ("rejected frames", f"{summary['security']['rejected_frames']}/{summary['security']['injected_frames']}"),
    ]
    capacity = summary.get("capacity")
    if capacity:
        rows.append(("free slots / needed", f"{capacity['effective_free_slots']}/{capacity['threshold_slots']}"))
        rows.append(("meets deadline", capacity["meets_deadline"]))
    return pd.DataFrame(rows, columns=["field", "value"]).set_index("field")


# Seed sweeps


def parse_sweep(spec: str) -> List[int]:
    match = SWEEP_RE.match(spec.strip())
    if not match:
        raise ConfigError(f"sweep must look like seeds=a..b, got '{spec}'")
    lo, hi = int(match.group(1)), int(match.group(2))
    if hi < lo:
        raise ConfigError(f"empty seed range {lo}..{hi}")
    return list(range(lo, hi + 1))


def _sweep_one(ref: str, seed: int, out_dir: str) -> Dict[str, Any]:
    report = Experiment(load_config(ref), seed).run()
    emit_report(report, Path(out_dir) / f"seed-{seed}")
    m = report.metrics
    return {
        "seed": seed,
        "median_runtime": m.median_runtime,
        "mean_runtime": m.mean_runtime,
        "makespan": m.makespan,
        "steady_state_intercompletion": m.steady_state_intercompletion,
        "delivery_rate": report.overlay.delivery_rate,
    }


def run_sweep(ref: Union[str, Path], seeds: Sequence[int], out_dir: Union[str, Path], workers: Optional[int] = None) -> List[Dict[str, Any]]:
    """Independent runs in parallel processes, merged in seed order"""
    ref = str(resolve_config_path(ref))
    load_config(ref)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(_sweep_one, [ref] * len(seeds), seeds, [str(out_dir)] * len(seeds)))
    rows.sort(key=lambda r: r["seed"])
    path = Path(out_dir) / "sweep.json"
    try:
        path.write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot write {path}: {e.strerror or e}") from None
    return rows


def list_profiles() -> List[str]:
    return sorted(p.stem for p in profiles_dir().glob("*.json") if not p.stem.endswith("_calibration"))

