"""Synthetic microservice failure scenarios with labeled culprits.

Telemetry is produced in two passes. First every random draw for the case is
made up front (metric noise, request arrivals, replica choice, span
durations, status and log coin flips), so the draw sequence never depends on
the injected fault. Then the fault is applied deterministically, following
three propagation patterns:

* call: extra latency at an instance reaches every upstream span of the same
  request, attenuated per hop; errors surface as upstream 500s;
* deployment: a CPU or memory hog on one instance slows and starves the
  other instances on its host;
* load balancing: a killed replica goes silent and its share of requests
  lands on its siblings.

Instances outside these relations emit exactly what a fault-free run emits.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import InvalidConfig, InvalidCulprit
from .telemetry import (
    FailureCase,
    InstanceInfo,
    TelemetryBundle,
    Topology,
    index_topology,
    write_bundle,
    write_cases,
)

FAILURE_TYPES = ("cpu_hog", "mem_hog", "net_delay", "net_loss", "pod_kill")
MS_NAMES = ("front", "cart", "rec", "pay", "ship", "user", "auth", "order", "stock", "mail")
METRIC_NAMES = ("cpu_usage", "mem_usage", "net_io")
BASE_EPOCH = 1_700_000_000.0


@dataclass
class ScenarioConfig:
    n_microservices: int = 4
    replicas: int = 3
    n_hosts: int = 4
    call_edges: Optional[list] = None
    failure_types: tuple = FAILURE_TYPES
    cases_per_pair: int = 5
    window: float = 600.0
    tau: float = 30.0
    inject_at: Optional[float] = None
    noise: float = 0.05
    request_rate: float = 1.0
    metric_interval: float = 10.0
    multiplier: float = 3.0
    attenuation: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.failure_types = tuple(self.failure_types)
        if self.n_microservices < 1 or self.replicas < 1 or self.n_hosts < 1:
            raise InvalidConfig("microservice, replica and host counts must be >= 1")
        if self.window < 2 * self.tau or self.tau <= 0:
            raise InvalidConfig("window must be at least 2 * tau")
        if self.noise < 0:
            raise InvalidConfig("noise must be >= 0")
        if not 0 <= self.attenuation <= 1:
            raise InvalidConfig("attenuation must lie in [0, 1]")
        if self.cases_per_pair < 1 or self.request_rate <= 0 or self.metric_interval <= 0:
            raise InvalidConfig("cases_per_pair, request_rate and metric_interval must be positive")
        unknown = set(self.failure_types) - set(FAILURE_TYPES)
        if unknown or not self.failure_types:
            raise InvalidConfig(f"unsupported failure types: {sorted(unknown)}")
        if self.inject_at is None:
            self.inject_at = self.window / 2
        if not 0 < self.inject_at < self.window:
            raise InvalidConfig("inject_at must fall inside the window")

    @property
    def microservices(self) -> list[str]:
        return [MS_NAMES[i] if i < len(MS_NAMES) else f"ms{i}" for i in range(self.n_microservices)]

    def to_dict(self):
        doc = asdict(self)
        doc["failure_types"] = list(self.failure_types)
        return doc

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(**doc)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Scenario:
    """A generated topology plus its microservice-level call graph."""

    topology: Topology
    call_edges: list[tuple[str, str]]
    baselines: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def entry(self) -> str:
        callees = {b for _, b in self.call_edges}
        roots = [m for m in _ms_order(self.topology) if m not in callees]
        return roots[0]


def _ms_order(topology):
    seen = []
    for inst in topology.instances:
        if inst.microservice not in seen:
            seen.append(inst.microservice)
    return seen


def _check_acyclic(names, edges):
    indeg = {n: 0 for n in names}
    for a, b in edges:
        if a not in indeg or b not in indeg:
            raise InvalidConfig(f"call edge ({a}, {b}) names an unknown microservice")
        indeg[b] += 1
    ready = [n for n in names if indeg[n] == 0]
    done = 0
    while ready:
        n = ready.pop()
        done += 1
        for a, b in edges:
            if a == n:
                indeg[b] -= 1
                if indeg[b] == 0:
                    ready.append(b)
    if done != len(names):
        raise InvalidConfig("call graph must be acyclic")


def generate_topology(cfg: ScenarioConfig) -> Scenario:
    names = cfg.microservices
    if cfg.call_edges is None:
        # binary tree rooted at the first microservice
        edges = [(names[(i - 1) // 2], names[i]) for i in range(1, len(names))]
    else:
        edges = [tuple(e) for e in cfg.call_edges]
    _check_acyclic(names, edges)
    instances = []
    for m in names:
        for r in range(cfg.replicas):
            k = len(instances)
            instances.append(InstanceInfo(f"{m}-{r}", m, f"host-{k % cfg.n_hosts}"))
    topology = Topology(tuple(instances))
    rng = np.random.default_rng([cfg.seed, 7])
    ids = topology.ids
    baselines = {
        "cpu_usage": rng.normal(0.4, 0.05, len(ids)).clip(0.1),
        "mem_usage": rng.normal(0.5, 0.05, len(ids)).clip(0.1),
        "net_io": rng.normal(1.0, 0.1, len(ids)).clip(0.2),
    }
    return Scenario(topology, edges, baselines)


def _call_plan(scenario: Scenario):
    """Flatten one request into ms-level calls: (microservice, parent position)."""
    children = {}
    for a, b in scenario.call_edges:
        children.setdefault(a, []).append(b)
    plan = []

    def visit(ms, parent):
        pos = len(plan)
        plan.append((ms, parent))
        for child in children.get(ms, []):
            visit(child, pos)

    visit(scenario.entry, -1)
    return plan


def affected_instances(scenario: Scenario, culprit: str, failure_type: str) -> set[str]:
    """Instances whose telemetry a fault on ``culprit`` may touch."""
    idx = index_topology(scenario.topology)
    ms = idx.microservice_of[culprit]
    hit = {culprit}
    if failure_type in ("cpu_hog", "mem_hog"):
        hit |= idx.co_located[idx.host_of[culprit]]
    if failure_type == "pod_kill":
        hit |= idx.siblings[ms]
    # upstream callers of any directly hit microservice, transitively
    callers = {}
    for a, b in scenario.call_edges:
        callers.setdefault(b, set()).add(a)
    frontier = {idx.microservice_of[v] for v in hit}
    up = set()
    while frontier:
        nxt = set()
        for m in frontier:
            for c in callers.get(m, ()):
                if c not in up:
                    up.add(c)
                    nxt.add(c)
        frontier = nxt
    for m in up:
        hit |= idx.siblings[m]
    return hit


def _case_rng(cfg, case_id):
    return np.random.default_rng([cfg.seed, zlib.crc32(case_id.encode())])


def generate_case(scenario: Scenario, culprit: Optional[str], failure_type: Optional[str],
                  cfg: ScenarioConfig, case_id: str = "case-0000", window_start: float = BASE_EPOCH,
                  rng: np.random.Generator | None = None) -> FailureCase:
    """Generate one failure window. ``culprit=None`` yields a fault-free run."""
    topo = scenario.topology
    if culprit is not None:
        if culprit not in topo:
            raise InvalidCulprit(f"{culprit!r} is not an instance of the topology")
        if failure_type not in cfg.failure_types:
            raise InvalidCulprit(f"failure type {failure_type!r} not enabled in the scenario")
    rng = rng or _case_rng(cfg, case_id)
    fail_rng = np.random.default_rng(rng.integers(2**63))
    idx = index_topology(topo)
    ids = topo.ids
    pos = {v: i for i, v in enumerate(ids)}
    ms_names = _ms_order(topo)
    replicas = {m: sorted(idx.siblings[m]) for m in ms_names}
    inject = window_start + cfg.inject_at
    end = window_start + cfg.window
    ftype = failure_type if culprit is not None else None
    c_host = idx.host_of.get(culprit)
    c_ms = idx.microservice_of.get(culprit)
    neighbours = (idx.co_located[c_host] - {culprit}) if culprit else frozenset()
    siblings = (idx.siblings[c_ms] - {culprit}) if culprit else frozenset()
    mult = cfg.multiplier

    # -- draws (shape fixed regardless of the fault) -----------------------
    sample_t = window_start + np.arange(0.0, cfg.window, cfg.metric_interval)
    noise = rng.normal(0.0, 1.0, (len(ids), len(sample_t), len(METRIC_NAMES)))
    n_req = int(rng.poisson(cfg.request_rate * (cfg.window - 2.0)))
    req_t = np.sort(rng.uniform(window_start, end - 2.0, n_req))
    plan = _call_plan(scenario)
    n_calls = len(plan)
    u_replica = rng.uniform(size=(n_req, n_calls))
    base_dur = rng.lognormal(3.0, 0.3, size=(n_req, n_calls))
    u_status = rng.uniform(size=(n_req, n_calls))
    u_log = rng.uniform(size=(n_req, n_calls))
    log_val = rng.integers(1, 10_000, size=(n_req, n_calls))

    # -- metrics ------------------------------------------------------------
    post_s = sample_t >= inject
    scale = np.ones((len(ids), len(sample_t), len(METRIC_NAMES)))
    if ftype == "cpu_hog":
        scale[pos[culprit], post_s, 0] = mult
        for v in neighbours:
            scale[pos[v], post_s, 0] = 0.6
    elif ftype == "mem_hog":
        scale[pos[culprit], post_s, 1] = mult
        for v in neighbours:
            scale[pos[v], post_s, 1] = 0.8
    elif ftype == "net_delay":
        scale[pos[culprit], post_s, 2] = 1.0 / mult
    elif ftype == "net_loss":
        scale[pos[culprit], post_s, 2] = 0.5
    elif ftype == "pod_kill":
        n_alive = len(siblings)
        if n_alive:
            boost = (n_alive + 1) / n_alive
            for v in siblings:
                scale[pos[v], post_s, 0] = boost
                scale[pos[v], post_s, 2] = boost
    base = np.stack([scenario.baselines[m] for m in METRIC_NAMES], axis=1)[:, None, :]
    spread = np.array([1.0, 1.0, 2.0]) * cfg.noise
    values = base * scale + spread * noise
    keep = np.ones(values.shape[:2], dtype=bool)
    if ftype == "pod_kill":
        keep[pos[culprit], post_s] = False
    vi, ti, mi = np.nonzero(np.broadcast_to(keep[:, :, None], values.shape))
    metrics = pd.DataFrame({
        "timestamp": sample_t[ti],
        "instance": np.asarray(ids, dtype=object)[vi],
        "metric_name": np.asarray(METRIC_NAMES, dtype=object)[mi],
        "value": values[vi, ti, mi],
    })

    # -- traces ---------------------------------------------------------------
    post_r = req_t >= inject
    inst = np.empty((n_req, n_calls), dtype=object)
    for j, (ms, _) in enumerate(plan):
        reps = replicas[ms]
        choice = np.minimum((u_replica[:, j] * len(reps)).astype(int), len(reps) - 1)
        inst[:, j] = np.asarray(reps, dtype=object)[choice]
        if ftype == "pod_kill" and ms == c_ms and siblings:
            alive = [r for r in reps if r != culprit]
            alt = np.minimum((u_replica[:, j] * len(alive)).astype(int), len(alive) - 1)
            inst[post_r, j] = np.asarray(alive, dtype=object)[alt[post_r]]

    factor = np.ones((n_req, n_calls))
    is_c = inst == culprit
    if ftype == "net_delay":
        factor[is_c & post_r[:, None]] = mult
    elif ftype == "cpu_hog":
        factor[is_c & post_r[:, None]] = 2.0
        factor[np.isin(inst, list(neighbours)) & post_r[:, None]] = 1.5
    elif ftype == "mem_hog":
        factor[is_c & post_r[:, None]] = 1.5
        factor[np.isin(inst, list(neighbours)) & post_r[:, None]] = 1.2
    elif ftype == "net_loss":
        factor[is_c & post_r[:, None]] = 1.5
    elif ftype == "pod_kill":
        factor[np.isin(inst, list(siblings)) & post_r[:, None]] = 1.5
    dur = base_dur * factor
    excess = base_dur * (factor - 1.0)
    err = np.zeros((n_req, n_calls), dtype=bool)
    if ftype == "net_loss":
        err = is_c & post_r[:, None] & (u_status < 0.4)
    parents = [p for _, p in plan]
    for j in range(n_calls):
        p, hop = parents[j], 1
        while p >= 0:
            w = cfg.attenuation ** hop
            dur[:, p] += w * excess[:, j]
            p, hop = parents[p], hop + 1
    status = np.where(u_status < 0.005, "500", "200").astype(object)
    # upstream spans of a dropped call fail with a probability shrinking per hop
    for j in range(n_calls):
        if not err[:, j].any():
            continue
        status[err[:, j], j] = "503"
        p, hop = parents[j], 1
        while p >= 0:
            flip = err[:, j] & (u_status[:, p] < cfg.attenuation ** hop)
            status[flip, p] = "500"
            p, hop = parents[p], hop + 1

    alive = ~((inst == culprit) & post_r[:, None]) if ftype == "pod_kill" else np.ones_like(dur, bool)
    r_idx, c_idx = np.nonzero(alive)
    trace_ids = np.array([f"{case_id}-t{r:05d}" for r in range(n_req)], dtype=object)
    span_ids = np.array([f"s{j}" for j in range(n_calls)], dtype=object)
    parent_ids = np.array([f"s{p}" if p >= 0 else "" for p in parents], dtype=object)
    starts = req_t[:, None] + 0.001 * np.arange(n_calls)[None, :]
    traces = pd.DataFrame({
        "trace_id": trace_ids[r_idx],
        "span_id": span_ids[c_idx],
        "parent_span_id": parent_ids[c_idx],
        "instance": inst[r_idx, c_idx],
        "start": starts[r_idx, c_idx],
        "duration_ms": dur[r_idx, c_idx],
        "status_code": status[r_idx, c_idx],
    })

    # -- logs -------------------------------------------------------------------
    rows_t, rows_v, rows_m = [], [], []
    logged = alive & (u_log < 0.3)
    for r, j in zip(*np.nonzero(logged)):
        ms = plan[j][0]
        rows_t.append(starts[r, j] + dur[r, j] / 1000.0 * 0.5)
        rows_v.append(inst[r, j])
        if status[r, j] == "200":
            rows_m.append(f"GET /api/{ms}/items id={log_val[r, j]} completed in {dur[r, j]:.1f} ms")
        elif status[r, j] == "503":
            rows_m.append(f"connection reset by peer 10.0.{pos[inst[r, j]]}.{log_val[r, j] % 250} while serving request")
        else:
            rows_m.append(f"request id={log_val[r, j]} failed with upstream status {status[r, j]}")
    for v in ids:
        # periodic housekeeping line from every live instance
        for t in np.arange(window_start + 5.0, end, 15.0):
            if ftype == "pod_kill" and v == culprit and t >= inject:
                break
            rows_t.append(t)
            rows_v.append(v)
            rows_m.append(f"health check passed for {idx.microservice_of[v]} pool size 8")

    def burst(instance, message_fn, rate):
        n = int(fail_rng.poisson(rate * (end - inject)))
        for t in np.sort(fail_rng.uniform(inject, end, n)):
            rows_t.append(t)
            rows_v.append(instance)
            rows_m.append(message_fn(int(fail_rng.integers(1, 10_000))))

    if ftype == "cpu_hog":
        burst(culprit, lambda k: f"cpu throttled for container quota exceeded by {k % 300} percent", 0.3)
        for v in sorted(neighbours):
            burst(v, lambda k: f"event loop lag detected {k % 900} ms", 0.05)
    elif ftype == "mem_hog":
        burst(culprit, lambda k: f"gc pause of {k % 2000} ms heap usage {k} MB", 0.3)
    elif ftype == "net_delay":
        burst(culprit, lambda k: f"request id={k} exceeded latency budget by {k % 500} ms", 0.3)
    elif ftype == "pod_kill":
        rows_t.append(inject)
        rows_v.append(culprit)
        rows_m.append("received SIGTERM shutting down gracefully")
    logs = pd.DataFrame({"timestamp": np.asarray(rows_t, dtype=float),
                         "instance": np.asarray(rows_v, dtype=object),
                         "message": np.asarray(rows_m, dtype=object)})
    logs = logs.sort_values("timestamp", kind="stable").reset_index(drop=True)

    bundle = TelemetryBundle(topo, metrics, traces, logs)
    return FailureCase(case_id, window_start, end, bundle, culprit=culprit, failure_type=ftype)


def case_plan(scenario: Scenario, cfg: ScenarioConfig):
    """(case_id, culprit, failure_type, window_start) for every generated case."""
    stride = cfg.window + 60.0
    plan = []
    for v in scenario.topology.ids:
        for ftype in cfg.failure_types:
            for _ in range(cfg.cases_per_pair):
                n = len(plan)
                plan.append((f"case-{n:04d}", v, ftype, BASE_EPOCH + n * stride))
    return plan


def generate_dataset(cfg: ScenarioConfig, out_dir=None) -> list[FailureCase]:
    scenario = generate_topology(cfg)
    cases = [generate_case(scenario, v, ftype, cfg, case_id=cid, window_start=ws)
             for cid, v, ftype, ws in case_plan(scenario, cfg)]
    if out_dir is not None:
        write_dataset(cases, cfg, out_dir)
    return cases


def write_dataset(cases: Sequence[FailureCase], cfg: ScenarioConfig, out_dir):
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    topo = cases[0].bundle.topology
    merged = TelemetryBundle(
        topo,
        pd.concat([c.bundle.metrics for c in cases], ignore_index=True),
        pd.concat([c.bundle.traces for c in cases], ignore_index=True),
        pd.concat([c.bundle.logs for c in cases], ignore_index=True),
    )
    write_bundle(merged, d)
    write_cases(cases, d / "cases.csv")
    (d / "scenario.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def zscore_detector(raw_tensors, inject_index: int, floor: float = 0.1):
    """Pick, per case, the instance with the largest post-injection shift.

    ``raw_tensors`` holds un-normalized ``(X_metrics, X_traces, X_logs)``
    triples. Each channel is scored by ``|mean_post - mean_pre| / (std_pre + floor)``
    over snapshots; an instance scores its largest channel. Returns the
    predicted instance id per case.
    """
    picks = []
    for triple in raw_tensors:
        x = np.concatenate([m.data for m in triple], axis=1)
        pre, post = x[:, :, :inject_index], x[:, :, inject_index:]
        z = np.abs(post.mean(-1) - pre.mean(-1)) / (pre.std(-1) + floor)
        best = z.max(axis=1)
        picks.append(triple[0].instance_order[int(np.argmax(best))])
    return picks
