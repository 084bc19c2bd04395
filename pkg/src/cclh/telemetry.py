"""Data model for topology, raw telemetry and labeled failure cases.

Record collections are held as pandas DataFrames (one row per record) so a
dataset-wide bundle with millions of rows stays cheap to slice by time. The
record dataclasses below are the row-level view and are accepted by
:meth:`TelemetryBundle.from_records`.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from .errors import EmptyTopology, MalformedFile, UnknownInstance

METRIC_COLUMNS = ["timestamp", "instance", "metric_name", "value"]
TRACE_COLUMNS = ["trace_id", "span_id", "parent_span_id", "instance", "start", "duration_ms", "status_code"]
LOG_COLUMNS = ["timestamp", "instance", "message"]
CASE_COLUMNS = ["case_id", "window_start", "window_end", "culprit", "failure_type"]


@dataclass(frozen=True)
class InstanceInfo:
    id: str
    microservice: str
    host: str

    def __post_init__(self):
        if not (self.id and self.microservice and self.host):
            raise MalformedFile(f"instance fields must be nonempty: {self!r}")


@dataclass(frozen=True)
class Topology:
    instances: tuple[InstanceInfo, ...]

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if not self.instances:
            raise EmptyTopology("topology has no instances")
        ids = [i.id for i in self.instances]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise MalformedFile(f"duplicate instance ids: {dup}")
        object.__setattr__(self, "_id_set", frozenset(ids))

    @property
    def microservices(self) -> set[str]:
        return {i.microservice for i in self.instances}

    @property
    def hosts(self) -> set[str]:
        return {i.host for i in self.instances}

    @property
    def ids(self) -> list[str]:
        """Instance ids in canonical (lexicographic) order."""
        return sorted(i.id for i in self.instances)

    def __contains__(self, instance_id) -> bool:
        return instance_id in self._id_set


@dataclass(frozen=True)
class TopologyIndex:
    host_of: dict[str, str]
    microservice_of: dict[str, str]
    co_located: dict[str, frozenset[str]]
    siblings: dict[str, frozenset[str]]


def index_topology(topology: Topology) -> TopologyIndex:
    host_of = {i.id: i.host for i in topology.instances}
    ms_of = {i.id: i.microservice for i in topology.instances}
    by_host = defaultdict(set)
    by_ms = defaultdict(set)
    for inst in topology.instances:
        by_host[inst.host].add(inst.id)
        by_ms[inst.microservice].add(inst.id)
    return TopologyIndex(
        host_of=host_of,
        microservice_of=ms_of,
        co_located={h: frozenset(v) for h, v in by_host.items()},
        siblings={m: frozenset(v) for m, v in by_ms.items()},
    )


@dataclass(frozen=True)
class MetricRecord:
    timestamp: float
    instance: str
    metric_name: str
    value: float


@dataclass(frozen=True)
class SpanRecord:
    trace_id: str
    span_id: str
    parent_span_id: Optional[str]
    instance: str
    start: float
    duration: float
    status_code: str


@dataclass(frozen=True)
class LogRecord:
    timestamp: float
    instance: str
    message: str


def _empty_frames():
    metrics = pd.DataFrame({
        "timestamp": pd.Series(dtype="float64"),
        "instance": pd.Series(dtype="object"),
        "metric_name": pd.Series(dtype="object"),
        "value": pd.Series(dtype="float64"),
    })
    traces = pd.DataFrame({
        "trace_id": pd.Series(dtype="object"),
        "span_id": pd.Series(dtype="object"),
        "parent_span_id": pd.Series(dtype="object"),
        "instance": pd.Series(dtype="object"),
        "start": pd.Series(dtype="float64"),
        "duration_ms": pd.Series(dtype="float64"),
        "status_code": pd.Series(dtype="object"),
    })
    logs = pd.DataFrame({
        "timestamp": pd.Series(dtype="float64"),
        "instance": pd.Series(dtype="object"),
        "message": pd.Series(dtype="object"),
    })
    return metrics, traces, logs


@dataclass
class TelemetryBundle:
    topology: Topology
    metrics: pd.DataFrame = None
    traces: pd.DataFrame = None
    logs: pd.DataFrame = None

    def __post_init__(self):
        em, et, el = _empty_frames()
        self.metrics = _coerce(self.metrics, em, METRIC_COLUMNS)
        self.traces = _coerce(self.traces, et, TRACE_COLUMNS)
        self.logs = _coerce(self.logs, el, LOG_COLUMNS)
        self.validate()

    @classmethod
    def from_records(cls, topology, metrics: Iterable[MetricRecord] = (),
                     traces: Iterable[SpanRecord] = (), logs: Iterable[LogRecord] = ()):
        m = pd.DataFrame([(r.timestamp, r.instance, r.metric_name, r.value) for r in metrics],
                         columns=METRIC_COLUMNS)
        t = pd.DataFrame([(r.trace_id, r.span_id, r.parent_span_id, r.instance, r.start,
                           r.duration, r.status_code) for r in traces], columns=TRACE_COLUMNS)
        lg = pd.DataFrame([(r.timestamp, r.instance, r.message) for r in logs], columns=LOG_COLUMNS)
        return cls(topology, m, t, lg)

    def validate(self):
        known = set(self.topology.ids)
        unknown = []
        for frame in (self.metrics, self.traces, self.logs):
            bad = ~frame["instance"].isin(known)
            unknown.extend(frame.loc[bad, "instance"].tolist())
        if unknown:
            raise UnknownInstance(unknown)
        for frame, col in ((self.metrics, "timestamp"), (self.metrics, "value"),
                           (self.traces, "start"), (self.traces, "duration_ms"),
                           (self.logs, "timestamp")):
            if len(frame) and not np.isfinite(frame[col].to_numpy(dtype=float)).all():
                raise MalformedFile(f"non-finite values in column {col!r}")
        if len(self.traces) and (self.traces["duration_ms"] < 0).any():
            raise MalformedFile("negative span duration")
        if len(self.traces) and self.traces.duplicated(["trace_id", "span_id"]).any():
            raise MalformedFile("span_id repeated within a trace")
        if len(self.logs) and (self.logs["message"].str.len() == 0).any():
            raise MalformedFile("empty log message")

    def window(self, start: float, end: float) -> "TelemetryBundle":
        """Records with timestamps (span start for traces) in ``[start, end)``."""
        if getattr(self, "_sorted", None) is None:
            self._sorted = [
                (f.sort_values(col, kind="stable").reset_index(drop=True), col)
                for f, col in ((self.metrics, "timestamp"), (self.traces, "start"), (self.logs, "timestamp"))
            ]
            self._sorted = [(f, f[col].to_numpy()) for f, col in self._sorted]
        parts = []
        for frame, ts in self._sorted:
            lo, hi = np.searchsorted(ts, [start, end], side="left")
            parts.append(frame.iloc[lo:hi].reset_index(drop=True))
        sub = object.__new__(TelemetryBundle)
        sub.topology = self.topology
        sub.metrics, sub.traces, sub.logs = parts
        sub._sorted = None
        return sub

    def metric_records(self):
        return [MetricRecord(float(r.timestamp), r.instance, r.metric_name, float(r.value))
                for r in self.metrics.itertuples(index=False)]

    def span_records(self):
        return [SpanRecord(r.trace_id, r.span_id, r.parent_span_id if r.parent_span_id else None,
                           r.instance, float(r.start), float(r.duration_ms), r.status_code)
                for r in self.traces.itertuples(index=False)]

    def log_records(self):
        return [LogRecord(float(r.timestamp), r.instance, r.message)
                for r in self.logs.itertuples(index=False)]


def _coerce(frame, empty, columns):
    if frame is None or len(frame) == 0:
        return empty
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise MalformedFile(f"missing columns {missing}")
    out = frame[columns].copy()
    for c in columns:
        out[c] = out[c].astype(empty[c].dtype)
    if "parent_span_id" in out:
        out["parent_span_id"] = out["parent_span_id"].where(out["parent_span_id"].notna(), "")
        out["parent_span_id"] = out["parent_span_id"].astype(str)
    return out.reset_index(drop=True)


@dataclass
class FailureCase:
    case_id: str
    window_start: float
    window_end: float
    bundle: TelemetryBundle = field(repr=False)
    culprit: Optional[str] = None
    failure_type: Optional[str] = None

    def __post_init__(self):
        if not self.window_end > self.window_start:
            raise MalformedFile(f"case {self.case_id}: window_end must exceed window_start")
        if self.culprit is not None and self.culprit not in self.bundle.topology:
            raise UnknownInstance([self.culprit])

    @property
    def labeled(self) -> bool:
        return self.culprit is not None and self.failure_type is not None


# ---------------------------------------------------------------------------
# file IO


def read_deployment(path) -> Topology:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "instances" not in doc:
        raise EmptyTopology(f"{path}: no instances declared")
    try:
        instances = [InstanceInfo(str(i["id"]), str(i["microservice"]), str(i["host"]))
                     for i in doc["instances"]]
    except (KeyError, TypeError) as exc:
        raise MalformedFile(f"{path}: bad instance entry ({exc})") from exc
    return Topology(tuple(instances))


def _read_csv(path, columns, dtypes):
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            header = next(csv.reader(fh), None)
    except OSError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if header is None and not columns:
        return pd.DataFrame()
    if header != columns:
        raise MalformedFile(f"{path}: expected header {','.join(columns)}, got {header}")
    try:
        frame = pd.read_csv(path, dtype=dtypes, keep_default_na=False, na_values=[],
                            float_precision="round_trip")
    except (ValueError, pd.errors.ParserError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    return frame


def load_bundle(metrics_path, traces_path, logs_path, deployment_path) -> TelemetryBundle:
    topology = read_deployment(deployment_path)
    metrics = _read_csv(metrics_path, METRIC_COLUMNS,
                        {"timestamp": float, "instance": str, "metric_name": str, "value": float})
    traces = _read_csv(traces_path, TRACE_COLUMNS,
                       {"trace_id": str, "span_id": str, "parent_span_id": str, "instance": str,
                        "start": float, "duration_ms": float, "status_code": str})
    logs = _read_csv(logs_path, LOG_COLUMNS, {"timestamp": float, "instance": str, "message": str})
    return TelemetryBundle(topology, metrics, traces, logs)


def load_cases(cases_path, bundle: TelemetryBundle) -> list[FailureCase]:
    frame = _read_csv(cases_path, CASE_COLUMNS,
                      {"case_id": str, "window_start": float, "window_end": float,
                       "culprit": str, "failure_type": str})
    cases = []
    for row in frame.itertuples(index=False):
        if not (math.isfinite(row.window_start) and math.isfinite(row.window_end)):
            raise MalformedFile(f"case {row.case_id}: non-finite window")
        cases.append(FailureCase(
            case_id=row.case_id,
            window_start=row.window_start,
            window_end=row.window_end,
            bundle=bundle.window(row.window_start, row.window_end),
            culprit=row.culprit or None,
            failure_type=row.failure_type or None,
        ))
    return cases


def load_dataset(data_dir) -> tuple[TelemetryBundle, list[FailureCase]]:
    """Load the standard file set from ``data_dir`` and cut it into cases."""
    d = Path(data_dir)
    bundle = load_bundle(d / "metrics.csv", d / "traces.csv", d / "logs.csv", d / "deployment.json")
    return bundle, load_cases(d / "cases.csv", bundle)


def write_deployment(topology: Topology, path):
    doc = {"instances": [{"id": i.id, "microservice": i.microservice, "host": i.host}
                         for i in topology.instances]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def write_bundle(bundle: TelemetryBundle, out_dir):
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_deployment(bundle.topology, d / "deployment.json")
    # repr-exact floats so a reload is lossless
    bundle.metrics.to_csv(d / "metrics.csv", index=False, float_format="%.17g")
    bundle.traces.to_csv(d / "traces.csv", index=False, float_format="%.17g")
    bundle.logs.to_csv(d / "logs.csv", index=False, float_format="%.17g", quoting=csv.QUOTE_MINIMAL)


def write_cases(cases: Iterable[FailureCase], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CASE_COLUMNS)
        for c in cases:
            w.writerow([c.case_id, repr(float(c.window_start)), repr(float(c.window_end)),
                        c.culprit or "", c.failure_type or ""])
