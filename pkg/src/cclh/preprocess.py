"""Snapshot segmentation and per-modality serialization of failure windows.

Each case becomes three arrays of shape ``(instances, channels, snapshots)``:

* metrics: per-metric mean value inside the snapshot;
* traces: mean span duration in channel 0, then one count per status code;
* logs: one count per mined template, plus a trailing out-of-vocabulary bucket.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .drain import ParserConfig, TemplateSet, mine_log_templates
from .errors import SchemaMismatch, StatsMismatch, WindowTooShort
from .telemetry import FailureCase

MODALITIES = ("metrics", "traces", "logs")
EPS = 1e-8


@dataclass(frozen=True)
class WindowConfig:
    tau: float = 30.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def num_snapshots(self, window_start, window_end) -> int:
        return math.floor((window_end - window_start) / self.tau)


def segment_windows(case: FailureCase, cfg: WindowConfig = WindowConfig()) -> list[tuple[float, float]]:
    length = case.window_end - case.window_start
    if length < cfg.tau:
        raise WindowTooShort(f"case {case.case_id}: window of {length}s is shorter than tau={cfg.tau}s")
    n = cfg.num_snapshots(case.window_start, case.window_end)
    return [(case.window_start + i * cfg.tau, case.window_start + (i + 1) * cfg.tau) for i in range(n)]


@dataclass(frozen=True)
class FeatureSchema:
    metric_names: tuple[str, ...]
    status_codes: tuple[str, ...]
    template_count: int

    @property
    def n_metrics(self) -> int:
        return max(len(self.metric_names), 1)

    @property
    def n_traces(self) -> int:
        return 1 + len(self.status_codes)

    @property
    def n_logs(self) -> int:
        return self.template_count + 1

    @property
    def dims(self) -> dict[str, int]:
        return {"metrics": self.n_metrics, "traces": self.n_traces, "logs": self.n_logs}

    def to_dict(self):
        return {"metric_names": list(self.metric_names), "status_codes": list(self.status_codes),
                "template_count": self.template_count}

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(doc["metric_names"]), tuple(doc["status_codes"]), int(doc["template_count"]))


def fit_schema(train_cases: Sequence[FailureCase], templates: TemplateSet | None = None,
               parser_config: ParserConfig | None = None) -> FeatureSchema:
    if not train_cases:
        raise ValueError("fit_schema needs at least one training case")
    if templates is None:
        templates = mine_case_templates(train_cases, parser_config)
    names, codes = set(), set()
    for case in train_cases:
        names.update(case.bundle.metrics["metric_name"].unique())
        codes.update(case.bundle.traces["status_code"].unique())
    return FeatureSchema(tuple(sorted(names)), tuple(sorted(codes)), len(templates))


def mine_case_templates(cases, parser_config=None) -> TemplateSet:
    return mine_log_templates(
        (m for case in cases for m in case.bundle.logs["message"]), parser_config)


@dataclass
class ModalityTensor:
    modality: str
    data: np.ndarray
    instance_order: tuple[str, ...]

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.data.ndim != 3 or self.data.shape[0] != len(self.instance_order):
            raise SchemaMismatch(f"{self.modality}: bad shape {self.data.shape}")


class _TemplateIndex:
    """Caches message -> channel lookups against a fixed template set."""

    def __init__(self, templates: TemplateSet):
        self._matcher = templates.matcher()
        self._oov = len(templates)
        self._cache: dict[str, int] = {}

    def __call__(self, message: str) -> int:
        hit = self._cache.get(message)
        if hit is None:
            idx = self._matcher.match(message)
            hit = self._cache[message] = self._oov if idx is None else idx
        return hit


def _snapshot_ids(ts, start, tau, n):
    idx = np.floor((np.asarray(ts, dtype=float) - start) / tau).astype(np.int64)
    return idx, (idx >= 0) & (idx < n)


def serialize_case(case: FailureCase, schema: FeatureSchema, templates: TemplateSet,
                   cfg: WindowConfig = WindowConfig(), *, template_index=None,
                   instance_order: Sequence[str] | None = None):
    """Return ``(X_metrics, X_traces, X_logs)`` as :class:`ModalityTensor`."""
    if len(templates) != schema.template_count:
        raise SchemaMismatch(
            f"template set has {len(templates)} templates, schema expects {schema.template_count}")
    bounds = segment_windows(case, cfg)
    n_t = len(bounds)
    order = tuple(instance_order or case.bundle.topology.ids)
    pos = {v: i for i, v in enumerate(order)}
    n_v = len(order)
    start, tau = case.window_start, cfg.tau
    b = case.bundle

    # metrics: mean per (instance, metric, snapshot)
    xm = np.zeros((n_v, schema.n_metrics, n_t))
    if len(b.metrics) and schema.metric_names:
        ch_of = {m: i for i, m in enumerate(schema.metric_names)}
        ch = b.metrics["metric_name"].map(ch_of).to_numpy(dtype=float)
        vi = b.metrics["instance"].map(pos).to_numpy(dtype=float)
        t, ok = _snapshot_ids(b.metrics["timestamp"], start, tau, n_t)
        ok &= ~np.isnan(ch) & ~np.isnan(vi)
        sums = np.zeros_like(xm)
        counts = np.zeros_like(xm)
        key = (vi[ok].astype(int), ch[ok].astype(int), t[ok])
        np.add.at(sums, key, b.metrics["value"].to_numpy(dtype=float)[ok])
        np.add.at(counts, key, 1.0)
        np.divide(sums, counts, out=xm, where=counts > 0)

    # traces: mean duration + status-code counts
    xt = np.zeros((n_v, schema.n_traces, n_t))
    if len(b.traces):
        vi = b.traces["instance"].map(pos).to_numpy(dtype=float)
        t, ok = _snapshot_ids(b.traces["start"], start, tau, n_t)
        ok &= ~np.isnan(vi)
        v_ok, t_ok = vi[ok].astype(int), t[ok]
        dur_sum = np.zeros((n_v, n_t))
        dur_cnt = np.zeros((n_v, n_t))
        np.add.at(dur_sum, (v_ok, t_ok), b.traces["duration_ms"].to_numpy(dtype=float)[ok])
        np.add.at(dur_cnt, (v_ok, t_ok), 1.0)
        np.divide(dur_sum, dur_cnt, out=xt[:, 0, :], where=dur_cnt > 0)
        code_of = {c: i + 1 for i, c in enumerate(schema.status_codes)}
        ch = b.traces["status_code"].map(code_of).to_numpy(dtype=float)[ok]
        known = ~np.isnan(ch)
        np.add.at(xt, (v_ok[known], ch[known].astype(int), t_ok[known]), 1.0)

    # logs: template frequency, unmatched lines go to the last channel
    xl = np.zeros((n_v, schema.n_logs, n_t))
    if len(b.logs):
        lookup = template_index or _TemplateIndex(templates)
        vi = b.logs["instance"].map(pos).to_numpy(dtype=float)
        t, ok = _snapshot_ids(b.logs["timestamp"], start, tau, n_t)
        ok &= ~np.isnan(vi)
        msgs = b.logs["message"].to_numpy()[ok]
        ch = np.fromiter((lookup(m) for m in msgs), dtype=np.int64, count=len(msgs))
        np.add.at(xl, (vi[ok].astype(int), ch, t[ok]), 1.0)

    return tuple(ModalityTensor(m, x, order) for m, x in zip(MODALITIES, (xm, xt, xl)))


@dataclass
class NormStats:
    mean: dict[str, np.ndarray] = field(default_factory=dict)
    std: dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self):
        return {m: [{"mean": float(a), "std": float(s)} for a, s in zip(self.mean[m], self.std[m])]
                for m in MODALITIES}

    @classmethod
    def from_dict(cls, doc):
        return cls(
            mean={m: np.array([c["mean"] for c in doc[m]], dtype=float) for m in MODALITIES},
            std={m: np.array([c["std"] for c in doc[m]], dtype=float) for m in MODALITIES},
        )


def normalize(tensors, stats: NormStats | None = None):
    """Per-channel z-scoring of a list of ``(X_metrics, X_traces, X_logs)`` triples.

    Moments are pooled over instances, snapshots and cases. Without ``stats``
    they are fitted on ``tensors`` and returned; otherwise ``stats`` is applied.
    """
    tensors = list(tensors)
    if stats is None:
        stats = NormStats()
        for k, m in enumerate(MODALITIES):
            pooled = np.concatenate(
                [t[k].data.transpose(1, 0, 2).reshape(t[k].data.shape[1], -1) for t in tensors], axis=1)
            stats.mean[m] = pooled.mean(axis=1)
            stats.std[m] = pooled.std(axis=1)
    out = []
    for triple in tensors:
        new = []
        for k, m in enumerate(MODALITIES):
            x = triple[k].data
            if m not in stats.mean or len(stats.mean[m]) != x.shape[1]:
                raise StatsMismatch(f"{m}: data has {x.shape[1]} channels, stats have "
                                    f"{len(stats.mean.get(m, ()))}")
            mu = stats.mean[m][None, :, None]
            sd = np.maximum(stats.std[m], EPS)[None, :, None]
            new.append(ModalityTensor(m, (x - mu) / sd, triple[k].instance_order))
        out.append(tuple(new))
    return out, stats


@dataclass
class Preprocessor:
    """Fitted feature pipeline: templates, schema, window config and norm stats."""

    schema: FeatureSchema
    templates: TemplateSet
    window: WindowConfig
    stats: NormStats | None = None

    @classmethod
    def fit(cls, train_cases, window: WindowConfig = WindowConfig(),
            parser_config: ParserConfig | None = None) -> "Preprocessor":
        templates = mine_case_templates(train_cases, parser_config)
        schema = fit_schema(train_cases, templates)
        pre = cls(schema, templates, window)
        _, pre.stats = normalize(pre.serialize_raw(train_cases))
        return pre

    def serialize_raw(self, cases):
        index = _TemplateIndex(self.templates)
        return [serialize_case(c, self.schema, self.templates, self.window, template_index=index)
                for c in cases]

    def transform(self, cases):
        out, _ = normalize(self.serialize_raw(cases), self.stats)
        return out

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "templates.json").write_text(json.dumps(self.templates.to_dict(), indent=1))
        (d / "schema.json").write_text(json.dumps(
            {**self.schema.to_dict(), "tau": self.window.tau}, indent=1))
        (d / "norm_stats.json").write_text(json.dumps(self.stats.to_dict(), indent=1))

    @classmethod
    def load(cls, directory) -> "Preprocessor":
        d = Path(directory)
        schema_doc = json.loads((d / "schema.json").read_text())
        templates = TemplateSet.from_dict(json.loads((d / "templates.json").read_text()))
        stats = NormStats.from_dict(json.loads((d / "norm_stats.json").read_text()))
        schema = FeatureSchema.from_dict(schema_doc)
        if schema.template_count != len(templates):
            raise SchemaMismatch("schema.json and templates.json disagree on template count")
        for m, n in schema.dims.items():
            if len(stats.mean[m]) != n:
                raise StatsMismatch(f"norm_stats.json: {m} has {len(stats.mean[m])} channels, expected {n}")
        return cls(schema, templates, WindowConfig(schema_doc.get("tau", 30.0)), stats)
