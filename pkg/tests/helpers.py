"""Small builders shared by the test modules."""
from cclh.telemetry import InstanceInfo, SpanRecord, TelemetryBundle, Topology


def make_topology(*triples):
    return Topology(tuple(InstanceInfo(*t) for t in triples))


def make_bundle(triples, metrics=(), spans=(), logs=()):
    return TelemetryBundle.from_records(make_topology(*triples), metrics, spans, logs)


def span(trace, sid, parent, inst, start=0.0, dur=10.0, code="200"):
    return SpanRecord(trace, sid, parent, inst, start, dur, code)


# (criterion number, passed, detail) rows filled by the acceptance suite
ACCEPTANCE: list[tuple[int, bool, str]] = []


def record(n: int, ok: bool, detail: str):
    ACCEPTANCE.append((n, bool(ok), detail))
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
