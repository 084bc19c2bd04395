"""Heterogeneous instance hypergraph and the typed hyperedge attention layer.

Hyperedges come in four types:

* ``call``: a callee plus every instance that called it in the case's traces;
* ``deployment``: all instances sharing a host (only when there are >= 2);
* ``load_balancing``: all replicas of one microservice (only when >= 2);
* ``self``: one singleton per instance, so no vertex is left without edges.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import EmptyEdge, IsolatedVertex, ShapeMismatch
from .telemetry import TelemetryBundle, TopologyIndex, index_topology

EDGE_TYPES = ("call", "deployment", "load_balancing", "self")
TYPE_ID = {t: i for i, t in enumerate(EDGE_TYPES)}


@dataclass(frozen=True)
class Hyperedge:
    id: int
    type: str
    members: frozenset

    def __post_init__(self):
        if self.type not in TYPE_ID:
            raise ValueError(f"unknown hyperedge type {self.type!r}")
        if not self.members:
            raise EmptyEdge(f"hyperedge {self.id} has no members")


@dataclass
class Hypergraph:
    vertices: tuple[str, ...]
    edges: list[Hyperedge]
    incidence: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = tuple(self.vertices)
        known = set(self.vertices)
        inc = {v: [] for v in self.vertices}
        for e in self.edges:
            if not e.members <= known:
                raise ValueError(f"hyperedge {e.id} references unknown vertices {sorted(e.members - known)}")
            for v in sorted(e.members):
                inc[v].append(e.id)
        self.incidence = inc

    def edges_of_type(self, kind: str) -> set[frozenset]:
        return {e.members for e in self.edges if e.type == kind}

    def without(self, *kinds: str) -> "Hypergraph":
        """Copy with the given edge types removed (self edges always stay)."""
        kept = [e for e in self.edges if e.type not in kinds or e.type == "self"]
        return Hypergraph(self.vertices, [Hyperedge(i, e.type, e.members) for i, e in enumerate(kept)])

    def arrays(self, order: Sequence[str] | None = None):
        """Incidence as index arrays ``(vertex_idx, edge_idx, edge_type)`` against ``order``."""
        pos = {v: i for i, v in enumerate(order or self.vertices)}
        vi, ei = [], []
        for e in self.edges:
            for v in sorted(e.members):
                vi.append(pos[v])
                ei.append(e.id)
        types = [TYPE_ID[e.type] for e in self.edges]
        return np.array(vi, dtype=np.int64), np.array(ei, dtype=np.int64), np.array(types, dtype=np.int64)

    def to_dict(self):
        return {"edges": [{"type": e.type, "members": sorted(e.members)} for e in self.edges]}

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def call_relations(bundle: TelemetryBundle) -> dict[str, set[str]]:
    """callee -> set of caller instances, from parent/child span pairs."""
    spans = bundle.traces
    if len(spans) == 0:
        return {}
    owner = dict(zip(zip(spans["trace_id"], spans["span_id"]), spans["instance"]))
    callers = defaultdict(set)
    for trace, parent, callee in zip(spans["trace_id"], spans["parent_span_id"], spans["instance"]):
        if not parent:
            continue
        caller = owner.get((trace, parent))
        # unknown parents and self-calls carry no inter-instance relation
        if caller is None or caller == callee:
            continue
        callers[callee].add(caller)
    return callers


def build_hypergraph(bundle: TelemetryBundle, index: TopologyIndex | None = None) -> Hypergraph:
    index = index or index_topology(bundle.topology)
    vertices = tuple(bundle.topology.ids)
    edges: list[Hyperedge] = []
    seen: dict[str, set] = defaultdict(set)

    def emit(kind, members):
        members = frozenset(members)
        if members in seen[kind]:
            return
        seen[kind].add(members)
        edges.append(Hyperedge(len(edges), kind, members))

    for callee, callers in sorted(call_relations(bundle).items()):
        emit("call", {callee} | callers)
    for host in sorted(index.co_located):
        if len(index.co_located[host]) >= 2:
            emit("deployment", index.co_located[host])
    for ms in sorted(index.siblings):
        if len(index.siblings[ms]) >= 2:
            emit("load_balancing", index.siblings[ms])
    for v in vertices:
        emit("self", {v})
    return Hypergraph(vertices, edges)


def hyperedge_embed(H, members_idx):
    """Mean of member rows of ``H``; ``members_idx`` indexes rows."""
    members_idx = list(members_idx)
    if not members_idx:
        raise EmptyEdge("cannot embed an empty hyperedge")
    return H[members_idx].mean(dim=0)


def segment_softmax(scores, segments, n_segments):
    """Softmax of ``scores`` within groups given by ``segments``."""
    top = torch.full((n_segments,), float("-inf"), dtype=scores.dtype, device=scores.device)
    top = top.scatter_reduce(0, segments, scores.detach(), reduce="amax", include_self=True)
    ex = torch.exp(scores - top[segments])
    denom = torch.zeros(n_segments, dtype=scores.dtype, device=scores.device).index_add(0, segments, ex)
    return ex / denom[segments]


@dataclass
class GraphArrays:
    """Incidence of one (possibly block-diagonal batched) hypergraph as tensors."""

    vertex: torch.Tensor
    edge: torch.Tensor
    edge_type: torch.Tensor
    n_vertices: int

    @property
    def n_edges(self) -> int:
        return int(self.edge_type.shape[0])

    @classmethod
    def from_hypergraph(cls, graph: Hypergraph, order=None) -> "GraphArrays":
        v, e, t = graph.arrays(order)
        return cls(torch.from_numpy(v), torch.from_numpy(e), torch.from_numpy(t), len(order or graph.vertices))

    @classmethod
    def concat(cls, parts: Sequence["GraphArrays"]) -> "GraphArrays":
        vs, es, ts = [], [], []
        v_off = e_off = 0
        for p in parts:
            vs.append(p.vertex + v_off)
            es.append(p.edge + e_off)
            ts.append(p.edge_type)
            v_off += p.n_vertices
            e_off += p.n_edges
        return cls(torch.cat(vs), torch.cat(es), torch.cat(ts), v_off)


class UniGATHE(nn.Module):
    """One hyperedge-attention layer with a separate attention vector per edge type."""

    def __init__(self, in_dim: int, out_dim: int, n_types: int = len(EDGE_TYPES),
                 negative_slope: float = 0.2):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.negative_slope = negative_slope
        self.linear = nn.Linear(in_dim, out_dim, bias=False)
        self.attention = nn.Parameter(torch.empty(n_types, 2 * out_dim))
        nn.init.xavier_uniform_(self.linear.weight)
        nn.init.xavier_uniform_(self.attention)

    def forward(self, H, g: GraphArrays, return_attention: bool = False):
        if H.ndim != 2 or H.shape[1] != self.in_dim or H.shape[0] != g.n_vertices:
            raise ShapeMismatch(f"expected ({g.n_vertices}, {self.in_dim}), got {tuple(H.shape)}")
        degree = torch.bincount(g.vertex, minlength=g.n_vertices)
        if (degree == 0).any():
            raise IsolatedVertex(f"{int((degree == 0).sum())} vertex(es) have no incident hyperedge")
        size = torch.bincount(g.edge, minlength=g.n_edges).to(H.dtype)
        if (size == 0).any():
            raise EmptyEdge("hyperedge without members")
        f = torch.zeros(g.n_edges, H.shape[1], dtype=H.dtype).index_add(0, g.edge, H[g.vertex])
        f = f / size[:, None]
        wh = self.linear(H)
        wf = self.linear(f)
        a = self.attention[g.edge_type[g.edge]]
        d = self.out_dim
        logits = (a[:, :d] * wh[g.vertex]).sum(-1) + (a[:, d:] * wf[g.edge]).sum(-1)
        logits = F.leaky_relu(logits, self.negative_slope)
        weight = segment_softmax(logits, g.vertex, g.n_vertices)
        out = torch.zeros(g.n_vertices, d, dtype=H.dtype).index_add(0, g.vertex, weight[:, None] * wf[g.edge])
        if return_attention:
            return out, weight
        return out


def unigat_he_layer(H, graph: Hypergraph | GraphArrays, layer: UniGATHE, return_attention=False):
    g = graph if isinstance(graph, GraphArrays) else GraphArrays.from_hypergraph(graph)
    return layer(H, g, return_attention=return_attention)


class HypergraphEncoder(nn.Module):
    """Stacked UniGAT-HE layers, ELU between layers and none after the last."""

    def __init__(self, dim: int, num_layers: int = 2):
        super().__init__()
        self.layers = nn.ModuleList(UniGATHE(dim, dim) for _ in range(num_layers))

    def forward(self, H, g: GraphArrays):
        for i, layer in enumerate(self.layers):
            H = layer(H, g)
            if i < len(self.layers) - 1:
                H = F.elu(H)
        return H
