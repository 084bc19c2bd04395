"""Scorer and classifier heads, cascaded training and sequential diagnosis.

Training runs in two phases. Phase 1 optimizes only the localization loss
(softmax cross-entropy over each case's instance scores) while the type
classifier stays frozen. After every epoch the top-1 hit ratio on the
training cases is measured; once it exceeds ``theta`` the trigger latches
and phase 2 adds the classifier's cross-entropy to the objective for the
rest of training.
"""
from __future__ import annotations

import json
import logging
import math
import random
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoder import GRUEncoder, ModalityFusion
from .errors import (
    EmptyCase,
    IncompatibleArtifact,
    LabelMissing,
    SchemaMismatch,
    ShapeMismatch,
    TriggerNeverFired,
)
from .hypergraph import GraphArrays, HypergraphEncoder, build_hypergraph
from .preprocess import MODALITIES, Preprocessor, WindowConfig
from .telemetry import FailureCase

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_COLUMNS = ["epoch", "loss_total", "loss_rcl", "loss_fti", "hr1_train", "phase", "seconds"]


@dataclass
class ModelConfig:
    dims: dict
    n_types: int
    hidden: int = 256
    gru_layers: int = 3
    hg_layers: int = 2
    negative_slope: float = 0.2


@dataclass
class TrainConfig:
    theta: float = 0.6
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-4
    teacher_forcing: bool = True
    seed: int = 0
    batch_size: int = 32
    hidden: int = 256
    gru_layers: int = 3
    hg_layers: int = 2

    def __post_init__(self):
        # theta above 1 is accepted and simply never fires
        if self.theta < 0:
            raise ValueError("theta must be >= 0")


def _mlp(d_in, d_hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


class CCLHNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.encoders = nn.ModuleDict(
            {m: GRUEncoder(cfg.dims[m], d, cfg.gru_layers) for m in MODALITIES})
        self.fusion = ModalityFusion(d)
        self.hypergraph = HypergraphEncoder(d, cfg.hg_layers)
        for layer in self.hypergraph.layers:
            layer.negative_slope = cfg.negative_slope
        self.scorer = _mlp(d, d, 1)
        self.classifier = _mlp(d, d, cfg.n_types)
        # an untrained classifier is uninformative: uniform type probabilities
        nn.init.zeros_(self.classifier[2].weight)
        nn.init.zeros_(self.classifier[2].bias)

    def embed(self, batch: "Batch"):
        """Instance embeddings for every case in the batch, rows in case order."""
        parts = [None] * len(batch.cases)
        for t_len, members in batch.groups().items():
            states = []
            for m in MODALITIES:
                x = torch.cat([batch.cases[i].x[m] for i in members])
                states.append(self.encoders[m](x))
            fused, _ = self.fusion(*states)
            off = 0
            for i in members:
                n = batch.cases[i].n_instances
                parts[i] = fused[off:off + n]
                off += n
        return self.hypergraph(torch.cat(parts), batch.graph)

    def score(self, H):
        return self.scorer(H).squeeze(-1)


def score_instances(H, scorer: nn.Module, instance_order: Sequence[str]):
    """Suspect score per row plus the ranking (descending score, ties by id)."""
    if H.ndim != 2:
        raise ShapeMismatch(f"expected a (V, d) matrix, got {tuple(H.shape)}")
    if H.shape[0] != len(instance_order):
        raise ShapeMismatch("instance_order length differs from the number of rows")
    scores = scorer(H).squeeze(-1)
    return scores, rank(scores.detach().cpu().numpy(), instance_order)


def rank(scores, instance_order):
    ids = list(instance_order)
    by_id = sorted(range(len(ids)), key=ids.__getitem__)
    s = np.asarray(scores)[by_id]
    order = np.argsort(-s, kind="stable")
    return [ids[by_id[i]] for i in order]


def segment_log_softmax(scores, segments, n_segments):
    top = torch.full((n_segments,), float("-inf"), dtype=scores.dtype)
    top = top.scatter_reduce(0, segments, scores.detach(), reduce="amax", include_self=True)
    shifted = scores - top[segments]
    denom = torch.zeros(n_segments, dtype=scores.dtype).index_add(0, segments, torch.exp(shifted))
    return shifted - torch.log(denom)[segments]


def rcl_loss(scores, culprits, segments=None):
    """Mean over cases of ``-log softmax(scores)[culprit]``.

    ``scores`` is either a list of per-case 1-D tensors with ``culprits`` as
    positions within each, or one flat tensor with ``segments`` giving the case
    of every row and ``culprits`` as flat row indices.
    """
    if culprits is None or any(c is None for c in culprits):
        raise LabelMissing("every case needs a culprit label")
    if segments is None:
        offsets = np.cumsum([0] + [len(s) for s in scores[:-1]])
        for s, c in zip(scores, culprits):
            if not 0 <= c < len(s):
                raise LabelMissing(f"culprit position {c} outside the case's {len(s)} instances")
        segments = torch.cat([torch.full((len(s),), i, dtype=torch.long) for i, s in enumerate(scores)])
        culprits = [int(o + c) for o, c in zip(offsets, culprits)]
        scores = torch.cat(list(scores))
    n = int(segments.max()) + 1
    logp = segment_log_softmax(scores, segments, n)
    return -logp[torch.as_tensor(culprits, dtype=torch.long)].mean()


def classify_failure(h_culprit, classifier: nn.Module):
    """Failure-type probabilities for one embedding (or a batch of them)."""
    return torch.softmax(classifier(h_culprit), dim=-1)


def fti_loss(type_logits, type_labels):
    return F.cross_entropy(type_logits, torch.as_tensor(type_labels, dtype=torch.long))


def total_loss(l_rcl, type_logits, type_labels):
    return l_rcl + fti_loss(type_logits, type_labels)


# ---------------------------------------------------------------------------
# batching


@dataclass
class PreparedCase:
    case_id: str
    instance_order: tuple[str, ...]
    x: dict
    graph: GraphArrays
    culprit: Optional[int] = None
    ftype: Optional[int] = None

    @property
    def n_instances(self) -> int:
        return len(self.instance_order)

    @property
    def n_snapshots(self) -> int:
        return int(self.x["metrics"].shape[2])


@dataclass
class Batch:
    cases: list[PreparedCase]
    graph: GraphArrays = None
    segments: torch.Tensor = None
    offsets: np.ndarray = None

    def __post_init__(self):
        self.graph = GraphArrays.concat([c.graph for c in self.cases])
        sizes = [c.n_instances for c in self.cases]
        self.offsets = np.cumsum([0] + sizes[:-1])
        self.segments = torch.cat([torch.full((n,), i, dtype=torch.long) for i, n in enumerate(sizes)])

    def groups(self):
        out = {}
        for i, c in enumerate(self.cases):
            out.setdefault(c.n_snapshots, []).append(i)
        return out

    def culprit_rows(self):
        return [int(o + c.culprit) for o, c in zip(self.offsets, self.cases)]

    def type_labels(self):
        return [c.ftype for c in self.cases]


def prepare_cases(cases: Sequence[FailureCase], pre: Preprocessor, type_vocab=None,
                  dtype=torch.float32) -> list[PreparedCase]:
    tensors = pre.transform(cases)
    type_pos = {t: i for i, t in enumerate(type_vocab or ())}
    out = []
    for case, triple in zip(cases, tensors):
        order = triple[0].instance_order
        if not order:
            raise EmptyCase(f"case {case.case_id} has no instances")
        graph = build_hypergraph(case.bundle)
        culprit = order.index(case.culprit) if case.culprit is not None else None
        ftype = type_pos.get(case.failure_type) if case.failure_type is not None else None
        x = {m.modality: torch.as_tensor(m.data, dtype=dtype) for m in triple}
        out.append(PreparedCase(case.case_id, order, x, GraphArrays.from_hypergraph(graph, order),
                                culprit, ftype))
    return out


# ---------------------------------------------------------------------------
# results and training log


@dataclass
class DiagnosisResult:
    case_id: str
    scores: dict[str, float]
    ranking: list[str]
    type_probs: dict[str, float]
    elapsed_ms: float = 0.0

    @property
    def culprit(self) -> str:
        return self.ranking[0]

    @property
    def failure_type(self) -> str:
        # first maximal entry, vocabulary order
        return max(self.type_probs, key=lambda k: (self.type_probs[k], -list(self.type_probs).index(k)))

    def to_dict(self):
        return {"case_id": self.case_id, "culprit": self.culprit, "ranking": self.ranking, "scores": self.scores,
                "failure_type": self.failure_type, "type_probs": self.type_probs,
                "elapsed_ms": self.elapsed_ms}

    def same_as(self, other: "DiagnosisResult") -> bool:
        """Equality ignoring wall-clock timing."""
        return (self.ranking == other.ranking and self.scores == other.scores
                and self.type_probs == other.type_probs)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    trigger_epoch: Optional[int] = None
    stopped_epoch: int = 0
    seconds: float = 0.0

    def write_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["loss_total"]), repr(r["loss_rcl"]), repr(r["loss_fti"]),
                            repr(r["hr1_train"]), r["phase"], f"{r['seconds']:.6f}"])


# ---------------------------------------------------------------------------
# the model


@dataclass
class CCLHModel:
    net: CCLHNet
    preprocessor: Preprocessor
    failure_types: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.net.cfg

    def prepare(self, cases):
        return prepare_cases(cases, self.preprocessor, self.failure_types)

    @torch.no_grad()
    def diagnose_prepared(self, prepared: Sequence[PreparedCase]) -> list[DiagnosisResult]:
        self.net.eval()
        out = []
        for p in prepared:
            t0 = time.perf_counter()
            batch = Batch([p])
            H = self.net.embed(batch)
            scores, ranking = score_instances(H, self.net.scorer, p.instance_order)
            top = p.instance_order.index(ranking[0])
            probs = classify_failure(H[top], self.net.classifier)
            out.append(DiagnosisResult(
                case_id=p.case_id,
                scores={v: float(s) for v, s in zip(p.instance_order, scores.tolist())},
                ranking=ranking,
                type_probs={t: float(q) for t, q in zip(self.failure_types, probs.tolist())},
                elapsed_ms=(time.perf_counter() - t0) * 1000.0,
            ))
        return out

    def diagnose(self, case: FailureCase) -> DiagnosisResult:
        t0 = time.perf_counter()
        (res,) = self.diagnose_prepared(self.prepare([case]))
        res.elapsed_ms = (time.perf_counter() - t0) * 1000.0
        return res

    # -- persistence ------------------------------------------------------------

    def save(self, directory):
        d = Path(directory)
        (d / "params").mkdir(parents=True, exist_ok=True)
        self.preprocessor.save(d)
        params = []
        for name, tensor in self.net.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            fname = f"params/{name}.bin"
            (d / fname).write_bytes(np.ascontiguousarray(arr).tobytes())
            params.append({"name": name, "shape": list(arr.shape), "file": fname})
        manifest = {
            "format_version": FORMAT_VERSION,
            "dtype": "float32-le",
            "config": asdict(self.config),
            "n_types": self.config.n_types,
            "failure_types": list(self.failure_types),
            "hidden": self.config.hidden,
            "theta": self.meta.get("theta"),
            "trigger_epoch": self.meta.get("trigger_epoch"),
            "meta": self.meta,
            "schema": "schema.json",
            "templates": "templates.json",
            "norm_stats": "norm_stats.json",
            "params": params,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> "CCLHModel":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IncompatibleArtifact(f"{d}: unreadable manifest ({exc})") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise IncompatibleArtifact(f"unsupported format version {manifest.get('format_version')}")
        try:
            pre = Preprocessor.load(d)
        except (OSError, KeyError, ValueError) as exc:
            raise IncompatibleArtifact(f"{d}: preprocessing files invalid ({exc})") from exc
        cfg = ModelConfig(**manifest["config"])
        if cfg.dims != pre.schema.dims:
            raise IncompatibleArtifact(f"model dims {cfg.dims} disagree with schema {pre.schema.dims}")
        net = CCLHNet(cfg)
        expected = net.state_dict()
        listed = {p["name"]: p for p in manifest["params"]}
        if set(listed) != set(expected):
            raise IncompatibleArtifact("parameter list does not match the architecture")
        state = {}
        for name, ref in expected.items():
            shape = tuple(listed[name]["shape"])
            if shape != tuple(ref.shape):
                raise IncompatibleArtifact(f"{name}: shape {shape}, expected {tuple(ref.shape)}")
            raw = (d / listed[name]["file"]).read_bytes()
            if len(raw) != 4 * math.prod(shape):
                raise IncompatibleArtifact(f"{name}: file holds {len(raw)} bytes, expected {4 * math.prod(shape)}")
            state[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
        net.load_state_dict(state)
        return cls(net, pre, tuple(manifest["failure_types"]), manifest.get("meta", {}))


# ---------------------------------------------------------------------------
# training


def _batches(items, size, rng):
    order = list(range(len(items)))
    rng.shuffle(order)
    for i in range(0, len(order), size):
        yield [items[j] for j in order[i:i + size]]


@torch.no_grad()
def evaluate_prepared(net: CCLHNet, prepared, with_fti: bool, teacher_forcing=True, chunk=64):
    """(hr1, loss_rcl, loss_fti) over all cases at current parameters."""
    net.eval()
    hits = 0
    l1_sum = lf_sum = 0.0
    for i in range(0, len(prepared), chunk):
        batch = Batch(list(prepared[i:i + chunk]))
        H = net.embed(batch)
        s = net.score(H)
        rows = batch.culprit_rows()
        l1_sum += float(rcl_loss(s, rows, batch.segments)) * len(batch.cases)
        top_rows = []
        for k, c in enumerate(batch.cases):
            o = int(batch.offsets[k])
            ranking = rank(s[o:o + c.n_instances].numpy(), c.instance_order)
            pick = c.instance_order.index(ranking[0])
            hits += pick == c.culprit
            top_rows.append(o + pick)
        if with_fti:
            src = rows if teacher_forcing else top_rows
            logits = net.classifier(H[src])
            lf_sum += float(fti_loss(logits, batch.type_labels())) * len(batch.cases)
    n = len(prepared)
    return hits / n, l1_sum / n, lf_sum / n


def train_prepared(net: CCLHNet, prepared: Sequence[PreparedCase], cfg: TrainConfig,
                   trigger_cases: Sequence[PreparedCase] | None = None, on_epoch=None) -> TrainLog:
    """Cascaded optimization of ``net`` in place.

    ``trigger_cases`` replaces the training cases for the HR@1 trigger check.
    ``on_epoch`` receives each log row; a truthy return stops training.
    """
    if not prepared:
        raise EmptyCase("no training cases")
    for p in prepared:
        if p.culprit is None or p.ftype is None:
            raise LabelMissing(f"case {p.case_id} lacks labels")
    rng = random.Random(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    trainlog = TrainLog()
    phase = 1
    best, stale = math.inf, 0
    t_start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        net.train()
        for items in _batches(list(prepared), cfg.batch_size, rng):
            batch = Batch(items)
            H = net.embed(batch)
            s = net.score(H)
            rows = batch.culprit_rows()
            loss = rcl_loss(s, rows, batch.segments)
            if phase == 2:
                if cfg.teacher_forcing:
                    src = rows
                else:
                    src = []
                    for k, c in enumerate(batch.cases):
                        o = int(batch.offsets[k])
                        seg = s[o:o + c.n_instances].detach().numpy()
                        src.append(o + c.instance_order.index(rank(seg, c.instance_order)[0]))
                loss = total_loss(loss, net.classifier(H[src]), batch.type_labels())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        hr1, l1, lf = evaluate_prepared(net, prepared, phase == 2, cfg.teacher_forcing)
        if trigger_cases is not None:
            hr1, _, _ = evaluate_prepared(net, trigger_cases, False)
        total = l1 + lf
        row = {"epoch": epoch, "loss_total": total, "loss_rcl": l1, "loss_fti": lf,
               "hr1_train": hr1, "phase": phase, "seconds": time.perf_counter() - t0}
        trainlog.rows.append(row)
        trainlog.stopped_epoch = epoch
        log.debug("epoch %d phase %d loss %.5f hr1 %.3f", epoch, phase, total, hr1)
        if on_epoch is not None and on_epoch(row):
            break
        if phase == 1 and hr1 > cfg.theta:
            phase = 2
            trainlog.trigger_epoch = epoch + 1
            # the objective changes at the latch; restart plateau detection
            best, stale = math.inf, 0
            continue
        if total < best * (1 - cfg.min_delta):
            best, stale = total, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    trainlog.seconds = time.perf_counter() - t_start
    if trainlog.trigger_epoch is None:
        warnings.warn(f"trigger never fired: train HR@1 never exceeded theta={cfg.theta}",
                      TriggerNeverFired, stacklevel=2)
    return trainlog


def failure_vocabulary(cases) -> tuple[str, ...]:
    types = sorted({c.failure_type for c in cases if c.failure_type is not None})
    if len(types) < 2:
        raise LabelMissing(f"need at least two failure types, found {types}")
    return tuple(types)


def train(train_cases: Sequence[FailureCase], cfg: TrainConfig = TrainConfig(),
          window: WindowConfig = WindowConfig(), preprocessor: Preprocessor | None = None,
          trigger_cases: Sequence[FailureCase] | None = None, on_epoch=None):
    """Fit preprocessing and the network on labeled cases; returns ``(model, log)``."""
    for c in train_cases:
        if not c.labeled:
            raise LabelMissing(f"case {c.case_id} lacks labels")
    types = failure_vocabulary(train_cases)
    pre = preprocessor or Preprocessor.fit(train_cases, window)
    prepared = prepare_cases(train_cases, pre, types)
    trig = prepare_cases(trigger_cases, pre, types) if trigger_cases else None
    torch.manual_seed(cfg.seed)
    net = CCLHNet(ModelConfig(dims=pre.schema.dims, n_types=len(types), hidden=cfg.hidden,
                              gru_layers=cfg.gru_layers, hg_layers=cfg.hg_layers))
    trainlog = train_prepared(net, prepared, cfg, trig, on_epoch)
    meta = {"theta": cfg.theta, "trigger_epoch": trainlog.trigger_epoch,
            "epochs": trainlog.stopped_epoch, "train_seconds": trainlog.seconds,
            "teacher_forcing": cfg.teacher_forcing, "seed": cfg.seed, "lr": cfg.lr}
    return CCLHModel(net, pre, types, meta), trainlog


def diagnose(case: FailureCase, model: CCLHModel) -> DiagnosisResult:
    if set(model.preprocessor.schema.dims) != set(MODALITIES):
        raise SchemaMismatch("model schema is incomplete")
    return model.diagnose(case)
