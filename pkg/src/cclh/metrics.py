"""Ranking and classification metrics, plus train/test splitting."""
from __future__ import annotations

import json
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import EmptyRankings, LabelMismatch, TooFewComponents

DEFAULT_KS = (1, 2, 3, 5)


def hit_ratio(rankings: Sequence[Sequence[str]], culprits: Sequence[str], k: int) -> float:
    """Share of cases whose culprit is among the first ``k`` ranked instances."""
    if not rankings:
        raise EmptyRankings("no rankings to evaluate")
    if len(rankings) != len(culprits):
        raise ValueError("rankings and culprits differ in length")
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = sum(c in list(r[:k]) for r, c in zip(rankings, culprits))
    return hits / len(rankings)


def avg_at_k(rankings, culprits, k: int) -> float:
    return sum(hit_ratio(rankings, culprits, i) for i in range(1, k + 1)) / k


def weighted_prf(predicted: Sequence[str], actual: Sequence[str], labels: Sequence[str] | None = None):
    """Support-weighted precision, recall and F1.

    Returns ``(precision, recall, f1, table)`` where ``table`` maps each class to
    its own ``precision/recall/f1/support``. Zero denominators yield 0.
    """
    if len(predicted) != len(actual):
        raise LabelMismatch("predictions and labels differ in length")
    if not actual:
        raise EmptyRankings("no labels to evaluate")
    if labels is None:
        labels = sorted(set(actual) | set(predicted))
    else:
        stray = (set(actual) | set(predicted)) - set(labels)
        if stray:
            raise LabelMismatch(f"labels outside the vocabulary: {sorted(stray)}")
    tp, fp, fn = Counter(), Counter(), Counter()
    for p, a in zip(predicted, actual):
        if p == a:
            tp[a] += 1
        else:
            fp[p] += 1
            fn[a] += 1
    support = Counter(actual)
    table = {}
    for c in labels:
        prec = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        rec = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        table[c] = {"precision": prec, "recall": rec, "f1": f1, "support": support[c]}
    n = len(actual)
    avg = {m: sum(table[c][m] * table[c]["support"] for c in labels) / n
           for m in ("precision", "recall", "f1")}
    return avg["precision"], avg["recall"], avg["f1"], table


@dataclass
class EvalReport:
    hr: dict[int, float]
    avg3: float
    pre: float
    rec: float
    f1: float
    per_class: dict[str, dict] = field(default_factory=dict)
    n_cases: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        doc = asdict(self)
        doc["hr"] = {str(k): v for k, v in self.hr.items()}
        return doc

    def to_markdown(self) -> str:
        lines = ["| metric | value |", "|---|---|"]
        lines += [f"| HR@{k} | {v:.4f} |" for k, v in self.hr.items()]
        lines += [f"| Avg@3 | {self.avg3:.4f} |", f"| Pre | {self.pre:.4f} |",
                  f"| Rec | {self.rec:.4f} |", f"| F1 | {self.f1:.4f} |", f"| cases | {self.n_cases} |"]
        lines += ["", "| type | precision | recall | f1 | support |", "|---|---|---|---|---|"]
        for c, row in self.per_class.items():
            lines.append(f"| {c} | {row['precision']:.4f} | {row['recall']:.4f} | "
                         f"{row['f1']:.4f} | {row['support']} |")
        if self.meta:
            lines += ["", *(f"- {k}: {v}" for k, v in self.meta.items())]
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        (d / "report.md").write_text(self.to_markdown())


def evaluate(rankings, culprits, predicted_types, true_types, labels=None, ks=DEFAULT_KS,
             meta=None) -> EvalReport:
    pre, rec, f1, table = weighted_prf(predicted_types, true_types, labels)
    return EvalReport(
        hr={k: hit_ratio(rankings, culprits, k) for k in ks},
        avg3=avg_at_k(rankings, culprits, 3),
        pre=pre, rec=rec, f1=f1, per_class=table, n_cases=len(rankings), meta=dict(meta or {}),
    )


def split_dataset(cases, mode: str = "random", ratio: float = 0.6, seed: int = 0):
    """Split labeled cases into ``(train, test)``.

    ``unseen_component`` partitions, per failure type, the distinct culprits so
    that no (type, culprit) pair in the test set occurs in training.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    rng = random.Random(seed)
    cases = list(cases)
    if mode == "random":
        order = list(range(len(cases)))
        rng.shuffle(order)
        cut = round(ratio * len(cases))
        train = sorted(order[:cut])
        test = sorted(order[cut:])
        return [cases[i] for i in train], [cases[i] for i in test]
    if mode != "unseen_component":
        raise ValueError(f"unknown split mode {mode!r}")
    by_type = defaultdict(set)
    for c in cases:
        by_type[c.failure_type].add(c.culprit)
    train_pairs = set()
    for ftype in sorted(by_type):
        culprits = sorted(by_type[ftype])
        if len(culprits) < 2:
            raise TooFewComponents(f"failure type {ftype!r} has {len(culprits)} distinct culprit(s)")
        rng.shuffle(culprits)
        cut = min(max(round(ratio * len(culprits)), 1), len(culprits) - 1)
        train_pairs.update((ftype, c) for c in culprits[:cut])
    train = [c for c in cases if (c.failure_type, c.culprit) in train_pairs]
    test = [c for c in cases if (c.failure_type, c.culprit) not in train_pairs]
    return train, test
