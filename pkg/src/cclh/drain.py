"""Fixed-depth parse tree log template miner (Drain).

Logs are routed by token count, then by their leading tokens, to a leaf
holding candidate clusters. A log joins the most similar cluster when the
fraction of positionally equal tokens reaches ``similarity_threshold``;
divergent positions in the template become ``<*>``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

WILDCARD = "<*>"


@dataclass(frozen=True)
class ParserConfig:
    tree_depth: int = 4
    similarity_threshold: float = 0.4
    max_children: int = 100

    def __post_init__(self):
        if self.tree_depth < 2:
            raise ValueError("tree_depth must be >= 2")
        if not 0 < self.similarity_threshold < 1:
            raise ValueError("similarity_threshold must lie in (0, 1)")
        if self.max_children < 2:
            raise ValueError("max_children must be >= 2")

    def to_dict(self):
        return asdict(self)


class _Cluster:
    __slots__ = ("tokens", "index")

    def __init__(self, tokens, index):
        self.tokens = tokens
        self.index = index


class _Node:
    __slots__ = ("children", "clusters")

    def __init__(self):
        self.children: dict[str, _Node] = {}
        self.clusters: list[_Cluster] = []


def _has_digit(token: str) -> bool:
    return any(ch.isdigit() for ch in token)


def _similarity(template, tokens):
    if not template:
        return 1.0, 0
    same = params = 0
    for a, b in zip(template, tokens):
        if a == WILDCARD:
            params += 1
        elif a == b:
            same += 1
    return same / len(template), params


class Drain:
    def __init__(self, config: ParserConfig | None = None):
        self.config = config or ParserConfig()
        self._root: dict[int, _Node] = {}
        self._clusters: list[_Cluster] = []
        # depth counts the root, the length layer and the leaf layer
        self._prefix_depth = max(self.config.tree_depth - 3, 0)

    @property
    def templates(self) -> list[str]:
        """Templates ordered by the first log that created each cluster."""
        return [" ".join(c.tokens) for c in self._clusters]

    def _descend(self, tokens, create):
        node = self._root.get(len(tokens))
        if node is None:
            if not create:
                return None
            node = self._root[len(tokens)] = _Node()
        for token in tokens[: self._prefix_depth]:
            child = node.children.get(token)
            if child is not None:
                node = child
                continue
            if not create:
                node = node.children.get(WILDCARD)
                if node is None:
                    return None
                continue
            node = self._new_child(node, token)
        return node

    def _new_child(self, node, token):
        kids = node.children
        if _has_digit(token):
            return kids.setdefault(WILDCARD, _Node())
        if WILDCARD in kids:
            if len(kids) < self.config.max_children:
                return kids.setdefault(token, _Node())
            return kids[WILDCARD]
        if len(kids) + 1 < self.config.max_children:
            return kids.setdefault(token, _Node())
        return kids.setdefault(WILDCARD, _Node())

    def _best(self, leaf, tokens):
        best, best_sim, best_params = None, -1.0, -1
        for cluster in leaf.clusters:
            sim, params = _similarity(cluster.tokens, tokens)
            if sim > best_sim or (sim == best_sim and params > best_params):
                best, best_sim, best_params = cluster, sim, params
        return best, best_sim

    def add(self, message: str) -> int:
        """Feed one log line; returns the index of the cluster it joined."""
        tokens = message.split()
        leaf = self._descend(tokens, create=False)
        if leaf is not None:
            cluster, sim = self._best(leaf, tokens)
            if cluster is not None and sim >= self.config.similarity_threshold:
                cluster.tokens = [a if a == b else WILDCARD for a, b in zip(cluster.tokens, tokens)]
                return cluster.index
        cluster = _Cluster(tokens, len(self._clusters))
        self._clusters.append(cluster)
        self._descend(tokens, create=True).clusters.append(cluster)
        return cluster.index

    def match(self, message: str) -> int | None:
        """Index of the template a line belongs to, without updating the tree."""
        tokens = message.split()
        leaf = self._descend(tokens, create=False)
        if leaf is None:
            return None
        for cluster in leaf.clusters:
            if all(a == WILDCARD or a == b for a, b in zip(cluster.tokens, tokens)):
                return cluster.index
        cluster, sim = self._best(leaf, tokens)
        if cluster is not None and sim >= self.config.similarity_threshold:
            return cluster.index
        return None

    @classmethod
    def from_templates(cls, templates, config: ParserConfig | None = None) -> "Drain":
        """Rebuild a matcher from mined templates, preserving their order."""
        parser = cls(config)
        for template in templates:
            tokens = template.split()
            cluster = _Cluster(tokens, len(parser._clusters))
            parser._clusters.append(cluster)
            parser._descend(tokens, create=True).clusters.append(cluster)
        return parser


@dataclass(frozen=True)
class TemplateSet:
    templates: tuple[str, ...]
    parser_config: ParserConfig

    def __len__(self):
        return len(self.templates)

    def matcher(self) -> Drain:
        return Drain.from_templates(self.templates, self.parser_config)

    def to_dict(self):
        return {"parser_config": self.parser_config.to_dict(), "templates": list(self.templates)}

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(doc["templates"]), ParserConfig(**doc["parser_config"]))


def mine_log_templates(messages, config: ParserConfig | None = None) -> TemplateSet:
    """Mine templates from an iterable of log messages (or LogRecords)."""
    parser = Drain(config)
    for m in messages:
        parser.add(getattr(m, "message", m))
    # two clusters can converge on the same text; keep the first
    return TemplateSet(tuple(dict.fromkeys(parser.templates)), parser.config)
