"""Target/context graphs, their merge into a heterogeneous graph, and batching.

Target nodes form a hierarchy (``parents[v]`` is the parent of ``v``; ``-1``
means the implicit root node).  Context nodes send directed edges to target
nodes according to a binary relation matrix ``R[i, j]``.  Inside the flow a
batch keeps every context slot and a presence mask; a masked slot is exactly
a node removed from the context graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RELATION_KINDS = ("forward", "backward", "context", "root")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class RelationSet:
    parents: tuple[int, ...]
    context_to_target: np.ndarray = field(compare=False)

    def __post_init__(self):
        R = np.asarray(self.context_to_target)
        n = len(self.parents)
        if R.ndim != 2 or R.shape[1] != n:
            raise GraphError(f"relation matrix must be m x {n}, got {R.shape}")
        if not np.isin(R, (0, 1)).all():
            raise GraphError("relation matrix entries must be 0 or 1")
        for v, p in enumerate(self.parents):
            if p < -1 or p >= n or p == v:
                raise GraphError(f"node {v} has invalid parent {p}")
        for v in range(n):  # every chain must reach the root
            seen, u = set(), v
            while u != -1:
                if u in seen:
                    raise GraphError(f"hierarchy has a cycle through node {v}")
                seen.add(u)
                u = self.parents[u]
        object.__setattr__(self, "context_to_target", R.astype(np.int8))

    @classmethod
    def chain(cls, n: int, R=None) -> "RelationSet":
        """x_1 -> x_2 -> ... with x_1 attached to the root; identity context relation by default."""
        return cls(tuple(range(-1, n - 1)), np.eye(n, dtype=np.int8) if R is None else np.asarray(R))

    @property
    def n_targets(self) -> int:
        return len(self.parents)

    @property
    def n_context(self) -> int:
        return self.context_to_target.shape[0]

    def target_edges(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        child = np.array([v for v, p in enumerate(self.parents) if p >= 0], dtype=np.intp)
        par = np.array([self.parents[v] for v in child], dtype=np.intp)
        return {"forward": (par, child), "backward": (child, par)}

    def root_children(self) -> np.ndarray:
        return np.array([v for v, p in enumerate(self.parents) if p == -1], dtype=np.intp)

    def context_edges(self) -> tuple[np.ndarray, np.ndarray]:
        src, dst = np.nonzero(self.context_to_target)
        return src.astype(np.intp), dst.astype(np.intp)

    def relabel(self, perm) -> "RelationSet":
        """Same structure with target node ``v`` renamed to ``perm[v]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        parents = [0] * self.n_targets
        for v, p in enumerate(self.parents):
            parents[perm[v]] = -1 if p == -1 else int(perm[p])
        return RelationSet(tuple(parents), self.context_to_target[:, inv])


@dataclass
class NodeGraph:
    """Features of one graph; ``node_ids`` index the slots of a :class:`RelationSet`."""

    features: np.ndarray
    node_ids: tuple[int, ...] = None
    edges: tuple[tuple[int, int, str], ...] = ()

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise GraphError(f"node features must be n x D, got {self.features.shape}")
        if self.node_ids is None:
            self.node_ids = tuple(range(len(self.features)))
        self.node_ids = tuple(int(i) for i in self.node_ids)
        if len(self.node_ids) != len(self.features):
            raise GraphError("one id per node required")
        n = len(self.features)
        for u, v, _ in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise GraphError(f"edge ({u}, {v}) references a missing node")

    def __len__(self) -> int:
        return len(self.features)

    def subgraph(self, keep) -> "NodeGraph":
        keep = sorted(int(k) for k in keep)
        pos = {old: new for new, old in enumerate(keep)}
        edges = tuple((pos[u], pos[v], k) for u, v, k in self.edges if u in pos and v in pos)
        return NodeGraph(self.features[keep], tuple(self.node_ids[k] for k in keep), edges)


@dataclass
class HeteroGraph:
    """Merged graph x | c: typed edges into target nodes from targets, context and root."""

    target: np.ndarray
    context: np.ndarray
    context_ids: tuple[int, ...]
    root: np.ndarray
    edges: dict[str, tuple[np.ndarray, np.ndarray]]

    def prior(self) -> "HeteroGraph":
        edges = dict(self.edges)
        edges["context"] = (np.zeros(0, np.intp), np.zeros(0, np.intp))
        return HeteroGraph(self.target, self.context[:0], (), self.root, edges)


def merge(x: NodeGraph, c: NodeGraph | None, relations: RelationSet,
          root: np.ndarray | None = None) -> HeteroGraph:
    n = len(x)
    if n != relations.n_targets:
        raise GraphError(f"target graph has {n} nodes, relation set expects {relations.n_targets}")
    if x.node_ids != tuple(range(n)):
        raise GraphError("target nodes must be listed in relation-set order")
    edges = dict(relations.target_edges())
    kids = relations.root_children()
    edges["root"] = (np.zeros(len(kids), np.intp), kids)
    if c is None or len(c) == 0:
        ctx = np.zeros((0, 0 if c is None else c.features.shape[1]))
        ids: tuple[int, ...] = ()
        edges["context"] = (np.zeros(0, np.intp), np.zeros(0, np.intp))
    else:
        ctx, ids = c.features, c.node_ids
        if len(set(ids)) != len(ids):
            raise GraphError("duplicate context node ids")
        src, dst = [], []
        for pos, i in enumerate(ids):
            if not 0 <= i < relations.n_context:
                raise GraphError(f"context node {i} is not covered by the relation matrix "
                                 f"({relations.n_context} rows)")
            for j in np.nonzero(relations.context_to_target[i])[0]:
                src.append(pos)
                dst.append(int(j))
        edges["context"] = (np.array(src, np.intp), np.array(dst, np.intp))
    root = np.zeros(3) if root is None else np.asarray(root, dtype=np.float64)
    return HeteroGraph(x.features, ctx, tuple(ids), root, edges)


def mask_context(c: NodeGraph, keep_fraction: float, rng) -> NodeGraph:
    """Keep a uniformly random subset of round(keep_fraction * m) context nodes."""
    m = len(c)
    k = int(np.floor(keep_fraction * m + 0.5))
    keep = rng.choice(m, size=k, replace=False) if k else []
    return c.subgraph(keep)


@dataclass
class GraphBatch:
    """Stacked examples sharing one relation set.

    ``target``: B x n x D_f (may be None when only the context is known),
    ``context``: B x m x D_c with absent slots zero-filled, ``mask``: B x m.
    """

    relations: RelationSet
    target: np.ndarray | None
    context: np.ndarray
    mask: np.ndarray
    root: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.context.ndim != 3 or self.context.shape[1] != self.relations.n_context:
            raise GraphError(f"context must be B x {self.relations.n_context} x D_c, got {self.context.shape}")
        if self.mask.shape != self.context.shape[:2]:
            raise GraphError(f"mask {self.mask.shape} does not match context {self.context.shape[:2]}")
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.float64)
            if self.target.shape[:2] != (len(self.context), self.relations.n_targets):
                raise GraphError(f"target {self.target.shape} inconsistent with context batch")

    def __len__(self) -> int:
        return len(self.context)

    def with_mask(self, mask) -> "GraphBatch":
        return GraphBatch(self.relations, self.target, self.context, mask, self.root)

    def prior(self) -> "GraphBatch":
        return self.with_mask(np.zeros_like(self.mask))

    def select(self, idx) -> "GraphBatch":
        t = None if self.target is None else self.target[idx]
        return GraphBatch(self.relations, t, self.context[idx], self.mask[idx], self.root)

    def repeat_context(self, n_samples: int) -> "GraphBatch":
        """Each example's context repeated ``n_samples`` times (example-major)."""
        return GraphBatch(self.relations, None, np.repeat(self.context, n_samples, axis=0),
                          np.repeat(self.mask, n_samples, axis=0), self.root)


def collate(graphs: list[HeteroGraph], relations: RelationSet, context_dim: int | None = None) -> GraphBatch:
    """Stack merged graphs into a masked batch; absent context nodes get mask 0."""
    if not graphs:
        raise GraphError("cannot collate an empty list")
    if context_dim is None:
        context_dim = max((g.context.shape[1] for g in graphs if g.context.size), default=1)
    B, m = len(graphs), relations.n_context
    ctx = np.zeros((B, m, context_dim))
    mask = np.zeros((B, m))
    for b, g in enumerate(graphs):
        for pos, i in enumerate(g.context_ids):
            ctx[b, i] = g.context[pos]
            mask[b, i] = 1.0
    target = np.stack([g.target for g in graphs])
    return GraphBatch(relations, target, ctx, mask, graphs[0].root)


def augment_masks(available: np.ndarray, fractions, rng) -> np.ndarray:
    """Per row, keep round(f * #available) of the available slots, f drawn from ``fractions``."""
    available = np.asarray(available, dtype=bool)
    B, m = available.shape
    f = np.asarray(fractions, dtype=float)[rng.integers(0, len(fractions), B)]
    counts = np.floor(f * available.sum(axis=1) + 0.5).astype(int)
    scores = np.where(available, rng.uniform((B, m)), np.inf)
    ranks = np.argsort(np.argsort(scores, axis=1), axis=1)
    return (ranks < counts[:, None]).astype(np.float64)
