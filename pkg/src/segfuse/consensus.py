"""In-clip consensus: pool aligned proposals and pick the best-supported subset.

Pooled proposals vote for each other through pairwise IoU. A proposal's node
weight is the sum of supporting IoUs (those above the support threshold)
minus a selection penalty, and no two mutually-supporting proposals may be
selected together. That program is exactly a maximum-weight independent set
on the support graph, solved per connected component: exact branch-and-bound
up to a component-size cap, greedy beyond it (with a warning, never silently).

Weights are kept as exact rationals so objective comparisons and tie-breaks
are independent of float summation order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from math import lcm
from typing import Optional, Sequence

from .masks import BinaryMask, Segment, Segmentation, iou_exact, render_non_overlapping
from .propagation import IdentityPropagator, Propagator, align_one

__all__ = [
    "Proposal",
    "SupportGraph",
    "ConsensusResult",
    "pool_proposals",
    "build_support_graph",
    "solve_consensus",
    "consensus",
    "consensus_detail",
    "EXACT_COMPONENT_CAP",
]

logger = logging.getLogger(__name__)

EXACT_COMPONENT_CAP = 24


@dataclass(frozen=True)
class Proposal:
    """A candidate segment aligned to the target frame."""

    mask: BinaryMask
    source_frame_offset: int
    class_label: Optional[int] = None
    confidence: Optional[float] = None


@dataclass(frozen=True)
class SupportGraph:
    """Support relation over a proposal pool.

    ``weights[i]`` is the total supporting IoU of proposal i minus the
    selection penalty; ``edges`` maps each supporting pair (i < j) to its
    IoU. Same-frame proposals are disjoint, so edges only ever connect
    proposals from different source frames.
    """

    weights: tuple[Fraction, ...]
    edges: dict[tuple[int, int], Fraction]
    theta: Fraction
    alpha: Fraction
    tie_keys: tuple[tuple[int, int, int], ...]  # (offset, -area, pool index)

    @property
    def num_nodes(self) -> int:
        return len(self.weights)

    def neighbors(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in range(self.num_nodes)]
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return adj

    def weight_floats(self) -> tuple[float, ...]:
        return tuple(float(w) for w in self.weights)


@dataclass(frozen=True)
class ConsensusResult:
    """Solved consensus: selection indicator, objective, rendered output."""

    indicator: tuple[bool, ...]
    objective_value: float
    output: Segmentation
    exact: bool
    passthrough: bool = False
    pool: tuple[Proposal, ...] = ()
    graph: Optional[SupportGraph] = None

    @property
    def selected(self) -> tuple[int, ...]:
        return tuple(i for i, v in enumerate(self.indicator) if v)


def pool_proposals(clip: Sequence[tuple[int, Segmentation]], target_frame: int,
                   propagator: Propagator) -> list[Proposal]:
    """Align every clip frame to the target and pool all segments.

    Clip frames must be ordered starting at the target frame. Every segment
    of every frame appears exactly once; segments whose aligned mask is empty
    are dropped.
    """
    if not clip:
        return []
    if clip[0][0] != target_frame:
        raise ValueError(
            f"clip must start at the target frame {target_frame}, got {clip[0][0]}")
    pool: list[Proposal] = []
    for offset, (frame_index, segmentation) in enumerate(clip):
        aligned = align_one((frame_index, segmentation), target_frame, propagator)
        for seg in aligned.segments:
            if seg.mask.is_empty():
                continue
            pool.append(Proposal(mask=seg.mask, source_frame_offset=offset,
                                 class_label=seg.class_label,
                                 confidence=seg.confidence))
    return pool


def build_support_graph(pool: Sequence[Proposal], alpha: float = 0.5,
                        theta: float = 0.5) -> SupportGraph:
    """Pairwise-IoU support graph with node weights ``sum(support) - alpha``."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0, 1), got {theta}")
    if alpha < 0.0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    theta_f = Fraction(theta)
    alpha_f = Fraction(alpha)
    n = len(pool)
    support = [Fraction(0)] * n
    edges: dict[tuple[int, int], Fraction] = {}
    for i in range(n):
        for j in range(i + 1, n):
            if pool[i].source_frame_offset == pool[j].source_frame_offset:
                continue  # same-frame proposals are disjoint
            inter, uni = iou_exact(pool[i].mask, pool[j].mask)
            if inter == 0:
                continue
            ratio = Fraction(inter, uni)
            if ratio > theta_f:
                edges[(i, j)] = ratio
                support[i] += ratio
                support[j] += ratio
    weights = tuple(s - alpha_f for s in support)
    tie_keys = tuple((p.source_frame_offset, -p.mask.area, i)
                     for i, p in enumerate(pool))
    return SupportGraph(weights=weights, edges=edges, theta=theta_f,
                        alpha=alpha_f, tie_keys=tie_keys)


def _components(n: int, adj: list[set[int]]) -> list[list[int]]:
    seen = [False] * n
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(sorted(comp))
    return comps


def _scaled_int_weights(weights: Sequence[Fraction]) -> list[int]:
    denom = lcm(*(w.denominator for w in weights)) if weights else 1
    return [int(w * denom) for w in weights]


def _solve_component_exact(nodes: list[int], graph: SupportGraph,
                           adj: list[set[int]]) -> tuple[list[int], Fraction]:
    """Branch-and-bound MWIS over one component, deterministic under ties.

    Nodes are visited in tie-break priority order (earlier source frame,
    larger area, lower pool index) with the include branch first, so feasible
    selections are enumerated in lexicographically descending preference and
    the first selection reaching the optimum is the canonical one.
    """
    order = sorted(nodes, key=lambda i: graph.tie_keys[i])
    k = len(order)
    pos = {node: p for p, node in enumerate(order)}
    local_adj = [0] * k
    for p, node in enumerate(order):
        for nb in adj[node]:
            if nb in pos:
                local_adj[p] |= 1 << pos[nb]
    w = _scaled_int_weights([graph.weights[i] for i in order])
    pos_weight = [max(x, 0) for x in w]

    best_obj = None  # strictly-better replacement keeps the lex-greatest optimum
    best_sel = 0

    def dfs(p: int, selectable: int, cur: int, sel: int) -> None:
        nonlocal best_obj, best_sel
        bound = cur
        for q in range(p, k):
            if selectable >> q & 1:
                bound += pos_weight[q]
        if best_obj is not None and bound <= best_obj:
            return
        if p == k:
            best_obj, best_sel = cur, sel
            return
        if selectable >> p & 1:
            dfs(p + 1, selectable & ~local_adj[p] & ~(1 << p),
                cur + w[p], sel | (1 << p))
        dfs(p + 1, selectable & ~(1 << p), cur, sel)

    dfs(0, (1 << k) - 1, 0, 0)
    chosen = [order[p] for p in range(k) if best_sel >> p & 1]
    objective = sum((graph.weights[i] for i in chosen), Fraction(0))
    return chosen, objective


def _solve_component_greedy(nodes: list[int], graph: SupportGraph,
                            adj: list[set[int]]) -> tuple[list[int], Fraction]:
    order = sorted(nodes, key=lambda i: (-graph.weights[i], graph.tie_keys[i]))
    chosen: list[int] = []
    blocked: set[int] = set()
    for i in order:
        if graph.weights[i] <= 0:
            break
        if i in blocked:
            continue
        chosen.append(i)
        blocked |= adj[i]
    objective = sum((graph.weights[i] for i in chosen), Fraction(0))
    return chosen, objective


def solve_consensus(graph: SupportGraph,
                    exact_cap: int = EXACT_COMPONENT_CAP
                    ) -> tuple[tuple[bool, ...], float, bool]:
    """Maximize total node weight over independent sets of the support graph.

    Returns (indicator, objective, exact). Components larger than
    ``exact_cap`` fall back to greedy-by-weight and are logged as a warning.
    """
    n = graph.num_nodes
    adj = graph.neighbors()
    indicator = [False] * n
    objective = Fraction(0)
    exact = True
    for comp in _components(n, adj):
        if len(comp) <= exact_cap:
            chosen, obj = _solve_component_exact(comp, graph, adj)
        else:
            logger.warning(
                "consensus component with %d proposals exceeds exact cap %d; "
                "falling back to greedy selection", len(comp), exact_cap)
            chosen, obj = _solve_component_greedy(comp, graph, adj)
            exact = False
        for i in chosen:
            indicator[i] = True
        objective += obj
    return tuple(indicator), float(objective), exact


def consensus_detail(clip: Sequence[tuple[int, Segmentation]], target_frame: int,
                     propagator: Propagator, *, alpha: float = 0.5,
                     theta: float = 0.5, spatial_alignment: bool = True,
                     exact_cap: int = EXACT_COMPONENT_CAP) -> ConsensusResult:
    """Full consensus with the pool, graph, and verdicts kept for inspection."""
    if len(clip) < 1:
        raise ValueError("consensus needs at least one clip frame")
    if len(clip) == 1:
        output = clip[0][1].with_frame_index(target_frame)
        n = len(output.segments)
        return ConsensusResult(indicator=(True,) * n, objective_value=0.0,
                               output=output, exact=True, passthrough=True)

    align_prop = propagator if spatial_alignment else IdentityPropagator()
    pool = tuple(pool_proposals(clip, target_frame, align_prop))
    graph = build_support_graph(pool, alpha=alpha, theta=theta)
    indicator, objective, exact = solve_consensus(graph, exact_cap=exact_cap)
    segments = [
        Segment(segment_id=rank + 1, mask=pool[i].mask,
                class_label=pool[i].class_label, confidence=pool[i].confidence)
        for rank, i in enumerate(i for i, v in enumerate(indicator) if v)
    ]
    output = render_non_overlapping(segments, target_frame)
    return ConsensusResult(indicator=indicator, objective_value=objective,
                           output=output, exact=exact, pool=pool, graph=graph)


def consensus(clip: Sequence[tuple[int, Segmentation]], target_frame: int,
              propagator: Propagator, *, alpha: float = 0.5, theta: float = 0.5,
              spatial_alignment: bool = True,
              exact_cap: int = EXACT_COMPONENT_CAP) -> Segmentation:
    """Denoised consensus segmentation for the target frame."""
    return consensus_detail(clip, target_frame, propagator, alpha=alpha,
                            theta=theta, spatial_alignment=spatial_alignment,
                            exact_cap=exact_cap).output


def _identity():
    from .propagation import IdentityPropagator
    return IdentityPropagator()
