"""Query-target match costs and an exact Hungarian assignment solver.

The cost of assigning query i to target j combines the negated sigmoid
class probability with L1 and GIoU box distances. Target confidence
scores never enter the cost; they only weight losses downstream.

The solver handles rectangular problems (T targets <= N queries): every
target is matched to exactly one query and the leftover queries carry
NO_OBJECT. Among equal-cost optima the lexicographically smallest
query-to-target vector is returned, with NO_OBJECT ordered after every
real target index, so repeated runs are reproducible down to the bit
regardless of which optimum the underlying LAP engine happens to emit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import boxes_to_array, pairwise_giou, pairwise_l1

NO_OBJECT = -1

# Reduced costs below this (scaled by the cost magnitude) are treated as
# ties when testing whether the optimum is unique.
_TIE_RTOL = 1e-11


class TooManyTargets(ValueError):
    pass


class InvalidClass(ValueError):
    pass


@dataclass(frozen=True)
class CostWeights:
    """Weights of the classification / L1 / GIoU cost components."""

    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0

    def __post_init__(self) -> None:
        if self.w_cls < 0 or self.w_l1 < 0 or self.w_giou < 0:
            raise ValueError("cost weights must be nonnegative")
        if self.w_cls == 0 and self.w_l1 == 0 and self.w_giou == 0:
            raise ValueError("at least one cost weight must be positive")


@dataclass(frozen=True)
class Assignment:
    """Result of one bipartite matching.

    target_index[q] is the matched target of query q, or NO_OBJECT.
    """

    target_index: np.ndarray
    total_cost: float

    @property
    def num_targets(self) -> int:
        return int((self.target_index != NO_OBJECT).sum())


def cost_matrix_arrays(
    probs: np.ndarray,
    boxes: np.ndarray,
    target_boxes: np.ndarray,
    target_labels: np.ndarray,
    weights: CostWeights,
) -> np.ndarray:
    """Build the (N, T) match-cost matrix from raw arrays.

    probs: (N, C) sigmoid class probabilities; boxes: (N, 4) center format;
    target_boxes: (T, 4); target_labels: (T,) ints in [0, C).
    """
    n, c = probs.shape
    t = target_boxes.shape[0]
    if t > n:
        raise TooManyTargets(f"{t} targets for {n} queries")
    if t == 0:
        return np.zeros((n, 0), dtype=np.float64)
    if target_labels.min() < 0 or target_labels.max() >= c:
        raise InvalidClass(f"target labels must lie in [0, {c})")

    cost_cls = -probs[:, target_labels]
    cost_l1 = pairwise_l1(boxes, target_boxes)
    cost_giou = 1.0 - pairwise_giou(boxes, target_boxes)
    return weights.w_cls * cost_cls + weights.w_l1 * cost_l1 + weights.w_giou * cost_giou


def build_cost_matrix(preds, targets, weights: CostWeights) -> np.ndarray:
    """Cost matrix for a Predictions object against [(Box, class), ...] targets."""
    t_boxes = boxes_to_array(b for b, _ in targets)
    t_labels = np.array([c for _, c in targets], dtype=np.int64)
    return cost_matrix_arrays(preds.probs, preds.boxes, t_boxes, t_labels, weights)


def hungarian(cost: np.ndarray) -> Assignment:
    """Exact minimum-cost assignment of all T targets to distinct queries.

    cost: (N, T) finite matrix with T <= N. Ties between optimal solutions
    resolve to the lexicographically smallest target-index vector (with
    NO_OBJECT sorting after all real indices).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, t = cost.shape
    if t > n:
        raise TooManyTargets(f"{t} targets for {n} queries")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")

    if t == 0:
        return Assignment(np.full(n, NO_OBJECT, dtype=np.int64), 0.0)

    rows, cols = linear_sum_assignment(cost)
    target_of_query = np.full(n, NO_OBJECT, dtype=np.int64)
    target_of_query[rows] = cols
    opt_cost = float(cost[rows, cols].sum())

    tol = _TIE_RTOL * max(1.0, float(np.abs(cost).max()))
    if _has_alternative_optimum(cost, rows, cols, tol):
        target_of_query = _lexicographic_optimum(cost, opt_cost, tol)
        matched = target_of_query != NO_OBJECT
        opt_cost = float(cost[np.nonzero(matched)[0], target_of_query[matched]].sum())

    return Assignment(target_of_query, opt_cost)


def _has_alternative_optimum(cost: np.ndarray, rows: np.ndarray, cols: np.ndarray, tol: float) -> bool:
    """Decide whether a second minimum-cost assignment exists.

    Recovers optimal dual potentials from the primal solution (a
    difference-constraint system solved by vectorized Bellman-Ford
    relaxation). Every optimal assignment lives on edges with zero
    reduced cost, and conversely any rearrangement along such edges is
    optimal, so a second optimum exists exactly when the zero-reduced-cost
    subgraph carries an alternating cycle, or an alternating path from an
    unmatched query to a matched query with zero potential (which the
    rearrangement frees).
    """
    n, t = cost.shape
    alpha = np.full(t, np.inf)
    unmatched = np.setdiff1d(np.arange(n), rows, assume_unique=False)
    if unmatched.size:
        alpha = cost[unmatched, :].min(axis=0)
    else:
        alpha[cols[0]] = cost[rows[0], cols[0]]

    # Pointwise-max feasible potentials: relax
    # alpha_j <= alpha_{sigma(q)} + cost(q, j) - cost(q, sigma(q)) to a fixpoint.
    shift = cost[rows, :] - cost[rows, cols][:, None]
    for _ in range(t + 1):
        cand = (alpha[cols][:, None] + shift).min(axis=0)
        new = np.minimum(alpha, cand)
        if np.array_equal(new, alpha):
            break
        alpha = new

    beta = np.zeros(n)
    beta[rows] = cost[rows, cols] - alpha[cols]
    reduced = cost - alpha[None, :] - beta[:, None]
    if (reduced < -tol).any():
        return True  # potentials degraded numerically; be conservative

    # Condense to a directed graph on targets: j -> j' when the query
    # matched to j has a tight edge to j'. An alternating cycle is a cycle
    # here; an alternating path enters at targets tight to an unmatched
    # query and must end at a freeable (zero-potential) matched query.
    query_of_target = np.empty(t, dtype=np.int64)
    query_of_target[cols] = rows
    tight = np.abs(reduced) <= tol
    adj = tight[query_of_target, :]
    np.fill_diagonal(adj, False)
    freeable = np.abs(beta[query_of_target]) <= tol

    if unmatched.size:
        entry = tight[unmatched, :].any(axis=0)
        seen = entry.copy()
        frontier = entry
        while frontier.any():
            if (seen & freeable).any():
                return True
            nxt = adj[frontier, :].any(axis=0) & ~seen
            seen |= nxt
            frontier = nxt
        if (seen & freeable).any():
            return True

    return _has_cycle(adj)


def _has_cycle(adj: np.ndarray) -> bool:
    """Cycle test for a small directed graph given as a dense bool matrix."""
    t = adj.shape[0]
    state = [0] * t  # 0 unvisited, 1 on stack, 2 done
    for start in range(t):
        if state[start]:
            continue
        stack = [(start, iter(np.nonzero(adj[start])[0]))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                nxt = int(nxt)
                if state[nxt] == 1:
                    return True
                if state[nxt] == 0:
                    state[nxt] = 1
                    stack.append((nxt, iter(np.nonzero(adj[nxt])[0])))
                    advanced = True
                    break
            if not advanced:
                state[node] = 2
                stack.pop()
    return False


def _lap_cost(cost: np.ndarray, queries: list[int], targets: list[int]) -> float:
    """Minimum total cost of matching all ``targets`` to distinct ``queries``."""
    if not targets:
        return 0.0
    if len(targets) > len(queries):
        return np.inf
    sub = cost[np.ix_(queries, targets)]
    r, c = linear_sum_assignment(sub)
    return float(sub[r, c].sum())


def _lexicographic_optimum(cost: np.ndarray, opt_cost: float, tol: float) -> np.ndarray:
    """Smallest optimal target-index vector, fixing one query at a time.

    A candidate (query, target) pair is kept when the fixed prefix plus an
    optimal completion over the untouched rows and columns still reaches
    the optimal total. When no target qualifies, leaving the query
    unmatched is necessarily part of an optimal completion.
    """
    n, t = cost.shape
    assigned = np.full(n, NO_OBJECT, dtype=np.int64)
    remaining = list(range(t))
    prefix = 0.0
    for q in range(n):
        if not remaining:
            break
        later = list(range(q + 1, n))
        for j in remaining:
            rest = _lap_cost(cost, later, [x for x in remaining if x != j])
            if prefix + cost[q, j] + rest <= opt_cost + tol:
                assigned[q] = j
                prefix += cost[q, j]
                remaining.remove(j)
                break
    return assigned
