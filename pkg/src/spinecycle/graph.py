"""Global vertebra identification as a shortest path over a layered graph.

One layer (column) per detected vertebra, sorted cranial to caudal; one
node per graph-space label (24 per column).  Entering a node costs its
unary term,

    unary(i, j) = (1 - P_i(j)) + w_group * (1 - P_i(group of j)),

built from the fused per-vertebra label probabilities.  Regular edges
connect (i, j) to (i+1, j+1) at zero cost, so a path reads off a run of
anatomically consecutive labels.  Three weighted special edges encode the
known anatomic variants:

* T12 -> T12 : a 13th thoracic vertebra (relabeled T13 afterwards)
* T11 -> L1  : a missing twelfth thoracic vertebra
* L5 -> L5   : a sixth lumbar vertebra (relabeled L6 afterwards)

A virtual source connects to every first-column node and every
last-column node connects to a virtual sink, both at zero cost, so the
label window itself is chosen by the optimization.

Two independent solvers are provided: Dijkstra (`shortest_path`) and an
exhaustive column sweep (`dp_oracle`).  Both accumulate costs in the same
column order and break cost ties by the lexicographically smallest label
sequence, so their results are comparable exactly.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from . import labels
from .labels import Group, GROUPS
from .records import LocalPrediction

N = labels.N_GRAPH_LABELS  # 24

# special steps as (from_label, to_label) in graph space
STEP_T13 = (19, 19)      # repeat T12, post-processed to T13
STEP_NO_T12 = (18, 20)   # T11 directly to L1
STEP_L6 = (24, 24)       # repeat L5, post-processed to L6

DEFAULT_SPECIAL_WEIGHT = 0.5
DEFAULT_GROUP_WEIGHT = 1.0


@dataclass(frozen=True)
class GraphWeights:
    """Energy weights; all must be non-negative."""

    w_group: float = DEFAULT_GROUP_WEIGHT
    w_t13: float = DEFAULT_SPECIAL_WEIGHT
    w_no_t12: float = DEFAULT_SPECIAL_WEIGHT
    w_l6: float = DEFAULT_SPECIAL_WEIGHT
    regular_edge_cost: float = 0.0   # hook; the model keeps regular steps free

    def __post_init__(self):
        if min(self.w_group, self.w_t13, self.w_no_t12, self.w_l6,
               self.regular_edge_cost) < 0:
            raise ValueError("graph weights must be non-negative")


@dataclass(frozen=True)
class IdentGraph:
    """Layered graph: unary costs per (column, label) plus edge weights."""

    unary: np.ndarray          # (n_columns, 24)
    weights: GraphWeights

    def __post_init__(self):
        u = np.asarray(self.unary, dtype=np.float64)
        if u.ndim != 2 or u.shape[1] != N or u.shape[0] < 1:
            raise ValueError(f"unary matrix must be (n>=1, {N}), got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("unary costs must be finite")
        u.setflags(write=False)
        object.__setattr__(self, "unary", u)

    @property
    def n_columns(self) -> int:
        return self.unary.shape[0]

    def step_cost(self, from_label: int, to_label: int) -> float | None:
        """Edge cost between consecutive columns, None if no edge exists."""
        w = self.weights
        if to_label == from_label + 1 and from_label <= 23:
            return w.regular_edge_cost
        if (from_label, to_label) == STEP_T13:
            return w.w_t13
        if (from_label, to_label) == STEP_NO_T12:
            return w.w_no_t12
        if (from_label, to_label) == STEP_L6:
            return w.w_l6
        return None

    def out_steps(self, from_label: int) -> list[tuple[int, float]]:
        out = []
        w = self.weights
        if from_label <= 23:
            out.append((from_label + 1, w.regular_edge_cost))
        if from_label == STEP_T13[0]:
            out.append((STEP_T13[1], w.w_t13))
        if from_label == STEP_NO_T12[0]:
            out.append((STEP_NO_T12[1], w.w_no_t12))
        if from_label == STEP_L6[0]:
            out.append((STEP_L6[1], w.w_l6))
        return out


def fuse_predictions(spine_pred: LocalPrediction | None,
                     union_pred: LocalPrediction | None) -> LocalPrediction:
    """Average the two crop classifications of one vertebra.

    An absent input (its crop held no mask voxels) is replaced by the
    uniform distribution; both absent is an error because there was
    nothing to classify at all.
    """
    if spine_pred is None and union_pred is None:
        raise ValueError("fuse_predictions: both inputs absent")
    a = spine_pred if spine_pred is not None else LocalPrediction.uniform()
    b = union_pred if union_pred is not None else LocalPrediction.uniform()

    def mean_norm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        m = (np.asarray(x) + np.asarray(y)) / 2.0
        return m / m.sum()

    return LocalPrediction(
        group_probs=mean_norm(a.group_probs, b.group_probs),
        within_cervical=mean_norm(a.within_cervical, b.within_cervical),
        within_thoracic=mean_norm(a.within_thoracic, b.within_thoracic),
        within_lumbar=mean_norm(a.within_lumbar, b.within_lumbar),
    )


def build_graph(predictions: list[LocalPrediction],
                weights: GraphWeights = GraphWeights()) -> IdentGraph:
    """Assemble the layered graph for one sorted vertebra sequence."""
    if not predictions:
        raise ValueError("build_graph needs at least one prediction")
    n = len(predictions)
    unary = np.empty((n, N), dtype=np.float64)
    group_idx = np.array([GROUPS.index(labels.group_of(j)) for j in range(1, N + 1)])
    for i, pred in enumerate(predictions):
        pv = pred.fused()
        pg = np.asarray(pred.group_probs)[group_idx]
        unary[i] = (1.0 - pv) + weights.w_group * (1.0 - pg)
    return IdentGraph(unary, weights)


@dataclass(frozen=True)
class LabelPath:
    """A source-to-sink path: one graph-space label per column."""

    labels: tuple[int, ...]
    total_cost: float
    special_steps: tuple[tuple[int, str], ...] = ()   # (column of later node, kind)

    def __post_init__(self):
        for lab in self.labels:
            if not (labels.GRAPH_MIN <= lab <= labels.GRAPH_MAX):
                raise ValueError(f"path label {lab} outside graph space")


_STEP_KIND = {STEP_T13: "T13", STEP_NO_T12: "AbsentT12", STEP_L6: "L6"}


def _specials_of(seq: tuple[int, ...]) -> tuple[tuple[int, str], ...]:
    out = []
    for i in range(1, len(seq)):
        kind = _STEP_KIND.get((seq[i - 1], seq[i]))
        if kind is not None:
            out.append((i, kind))
    return tuple(out)


def shortest_path(graph: IdentGraph) -> LabelPath:
    """Dijkstra over the layered graph.

    The heap priority is (cost, label sequence), so among equal-cost paths
    the lexicographically smallest sequence wins; costs accumulate
    left to right exactly as in dp_oracle, making the two bit-comparable.
    """
    n = graph.n_columns
    unary = graph.unary
    # nodes: (column, label); virtual source = (-1, 0), sink = (n, 0)
    heap: list[tuple[float, tuple[int, ...], int, int]] = []
    for j in range(1, N + 1):
        heapq.heappush(heap, (float(unary[0, j - 1]), (j,), 0, j))
    seen: set[tuple[int, int]] = set()
    while heap:
        cost, seq, col, lab = heapq.heappop(heap)
        if (col, lab) in seen:
            continue
        seen.add((col, lab))
        if col == n:
            return LabelPath(seq, cost, _specials_of(seq))
        if col == n - 1:
            heapq.heappush(heap, (cost, seq, n, 0))   # zero-cost sink edge
            continue
        for nxt, w in graph.out_steps(lab):
            if (col + 1, nxt) in seen:
                continue
            heapq.heappush(heap, (cost + w + float(unary[col + 1, nxt - 1]),
                                  seq + (nxt,), col + 1, nxt))
    raise RuntimeError("layered graph had no source-to-sink path")  # pragma: no cover


def dp_oracle(graph: IdentGraph) -> LabelPath:
    """Exhaustive column-by-column sweep; the independent reference solver.

    Keeps, for every node, the cheapest (cost, sequence) pair over all
    paths from the source, comparing sequences lexicographically on ties.
    Prefix ordering is preserved by appending a common suffix, so the
    per-node choice is globally optimal.
    """
    n = graph.n_columns
    unary = graph.unary
    best: list[tuple[float, tuple[int, ...]] | None] = [
        (float(unary[0, j - 1]), (j,)) for j in range(1, N + 1)
    ]
    for col in range(1, n):
        nxt: list[tuple[float, tuple[int, ...]] | None] = [None] * N
        for j in range(1, N + 1):
            cur = best[j - 1]
            if cur is None:
                continue
            for to_label, w in graph.out_steps(j):
                cand = (cur[0] + w + float(unary[col, to_label - 1]), cur[1] + (to_label,))
                old = nxt[to_label - 1]
                if old is None or cand < old:
                    nxt[to_label - 1] = cand
        best = nxt
    winner = min(c for c in best if c is not None)
    return LabelPath(winner[1], winner[0], _specials_of(winner[1]))


# -- post-processing -----------------------------------------------------------


@dataclass(frozen=True)
class PostprocessResult:
    labels: tuple[int, ...]                       # codes 1..26
    events: tuple[tuple[int, str], ...]           # (position, "T13"|"L6"|"AbsentT12")
    repeat_flags: tuple[int, ...]                  # positions flagged LabelRepeat


def postprocess_transitional(path_labels: tuple[int, ...] | list[int]) -> PostprocessResult:
    """Rewrite special steps into transitional codes.

    The second of two consecutive T12s becomes T13 (code 25); the second
    of two consecutive L5s becomes L6 (code 26); a T11 -> L1 step is
    recorded as an AbsentT12 event.  Each variant may occur once; any
    further repeat, or a step that is neither consecutive nor special,
    flags the position as a label repeat and leaves the label unchanged.
    """
    seq = [int(v) for v in path_labels]
    for v in seq:
        if not (labels.GRAPH_MIN <= v <= labels.GRAPH_MAX):
            raise ValueError(f"post-processing input label {v} outside graph space")
    out = list(seq)
    events: list[tuple[int, str]] = []
    flags: list[int] = []
    used = {"T13": False, "L6": False, "AbsentT12": False}
    for i in range(1, len(seq)):
        step = (seq[i - 1], seq[i])
        if step[1] == step[0] + 1 and step[0] <= 23:
            continue
        kind = _STEP_KIND.get(step)
        if kind is None or used[kind]:
            flags.append(i)
            continue
        used[kind] = True
        events.append((i, kind))
        if kind == "T13":
            out[i] = labels.T13
        elif kind == "L6":
            out[i] = labels.L6
    return PostprocessResult(tuple(out), tuple(events), tuple(flags))
