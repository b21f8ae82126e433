"""The iterative consistency cycle: detect candidate vertebrae, segment
them, classify every record, run the label graph, then audit the result.

The cycle owns no anatomy knowledge of its own -- the segmentor and
classifier are injected oracles (networks, subprocess wrappers, phantom
oracles), the statistical priors come from ``AnatomyStats`` and the
labeling from the graph module.  Each iteration:

1. unexplained spine-mask components  -> optional candidates
2. anomalously large gaps + open ends -> mandated candidates
3. drop candidates within ``min_separation_mm`` of known vertebrae
4. segment the survivors (a mandated candidate that comes back empty is
   kept as a placeholder record and flagged)
5. re-classify every record from two crops (spine mask / union of
   vertebra masks), fusing the two answers
6. sort, solve the label graph, apply transitional post-processing
7. run the consistency checks; stop when they pass, when the state stops
   changing, or at the iteration cap

Oracles must behave as pure functions of their inputs: classification of
independent records may be dispatched concurrently, and fixed-point
detection compares state fingerprints across iterations.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .graph import GraphWeights, build_graph, fuse_predictions, postprocess_transitional, shortest_path
from .grid import (
    VolumeGrid,
    connected_components,
    extract_crop,
    mask_volume_mm3,
    residual_mask,
    union_masks,
)
from .labels import group_of
from .priors import (
    Acceptance,
    AnatomyStats,
    Direction,
    NeighborContext,
    _record_gaps,
    accept_residual,
    extreme_candidates,
    gap_anomalous,
    gap_candidates,
)
from .records import (
    Flag,
    InconsistencyReport,
    LocalPrediction,
    ReportEntry,
    SpineState,
    TransitionalEvent,
    VertebraRecord,
    sort_records,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentationResult:
    """A segmentor answer: refined location plus a binary mask on the CT
    geometry."""

    location_mm: np.ndarray
    mask: VolumeGrid


@runtime_checkable
class SegmentorOracle(Protocol):
    def segment(self, ct: VolumeGrid, seed_mm: np.ndarray) -> SegmentationResult | None:
        """Segment the vertebra nearest ``seed_mm``; None when there is none."""


@runtime_checkable
class ClassifierOracle(Protocol):
    def classify(self, crop: VolumeGrid) -> LocalPrediction | None:
        """Label distribution for the vertebra centered in a crop; None for
        no opinion."""


@dataclass(frozen=True)
class CycleConfig:
    max_iterations: int = 10
    min_separation_mm: float = 10.0
    crop_side_voxels: int = 128
    weights: GraphWeights = field(default_factory=GraphWeights)
    connectivity: int = 26
    accept_fraction: float = 0.5
    cranial_axis: int = 2
    threads: int = 1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.min_separation_mm < 0:
            raise ValueError("min_separation_mm must be non-negative")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")


@dataclass(frozen=True)
class _Candidate:
    location: np.ndarray
    mandated: bool


def state_fingerprint(state: SpineState) -> str:
    """Digest of the decision-relevant state: rounded locations (0.1 mm),
    mask sizes and labels.  Used for fixed-point detection."""
    rows = []
    for rec in state.records:
        coords = tuple(int(round(c * 10.0)) for c in rec.location)
        voxels = int(np.count_nonzero(state.masks[rec.mask_id].data)) if rec.mask_id else -1
        rows.append((coords, voxels, rec.label if rec.label is not None else 0))
    digest = hashlib.sha256(repr(sorted(rows)).encode("ascii"))
    return digest.hexdigest()


def _record_masks(state: SpineState) -> list[VolumeGrid]:
    return [state.masks[r.mask_id] for r in state.records if r.mask_id is not None]


def _nearest_neighbor_context(records: list[VertebraRecord],
                              location: np.ndarray) -> NeighborContext | None:
    """Context of the nearest labeled, volumed record; direction says which
    side of the query it sits on (cranial neighbor = predict forward)."""
    best = None
    best_d = np.inf
    for rec in records:
        if rec.label is None or rec.mask_id is None:
            continue
        d = float(np.linalg.norm(rec.location - location))
        if d < best_d:
            best, best_d = rec, d
    if best is None:
        return None
    direction = Direction.FROM_PREVIOUS if best.location[2] > location[2] else Direction.FROM_NEXT
    return NeighborContext(group=group_of(best.label), volume_mm3=best.volume_mm3,
                           direction=direction)


def _accepted_residuals(state: SpineState, spine_mask: VolumeGrid, stats: AnatomyStats,
                        config: CycleConfig):
    """Connected components of spine mask minus known vertebrae that pass
    the volume plausibility gate."""
    masks = _record_masks(state)
    residual = residual_mask(spine_mask, masks) if masks else spine_mask
    if not residual.data.any():
        return []
    out = []
    for comp in connected_components(residual, config.connectivity).components:
        neighbor = _nearest_neighbor_context(state.records, comp.centroid_mm)
        verdict = accept_residual(stats, comp.volume_mm3, neighbor,
                                  accept_fraction=config.accept_fraction)
        if verdict is Acceptance.VERTEBRA:
            out.append(comp)
    return out


def _gather_candidates(state: SpineState, ct: VolumeGrid, spine_mask: VolumeGrid,
                       stats: AnatomyStats, config: CycleConfig) -> list[_Candidate]:
    cands = [_Candidate(np.asarray(c.centroid_mm, dtype=np.float64), mandated=False)
             for c in _accepted_residuals(state, spine_mask, stats, config)]
    if state.records:
        for loc in gap_candidates(stats, state.records):
            cands.append(_Candidate(loc, mandated=True))
        fov_min, fov_max = ct.world_bounds()
        for loc in extreme_candidates(state.records, fov_min, fov_max, config.cranial_axis):
            cands.append(_Candidate(loc, mandated=True))
    # cranial first; keep anything at least min_separation from every known
    # record and every candidate already kept
    cands.sort(key=lambda c: -c.location[config.cranial_axis])
    taken = [r.location for r in state.records]
    kept = []
    for cand in cands:
        if any(np.linalg.norm(cand.location - t) < config.min_separation_mm for t in taken):
            continue
        kept.append(cand)
        taken.append(cand.location)
    return kept


def _segment_candidates(state: SpineState, ct: VolumeGrid, segmentor: SegmentorOracle,
                        candidates: list[_Candidate], config: CycleConfig) -> int:
    """Turn candidates into records.  Returns the number added."""
    added = 0
    for cand in candidates:
        result = segmentor.segment(ct, cand.location)
        if result is None:
            if not cand.mandated:
                continue
            state.records.append(VertebraRecord(
                location=cand.location, flags=frozenset({Flag.EMPTY_SEGMENTATION})))
            added += 1
            continue
        if not result.mask.same_geometry(ct):
            raise ValueError("segmentor returned a mask with mismatched geometry")
        refined = np.asarray(result.location_mm, dtype=np.float64)
        near = [r for r in state.records
                if np.linalg.norm(r.location - refined) < config.min_separation_mm]
        if near:
            continue    # segmentor converged onto an already-known vertebra
        mid = state.new_mask_id()
        state.masks[mid] = result.mask
        state.records.append(VertebraRecord(
            location=refined, mask_id=mid, volume_mm3=mask_volume_mm3(result.mask)))
        added += 1
    state.records = sort_records(state.records, config.cranial_axis)
    return added


def _classify_records(state: SpineState, spine_mask: VolumeGrid,
                      classifier: ClassifierOracle, config: CycleConfig) -> None:
    """Give every record a fused label distribution from its two crops."""
    union = union_masks(_record_masks(state))

    def predict(rec: VertebraRecord) -> LocalPrediction:
        spine_crop = extract_crop(spine_mask, rec.location, config.crop_side_voxels)
        spine_pred = classifier.classify(spine_crop) if spine_crop.data.any() else None
        union_pred = None
        if union is not None:
            union_crop = extract_crop(union, rec.location, config.crop_side_voxels)
            if union_crop.data.any():
                union_pred = classifier.classify(union_crop)
        if spine_pred is None and union_pred is None:
            return LocalPrediction.uniform()
        return fuse_predictions(spine_pred, union_pred)

    if config.threads > 1 and len(state.records) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            preds = list(pool.map(predict, state.records))
    else:
        preds = [predict(r) for r in state.records]
    state.records = [r.with_(local_probs=p) for r, p in zip(state.records, preds)]


def _label_records(state: SpineState, config: CycleConfig) -> None:
    """Sort, solve the label graph and apply transitional post-processing."""
    state.records = sort_records(state.records, config.cranial_axis)
    graph = build_graph([r.local_probs for r in state.records], config.weights)
    result = postprocess_transitional(shortest_path(graph).labels)
    state.events = [TransitionalEvent(position=p, kind=k) for p, k in result.events]
    recs = []
    for i, rec in enumerate(state.records):
        flags = rec.flags - {Flag.LABEL_REPEAT}
        if i in result.repeat_flags:
            flags = flags | {Flag.LABEL_REPEAT}
        recs.append(rec.with_(label=result.labels[i], flags=flags))
    state.records = recs


def check_consistency(state: SpineState, ct: VolumeGrid, spine_mask: VolumeGrid,
                      stats: AnatomyStats, config: CycleConfig) -> InconsistencyReport:
    """Audit a labeled state; an empty report means consistent.

    Checks, in report order: inter-vertebral distances against the priors,
    unexplained spine-mask volume, repeated labels on the solved path,
    sequence ends that should have been extendable, and records whose
    mandated segmentation came back empty.
    """
    entries = []
    recs = state.records

    # a displaced vertebra breaks every gap that touches it, so contiguous
    # runs of anomalous gaps are reported as one finding
    gaps = _record_gaps(recs) if len(recs) >= 2 else None
    bad: list[tuple[int, float]] = []

    def flush_bad():
        if not bad:
            return
        first, last = bad[0][0], bad[-1][0]
        locs = np.stack([recs[j].location for j in range(first, last + 2)])
        parts = ", ".join(f"{gaps[j]:.1f} mm between records {j} and {j + 1} "
                          f"(expected about {p:.1f} mm)" for j, p in bad)
        entries.append(ReportEntry(
            region_min=tuple(locs.min(axis=0)), region_max=tuple(locs.max(axis=0)),
            kind=Flag.DISTANCE_ANOMALY, detail="implausible spacing: " + parts))
        bad.clear()

    for i in range(len(recs) - 1):
        anomalous, predicted = gap_anomalous(stats, recs, i, gaps)
        if anomalous:
            bad.append((i, predicted))
        else:
            flush_bad()
    flush_bad()

    for comp in _accepted_residuals(state, spine_mask, stats, config):
        entries.append(ReportEntry(
            region_min=tuple(comp.bbox_min_mm), region_max=tuple(comp.bbox_max_mm),
            kind=Flag.VOLUME_ANOMALY,
            detail=f"unexplained component of {comp.volume_mm3:.0f} mm3 "
                   f"near {np.array2string(np.asarray(comp.centroid_mm), precision=1)}"))

    for i, rec in enumerate(recs):
        if Flag.LABEL_REPEAT in rec.flags:
            entries.append(ReportEntry(
                region_min=tuple(rec.location), region_max=tuple(rec.location),
                kind=Flag.LABEL_REPEAT,
                detail=f"record {i} repeats a label the path already used"))

    fov_min, fov_max = ct.world_bounds()
    for loc in extreme_candidates(recs, fov_min, fov_max, config.cranial_axis):
        entries.append(ReportEntry(
            region_min=tuple(loc), region_max=tuple(loc), kind=Flag.DISTANCE_ANOMALY,
            detail="sequence end is implausible: a further vertebra would fit "
                   "inside the field of view"))

    for i, rec in enumerate(recs):
        if Flag.EMPTY_SEGMENTATION in rec.flags and rec.mask_id is None:
            entries.append(ReportEntry(
                region_min=tuple(rec.location), region_max=tuple(rec.location),
                kind=Flag.EMPTY_SEGMENTATION,
                detail=f"record {i} was required by the priors but segmentation "
                       f"found nothing there"))

    return InconsistencyReport(entries=entries)


def run_cycle(ct: VolumeGrid, spine_mask: VolumeGrid, segmentor: SegmentorOracle,
              classifier: ClassifierOracle, stats: AnatomyStats | None = None,
              config: CycleConfig | None = None,
              initial_state: SpineState | None = None) -> SpineState:
    """Run the full cycle to convergence (see module docstring)."""
    if not spine_mask.same_geometry(ct):
        raise ValueError("spine mask and CT must share geometry")
    if not spine_mask.data.any():
        raise ValueError("spine mask is empty")
    stats = stats if stats is not None else AnatomyStats.default()
    config = config if config is not None else CycleConfig()
    if initial_state is not None:
        # work on a copy; the caller keeps its state (records and grids are
        # themselves immutable)
        state = SpineState(records=list(initial_state.records),
                           masks=dict(initial_state.masks),
                           iteration=initial_state.iteration,
                           report=initial_state.report,
                           events=list(initial_state.events),
                           _next_mask_id=initial_state._next_mask_id)
    else:
        state = SpineState()

    fp_prev = state_fingerprint(state)
    for _ in range(config.max_iterations):
        state.iteration += 1
        candidates = _gather_candidates(state, ct, spine_mask, stats, config)
        added = _segment_candidates(state, ct, segmentor, candidates, config)
        if state.records:
            _classify_records(state, spine_mask, classifier, config)
            _label_records(state, config)
        state.report = check_consistency(state, ct, spine_mask, stats, config)
        fp = state_fingerprint(state)
        log.debug("iteration %d: %d candidates, %d new records, %d open findings",
                  state.iteration, len(candidates), added, len(state.report.entries))
        if state.report.passed:
            log.info("consistent after %d iteration(s)", state.iteration)
            break
        if fp == fp_prev:
            log.info("fixed point after %d iteration(s) with %d finding(s)",
                     state.iteration, len(state.report.entries))
            break
        fp_prev = fp
    return state
