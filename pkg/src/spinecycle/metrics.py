"""Evaluation metrics for labeling and segmentation quality.

* identification rate: fraction of ground-truth vertebrae for which a
  prediction with the same label lies within a distance tolerance
  (20 mm by default),
* mean localization distance over the correctly identified vertebrae
  (undefined, not zero, when nothing was identified),
* Dice overlap of binary masks,
* symmetric Hausdorff distance between mask surfaces, exact by default
  with an optional percentile to soften single-voxel outliers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import labels
from .grid import VolumeGrid, boundary_voxels

MATCH_TOLERANCE_MM = 20.0


@dataclass(frozen=True)
class LabeledPoint:
    label: int
    location_mm: np.ndarray


def _as_points(rows: list[tuple[int, np.ndarray]]) -> list[LabeledPoint]:
    out = []
    for code, loc in rows:
        labels.check(code)
        out.append(LabeledPoint(code, np.asarray(loc, dtype=np.float64)))
    return out


def match_identifications(gt: list[tuple[int, np.ndarray]],
                          pred: list[tuple[int, np.ndarray]],
                          tolerance_mm: float = MATCH_TOLERANCE_MM,
                          ) -> list[tuple[int, float | None]]:
    """Per ground-truth vertebra: (label, distance to the closest same-label
    prediction within tolerance, or None when not identified)."""
    gt_pts = _as_points(gt)
    pred_pts = _as_points(pred)
    out: list[tuple[int, float | None]] = []
    for g in gt_pts:
        best: float | None = None
        for p in pred_pts:
            if p.label != g.label:
                continue
            d = float(np.linalg.norm(p.location_mm - g.location_mm))
            if d <= tolerance_mm and (best is None or d < best):
                best = d
        out.append((g.label, best))
    return out


def id_rate(gt: list[tuple[int, np.ndarray]], pred: list[tuple[int, np.ndarray]],
            tolerance_mm: float = MATCH_TOLERANCE_MM) -> float:
    """Fraction of ground-truth vertebrae correctly identified."""
    if not gt:
        raise ValueError("id_rate needs at least one ground-truth vertebra")
    matches = match_identifications(gt, pred, tolerance_mm)
    return sum(1 for _, d in matches if d is not None) / len(matches)


def mean_localization_distance(gt: list[tuple[int, np.ndarray]],
                               pred: list[tuple[int, np.ndarray]],
                               tolerance_mm: float = MATCH_TOLERANCE_MM) -> float | None:
    """Mean distance over correctly identified vertebrae only; None (an
    explicit undefined, never 0) when no vertebra was identified."""
    dists = [d for _, d in match_identifications(gt, pred, tolerance_mm) if d is not None]
    if not dists:
        return None
    return float(np.mean(dists))


def dice(a: VolumeGrid, b: VolumeGrid) -> float:
    """Dice overlap 2|A^B| / (|A|+|B|); two empty masks count as 1."""
    if a.data.dtype != np.bool_ or b.data.dtype != np.bool_:
        raise ValueError("dice expects binary grids")
    if not a.same_geometry(b):
        raise ValueError("dice: grids have mismatched geometry")
    na = int(np.count_nonzero(a.data))
    nb = int(np.count_nonzero(b.data))
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.data & b.data))
    return 2.0 * inter / (na + nb)


def hausdorff(a: VolumeGrid, b: VolumeGrid, percentile: float = 100.0) -> float:
    """Symmetric surface distance in mm.

    Computes, for each boundary voxel of one mask, the distance to the
    nearest boundary voxel of the other; takes the given percentile of
    each directed distance set (100 = exact maximum) and returns the
    larger of the two directions.  Grids may differ in geometry since the
    surfaces live in world space.
    """
    if not (0 < percentile <= 100):
        raise ValueError("percentile must be in (0, 100]")
    pa = boundary_voxels(a)
    pb = boundary_voxels(b)
    if len(pa) == 0 or len(pb) == 0:
        if len(pa) == 0 and len(pb) == 0:
            return 0.0
        raise ValueError("hausdorff undefined: one mask is empty")
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    if percentile == 100.0:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


def hausdorff_bruteforce(a: VolumeGrid, b: VolumeGrid, percentile: float = 100.0) -> float:
    """Quadratic reference implementation over all boundary-voxel pairs."""
    pa = boundary_voxels(a)
    pb = boundary_voxels(b)
    if len(pa) == 0 or len(pb) == 0:
        if len(pa) == 0 and len(pb) == 0:
            return 0.0
        raise ValueError("hausdorff undefined: one mask is empty")
    d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    d_ab = d.min(axis=1)
    d_ba = d.min(axis=0)
    if percentile == 100.0:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


# -- per-vertebra evaluation ------------------------------------------------------


@dataclass(frozen=True)
class VertebraEval:
    label: int
    identified: bool
    distance_mm: float | None
    dice: float | None
    hausdorff_mm: float | None


@dataclass(frozen=True)
class EvalSummary:
    per_vertebra: tuple[VertebraEval, ...]
    id_rate: float
    mld_mm: float | None
    mean_dice: float | None
    mean_hausdorff_mm: float | None


def evaluate_case(gt_locs: list[tuple[int, np.ndarray]],
                  pred_locs: list[tuple[int, np.ndarray]],
                  gt_seg: VolumeGrid | None = None,
                  pred_seg: VolumeGrid | None = None,
                  tolerance_mm: float = MATCH_TOLERANCE_MM,
                  hd_percentile: float = 100.0) -> EvalSummary:
    """Full per-case evaluation.

    Segmentations are label maps (int16, 0 = background, vertebra label
    codes elsewhere).  Overlap metrics are computed only for correctly
    identified vertebrae whose label appears in both maps.
    """
    matches = match_identifications(gt_locs, pred_locs, tolerance_mm)
    rows: list[VertebraEval] = []
    for code, dist in matches:
        dsc = hd = None
        if dist is not None and gt_seg is not None and pred_seg is not None:
            gm = VolumeGrid(gt_seg.data == code, gt_seg.spacing, gt_seg.origin, gt_seg.orientation)
            pm = VolumeGrid(pred_seg.data == code, pred_seg.spacing, pred_seg.origin,
                            pred_seg.orientation)
            if gm.data.any() or pm.data.any():
                dsc = dice(gm, pm) if gm.same_geometry(pm) else None
                try:
                    hd = hausdorff(gm, pm, hd_percentile)
                except ValueError:
                    hd = None
        rows.append(VertebraEval(code, dist is not None, dist, dsc, hd))

    ident = [r for r in rows if r.identified]
    dices = [r.dice for r in rows if r.dice is not None]
    hds = [r.hausdorff_mm for r in rows if r.hausdorff_mm is not None]
    return EvalSummary(
        per_vertebra=tuple(rows),
        id_rate=len(ident) / len(rows) if rows else 0.0,
        mld_mm=float(np.mean([r.distance_mm for r in ident])) if ident else None,
        mean_dice=float(np.mean(dices)) if dices else None,
        mean_hausdorff_mm=float(np.mean(hds)) if hds else None,
    )


def format_eval_report(summary: EvalSummary) -> str:
    """Tabular text report: one row per ground-truth vertebra, then
    aggregates.  Columns are tab-separated; missing values print as '-'."""

    def fmt(v) -> str:
        if v is None:
            return "-"
        if isinstance(v, bool):
            return "yes" if v else "no"
        if isinstance(v, float):
            return repr(round(v, 9))
        return str(v)

    lines = ["label\tidentified\tdistance_mm\tdice\thausdorff_mm"]
    for r in summary.per_vertebra:
        lines.append("\t".join([labels.name_of(r.label), fmt(r.identified),
                                fmt(r.distance_mm), fmt(r.dice), fmt(r.hausdorff_mm)]))
    lines.append("")
    lines.append(f"id_rate\t{fmt(summary.id_rate)}")
    lines.append(f"mld_mm\t{fmt(summary.mld_mm) if summary.mld_mm is not None else 'undefined'}")
    lines.append(f"mean_dice\t{fmt(summary.mean_dice)}")
    lines.append(f"mean_hausdorff_mm\t{fmt(summary.mean_hausdorff_mm)}")
    return "\n".join(lines) + "\n"
