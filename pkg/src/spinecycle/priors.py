"""Statistical anatomy priors: per-group volume and inter-vertebral
distance models, fitted from annotated scans and applied as plausibility
checks and candidate generators.

Three model families per group (cervical / thoracic / lumbar):

* volume regressors     S_i = a * S_{i-1} + c1   and   S_i = b * S_{i+1} + c2
* a distance Gaussian over center-to-center gaps (mu, sigma)
* distance regressors predicting a gap from its neighbor gaps, in three
  modes: both neighbors, previous only, next only, each with relative
  error bounds (mean/stddev of the percent error on the training fit).

A gap between two vertebrae is attributed to the caudal vertebra's group.
When no identification is available the checks fall back to fixed
thresholds (half the smallest training vertebra volume, and a fixed gap).
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .labels import Group, GROUPS, group_of
from .records import Flag, VertebraRecord

log = logging.getLogger(__name__)

FALLBACK_VOLUME_MM3 = 3910.0   # half the smallest vertebra volume seen in training
FALLBACK_GAP_MM = 50.0         # unlabeled-gap threshold


class Direction(enum.Enum):
    """Which neighbor a volume prediction is conditioned on."""

    FROM_PREVIOUS = "previous"   # cranial neighbor known
    FROM_NEXT = "next"           # caudal neighbor known


class GapMode(enum.Enum):
    """Which neighbor gaps a distance prediction uses."""

    BOTH = "both"
    PREVIOUS = "previous"
    NEXT = "next"


class Verdict(enum.Enum):
    NORMAL = "Normal"
    ANOMALOUS = "Anomalous"


class Acceptance(enum.Enum):
    VERTEBRA = "Vertebra"
    NOISE = "Noise"


@dataclass(frozen=True)
class VolumeRegressor:
    a: float    # S_i = a * S_{i-1} + c1
    c1: float
    b: float    # S_i = b * S_{i+1} + c2
    c2: float

    def predict(self, neighbor_volume: float, direction: Direction) -> float:
        if direction is Direction.FROM_PREVIOUS:
            return self.a * neighbor_volume + self.c1
        return self.b * neighbor_volume + self.c2


@dataclass(frozen=True)
class DistanceGaussian:
    mu: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("distance Gaussian needs sigma > 0")

    def bounds(self) -> tuple[float, float]:
        return self.mu - 3 * self.sigma, self.mu + 3 * self.sigma


@dataclass(frozen=True)
class DistanceRegressor:
    m1: float   # both:     G_i = m1 * G_{i-1} + n1 * G_{i+1} + k1
    n1: float
    k1: float
    m2: float   # previous: G_i = m2 * G_{i-1} + k2
    k2: float
    n2: float   # next:     G_i = n2 * G_{i+1} + k3
    k3: float

    def __post_init__(self):
        s = self.m1 + self.n1
        if not (0.5 < s < 1.5):
            raise ValueError(f"distance regressor fails sanity band: m1+n1={s:.4f} not in (0.5, 1.5)")


@dataclass(frozen=True)
class MreBounds:
    """Percent relative-error statistics of a distance regressor mode."""

    mu: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("MRE bounds need sigma > 0")

    def bounds(self) -> tuple[float, float]:
        return self.mu - 3 * self.sigma, self.mu + 3 * self.sigma


@dataclass(frozen=True)
class GroupStats:
    volume: VolumeRegressor
    gaussian: DistanceGaussian
    distance: DistanceRegressor
    mre: dict[GapMode, MreBounds]

    def __post_init__(self):
        if set(self.mre) != set(GapMode):
            raise ValueError("MRE bounds required for all three gap modes")


@dataclass(frozen=True)
class AnatomyStats:
    groups: dict[Group, GroupStats]
    fallback_volume_mm3: float = FALLBACK_VOLUME_MM3
    fallback_gap_mm: float = FALLBACK_GAP_MM

    def __post_init__(self):
        if set(self.groups) != set(GROUPS):
            raise ValueError("stats must cover all three groups")
        if self.fallback_volume_mm3 <= 0 or self.fallback_gap_mm <= 0:
            raise ValueError("fallback thresholds must be positive")

    def for_group(self, group: Group) -> GroupStats:
        return self.groups[group]

    @staticmethod
    def default() -> "AnatomyStats":
        from .sidecars import load_default_stats

        return load_default_stats()


# -- application --------------------------------------------------------------


def predict_volume(stats: AnatomyStats, group: Group, neighbor_volume: float,
                   direction: Direction) -> float:
    """Expected volume of a vertebra next to a known neighbor of `group`."""
    if neighbor_volume < 0:
        raise ValueError("neighbor volume must be non-negative")
    return stats.for_group(group).volume.predict(neighbor_volume, direction)


@dataclass(frozen=True)
class NeighborContext:
    """Identified neighbor of an unlabeled candidate component."""

    group: Group
    volume_mm3: float
    direction: Direction = Direction.FROM_PREVIOUS


def accept_residual(stats: AnatomyStats, volume_mm3: float,
                    neighbor: NeighborContext | None = None,
                    accept_fraction: float = 0.5) -> Acceptance:
    """Decide whether a residual component is plausibly a vertebra.

    With an identified neighbor the threshold is accept_fraction of the
    regressor prediction; without one it is the fixed fallback volume.
    Monotone in the component volume by construction.
    """
    if volume_mm3 < 0:
        raise ValueError("component volume must be non-negative")
    if neighbor is not None:
        threshold = accept_fraction * predict_volume(
            stats, neighbor.group, neighbor.volume_mm3, neighbor.direction)
    else:
        threshold = stats.fallback_volume_mm3
    return Acceptance.VERTEBRA if volume_mm3 >= threshold else Acceptance.NOISE


def gap_group(cranial_label: int | None, caudal_label: int | None) -> Group | None:
    """Group a gap is attributed to: the caudal vertebra's, falling back to
    the cranial one when only that is labeled."""
    if caudal_label is not None:
        return group_of(caudal_label)
    if cranial_label is not None:
        return group_of(cranial_label)
    return None


def check_gap_gaussian(stats: AnatomyStats, group: Group, gap_mm: float) -> Verdict:
    """Range check against the group Gaussian: normal iff inside mu +/- 3 sigma
    (strict)."""
    if gap_mm <= 0:
        raise ValueError("gap must be positive")
    lo, hi = stats.for_group(group).gaussian.bounds()
    return Verdict.NORMAL if lo < gap_mm < hi else Verdict.ANOMALOUS


def predict_gap(stats: AnatomyStats, group: Group,
                prev_gap_mm: float | None = None,
                next_gap_mm: float | None = None) -> tuple[float, GapMode]:
    """Predict a gap from its neighbor gaps; returns (prediction, mode used)."""
    r = stats.for_group(group).distance
    if prev_gap_mm is not None and next_gap_mm is not None:
        return r.m1 * prev_gap_mm + r.n1 * next_gap_mm + r.k1, GapMode.BOTH
    if prev_gap_mm is not None:
        return r.m2 * prev_gap_mm + r.k2, GapMode.PREVIOUS
    if next_gap_mm is not None:
        return r.n2 * next_gap_mm + r.k3, GapMode.NEXT
    raise ValueError("predict_gap needs at least one neighbor gap")


def check_gap_mre(stats: AnatomyStats, group: Group, mode: GapMode,
                  observed_mm: float, predicted_mm: float) -> Verdict:
    """Relative-error check: MRE = 100 * |observed - predicted| / predicted,
    normal iff strictly inside the mode's mu +/- 3 sigma band."""
    if predicted_mm <= 0:
        raise ValueError("predicted gap must be positive")
    mre = 100.0 * abs(observed_mm - predicted_mm) / predicted_mm
    lo, hi = stats.for_group(group).mre[mode].bounds()
    return Verdict.NORMAL if lo < mre < hi else Verdict.ANOMALOUS


# -- fitting -------------------------------------------------------------------


@dataclass(frozen=True)
class ScanAnnotation:
    """Ground-truth vertebrae of one scan, ordered cranial to caudal."""

    scan_id: str
    labels: tuple[int, ...]
    volumes_mm3: tuple[float, ...]
    centroids_mm: np.ndarray      # (n, 3)

    def __post_init__(self):
        n = len(self.labels)
        cent = np.asarray(self.centroids_mm, dtype=np.float64)
        if cent.shape != (n, 3) or len(self.volumes_mm3) != n or n == 0:
            raise ValueError(f"scan {self.scan_id}: inconsistent annotation lengths")
        cent.setflags(write=False)
        object.__setattr__(self, "centroids_mm", cent)
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        object.__setattr__(self, "volumes_mm3", tuple(float(v) for v in self.volumes_mm3))
        for lab in self.labels:
            from . import labels as L

            L.check(lab)
        for u, v in zip(self.labels, self.labels[1:]):
            if not _anatomically_adjacent(u, v):
                from .labels import name_of

                raise ValueError(f"scan {self.scan_id}: labels {name_of(u)} -> {name_of(v)} "
                                 "are not anatomically adjacent")
        if any(v < 0 for v in self.volumes_mm3):
            raise ValueError(f"scan {self.scan_id}: negative volume")


def _anatomically_adjacent(u: int, v: int) -> bool:
    # graph-space succession plus the transitional chains:
    # T12->T13->L1, T11->L1 (absent T12), L5->L6
    if 1 <= u <= 23 and v == u + 1:
        return True
    return (u, v) in ((19, 25), (25, 20), (18, 20), (24, 26))


def _ols(design: np.ndarray, y: np.ndarray, group: Group, what: str) -> np.ndarray:
    n_params = design.shape[1]
    if design.shape[0] < n_params:
        raise ValueError(f"insufficient samples for group {group.value}: "
                         f"{what} needs at least {n_params}, got {design.shape[0]}")
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < n_params:
        raise ValueError(f"degenerate samples for group {group.value}: {what} design is rank-deficient")
    return coef


def _mre_stats(y: np.ndarray, yhat: np.ndarray, group: Group, what: str) -> MreBounds:
    if np.any(yhat <= 0):
        raise ValueError(f"group {group.value}: {what} produced a non-positive prediction")
    mre = 100.0 * np.abs(y - yhat) / yhat
    mu = float(mre.mean())
    sigma = float(mre.std())
    if sigma <= 0:
        raise ValueError(f"degenerate samples for group {group.value}: {what} errors have zero spread")
    return MreBounds(mu, sigma)


def fit_stats(annotations: list[ScanAnnotation]) -> AnatomyStats:
    """Fit all per-group priors from annotated scans by ordinary least
    squares (regressors) and sample moments (Gaussians, error bounds).

    Every group needs enough data for every sub-model; a group that cannot
    be fitted raises an error naming it.
    """
    vol_prev: dict[Group, list[tuple[float, float]]] = {g: [] for g in GROUPS}
    vol_next: dict[Group, list[tuple[float, float]]] = {g: [] for g in GROUPS}
    gap_all: dict[Group, list[float]] = {g: [] for g in GROUPS}
    gap_prev: dict[Group, list[tuple[float, float]]] = {g: [] for g in GROUPS}
    gap_next: dict[Group, list[tuple[float, float]]] = {g: [] for g in GROUPS}
    gap_both: dict[Group, list[tuple[float, float, float]]] = {g: [] for g in GROUPS}

    for scan in annotations:
        labs, vols, cent = scan.labels, scan.volumes_mm3, scan.centroids_mm
        for i in range(len(labs) - 1):
            if vols[i] <= 0 or vols[i + 1] <= 0:
                # volume 0 marks a vertebra without a usable volume
                # measurement (cropped, fused, or unsegmented); the pair
                # cannot constrain the volume regressors
                continue
            # the known neighbor's group picks the specialized regressor
            vol_prev[group_of(labs[i])].append((vols[i], vols[i + 1]))
            vol_next[group_of(labs[i + 1])].append((vols[i + 1], vols[i]))
        gaps = np.linalg.norm(np.diff(cent, axis=0), axis=1)
        if np.any(gaps <= 0):
            raise ValueError(f"scan {scan.scan_id}: non-positive inter-vertebral gap")
        ggroups = [group_of(labs[j + 1]) for j in range(len(gaps))]
        for j, (gap, g) in enumerate(zip(gaps, ggroups)):
            gap_all[g].append(float(gap))
            if j - 1 >= 0:
                gap_prev[g].append((float(gaps[j - 1]), float(gap)))
            if j + 1 < len(gaps):
                gap_next[g].append((float(gaps[j + 1]), float(gap)))
            if 0 <= j - 1 and j + 1 < len(gaps):
                gap_both[g].append((float(gaps[j - 1]), float(gaps[j + 1]), float(gap)))

    groups: dict[Group, GroupStats] = {}
    for g in GROUPS:
        xp = np.asarray(vol_prev[g], dtype=np.float64)
        xn = np.asarray(vol_next[g], dtype=np.float64)
        if xp.shape[0] < 2 or xn.shape[0] < 2:
            raise ValueError(f"insufficient samples for group {g.value}: "
                             "need at least 2 consecutive-vertebra pairs")
        a, c1 = _ols(np.c_[xp[:, 0], np.ones(len(xp))], xp[:, 1], g, "volume regressor (previous)")
        b, c2 = _ols(np.c_[xn[:, 0], np.ones(len(xn))], xn[:, 1], g, "volume regressor (next)")

        gsamp = np.asarray(gap_all[g], dtype=np.float64)
        if gsamp.size < 2:
            raise ValueError(f"insufficient samples for group {g.value}: "
                             "need at least 2 gaps for the distance Gaussian")
        sigma = float(gsamp.std())
        if sigma <= 0:
            raise ValueError(f"degenerate samples for group {g.value}: gaps have zero spread")
        gauss = DistanceGaussian(float(gsamp.mean()), sigma)

        bo = np.asarray(gap_both[g], dtype=np.float64)
        pv = np.asarray(gap_prev[g], dtype=np.float64)
        nx = np.asarray(gap_next[g], dtype=np.float64)
        m1, n1, k1 = _ols(np.c_[bo[:, 0], bo[:, 1], np.ones(len(bo))], bo[:, 2], g,
                          "distance regressor (both)") if bo.size else (None, None, None)
        if m1 is None:
            raise ValueError(f"insufficient samples for group {g.value}: no interior gap triples")
        m2, k2 = _ols(np.c_[pv[:, 0], np.ones(len(pv))], pv[:, 1], g, "distance regressor (previous)")
        n2, k3 = _ols(np.c_[nx[:, 0], np.ones(len(nx))], nx[:, 1], g, "distance regressor (next)")
        try:
            dist = DistanceRegressor(float(m1), float(n1), float(k1), float(m2),
                                     float(k2), float(n2), float(k3))
        except ValueError as exc:
            raise ValueError(f"group {g.value}: {exc}") from None

        mre = {
            GapMode.BOTH: _mre_stats(bo[:, 2], m1 * bo[:, 0] + n1 * bo[:, 1] + k1, g,
                                     "both-neighbor errors"),
            GapMode.PREVIOUS: _mre_stats(pv[:, 1], m2 * pv[:, 0] + k2, g, "previous-neighbor errors"),
            GapMode.NEXT: _mre_stats(nx[:, 1], n2 * nx[:, 0] + k3, g, "next-neighbor errors"),
        }
        groups[g] = GroupStats(VolumeRegressor(float(a), float(c1), float(b), float(c2)),
                               gauss, dist, mre)
        log.debug("fitted %s: a=%.4f c1=%.1f b=%.4f c2=%.1f mu=%.2f sigma=%.2f",
                  g.value, a, c1, b, c2, gauss.mu, gauss.sigma)
    return AnatomyStats(groups)


# -- candidate generation ------------------------------------------------------


def _record_gaps(records: list[VertebraRecord]) -> np.ndarray:
    locs = np.stack([r.location for r in records])
    return np.linalg.norm(np.diff(locs, axis=0), axis=1)


def _interpolated_record(rec: VertebraRecord) -> bool:
    """A placeholder whose location was constructed, not measured: it was
    mandated by the priors but segmentation found nothing there."""
    return rec.mask_id is None and Flag.EMPTY_SEGMENTATION in rec.flags


def _plausible_neighbor(stats: AnatomyStats, records: list[VertebraRecord],
                        gaps: np.ndarray, j: int) -> float | None:
    """Gap j as a regression input, or None if it is unusable.

    The error regressors were fitted on ordinary anatomy, so a neighbor
    gap that fails its own range check (e.g. one spanning a missing or
    displaced vertebra) would poison every prediction it feeds; such
    neighbors are treated as absent.  A gap with an interpolated endpoint
    is no measurement at all and is likewise withheld.
    """
    if _interpolated_record(records[j]) or _interpolated_record(records[j + 1]):
        return None
    group = gap_group(records[j].label, records[j + 1].label)
    if group is None:
        return None
    gap = float(gaps[j])
    if check_gap_gaussian(stats, group, gap) is Verdict.ANOMALOUS:
        return None
    return gap


def gap_anomalous(stats: AnatomyStats, records: list[VertebraRecord],
                  i: int, gaps: np.ndarray | None = None) -> tuple[bool, float]:
    """Check gap i (between records i and i+1) of a sorted record list.

    Returns (anomalous, predicted gap for spacing new candidates).  Labeled
    gaps get the Gaussian check and, when a usable neighbor gap exists, the
    relative-error check (anomalous if either trips).  Unlabeled gaps use
    the fixed fallback threshold.  A gap with an interpolated endpoint gets
    the range check only: its length is half inference already, and the
    placeholder carries its own finding.
    """
    if gaps is None:
        gaps = _record_gaps(records)
    gap = float(gaps[i])
    group = gap_group(records[i].label, records[i + 1].label)
    if group is None:
        return gap > stats.fallback_gap_mm, stats.fallback_gap_mm
    synthetic = _interpolated_record(records[i]) or _interpolated_record(records[i + 1])
    prev_gap = _plausible_neighbor(stats, records, gaps, i - 1) if i - 1 >= 0 else None
    next_gap = _plausible_neighbor(stats, records, gaps, i + 1) if i + 1 < len(gaps) else None
    verdicts = [check_gap_gaussian(stats, group, gap)]
    if synthetic:
        predicted = stats.for_group(group).gaussian.mu
        return Verdict.ANOMALOUS in verdicts, float(predicted)
    if prev_gap is not None or next_gap is not None:
        predicted, mode = predict_gap(stats, group, prev_gap, next_gap)
        if predicted > 0:
            verdicts.append(check_gap_mre(stats, group, mode, gap, predicted))
        else:
            predicted = stats.for_group(group).gaussian.mu
    else:
        predicted = stats.for_group(group).gaussian.mu
    return Verdict.ANOMALOUS in verdicts, float(predicted)


def gap_candidates(stats: AnatomyStats, records: list[VertebraRecord]) -> list[np.ndarray]:
    """Seed locations for vertebrae missing inside anomalously large gaps.

    For each anomalous consecutive pair, n = max(1, round(gap / predicted) - 1)
    candidates are placed evenly between the two locations.
    """
    if len(records) < 2:
        return []
    gaps = _record_gaps(records)
    out: list[np.ndarray] = []
    for i in range(len(records) - 1):
        anomalous, predicted = gap_anomalous(stats, records, i, gaps)
        if not anomalous:
            continue
        # candidates from too-small anomalous gaps land within the minimum
        # record separation and are discarded by the cycle's dedup step
        n_new = max(1, int(round(gaps[i] / predicted)) - 1)
        a, b = records[i].location, records[i + 1].location
        for k in range(1, n_new + 1):
            out.append(a + (b - a) * (k / (n_new + 1.0)))
    return out


def extreme_candidates(records: list[VertebraRecord],
                       fov_min_mm: np.ndarray, fov_max_mm: np.ndarray,
                       cranial_axis: int = 2) -> list[np.ndarray]:
    """Seed locations beyond the current end vertebrae when the sequence is
    anatomically incomplete (top label is not C1 / bottom is not L5 or L6).

    Linear extrapolation of the last step at each end; candidates outside
    the field of view are dropped.  Ends without a label are skipped: only
    an identified end can be judged incomplete.
    """
    if len(records) < 2:
        return []
    fov_min = np.asarray(fov_min_mm, dtype=np.float64)
    fov_max = np.asarray(fov_max_mm, dtype=np.float64)
    out: list[np.ndarray] = []
    top, second = records[0], records[1]
    if top.label is not None and top.label != 1:
        cand = top.location + (top.location - second.location)
        if np.all(cand > fov_min) and np.all(cand < fov_max):
            out.append(cand)
    bottom, before = records[-1], records[-2]
    if bottom.label is not None and bottom.label not in (24, 26):
        cand = bottom.location + (bottom.location - before.location)
        if np.all(cand > fov_min) and np.all(cand < fov_max):
            out.append(cand)
    return out
