"""Value types passed between the pipeline stages.

A VertebraRecord is one located vertebra: a world-space location, an
optional reference to a binary mask held by the owning SpineState, the
hierarchical label probabilities produced by classification, the assigned
label and any inconsistency flags.  Records are immutable; the cycle
produces updated copies via dataclasses.replace.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import labels
from .labels import Group, GROUPS, GROUP_SIZES


class Flag(enum.Enum):
    """Inconsistency vocabulary shared by records and report entries."""

    EMPTY_SEGMENTATION = "EmptySegmentation"
    DISTANCE_ANOMALY = "DistanceAnomaly"
    VOLUME_ANOMALY = "VolumeAnomaly"
    LABEL_REPEAT = "LabelRepeat"


_PROB_ATOL = 1e-9


def _check_prob_vector(v: np.ndarray, n: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise ValueError(f"{what}: expected {n} entries, got shape {v.shape}")
    if np.any(v < -_PROB_ATOL) or np.any(v > 1.0 + _PROB_ATOL):
        raise ValueError(f"{what}: probability outside [0, 1]")
    s = float(v.sum())
    if abs(s - 1.0) > 1e-6:
        raise ValueError(f"{what}: probabilities sum to {s}, expected 1")
    return np.clip(v, 0.0, 1.0)


@dataclass(frozen=True)
class LocalPrediction:
    """Hierarchical label probabilities for one vertebra.

    group_probs has one entry per group (cervical, thoracic, lumbar); each
    within-group vector is a distribution over that group's graph-space
    labels (7, 12 and 5 entries).
    """

    group_probs: np.ndarray
    within_cervical: np.ndarray
    within_thoracic: np.ndarray
    within_lumbar: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "group_probs", _check_prob_vector(self.group_probs, 3, "group_probs"))
        for g, attr in ((Group.CERVICAL, "within_cervical"),
                        (Group.THORACIC, "within_thoracic"),
                        (Group.LUMBAR, "within_lumbar")):
            v = _check_prob_vector(getattr(self, attr), GROUP_SIZES[g], attr)
            object.__setattr__(self, attr, v)
        for a in ("group_probs", "within_cervical", "within_thoracic", "within_lumbar"):
            getattr(self, a).setflags(write=False)

    def within(self, group: Group) -> np.ndarray:
        return {Group.CERVICAL: self.within_cervical,
                Group.THORACIC: self.within_thoracic,
                Group.LUMBAR: self.within_lumbar}[group]

    def group_prob(self, group: Group) -> float:
        return float(self.group_probs[GROUPS.index(group)])

    def fused(self) -> np.ndarray:
        """Flat distribution over the 24 graph-space labels.

        fused[j-1] = P(group of j) * P(j | group of j); sums to 1 whenever
        the components are valid distributions.
        """
        out = np.empty(labels.N_GRAPH_LABELS, dtype=np.float64)
        for gi, g in enumerate(GROUPS):
            base = labels.GROUP_BASE[g] - 1
            out[base:base + GROUP_SIZES[g]] = self.group_probs[gi] * self.within(g)
        return out

    @staticmethod
    def uniform() -> "LocalPrediction":
        """Uniform over the 24 labels (the no-information fallback)."""
        return LocalPrediction(
            group_probs=np.array([7, 12, 5], dtype=np.float64) / 24.0,
            within_cervical=np.full(7, 1 / 7),
            within_thoracic=np.full(12, 1 / 12),
            within_lumbar=np.full(5, 1 / 5),
        )

    @staticmethod
    def peaked(code: int, peak: float = 0.9, group_peak: float = 0.96) -> "LocalPrediction":
        """Distribution concentrated on one graph-space label (test helper)."""
        g = labels.group_of(code)
        gp = np.full(3, (1.0 - group_peak) / 2.0)
        gp[GROUPS.index(g)] = group_peak
        vecs = {}
        for grp in GROUPS:
            n = GROUP_SIZES[grp]
            if grp is g:
                v = np.full(n, (1.0 - peak) / (n - 1))
                v[labels.within_group_index(code)] = peak
            else:
                v = np.full(n, 1.0 / n)
            vecs[grp] = v
        return LocalPrediction(gp, vecs[Group.CERVICAL], vecs[Group.THORACIC], vecs[Group.LUMBAR])


@dataclass(frozen=True)
class VertebraRecord:
    """One located vertebra in world space (mm)."""

    location: np.ndarray                      # (3,) world mm
    mask_id: str | None = None                # key into SpineState.masks
    volume_mm3: float = 0.0
    local_probs: LocalPrediction | None = None
    label: int | None = None                  # 1..26, None before identification
    flags: frozenset[Flag] = frozenset()

    def __post_init__(self):
        loc = np.asarray(self.location, dtype=np.float64)
        if loc.shape != (3,):
            raise ValueError(f"record location must be a 3-vector, got {loc.shape}")
        loc.setflags(write=False)
        object.__setattr__(self, "location", loc)
        if self.volume_mm3 < 0:
            raise ValueError("volume must be non-negative")
        if self.label is not None:
            labels.check(self.label)
        if self.mask_id is None and self.volume_mm3 > 0:
            raise ValueError("volume without a mask")
        object.__setattr__(self, "flags", frozenset(self.flags))

    def with_(self, **kw) -> "VertebraRecord":
        return replace(self, **kw)


@dataclass(frozen=True)
class ReportEntry:
    """One reported inconsistency: world-space box, kind and free text."""

    region_min: tuple[float, float, float]
    region_max: tuple[float, float, float]
    kind: Flag
    detail: str


@dataclass
class InconsistencyReport:
    entries: list[ReportEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.entries

    def kinds(self) -> list[Flag]:
        return [e.kind for e in self.entries]


# transitional outcomes recorded during path post-processing
@dataclass(frozen=True)
class TransitionalEvent:
    position: int      # 0-based record index the event is attached to
    kind: str          # "T13" | "L6" | "AbsentT12"


@dataclass
class SpineState:
    """Mutable working state of the consistency cycle.

    records stays sorted cranial to caudal; masks maps mask_id to a binary
    VolumeGrid (kept here so records stay small immutable values).
    """

    records: list[VertebraRecord] = field(default_factory=list)
    masks: dict[str, "object"] = field(default_factory=dict)
    iteration: int = 0
    report: InconsistencyReport = field(default_factory=InconsistencyReport)
    events: list[TransitionalEvent] = field(default_factory=list)
    _next_mask_id: int = 0

    def new_mask_id(self) -> str:
        mid = f"m{self._next_mask_id:04d}"
        self._next_mask_id += 1
        return mid


def sort_records(records: list[VertebraRecord],
                 cranial_axis: int = 2,
                 cranial_sign: float = 1.0) -> list[VertebraRecord]:
    """Order records cranial to caudal along the anatomic vertical axis.

    With the canonical world frame the cranial direction is +z, so records
    are sorted by descending z.  The sort is stable for exact ties.
    """
    return sorted(records, key=lambda r: -cranial_sign * float(r.location[cranial_axis]))
