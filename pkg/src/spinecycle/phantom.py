"""Synthetic spine phantoms and the deterministic oracle pair that serves
them: seeded ellipsoid vertebrae on a 1 mm grid, a segmentor that answers
with the ground-truth mask nearest to the seed (within a capture radius of
half the local gap), and a classifier that answers from the crop center
with a peaked label distribution.

The classifier mimics a network trained on the standard 24 labels: a T13
is reported as T12 and an L6 as L5, and an optional one-neighbor noise
model shifts each vertebra's peak with probability epsilon.  All random
choices are drawn once at generation time from the seed, so oracle calls
are pure functions and repeated runs are bit-identical.

Gap sequences follow the shipped priors: group-level plateaus joined by
smooth junction ramps, with extra curvature in the cervical run where the
relative-error bands exclude too-perfect sequences.  Generation validates
the ground truth against the consistency checks and fails loudly rather
than emit a phantom whose own anatomy is flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import labels
from .grid import VolumeGrid, mask_centroid_mm
from .labels import Group, group_of
from .priors import AnatomyStats
from .records import LocalPrediction, SpineState, VertebraRecord, sort_records

# ellipsoid semi-axes (x, y, z) mm per group; volumes stay above the
# unlabeled-component fallback threshold so first-pass detection works
DEFAULT_SEMI_AXES = {
    Group.CERVICAL: (16.0, 15.0, 5.2),
    Group.THORACIC: (17.0, 15.5, 7.0),
    Group.LUMBAR: (20.0, 17.0, 10.5),
}
DEFAULT_MARGIN_MM = 4.0

# relative positions of a junction ramp: fractions of the level step
# applied to (second-to-last, last) gap of the cranial group, the junction
# gap itself, and the (first, second) gaps of the caudal group
_JUNCTION_PROFILE = (0.02, 0.13, 0.39, 0.70, 0.90)

# cervical runs are curved: steep cranially, flat caudally (the error
# bands there exclude sequences the regressors predict too well)
_CERVICAL_DELTAS = (1.05, 0.80, 0.55, 0.35, 0.15, 0.0)


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one phantom; labels are true anatomy (may include the
    transitional codes 25/26 or skip T12)."""

    labels: tuple[int, ...]
    seed: int = 0
    noise_epsilon: float = 0.0
    gaps_mm: tuple[float, ...] | None = None          # explicit override
    semi_axes_mm: tuple[tuple[float, float, float], ...] | None = None
    margin_mm: float = DEFAULT_MARGIN_MM

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ValueError("phantom needs at least two vertebrae")
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        for u, v in zip(self.labels, self.labels[1:]):
            from .priors import _anatomically_adjacent

            if not _anatomically_adjacent(u, v):
                raise ValueError(f"phantom labels {labels.name_of(u)} -> {labels.name_of(v)} "
                                 "are not anatomically adjacent")
        if not (0.0 <= self.noise_epsilon <= 1.0):
            raise ValueError("noise_epsilon must be in [0, 1]")
        if self.gaps_mm is not None:
            if len(self.gaps_mm) != len(self.labels) - 1:
                raise ValueError("gaps_mm must have len(labels) - 1 entries")
            object.__setattr__(self, "gaps_mm", tuple(float(g) for g in self.gaps_mm))
        if self.semi_axes_mm is not None and len(self.semi_axes_mm) != len(self.labels):
            raise ValueError("semi_axes_mm must have one triple per vertebra")


def merged_report_code(code: int) -> int:
    """Graph-space label a standard classifier reports for a true label."""
    if code == labels.T13:
        return 19   # T12
    if code == labels.L6:
        return 24   # L5
    return code


def gap_groups(true_labels: tuple[int, ...]) -> list[Group]:
    """Group of each inter-vertebral gap (the caudal vertebra's)."""
    return [group_of(v) for v in true_labels[1:]]


def _template_curve(ggroups: list[Group], level: dict[Group, float]) -> np.ndarray:
    """Rough initial shape: group plateaus, junction ramps, cervical slope."""
    n = len(ggroups)
    gaps = np.array([level[g] for g in ggroups], dtype=np.float64)
    for j in range(1, n):
        if ggroups[j] is ggroups[j - 1]:
            continue
        lo, hi = level[ggroups[j - 1]], level[ggroups[j]]
        for offset, frac in zip(range(-2, 3), _JUNCTION_PROFILE):
            k = j + offset
            if 0 <= k < n and ggroups[k] is ggroups[j - 1 if offset < 0 else j]:
                gaps[k] = lo + frac * (hi - lo)
    i = 0
    while i < n:
        if ggroups[i] is not Group.CERVICAL:
            i += 1
            continue
        j = i
        while j < n and ggroups[j] is Group.CERVICAL:
            j += 1
        length = j - i
        deltas = np.array(_CERVICAL_DELTAS[:max(length - 1, 0)])
        offsets = np.concatenate([[0.0], np.cumsum(deltas)])[:length]
        gaps[i:j] += offsets - offsets.mean()
        i = j
    return gaps


def design_gap_curve(true_labels: tuple[int, ...], stats: AnatomyStats,
                     rng: np.random.Generator) -> np.ndarray:
    """Gap sequence consistent with the priors for the given label run.

    Per-group levels are drawn within half a standard deviation of the
    group mean and each gap gets a small seeded wiggle; a least-squares
    refinement then places every gap's relative prediction error at a safe
    point inside its band.  The error bands have positive lower edges in
    places, so a curve that the regressors predict *too well* is itself
    anomalous; targeting the bands directly handles that without per-shape
    tuning.
    """
    from scipy.optimize import least_squares

    from .priors import predict_gap

    ggroups = gap_groups(true_labels)
    n = len(ggroups)
    level = {}
    for g in (Group.CERVICAL, Group.THORACIC, Group.LUMBAR):
        gs = stats.for_group(g).gaussian
        level[g] = gs.mu + float(rng.uniform(-0.5, 0.5)) * gs.sigma

    wiggle_scale = {Group.CERVICAL: 0.05, Group.THORACIC: 0.12, Group.LUMBAR: 0.12}
    anchors = _template_curve(ggroups, level)
    anchors += np.array([wiggle_scale[g] for g in ggroups]) * rng.uniform(-1.0, 1.0, size=n)
    sigmas = np.array([stats.for_group(g).gaussian.sigma for g in ggroups])
    if n == 1:
        return anchors

    # target error (percent) per gap: partway into the positive part of
    # the band, so both edges stay far
    checked = []
    for i, g in enumerate(ggroups):
        prev_gap = anchors[i - 1] if i > 0 else None
        next_gap = anchors[i + 1] if i + 1 < n else None
        _, mode = predict_gap(stats, g, prev_gap, next_gap)
        lo, hi = stats.for_group(g).mre[mode].bounds()
        lo = max(lo, 0.0)
        checked.append((i, lo + 0.4 * (hi - lo)))

    w_mre = 25.0

    def residuals(x):
        out = np.empty(len(checked) + n)
        for k, (i, tau) in enumerate(checked):
            prev_gap = x[i - 1] if i > 0 else None
            next_gap = x[i + 1] if i + 1 < n else None
            pred, _ = predict_gap(stats, ggroups[i], prev_gap, next_gap)
            rel = 100.0 * (x[i] - pred) / pred
            out[k] = w_mre * (np.sqrt(rel * rel + 1e-8) - tau)
        out[len(checked):] = 3.0 * (x - anchors) / sigmas
        return out

    # keep every gap well inside its group's plausibility window; the
    # refinement only reshapes within it
    mus = np.array([stats.for_group(g).gaussian.mu for g in ggroups])
    lo, hi = mus - 2.0 * sigmas, mus + 2.0 * sigmas
    sol = least_squares(residuals, np.clip(anchors, lo + 0.1, hi - 0.1),
                        bounds=(lo, hi), method="trf", xtol=1e-12, ftol=1e-12)
    return sol.x


def validate_gap_curve(true_labels: tuple[int, ...], gaps: np.ndarray,
                       stats: AnatomyStats) -> list[str]:
    """Run the distance checks a converged state would face; returns a list
    of violations (empty = the ground truth is consistent)."""
    from .priors import Verdict, check_gap_gaussian, check_gap_mre, predict_gap

    ggroups = gap_groups(true_labels)
    problems = []
    for i, g in enumerate(ggroups):
        if check_gap_gaussian(stats, g, float(gaps[i])) is Verdict.ANOMALOUS:
            problems.append(f"gap {i} ({g.value}, {gaps[i]:.2f} mm) fails the range check")
        prev_gap = float(gaps[i - 1]) if i > 0 else None
        next_gap = float(gaps[i + 1]) if i + 1 < len(gaps) else None
        if prev_gap is None and next_gap is None:
            continue
        predicted, mode = predict_gap(stats, g, prev_gap, next_gap)
        if check_gap_mre(stats, g, mode, float(gaps[i]), predicted) is Verdict.ANOMALOUS:
            mre = 100.0 * abs(gaps[i] - predicted) / predicted
            problems.append(f"gap {i} ({g.value}, {mode.value}) fails the error check "
                            f"(MRE {mre:.2f}%)")
    return problems


# -- bundle ---------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentationResult:
    location_mm: np.ndarray
    mask: VolumeGrid


@dataclass
class PhantomSegmentor:
    """Answers a seed with the nearest ground-truth vertebra within half
    the local gap (the gap on the seed's side of that vertebra), or
    nothing."""

    centers: np.ndarray
    masks: tuple[VolumeGrid, ...]
    gaps_mm: np.ndarray            # centers are sorted cranial to caudal
    dropped: frozenset[int] = frozenset()

    def _capture_radius(self, i: int, seed_z: float) -> float:
        caudal_side = seed_z <= self.centers[i][2]
        n = len(self.centers)
        if caudal_side and i < n - 1:
            return float(self.gaps_mm[i]) / 2.0
        if not caudal_side and i > 0:
            return float(self.gaps_mm[i - 1]) / 2.0
        return float(self.gaps_mm[min(i, n - 2)]) / 2.0

    def segment(self, ct: VolumeGrid, seed_mm: np.ndarray) -> SegmentationResult | None:
        seed = np.asarray(seed_mm, dtype=np.float64)
        d = np.linalg.norm(self.centers - seed, axis=1)
        i = int(np.argmin(d))
        if d[i] > self._capture_radius(i, float(seed[2])) or i in self.dropped:
            return None
        return SegmentationResult(self.centers[i].copy(), self.masks[i])


@dataclass
class PhantomClassifier:
    """Answers a crop with a peaked distribution on the reported label of
    the ground-truth vertebra nearest the crop center."""

    centers: np.ndarray
    reported_codes: np.ndarray     # graph-space, after merging and noise
    blanked: frozenset[int] = frozenset()

    def classify(self, crop: VolumeGrid) -> LocalPrediction | None:
        center = crop.index_to_world([(s - 1) / 2.0 for s in crop.shape])
        i = int(np.argmin(np.linalg.norm(self.centers - center, axis=1)))
        if i in self.blanked:
            return None
        return LocalPrediction.peaked(int(self.reported_codes[i]))


@dataclass
class PhantomBundle:
    """Everything a cycle run needs, plus the ground truth to score it."""

    spec: PhantomSpec
    ct: VolumeGrid
    spine_mask: VolumeGrid
    vertebra_masks: tuple[VolumeGrid, ...]
    gt_state: SpineState
    gaps_mm: np.ndarray
    segmentor: PhantomSegmentor
    classifier: PhantomClassifier

    @property
    def gt_rows(self) -> list[tuple[int, np.ndarray]]:
        return [(r.label, r.location) for r in self.gt_state.records]

    def label_map(self) -> VolumeGrid:
        """Ground-truth segmentation as an int16 label-code map."""
        data = np.zeros(self.spine_mask.shape, dtype=np.int16)
        for rec, mask in zip(self.gt_state.records, self.vertebra_masks):
            data[mask.data] = rec.label
        return VolumeGrid(data, self.spine_mask.spacing, self.spine_mask.origin,
                          self.spine_mask.orientation)


def noisy_reported_codes(true_labels: tuple[int, ...], epsilon: float,
                         rng: np.random.Generator) -> np.ndarray:
    """Graph-space codes the classifier will report: transitional labels
    merged down, then each shifted to a neighbor with probability epsilon."""
    out = []
    for code in true_labels:
        c = merged_report_code(code)
        if epsilon > 0 and rng.random() < epsilon:
            if c == 1:
                c = 2
            elif c == 24:
                c = 23
            else:
                c = c + 1 if rng.random() < 0.5 else c - 1
        out.append(c)
    return np.array(out, dtype=np.int64)


def noisy_predictions(true_labels: tuple[int, ...], epsilon: float,
                      rng: np.random.Generator) -> tuple[list[LocalPrediction], np.ndarray]:
    """Prediction sets for graph-only experiments (no grids involved)."""
    reported = noisy_reported_codes(true_labels, epsilon, rng)
    return [LocalPrediction.peaked(int(c)) for c in reported], reported


def generate(spec: PhantomSpec, stats: AnatomyStats | None = None) -> PhantomBundle:
    """Build the phantom: grids, ground-truth state and both oracles."""
    stats = stats if stats is not None else AnatomyStats.default()
    rng = np.random.default_rng(spec.seed)
    n = len(spec.labels)

    if spec.gaps_mm is not None:
        gaps = np.asarray(spec.gaps_mm, dtype=np.float64)
    else:
        gaps = design_gap_curve(spec.labels, stats, rng)
        problems = validate_gap_curve(spec.labels, gaps, stats)
        if problems:
            raise RuntimeError("phantom gap curve is inconsistent with the priors: "
                               + "; ".join(problems))

    if spec.semi_axes_mm is not None:
        semi = [tuple(map(float, s)) for s in spec.semi_axes_mm]
    else:
        semi = []
        for code in spec.labels:
            base = DEFAULT_SEMI_AXES[group_of(code)]
            jit = 1.0 + 0.05 * rng.uniform(-1.0, 1.0, size=3)
            semi.append(tuple(float(b * j) for b, j in zip(base, jit)))

    for i in range(n - 1):
        if semi[i][2] + semi[i + 1][2] >= gaps[i]:
            raise ValueError(f"vertebra ellipsoids {i} and {i + 1} overlap: "
                             f"extents {semi[i][2]:.1f}+{semi[i + 1][2]:.1f} >= gap {gaps[i]:.2f}")

    margin = float(spec.margin_mm)
    max_ax = max(s[0] for s in semi)
    max_ay = max(s[1] for s in semi)
    # vertebra centers run caudally down the z axis, cranial first
    z_top = 0.0
    centers_z = np.concatenate([[z_top], z_top - np.cumsum(gaps)])
    z_lo = centers_z[-1] - semi[-1][2] - margin
    z_hi = centers_z[0] + semi[0][2] + margin
    shape = (int(np.ceil(2 * (max_ax + margin))) + 1,
             int(np.ceil(2 * (max_ay + margin))) + 1,
             int(np.ceil(z_hi - z_lo)) + 1)
    origin = (-(shape[0] - 1) / 2.0, -(shape[1] - 1) / 2.0, z_lo)
    gx, gy, gz = np.meshgrid(
        origin[0] + np.arange(shape[0]),
        origin[1] + np.arange(shape[1]),
        origin[2] + np.arange(shape[2]),
        indexing="ij",
    )

    masks = []
    for i in range(n):
        ax, ay, az = semi[i]
        inside = ((gx / ax) ** 2 + (gy / ay) ** 2 + ((gz - centers_z[i]) / az) ** 2) <= 1.0
        masks.append(VolumeGrid(inside, (1.0, 1.0, 1.0), origin))
    spine = VolumeGrid(np.logical_or.reduce([m.data for m in masks]), (1.0, 1.0, 1.0), origin)
    ct = VolumeGrid((spine.data.astype(np.float32) * 250.0), (1.0, 1.0, 1.0), origin)

    state = SpineState()
    records = []
    for i, mask in enumerate(masks):
        mid = state.new_mask_id()
        state.masks[mid] = mask
        records.append(VertebraRecord(
            location=mask_centroid_mm(mask),
            mask_id=mid,
            volume_mm3=float(np.count_nonzero(mask.data)),
            label=spec.labels[i],
        ))
    state.records = sort_records(records)

    centers = np.stack([r.location for r in state.records])
    reported = noisy_reported_codes(spec.labels, spec.noise_epsilon, rng)
    return PhantomBundle(
        spec=spec,
        ct=ct,
        spine_mask=spine,
        vertebra_masks=tuple(masks),
        gt_state=state,
        gaps_mm=gaps,
        segmentor=PhantomSegmentor(centers, tuple(masks), gaps.copy()),
        classifier=PhantomClassifier(centers, reported),
    )


# -- corruptions -----------------------------------------------------------------


def drop_mask(bundle: PhantomBundle, index: int) -> PhantomBundle:
    """Simulate a localized segmentation failure (e.g. metal artifacts):
    vertebra `index` disappears from the spine mask and the segmentor
    refuses to segment it."""
    gone = bundle.vertebra_masks[index]
    spine = VolumeGrid(bundle.spine_mask.data & ~gone.data, bundle.spine_mask.spacing,
                       bundle.spine_mask.origin, bundle.spine_mask.orientation)
    seg = replace(bundle.segmentor, dropped=bundle.segmentor.dropped | {index})
    return replace(bundle, spine_mask=spine, segmentor=seg)


def blank_probability(bundle: PhantomBundle, index: int) -> PhantomBundle:
    """Classifier gives no opinion for vertebra `index` (uniform fallback
    downstream)."""
    cls = replace(bundle.classifier, blanked=bundle.classifier.blanked | {index})
    return replace(bundle, classifier=cls)


def shift_record_location(state: SpineState, index: int, delta_mm) -> SpineState:
    """Displace one record of a (typically converged) state; for probing
    the consistency checks."""
    recs = list(state.records)
    rec = recs[index]
    recs[index] = rec.with_(location=rec.location + np.asarray(delta_mm, dtype=np.float64))
    return SpineState(records=sort_records(recs), masks=dict(state.masks),
                      iteration=state.iteration, report=state.report,
                      events=list(state.events), _next_mask_id=state._next_mask_id)


# -- JSON recipes ---------------------------------------------------------------
#
# A phantom (plus optional oracle corruptions) can be described by a small
# JSON document, so a run manifest can reference a reproducible synthetic
# case by recipe instead of by opaque binary blobs.


def spec_to_doc(spec: PhantomSpec) -> dict:
    doc: dict = {
        "labels": [labels.name_of(c) for c in spec.labels],
        "seed": spec.seed,
        "noise_epsilon": spec.noise_epsilon,
        "margin_mm": spec.margin_mm,
    }
    if spec.gaps_mm is not None:
        doc["gaps_mm"] = list(spec.gaps_mm)
    if spec.semi_axes_mm is not None:
        doc["semi_axes_mm"] = [list(t) for t in spec.semi_axes_mm]
    return doc


def spec_from_doc(doc: dict) -> PhantomSpec:
    if not isinstance(doc, dict):
        raise ValueError("phantom spec must be a JSON object")
    unknown = set(doc) - {"labels", "seed", "noise_epsilon", "margin_mm",
                          "gaps_mm", "semi_axes_mm"}
    if unknown:
        raise ValueError(f"phantom spec has unknown keys {sorted(unknown)}")
    if "labels" not in doc:
        raise ValueError("phantom spec needs a 'labels' list")
    codes = tuple(labels.code_of(v) if isinstance(v, str) else int(v) for v in doc["labels"])
    kwargs: dict = {}
    if "gaps_mm" in doc:
        kwargs["gaps_mm"] = tuple(float(g) for g in doc["gaps_mm"])
    if "semi_axes_mm" in doc:
        kwargs["semi_axes_mm"] = tuple(tuple(float(v) for v in t) for t in doc["semi_axes_mm"])
    return PhantomSpec(labels=codes,
                       seed=int(doc.get("seed", 0)),
                       noise_epsilon=float(doc.get("noise_epsilon", 0.0)),
                       margin_mm=float(doc.get("margin_mm", DEFAULT_MARGIN_MM)),
                       **kwargs)


def bundle_from_doc(doc: dict, stats: AnatomyStats | None = None) -> PhantomBundle:
    """Build (and optionally corrupt) a phantom from a recipe document.

    Document shape: ``{"spec": {...}, "corruptions": [{"kind": "drop_mask",
    "index": 2}, {"kind": "blank_probability", "index": 0}, ...]}``.
    Corruptions apply in order.
    """
    if not isinstance(doc, dict) or "spec" not in doc:
        raise ValueError("phantom recipe must be an object with a 'spec'")
    unknown = set(doc) - {"spec", "corruptions"}
    if unknown:
        raise ValueError(f"phantom recipe has unknown keys {sorted(unknown)}")
    bundle = generate(spec_from_doc(doc["spec"]), stats)
    for i, c in enumerate(doc.get("corruptions", [])):
        where = f"corruptions[{i}]"
        if not isinstance(c, dict) or "kind" not in c or "index" not in c:
            raise ValueError(f"{where}: expected an object with 'kind' and 'index'")
        index = int(c["index"])
        if not (0 <= index < len(bundle.spec.labels)):
            raise ValueError(f"{where}: index {index} out of range")
        if c["kind"] == "drop_mask":
            bundle = drop_mask(bundle, index)
        elif c["kind"] == "blank_probability":
            bundle = blank_probability(bundle, index)
        else:
            raise ValueError(f"{where}: unknown corruption kind {c['kind']!r}")
    return bundle
