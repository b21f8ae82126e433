import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinecycle.labels import Group, code_of
from spinecycle.priors import (Acceptance, Direction, GapMode, NeighborContext,
                               ScanAnnotation, Verdict, accept_residual,
                               check_gap_gaussian, check_gap_mre, fit_stats,
                               gap_anomalous, gap_candidates, gap_group,
                               predict_gap, predict_volume)
from spinecycle.records import Flag, VertebraRecord

GROUPS = (Group.CERVICAL, Group.THORACIC, Group.LUMBAR)


def _all_numbers(gs) -> dict[str, float]:
    out = {"a": gs.volume.a, "c1": gs.volume.c1, "b": gs.volume.b, "c2": gs.volume.c2,
           "gauss_mu": gs.gaussian.mu, "gauss_sigma": gs.gaussian.sigma,
           "m1": gs.distance.m1, "n1": gs.distance.n1, "k1": gs.distance.k1,
           "m2": gs.distance.m2, "k2": gs.distance.k2,
           "n2": gs.distance.n2, "k3": gs.distance.k3}
    for mode in GapMode:
        out[f"mre_{mode.value}_mu"] = gs.mre[mode].mu
        out[f"mre_{mode.value}_sigma"] = gs.mre[mode].sigma
    return out


# -- the calibration round trip -------------------------------------------------


def test_calibration_fixture_recovers_defaults(stats, calibration_scans):
    """Fitting the frozen annotation set must reproduce every shipped prior.

    The fixture was constructed so that all normal equations and error-band
    moments hold exactly in real arithmetic; float round-off leaves ~1e-11.
    """
    fitted = fit_stats(calibration_scans)
    for group in GROUPS:
        want = _all_numbers(stats.for_group(group))
        got = _all_numbers(fitted.for_group(group))
        for key, w in want.items():
            assert got[key] == pytest.approx(w, rel=1e-9), (group.value, key)


def test_noiseless_forward_volume_chain(stats, calibration_scans):
    # appending pairs that sit exactly on the forward volume line must not
    # move the forward fit at all (their residuals are identically zero)
    a, c1 = stats.for_group(Group.THORACIC).volume.a, stats.for_group(Group.THORACIC).volume.c1
    vols = [10000.0]
    for _ in range(3):
        vols.append(a * vols[-1] + c1)
    assert vols[1] == pytest.approx(11654.0)        # worked example
    mu = stats.for_group(Group.THORACIC).gaussian.mu
    z = -np.cumsum([0.0, mu, mu, mu])
    chain = ScanAnnotation(
        scan_id="chain-t", labels=tuple(code_of(n) for n in ("T3", "T4", "T5", "T6")),
        volumes_mm3=tuple(vols),
        centroids_mm=np.c_[np.zeros(4), np.zeros(4), z])
    fitted = fit_stats(list(calibration_scans) + [chain])
    assert fitted.for_group(Group.THORACIC).volume.a == pytest.approx(1.03, rel=1e-9)
    assert fitted.for_group(Group.THORACIC).volume.c1 == pytest.approx(1354.0, rel=1e-9)


def test_zero_volume_marks_missing_measurement(stats, calibration_scans):
    # a scan with one zero volume contributes no volume pairs, so every
    # volume coefficient stays bit-identical
    base = fit_stats(calibration_scans)
    mu = stats.for_group(Group.LUMBAR).gaussian.mu
    extra = ScanAnnotation(
        scan_id="halfvol", labels=(code_of("L2"), code_of("L3")),
        volumes_mm3=(0.0, 9000.0),
        centroids_mm=np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -mu]]))
    fitted = fit_stats(list(calibration_scans) + [extra])
    for group in GROUPS:
        for key in ("a", "c1", "b", "c2"):
            assert getattr(fitted.for_group(group).volume, key) == \
                   getattr(base.for_group(group).volume, key)


def test_gaussian_from_monte_carlo_scans(stats):
    """Marginal gap stats recovered from 1700 full-spine scans (fixed seed).

    Gap curves are AR(1) along the spine (neighboring gaps correlate, as in
    real anatomy, so the fitted regressors stay in their sanity band) while
    each gap's marginal stays exactly the per-group Gaussian.
    """
    rng = np.random.default_rng(77)
    phi = 0.6
    labs = tuple(range(1, 25))
    mus = np.empty(23)
    sds = np.empty(23)
    for j in range(23):
        g = Group.CERVICAL if labs[j + 1] <= 7 else \
            Group.THORACIC if labs[j + 1] <= 19 else Group.LUMBAR
        mus[j], sds[j] = stats.for_group(g).gaussian.mu, stats.for_group(g).gaussian.sigma
    scans = []
    for s in range(1700):
        z_noise = rng.standard_normal(23)
        gaps = np.empty(23)
        gaps[0] = mus[0] + sds[0] * z_noise[0]
        for j in range(1, 23):
            carry = phi * (gaps[j - 1] - mus[j - 1]) / sds[j - 1]
            gaps[j] = mus[j] + sds[j] * (carry + np.sqrt(1 - phi * phi) * z_noise[j])
        if np.any(gaps <= 1.0):
            continue
        z = np.concatenate([[0.0], -np.cumsum(gaps)])
        vols = rng.uniform(5000.0, 60000.0, size=24)
        scans.append(ScanAnnotation(
            scan_id=f"mc{s:04d}", labels=labs, volumes_mm3=tuple(vols),
            centroids_mm=np.c_[np.zeros(24), np.zeros(24), z]))
    fitted = fit_stats(scans)
    cer = fitted.for_group(Group.CERVICAL).gaussian
    assert abs(cer.mu - 16.77) < 0.1
    assert abs(cer.sigma - 2.18) < 0.1


# -- prediction and thresholds (worked decisions) ----------------------------------


def test_predict_volume_examples(stats):
    assert predict_volume(stats, Group.THORACIC, 10000.0, Direction.FROM_PREVIOUS) \
        == pytest.approx(11654.0)
    assert predict_volume(stats, Group.LUMBAR, 20000.0, Direction.FROM_NEXT) \
        == pytest.approx(18531.0)
    # degenerate but defined: zero neighbor volume returns the intercept
    assert predict_volume(stats, Group.CERVICAL, 0.0, Direction.FROM_PREVIOUS) \
        == pytest.approx(1471.0)
    with pytest.raises(ValueError):
        predict_volume(stats, Group.CERVICAL, -1.0, Direction.FROM_PREVIOUS)


def test_accept_residual_examples(stats):
    neighbor = NeighborContext(Group.THORACIC, 10000.0, Direction.FROM_PREVIOUS)
    assert accept_residual(stats, 6000.0, neighbor) is Acceptance.VERTEBRA
    assert accept_residual(stats, 5000.0, neighbor) is Acceptance.NOISE
    # exactly at the threshold counts as a vertebra (>=)
    assert accept_residual(stats, 0.5 * 11654.0, neighbor) is Acceptance.VERTEBRA
    # no identified neighbor: fixed fallback volume
    assert accept_residual(stats, 4000.0, None) is Acceptance.VERTEBRA
    assert accept_residual(stats, 3900.0, None) is Acceptance.NOISE


def test_check_gap_gaussian_examples(stats):
    assert check_gap_gaussian(stats, Group.THORACIC, 23.32) is Verdict.NORMAL
    # upper bound 23.32 + 3*3.55 = 33.97
    assert check_gap_gaussian(stats, Group.THORACIC, 50.0) is Verdict.ANOMALOUS
    assert check_gap_gaussian(stats, Group.THORACIC, 33.96) is Verdict.NORMAL
    # lower bound 16.77 - 6.54 = 10.23
    assert check_gap_gaussian(stats, Group.CERVICAL, 10.5) is Verdict.NORMAL
    assert check_gap_gaussian(stats, Group.CERVICAL, 10.2) is Verdict.ANOMALOUS
    with pytest.raises(ValueError):
        check_gap_gaussian(stats, Group.CERVICAL, 0.0)


def test_predict_gap_examples(stats):
    g, mode = predict_gap(stats, Group.LUMBAR, prev_gap_mm=30.0, next_gap_mm=34.0)
    assert (g, mode) == (pytest.approx(31.71), GapMode.BOTH)
    g, mode = predict_gap(stats, Group.THORACIC, prev_gap_mm=24.0)
    assert (g, mode) == (pytest.approx(24.61), GapMode.PREVIOUS)
    g, mode = predict_gap(stats, Group.CERVICAL, next_gap_mm=17.0)
    assert (g, mode) == (pytest.approx(16.53), GapMode.NEXT)
    with pytest.raises(ValueError):
        predict_gap(stats, Group.LUMBAR)


def test_check_gap_mre_examples(stats):
    # lower bound 2.04 - 2.79 < 0, so a perfect prediction is normal
    assert check_gap_mre(stats, Group.LUMBAR, GapMode.BOTH, 32.0, 32.0) is Verdict.NORMAL
    # MRE 12.5 against upper bound 2.04 + 2.79 = 4.83
    assert check_gap_mre(stats, Group.LUMBAR, GapMode.BOTH, 36.0, 32.0) is Verdict.ANOMALOUS
    # center of the band
    mid = 24.0 * (1.0 + 3.96 / 100.0)
    assert check_gap_mre(stats, Group.THORACIC, GapMode.PREVIOUS, mid, 24.0) is Verdict.NORMAL
    with pytest.raises(ValueError):
        check_gap_mre(stats, Group.LUMBAR, GapMode.BOTH, 30.0, 0.0)


def test_gap_group_fallbacks():
    assert gap_group(7, 8) is Group.THORACIC       # caudal wins
    assert gap_group(7, None) is Group.CERVICAL
    assert gap_group(None, 20) is Group.LUMBAR
    assert gap_group(None, None) is None


# -- candidate generation ---------------------------------------------------------


def _record(z, label=None):
    return VertebraRecord(location=np.array([0.0, 0.0, float(z)]), label=label)


def test_gap_candidates_single_midpoint(stats):
    # thoracic gap 46 with predicted ~23 -> one candidate at the midpoint
    recs = [_record(0, code_of("T4")), _record(-23, code_of("T5")),
            _record(-69, code_of("T6")), _record(-92, code_of("T7"))]
    out = gap_candidates(stats, recs)
    assert len(out) == 1
    np.testing.assert_allclose(out[0], [0.0, 0.0, -46.0], atol=1e-9)


def test_gap_candidates_two_thirds(stats):
    recs = [_record(0, code_of("T4")), _record(-23, code_of("T5")),
            _record(-93, code_of("T6")), _record(-116, code_of("T7"))]
    out = gap_candidates(stats, recs)
    assert len(out) == 2
    np.testing.assert_allclose(out[0], [0.0, 0.0, -23.0 - 70.0 / 3.0], atol=1e-9)
    np.testing.assert_allclose(out[1], [0.0, 0.0, -23.0 - 140.0 / 3.0], atol=1e-9)


def test_gap_candidates_normal_chain_empty(stats):
    mu = stats.for_group(Group.THORACIC).gaussian.mu
    recs = [_record(-i * mu, code_of("T4") + i) for i in range(5)]
    assert gap_candidates(stats, recs) == []


def test_gap_candidates_unlabeled_uses_fallback(stats):
    # unlabeled records: only the fixed 50 mm fallback can flag a gap
    recs = [_record(0), _record(-30), _record(-85)]
    out = gap_candidates(stats, recs)
    assert len(out) == 1
    np.testing.assert_allclose(out[0], [0.0, 0.0, -57.5], atol=1e-9)


# -- annotation validation ----------------------------------------------------------


def test_annotation_rejects_nonadjacent():
    with pytest.raises(ValueError):
        ScanAnnotation("bad", (1, 3), (0.0, 0.0),
                       np.array([[0, 0, 0], [0, 0, -20.0]]))


@pytest.mark.parametrize("pair", [(19, 25), (25, 20), (18, 20), (24, 26)])
def test_annotation_transitional_adjacency(pair):
    ScanAnnotation("ok", pair, (0.0, 0.0), np.array([[0, 0, 0], [0, 0, -25.0]]))


def test_annotation_rejects_negative_volume():
    with pytest.raises(ValueError):
        ScanAnnotation("bad", (1, 2), (100.0, -1.0),
                       np.array([[0, 0, 0], [0, 0, -20.0]]))


def test_fit_stats_needs_data_per_group(stats, calibration_scans):
    # dropping every lumbar scan must fail loudly, not silently fall back
    kept = [s for s in calibration_scans if not s.scan_id.startswith("cal-l")]
    with pytest.raises(ValueError):
        fit_stats(kept)


# -- fitting is insensitive to scan order -------------------------------------------


def test_fit_stats_order_invariant(calibration_scans):
    fitted = fit_stats(calibration_scans)
    reordered = fit_stats(list(reversed(calibration_scans)))
    for group in GROUPS:
        a, b = _all_numbers(fitted.for_group(group)), _all_numbers(reordered.for_group(group))
        for key in a:
            assert a[key] == pytest.approx(b[key], rel=1e-12, abs=1e-12), key


@given(st.floats(5.0, 45.0), st.floats(5.0, 45.0))
@settings(max_examples=40, deadline=None)
def test_predict_gap_matches_mode_split(stats, prev, nxt):
    """The two-sided prediction never silently falls back to one side."""
    both, mode = predict_gap(stats, Group.THORACIC, prev, nxt)
    d = stats.for_group(Group.THORACIC).distance
    assert mode is GapMode.BOTH
    assert both == pytest.approx(d.m1 * prev + d.n1 * nxt + d.k1, rel=1e-12)


# -- placeholder records in the distance checks ---------------------------------------


def placeholder_run(middle_z, flagged=True, last_z=-47.0):
    flags = frozenset({Flag.EMPTY_SEGMENTATION}) if flagged else frozenset()
    return [
        VertebraRecord(location=np.array([0.0, 0.0, 0.0]), label=8),
        VertebraRecord(location=np.array([0.0, 0.0, middle_z]), label=9, flags=flags),
        VertebraRecord(location=np.array([0.0, 0.0, last_z]), label=10),
    ]


def test_interpolated_record_gaps_skip_regression(stats):
    # 17 mm then 30 mm: both in range, but each is a terrible predictor of
    # the other, so the regression check fires on measured records...
    measured = placeholder_run(-17.0, flagged=False)
    assert gap_anomalous(stats, measured, 0)[0]
    assert gap_anomalous(stats, measured, 1)[0]
    # ...while a mandated-but-unsegmented placeholder gets range checks only
    bridged = placeholder_run(-17.0, flagged=True)
    assert not gap_anomalous(stats, bridged, 0)[0]
    assert not gap_anomalous(stats, bridged, 1)[0]


def test_interpolated_record_still_range_checked(stats):
    # a placeholder that leaves 40 mm on both sides has not explained the
    # hole; the plain plausibility window must still flag it
    hole = placeholder_run(-40.0, flagged=True, last_z=-80.0)
    assert gap_anomalous(stats, hole, 0)[0]
    assert gap_anomalous(stats, hole, 1)[0]
