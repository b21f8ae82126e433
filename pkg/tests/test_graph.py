import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinecycle.graph import (GraphWeights, IdentGraph, build_graph, dp_oracle,
                              fuse_predictions, postprocess_transitional,
                              shortest_path)
from spinecycle.labels import T13, L6, code_of
from spinecycle.records import LocalPrediction


def random_prediction(rng) -> LocalPrediction:
    def vec(k):
        v = rng.random(k) + 1e-3
        return v / v.sum()
    return LocalPrediction(vec(3), vec(7), vec(12), vec(5))


def peaked_many(*names):
    return [LocalPrediction.peaked(code_of(n)) for n in names]


# -- unary construction ---------------------------------------------------------


def test_unary_zero_at_certainty():
    pred = LocalPrediction.peaked(code_of("T1"), peak=1.0, group_peak=1.0)
    g = build_graph([pred])
    assert g.unary[0, code_of("T1") - 1] == pytest.approx(0.0, abs=1e-12)


def test_unary_uniform_symmetry():
    pred = LocalPrediction.uniform()
    g = build_graph([pred])
    # within one group all labels share both terms
    for lo, hi in ((0, 7), (7, 19), (19, 24)):
        col = g.unary[0, lo:hi]
        assert np.ptp(col) == pytest.approx(0.0, abs=1e-12)


def test_build_graph_rejects_empty():
    with pytest.raises(ValueError):
        build_graph([])


def test_weights_validated():
    with pytest.raises(ValueError):
        GraphWeights(w_t13=-0.1)


def test_label_path_rejects_out_of_range():
    from spinecycle.graph import LabelPath
    with pytest.raises(ValueError):
        LabelPath(labels=(25,), total_cost=0.0)


# -- solver equivalence and structure ---------------------------------------------


def test_single_column_is_argmin(rng):
    pred = random_prediction(rng)
    g = build_graph([pred])
    path = shortest_path(g)
    assert len(path.labels) == 1
    j = int(np.argmin(g.unary[0])) + 1
    assert path.labels == (j,)
    assert path.total_cost == pytest.approx(g.unary[0, j - 1], rel=0, abs=0)


def test_consecutive_run_zero_cost():
    preds = peaked_many("T1", "T2", "T3")
    path = shortest_path(build_graph(preds))
    assert path.labels == tuple(code_of(n) for n in ("T1", "T2", "T3"))
    assert path.special_steps == ()


def test_zero_unary_ties_break_lexicographically():
    g = IdentGraph(np.zeros((4, 24)), GraphWeights())
    assert shortest_path(g).labels == (1, 2, 3, 4)
    assert dp_oracle(g).labels == (1, 2, 3, 4)


def test_uniform_predictions_prefer_largest_group():
    # group priors 7/24, 12/24, 5/24 make thoracic runs cheapest; among the
    # nine equal-cost thoracic 4-runs the lexicographic tie-break picks T1..T4
    preds = [LocalPrediction.uniform()] * 4
    path = shortest_path(build_graph(preds))
    assert path.labels == (8, 9, 10, 11)


@given(st.integers(0, 10_000), st.integers(1, 7))
@settings(max_examples=60, deadline=None)
def test_dijkstra_equals_dp(seed, n):
    rng = np.random.default_rng(seed)
    preds = [random_prediction(rng) for _ in range(n)]
    g = build_graph(preds)
    a, b = shortest_path(g), dp_oracle(g)
    assert a.total_cost == b.total_cost      # bit-identical, not approx
    assert a.labels == b.labels
    assert a.special_steps == b.special_steps


@given(st.integers(0, 10_000), st.integers(2, 8))
@settings(max_examples=40, deadline=None)
def test_path_steps_are_legal(seed, n):
    rng = np.random.default_rng(seed)
    g = build_graph([random_prediction(rng) for _ in range(n)])
    path = shortest_path(g)
    assert len(path.labels) == n
    for u, v in zip(path.labels, path.labels[1:]):
        assert g.step_cost(u, v) is not None


def test_cost_scaling_invariance(rng):
    unary = rng.uniform(0.0, 2.0, size=(5, 24))
    w = GraphWeights(w_t13=0.4, w_no_t12=0.3, w_l6=0.6)
    lam = 3.7
    g1 = IdentGraph(unary, w)
    g2 = IdentGraph(unary * lam, GraphWeights(w_group=w.w_group, w_t13=w.w_t13 * lam,
                                              w_no_t12=w.w_no_t12 * lam, w_l6=w.w_l6 * lam))
    p1, p2 = shortest_path(g1), shortest_path(g2)
    assert p1.labels == p2.labels
    assert p2.total_cost == pytest.approx(lam * p1.total_cost, rel=1e-12)


def test_per_column_shift_invariance(rng):
    unary = rng.uniform(0.0, 2.0, size=(4, 24))
    shifts = rng.uniform(0.0, 1.0, size=4)
    g1 = IdentGraph(unary, GraphWeights())
    g2 = IdentGraph(unary + shifts[:, None], GraphWeights())
    p1, p2 = shortest_path(g1), shortest_path(g2)
    assert p1.labels == p2.labels
    assert p2.total_cost == pytest.approx(p1.total_cost + shifts.sum(), rel=1e-12)


def test_group_weight_pulls_ambiguous_label():
    """Near-tied flat evidence: the separate group term decides."""
    # flat probs: T12 = 0.4 * 0.76 = 0.304 narrowly beats L1 = 0.6 * 0.5 = 0.3,
    # but the lumbar group is likelier, so a strong group term flips the label
    within_t = np.full(12, (1 - 0.76) / 11)
    within_t[11] = 0.76
    within_l = np.full(5, (1 - 0.5) / 4)
    within_l[0] = 0.5
    pred = LocalPrediction(np.array([0.0, 0.4, 0.6]), np.full(7, 1 / 7),
                           within_t, within_l)
    weak = build_graph([pred], GraphWeights(w_group=0.0))
    strong = build_graph([pred], GraphWeights(w_group=5.0))
    assert shortest_path(weak).labels == (19,)
    assert shortest_path(strong).labels == (20,)


# -- special steps ------------------------------------------------------------------


def test_t13_special_step():
    preds = peaked_many("T12", "T12")
    path = shortest_path(build_graph(preds))
    assert path.labels == (19, 19)
    assert path.special_steps == ((1, "T13"),)


def test_absent_t12_step():
    preds = peaked_many("T11", "L1")
    path = shortest_path(build_graph(preds))
    assert path.labels == (18, 20)
    assert path.special_steps == ((1, "AbsentT12"),)


def test_l6_special_step():
    preds = peaked_many("L4", "L5", "L5")
    path = shortest_path(build_graph(preds))
    assert path.labels == (23, 24, 24)
    assert path.special_steps == ((2, "L6"),)


def test_special_weight_can_forbid():
    # an expensive special edge loses to relabeling one vertebra
    preds = peaked_many("T12", "T12")
    cheap = shortest_path(build_graph(preds, GraphWeights(w_t13=0.01)))
    dear = shortest_path(build_graph(preds, GraphWeights(w_t13=50.0)))
    assert cheap.labels == (19, 19)
    assert dear.labels != (19, 19)


# -- post-processing -----------------------------------------------------------------


def test_postprocess_t13():
    out = postprocess_transitional((18, 19, 19, 20))
    assert out.labels == (18, 19, T13, 20)
    assert out.events == ((2, "T13"),)
    assert out.repeat_flags == ()


def test_postprocess_l6():
    out = postprocess_transitional((23, 24, 24))
    assert out.labels == (23, 24, L6)
    assert out.events == ((2, "L6"),)


def test_postprocess_absent_t12():
    out = postprocess_transitional((17, 18, 20, 21))
    assert out.labels == (17, 18, 20, 21)
    assert out.events == ((2, "AbsentT12"),)


def test_postprocess_triple_repeat_flags():
    out = postprocess_transitional((19, 19, 19))
    assert out.labels == (19, T13, 19)
    assert out.events == ((1, "T13"),)
    assert out.repeat_flags == (2,)


def test_postprocess_rejects_transitional_input():
    with pytest.raises(ValueError):
        postprocess_transitional((19, 25))


def test_postprocess_nonadjacent_flags():
    out = postprocess_transitional((3, 9))
    assert out.repeat_flags == (1,)
    assert out.labels == (3, 9)


# -- prediction fusion ----------------------------------------------------------------


def test_fuse_identical_is_identity(rng):
    p = random_prediction(rng)
    f = fuse_predictions(p, p)
    np.testing.assert_allclose(f.fused(), p.fused(), atol=1e-12)


def test_fuse_group_probs_average():
    a = LocalPrediction(np.array([1.0, 0.0, 0.0]), np.full(7, 1 / 7),
                        np.full(12, 1 / 12), np.full(5, 1 / 5))
    b = LocalPrediction(np.array([0.0, 1.0, 0.0]), np.full(7, 1 / 7),
                        np.full(12, 1 / 12), np.full(5, 1 / 5))
    f = fuse_predictions(a, b)
    np.testing.assert_allclose(f.group_probs, [0.5, 0.5, 0.0], atol=1e-12)


def test_fuse_missing_side_averages_with_uniform(rng):
    p = random_prediction(rng)
    left, right = fuse_predictions(p, None), fuse_predictions(None, p)
    np.testing.assert_allclose(left.fused(), right.fused(), atol=1e-15)
    expected = fuse_predictions(p, LocalPrediction.uniform())
    np.testing.assert_allclose(left.fused(), expected.fused(), atol=1e-15)
    with pytest.raises(ValueError):
        fuse_predictions(None, None)
