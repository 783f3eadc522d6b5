import itertools
import math

import numpy as np
import pytest

from dcmt.errors import (
    ContractError,
    DimensionError,
    GridTooLargeError,
    NoErrorsError,
)
from dcmt.metrics import (
    ERROR_CATEGORIES,
    ErrorHistogram,
    Heatmap,
    boundary_variance,
    classify_error,
    contextual_modulation_index,
    emd_1d,
    emd_2d,
    error_histogram,
    kl_divergence,
    _grid_distances,
)
from dcmt.synthdata import Caption, Scene, SceneObject, TaskItem


def delta(n, at):
    v = np.zeros(n)
    v[at] = 1.0
    return v


def rand_dist(rng, shape):
    v = rng.random(shape)
    return v / v.sum()


# ------------------------------------------------------------------ heatmaps


def test_heatmap_rejects_negative_and_nonfinite():
    with pytest.raises(ContractError):
        Heatmap(np.array([0.5, -0.1]))
    with pytest.raises(ContractError):
        Heatmap(np.array([0.5, np.nan]))
    with pytest.raises(ContractError):
        Heatmap(np.array([0.5, np.inf]))


def test_heatmap_rejects_bad_rank():
    with pytest.raises(DimensionError):
        Heatmap(np.zeros((2, 2, 2)))
    with pytest.raises(DimensionError):
        Heatmap(np.zeros(0))


def test_heatmap_normalized_flag_is_checked():
    with pytest.raises(ContractError):
        Heatmap(np.array([1.0, 1.0]), normalized=True)
    Heatmap(np.array([0.5, 0.5]), normalized=True)


def test_heatmap_normalize():
    hm = Heatmap(np.array([1.0, 3.0])).normalize()
    assert hm.normalized
    assert np.allclose(hm.bins, [0.25, 0.75])
    with pytest.raises(ContractError):
        Heatmap(np.zeros(3)).normalize()


# ------------------------------------------------------------------ emd 1d


def test_emd_1d_identical_is_zero():
    p = rand_dist(np.random.default_rng(0), 8)
    assert emd_1d(p, p) == 0.0


def test_emd_1d_unit_mass_moves_three_bins():
    assert emd_1d(delta(4, 0), delta(4, 3)) == 3.0
    assert emd_1d(delta(4, 0), delta(4, 3), bin_width=0.5) == 1.5


def test_emd_1d_input_contract():
    p = delta(4, 0)
    with pytest.raises(DimensionError):
        emd_1d(p, delta(5, 0))
    with pytest.raises(ContractError):
        emd_1d(np.array([0.5, 0.6]), p[:2])
    with pytest.raises(ContractError):
        emd_1d(Heatmap(np.array([1.0, 2.0])), Heatmap(np.array([1.0, 2.0])))
    with pytest.raises(ContractError):
        emd_1d(p, p, bin_width=0.0)


def test_emd_1d_symmetry_and_triangle_inequality():
    rng = np.random.default_rng(7)
    for _ in range(200):
        p, q, r = (rand_dist(rng, 6) for _ in range(3))
        assert abs(emd_1d(p, q) - emd_1d(q, p)) <= 1e-9
        assert emd_1d(p, r) <= emd_1d(p, q) + emd_1d(q, r) + 1e-9


def test_emd_1d_matches_transport_solver_on_a_row():
    rng = np.random.default_rng(11)
    for _ in range(60):
        p = rand_dist(rng, 6)
        q = rand_dist(rng, 6)
        assert abs(emd_1d(p, q) - emd_2d(p.reshape(1, 6), q.reshape(1, 6))) <= 1e-9


# ------------------------------------------------------------------ emd 2d


def test_emd_2d_identical_is_zero():
    p = rand_dist(np.random.default_rng(1), (3, 4))
    assert emd_2d(p, p) == 0.0


def test_emd_2d_delta_pairs_follow_euclidean_distance():
    a = np.zeros((4, 5)); a[0, 0] = 1.0
    b = np.zeros((4, 5)); b[0, 3] = 1.0
    c = np.zeros((4, 5)); c[3, 4] = 1.0
    assert emd_2d(a, b) == pytest.approx(3.0, abs=1e-12)
    # 3-4-5 triangle between cell centers
    assert emd_2d(a, c) == pytest.approx(5.0, abs=1e-12)


def test_emd_2d_input_contract():
    p = rand_dist(np.random.default_rng(2), (3, 3))
    with pytest.raises(DimensionError):
        emd_2d(p, rand_dist(np.random.default_rng(3), (3, 4)))
    with pytest.raises(DimensionError):
        emd_2d(p.ravel(), p.ravel())
    big = np.ones((17, 16)) / 272.0
    with pytest.raises(GridTooLargeError):
        emd_2d(big, big)


def quarter_mass_oracle(pf, qf, dist, perms):
    """Exact transport cost for masses in quarters: optimal plans are
    quarter-integral, so matching the four quarter-units is exhaustive."""
    ap = np.repeat(np.arange(pf.size), (4 * pf).round().astype(int))
    aq = np.repeat(np.arange(qf.size), (4 * qf).round().astype(int))
    return dist[ap[None, :], aq[perms]].sum(axis=1).min() / 4.0


def test_emd_2d_matches_quarter_mass_oracle():
    # the exhaustive all-pairs sweep runs in the acceptance suite; this is
    # a seeded sample of the same oracle
    dist = _grid_distances(3, 3)
    perms = np.array(list(itertools.permutations(range(4))))
    rng = np.random.default_rng(5)
    for _ in range(300):
        pf = np.bincount(rng.integers(0, 9, 4), minlength=9) / 4.0
        qf = np.bincount(rng.integers(0, 9, 4), minlength=9) / 4.0
        got = emd_2d(pf.reshape(3, 3), qf.reshape(3, 3))
        want = quarter_mass_oracle(pf, qf, dist, perms)
        assert abs(got - want) <= 1e-6


def test_emd_2d_symmetry():
    rng = np.random.default_rng(9)
    for _ in range(40):
        p = rand_dist(rng, (3, 3))
        q = rand_dist(rng, (3, 3))
        assert abs(emd_2d(p, q) - emd_2d(q, p)) <= 1e-9


# ------------------------------------------------------------------ kl


def test_kl_of_identical_distribution_is_exactly_zero():
    p = rand_dist(np.random.default_rng(4), 5)
    assert kl_divergence(p, p) == 0.0


def test_kl_hand_case():
    want = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    got = kl_divergence([0.5, 0.5], [0.25, 0.75])
    assert got == pytest.approx(want, abs=1e-5)


def test_kl_input_contract():
    with pytest.raises(ContractError):
        kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])
    with pytest.raises(DimensionError):
        kl_divergence(np.ones((2, 2)) / 4, np.ones((2, 2)) / 4)
    with pytest.raises(ContractError):
        kl_divergence([0.5, -0.5], [0.5, 0.5])
    with pytest.raises(ContractError):
        kl_divergence([0.5, 0.5], [0.5, 0.5], smoothing=0.0)


def test_kl_smoothing_keeps_zero_bins_finite():
    v = kl_divergence([1.0, 0.0], [0.0, 1.0])
    assert np.isfinite(v) and v > 0


def test_kl_nonnegative_over_random_pairs():
    rng = np.random.default_rng(13)
    for _ in range(1000):
        n = int(rng.integers(2, 8))
        assert kl_divergence(rand_dist(rng, n), rand_dist(rng, n)) >= 0.0


# ------------------------------------------------------------------ cmi


def test_cmi_identical_vectors_is_exactly_zero():
    v = np.array([0.3, -1.2, 0.5])
    assert contextual_modulation_index([np.stack([v, v, v])]) == 0.0


def test_cmi_orthogonal_vectors_is_one():
    probe = np.eye(3)
    assert contextual_modulation_index([probe]) == pytest.approx(1.0, abs=1e-12)


def test_cmi_mixed_probes_average():
    v = np.array([1.0, 0.0])
    same = np.stack([v, v])
    orth = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert contextual_modulation_index([same, orth]) == pytest.approx(0.5, abs=1e-12)


def test_cmi_antiparallel_hits_ceiling():
    probe = np.array([[2.0, 0.0], [-2.0, 0.0]])
    assert contextual_modulation_index([probe]) == pytest.approx(2.0, abs=1e-12)


def test_cmi_input_contract():
    with pytest.raises(ContractError):
        contextual_modulation_index([])
    with pytest.raises(ContractError):
        contextual_modulation_index([np.ones((1, 3))])
    with pytest.raises(ContractError):
        contextual_modulation_index([np.array([[1.0, 0.0], [0.0, 0.0]])])
    with pytest.raises(DimensionError):
        contextual_modulation_index([np.ones(3)])


def test_cmi_stays_in_range():
    rng = np.random.default_rng(17)
    for _ in range(100):
        probes = [rng.normal(size=(int(rng.integers(2, 5)), 4)) for _ in range(3)]
        v = contextual_modulation_index(probes)
        assert 0.0 <= v <= 2.0


# ------------------------------------------------------------------ boundary variance


def test_boundary_variance_identical_contexts_is_zero():
    assert boundary_variance([{0, 2}, {0, 2}, {0, 2}], core_length=5) == 0.0


def test_boundary_variance_hand_case():
    # one boundary present in exactly one of two contexts, core length 4:
    # per-position variances [0.25, 0, 0, 0]
    assert boundary_variance([{1}, set()], core_length=4) == 0.0625


def test_boundary_variance_context_independent_chunker_is_zero():
    chunks = {0, 2, 4, 6}
    assert boundary_variance([set(chunks) for _ in range(5)], core_length=8) == 0.0


def test_boundary_variance_input_contract():
    with pytest.raises(ContractError):
        boundary_variance([{0}], core_length=4)
    with pytest.raises(ContractError):
        boundary_variance([{0}, {4}], core_length=4)
    with pytest.raises(ContractError):
        boundary_variance([{0}, {-1}], core_length=4)
    with pytest.raises(ContractError):
        boundary_variance([{0}, {1}], core_length=0)


def test_boundary_variance_is_bounded_by_bernoulli_max():
    rng = np.random.default_rng(19)
    for _ in range(100):
        sets = [set(np.nonzero(rng.random(6) < 0.5)[0].tolist()) for _ in range(4)]
        assert 0.0 <= boundary_variance(sets, core_length=6) <= 0.25


# ------------------------------------------------------------------ error taxonomy


def vqa_item(objs, qtype, answer, target):
    scene = Scene(grid_size=8, objects=list(objs))
    return TaskItem(
        item_id=0, kind="vqa", seed=0, scene=scene,
        raster=np.zeros((3, 8, 8)), caption=Caption(text="x", mention_spans=[]),
        payload={"question": "q?", "answer": answer, "qtype": qtype, "target": list(target)},
    )


GREEN_TRI = SceneObject("triangle", "green", (0, 0))
RED_SQ = SceneObject("square", "red", (0, 3))


def test_classify_correct_prediction_is_none():
    item = vqa_item([GREEN_TRI, RED_SQ], "color", "green", [0])
    assert classify_error(item, "green") is None


def test_classify_one_mistake_per_category():
    color_q = vqa_item([GREEN_TRI, RED_SQ], "color", "green", [0])
    relation_q = vqa_item([GREEN_TRI, RED_SQ], "relation", "left of", [0, 1])
    items = [color_q, color_q, relation_q, color_q]
    preds = [
        "triangle",  # the target's other attribute
        "red",       # attribute of the other object
        "right of",  # reflected relation
        "blue",      # matches nothing in the scene
    ]
    hist = error_histogram(preds, items)
    assert [hist.counts[c] for c in ERROR_CATEGORIES] == [1, 1, 1, 1]


def test_classify_precedence_attribute_over_object():
    # both objects are triangles, so "triangle" is also another object's
    # attribute; the target's own other attribute must win
    other_tri = SceneObject("triangle", "red", (2, 2))
    item = vqa_item([GREEN_TRI, other_tri], "color", "green", [0])
    assert classify_error(item, "triangle") == "wrong_attribute"


def test_classify_shape_question_other_attribute():
    item = vqa_item([GREEN_TRI, RED_SQ], "shape", "triangle", [0])
    assert classify_error(item, "green") == "wrong_attribute"
    assert classify_error(item, "square") == "wrong_object"
    assert classify_error(item, "above") == "other"


def test_classify_relation_answered_with_scene_attribute_is_wrong_object():
    item = vqa_item([GREEN_TRI, RED_SQ], "relation", "left of", [0, 1])
    assert classify_error(item, "red") == "wrong_object"
    assert classify_error(item, "triangle") == "wrong_object"


def test_classify_non_reflected_relation_is_other():
    item = vqa_item([GREEN_TRI, RED_SQ], "relation", "left of", [0, 1])
    assert classify_error(item, "above") == "other"


def test_classify_next_to_never_reflects():
    item = vqa_item([GREEN_TRI, RED_SQ], "relation", "next to", [0, 1])
    assert classify_error(item, "left of") == "other"
    assert classify_error(item, "above") == "other"


def test_error_histogram_zero_errors_contract():
    item = vqa_item([GREEN_TRI, RED_SQ], "color", "green", [0])
    hist = error_histogram(["green"], [item])
    assert hist.total == 0
    with pytest.raises(NoErrorsError):
        hist.distribution()


def test_error_histogram_distribution():
    color_q = vqa_item([GREEN_TRI, RED_SQ], "color", "green", [0])
    hist = error_histogram(["triangle", "triangle", "red", "green"], [color_q] * 4)
    assert hist.total == 3
    assert np.allclose(hist.distribution(), [2 / 3, 1 / 3, 0.0, 0.0])


def test_error_histogram_is_deterministic():
    color_q = vqa_item([GREEN_TRI, RED_SQ], "color", "green", [0])
    preds = ["red", "blue", "triangle"]
    a = error_histogram(preds, [color_q] * 3)
    b = error_histogram(preds, [color_q] * 3)
    assert a.counts == b.counts


def test_error_histogram_input_contract():
    item = vqa_item([GREEN_TRI, RED_SQ], "color", "green", [0])
    with pytest.raises(ContractError):
        error_histogram(["green", "red"], [item])
    match_item = TaskItem(
        item_id=1, kind="matching", seed=0, scene=item.scene,
        raster=item.raster, caption=item.caption, payload={},
    )
    with pytest.raises(ContractError):
        error_histogram(["green"], [match_item])
    with pytest.raises(ContractError):
        ErrorHistogram({"wrong_attribute": 1})
    with pytest.raises(ContractError):
        ErrorHistogram({c: -1 for c in ERROR_CATEGORIES})
