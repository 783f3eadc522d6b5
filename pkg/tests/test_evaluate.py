import numpy as np
import pytest

from dcmt.errors import ContractError
from dcmt.evaluate import (
    attention_comparison,
    boundary_f1,
    caption_boundaries,
    congruence_results,
    context_probe_stats,
    evaluate_model,
    retrieval_from_embeddings,
    retrieval_results,
    vqa_results,
    word_gaps,
)
from dcmt.model import CrossModalModel, ModelConfig
from dcmt.synthdata import ANSWERS, DatasetConfig, generate_items

TINY = ModelConfig(
    d=4, n_heads=1, levels=2, rounds=2, window=2, detector_hidden=3,
    seed=7, max_text_len=64, max_image_patches=16,
)


def items_of(seed=3, **counts):
    cfg = DatasetConfig(seed=seed, grid_size=4, max_objects=2, **counts)
    return generate_items(cfg)


# -------------------------------------------------------------- word gaps


def test_word_gaps_positions():
    # "a red disk": spaces at 1 and 5, word starts at 2 and 6
    assert word_gaps("a red disk") == [frozenset((1, 2)), frozenset((5, 6))]


def test_word_gaps_single_word_has_none():
    assert word_gaps("disk") == []


def test_word_gaps_ignores_leading_space_runs():
    assert word_gaps("a  b") == [frozenset((2, 3))]


# -------------------------------------------------------------- boundary F1


def test_boundary_f1_perfect():
    assert boundary_f1({2, 6}, "a red disk") == 1.0


def test_boundary_f1_space_position_also_counts():
    assert boundary_f1({1, 5}, "a red disk") == 1.0


def test_boundary_f1_spurious_prediction_halves():
    # one hit, one miss over two gaps: precision 1/2, recall 1/2
    assert boundary_f1({2, 3}, "a red disk") == pytest.approx(0.5)


def test_boundary_f1_gap_absorbs_single_prediction():
    # both predictions land in the first gap; only one can claim it
    assert boundary_f1({1, 2}, "a red disk") == pytest.approx(0.5)


def test_boundary_f1_empty_conventions():
    assert boundary_f1(set(), "disk") == 1.0
    assert boundary_f1(set(), "a red disk") == 0.0
    assert boundary_f1({2}, "disk") == 0.0


# -------------------------------------------------------------- retrieval


def test_retrieval_identity_embeddings():
    e = np.eye(3)
    acc, per = retrieval_from_embeddings(e, e)
    assert acc == 1.0
    assert per == [1.0, 1.0, 1.0]


def test_retrieval_swapped_pairing_scores_zero():
    txt = np.eye(2)
    img = np.eye(2)[::-1]
    acc, per = retrieval_from_embeddings(txt, img)
    assert acc == 0.0


def test_retrieval_half_credit_for_one_direction():
    # rows of txt are the similarity rows against an identity image table;
    # caption 1 finds its image but image 1 prefers caption 2
    txt = np.array([
        [0.9, 0.1, 0.0],
        [0.0, 0.9, 0.0],
        [0.0, 0.95, 0.99],
    ])
    acc, per = retrieval_from_embeddings(txt, np.eye(3))
    assert per == [1.0, 0.5, 1.0]
    assert acc == pytest.approx(5.0 / 6.0)


def test_retrieval_needs_two_items():
    with pytest.raises(ContractError):
        retrieval_from_embeddings(np.eye(1), np.eye(1))


def test_retrieval_shape_mismatch():
    with pytest.raises(ContractError):
        retrieval_from_embeddings(np.eye(3), np.eye(2))


def test_retrieval_results_deterministic():
    model = CrossModalModel(TINY)
    items = items_of(matching=4)
    a1, p1 = retrieval_results(model, items)
    a2, p2 = retrieval_results(model, items)
    assert a1 == a2 and p1 == p2
    assert all(v in (0.0, 0.5, 1.0) for v in p1)


# -------------------------------------------------------------- boundaries


def test_caption_boundaries_fixed_chunker_multiples_of_width():
    model = CrossModalModel(TINY.for_variant("baseline_static"))
    text = "a red disk left of a blue disk"
    states = model.encode_caption(text)
    assert caption_boundaries(states) == set(range(4, len(text), 4))


def test_caption_boundaries_never_include_zero():
    model = CrossModalModel(TINY)
    for it in items_of(matching=3):
        assert 0 not in caption_boundaries(model.encode_caption(it.caption.text))


# -------------------------------------------------------------- task metrics


def test_vqa_results_ranges():
    model = CrossModalModel(TINY)
    items = items_of(vqa=5)
    acc, per, preds = vqa_results(model, items)
    assert acc == pytest.approx(float(np.mean(per)))
    assert set(per) <= {0.0, 1.0}
    assert all(p in ANSWERS for p in preds)


def test_congruence_results_binary():
    model = CrossModalModel(TINY)
    items = items_of(congruence_probes=4)
    acc, per = congruence_results(model, items)
    assert len(per) == 4
    assert set(per) <= {0.0, 1.0}
    assert acc == pytest.approx(float(np.mean(per)))


# -------------------------------------------------------------- probes


def test_context_probe_fixed_chunker_variance_is_exactly_zero():
    # frame prefixes are multiples of the chunk width, so the fixed
    # segmentation is identical relative to the core in every context
    model = CrossModalModel(TINY.for_variant("baseline_static"))
    items = items_of(context_probes=3)
    cmi, bvar, cmi_per, var_per = context_probe_stats(model, items)
    assert bvar == 0.0
    assert var_per == [0.0, 0.0, 0.0]
    assert cmi >= 0.0


def test_context_probe_adaptive_in_range():
    model = CrossModalModel(TINY)
    items = items_of(context_probes=3)
    cmi, bvar, cmi_per, var_per = context_probe_stats(model, items)
    assert 0.0 <= cmi <= 4.0
    assert 0.0 <= bvar <= 0.25
    assert len(cmi_per) == len(var_per) == 3


# -------------------------------------------------------------- attention


def test_attention_comparison_bundle():
    model = CrossModalModel(TINY)
    it = items_of(matching=2)[0]
    bundle = attention_comparison(
        model.encode_caption(it.caption.text), model.encode_raster(it.raster), it
    )
    g = it.scene.grid_size
    assert bundle["image_model"].shape == (g, g)
    assert bundle["image_reference"].shape == (g, g)
    assert bundle["text_model"].shape == (len(it.caption.text),)
    assert bundle["text_reference"].shape == (len(it.caption.text),)
    for key in ("image_model", "image_reference", "text_model", "text_reference"):
        assert bundle[key].sum() == pytest.approx(1.0)
        assert (bundle[key] >= 0).all()
    assert bundle["emd_image"] >= 0.0
    assert bundle["emd_text"] >= 0.0


def test_attention_reference_marks_object_cells():
    model = CrossModalModel(TINY)
    it = items_of(matching=2)[1]
    bundle = attention_comparison(
        model.encode_caption(it.caption.text), model.encode_raster(it.raster), it
    )
    for obj in it.scene.objects:
        assert bundle["image_reference"][obj.cell[0], obj.cell[1]] > 0


# -------------------------------------------------------------- full report


@pytest.fixture(scope="module")
def mixed_report():
    model = CrossModalModel(TINY)
    items = items_of(matching=4, vqa=4, context_probes=3, congruence_probes=3)
    report, artifacts = evaluate_model(model, items, baseline=model, heatmap_items=2)
    return report, artifacts


def test_report_keys_populated(mixed_report):
    report, _ = mixed_report
    for key in (
        "retrieval_acc", "vqa_acc", "boundary_f1", "emd_mean",
        "cmi", "boundary_variance", "congruence_acc", "transfer_drop",
    ):
        assert isinstance(report[key], float), key


def test_report_transfer_drop_consistent(mixed_report):
    report, _ = mixed_report
    assert report["transfer_drop"] == pytest.approx(
        report["retrieval_acc"] - report["congruence_acc"]
    )


def test_report_self_baseline_kl(mixed_report):
    # the model against itself: identical error histograms, so either
    # zero divergence or no errors at all
    report, _ = mixed_report
    kl = report["kl_error_vs_baseline"]
    assert kl == 0.0 or (kl is None and sum(report["error_counts"].values()) == 0)


def test_report_per_item_alignment(mixed_report):
    report, _ = mixed_report
    for block in report["per_item"].values():
        assert len(block["ids"]) == len(block["values"])
        assert all(isinstance(i, int) for i in block["ids"])


def test_report_artifact_budget(mixed_report):
    _, artifacts = mixed_report
    assert len(artifacts) == 2
    for bundle in artifacts:
        assert sorted(bundle["boundaries"]) == bundle["boundaries"]
        assert bundle["caption"]


def test_report_missing_kinds_are_none():
    model = CrossModalModel(TINY)
    report, artifacts = evaluate_model(model, items_of(vqa=3))
    assert report["vqa_acc"] is not None
    for key in ("retrieval_acc", "boundary_f1", "emd_mean", "cmi",
                "boundary_variance", "congruence_acc", "transfer_drop",
                "kl_error_vs_baseline"):
        assert report[key] is None, key
    assert artifacts == []


def test_report_single_matching_item_skips_retrieval_only():
    model = CrossModalModel(TINY)
    report, _ = evaluate_model(model, items_of(matching=1))
    assert report["retrieval_acc"] is None
    assert report["boundary_f1"] is not None
    assert report["emd_mean"] is not None


def test_report_deterministic():
    model = CrossModalModel(TINY)
    items = items_of(matching=3, vqa=2)
    r1, _ = evaluate_model(model, items)
    r2, _ = evaluate_model(model, items)
    assert r1 == r2


def test_report_zero_heatmap_budget():
    model = CrossModalModel(TINY)
    _, artifacts = evaluate_model(model, items_of(matching=3), heatmap_items=0)
    assert artifacts == []
