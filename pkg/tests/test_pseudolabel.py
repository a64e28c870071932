import numpy as np
import pytest

from orsd.errors import DataFormatError
from orsd.geom import SOURCE_GROUND_TRUTH, SOURCE_PSEUDO_LABEL, Detection, OrientedBox
from orsd.pseudolabel import (
    CategoryTree,
    DetectionProvenance,
    ImageDetections,
    PseudoLabelRecord,
    SimilarityProvider,
    build_record,
    filter_by_score,
    label_image,
    label_images,
    merge_predictions,
    mix_sampler,
    partition_vs_gt,
    similarity_filter,
)

import oracles
from pseudo_fixture import (
    expected_records,
    fixture_images,
    fixture_provider,
    fixture_tree,
)


def det(category, score, cx, cy, w, h, theta=0.0, source="model-prediction"):
    return Detection(
        category=category, score=score, box=OrientedBox(cx, cy, w, h, theta), source=source
    )


def gt(category, cx, cy, w, h, theta=0.0):
    return det(category, 1.0, cx, cy, w, h, theta, source=SOURCE_GROUND_TRUTH)


# ----------------------------------------------------------------- category tree


def test_tree_top_level_walks_to_root():
    tree = CategoryTree({"a": None, "b": "a", "c": "b", "lone": None})
    assert tree.top_level("c") == "a"
    assert tree.top_level("b") == "a"
    assert tree.top_level("a") == "a"
    assert tree.top_level("lone") == "lone"


def test_tree_same_top_level():
    tree = fixture_tree()
    assert tree.same_top_level("boat", "ship")
    assert not tree.same_top_level("boat", "plane")
    assert tree.same_top_level("storage-tank", "storage-tank")


def test_tree_roots_sorted():
    tree = fixture_tree()
    assert tree.roots == ["aircraft", "storage-tank", "vehicle", "watercraft"]


def test_tree_parent_lookup():
    tree = fixture_tree()
    assert tree.parent("ferry") == "watercraft"
    assert tree.parent("vehicle") is None


def test_tree_rejects_cycle():
    with pytest.raises(DataFormatError):
        CategoryTree({"a": "b", "b": "a"})


def test_tree_rejects_unknown_parent():
    with pytest.raises(DataFormatError):
        CategoryTree({"a": "nope"})


def test_tree_missing_category_errors():
    tree = fixture_tree()
    with pytest.raises(DataFormatError):
        tree.top_level("submarine")
    with pytest.raises(DataFormatError):
        tree.parent("submarine")
    assert "submarine" not in tree
    assert len(tree) == 10


# ----------------------------------------------------------------- score filter


def test_score_filter_keeps_at_or_above_threshold():
    dets = [det("a", 0.31, 10, 10, 5, 5), det("a", 0.29, 30, 30, 5, 5)]
    kept = filter_by_score(dets, 0.3)
    assert len(kept) == 1 and kept[0].score == 0.31


def test_score_filter_boundary_is_kept():
    dets = [det("a", 0.3, 10, 10, 5, 5)]
    assert filter_by_score(dets, 0.3) == dets


def test_score_filter_preserves_order():
    dets = [det("a", s, 10 * i + 5, 10, 5, 5) for i, s in enumerate([0.9, 0.4, 0.7, 0.1])]
    kept = filter_by_score(dets, 0.35)
    assert [d.score for d in kept] == [0.9, 0.4, 0.7]


# --------------------------------------------------------------------- partition


def test_partition_clear_detection_is_novel():
    tree = fixture_tree()
    d = det("boat", 0.6, 70, 70, 10, 6)
    novel, hard, discarded = partition_vs_gt([d], [gt("ship", 20, 20, 16, 8)], tree, 0.5)
    assert novel == [d] and hard == [] and discarded == []


def test_partition_same_parent_is_discarded():
    # boat at (21,20) on a ship at (20,20), both 16x8: IoU = 120/136 = 0.882...
    tree = fixture_tree()
    d = det("boat", 0.8, 21, 20, 16, 8)
    novel, hard, discarded = partition_vs_gt([d], [gt("ship", 20, 20, 16, 8)], tree, 0.5)
    assert discarded == [d] and novel == [] and hard == []


def test_partition_cross_parent_is_hard_negative():
    tree = fixture_tree()
    d = det("truck", 0.85, 30, 31, 20, 12)  # IoU 220/260 with the plane
    novel, hard, discarded = partition_vs_gt([d], [gt("plane", 30, 30, 20, 12)], tree, 0.5)
    assert hard == [d] and novel == [] and discarded == []


def test_partition_uses_highest_iou_ground_truth():
    # The detection overlaps both GTs above threshold; the higher-IoU one
    # (0.818 vs 0.667) decides the tree comparison.
    tree = fixture_tree()
    d = det("ship", 0.9, 20, 20, 20, 10)
    near = gt("boat", 22, 20, 20, 10)    # IoU 180/220
    far = gt("truck", 20, 22, 20, 10)    # IoU 160/240
    _, hard, discarded = partition_vs_gt([d], [near, far], tree, 0.5)
    assert discarded == [d] and hard == []

    # Swap the categories: now the best match is cross-parent.
    near2 = gt("plane", 22, 20, 20, 10)
    _, hard2, discarded2 = partition_vs_gt([d], [near2, far], tree, 0.5)
    assert hard2 == [d] and discarded2 == []


def test_partition_empty_ground_truth_everything_novel():
    tree = fixture_tree()
    dets = [det("boat", 0.5, 10, 10, 6, 4), det("plane", 0.6, 40, 40, 8, 6)]
    novel, hard, discarded = partition_vs_gt(dets, [], tree, 0.5)
    assert novel == dets and hard == [] and discarded == []


def test_partition_missing_category_errors():
    tree = fixture_tree()
    d = det("submarine", 0.8, 20, 20, 16, 8)
    with pytest.raises(DataFormatError):
        partition_vs_gt([d], [gt("ship", 20, 20, 16, 8)], tree, 0.5)


def test_partition_rejects_bad_threshold():
    tree = fixture_tree()
    with pytest.raises(ValueError):
        partition_vs_gt([], [], tree, 0.0)
    with pytest.raises(ValueError):
        partition_vs_gt([], [], tree, 1.5)


# ------------------------------------------------------------------------- merge


def test_merge_collapses_cross_source_duplicates():
    a = det("plane", 0.9, 60, 20, 24, 18)
    b = det("plane", 0.7, 61, 20, 24, 18)  # IoU 414/450 with a
    merged = merge_predictions([[a], [b]], 0.5)
    assert merged == [a]


def test_merge_matches_brute_force_on_concatenation():
    rng = np.random.default_rng(5)
    for trial in range(20):
        sources = []
        for _ in range(3):
            dets = []
            for _ in range(rng.integers(0, 12)):
                dets.append(
                    det(
                        rng.choice(["a", "b", "c"]),
                        float(rng.uniform(0.05, 1.0)),
                        float(rng.uniform(0, 60)),
                        float(rng.uniform(0, 60)),
                        float(rng.uniform(2, 20)),
                        float(rng.uniform(2, 20)),
                        float(rng.uniform(-np.pi / 2, np.pi / 2)),
                    )
                )
            sources.append(dets)
        flat = [d for src in sources for d in src]
        assert merge_predictions(sources, 0.4) == oracles.brute_force_nms(flat, 0.4, "obb")


def test_merge_result_independent_of_source_order():
    # Continuous random scores make exact ties impossible, so the kept set
    # is the same whichever source comes first.
    rng = np.random.default_rng(11)
    sources = []
    for _ in range(3):
        sources.append(
            [
                det(
                    "c",
                    float(rng.uniform(0.05, 1.0)),
                    float(rng.uniform(0, 40)),
                    float(rng.uniform(0, 40)),
                    float(rng.uniform(4, 16)),
                    float(rng.uniform(4, 16)),
                    float(rng.uniform(-1.0, 1.0)),
                )
                for _ in range(8)
            ]
        )
    forward = merge_predictions(sources, 0.5)
    backward = merge_predictions(list(reversed(sources)), 0.5)
    assert forward == backward


# ------------------------------------------------------------------- similarity


def test_similarity_provider_range_and_lookup():
    p = SimilarityProvider({("a", "x"): 0.5})
    assert p.get("a", "x") == 0.5
    assert p.get("a", "y") is None
    with pytest.raises(DataFormatError):
        p.require("a", "y")
    with pytest.raises(DataFormatError):
        SimilarityProvider({("a", "x"): 1.5})


def test_similarity_small_box_bypasses_without_entry():
    provider = SimilarityProvider({})
    d = det("boat", 0.6, 10, 10, 8, 8)  # 8x8 px: no embedding is reliable
    kept, sims = similarity_filter([d], provider, 0.24, 16.0)
    assert kept == [d] and sims == [None]


def test_similarity_min_side_governs_bypass():
    # 40x10: one side is large but the min side is 10 <= 16, still bypassed.
    provider = SimilarityProvider({})
    d = det("boat", 0.6, 30, 30, 40, 10)
    kept, sims = similarity_filter([d], provider, 0.24, 16.0)
    assert kept == [d] and sims == [None]


def test_similarity_threshold_boundary():
    d = det("ship", 0.7, 30, 30, 32, 32)
    for value, should_keep in [(0.25, True), (0.23, False), (0.24, True)]:
        provider = SimilarityProvider({("ship", "0"): value})
        kept, sims = similarity_filter([d], provider, 0.24, 16.0)
        if should_keep:
            assert kept == [d] and sims == [value]
        else:
            assert kept == [] and sims == []


def test_similarity_missing_entry_for_large_box_errors():
    provider = SimilarityProvider({})
    d = det("ship", 0.7, 30, 30, 32, 32)
    with pytest.raises(DataFormatError):
        similarity_filter([d], provider, 0.24, 16.0)


def test_similarity_uses_given_crop_ids():
    d = det("ship", 0.7, 30, 30, 32, 32)
    provider = SimilarityProvider({("ship", "img#s0.3"): 0.9})
    kept, sims = similarity_filter([d], provider, 0.24, 16.0, crop_ids=["img#s0.3"])
    assert kept == [d] and sims == [0.9]
    with pytest.raises(ValueError):
        similarity_filter([d], provider, 0.24, 16.0, crop_ids=["a", "b"])


# ---------------------------------------------------------------------- records


def test_build_record_no_pseudo_keeps_gt_categories():
    rec = build_record("img", [], [], [], [gt("plane", 10, 10, 8, 6), gt("ship", 30, 30, 8, 6)])
    assert rec.category_list == ("plane", "ship")
    assert rec.detections == () and rec.hard_negatives == ()


def test_build_record_appends_new_categories_after_gt():
    rec = build_record(
        "img",
        [det("ship", 0.8, 50, 50, 20, 10)],
        [0.5],
        [],
        [gt("plane", 10, 10, 8, 6)],
    )
    assert rec.category_list == ("plane", "ship")
    assert rec.detections[0].source == SOURCE_PSEUDO_LABEL
    assert rec.provenance == (DetectionProvenance(0.8, 0.5, "novel"),)


def test_build_record_hard_negatives_listed_separately():
    rec = build_record("img", [], [], ["truck", "truck"], [gt("plane", 10, 10, 8, 6)])
    assert rec.category_list == ("plane", "truck")
    assert rec.hard_negatives == ("truck",)


def test_build_record_kept_category_overrides_hard_negative():
    rec = build_record(
        "img",
        [det("truck", 0.6, 50, 50, 20, 18)],
        [0.4],
        ["truck"],
        [],
    )
    assert rec.hard_negatives == ()
    assert rec.category_list == ("truck",)


def test_build_record_gt_category_cannot_be_hard_negative():
    rec = build_record("img", [], [], ["plane"], [gt("plane", 10, 10, 8, 6)])
    assert rec.hard_negatives == ()
    assert rec.category_list == ("plane",)


def test_build_record_length_mismatch_errors():
    with pytest.raises(DataFormatError):
        build_record("img", [det("a", 0.5, 10, 10, 5, 5)], [], [], [])


def test_record_validation():
    d = det("boat", 0.5, 10, 10, 8, 6, source=SOURCE_PSEUDO_LABEL)
    prov = DetectionProvenance(0.5, 0.3, "novel")
    ok = PseudoLabelRecord("img", (d,), ("boat",), (), (prov,))
    assert ok.detections == (d,)

    with pytest.raises(DataFormatError):  # provenance length
        PseudoLabelRecord("img", (d,), ("boat",), (), ())
    with pytest.raises(DataFormatError):  # category not listed
        PseudoLabelRecord("img", (d,), ("ship",), (), (prov,))
    with pytest.raises(DataFormatError):  # wrong source tag
        PseudoLabelRecord(
            "img", (det("boat", 0.5, 10, 10, 8, 6),), ("boat",), (), (prov,)
        )
    with pytest.raises(DataFormatError):  # negative not in the list
        PseudoLabelRecord("img", (d,), ("boat",), ("truck",), (prov,))
    with pytest.raises(DataFormatError):  # negative clashes with a detection
        PseudoLabelRecord("img", (d,), ("boat",), ("boat",), (prov,))
    with pytest.raises(DataFormatError):  # duplicate category entries
        PseudoLabelRecord("img", (d,), ("boat", "boat"), (), (prov,))
    with pytest.raises(DataFormatError):  # unknown filter path
        DetectionProvenance(0.5, 0.3, "guessed")
    with pytest.raises(DataFormatError):  # similarity out of range
        DetectionProvenance(0.5, -1.2, "novel")


# ------------------------------------------------------------------ full fixture


def test_fixture_records_match_hand_derivation():
    records = label_images(fixture_images(), fixture_tree(), fixture_provider())
    assert records == expected_records()


def test_fixture_output_sorted_by_image_id():
    records = label_images(fixture_images(), fixture_tree(), fixture_provider())
    assert [r.image_id for r in records] == ["alpha", "bravo", "charlie", "delta", "echo"]


def test_fixture_stable_across_runs_and_workers():
    base = label_images(fixture_images(), fixture_tree(), fixture_provider())
    again = label_images(fixture_images(), fixture_tree(), fixture_provider())
    threaded = label_images(
        fixture_images(), fixture_tree(), fixture_provider(), max_workers=3
    )
    assert base == again == threaded


def test_fixture_input_order_irrelevant():
    images = fixture_images()
    forward = label_images(images, fixture_tree(), fixture_provider())
    backward = label_images(list(reversed(images)), fixture_tree(), fixture_provider())
    assert forward == backward


def test_label_image_single():
    images = {img.image_id: img for img in fixture_images()}
    rec = label_image(images["charlie"], fixture_tree(), fixture_provider())
    assert rec == expected_records()[2]


def test_label_images_rejects_duplicate_ids():
    images = fixture_images()
    with pytest.raises(DataFormatError):
        label_images(images + [images[0]], fixture_tree(), fixture_provider())
    with pytest.raises(ValueError):
        label_images(images, fixture_tree(), fixture_provider(), max_workers=0)


# ---------------------------------------------------------------------- sampler


def test_mix_sampler_all_labeled_without_pseudo():
    sampler = mix_sampler(7, 0, np.random.default_rng(0))
    draws = [next(sampler) for _ in range(200)]
    assert all(src == "labeled" and 0 <= i < 7 for src, i in draws)


def test_mix_sampler_long_run_ratio():
    sampler = mix_sampler(10, 5, np.random.default_rng(123))
    n = 300_000
    pseudo = sum(1 for _ in range(n) if next(sampler)[0] == "pseudo")
    assert abs(pseudo / n - 1.0 / 3.0) <= 0.005


def test_mix_sampler_indexes_in_range():
    sampler = mix_sampler(4, 3, np.random.default_rng(9))
    for _ in range(2000):
        src, idx = next(sampler)
        assert (src, idx) in {("labeled", i) for i in range(4)} | {
            ("pseudo", i) for i in range(3)
        }


def test_mix_sampler_deterministic_per_seed():
    a = mix_sampler(6, 4, np.random.default_rng(42))
    b = mix_sampler(6, 4, np.random.default_rng(42))
    assert [next(a) for _ in range(50)] == [next(b) for _ in range(50)]


def test_mix_sampler_rejects_bad_sizes():
    with pytest.raises(ValueError):
        next(mix_sampler(0, 3, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        next(mix_sampler(3, -1, np.random.default_rng(0)))
