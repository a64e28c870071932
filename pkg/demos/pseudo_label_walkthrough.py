#!/usr/bin/env python3
"""Walk one image batch through the pseudo-label filter chain, stage by stage.

Everything is hand-built and deterministic: a small category forest, two
prompt-set detection sources for one image, and a fixed similarity table
standing in for a frozen crop encoder. Each stage prints what survived
and why, ending with the canonical JSONL record.
"""

from orsd.geom import Detection, OrientedBox, SOURCE_GROUND_TRUTH, SOURCE_MODEL
from orsd.pseudolabel import (
    CategoryTree,
    ImageDetections,
    SimilarityProvider,
    filter_by_score,
    label_image,
    merge_predictions,
    partition_vs_gt,
    similarity_filter,
)
from orsd.harness.fileio import pseudo_record_json


def det(cat, score, cx, cy, w, h, theta=0.0, source=SOURCE_MODEL):
    return Detection(category=cat, score=score,
                     box=OrientedBox(cx, cy, w, h, theta), source=source)


tree = CategoryTree({
    "watercraft": None,
    "ship": "watercraft",
    "boat": "watercraft",
    "vehicle": None,
    "truck": "vehicle",
    "storage-tank": None,
})

ground_truth = (det("ship", 1.0, 30, 30, 20, 10, source=SOURCE_GROUND_TRUTH),)

# Two prompt sets ran detection on the same image; their outputs overlap.
source_a = (
    det("boat", 0.80, 31, 30, 20, 10),   # overlaps GT, same parent -> discard
    det("truck", 0.70, 30, 31, 20, 10),  # overlaps GT, different parent -> hard negative
    det("storage-tank", 0.90, 70, 70, 18, 18),  # clear of GT -> novel
    det("storage-tank", 0.20, 50, 50, 18, 18),  # below the score gate
)
source_b = (
    det("storage-tank", 0.85, 71, 70, 18, 18),  # duplicate of the novel box
    det("boat", 0.60, 16, 74, 24, 18),           # novel, but low similarity
    det("truck", 0.45, 84, 12, 10, 8),           # tiny: similarity gate bypassed
)

print("== stage 1: score gate (>= 0.3) ==")
kept_a = filter_by_score(source_a, 0.3)
kept_b = filter_by_score(source_b, 0.3)
print(f"  source A: {len(source_a)} -> {len(kept_a)}")
print(f"  source B: {len(source_b)} -> {len(kept_b)}")

print("== stage 2: overlap partition against ground truth ==")
novel_a, hard_a, dropped_a = partition_vs_gt(kept_a, ground_truth, tree)
novel_b, hard_b, dropped_b = partition_vs_gt(kept_b, ground_truth, tree)
print(f"  source A: novel={[d.category for d in novel_a]} "
      f"hard-negatives={[d.category for d in hard_a]} "
      f"discarded={[d.category for d in dropped_a]}")
print(f"  source B: novel={[d.category for d in novel_b]} "
      f"hard-negatives={[d.category for d in hard_b]} "
      f"discarded={[d.category for d in dropped_b]}")

print("== stage 3: cross-source merge + class-agnostic NMS ==")
merged = merge_predictions([novel_a, novel_b], nms_iou=0.5)
print(f"  {len(novel_a) + len(novel_b)} novel boxes -> {len(merged)} after NMS:",
      [(d.category, d.score) for d in merged])

print("== stage 4: similarity gate (>= 0.24, bypass below 16 px) ==")
similarities = SimilarityProvider({
    ("storage-tank", "demo"): 0.61,
    ("boat", "demo"): 0.11,
})
kept, sims = similarity_filter(merged, similarities, crop_ids=["demo"] * len(merged))
for d, s in zip(kept, sims):
    why = "similarity gate bypassed (small box)" if s is None else f"cosine {s:.2f}"
    print(f"  kept {d.category} @ {d.score:.2f}: {why}")
for d in merged:
    if not any(d is k for k in kept):
        print(f"  removed {d.category} @ {d.score:.2f}: below the similarity floor")

print("== full pipeline, one call ==")
image = ImageDetections(
    image_id="harbor-0001",
    per_source=(source_a, source_b),
    ground_truth=ground_truth,
)
# Crop ids are image-qualified: "<image>#s<source>.<index>". The boat sits
# in source 1 at index 1; its low cosine removes it here too.
provider = SimilarityProvider({
    ("storage-tank", "harbor-0001#s0.2"): 0.61,
    ("boat", "harbor-0001#s1.1"): 0.11,
})
record = label_image(image, tree, provider)
print(f"  detections: {[(d.category, d.score) for d in record.detections]}")
print(f"  category list: {record.category_list}")
# "truck" was a hard-negative candidate in stage 2, but another truck box
# survived the full chain — a kept detection outranks the negative signal.
print(f"  hard negatives: {record.hard_negatives}")
print("  record:", pseudo_record_json(record))
