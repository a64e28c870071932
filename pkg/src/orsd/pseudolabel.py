"""Self-training pseudo-label pipeline.

Model detections become extra annotations through a fixed sequence of
filters: a confidence threshold, a comparison against ground truth that
either discards redundant boxes or mines hard-negative categories via a
category tree, a class-agnostic merge across prompt sets, and a cosine
similarity check for crops large enough to embed reliably. Survivors are
emitted as per-image records carrying an independent category list, and a
mixing sampler draws pseudo-labeled images at half the labeled rate.

Everything here is deterministic: identical inputs produce identical
records regardless of how many worker threads process the images.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterator, Mapping, Sequence

from .errors import DataFormatError
from .geom import (
    SOURCE_PSEUDO_LABEL,
    Detection,
    class_agnostic_nms,
    hbb_iou,
    rotated_iou,
)

SCORE_THRESHOLD = 0.3
SIMILARITY_THRESHOLD = 0.24
MIN_FILTERED_SIDE_PX = 16.0
OVERLAP_IOU = 0.5
MERGE_NMS_IOU = 0.5

FILTER_PATH_NOVEL = "novel"
FILTER_PATH_TREE_CHECKED = "tree-checked"
_FILTER_PATHS = (FILTER_PATH_NOVEL, FILTER_PATH_TREE_CHECKED)


class CategoryTree:
    """Forest of category names; each node optionally points at a parent.

    Consistency checks ("do these two categories belong to the same parent
    class?") compare top-level ancestors, i.e. the roots of the forest.
    """

    def __init__(self, parents: Mapping[str, str | None]):
        self._parents = dict(parents)
        for name, parent in self._parents.items():
            if parent is not None and parent not in self._parents:
                raise DataFormatError(
                    f"category {name!r} names unknown parent {parent!r}"
                )
        self._top: dict[str, str] = {}
        for name in self._parents:
            seen = {name}
            node = name
            while self._parents[node] is not None:
                node = self._parents[node]
                if node in seen:
                    raise DataFormatError(f"category tree has a cycle through {node!r}")
                seen.add(node)
            self._top[name] = node

    def __contains__(self, name: str) -> bool:
        return name in self._parents

    def __len__(self) -> int:
        return len(self._parents)

    @property
    def roots(self) -> list[str]:
        return sorted(n for n, p in self._parents.items() if p is None)

    def as_parent_map(self) -> dict[str, str | None]:
        """Copy of the name -> parent mapping (None marks a root)."""
        return dict(self._parents)

    def parent(self, name: str) -> str | None:
        self._require(name)
        return self._parents[name]

    def top_level(self, name: str) -> str:
        self._require(name)
        return self._top[name]

    def same_top_level(self, a: str, b: str) -> bool:
        return self.top_level(a) == self.top_level(b)

    def _require(self, name: str) -> None:
        if name not in self._parents:
            raise DataFormatError(f"category {name!r} is not in the category tree")


class SimilarityProvider:
    """Cosine similarities for detection crops, keyed by (category, crop id).

    The embeddings themselves are produced upstream; this is the ingested
    lookup table. Values must lie in [-1, 1].
    """

    def __init__(self, entries: Mapping[tuple[str, str], float]):
        self._entries = {}
        for (category, crop_id), value in entries.items():
            v = float(value)
            if not -1.0 <= v <= 1.0:
                raise DataFormatError(
                    f"similarity for ({category!r}, {crop_id!r}) is {v}, outside [-1, 1]"
                )
            self._entries[(category, crop_id)] = v

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, category: str, crop_id: str) -> float | None:
        return self._entries.get((category, crop_id))

    def require(self, category: str, crop_id: str) -> float:
        value = self.get(category, crop_id)
        if value is None:
            raise DataFormatError(
                f"no similarity recorded for ({category!r}, {crop_id!r})"
            )
        return value


@dataclass(frozen=True)
class DetectionProvenance:
    """How one emitted pseudo detection earned its place.

    ``clip_similarity`` is None when the crop was too small for the
    similarity filter and was kept by the size bypass. ``filter_path`` is
    "novel" for boxes that never overlapped ground truth — the only kind
    the pipeline emits; "tree-checked" is reserved for records describing
    category-only hard-negative evidence.
    """

    score: float
    clip_similarity: float | None
    filter_path: str

    def __post_init__(self) -> None:
        if self.filter_path not in _FILTER_PATHS:
            raise DataFormatError(f"unknown filter path {self.filter_path!r}")
        if self.clip_similarity is not None and not -1.0 <= self.clip_similarity <= 1.0:
            raise DataFormatError(
                f"clip similarity {self.clip_similarity} outside [-1, 1]"
            )


@dataclass(frozen=True)
class PseudoLabelRecord:
    """Per-image self-training annotation: boxes, categories, negatives."""

    image_id: str
    detections: tuple[Detection, ...]
    category_list: tuple[str, ...]
    hard_negatives: tuple[str, ...]
    provenance: tuple[DetectionProvenance, ...]

    def __post_init__(self) -> None:
        if len(self.provenance) != len(self.detections):
            raise DataFormatError(
                f"{len(self.detections)} detections but {len(self.provenance)} provenance entries"
            )
        if len(set(self.category_list)) != len(self.category_list):
            raise DataFormatError("category list contains duplicates")
        cats = set(self.category_list)
        det_cats = {d.category for d in self.detections}
        for det in self.detections:
            if det.source != SOURCE_PSEUDO_LABEL:
                raise DataFormatError(
                    f"pseudo record holds a detection with source {det.source!r}"
                )
            if det.category not in cats:
                raise DataFormatError(
                    f"detection category {det.category!r} missing from category list"
                )
        for neg in self.hard_negatives:
            if neg not in cats:
                raise DataFormatError(
                    f"hard negative {neg!r} missing from category list"
                )
            if neg in det_cats:
                raise DataFormatError(
                    f"{neg!r} is both a hard negative and a detected category"
                )


# ------------------------------------------------------------------- pipeline


def filter_by_score(dets: Sequence[Detection], threshold: float) -> list[Detection]:
    """Keep detections scoring at least ``threshold``, in input order."""
    return [d for d in dets if d.score >= threshold]


def _pair_iou(a: Detection, b: Detection) -> float:
    if a.box is not None and b.box is not None:
        return rotated_iou(a.box, b.box)
    return hbb_iou(a.hbox, b.hbox)


def partition_vs_gt(
    dets: Sequence[Detection],
    gt: Sequence[Detection],
    tree: CategoryTree,
    overlap_iou: float = OVERLAP_IOU,
) -> tuple[list[Detection], list[Detection], list[Detection]]:
    """Split detections by their relationship to the ground truth.

    Boxes clear of every GT box (max IoU below ``overlap_iou``) are novel
    candidates. Boxes that sit on a GT object get a category-tree check
    against that object: same top-level parent means the detection merely
    re-found a labeled object and is discarded; a different parent makes
    its category a hard-negative candidate.

    Returns (novel, hard_negative_candidates, discarded).
    """
    if not 0.0 < overlap_iou <= 1.0:
        raise ValueError(f"overlap threshold must be in (0, 1], got {overlap_iou}")
    novel: list[Detection] = []
    hard: list[Detection] = []
    discarded: list[Detection] = []
    for det in dets:
        best_iou = 0.0
        best_gt: Detection | None = None
        for g in gt:
            iou = _pair_iou(det, g)
            if iou > best_iou:
                best_iou = iou
                best_gt = g
        if best_iou < overlap_iou:
            novel.append(det)
        elif tree.same_top_level(det.category, best_gt.category):
            discarded.append(det)
        else:
            hard.append(det)
    return novel, hard, discarded


def merge_predictions(
    per_prompt_set_results: Sequence[Sequence[Detection]],
    nms_iou: float = MERGE_NMS_IOU,
) -> list[Detection]:
    """Concatenate detections from every prompt set and dedupe with
    class-agnostic NMS (oriented boxes)."""
    merged: list[Detection] = []
    for dets in per_prompt_set_results:
        merged.extend(dets)
    return class_agnostic_nms(merged, nms_iou, mode="obb")


def similarity_filter(
    dets: Sequence[Detection],
    provider: SimilarityProvider,
    sim_threshold: float = SIMILARITY_THRESHOLD,
    min_side_px: float = MIN_FILTERED_SIDE_PX,
    crop_ids: Sequence[str] | None = None,
) -> tuple[list[Detection], list[float | None]]:
    """Embedding-similarity gate for sufficiently large crops.

    A detection whose minimum enclosing horizontal box has a side of at
    most ``min_side_px`` bypasses the check (its crop is too small for a
    reliable embedding) and is kept with a None similarity. Larger boxes
    need a recorded similarity of at least ``sim_threshold``.

    Returns the kept detections and, aligned with them, the similarity
    each one was judged by (None = size bypass).
    """
    if crop_ids is None:
        crop_ids = [str(i) for i in range(len(dets))]
    if len(crop_ids) != len(dets):
        raise ValueError(f"{len(dets)} detections but {len(crop_ids)} crop ids")
    kept: list[Detection] = []
    sims: list[float | None] = []
    for det, crop_id in zip(dets, crop_ids):
        hb = det.hbox
        if min(hb.width, hb.height) <= min_side_px:
            kept.append(det)
            sims.append(None)
            continue
        value = provider.require(det.category, crop_id)
        if value >= sim_threshold:
            kept.append(det)
            sims.append(value)
    return kept, sims


def build_record(
    image_id: str,
    novel_kept: Sequence[Detection],
    similarities: Sequence[float | None],
    hard_negatives: Sequence[str],
    gt: Sequence[Detection],
) -> PseudoLabelRecord:
    """Assemble the per-image record.

    The category list is ordered deterministically: ground-truth
    categories first, then newly detected ones, then hard negatives, each
    segment sorted. A category backed by a kept box is a positive, so it
    is dropped from the hard-negative set even if some other detection of
    it overlapped ground truth; likewise a category already in the ground
    truth cannot be a negatives-only entry.
    """
    if len(similarities) != len(novel_kept):
        raise DataFormatError(
            f"{len(novel_kept)} detections but {len(similarities)} similarities"
        )
    dets = tuple(
        d if d.source == SOURCE_PSEUDO_LABEL else replace(d, source=SOURCE_PSEUDO_LABEL)
        for d in novel_kept
    )
    gt_cats = {g.category for g in gt}
    det_cats = {d.category for d in dets}
    negs = sorted(set(hard_negatives) - det_cats - gt_cats)
    category_list = sorted(gt_cats) + sorted(det_cats - gt_cats) + negs
    provenance = tuple(
        DetectionProvenance(
            score=d.score, clip_similarity=s, filter_path=FILTER_PATH_NOVEL
        )
        for d, s in zip(dets, similarities)
    )
    return PseudoLabelRecord(
        image_id=image_id,
        detections=dets,
        category_list=tuple(category_list),
        hard_negatives=tuple(negs),
        provenance=provenance,
    )


@dataclass(frozen=True)
class ImageDetections:
    """Raw model output for one image: detections per prompt set, plus GT.

    Crop ids identify each raw detection to the similarity provider and
    default to "{image}#s{set}.{index}" by position, so a provider built
    from the same per-source lists agrees on the keys without
    coordination, and ids stay unique across a multi-image batch.
    """

    image_id: str
    per_source: tuple[tuple[Detection, ...], ...]
    ground_truth: tuple[Detection, ...]

    def crop_id(self, source_index: int, det_index: int) -> str:
        return f"{self.image_id}#s{source_index}.{det_index}"


def label_image(
    image: ImageDetections,
    tree: CategoryTree,
    provider: SimilarityProvider,
    score_threshold: float = SCORE_THRESHOLD,
    overlap_iou: float = OVERLAP_IOU,
    nms_iou: float = MERGE_NMS_IOU,
    sim_threshold: float = SIMILARITY_THRESHOLD,
    min_side_px: float = MIN_FILTERED_SIDE_PX,
) -> PseudoLabelRecord:
    """Run the full filter sequence for one image."""
    crop_of: dict[int, str] = {}
    novel_per_source: list[list[Detection]] = []
    hard_candidates: list[str] = []
    for si, dets in enumerate(image.per_source):
        for di, det in enumerate(dets):
            crop_of[id(det)] = image.crop_id(si, di)
        confident = filter_by_score(dets, score_threshold)
        novel, hard, _ = partition_vs_gt(confident, image.ground_truth, tree, overlap_iou)
        novel_per_source.append(novel)
        hard_candidates.extend(d.category for d in hard)
    merged = merge_predictions(novel_per_source, nms_iou)
    kept, sims = similarity_filter(
        merged,
        provider,
        sim_threshold,
        min_side_px,
        crop_ids=[crop_of[id(d)] for d in merged],
    )
    return build_record(image.image_id, kept, sims, hard_candidates, image.ground_truth)


def label_images(
    images: Sequence[ImageDetections],
    tree: CategoryTree,
    provider: SimilarityProvider,
    score_threshold: float = SCORE_THRESHOLD,
    overlap_iou: float = OVERLAP_IOU,
    nms_iou: float = MERGE_NMS_IOU,
    sim_threshold: float = SIMILARITY_THRESHOLD,
    min_side_px: float = MIN_FILTERED_SIDE_PX,
    max_workers: int = 1,
) -> list[PseudoLabelRecord]:
    """Label a batch of images, in parallel if asked, output sorted by id.

    Images are processed independently, so the worker count changes only
    wall time — the record stream is identical for any ``max_workers``.
    """
    if max_workers < 1:
        raise ValueError(f"max_workers must be at least 1, got {max_workers}")
    ids = [img.image_id for img in images]
    if len(set(ids)) != len(ids):
        raise DataFormatError("duplicate image ids in batch")

    def one(image: ImageDetections) -> PseudoLabelRecord:
        return label_image(
            image, tree, provider,
            score_threshold=score_threshold,
            overlap_iou=overlap_iou,
            nms_iou=nms_iou,
            sim_threshold=sim_threshold,
            min_side_px=min_side_px,
        )

    if max_workers == 1:
        records = [one(img) for img in images]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            records = list(pool.map(one, images))
    return sorted(records, key=lambda r: r.image_id)


def mix_sampler(
    labeled_size: int,
    pseudo_size: int,
    rng,
) -> Iterator[tuple[str, int]]:
    """Endless (source, index) draws mixing pseudo data at half the labeled rate.

    Two labeled draws for every pseudo draw in the long run (pseudo
    fraction 1/3). With no pseudo data every draw is labeled. The stream
    is a pure function of the generator state, so a seeded ``rng`` replays
    exactly.
    """
    if labeled_size < 1:
        raise ValueError(f"need at least one labeled image, got {labeled_size}")
    if pseudo_size < 0:
        raise ValueError(f"negative pseudo_size {pseudo_size}")
    while True:
        if pseudo_size > 0 and rng.random() < 1.0 / 3.0:
            yield "pseudo", int(rng.integers(pseudo_size))
        else:
            yield "labeled", int(rng.integers(labeled_size))
