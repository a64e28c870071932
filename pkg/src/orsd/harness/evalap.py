"""AP50: ranked matching plus exact area under the precision-recall curve."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Mapping, Sequence

import numpy as np

from ..geom import Detection, hbb_iou, rotated_iou
from ..promptdict import PromptDictionary, sample_inference_prompts
from .detector import ToyDetector
from .scenes import SyntheticScene


def _iou(a: Detection, b: Detection, mode: str) -> float:
    if mode == "obb":
        return rotated_iou(a.box, b.box)
    return hbb_iou(a.hbox, b.hbox)


def ap50(
    predictions: Mapping[str, Sequence[Detection]],
    gt: Mapping[str, Sequence[Detection]],
    mode: str = "obb",
    iou_threshold: float = 0.5,
) -> tuple[dict[str, float], float]:
    """Per-class average precision at the given IoU threshold, plus the mean.

    Matching is the usual ranked protocol: predictions of one class are
    sorted by score (ties broken by image id, then input position, so the
    metric is a pure function of its inputs); each is matched to the
    highest-IoU ground-truth box of the same class in its image, and
    counts as a true positive iff that IoU reaches the threshold and the
    box is not already taken. AP is the exact area under the resulting
    precision-recall curve (all-point interpolation). Classes are the
    ones appearing in the ground truth; the mean is over those.
    """
    if mode not in ("obb", "hbb"):
        raise ValueError(f"mode must be 'obb' or 'hbb', got {mode!r}")
    classes = sorted({d.category for dets in gt.values() for d in dets})
    per_class: dict[str, float] = {}
    for cls in classes:
        cls_gt = {
            img: [d for d in dets if d.category == cls] for img, dets in gt.items()
        }
        n_gt = sum(len(v) for v in cls_gt.values())
        ranked = sorted(
            (
                (-det.score, img, pos, det)
                for img, dets in predictions.items()
                for pos, det in enumerate(dets)
                if det.category == cls
            ),
        )
        matched: dict[str, list[bool]] = {
            img: [False] * len(v) for img, v in cls_gt.items()
        }
        tp = np.zeros(len(ranked))
        for k, (_, img, _, det) in enumerate(ranked):
            candidates = cls_gt.get(img, [])
            best, best_iou = -1, 0.0
            for gi, g in enumerate(candidates):
                iou = _iou(det, g, mode)
                if iou > best_iou:
                    best, best_iou = gi, iou
            if best >= 0 and best_iou >= iou_threshold and not matched[img][best]:
                matched[img][best] = True
                tp[k] = 1.0
        per_class[cls] = _area_under_pr(tp, n_gt)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def _area_under_pr(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, tp.size + 1)
    # Precision envelope (running max from the right), then sum the areas
    # of the rectangles between consecutive recall levels.
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_model(
    detector: ToyDetector,
    scenes: Sequence[SyntheticScene],
    dictionary: PromptDictionary,
    prompt_count: int = 5,
    modality: str = "text",
    head: str = "fusion",
    categories: Sequence[str] | None = None,
    seed: int = 0,
    score_thresh: float = 0.05,
    nms_thresh: float = 0.5,
    mode: str = "obb",
    max_workers: int = 1,
) -> tuple[dict[str, float], float]:
    """Detect on every scene with one sampled prompt batch, then score AP50.

    Images are independent at inference, so they can be fanned out over
    threads; the result does not depend on ``max_workers``.
    """
    if categories is None:
        categories = sorted({d.category for s in scenes for d in s.gt})
    batch = sample_inference_prompts(
        list(categories), dictionary, prompt_count, modality,
        np.random.default_rng([seed, 1]),
    )

    def run(scene: SyntheticScene) -> list[Detection]:
        return detector.detect(
            scene, batch, head=head, score_thresh=score_thresh,
            nms_thresh=nms_thresh, id_seed=seed, mode=mode,
        )

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            all_dets = list(pool.map(run, scenes))
    else:
        all_dets = [run(s) for s in scenes]
    predictions = {s.image_id: dets for s, dets in zip(scenes, all_dets)}
    truth = {s.image_id: list(s.gt) for s in scenes}
    return ap50(predictions, truth, mode=mode)
