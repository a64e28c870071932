"""Training loop: momentum SGD over the combined two-head detection loss.

Two phases, echoing how the full-scale system is brought up: a warmup in
which the backbone is frozen and only the detection modules move, then
full-parameter training. One scene per iteration, a fresh prompt batch
per iteration, deterministic for a fixed config.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import numkit as nk
from ..errors import TrainingDivergedError
from ..geom import Detection
from ..promptdict import (
    TRAIN_MAX_PROMPTS,
    TRAIN_MIN_PROMPTS,
    PromptDictionary,
    sample_training_prompts,
)
from ..pseudolabel import PseudoLabelRecord, mix_sampler
from .config import RunConfig
from .detector import BACKBONE_PREFIX, ModelConfig, ToyDetector
from .evalap import evaluate_model
from .scenes import SceneSpec, SyntheticScene, make_scene_set, make_toy_dictionary, palette


@dataclass
class TrainResult:
    """Trained weights plus the run's paper trail."""

    detector: ToyDetector
    losses: list[float] = field(default_factory=list)
    ap_log: list[tuple[int, float]] = field(default_factory=list)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.detector.params


def default_scenes(config: RunConfig) -> tuple[list[SyntheticScene], list[SyntheticScene]]:
    """The (train, eval) scene sets a config describes."""
    spec = SceneSpec(categories=palette(config.n_classes))
    train = make_scene_set(spec, config.n_train_scenes, config.seed * 1000 + 101, "train")
    eval_ = make_scene_set(spec, config.n_eval_scenes, config.seed * 1000 + 202, "eval")
    return train, eval_


def train_toy(
    config: RunConfig,
    train_scenes: list[SyntheticScene] | None = None,
    eval_scenes: list[SyntheticScene] | None = None,
    dictionary: PromptDictionary | None = None,
    pseudo: list[tuple[SyntheticScene, PseudoLabelRecord]] | None = None,
    init_detector: ToyDetector | None = None,
    model_config: ModelConfig | None = None,
) -> TrainResult:
    """Train the toy detector; everything is derived from ``config.seed``.

    ``pseudo`` pairs unlabeled scenes with their pseudo-label records;
    when present, iterations draw labeled vs pseudo data 2:1. A record's
    hard negatives are forced into that iteration's negative prompt set.
    With ``iterations == 0`` the returned weights are exactly the init.
    """
    if (config.prompt_count_min, config.prompt_count_max) != (
        TRAIN_MIN_PROMPTS,
        TRAIN_MAX_PROMPTS,
    ):
        raise ValueError(
            "the training sampler draws prompt counts in "
            f"[{TRAIN_MIN_PROMPTS}, {TRAIN_MAX_PROMPTS}]; the config says "
            f"[{config.prompt_count_min}, {config.prompt_count_max}]"
        )
    if train_scenes is None or eval_scenes is None:
        auto_train, auto_eval = default_scenes(config)
        train_scenes = train_scenes if train_scenes is not None else auto_train
        eval_scenes = eval_scenes if eval_scenes is not None else auto_eval
    if dictionary is None:
        # Prompts model a frozen external encoder, so they do not vary
        # with the run seed: two runs on different seeds share prompts.
        dictionary = make_toy_dictionary(palette(config.n_classes), config.modality)

    labeled_pool = train_scenes
    if config.n_labeled_scenes is not None:
        labeled_pool = train_scenes[: config.n_labeled_scenes]
    labeled = [s for s in labeled_pool if s.gt]
    if not labeled:
        raise ValueError("no labeled scene has any object to train on")
    pseudo_pool = [
        (scene, record) for scene, record in (pseudo or []) if record.detections
    ]

    detector = init_detector or ToyDetector.init(
        np.random.default_rng([config.seed, 11]), model_config
    )
    params = {k: v.copy() for k, v in detector.params.items()}
    detector = ToyDetector(params, detector.config)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    rng = np.random.default_rng([config.seed, 7])
    mixer = (
        mix_sampler(len(labeled), len(pseudo_pool), rng) if pseudo_pool else None
    )

    result = TrainResult(detector=detector)
    for it in range(config.iterations):
        if mixer is not None:
            source, idx = next(mixer)
        else:
            source, idx = "labeled", int(rng.integers(len(labeled)))
        if source == "labeled":
            scene = labeled[idx]
            gt: list[Detection] | None = None
            annotated = {d.category for d in scene.gt}
            forced: tuple[str, ...] = ()
        else:
            scene, record = pseudo_pool[idx]
            gt = list(record.detections)
            annotated = {d.category for d in record.detections}
            forced = record.hard_negatives

        batch = sample_training_prompts(
            annotated, dictionary, config.n_negatives, rng, forced_negatives=forced
        )
        tape = nk.Tape()
        loss, lv = detector.detection_loss(
            tape, scene, batch, rng, gt=gt, tau=config.tau
        )
        value = loss.item()
        # Catch the blow-up before the update poisons the parameters:
        # a loss this size only happens when optimization has already
        # run away, and the very next step would overflow to inf/NaN.
        if not np.isfinite(value) or abs(value) > 1e12:
            raise TrainingDivergedError(
                f"loss became {value} at iteration {it} on {scene.image_id}"
            )
        tape.backward(loss)

        frozen_backbone = it < config.frozen_iterations
        for name, p in params.items():
            if frozen_backbone and name.startswith(BACKBONE_PREFIX):
                continue
            g = tape.grad(lv[name])
            v = velocity[name]
            v *= config.momentum
            v -= config.learning_rate * g
            p += v
        # alpha is a positive scale by definition; project back if a step
        # pushed it to the floor.
        for side in ("aln", "fus"):
            np.maximum(params[f"{side}.alpha"], 1e-3, out=params[f"{side}.alpha"])

        result.losses.append(value)
        if (
            config.eval_every
            and eval_scenes
            and (it + 1) % config.eval_every == 0
        ):
            _, mean = evaluate_model(
                detector,
                eval_scenes,
                dictionary,
                prompt_count=config.eval_prompt_count,
                modality=config.modality,
                seed=config.seed,
                score_thresh=config.eval_score_thresh,
                nms_thresh=config.nms_iou,
            )
            result.ap_log.append((it + 1, mean))
    return result
