"""Run configuration: one dataclass, JSON in and out."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from ..errors import DataFormatError


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or labeling run needs to be reproducible.

    The filter thresholds (score 0.3, similarity 0.24, minimum side 16 px,
    overlap 0.5, NMS 0.5) and the contrastive temperature 0.1 are the
    pipeline's operating points; the scene and iteration counts size the
    synthetic workload.
    """

    seed: int = 0
    # filter thresholds
    score_threshold: float = 0.3
    similarity_threshold: float = 0.24
    min_side_px: float = 16.0
    overlap_iou: float = 0.5
    nms_iou: float = 0.5
    # prompt sampling
    prompt_count_min: int = 3
    prompt_count_max: int = 7
    n_negatives: int = 1
    # loss and optimizer
    tau: float = 0.1
    learning_rate: float = 1e-2
    momentum: float = 0.9
    iterations: int = 800
    frozen_iterations: int = 150
    eval_every: int = 0
    # synthetic data
    modality: str = "text"
    n_classes: int = 3
    n_train_scenes: int = 256
    n_eval_scenes: int = 64
    n_labeled_scenes: int | None = None  # None: all training scenes labeled
    # evaluation-time decoding
    eval_prompt_count: int = 5
    eval_score_thresh: float = 0.05

    def __post_init__(self) -> None:
        limits = {
            "score_threshold": (0.0, 1.0),
            "similarity_threshold": (-1.0, 1.0),
            "overlap_iou": (0.0, 1.0),
            "nms_iou": (0.0, 1.0),
            "eval_score_thresh": (0.0, 1.0),
        }
        for name, (lo, hi) in limits.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")
        if self.min_side_px < 0:
            raise ValueError(f"min_side_px must be nonnegative, got {self.min_side_px}")
        if not 1 <= self.prompt_count_min <= self.prompt_count_max:
            raise ValueError(
                f"bad prompt count range [{self.prompt_count_min}, {self.prompt_count_max}]"
            )
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.iterations < 0 or self.frozen_iterations < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.modality not in ("text", "image"):
            raise ValueError(f"modality must be 'text' or 'image', got {self.modality!r}")
        if self.n_classes < 1 or self.n_train_scenes < 1 or self.n_eval_scenes < 1:
            raise ValueError("scene and class counts must be positive")
        if self.n_labeled_scenes is not None and not (
            1 <= self.n_labeled_scenes <= self.n_train_scenes
        ):
            raise ValueError(
                f"n_labeled_scenes={self.n_labeled_scenes} outside [1, {self.n_train_scenes}]"
            )
        if self.n_negatives < 0:
            raise ValueError("n_negatives must be nonnegative")
        if self.eval_prompt_count < 1:
            raise ValueError("eval_prompt_count must be at least 1")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"config is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise DataFormatError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise DataFormatError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            raise DataFormatError(f"bad config value: {e}") from e

    def with_overrides(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)
