"""Procedural scenes: feature fields standing in for images.

A scene is a stride-8 grid of 16-channel float vectors rather than pixels.
Oriented rectangles of distinct "texture classes" are stamped onto the
grid: cells whose center falls inside an object carry that class's
signature plus local geometry encodings, everything else is noise. The
detector under test never sees pixels anywhere else either, so nothing is
lost by skipping the imaging stack — while ground truth stays exact.

Channel layout (C = 16):

    0..7    class signature of the owning object (unit 8-vector derived
            from the category name), zero on background
    8..13   geometry of the owning box: dx/stride, dy/stride,
            log(w/stride), log(h/stride), theta, cos(2 theta)
    14      objectness (1 inside an object, 0 outside)
    15      nothing (noise only)

Class channels and geometry channels get independent noise levels; class
noise is the knob that makes small labeled sets genuinely harder.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from ..errors import DataFormatError
from ..geom import (
    SOURCE_GROUND_TRUTH,
    Detection,
    OrientedBox,
    contains_point,
    obb_corners,
    rotated_iou,
)
from ..promptdict import (
    PromptDictionary,
    PromptEmbedding,
    Projector,
    make_projector,
    project,
)
from ..pseudolabel import CategoryTree, ImageDetections, SimilarityProvider

SCENE_SIZE = 96
STRIDE = 8
FEATURE_CHANNELS = 16
SIGNATURE_CHANNELS = 8

TEXT_RAW_DIM = 24
IMAGE_RAW_DIM = 40

# Three texture classes whose hash-derived signatures are mutually far
# apart in signature space and in both raw embedding spaces (worst
# pairwise |cos| 0.18), so class confusion is a model failure, not a
# data artifact.
DEFAULT_PALETTE = ("stripe", "check", "crackle")


def palette(n: int) -> tuple[str, ...]:
    """First ``n`` texture-class names; synthesized past the defaults."""
    if n <= len(DEFAULT_PALETTE):
        return DEFAULT_PALETTE[:n]
    extra = tuple(f"texture-{i:02d}" for i in range(n - len(DEFAULT_PALETTE)))
    return DEFAULT_PALETTE + extra


def _hash_rng(label: str) -> np.random.Generator:
    return np.random.default_rng(zlib.crc32(label.encode("utf-8")))


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def class_signature(category: str) -> np.ndarray:
    """Deterministic unit 8-vector for a category name.

    Depends only on the name, so palettes can grow without disturbing
    existing classes.
    """
    return _unit(_hash_rng(f"sig:{category}"), SIGNATURE_CHANNELS)


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for scene synthesis."""

    categories: tuple[str, ...] = DEFAULT_PALETTE
    width: int = SCENE_SIZE
    height: int = SCENE_SIZE
    stride: int = STRIDE
    min_objects: int = 1
    max_objects: int = 3
    width_range: tuple[float, float] = (18.0, 40.0)
    height_range: tuple[float, float] = (10.0, 26.0)
    theta_range: tuple[float, float] = (-0.5, 0.5)
    noise_class: float = 0.25
    noise_geom: float = 0.08

    def __post_init__(self) -> None:
        if not self.categories:
            raise ValueError("palette must name at least one category")
        if self.width % self.stride or self.height % self.stride:
            raise ValueError("scene size must be a multiple of the stride")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError(
                f"bad object count range [{self.min_objects}, {self.max_objects}]"
            )

    @property
    def grid_h(self) -> int:
        return self.height // self.stride

    @property
    def grid_w(self) -> int:
        return self.width // self.stride


@dataclass(frozen=True)
class SyntheticScene:
    """One generated scene: the raw feature field plus exact ground truth."""

    image_id: str
    field: np.ndarray  # (grid_h * grid_w, FEATURE_CHANNELS)
    gt: tuple[Detection, ...]
    palette: tuple[str, ...]
    width: int = SCENE_SIZE
    height: int = SCENE_SIZE
    stride: int = STRIDE

    def __post_init__(self) -> None:
        n = (self.height // self.stride) * (self.width // self.stride)
        if self.field.shape != (n, FEATURE_CHANNELS):
            raise ValueError(
                f"field shape {self.field.shape} != ({n}, {FEATURE_CHANNELS})"
            )
        for det in self.gt:
            for x, y in obb_corners(det.box):
                if not (-1e-9 <= x <= self.width + 1e-9 and -1e-9 <= y <= self.height + 1e-9):
                    raise ValueError(
                        f"ground-truth box {det.box} leaves the {self.width}x{self.height} scene"
                    )

    @property
    def grid_h(self) -> int:
        return self.height // self.stride

    @property
    def grid_w(self) -> int:
        return self.width // self.stride


def grid_centers(grid_h: int, grid_w: int, stride: float) -> np.ndarray:
    """Cell centers in row-major order, shape (grid_h * grid_w, 2)."""
    return np.array(
        [
            [(j + 0.5) * stride, (i + 0.5) * stride]
            for i in range(grid_h)
            for j in range(grid_w)
        ],
        dtype=np.float64,
    )


def _sample_box(spec: SceneSpec, rng: np.random.Generator, placed: list[OrientedBox]) -> OrientedBox | None:
    for _ in range(100):
        w = rng.uniform(*spec.width_range)
        h = rng.uniform(*spec.height_range)
        theta = rng.uniform(*spec.theta_range)
        half_diag = 0.5 * float(np.hypot(w, h))
        if spec.width - 2 * half_diag <= 0 or spec.height - 2 * half_diag <= 0:
            continue
        cx = rng.uniform(half_diag, spec.width - half_diag)
        cy = rng.uniform(half_diag, spec.height - half_diag)
        box = OrientedBox(cx, cy, w, h, theta)
        if all(rotated_iou(box, other) < 0.05 for other in placed):
            return box
    return None


def generate_scene(
    spec: SceneSpec, rng: np.random.Generator, image_id: str = "scene"
) -> SyntheticScene:
    """Stamp K oriented rectangles onto a fresh feature field.

    Object poses, categories, and both noise fields come from ``rng``
    alone, so a seeded generator reproduces the scene bit for bit.
    Objects are rejection-sampled to stay fully inside the scene and to
    overlap each other by less than IoU 0.05.
    """
    gh, gw = spec.grid_h, spec.grid_w
    centers = grid_centers(gh, gw, spec.stride)
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))

    placed: list[OrientedBox] = []
    cats: list[str] = []
    for _ in range(n_objects):
        box = _sample_box(spec, rng, placed)
        if box is None:
            continue  # scene too crowded; emit fewer objects
        placed.append(box)
        cats.append(str(rng.choice(list(spec.categories))))

    field = np.zeros((gh * gw, FEATURE_CHANNELS))
    # Smallest-area box owns a cell, matching the assignment rule the
    # heads use, so every positive cell sees its own object's channels.
    order = sorted(range(len(placed)), key=lambda i: placed[i].area)
    for ci, (cx, cy) in enumerate(centers):
        for oi in order:
            box = placed[oi]
            if contains_point(box, float(cx), float(cy)):
                field[ci, 0:SIGNATURE_CHANNELS] = class_signature(cats[oi])
                field[ci, 8] = (box.cx - cx) / spec.stride
                field[ci, 9] = (box.cy - cy) / spec.stride
                field[ci, 10] = np.log(box.w / spec.stride)
                field[ci, 11] = np.log(box.h / spec.stride)
                field[ci, 12] = box.theta
                field[ci, 13] = np.cos(2.0 * box.theta)
                field[ci, 14] = 1.0
                break

    field[:, 0:SIGNATURE_CHANNELS] += spec.noise_class * rng.standard_normal(
        (gh * gw, SIGNATURE_CHANNELS)
    )
    field[:, SIGNATURE_CHANNELS:] += spec.noise_geom * rng.standard_normal(
        (gh * gw, FEATURE_CHANNELS - SIGNATURE_CHANNELS)
    )

    gt = tuple(
        Detection(category=c, score=1.0, box=b, source=SOURCE_GROUND_TRUTH)
        for c, b in zip(cats, placed)
    )
    return SyntheticScene(
        image_id=image_id,
        field=field,
        gt=gt,
        palette=tuple(spec.categories),
        width=spec.width,
        height=spec.height,
        stride=spec.stride,
    )


def make_scene_set(
    spec: SceneSpec, count: int, base_seed: int, prefix: str
) -> list[SyntheticScene]:
    """``count`` scenes with ids ``{prefix}-0000``…, each from its own
    child seed so any subset is reproducible in isolation."""
    return [
        generate_scene(
            spec, np.random.default_rng([base_seed, i]), image_id=f"{prefix}-{i:04d}"
        )
        for i in range(count)
    ]


# ------------------------------------------------------------- dictionaries


def toy_projector(modality: str, seed: int = 0) -> Projector:
    """The frozen raw-to-common-space projector for one modality."""
    d_raw = TEXT_RAW_DIM if modality == "text" else IMAGE_RAW_DIM
    rng = np.random.default_rng([seed, zlib.crc32(f"projector:{modality}".encode())])
    return make_projector(rng, modality, d_raw)


def make_toy_dictionary(
    categories: tuple[str, ...] | list[str] = DEFAULT_PALETTE,
    modality: str = "text",
    prompts_per_category: int | None = None,
    seed: int = 0,
    prompt_noise: float = 0.08,
) -> PromptDictionary:
    """Synthetic prompt embeddings: a tight cluster per category.

    Each category has a deterministic unit base vector in the modality's
    raw space; prompts are the base plus small noise, renormalized, then
    pushed through the frozen projector. Cluster tightness is what makes
    inference behave the same whether 1 or 20 prompts are supplied.
    """
    if modality not in ("text", "image"):
        raise ValueError(f"modality must be 'text' or 'image', got {modality!r}")
    if prompts_per_category is None:
        prompts_per_category = 12 if modality == "text" else 24
    d_raw = TEXT_RAW_DIM if modality == "text" else IMAGE_RAW_DIM
    projector = toy_projector(modality, seed)
    entries: list[PromptEmbedding] = []
    for cat in categories:
        base = _unit(_hash_rng(f"emb:{modality}:{cat}"), d_raw)
        rng = np.random.default_rng([seed, zlib.crc32(f"{modality}:{cat}".encode())])
        for j in range(prompts_per_category):
            raw = base + prompt_noise * rng.standard_normal(d_raw)
            raw = raw / np.linalg.norm(raw)
            e = PromptEmbedding(
                category=cat, modality=modality, prompt_id=f"{cat}-{modality}-{j:02d}",
                raw=raw, projected=None,
            )
            entries.append(project(e, projector))
    return PromptDictionary(entries)


def toy_category_tree(categories: tuple[str, ...] | list[str] = DEFAULT_PALETTE) -> CategoryTree:
    """Flat forest: every texture class is its own top-level parent."""
    return CategoryTree({c: None for c in categories})


# -------------------------------------------------------- oracle similarity


def crop_similarity(scene: SyntheticScene, det: Detection) -> float:
    """Cosine between a category's signature and the crop's mean signature.

    Stands in for an external image-text encoder scoring (category, crop)
    pairs: boxes sitting on an object of the right class land near 1,
    mismatches near 0. A crop covering no cell at all scores 0.
    """
    centers = grid_centers(scene.grid_h, scene.grid_w, scene.stride)
    covered = [
        i
        for i, (x, y) in enumerate(centers)
        if contains_point(det.box, float(x), float(y))
    ]
    if not covered:
        return 0.0
    mean = scene.field[covered, 0:SIGNATURE_CHANNELS].mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        return 0.0
    cos = float(class_signature(det.category) @ mean / norm)
    return max(-1.0, min(1.0, cos))


def build_oracle_similarities(
    scenes: dict[str, SyntheticScene],
    images: list[ImageDetections] | tuple[ImageDetections, ...],
) -> SimilarityProvider:
    """Precompute crop similarities for every raw detection in ``images``.

    Keys follow ImageDetections.crop_id, so the provider plugs straight
    into the pseudo-label pipeline.
    """
    entries: dict[tuple[str, str], float] = {}
    for img in images:
        if img.image_id not in scenes:
            raise DataFormatError(f"no scene for image id {img.image_id!r}")
        scene = scenes[img.image_id]
        for si, dets in enumerate(img.per_source):
            for di, det in enumerate(dets):
                entries[(det.category, img.crop_id(si, di))] = crop_similarity(
                    scene, det
                )
    return SimilarityProvider(entries)
