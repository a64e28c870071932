"""Prompt dictionaries: per-category text/image embeddings and their sampling.

A dictionary stores raw provider embeddings (any dimension, declared by
the file header) keyed by (category, modality, prompt_id). Prompts enter
the heads through their 256-d ``projected`` vectors, produced either by
``project`` (a per-modality 2-layer MLP) or attached directly by callers
that already live in the shared space.

Training batches follow the sampling scheme: one modality for the whole
batch, annotated categories as positives, randomly drawn negative
categories, and 3-7 prompts per category. Inference batches accept any
per-category count from 1 to 100.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit as nk
from .errors import DataFormatError

PROJECTED_DIM = 256
TEXT_MAX = 15
IMAGE_MAX = 100
TRAIN_MIN_PROMPTS = 3
TRAIN_MAX_PROMPTS = 7

MODALITIES = ("text", "image")

# Synthetic prompts minted by clustering live in a reserved category
# namespace so they can never collide with dataset categories.
CLUSTER_CATEGORY_PREFIX = "__cluster:"


@dataclass(frozen=True)
class PromptEmbedding:
    """One prompt vector for one category.

    ``raw`` is the provider-space embedding; ``projected`` (when present)
    is the 256-d shared-space vector the heads consume.
    """

    category: str
    modality: str
    prompt_id: int
    raw: np.ndarray
    projected: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        raw = np.asarray(self.raw, dtype=np.float64)
        if raw.ndim != 1 or raw.size == 0:
            raise ValueError("raw embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(raw)):
            raise ValueError("raw embedding contains non-finite entries")
        if not np.any(raw != 0.0):
            raise ValueError("raw embedding must be non-zero")
        object.__setattr__(self, "raw", raw)
        if self.projected is not None:
            proj = np.asarray(self.projected, dtype=np.float64)
            if proj.shape != (PROJECTED_DIM,):
                raise ValueError(
                    f"projected vector must have length {PROJECTED_DIM}, got {proj.shape}"
                )
            if not np.all(np.isfinite(proj)):
                raise ValueError("projected vector contains non-finite entries")
            object.__setattr__(self, "projected", proj)

    def with_projected(self, vec) -> "PromptEmbedding":
        return replace(self, projected=np.asarray(vec, dtype=np.float64))


class PromptDictionary:
    """Immutable store of prompt embeddings with a per-category index.

    Per category, text prompts number 1-15 and image prompts 1-100;
    (category, modality, prompt_id) triples are unique.
    """

    def __init__(self, entries: list[PromptEmbedding]):
        self._entries = list(entries)
        index: dict[tuple[str, str], list[PromptEmbedding]] = {}
        seen: set[tuple[str, str, int]] = set()
        for e in self._entries:
            key3 = (e.category, e.modality, e.prompt_id)
            if key3 in seen:
                raise DataFormatError(f"duplicate prompt {key3}")
            seen.add(key3)
            index.setdefault((e.category, e.modality), []).append(e)
        for (cat, modality), group in index.items():
            cap = TEXT_MAX if modality == "text" else IMAGE_MAX
            if not (1 <= len(group) <= cap):
                raise DataFormatError(
                    f"category {cat!r} holds {len(group)} {modality} prompts; "
                    f"allowed range is 1..{cap}"
                )
        self._index = index

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> list[PromptEmbedding]:
        return list(self._entries)

    def categories(self, modality: str | None = None) -> list[str]:
        """Sorted category ids, optionally restricted to one modality."""
        if modality is None:
            return sorted({c for c, _ in self._index})
        return sorted({c for c, m in self._index if m == modality})

    def modality_counts(self) -> dict[str, int]:
        out = {m: 0 for m in MODALITIES}
        for (_, m), group in self._index.items():
            out[m] += len(group)
        return out

    def lookup(self, category: str, modality: str) -> list[PromptEmbedding]:
        group = self._index.get((category, modality))
        if group is None:
            raise KeyError(f"no {modality} prompts for category {category!r}")
        return list(group)

    def has(self, category: str, modality: str) -> bool:
        return (category, modality) in self._index


@dataclass(frozen=True)
class PromptBatch:
    """Prompts handed to a head: vectors plus per-prompt category labels."""

    prompts: list[PromptEmbedding]
    labels: list[str]
    positives: frozenset[str]
    negatives: frozenset[str]
    modality: str

    def __post_init__(self) -> None:
        if len(self.prompts) != len(self.labels):
            raise ValueError("prompts and labels must align")
        if not self.prompts:
            raise ValueError("a prompt batch cannot be empty")
        if self.positives & self.negatives:
            raise ValueError("positive and negative category sets overlap")
        counts: dict[str, int] = {}
        for lbl in self.labels:
            counts[lbl] = counts.get(lbl, 0) + 1
        for lbl, n in counts.items():
            if not (1 <= n <= IMAGE_MAX):
                raise ValueError(f"label {lbl!r} appears {n} times; allowed 1..{IMAGE_MAX}")
        object.__setattr__(self, "positives", frozenset(self.positives))
        object.__setattr__(self, "negatives", frozenset(self.negatives))

    def class_names(self) -> list[str]:
        """Distinct labels in first-appearance order."""
        seen: list[str] = []
        for lbl in self.labels:
            if lbl not in seen:
                seen.append(lbl)
        return seen

    def projected_matrix(self) -> np.ndarray:
        """Stack of projected prompt vectors, one row per prompt."""
        rows = []
        for p in self.prompts:
            if p.projected is None:
                raise ValueError(
                    f"prompt ({p.category}, {p.modality}, {p.prompt_id}) has no projected vector"
                )
            rows.append(p.projected)
        return np.stack(rows, axis=0)

    def to_json(self) -> str:
        """Canonical single-line JSON; identical batches serialize identically."""
        payload = {
            "modality": self.modality,
            "positives": sorted(self.positives),
            "negatives": sorted(self.negatives),
            "labels": list(self.labels),
            "prompts": [
                {
                    "category": p.category,
                    "modality": p.modality,
                    "prompt_id": p.prompt_id,
                    "raw": [float(v) for v in p.raw],
                    "projected": None
                    if p.projected is None
                    else [float(v) for v in p.projected],
                }
                for p in self.prompts
            ],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Projector:
    """Per-modality 2-layer MLP mapping raw embeddings into the shared space."""

    modality: str
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.w2.shape[1] != PROJECTED_DIM or self.b2.shape != (1, PROJECTED_DIM):
            raise ValueError(f"projector must emit width {PROJECTED_DIM}")
        if self.w1.shape[1] != self.w2.shape[0] or self.b1.shape != (1, self.w1.shape[1]):
            raise ValueError("projector layer shapes are inconsistent")


def make_projector(rng: np.random.Generator, modality: str, d_raw: int, d_hidden: int = 256) -> Projector:
    w1, b1 = nk.init_linear(rng, d_raw, d_hidden)
    w2, b2 = nk.init_linear(rng, d_hidden, PROJECTED_DIM)
    return Projector(modality=modality, w1=w1, b1=b1, w2=w2, b2=b2)


def project(e: PromptEmbedding, projector: Projector) -> PromptEmbedding:
    """Run one raw embedding through its modality's projector MLP."""
    if projector.modality != e.modality:
        raise ValueError(
            f"projector is for {projector.modality!r} prompts, got {e.modality!r}"
        )
    if e.raw.shape[0] != projector.w1.shape[0]:
        raise ValueError(
            f"raw dim {e.raw.shape[0]} does not match projector input {projector.w1.shape[0]}"
        )
    params = nk.MlpParams(
        w1=nk.constant(projector.w1), b1=nk.constant(projector.b1),
        w2=nk.constant(projector.w2), b2=nk.constant(projector.b2),
    )
    out = nk.mlp2(nk.constant(e.raw[None, :]), params)
    return e.with_projected(out.array[0])


def _draw_prompts(
    group: list[PromptEmbedding], k: int, rng: np.random.Generator
) -> list[PromptEmbedding]:
    # Without replacement when the category is rich enough, with
    # replacement otherwise so tiny dictionaries still sample k prompts.
    if len(group) >= k:
        idx = rng.choice(len(group), size=k, replace=False)
    else:
        idx = rng.choice(len(group), size=k, replace=True)
    return [group[int(i)] for i in idx]


def sample_training_prompts(
    annotated_categories: set[str],
    dictionary: PromptDictionary,
    n_negatives: int,
    rng: np.random.Generator,
    forced_negatives: tuple[str, ...] = (),
) -> PromptBatch:
    """Draw one training prompt batch.

    One modality is chosen for the whole batch (uniformly among the
    modalities that cover every annotated category); annotated categories
    become positives; ``n_negatives`` further categories are drawn
    uniformly without replacement from the rest of the dictionary.
    ``forced_negatives`` (e.g. mined hard-negative categories) are seated
    in the negative set before the random draw. Every selected category
    contributes k ~ uniform{3..7} prompts.
    """
    positives = sorted(annotated_categories)
    if not positives:
        raise ValueError("at least one annotated category is required")
    modality_options = [
        m for m in MODALITIES if all(dictionary.has(c, m) for c in positives)
    ]
    if not modality_options:
        missing = [
            c for c in positives if not any(dictionary.has(c, m) for m in MODALITIES)
        ]
        if missing:
            raise KeyError(f"categories absent from the dictionary: {missing}")
        raise KeyError(
            "no single modality covers every annotated category: "
            f"{positives}"
        )
    modality = modality_options[int(rng.integers(len(modality_options)))]

    pool = [
        c
        for c in dictionary.categories(modality)
        if c not in annotated_categories and c not in forced_negatives
    ]
    negatives = [c for c in forced_negatives if dictionary.has(c, modality)]
    n_draw = min(n_negatives, len(pool))
    if n_draw > 0:
        drawn = rng.choice(len(pool), size=n_draw, replace=False)
        negatives.extend(pool[int(i)] for i in sorted(drawn))

    prompts: list[PromptEmbedding] = []
    labels: list[str] = []
    for cat in positives + negatives:
        group = dictionary.lookup(cat, modality)
        k = int(rng.integers(TRAIN_MIN_PROMPTS, TRAIN_MAX_PROMPTS + 1))
        for p in _draw_prompts(group, k, rng):
            prompts.append(p)
            labels.append(cat)
    return PromptBatch(
        prompts=prompts,
        labels=labels,
        positives=frozenset(positives),
        negatives=frozenset(negatives),
        modality=modality,
    )


def sample_inference_prompts(
    categories: list[str],
    dictionary: PromptDictionary,
    count: int,
    modality: str,
    rng: np.random.Generator,
) -> PromptBatch:
    """Draw an inference batch: ``count`` prompts per category (1..100).

    Categories with fewer than ``count`` prompts contribute all they have
    (duplicates would not change max-pooled logits anyway).
    """
    if not (1 <= count <= IMAGE_MAX):
        raise ValueError(f"per-category prompt count must lie in 1..{IMAGE_MAX}, got {count}")
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
    if not categories:
        raise ValueError("at least one category is required")
    prompts: list[PromptEmbedding] = []
    labels: list[str] = []
    for cat in sorted(set(categories)):
        group = dictionary.lookup(cat, modality)
        k = min(count, len(group))
        idx = rng.choice(len(group), size=k, replace=False)
        for i in sorted(int(v) for v in idx):
            prompts.append(group[i])
            labels.append(cat)
    return PromptBatch(
        prompts=prompts,
        labels=labels,
        positives=frozenset(sorted(set(categories))),
        negatives=frozenset(),
        modality=modality,
    )


def select_image_prompts(
    category: str,
    candidates: list[tuple[np.ndarray, float]],
    cap: int = IMAGE_MAX,
) -> list[PromptEmbedding]:
    """Top-``cap`` candidate embeddings by classifier score (stable ties).

    The classifier producing the scores is upstream; this only ranks.
    Returned prompt_ids are the candidate indices, preserving provenance.
    """
    if cap < 1:
        raise ValueError(f"cap must be at least 1, got {cap}")
    scores = np.array([float(s) for _, s in candidates])
    if scores.size and not np.all(np.isfinite(scores)):
        raise ValueError("candidate scores must be finite")
    order = np.argsort(-scores, kind="stable")[:cap]
    return [
        PromptEmbedding(category=category, modality="image", prompt_id=int(i),
                        raw=candidates[int(i)][0])
        for i in order
    ]


def kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids, labels, sse_history); iteration stops after
    ``max_iter`` rounds or when the largest centroid shift drops below
    ``tol``. SSE is recorded after every assignment step and never
    increases. An emptied cluster is reseeded on the point currently
    farthest from its centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("kmeans needs a non-empty 2-D point array")
    n = pts.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k must lie in 1..{n}, got {k}")

    # k-means++ seeding.
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[int(rng.integers(n))]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = pts[int(rng.integers(n))]
        else:
            centroids[j] = pts[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, ((pts - centroids[j]) ** 2).sum(axis=1))

    sse_history: list[float] = []
    labels = np.zeros(n, dtype=np.intp)
    for _ in range(max_iter):
        dists = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        sse_history.append(float(dists[np.arange(n), labels].sum()))
        new_centroids = centroids.copy()
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
            else:
                new_centroids[j] = pts[int(dists[np.arange(n), labels].argmax())]
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break
    dists = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = dists.argmin(axis=1)
    sse_history.append(float(dists[np.arange(n), labels].sum()))
    return centroids, labels, sse_history


def cluster_prompts(
    unlabeled: list[np.ndarray] | np.ndarray,
    k: int,
    rng: np.random.Generator,
) -> list[PromptEmbedding]:
    """Synthesize k prompts as cluster centroids of unlabeled embeddings.

    Each centroid becomes a prompt under a reserved pseudo-category id
    (``__cluster:NNN``), usable before any real category names exist.
    """
    pts = np.asarray(unlabeled, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("cluster_prompts needs at least one embedding")
    centroids, _, _ = kmeans(pts, k, rng)
    return [
        PromptEmbedding(
            category=f"{CLUSTER_CATEGORY_PREFIX}{i:03d}",
            modality="image",
            prompt_id=0,
            raw=centroids[i],
        )
        for i in range(k)
    ]
