#!/usr/bin/env python3
"""Prompt dictionaries, batch sampling, and clustering, end to end.

Builds the two toy prompt spaces (text-style and image-style vectors for
the same categories), samples training batches the way the training loop
does, and shows how unlabeled embeddings become cluster prompts.
"""

import numpy as np

from orsd.promptdict import cluster_prompts, sample_training_prompts, sample_inference_prompts
from orsd.harness.scenes import class_signature, make_toy_dictionary, palette

rng = np.random.default_rng(7)
categories = palette(3)
print("categories:", categories)

print("\n== class signatures are well separated ==")
sigs = {c: class_signature(c) for c in categories}
for i, a in enumerate(categories):
    for b in categories[i + 1:]:
        print(f"  cos({a}, {b}) = {float(sigs[a] @ sigs[b]):+.3f}")

print("\n== one dictionary, two modalities ==")
text_dict = make_toy_dictionary(categories, "text")
image_dict = make_toy_dictionary(categories, "image")
print(f"  text:  {len(text_dict)} prompts over {text_dict.categories()}")
print(f"  image: {len(image_dict)} prompts over {image_dict.categories()}")

print("\n== training batches: annotated positives + drawn negatives ==")
for trial in range(3):
    batch = sample_training_prompts({"stripe"}, text_dict, 1, rng)
    per_cat = {c: batch.labels.count(c) for c in batch.class_names()}
    print(f"  trial {trial}: positives={sorted(batch.positives)} "
          f"negatives={sorted(batch.negatives)} prompts/category={per_cat}")

print("\n== inference batches are per-category capped ==")
for count in (1, 5, 20):
    batch = sample_inference_prompts(categories, text_dict, count, "text", rng)
    print(f"  requested {count:>2} per category -> {len(batch.prompts)} prompts total")

print("\n== unlabeled embeddings -> cluster prompts ==")
# Fake a pile of unlabeled crops: noisy copies of the image-space vectors.
raws = []
for entry in image_dict.entries:
    for _ in range(5):
        raws.append(entry.raw + rng.normal(0.0, 0.05, size=entry.raw.shape))
centroids = cluster_prompts(raws, k=3, rng=rng)
print(f"  {len(raws)} unlabeled vectors -> {[p.category for p in centroids]}")


def cosine(u, v):
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


reference = {c: next(e.raw for e in image_dict.entries if e.category == c)
             for c in categories}
for p in centroids:
    sims = {c: cosine(p.raw, ref) for c, ref in reference.items()}
    best = max(sims, key=sims.get)
    print(f"  {p.category}: closest true category = {best} (cos {sims[best]:.2f})")
