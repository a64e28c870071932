"""Command-line front end.

Subcommands cover the pipeline stages that make sense from a shell:
numeric self-checks (``geom-check``), prompt clustering (``cluster``),
prompt-batch sampling (``sample-prompts``), toy training and evaluation
(``train``, ``eval``), and offline pseudo-labeling over the JSONL/JSON
file formats (``pseudo-label``).

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
malformed files), 3 numeric failure (a self-check failed or training
diverged). The environment variable ``ORSD_SEED`` overrides every other
seed source (flag or config file).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from ..errors import DataFormatError, NumericCheckError, TrainingDivergedError
from ..geom import (
    Detection,
    OrientedBox,
    class_agnostic_nms,
    contains_point,
    obb_corners,
    obb_to_hbb,
    rotated_iou,
)
from ..promptdict import (
    PromptDictionary,
    cluster_prompts,
    project,
    sample_training_prompts,
)
from ..pseudolabel import ImageDetections, label_images
from . import fileio
from .config import RunConfig
from .detector import ModelConfig, ToyDetector
from .evalap import evaluate_model
from .scenes import make_toy_dictionary, palette, toy_projector
from .training import default_scenes, train_toy

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _seed_override(seed: int) -> int:
    """Apply the ORSD_SEED environment override, if set."""
    env = os.environ.get("ORSD_SEED")
    if env is None:
        return seed
    try:
        return int(env)
    except ValueError:
        raise DataFormatError(f"ORSD_SEED must be an integer, got {env!r}") from None


def _load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise DataFormatError(f"cannot read config {path}: {e}") from e
    config = RunConfig.from_json(text)
    return config.with_overrides(seed=_seed_override(config.seed))


# ------------------------------------------------------------- geom-check


def _mc_iou(a: OrientedBox, b: OrientedBox, n: int, rng: np.random.Generator) -> float:
    ca, cb = np.asarray(obb_corners(a)), np.asarray(obb_corners(b))
    xs = np.concatenate([ca[:, 0], cb[:, 0]])
    ys = np.concatenate([ca[:, 1], cb[:, 1]])
    px = rng.uniform(xs.min(), xs.max(), size=n)
    py = rng.uniform(ys.min(), ys.max(), size=n)
    in_a = np.array([contains_point(a, x, y) for x, y in zip(px, py)])
    in_b = np.array([contains_point(b, x, y) for x, y in zip(px, py)])
    union = int(np.sum(in_a | in_b))
    return float(np.sum(in_a & in_b)) / union if union else 0.0


def _random_box(rng: np.random.Generator) -> OrientedBox:
    return OrientedBox(
        cx=rng.uniform(-5, 5),
        cy=rng.uniform(-5, 5),
        w=rng.uniform(0.5, 8),
        h=rng.uniform(0.5, 8),
        theta=rng.uniform(-np.pi / 2, np.pi / 2),
    )


def cmd_geom_check(args: argparse.Namespace) -> int:
    seed = _seed_override(args.seed)
    rng = np.random.default_rng(seed)

    for _ in range(200):
        box = _random_box(rng)
        if abs(rotated_iou(box, box) - 1.0) > 1e-9:
            raise NumericCheckError(f"self-IoU != 1 for {box}")
    print("self-IoU on 200 random boxes: ok")

    worst = 0.0
    for _ in range(args.pairs):
        a, b = _random_box(rng), _random_box(rng)
        b = OrientedBox(a.cx + rng.uniform(-3, 3), a.cy + rng.uniform(-3, 3), b.w, b.h, b.theta)
        exact = rotated_iou(a, b)
        approx = _mc_iou(a, b, 20000, rng)
        worst = max(worst, abs(exact - approx))
    if worst > 0.02:
        raise NumericCheckError(f"rotated_iou deviates from sampling by {worst:.4f}")
    print(f"rotated IoU vs {args.pairs}-pair sampling check: ok (worst |Δ| {worst:.4f})")

    for _ in range(2000):
        box = _random_box(rng)
        corners = np.asarray(obb_corners(box))
        hb = obb_to_hbb(box)
        got = (hb.xmin, hb.ymin, hb.xmax, hb.ymax)
        want = (
            corners[:, 0].min(), corners[:, 1].min(),
            corners[:, 0].max(), corners[:, 1].max(),
        )
        if any(abs(g - w) > 1e-12 for g, w in zip(got, want)):
            raise NumericCheckError(f"enclosing box mismatch for {box}")
    print("enclosing horizontal boxes on 2000 random boxes: ok")

    for trial in range(20):
        dets = [
            Detection(category="x", score=float(rng.uniform(0, 1)), box=_random_box(rng))
            for _ in range(60)
        ]
        fast = class_agnostic_nms(dets, 0.5, mode="obb")
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        kept: list[int] = []
        for i in order:
            if all(rotated_iou(dets[i].box, dets[j].box) <= 0.5 for j in kept):
                kept.append(i)
        slow = [dets[i] for i in kept]
        if [id(d) for d in fast] != [id(d) for d in slow]:
            raise NumericCheckError(f"NMS disagrees with greedy reference on trial {trial}")
    print("NMS vs greedy reference on 20 instances: ok")
    return EXIT_OK


# ---------------------------------------------------------------- cluster


def cmd_cluster(args: argparse.Namespace) -> int:
    entries = fileio.read_embeddings(args.embeddings)
    text_dim, image_dim = fileio.read_embedding_dims(args.embeddings)
    raws = [e.raw for e in entries if e.modality == "image"]
    if not raws:
        raise DataFormatError(f"{args.embeddings}: no image-modality embeddings to cluster")
    rng = np.random.default_rng(_seed_override(args.seed))
    centroids = cluster_prompts(raws, args.k, rng)
    fileio.write_embeddings(centroids, text_dim, image_dim, args.out)
    print(f"clustered {len(raws)} embeddings into {args.k} prompts -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------- sample-prompts


def cmd_sample_prompts(args: argparse.Namespace) -> int:
    entries = fileio.read_embeddings(args.embeddings)
    seed = _seed_override(args.seed)
    projectors = {
        "text": toy_projector("text", seed=seed),
        "image": toy_projector("image", seed=seed),
    }
    dictionary = PromptDictionary([project(e, projectors[e.modality]) for e in entries])
    categories = {c for c in args.categories.split(",") if c}
    if not categories:
        raise DataFormatError("no categories given")
    rng = np.random.default_rng(seed)
    batch = sample_training_prompts(categories, dictionary, args.negatives, rng)
    print(batch.to_json())
    return EXIT_OK


# ------------------------------------------------------------ train / eval


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    result = train_toy(config)
    fileio.save_checkpoint(result.params, args.out)
    if args.ap_log:
        with open(args.ap_log, "w", encoding="utf-8", newline="\n") as f:
            for iteration, value in result.ap_log:
                f.write(json.dumps({"ap50": value, "iteration": iteration},
                                   sort_keys=True, separators=(",", ":")) + "\n")
    tail = result.losses[-50:]
    print(
        f"trained {config.iterations} iterations; "
        f"mean loss over last {len(tail)}: {float(np.mean(tail)):.4f}; "
        f"checkpoint -> {args.out}"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    params = fileio.load_checkpoint(args.checkpoint)
    detector = ToyDetector(params, ModelConfig())
    _, eval_scenes = default_scenes(config)
    dictionary = make_toy_dictionary(palette(config.n_classes), config.modality)
    per_class, mean = evaluate_model(
        detector,
        eval_scenes,
        dictionary,
        prompt_count=config.eval_prompt_count,
        modality=config.modality,
        seed=config.seed,
        score_thresh=config.eval_score_thresh,
        nms_thresh=config.nms_iou,
        mode=args.mode,
    )
    print(json.dumps(
        {"mean_ap50": mean, "mode": args.mode, "per_class": per_class},
        sort_keys=True, separators=(",", ":"),
    ))
    return EXIT_OK


# ------------------------------------------------------------ pseudo-label


def cmd_pseudo_label(args: argparse.Namespace) -> int:
    annotations = fileio.read_annotations(args.annotations)
    detections = fileio.read_detections(args.detections)
    tree = fileio.read_category_tree(args.tree)
    provider = fileio.read_similarities(args.similarities)

    gt_by_image = {image_id: objects for image_id, _, _, objects in annotations}
    ids = sorted(set(gt_by_image) | set(detections))
    images = [
        ImageDetections(
            image_id=image_id,
            per_source=(tuple(detections.get(image_id, ())),),
            ground_truth=tuple(gt_by_image.get(image_id, ())),
        )
        for image_id in ids
    ]
    records = label_images(
        images,
        tree,
        provider,
        score_threshold=args.score_thresh,
        overlap_iou=args.overlap_iou,
        nms_iou=args.nms_iou,
        sim_threshold=args.sim_thresh,
        min_side_px=args.min_side,
        max_workers=args.workers,
    )
    fileio.write_pseudo_labels(records, args.out)
    kept = sum(len(r.detections) for r in records)
    print(f"labeled {len(records)} images, kept {kept} detections -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orsd",
        description="Open-prompt oriented detection toolkit (toy scale).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("geom-check", help="run geometry self-checks")
    p.add_argument("--pairs", type=int, default=50, help="IoU sampling pairs")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_geom_check)

    p = sub.add_parser("cluster", help="cluster image embeddings into prompts")
    p.add_argument("--embeddings", required=True, help="ORSD-EMB input file")
    p.add_argument("--k", type=int, required=True, help="number of clusters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="ORSD-EMB output file")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("sample-prompts", help="sample one training prompt batch")
    p.add_argument("--embeddings", required=True, help="ORSD-EMB input file")
    p.add_argument("--categories", required=True, help="comma-separated annotated categories")
    p.add_argument("--negatives", type=int, default=1, help="negative categories to draw")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample_prompts)

    p = sub.add_parser("train", help="train the toy detector on synthetic scenes")
    p.add_argument("--config", required=True, help="run-config JSON file")
    p.add_argument("--out", default="checkpoint.orsd", help="checkpoint output path")
    p.add_argument("--ap-log", default=None, help="optional AP-per-eval JSONL output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on synthetic scenes")
    p.add_argument("--config", required=True, help="run-config JSON file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("obb", "hbb"), default="obb")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pseudo-label", help="run the pseudo-label pipeline over files")
    p.add_argument("--detections", required=True, help="detections JSONL")
    p.add_argument("--annotations", required=True, help="ground-truth JSONL")
    p.add_argument("--tree", required=True, help="category tree JSON")
    p.add_argument("--similarities", required=True, help="similarity JSONL")
    p.add_argument("--out", required=True, help="pseudo-label JSONL output")
    p.add_argument("--score-thresh", type=float, default=0.3)
    p.add_argument("--sim-thresh", type=float, default=0.24)
    p.add_argument("--min-side", type=float, default=16.0)
    p.add_argument("--overlap-iou", type=float, default=0.5)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_pseudo_label)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 for --help; fold the
        # former into this tool's usage code.
        return EXIT_OK if not e.code else EXIT_USAGE
    try:
        return args.func(args)
    except (DataFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericCheckError, TrainingDivergedError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as e:
        message = e.args[0] if e.args else e
        print(f"usage error: {message}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
