"""Top-level acceptance suite: one printed verdict line per guarantee.

Every test here checks one headline promise of the package against an
independent oracle or a hand-derived value, then prints a single
``[accept] <name>: PASS/FAIL (<numbers>)`` line. Run with ``-s`` to see
the lines as they go; the slow end-to-end trainings run once per session
and are shared by the tests that need a trained model.
"""

import math
import time

import numpy as np
import pytest

from orsd import heads
from orsd import numkit as nk
from orsd.geom import (
    Detection,
    OrientedBox,
    class_agnostic_nms,
    obb_corners,
    obb_to_hbb,
    rotated_iou,
)
from orsd.harness import RunConfig, evaluate_model, train_toy
from orsd.harness.scenes import build_oracle_similarities, make_toy_dictionary, palette, toy_category_tree
from orsd.harness.training import default_scenes
from orsd.harness import fileio
from orsd.pseudolabel import ImageDetections, label_images

import gradprobes
from oracles import (
    brute_force_nms,
    loop_mlp2,
    loop_prompt_max_logits,
    mc_rotated_iou,
    oracle_hbb,
    random_obb,
)
from pseudo_fixture import expected_records, fixture_images, fixture_provider, fixture_tree


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[accept] {name}: {'PASS' if ok else 'FAIL'} ({detail})", flush=True)
    assert ok, f"{name}: {detail}"


# ------------------------------------------------------------ geometry oracle


def test_rotated_iou_and_hbb_against_oracles():
    t0 = time.time()
    rng = np.random.default_rng(20240)
    worst = 0.0
    for i in range(500):
        a = random_obb(rng, span=60.0)
        b = random_obb(rng, span=60.0)
        got = rotated_iou(a, b)
        ref = mc_rotated_iou(a, b, seed=i)
        worst = max(worst, abs(got - ref))
    square = OrientedBox(0.0, 0.0, 10.0, 10.0, 0.0)
    tilted = OrientedBox(0.0, 0.0, 10.0, 10.0, math.pi / 4.0)
    cross = rotated_iou(square, tilted)
    hbb_exact = True
    for _ in range(10_000):
        box = random_obb(rng, span=200.0)
        h = obb_to_hbb(box)
        if (h.xmin, h.ymin, h.xmax, h.ymax) != oracle_hbb(box):
            hbb_exact = False
            break
    ok = worst <= 5e-3 and abs(cross - 0.7071) <= 5e-3 and hbb_exact
    report(
        "geometry-oracle",
        ok,
        f"500-pair MC worst |d|={worst:.2e}, 45-deg square={cross:.4f}, "
        f"hbb exact on 1e4 boxes={hbb_exact}, {time.time()-t0:.0f}s",
    )


def test_nms_matches_brute_force_greedy():
    t0 = time.time()
    rng = np.random.default_rng(77)
    mismatches = 0
    for _ in range(1000):
        dets = [
            Detection(
                category="x",
                score=float(rng.uniform()),
                box=OrientedBox(
                    float(rng.uniform(0, 150)), float(rng.uniform(0, 150)),
                    float(rng.uniform(8, 40)), float(rng.uniform(6, 30)),
                    float(rng.uniform(-np.pi / 2, np.pi / 2)),
                ),
            )
            for _ in range(200)
        ]
        for mode in ("obb", "hbb"):
            if class_agnostic_nms(dets, 0.5, mode=mode) != brute_force_nms(dets, 0.5, mode=mode):
                mismatches += 1
    report(
        "nms-equivalence",
        mismatches == 0,
        f"1000 instances x 200 boxes, both modes, mismatches={mismatches}, "
        f"{time.time()-t0:.0f}s",
    )


# ----------------------------------------------------------- loss closed forms


def _pad(v, d):
    return list(v) + [0.0] * (d - len(v))


def test_loss_closed_forms():
    z = nk.constant([_pad([1.0, 0.0, 0.0], 4)])
    p = nk.constant(
        [_pad([1.0, 1.0, 0.0], 4), _pad([1.0, 0.0, 1.0], 4), _pad([1.0, 0.0, -1.0], 4)]
    )
    uniform = heads.supcon_loss(z, p, ["a", "a", "b"], tau=0.1).item()
    e_uniform = abs(uniform - math.log(2.0))

    z = nk.constant([_pad([1.0, 0.0], 4)])
    p = nk.constant([_pad([1.0, 0.0], 4), _pad([1.0, 0.0], 4), _pad([0.0, 1.0], 4)])
    saturated = heads.supcon_loss(z, p, ["a", "a", "b"], tau=0.1).item()
    e_saturated = abs(saturated - math.log1p(math.exp(-10.0)))

    worst_logit = 0.0
    for seed in range(100):
        rng = np.random.default_rng([9, seed])
        n, j, d = 6, 5, 32
        zr = 0.5 * rng.standard_normal((n, d))
        pr = 0.5 * rng.standard_normal((j, d))
        labels = [str(rng.choice(["a", "b", "c"])) for _ in range(j)]
        labels[0], labels[1], labels[2] = "a", "b", "c"
        sh = nk.init_mlp(rng, "sh", d, d, d)
        shared = nk.mlp_params({k: nk.constant(v) for k, v in sh.items()}, "sh")
        alpha = float(rng.uniform(0.5, 2.0))
        beta = float(rng.uniform(-0.5, 0.5))
        logits, names = heads.class_logits(
            nk.constant(zr), nk.constant(pr), labels,
            nk.constant([[alpha]]), nk.constant([[beta]]), shared,
        )
        zm = loop_mlp2(zr, sh["sh.w1"], sh["sh.b1"], sh["sh.w2"], sh["sh.b2"])
        pm = loop_mlp2(pr, sh["sh.w1"], sh["sh.b1"], sh["sh.w2"], sh["sh.b2"])
        want = loop_prompt_max_logits(zm, pm, labels, alpha, beta, names)
        worst_logit = max(worst_logit, float(np.max(np.abs(logits.array - want))))

    ok = e_uniform <= 1e-10 and e_saturated <= 1e-12 and worst_logit <= 1e-12
    report(
        "loss-closed-forms",
        ok,
        f"|uniform-log2|={e_uniform:.1e}, |saturated-log1p(e^-10)|={e_saturated:.1e}, "
        f"logit-vs-loop worst={worst_logit:.1e}",
    )


# ------------------------------------------------------------- gradient checks


def test_gradient_checks():
    t0 = time.time()
    worst_name, worst = "-", 0.0
    for name, params, f in gradprobes.NUMKIT_PROBES:
        err = nk.grad_check(f, params, max_coords_per_param=4, seed=1)
        if err > worst:
            worst_name, worst = name, err
    for probe in (
        gradprobes.make_fusion_probe(),
        gradprobes.make_detection_loss_probe(),
    ):
        name, params, f = probe
        err = nk.grad_check(f, params, max_coords_per_param=3, seed=1)
        if err > worst:
            worst_name, worst = name, err
    report(
        "gradient-checks",
        worst <= 1e-4,
        f"worst rel err={worst:.2e} at {worst_name}, {time.time()-t0:.0f}s",
    )


# ------------------------------------------------------------ logit invariances


def test_logit_invariances():
    rng = np.random.default_rng(505)
    dup_exact = scale_exact = True
    for _ in range(1000):
        n, j, d = 4, 5, 16
        z = nk.constant(rng.standard_normal((n, d)))
        p = rng.standard_normal((j, d))
        labels = [str(rng.choice(["a", "b"])) for _ in range(j)]
        labels[0], labels[1] = "a", "b"
        a = nk.constant([[float(rng.uniform(0.5, 2.0))]])
        b = nk.constant([[float(rng.uniform(-1.0, 1.0))]])
        base, names = heads.similarity_logits(z, nk.constant(p), labels, a, b)

        dup = int(rng.integers(j))
        again, _ = heads.similarity_logits(
            z, nk.constant(np.vstack([p, p[dup]])), labels + [labels[dup]],
            a, b, class_order=names,
        )
        dup_exact &= bool(np.array_equal(base.array, again.array))

        # Power-of-two factors commute exactly with IEEE normalization, so
        # positive rescaling of a prompt must leave the logits bit-identical.
        p2 = p.copy()
        p2[int(rng.integers(j))] *= 2.0 ** int(rng.integers(-8, 9))
        scaled, _ = heads.similarity_logits(
            z, nk.constant(p2), labels, a, b, class_order=names
        )
        scale_exact &= bool(np.array_equal(base.array, scaled.array))
    report(
        "logit-invariances",
        dup_exact and scale_exact,
        f"1000 trials each: duplication exact={dup_exact}, scaling exact={scale_exact}",
    )


# ------------------------------------------------------------------ end to end


TRAIN_CFG = dict(
    iterations=12_000,
    frozen_iterations=150,
    learning_rate=3e-3,
    n_train_scenes=256,
    n_eval_scenes=64,
    n_classes=3,
    eval_every=0,
)


def _train_and_score(modality: str):
    cfg = RunConfig(modality=modality, **TRAIN_CFG)
    train_scenes, eval_scenes = default_scenes(cfg)
    # 24 prompts per category so the count-20 stability point below is a
    # real 20-prompt draw (the text default of 12 would silently cap it).
    dictionary = make_toy_dictionary(palette(cfg.n_classes), modality,
                                     prompts_per_category=24)
    t0 = time.time()
    result = train_toy(
        cfg, train_scenes=train_scenes, eval_scenes=eval_scenes, dictionary=dictionary
    )
    _, mean = evaluate_model(
        result.detector, eval_scenes, dictionary, modality=modality
    )
    return {
        "detector": result.detector,
        "eval_scenes": eval_scenes,
        "dictionary": dictionary,
        "modality": modality,
        "mean_ap": mean,
        "seconds": time.time() - t0,
    }


@pytest.fixture(scope="session")
def trained_text():
    return _train_and_score("text")


@pytest.fixture(scope="session")
def trained_image():
    return _train_and_score("image")


def test_end_to_end_both_prompt_modalities(trained_text, trained_image):
    ok = trained_text["mean_ap"] >= 0.80 and trained_image["mean_ap"] >= 0.80
    report(
        "end-to-end",
        ok,
        f"OBB AP50 text={trained_text['mean_ap']:.3f} "
        f"image={trained_image['mean_ap']:.3f} (threshold 0.80; "
        f"{trained_text['seconds']:.0f}s + {trained_image['seconds']:.0f}s)",
    )


def test_prompt_count_stability(trained_text):
    aps = {}
    for count in (1, 3, 5, 10, 20):
        _, mean = evaluate_model(
            trained_text["detector"],
            trained_text["eval_scenes"],
            trained_text["dictionary"],
            prompt_count=count,
            modality=trained_text["modality"],
        )
        aps[count] = mean
    spread = max(aps.values()) - min(aps.values())
    report(
        "prompt-count-stability",
        spread <= 0.02,
        "AP50 by prompt count "
        + " ".join(f"{k}:{v:.3f}" for k, v in aps.items())
        + f", spread={spread:.3f} (limit 0.02)",
    )


# --------------------------------------------------------- pseudo-label fixture


def test_pseudo_label_fixture_stream(tmp_path):
    images, tree, provider = fixture_images(), fixture_tree(), fixture_provider()
    want = expected_records()
    runs = []
    for workers in (1, 4, 1):
        records = label_images(images, tree, provider, max_workers=workers)
        path = tmp_path / f"run-{len(runs)}.jsonl"
        fileio.write_pseudo_labels(records, str(path))
        runs.append((records, path.read_bytes()))
    exact = all(r == want for r, _ in runs)
    byte_identical = len({blob for _, blob in runs}) == 1
    report(
        "pseudo-label-fixture",
        exact and byte_identical,
        f"5-image fixture: records match hand derivation={exact}, "
        f"byte-identical across workers 1/4/1={byte_identical}",
    )


# ----------------------------------------------------------------- self-training


def test_self_training_improves_underlabeled_baseline():
    t0 = time.time()
    cfg = RunConfig(
        iterations=4000,
        frozen_iterations=150,
        learning_rate=3e-3,
        n_train_scenes=96,
        n_eval_scenes=32,
        n_classes=3,
        n_labeled_scenes=12,
        eval_every=0,
    )
    train_scenes, eval_scenes = default_scenes(cfg)
    dictionary = make_toy_dictionary(palette(cfg.n_classes), cfg.modality)
    base = train_toy(
        cfg, train_scenes=train_scenes, eval_scenes=eval_scenes, dictionary=dictionary
    )
    _, ap_base = evaluate_model(base.detector, eval_scenes, dictionary)

    unlabeled = train_scenes[cfg.n_labeled_scenes:]
    images = []
    for scene in unlabeled:
        dets = base.detector.detect(
            scene,
            _inference_batch(dictionary, cfg),
            score_thresh=cfg.score_threshold,
        )
        images.append(
            ImageDetections(
                image_id=scene.image_id, per_source=(tuple(dets),), ground_truth=()
            )
        )
    provider = build_oracle_similarities({s.image_id: s for s in unlabeled}, images)
    records = label_images(
        images,
        toy_category_tree(palette(cfg.n_classes)),
        provider,
        score_threshold=cfg.score_threshold,
        sim_threshold=cfg.similarity_threshold,
    )
    by_id = {r.image_id: r for r in records}
    pseudo = [
        (s, by_id[s.image_id]) for s in unlabeled if by_id[s.image_id].detections
    ]
    retrained = train_toy(
        cfg,
        train_scenes=train_scenes,
        eval_scenes=eval_scenes,
        dictionary=dictionary,
        pseudo=pseudo,
    )
    _, ap_self = evaluate_model(retrained.detector, eval_scenes, dictionary)
    gain = ap_self - ap_base
    report(
        "self-training",
        gain >= 0.05,
        f"baseline AP50={ap_base:.3f} (12 labeled of 96), with "
        f"{len(pseudo)} pseudo-labeled scenes={ap_self:.3f}, gain={gain:+.3f} "
        f"(needs +0.05), {time.time()-t0:.0f}s",
    )


def _inference_batch(dictionary, cfg):
    from orsd.promptdict import sample_inference_prompts

    return sample_inference_prompts(
        list(palette(cfg.n_classes)), dictionary, 5, cfg.modality,
        np.random.default_rng([cfg.seed, 1]),
    )
