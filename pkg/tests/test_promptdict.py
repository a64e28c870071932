import numpy as np
import pytest
from scipy import stats
from sklearn.cluster import KMeans

from orsd import numkit as nk
from orsd import promptdict as pd
from orsd.errors import DataFormatError


def emb(cat, modality, pid, dim=8, seed=None):
    rng = np.random.default_rng(hash((cat, modality, pid)) % 2**32 if seed is None else seed)
    return pd.PromptEmbedding(cat, modality, pid, rng.standard_normal(dim))


def toy_dict(categories=("plane", "ship", "vehicle"), n_text=5, n_image=8, dim=8):
    entries = []
    for c in categories:
        entries.extend(emb(c, "text", i, dim) for i in range(n_text))
        entries.extend(emb(c, "image", i, dim) for i in range(n_image))
    return pd.PromptDictionary(entries)


# -------------------------------------------------------------------- entries


def test_embedding_validation():
    with pytest.raises(ValueError):
        pd.PromptEmbedding("c", "audio", 0, np.ones(4))
    with pytest.raises(ValueError):
        pd.PromptEmbedding("c", "text", 0, np.zeros(4))
    with pytest.raises(ValueError):
        pd.PromptEmbedding("c", "text", 0, np.array([1.0, np.inf]))
    with pytest.raises(ValueError):
        pd.PromptEmbedding("c", "text", 0, np.ones(4), projected=np.ones(10))
    e = pd.PromptEmbedding("c", "text", 0, np.ones(4), projected=np.ones(256))
    assert e.projected.shape == (256,)


def test_dictionary_validation():
    e0 = emb("plane", "text", 0)
    with pytest.raises(DataFormatError):
        pd.PromptDictionary([e0, emb("plane", "text", 0)])
    with pytest.raises(DataFormatError):
        pd.PromptDictionary([emb("plane", "text", i) for i in range(16)])
    with pytest.raises(DataFormatError):
        pd.PromptDictionary([emb("plane", "image", i) for i in range(101)])
    d = toy_dict()
    assert d.categories() == ["plane", "ship", "vehicle"]
    assert d.modality_counts() == {"text": 15, "image": 24}
    assert len(d.lookup("ship", "text")) == 5
    with pytest.raises(KeyError):
        d.lookup("harbor", "text")


def test_batch_validation():
    p = emb("a", "text", 0)
    with pytest.raises(ValueError):
        pd.PromptBatch([p], ["a", "b"], frozenset("a"), frozenset(), "text")
    with pytest.raises(ValueError):
        pd.PromptBatch([p], ["a"], frozenset("a"), frozenset("a"), "text")
    with pytest.raises(ValueError):
        pd.PromptBatch([], [], frozenset(), frozenset(), "text")


# ------------------------------------------------------------------ projection


def test_project_zero_weights_gives_bias():
    rng = np.random.default_rng(0)
    proj = pd.Projector(
        "text",
        w1=np.zeros((8, 16)), b1=np.zeros((1, 16)),
        w2=np.zeros((16, 256)), b2=np.full((1, 256), 0.25),
    )
    out = pd.project(emb("c", "text", 0), proj)
    assert np.allclose(out.projected, 0.25)
    assert out.raw.shape == (8,)  # raw untouched


def test_project_identity_regime():
    d = 256
    big = 10.0 * np.ones(d)
    proj = pd.Projector(
        "image",
        w1=np.eye(d), b1=np.zeros((1, d)),
        w2=np.eye(d), b2=np.zeros((1, d)),
    )
    e = pd.PromptEmbedding("c", "image", 0, big)
    out = pd.project(e, proj)
    assert np.allclose(out.projected, big, atol=2e-3)  # SiLU ~ identity at 10


def test_project_matches_mlp_oracle_and_checks_modality():
    rng = np.random.default_rng(1)
    proj = pd.make_projector(rng, "text", d_raw=12)
    e = pd.PromptEmbedding("c", "text", 0, rng.standard_normal(12))
    got = pd.project(e, proj).projected
    params = nk.MlpParams(
        w1=nk.constant(proj.w1), b1=nk.constant(proj.b1),
        w2=nk.constant(proj.w2), b2=nk.constant(proj.b2),
    )
    want = nk.mlp2(nk.constant(e.raw[None, :]), params).array[0]
    assert np.max(np.abs(got - want)) < 1e-12
    with pytest.raises(ValueError):
        pd.project(pd.PromptEmbedding("c", "image", 0, e.raw), proj)
    with pytest.raises(ValueError):
        pd.project(pd.PromptEmbedding("c", "text", 0, np.ones(5)), proj)


# -------------------------------------------------------------------- sampling


def test_training_batch_single_category():
    d = pd.PromptDictionary([emb("plane", "text", i) for i in range(7)])
    batch = pd.sample_training_prompts({"plane"}, d, n_negatives=5, rng=np.random.default_rng(0))
    assert batch.positives == {"plane"}
    assert batch.negatives == frozenset()
    assert 3 <= len(batch.prompts) <= 7
    assert set(batch.labels) == {"plane"}


def test_training_batch_determinism():
    d = toy_dict()
    b1 = pd.sample_training_prompts({"plane", "ship"}, d, 2, np.random.default_rng(42))
    b2 = pd.sample_training_prompts({"plane", "ship"}, d, 2, np.random.default_rng(42))
    assert b1.to_json() == b2.to_json()
    b3 = pd.sample_training_prompts({"plane", "ship"}, d, 2, np.random.default_rng(43))
    assert b1.to_json() != b3.to_json()  # astronomically unlikely to collide


def test_training_batch_prompt_counts_and_positives():
    d = toy_dict()
    rng = np.random.default_rng(7)
    for _ in range(200):
        batch = pd.sample_training_prompts({"ship"}, d, 2, rng)
        counts = {c: batch.labels.count(c) for c in set(batch.labels)}
        assert all(3 <= n <= 7 for n in counts.values())
        assert batch.positives == {"ship"}
        assert len(batch.negatives) == 2
        assert not (batch.positives & batch.negatives)
        # Without replacement whenever a category is rich enough.
        if batch.modality == "image":
            for c in counts:
                ids = [p.prompt_id for p in batch.prompts if p.category == c]
                assert len(ids) == len(set(ids))


def test_training_batch_small_category_uses_replacement():
    d = pd.PromptDictionary([emb("rare", "text", 0), emb("rare", "text", 1)])
    rng = np.random.default_rng(0)
    batch = pd.sample_training_prompts({"rare"}, d, 0, rng)
    assert 3 <= len(batch.prompts) <= 7
    assert {p.prompt_id for p in batch.prompts} <= {0, 1}


def test_training_batch_unknown_category_errors():
    d = toy_dict()
    with pytest.raises(KeyError):
        pd.sample_training_prompts({"submarine"}, d, 2, np.random.default_rng(0))


def test_prompt_count_chi_square_uniform_3_to_7():
    d = pd.PromptDictionary([emb("plane", "text", i) for i in range(10)])
    rng = np.random.default_rng(1234)
    counts = {k: 0 for k in range(3, 8)}
    for _ in range(10_000):
        batch = pd.sample_training_prompts({"plane"}, d, 0, rng)
        counts[len(batch.prompts)] += 1
    chi2 = stats.chisquare(list(counts.values()))
    assert chi2.pvalue > 0.01


def test_modality_choice_is_even():
    d = toy_dict()
    rng = np.random.default_rng(5)
    picks = [
        pd.sample_training_prompts({"plane"}, d, 1, rng).modality for _ in range(4000)
    ]
    frac = picks.count("text") / len(picks)
    assert abs(frac - 0.5) < 0.03


def test_forced_negatives_are_seated_first():
    d = toy_dict(categories=("a", "b", "c", "d"))
    rng = np.random.default_rng(2)
    batch = pd.sample_training_prompts(
        {"a"}, d, n_negatives=1, rng=rng, forced_negatives=("d",)
    )
    assert "d" in batch.negatives
    assert len(batch.negatives) == 2


def test_inference_batch_counts():
    d = toy_dict(n_text=4, n_image=12)
    rng = np.random.default_rng(0)
    b = pd.sample_inference_prompts(["plane", "ship"], d, count=10, modality="image", rng=rng)
    assert all(b.labels.count(c) == 10 for c in ("plane", "ship"))
    b = pd.sample_inference_prompts(["plane"], d, count=10, modality="text", rng=rng)
    assert b.labels.count("plane") == 4  # all available, no replacement
    b = pd.sample_inference_prompts(["plane"], d, count=1, modality="text", rng=rng)
    assert len(b.prompts) == 1
    with pytest.raises(ValueError):
        pd.sample_inference_prompts(["plane"], d, count=0, modality="text", rng=rng)
    with pytest.raises(ValueError):
        pd.sample_inference_prompts(["plane"], d, count=101, modality="text", rng=rng)


# -------------------------------------------------------- image prompt ranking


def test_select_image_prompts_small_and_capped():
    rng = np.random.default_rng(0)
    cands = [(rng.standard_normal(6), float(s)) for s in rng.uniform(size=3)]
    got = pd.select_image_prompts("dock", cands, cap=100)
    assert len(got) == 3
    cands = [(rng.standard_normal(6), float(s)) for s in rng.uniform(size=150)]
    got = pd.select_image_prompts("dock", cands, cap=100)
    assert len(got) == 100
    kept_scores = sorted(cands[p.prompt_id][1] for p in got)
    dropped = sorted(s for _, s in cands)[:50]
    assert kept_scores[0] >= dropped[-1]


def test_select_image_prompts_matches_sort_oracle_with_stable_ties():
    rng = np.random.default_rng(3)
    scores = rng.integers(0, 5, size=40).astype(float)  # plenty of ties
    cands = [(rng.standard_normal(4), float(s)) for s in scores]
    got = [p.prompt_id for p in pd.select_image_prompts("c", cands, cap=10)]
    want = sorted(range(40), key=lambda i: (-scores[i], i))[:10]
    assert got == want


# ------------------------------------------------------------------ clustering


def test_kmeans_k1_is_mean():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((50, 6))
    cents, labels, sse = pd.kmeans(pts, 1, rng)
    assert np.allclose(cents[0], pts.mean(axis=0), atol=1e-12)
    assert set(labels) == {0}


def test_kmeans_k_equals_n():
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((8, 3))
    cents, labels, sse = pd.kmeans(pts, 8, rng)
    assert sorted(map(tuple, np.round(cents, 9))) == sorted(map(tuple, np.round(pts, 9)))
    assert sse[-1] == pytest.approx(0.0, abs=1e-18)


def test_kmeans_sse_non_increasing():
    rng = np.random.default_rng(2)
    pts = np.vstack(
        [rng.standard_normal((60, 5)) + c for c in (0.0, 4.0, 9.0)]
    )
    _, _, sse = pd.kmeans(pts, 3, rng)
    assert all(b <= a + 1e-9 for a, b in zip(sse, sse[1:]))


def test_kmeans_close_to_multi_restart_reference():
    rng = np.random.default_rng(10)
    blobs = np.vstack(
        [rng.standard_normal((50, 8)) * 0.7 + mu for mu in (0.0, 5.0, -5.0, 10.0)]
    )
    ref = KMeans(n_clusters=4, n_init=50, random_state=0).fit(blobs)
    for seed in (3, 5):
        _, _, sse = pd.kmeans(blobs, 4, np.random.default_rng(seed))
        assert sse[-1] <= ref.inertia_ * 1.05


def test_kmeans_validates_inputs():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        pd.kmeans(np.zeros((0, 3)), 1, rng)
    with pytest.raises(ValueError):
        pd.kmeans(np.ones((5, 2)), 6, rng)


def test_cluster_prompts_reserved_categories():
    rng = np.random.default_rng(4)
    pts = [rng.standard_normal(6) + 3.0 for _ in range(30)]
    got = pd.cluster_prompts(pts, 3, rng)
    assert [p.category for p in got] == [
        "__cluster:000", "__cluster:001", "__cluster:002"
    ]
    assert all(p.modality == "image" for p in got)
    with pytest.raises(ValueError):
        pd.cluster_prompts([], 1, rng)
