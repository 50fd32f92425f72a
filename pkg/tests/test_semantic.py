import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psychoforge import scales, semantic
from psychoforge.semantic import EmbeddingCache, EmbeddingRecord, TsneConfig


def test_cosine_examples():
    assert semantic.cosine([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert semantic.cosine([1, 0], [0, 1]) == 0.0
    assert semantic.cosine([1, 2, 2], [2, 1, 2]) == pytest.approx(8 / 9)
    with pytest.raises(ValueError):
        semantic.cosine([0, 0], [1, 0])
    with pytest.raises(ValueError):
        semantic.cosine([1, 0], [1, 0, 0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_symmetric_bounded_scale_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=8), rng.normal(size=8)
    c = semantic.cosine(u, v)
    assert -1 <= c <= 1
    assert c == pytest.approx(semantic.cosine(v, u))
    assert c == pytest.approx(semantic.cosine(a * u, b * v))


def test_local_embedder_deterministic_and_normalised():
    v = semantic.local_embed("Is outgoing, sociable")
    assert np.array_equal(v, semantic.local_embed("Is outgoing, sociable"))
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert semantic.cosine(v, semantic.local_embed("Is sociable")) > semantic.cosine(v, semantic.local_embed("Worries a lot"))
    with pytest.raises(semantic.EmbeddingError):
        semantic.local_embed("123 !!")


def test_cache_roundtrip_and_hits(tmp_path):
    cache = EmbeddingCache(tmp_path / "c.jsonl")
    recs = semantic.embed_texts(["Kind", "Cold", "Kind"], cache=cache)
    assert [r.text for r in recs] == ["Kind", "Cold", "Kind"]
    assert len(cache) == 2
    again = EmbeddingCache(tmp_path / "c.jsonl")
    assert len(again) == 2
    back = semantic.embed_texts(["Cold"], cache=again, offline=True)
    assert np.array_equal(back[0].vector, recs[1].vector)


def test_second_call_makes_no_requests(tmp_path, monkeypatch):
    calls = []
    monkeypatch.setenv("PSYCHOFORGE_API_KEY", "k")

    def fake(texts, *a, **k):
        calls.append(list(texts))
        return [np.ones(4) * (n + 1) for n, _ in enumerate(texts)]

    monkeypatch.setattr(semantic, "remote_embed", fake)
    cache = EmbeddingCache(tmp_path / "c.jsonl")
    semantic.embed_texts(["a", "b"], "remote-model", cache)
    semantic.embed_texts(["b", "a"], "remote-model", cache)
    assert calls == [["a", "b"]]


def test_offline_miss_names_text(tmp_path):
    with pytest.raises(semantic.CacheMiss, match="Talkative"):
        semantic.embed_texts(["Talkative"], cache=EmbeddingCache(tmp_path / "x.jsonl"), offline=True)


def test_corrupt_cache_record(tmp_path):
    rec = EmbeddingRecord("Kind", "m", np.ones(3))
    line = rec.to_json().replace('"Kind"', '"Cruel"')
    p = tmp_path / "c.jsonl"
    p.write_text(line + "\n")
    with pytest.raises(semantic.EmbeddingError, match="hash"):
        EmbeddingCache(p)


def test_fixture_cache_covers_corpus():
    cache = semantic.fixture_cache()
    texts = [it.text for k in semantic.STUDY1_SCALES for it in scales.bundled_scale(k).items]
    recs = semantic.embed_texts(texts, cache=cache, offline=True)
    assert len({r.vector.size for r in recs}) == 1
    # the fixture agrees with a fresh local embedding
    assert np.allclose(recs[0].vector, semantic.local_embed(texts[0]), atol=1e-7)
    bfi2_mm = [it.text for k in ("bfi2", "mini_markers") for it in scales.bundled_scale(k).items]
    assert len(semantic.embed_texts(bfi2_mm, cache=cache, offline=True)) == 100


def _test(name, domains, vecs):
    return semantic.EmbeddedTest(name, list(domains), np.asarray(vecs, dtype=float))


def test_domain_similarity_degenerate_cases():
    a = _test("a", "OCEAN", np.eye(5) + 1)
    assert semantic.domain_similarity(a, a, "O") == pytest.approx(1.0)
    one = _test("x", "O", [[1, 2, 2]])
    two = _test("y", "O", [[2, 1, 2]])
    assert semantic.domain_similarity(one, two, "O") == pytest.approx(8 / 9)
    assert semantic.domain_similarity(one, two, "O", "centroid") == pytest.approx(8 / 9)
    with pytest.raises(ValueError, match="empty"):
        semantic.domain_similarity(one, two, "C")


def test_pairwise_mean_by_hand():
    a = _test("a", "OO", [[1, 0], [0, 1]])
    b = _test("b", "O", [[1, 1]])
    assert semantic.domain_similarity(a, b, "O") == pytest.approx(np.sqrt(0.5))
    assert semantic.domain_similarity(a, b, "O", "centroid") == pytest.approx(1.0)


def test_panels_symmetric_unit_diagonal():
    rng = np.random.default_rng(0)
    tests = [_test(n, "OCEANOCEAN", rng.normal(size=(10, 6))) for n in "abc"]
    panels = semantic.similarity_panels(tests)
    for m in panels.panels.values():
        assert np.allclose(m, m.T) and np.allclose(np.diag(m), 1)


# -- t-SNE --------------------------------------------------------------------------


def test_perplexity_equidistant_points():
    # regular 12-gon: every point sees the same distance profile
    ang = 2 * np.pi * np.arange(12) / 12
    X = np.column_stack([np.cos(ang), np.sin(ang)])
    P, perp = semantic.conditional_affinities(semantic._sq_distances(X), 5.0)
    assert np.allclose(perp, 5.0, atol=1e-4)
    # identical rows up to permutation means identical sigma
    sorted_rows = np.sort(P, axis=1)
    assert np.allclose(sorted_rows, sorted_rows[0], atol=1e-6)


def test_perplexity_match_random_points():
    X = np.random.default_rng(1).normal(size=(60, 10))
    _, perp = semantic.joint_affinities(X, 15.0)
    assert np.max(np.abs(perp - 15.0)) < 1e-4


def test_infeasible_perplexity():
    with pytest.raises(semantic.TsneError, match="infeasible"):
        semantic.tsne_fit(np.random.default_rng(2).normal(size=(10, 3)), TsneConfig(perplexity=5))
    with pytest.raises(semantic.TsneError):
        semantic.tsne_fit(np.ones((3, 2)))


def two_clusters(seed=3):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(0, 1, (10, 10)), rng.normal(8, 1, (10, 10))])
    return X, [0] * 10 + [1] * 10


def test_tsne_two_clusters_and_determinism():
    X, lab = two_clusters()
    cfg = TsneConfig(perplexity=5, iterations=400, seed=4)
    a = semantic.tsne_fit(X, cfg)
    b = semantic.tsne_fit(X, cfg)
    assert np.array_equal(a.points, b.points) and a.kl_trace == b.kl_trace
    assert semantic.silhouette(a.points, lab) > 0.5
    assert all(v >= 0 for v in a.kl_trace)
    assert np.all(np.isfinite(a.points))


def test_silhouette_matches_sklearn():
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(60, 2)) + np.repeat(np.eye(2) * 3, 30, axis=0)
    lab = [0] * 30 + [1] * 30
    assert semantic.silhouette(pts, lab) == pytest.approx(metrics.silhouette_score(pts, lab), abs=1e-12)
    lab3 = list(rng.integers(0, 3, 60))
    assert semantic.silhouette(pts, lab3) == pytest.approx(metrics.silhouette_score(pts, lab3), abs=1e-12)


def test_silhouette_extremes():
    pts = np.vstack([np.zeros((5, 2)) + [0, 0.001 * k] for k in range(1)] * 1)
    tight = np.vstack([np.random.default_rng(6).normal(0, 0.01, (10, 2)), np.random.default_rng(7).normal(100, 0.01, (10, 2))])
    assert semantic.silhouette(tight, [0] * 10 + [1] * 10) > 0.9
    shuffled = np.random.default_rng(8).permutation([0] * 50 + [1] * 50)
    X = np.random.default_rng(9).normal(size=(100, 2))
    assert abs(semantic.silhouette(X, shuffled)) < 0.2
    with pytest.raises(ValueError):
        semantic.silhouette(pts[:2], ["a", "b"])
    with pytest.raises(ValueError):
        semantic.silhouette(tight, [0] * 20)
