import numpy as np
import pytest
from hypothesis import given, strategies as st

from billiards import nn
from billiards.bl2vec import BL2Vec
from billiards.core import GameSpec, pack_layouts
from billiards.evalkit import (
    RetrievalProtocol, cluster_eval, format_table, knn_classify, knn_predict, linear_fit, make_retrieval_set, measure_distances,
    normalize_index, pairwise_distances, rank_metrics, rank_metrics_by_sorting, self_similarity_eval, timing_bench,
)
from billiards.pipeline import Featurizer
from billiards.synth import SynthConfig, generate_synthetic

SMALL_NET = nn.NetConfig(embed_dim=4, filters_total=14, seed=0)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(SynthConfig(count=200, seed=31))


@pytest.fixture(scope="module")
def model():
    fz = Featurizer()
    return BL2Vec(nn.init_encoder(SMALL_NET, fz.vocab, 10, np.random.default_rng(0)), SMALL_NET, fz)


def test_rank_metric_examples():
    hr, mrr, ranks = rank_metrics(np.array([[5.0, 6.0], [7.0, 8.0]]), np.array([1.0, 2.0]))
    assert (hr, mrr) == (1.0, 1.0) and ranks.tolist() == [1, 1]
    _, mrr, ranks = rank_metrics(np.array([[1.0, 2.0, 3.0, 9.0]]), np.array([3.5]))
    assert ranks.tolist() == [4] and mrr == 0.25
    # ties count against the positive
    _, _, ranks = rank_metrics(np.array([[1.0, 1.0, 2.0]]), np.array([1.0]))
    assert ranks.tolist() == [3]


@given(st.integers(0, 2**31 - 1))
def test_two_rank_implementations_agree(seed):
    rng = np.random.default_rng(seed)
    d_db = rng.integers(0, 30, size=(5, 40)).astype(float)
    d_pos = rng.integers(0, 30, size=5).astype(float)
    a, b = rank_metrics(d_db, d_pos), rank_metrics_by_sorting(d_db, d_pos)
    assert a[0] == b[0] and a[1] == pytest.approx(b[1]) and a[2].tolist() == b[2].tolist()
    assert 0 <= a[0] <= 1 and 0 < a[1] <= 1


def test_retrieval_set_is_disjoint_and_seeded(corpus):
    proto = RetrievalProtocol(20, 100, seed=5)
    rs = make_retrieval_set(corpus, proto)
    assert len(rs.queries) == 20 and len(rs.database) == 100
    assert set(rs.queries.ids).isdisjoint(rs.database.ids)
    np.testing.assert_array_equal(rs.positives.present, rs.queries.present)
    again = make_retrieval_set(corpus, proto)
    np.testing.assert_array_equal(rs.positives.pos, again.positives.pos)
    with pytest.raises(ValueError):
        make_retrieval_set(corpus[:50], proto)


@pytest.mark.parametrize("measure", ["emd", "hausdorff", "dtw", "frechet", "pm", "bl2vec"])
def test_self_similarity_runs_for_every_measure(measure, corpus, model):
    res = self_similarity_eval(measure, corpus, RetrievalProtocol(10, 60, seed=1), model=model)
    assert 0 <= res.hr10 <= 1 and 0 < res.mrr <= 1 and len(res.ranks) == 10
    assert set(res.to_dict()) == {"measure", "hr10", "mrr"}


def test_learned_measure_needs_model(corpus):
    with pytest.raises(ValueError):
        self_similarity_eval("bl2vec", corpus, RetrievalProtocol(10, 60))
    with pytest.raises(KeyError):
        self_similarity_eval("cosine", corpus, RetrievalProtocol(10, 60))


def test_perfect_positives_give_unit_scores(corpus, model):
    from billiards.bl2vec import PerturbConfig

    rs = make_retrieval_set(corpus, RetrievalProtocol(10, 60, PerturbConfig(0.0, 0.0)))
    d_db, d_pos = measure_distances("dtw", rs)
    assert not d_pos.any()
    hr, mrr, _ = rank_metrics(d_db, d_pos)
    assert hr == 1.0 and mrr == 1.0


def test_knn_examples(rng):
    pts = np.concatenate([rng.normal(0, 1, size=(30, 2)), rng.normal(50, 1, size=(30, 2))])
    D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    y = np.array([0] * 30 + [1] * 30)
    assert knn_classify(D, y, 10) == 1.0
    assert knn_classify(np.exp(D / 10), y, 10) == knn_classify(D, y, 10)
    with pytest.raises(ValueError):
        knn_classify(D[:5, :5], y[:5], 10)


def test_knn_random_labels_near_chance():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(500, 3))
    D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    acc = knn_classify(D, rng.integers(0, 2, 500), 10)
    assert abs(acc - 0.5) <= 0.05


def test_knn_vote_tie_uses_mean_distance():
    # item 0's four neighbours split 2/2; the label-1 pair is closer on average
    D = np.array([
        [0, 1, 4, 2, 2.5],
        [1, 0, 9, 9, 9],
        [4, 9, 0, 9, 9],
        [2, 9, 9, 0, 9],
        [2.5, 9, 9, 9, 0],
    ], dtype=float)
    y = np.array([1, 0, 0, 1, 1])
    # item 0: label 0 at distances 1 and 4 (mean 2.5), label 1 at 2 and 2.5 (mean 2.25)
    assert knn_predict(D, y, 4)[0] == 1


def test_pairwise_distances(corpus, model):
    D = pairwise_distances("hausdorff", corpus[:12])
    assert D.shape == (12, 12) and np.allclose(D, D.T) and not np.diag(D).any()
    E = pairwise_distances("bl2vec", corpus[:12], model)
    assert np.allclose(E, E.T, atol=1e-4)


def test_cluster_eval_examples(rng):
    X = np.concatenate([rng.normal(0, 0.1, size=(40, 2)), rng.normal(5, 0.1, size=(40, 2))])
    y = np.array([0] * 40 + [1] * 40)
    ari, ami = cluster_eval(X, y)
    assert ari == pytest.approx(1.0) and ami == pytest.approx(1.0)
    noise = np.random.default_rng(2).normal(size=(400, 4))
    ari, _ = cluster_eval(noise, np.random.default_rng(3).integers(0, 2, 400))
    assert abs(ari - 0.5) < 0.02
    with pytest.raises(ValueError):
        cluster_eval(np.ones((5, 2)), [0, 1, 0, 1, 0])


@given(st.floats(-1, 1))
def test_normalize_is_bijection_on_unit_interval(x):
    v = normalize_index(x)
    assert 0 <= v <= 1 and 2 * v - 1 == pytest.approx(x)


def test_linear_fit():
    s, i, r2 = linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert (s, i, r2) == pytest.approx((2, 1, 1))


def test_timing_bench_counts(corpus, model):
    packed = pack_layouts(corpus, GameSpec())
    q = packed.take(np.arange(3))
    rows = timing_bench(["dtw", "bl2vec"], packed, q, [50, 100], repeat=1, model=model)
    assert [r["db_size"] for r in rows] == [50, 50, 100, 100]
    dtw = [r for r in rows if r["measure"] == "dtw"]
    assert all(r["query_s"] > 0 for r in rows)
    assert dtw[1]["ops"] > dtw[0]["ops"]
    again = timing_bench(["dtw"], packed, q, [50, 100], repeat=1)
    assert [r["ops"] for r in again] == [r["ops"] for r in dtw]
    with pytest.raises(ValueError):
        timing_bench(["dtw"], packed, q, [100, 50])
    assert "db_size" in format_table(rows, ["measure", "db_size", "query_s"])


def test_pair_cost_quadratic_in_ball_count():
    small = generate_synthetic(SynthConfig(count=40, seed=1, min_object_balls=4, max_object_balls=4))
    big = generate_synthetic(SynthConfig(count=40, seed=1, min_object_balls=9, max_object_balls=9))
    ops = {}
    for name, lays in (("n5", small), ("n10", big)):
        p = pack_layouts(lays, GameSpec())
        ops[name] = timing_bench(["dtw"], p, p.take([0]), [40], repeat=1)[0]["ops"]
    assert ops["n10"] / ops["n5"] == pytest.approx(4.0)
