import itertools
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import directed_hausdorff

from billiards import baselines
from billiards.baselines import MEASURES, PointSeqDB, distance_matrix, dtw, emd, frechet, hausdorff, peer_matching

from conftest import make_layout


# ---------------------------------------------------------------- independent oracles


def emd_oracle(A, B):
    """Uniform-weight transport as an assignment between lcm-replicated point sets."""
    A, B = np.asarray(A, float), np.asarray(B, float)
    m, n = len(A), len(B)
    L = m * n // math.gcd(m, n)
    AA = np.repeat(A, L // m, axis=0)
    BB = np.repeat(B, L // n, axis=0)
    C = np.linalg.norm(AA[:, None] - BB[None], axis=-1)
    r, c = linear_sum_assignment(C)
    return C[r, c].sum() / L


def emd_permutations(A, B):
    A, B = np.asarray(A, float), np.asarray(B, float)
    return min(np.mean([np.linalg.norm(A[i] - B[p]) for i, p in enumerate(perm)])
               for perm in itertools.permutations(range(len(B))))


def recursive_dp(A, B, combine):
    A, B = np.asarray(A, float), np.asarray(B, float)

    @lru_cache(maxsize=None)
    def f(i, j):
        d = float(np.linalg.norm(A[i] - B[j]))
        if i == 0 and j == 0:
            return d
        prev = []
        if i > 0:
            prev.append(f(i - 1, j))
        if j > 0:
            prev.append(f(i, j - 1))
        if i > 0 and j > 0:
            prev.append(f(i - 1, j - 1))
        return combine(d, min(prev))

    return f(len(A) - 1, len(B) - 1)


def hausdorff_oracle(A, B):
    return max(directed_hausdorff(A, B)[0], directed_hausdorff(B, A)[0])


def pm_oracle(a, b):
    pa = {x.number: (x.x, x.y) for x in a.balls}
    pb = {x.number: (x.x, x.y) for x in b.balls}
    pairs = [(pa[k], pb[k]) for k in sorted(set(pa) & set(pb))]
    la = sorted(set(pa) - set(pb))
    lb = sorted(set(pb) - set(pa))
    pairs += [(pa[i], pb[j]) for i, j in zip(la, lb)]
    return float(np.mean([math.dist(p, q) for p, q in pairs])) if pairs else 0.0


pts = st.lists(st.tuples(st.integers(0, 200), st.integers(0, 100)), min_size=1, max_size=6).map(
    lambda l: np.array(l, dtype=float))


# ---------------------------------------------------------------- examples


def test_emd_examples():
    A = [(0, 0), (2, 0)]
    assert emd(A, A) == 0
    assert emd([(0, 0)], [(3, 4)]) == pytest.approx(5)
    assert emd(A, [(0, 0), (0, 2)]) == pytest.approx(math.sqrt(8) / 2, abs=1e-9)


def test_hausdorff_examples():
    assert hausdorff([(0, 0), (10, 0)], [(0, 0)]) == 10
    assert hausdorff([(0, 0)], [(0, 0), (10, 0)]) == 10
    assert hausdorff([(1, 1)], [(1, 1)]) == 0


def test_dtw_frechet_examples():
    assert dtw([(0, 0), (1, 0)], [(0, 0)]) == 1
    assert frechet([(0, 0), (1, 0)], [(0, 0)]) == 1
    A = [(0, 0), (5, 5), (9, 1)]
    assert dtw(A, A) == 0 and frechet(A, A) == 0


def test_peer_matching_examples():
    a = make_layout([(0, 0, 0), (1, 10, 0)])
    b = make_layout([(0, 0, 5), (1, 10, 3)])
    assert peer_matching(a, b) == pytest.approx(4)
    assert peer_matching(a, a) == 0
    c = make_layout([(0, 0, 0), (1, 10, 10), (2, 50, 50)])
    d = make_layout([(0, 0, 0), (2, 50, 50), (9, 13, 14)])
    # cue and 2 coincide, ball 1 is paired with ball 9
    assert peer_matching(c, d) == pytest.approx(5 / 3)


def test_layouts_become_point_sequences():
    lay = make_layout([(3, 30, 30), (0, 1, 2), (1, 10, 10)])
    np.testing.assert_array_equal(baselines.point_seq(lay), [[1, 2], [10, 10], [30, 30]])
    with pytest.raises(ValueError):
        baselines.point_seq([])


# ---------------------------------------------------------------- oracle equivalence


@given(pts, pts)
def test_emd_matches_transport_oracle(A, B):
    assert emd(A, B) == pytest.approx(emd_oracle(A, B), abs=1e-9)


@given(st.integers(1, 5).flatmap(lambda n: st.tuples(
    st.lists(st.tuples(st.integers(0, 200), st.integers(0, 100)), min_size=n, max_size=n),
    st.lists(st.tuples(st.integers(0, 200), st.integers(0, 100)), min_size=n, max_size=n))))
def test_emd_equal_sizes_matches_permutations(pair):
    A, B = pair
    assert emd(A, B) == pytest.approx(emd_permutations(A, B), abs=1e-9)


@given(pts, pts)
def test_dp_measures_match_recursion(A, B):
    assert dtw(A, B) == pytest.approx(recursive_dp(A, B, lambda d, p: d + p), abs=1e-9)
    assert frechet(A, B) == pytest.approx(recursive_dp(A, B, max), abs=1e-9)


@given(pts, pts)
def test_hausdorff_matches_scipy(A, B):
    assert hausdorff(A, B) == pytest.approx(hausdorff_oracle(A, B), abs=1e-9)


@given(pts, pts)
def test_measures_symmetric_nonnegative(A, B):
    for f in (emd, hausdorff, dtw, frechet):
        ab, ba = f(A, B), f(B, A)
        assert ab >= 0 and ab == pytest.approx(ba, abs=1e-9)
        assert f(A, A) == pytest.approx(0, abs=1e-9)


def test_random_oracle_sweep():
    rng = np.random.default_rng(3)
    for _ in range(200):
        A = rng.uniform(0, 100, size=(rng.integers(1, 7), 2))
        B = rng.uniform(0, 100, size=(rng.integers(1, 7), 2))
        assert emd(A, B) == pytest.approx(emd_oracle(A, B), abs=1e-9)
        assert hausdorff(A, B) == pytest.approx(hausdorff_oracle(A, B), abs=1e-9)
        assert dtw(A, B) == pytest.approx(recursive_dp(A, B, lambda d, p: d + p), abs=1e-9)
        assert frechet(A, B) == pytest.approx(recursive_dp(A, B, max), abs=1e-9)


def test_peer_matching_matches_oracle(small_corpus):
    for a, b in zip(small_corpus[:40], small_corpus[40:80]):
        assert peer_matching(a, b) == pytest.approx(pm_oracle(a, b), abs=1e-9)
        assert peer_matching(a, b) == pytest.approx(peer_matching(b, a), abs=1e-9)


# ---------------------------------------------------------------- database scans


@pytest.mark.parametrize("measure", MEASURES)
def test_distance_matrix_matches_pairwise(measure, small_corpus):
    qs, db = small_corpus[:4], small_corpus[4:30]
    M = distance_matrix(measure, qs, db)
    pair = peer_matching if measure == "pm" else getattr(baselines, measure)
    for i, q in enumerate(qs):
        for j, d in enumerate(db):
            assert M[i, j] == pytest.approx(pair(q, d), abs=1e-9)


def test_unknown_measure():
    with pytest.raises(KeyError):
        distance_matrix("cosine", [], [])


def test_query_counts_ground_distances(small_corpus):
    db = PointSeqDB.from_layouts(small_corpus[:10])
    _, ops = db.query("dtw", 0)
    assert ops == int(db.lens[0] * db.lens.sum())
