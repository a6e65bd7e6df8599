import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from billiards.core import GameSpec, TableGeometry, pack_layouts
from billiards.features import extract_batch, extract_features
from billiards.tokens import (
    FAMILIES, SLOT_FAMILIES, TokenConfig, Vocabulary, cell_centers, global_ids, tokenize_angle, tokenize_batch,
    tokenize_distance, tokenize_layout, tokenize_position, total_vocab,
)

from conftest import make_layout


def test_default_vocabulary_counts():
    voc = Vocabulary.build()
    assert (voc.cols, voc.rows, voc.n_cells) == (14, 7, 98)
    assert voc.cushion_bins == 6 and voc.shot_bins == 12 and voc.distance_bins == 23
    # 98 cells plus one PAD id for the position family
    assert voc.size("position") == 99
    assert voc.pad("pocket") != voc.na("pocket")
    assert total_vocab(voc) == sum(voc.sizes().values())


def test_position_examples():
    assert tokenize_position(0, 0) == 0
    assert tokenize_position(88.06, 76.02) == 75
    assert tokenize_position(200, 100) == 97
    with pytest.raises(ValueError):
        tokenize_position(201, 5)


def test_angle_and_distance_examples():
    assert tokenize_angle(40.80) == 2
    assert tokenize_angle(0.0) == 0
    assert tokenize_angle(90.0) == 5
    assert tokenize_angle(180.0, family="shot") == 11
    assert tokenize_distance(116.33) == 11
    assert tokenize_distance(0.0) == 0
    assert tokenize_distance(math.hypot(200, 100)) == 22
    with pytest.raises(ValueError):
        tokenize_distance(-0.1)
    with pytest.raises(ValueError):
        tokenize_angle(91.0)


def test_config_validation():
    with pytest.raises(ValueError):
        TokenConfig(cell_size=0)
    with pytest.raises(ValueError):
        Vocabulary.build(TokenConfig(cell_size=150))


def test_padding_rows():
    lay = make_layout([(0, 5, 5), (2, 20, 20), (7, 60, 60), (9, 90, 90)])
    seq = tokenize_layout(extract_features(lay))
    voc = Vocabulary.build()
    assert seq.shape == (10, 27)
    pads = [voc.pad(f) for f in SLOT_FAMILIES]
    for n in (1, 3, 4, 5, 6, 8):
        assert seq[n].tolist() == pads
    assert seq[0, 25] == voc.na("shot") and seq[0, 26] == voc.na("pocket")
    np.testing.assert_array_equal(seq, tokenize_layout(extract_features(lay)))


def test_full_rack_has_no_pad():
    lay = make_layout([(0, 5, 5)] + [(n, 10 + 18 * n, 10 + 8 * n) for n in range(1, 10)])
    seq = tokenize_layout(extract_features(lay))
    voc = Vocabulary.build()
    pads = np.array([voc.pad(f) for f in SLOT_FAMILIES])
    assert not (seq == pads[None, :]).any()


def test_layout_and_batch_paths_agree(small_corpus):
    packed = pack_layouts(small_corpus, GameSpec())
    batch = tokenize_batch(extract_batch(packed))
    for i in range(0, len(small_corpus), 10):
        np.testing.assert_array_equal(batch[i], tokenize_layout(extract_features(small_corpus[i])))


def test_global_ids_are_dense_and_disjoint(small_corpus):
    voc = Vocabulary.build()
    toks = tokenize_batch(extract_batch(pack_layouts(small_corpus, GameSpec())))
    g = global_ids(toks, voc)
    assert g.min() >= 0 and g.max() < total_vocab(voc)
    fam_of = {}
    for s, f in enumerate(SLOT_FAMILIES):
        for v in np.unique(g[..., s]):
            assert fam_of.setdefault(int(v), f) == f
    with pytest.raises(ValueError):
        global_ids(np.full((1, 10, 27), 10_000), voc)


def test_cell_centers_round_trip():
    centers = cell_centers()
    assert centers.shape == (98, 2)
    np.testing.assert_array_equal(tokenize_position(centers[:, 0], centers[:, 1]), np.arange(98))


@given(st.floats(0, 223.6), st.floats(0, 223.6))
def test_distance_monotone(a, b):
    lo, hi = sorted((a, b))
    assert tokenize_distance(lo) <= tokenize_distance(hi)


@given(st.floats(0, 90), st.floats(0, 90))
def test_angle_monotone(a, b):
    lo, hi = sorted((a, b))
    assert tokenize_angle(lo) <= tokenize_angle(hi)


@given(st.integers(0, 13), st.integers(0, 6), st.floats(0, 0.999), st.floats(0, 0.999), st.floats(0, 0.999),
       st.floats(0, 0.999))
def test_same_cell_same_token(c, r, u1, v1, u2, v2):
    cs = 15.0
    L, W = TableGeometry().length, TableGeometry().width
    def pt(u, v):
        # the last row and column overhang the table; clamp onto it
        return (min(c * cs + u * cs, L), min(r * cs + v * cs, W))
    x1, y1 = pt(u1, v1)
    x2, y2 = pt(u2, v2)
    assert tokenize_position(x1, y1) == tokenize_position(x2, y2)


@given(st.floats(1, 50), st.floats(1, 45), st.floats(1, 40))
def test_vocab_closed_form(cell, ang, dist):
    cfg = TokenConfig(cell, ang, dist)
    voc = Vocabulary.build(cfg)
    assert voc.cols == math.ceil(200 / cell - 1e-12)
    assert voc.rows == math.ceil(100 / cell - 1e-12)
    assert voc.cushion_bins == math.ceil(90 / ang - 1e-12)
    assert voc.shot_bins == math.ceil(180 / ang - 1e-12)
    assert voc.distance_bins == math.ceil(math.hypot(200, 100) / dist - 1e-12)
    assert set(FAMILIES) == set(voc.sizes())
