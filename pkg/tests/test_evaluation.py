import numpy as np
import pytest

from fedcmh.datamodel import Dataset
from fedcmh.errors import ShapeError
from fedcmh.evaluation import (
    I2T,
    T2I,
    MapRow,
    RetrievalSet,
    average_precision,
    cross_modal_map,
    encode_for_eval,
    hamming_distance,
    hamming_distances,
    mean_average_precision,
    rows_from_csv,
    rows_to_csv,
    split_query_gallery,
)
from fedcmh.modalitynets import ModalityNet
from fedcmh.numkernel import Activation, AffineLayer

from oracles import brute_force_map, random_retrieval_set


def test_hamming_examples():
    assert hamming_distance([1, 1, -1], [1, 1, -1]) == 0
    assert hamming_distance([1, 1, -1, -1], [-1, 1, 1, -1]) == 2
    with pytest.raises(ShapeError):
        hamming_distance([1], [1, 1])


def test_hamming_distances_match_pairwise():
    rng = np.random.default_rng(0)
    q = np.where(rng.random(8) < 0.5, -1.0, 1.0)
    g = np.where(rng.random((8, 10)) < 0.5, -1.0, 1.0)
    np.testing.assert_array_equal(hamming_distances(q, g), [hamming_distance(q, g[:, j]) for j in range(10)])


def test_hand_case_ap():
    q = np.array([1.0, 1.0])
    g = np.array([[1.0, -1.0, -1.0], [1.0, 1.0, -1.0]])  # distances 0, 1, 2
    labels = np.array([0, 1, 0])
    assert average_precision(q, 0, g, labels) == (1 + 2 / 3) / 2


def test_ap_undefined_without_relevant_items():
    assert average_precision(np.ones(2), 5, np.ones((2, 3)), [0, 1, 2]) is None


def test_map_matches_brute_force():
    for seed in range(30):
        qc, ql, gc, gl = random_retrieval_set(seed)
        rep = mean_average_precision(RetrievalSet(qc, ql, gc, gl))
        assert rep.map == pytest.approx(brute_force_map(qc, ql, gc, gl), abs=1e-12)


def test_map_invariants():
    rng = np.random.default_rng(1)
    g = np.where(rng.random((6, 9)) < 0.5, -1.0, 1.0)
    gl = rng.integers(0, 3, size=9)
    # queries identical to gallery items of a unique class retrieve perfectly
    codes = np.array([[1.0, -1.0], [1.0, -1.0]])
    rep = mean_average_precision(RetrievalSet(codes, [0, 1], codes, [0, 1]))
    assert rep.map == 1.0
    qc = g[:, :4]
    rep = mean_average_precision(RetrievalSet(qc, gl[:4], g, gl))
    assert 0.0 < rep.map <= 1.0
    # flipping every bit of query and gallery keeps all distances
    flipped = mean_average_precision(RetrievalSet(-qc, gl[:4], -g, gl))
    assert flipped.map == rep.map


def test_map_excludes_queries_without_relevant_items():
    codes = np.ones((2, 2))
    rep = mean_average_precision(RetrievalSet(codes, [0, 7], codes, [0, 0]))
    assert rep.excluded_queries == 1 and rep.map == 1.0
    with pytest.raises(ValueError):
        mean_average_precision(RetrievalSet(codes[:, :1], [7], codes, [0, 0]))


def test_retrieval_set_rejects_non_binary():
    with pytest.raises(ValueError):
        RetrievalSet(np.zeros((2, 1)), [0], np.ones((2, 1)), [0])


def test_zero_net_encodes_positive():
    zero = ModalityNet([AffineLayer(np.zeros((4, 3)), np.zeros(4), Activation.IDENTITY)])
    ds = Dataset(np.ones((3, 5)), np.ones((3, 5)), np.zeros(5, dtype=int), 1)
    bx, bt = encode_for_eval(zero, zero, ds)
    assert np.all(bx == 1.0) and np.all(bt == 1.0)


def test_cross_modal_directions():
    ident = ModalityNet([AffineLayer(np.eye(2), np.zeros(2), Activation.IDENTITY)])
    flip = ModalityNet([AffineLayer(-np.eye(2), np.zeros(2), Activation.IDENTITY)])
    x = np.array([[1.0, -1.0, 1.0], [1.0, -1.0, -1.0]])
    ds = Dataset(x, x, np.array([0, 1, 2]), 3)
    reps = cross_modal_map(ident, ident, ds, ds)
    assert reps[I2T].map == 1.0 and reps[T2I].map == 1.0
    # text codes are negated, so the matching item ranks last among 3
    reps = cross_modal_map(ident, flip, ds, ds)
    assert reps[I2T].map < 1.0


def test_split_query_gallery():
    q, g = split_query_gallery(20, 0.1, seed=3)
    assert q.size == 2 and g.size == 18
    assert np.array_equal(np.sort(np.concatenate([q, g])), np.arange(20))
    q2, _ = split_query_gallery(20, 0.1, seed=3)
    assert np.array_equal(q, q2)


def test_rows_csv_round_trip():
    rows = [MapRow("plfedcmh", "iid", I2T, 16, 0, 0.123456789), MapRow("fedavg", "iid", T2I, 32, 1, 1.0)]
    assert rows_from_csv(rows_to_csv(rows)) == rows


def test_map_query_permutation_invariant():
    qc, ql, gc, gl = random_retrieval_set(4)
    perm = np.random.default_rng(4).permutation(ql.size)
    a = mean_average_precision(RetrievalSet(qc, ql, gc, gl)).map
    b = mean_average_precision(RetrievalSet(qc[:, perm], ql[perm], gc, gl)).map
    assert a == pytest.approx(b, abs=1e-15)


def test_ap_improves_when_relevant_item_moves_up():
    q = np.ones(3)
    # relevant items rank 1st and 4th; moving the second to distance 0 ranks it 1st
    g = np.array([[1, 1, -1, -1], [1, -1, 1, -1], [-1, 1, 1, -1]], dtype=float)
    labels = np.array([0, 1, 1, 0])
    worse = average_precision(q, 0, g, labels)
    g2 = g.copy()
    g2[:, 3] = [1, 1, 1]
    better = average_precision(q, 0, g2, labels)
    assert 0 <= worse < better <= 1
