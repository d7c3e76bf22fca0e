import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unitflow import units as U
from unitflow.errors import DegenerateData, InvalidInput, IoError, LengthOverflow


def brute_force_kmeans(points, k):
    """Exhaustive search over all partitions into at most k nonempty groups."""
    n = len(points)
    best = np.inf
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) < min(k, n):
            continue
        cost = 0.0
        for g in set(labels):
            grp = points[[i for i in range(n) if labels[i] == g]]
            cost += float(((grp - grp.mean(axis=0)) ** 2).sum())
        best = min(best, cost)
    return best


@pytest.mark.parametrize("n,k,seed", [(8, 2, 0), (9, 3, 1), (12, 2, 2), (10, 3, 3)])
def test_kmeans_matches_exhaustive_optimum(n, k, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 1, (n, 2))
    cb = U.fit_kmeans(pts, k, seed, n_init=40, max_iters=200)
    opt = brute_force_kmeans(pts, k)
    assert cb.training_meta.inertia <= opt + 1e-8 * (1 + opt)
    assert cb.training_meta.inertia >= opt - 1e-8 * (1 + opt)


def test_kmeans_inertia_history_non_increasing():
    rng = np.random.default_rng(0)
    pts = rng.normal(0, 1, (200, 5))
    cb = U.fit_kmeans(pts, 6, 0, n_init=2, max_iters=50)
    h = cb.training_meta.inertia_history
    assert len(h) >= 1
    assert all(h[i + 1] <= h[i] + 1e-9 for i in range(len(h) - 1))
    assert cb.training_meta.inertia == h[-1]


def test_kmeans_k_equals_distinct_points():
    pts = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    pts = np.repeat(pts, 4, axis=0)
    cb = U.fit_kmeans(pts, 3, 0, n_init=5)
    assert cb.training_meta.inertia < 1e-12


def test_kmeans_determinism():
    rng = np.random.default_rng(4)
    pts = rng.normal(0, 1, (60, 3))
    a = U.fit_kmeans(pts, 4, 7, n_init=3)
    b = U.fit_kmeans(pts, 4, 7, n_init=3)
    assert np.array_equal(a.centroids, b.centroids)


def test_kmeans_errors():
    rng = np.random.default_rng(0)
    pts = rng.normal(0, 1, (10, 2))
    with pytest.raises(InvalidInput):
        U.fit_kmeans(pts, 1, 0)
    with pytest.raises(InvalidInput):
        U.fit_kmeans(pts[:3], 4, 0)
    with pytest.raises(DegenerateData):
        U.fit_kmeans(np.ones((10, 2)), 2, 0)


def test_assign_matches_brute_force():
    rng = np.random.default_rng(11)
    pts = rng.normal(0, 1, (50, 4))
    cents = rng.normal(0, 1, (7, 4))
    cb = U.Codebook(cents, U.KMeansMeta(0, 0, 0.0))
    ids = U.assign(pts, cb).ids
    d = ((pts[:, None, :] - cents[None, :, :]) ** 2).sum(-1)
    assert np.array_equal(ids, d.argmin(axis=1))


def test_assign_tie_breaks_to_lowest_index():
    cents = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    cb = U.Codebook(cents, U.KMeansMeta(0, 0, 0.0))
    # Origin is equidistant from all three centroids.
    ids = U.assign(np.zeros((1, 2)), cb).ids
    assert ids[0] == 0


def test_assign_shape_errors():
    cb = U.Codebook(np.eye(3), U.KMeansMeta(0, 0, 0.0))
    with pytest.raises(InvalidInput):
        U.assign(np.zeros((4, 2)), cb)
    with pytest.raises(InvalidInput):
        U.assign(np.zeros((0, 3)), cb)


def test_codebook_rejects_duplicate_centroids():
    cents = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(DegenerateData):
        U.Codebook(cents, U.KMeansMeta(0, 0, 0.0))


def _collapse_oracle(ids):
    out = []
    for x in ids:
        if not out or out[-1] != x:
            out.append(x)
    return out


def test_collapse_exhaustive_small():
    # Every sequence up to length 8 over a 4-symbol alphabet.
    for n in range(1, 9):
        for tup in itertools.product(range(4), repeat=n):
            u = U.UnitSequence(np.array(tup, dtype=np.int64), collapsed=False)
            c = U.collapse(u)
            assert c.collapsed
            assert list(c.ids) == _collapse_oracle(tup)
            again = U.collapse(c)
            assert np.array_equal(again.ids, c.ids)


@settings(max_examples=200)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=60),
       st.integers(1, 4))
def test_collapse_rate_invariance(ids, reps):
    base = U.UnitSequence(np.array(ids, dtype=np.int64), collapsed=False)
    dup = U.UnitSequence(np.repeat(np.array(ids, dtype=np.int64), reps), collapsed=False)
    assert np.array_equal(U.collapse(base).ids, U.collapse(dup).ids)


@settings(max_examples=200)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=60))
def test_collapse_is_length_non_increasing_and_no_adjacent(ids):
    u = U.UnitSequence(np.array(ids, dtype=np.int64), collapsed=False)
    c = U.collapse(u)
    assert len(c) <= len(u)
    assert all(c.ids[i] != c.ids[i + 1] for i in range(len(c) - 1))


def test_pad_to_frames_laws():
    u = U.UnitSequence(np.array([3, 1, 2], dtype=np.int64), collapsed=True)
    p = U.pad_to_frames(u, 7, 5)
    assert list(p.ids) == [3, 1, 2, 5, 5, 5, 5]
    assert p.content_len == 3
    exact = U.pad_to_frames(U.UnitSequence(np.array([3]), collapsed=True), 1, 5)
    assert list(exact.ids) == [3]


def test_pad_to_frames_errors():
    raw = U.UnitSequence(np.array([1, 1, 2], dtype=np.int64), collapsed=False)
    with pytest.raises(InvalidInput):
        U.pad_to_frames(raw, 10, 5)
    u = U.UnitSequence(np.array([0, 1, 0], dtype=np.int64), collapsed=True)
    with pytest.raises(LengthOverflow):
        U.pad_to_frames(u, 2, 5)
    big = U.UnitSequence(np.array([5], dtype=np.int64), collapsed=True)
    with pytest.raises(InvalidInput):
        U.pad_to_frames(big, 4, 5)


def test_padded_units_suffix_law():
    with pytest.raises(InvalidInput):
        U.PaddedUnits(np.array([5, 1, 5], dtype=np.int64), 3, 5)


def test_special_id_layout():
    assert U.filler_id(32) == 32
    assert U.batch_pad_id(32) == 33
    assert U.unit_vocab_size(32) == 34


def test_unit_sequence_validation():
    with pytest.raises(InvalidInput):
        U.UnitSequence(np.array([1, 1], dtype=np.int64), collapsed=True)
    with pytest.raises(InvalidInput):
        U.UnitSequence(np.array([-1], dtype=np.int64), collapsed=False)
    with pytest.raises(InvalidInput):
        U.UnitSequence(np.zeros((2, 2), dtype=np.int64), collapsed=False)


def test_feature_file_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    f = rng.normal(0, 1, (17, 16)).astype(np.float32)
    p = tmp_path / "a.fea"
    U.write_features(p, f)
    back = U.read_features(p)
    assert np.array_equal(back, f)
    with pytest.raises(IoError):
        U.read_features(tmp_path / "nope.fea")


def test_codebook_file_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    pts = rng.normal(0, 1, (40, 4))
    cb = U.fit_kmeans(pts, 3, 9, n_init=2)
    p = tmp_path / "c.cbk"
    U.write_codebook(p, cb)
    back = U.read_codebook(p)
    # File format stores centroids as f32; round-trip is exact at f32.
    assert np.array_equal(back.centroids, cb.centroids.astype(np.float32))
    assert back.training_meta.seed == 9


def test_unit_file_roundtrip(tmp_path):
    u = U.UnitSequence(np.array([4, 2, 7], dtype=np.int64), collapsed=True)
    p = tmp_path / "u.units"
    U.write_units(p, u, k=8)
    back, k = U.read_units(p)
    assert k == 8
    assert back.collapsed
    assert np.array_equal(back.ids, u.ids)
