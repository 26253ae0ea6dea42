import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vislam.errors import DuplicateId, FormatError, InsufficientSample
from vislam.retrieval import (BowVector, KeyframeIndex, build_vocabulary, hamming, hamming_matrix,
                              match_descriptors, score)
from vislam.sim import flip_bits


def random_desc(rng, n):
    return rng.integers(0, 256, (n, 32), dtype=np.uint8)


@pytest.fixture(scope="module")
def places():
    rng = np.random.default_rng(7)
    descs = [random_desc(rng, 60) for _ in range(100)]
    sample = np.concatenate(descs + [flip_bits(d, 0.02, rng) for d in descs])
    return descs, build_vocabulary(sample, k=16, L=2, seed=0)


def test_hamming_against_unpacked_bits(rng):
    a, b = random_desc(rng, 20), random_desc(rng, 15)
    bits = lambda x: np.unpackbits(x, axis=1).astype(int)
    oracle = (bits(a)[:, None, :] != bits(b)[None, :, :]).sum(-1)
    assert np.array_equal(hamming_matrix(a, b), oracle)


def test_two_clusters_split_like_brute_force_medoids(rng):
    A = random_desc(rng, 1)[0]
    mask = np.packbits(rng.permutation(np.arange(256) < 128))
    B = A ^ mask
    assert hamming(A, B) == 128
    sample = np.concatenate([flip_bits(np.tile(A, (10, 1)), 0.01, rng),
                             flip_bits(np.tile(B, (10, 1)), 0.01, rng)])
    D = hamming_matrix(sample, sample)
    best = min(itertools.combinations(range(len(sample)), 2), key=lambda p: D[:, p].min(axis=1).sum())
    oracle = np.argmin(D[:, best], axis=1)
    voc = build_vocabulary(sample, k=2, L=1, seed=3)
    words = voc.transform(sample)
    assert voc.n_words == 2
    assert len(set(zip(oracle, words))) == 2


def test_identical_sample_single_word_zero_idf():
    d = np.tile(np.arange(32, dtype=np.uint8), (20, 1))
    voc = build_vocabulary(d, k=4, L=2)
    assert voc.n_words == 1 and np.all(voc.idf == 0.0)
    assert len(voc.bow(d)) == 0


def test_vocabulary_is_deterministic(rng):
    d = random_desc(rng, 400)
    a, b = build_vocabulary(d, 8, 2, seed=5), build_vocabulary(d, 8, 2, seed=5)
    assert np.array_equal(a.centers, b.centers) and np.array_equal(a.idf, b.idf)
    assert np.all(a.idf >= 0)
    # every leaf is reachable from the root
    reach, stack = set(), [0]
    while stack:
        n = stack.pop()
        reach.add(n)
        stack.extend(c for c in a.children[n] if c >= 0)
    leaves = set(np.flatnonzero(a.word_of >= 0))
    assert leaves <= reach and len(leaves) == a.n_words


def test_insufficient_sample(rng):
    with pytest.raises(InsufficientSample):
        build_vocabulary(random_desc(rng, 10), k=4, L=2)


def test_vocabulary_save_load(tmp_path, places):
    _, voc = places
    p = tmp_path / "v.bin"
    voc.save(p)
    back = type(voc).load(p)
    assert np.array_equal(back.centers, voc.centers) and np.array_equal(back.children, voc.children)
    assert np.array_equal(back.idf, voc.idf)
    raw = p.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(raw[:-5])
    (tmp_path / "magic.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    for bad in ("trunc.bin", "magic.bin"):
        with pytest.raises(FormatError):
            type(voc).load(tmp_path / bad)


def test_bow_is_l1_normalized(places):
    descs, voc = places
    for d in descs[:10]:
        assert abs(voc.bow(d).total - 1.0) < 1e-9


def test_add_and_query_same_descriptors(places):
    descs, voc = places
    idx = KeyframeIndex(voc)
    for i, d in enumerate(descs[:20]):
        idx.add_keyframe(i, d, landmark_ids=[1000 * i + j for j in range(5)])
    res = idx.query(descs[7], top_k=3)
    assert res[0][0] == 7 and res[0][1] == pytest.approx(1.0)
    with pytest.raises(DuplicateId):
        idx.add_keyframe(7, descs[7])


def test_landmark_exclusion_and_explicit_exclude(places):
    descs, voc = places
    idx = KeyframeIndex(voc)
    idx.add_keyframe(0, descs[0], [1, 2, 3])
    assert idx.query(descs[0], [3, 9]) == []
    assert idx.query(descs[0], [9])[0][0] == 0
    assert idx.query(descs[0], [9], exclude={0}) == []


def test_empty_keyframe_never_retrieved(places):
    descs, voc = places
    idx = KeyframeIndex(voc)
    idx.add_keyframe(5, np.zeros((0, 32), np.uint8))
    idx.add_keyframe(6, descs[1])
    assert len(idx.store[5].bow) == 0
    for d in descs[:10]:
        assert all(k != 5 for k, _ in idx.query(d, top_k=None))


def test_thousand_adds_consistent(rng, places):
    _, voc = places
    idx = KeyframeIndex(voc)
    for i in range(1000):
        idx.add_keyframe(i, random_desc(rng, int(rng.integers(0, 12))))
    recount = {}
    for kid, e in idx.store.items():
        for w in e.bow.weights:
            recount.setdefault(w, []).append(kid)
    assert recount == idx.inverted and len(idx) == 1000


def test_ranking_ties_by_lower_id(places):
    descs, voc = places
    idx = KeyframeIndex(voc)
    for kid in (9, 3, 5):
        idx.add_keyframe(kid, descs[2])
    assert [k for k, _ in idx.query(descs[2], top_k=None)] == [3, 5, 9]


bow_strategy = st.dictionaries(st.integers(0, 40), st.floats(0.01, 10.0), max_size=12).map(
    lambda d: BowVector({k: v / sum(d.values()) for k, v in d.items()}) if d else BowVector({}))


@given(bow_strategy, bow_strategy)
def test_score_symmetric_and_bounded(a, b):
    s = score(a, b)
    assert abs(s - score(b, a)) < 1e-12
    assert 0.0 <= s <= 1.0


def test_top1_score_degrades_with_bit_flips(places):
    descs, voc = places
    idx = KeyframeIndex(voc)
    for i, d in enumerate(descs):
        idx.add_keyframe(i, d)
    rng = np.random.default_rng(0)
    means = []
    for p in (0.0, 0.05, 0.15):
        tops = []
        for trial in range(100):
            res = idx.query(flip_bits(descs[trial % 100], p, rng), top_k=1)
            tops.append(res[0][1] if res else 0.0)
        means.append(np.mean(tops))
    assert means[0] >= means[1] >= means[2]


def test_match_descriptors_recovers_permutation(rng):
    train = random_desc(rng, 40)
    perm = rng.permutation(40)
    query = flip_bits(train[perm], 0.03, rng)
    iq, it = match_descriptors(query, train)
    assert len(iq) >= 35
    assert np.array_equal(it, perm[iq])
    e = match_descriptors(np.zeros((0, 32), np.uint8), train)
    assert len(e[0]) == 0
