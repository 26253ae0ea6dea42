"""Bag-of-words place recognition over 256-bit binary descriptors.

A vocabulary tree is trained offline by hierarchical k-medoids under the
Hamming distance. Keyframes are stored as L1-normalized TF-IDF vectors in an
inverted index; queries score candidates with ``1 - 0.5 * |v_q - v_d|_1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from vislam.errors import DuplicateId, FormatError, InsufficientSample

VOCAB_MAGIC = b"VSLBOW01"
DESC_BYTES = 32


def hamming(a, b):
    """Hamming distance between packed descriptors, broadcasting over leading axes."""
    return np.bitwise_count(np.bitwise_xor(a, b)).sum(axis=-1, dtype=np.int64)


def hamming_matrix(a, b):
    a = np.asarray(a, np.uint8).reshape(-1, DESC_BYTES)
    b = np.asarray(b, np.uint8).reshape(-1, DESC_BYTES)
    return hamming(a[:, None, :], b[None, :, :])


# ---------------------------------------------------------------------------
# vocabulary

@dataclass
class Vocabulary:
    """Vocabulary tree stored as flat node arrays.

    ``children[n]`` lists child node indices of node n (``-1`` padded to k);
    ``word_of[n]`` is the word id of leaf nodes and -1 for internal ones.
    Node 0 is the root and has no center.
    """

    k: int
    L: int
    centers: np.ndarray     # (n_nodes, 32) uint8
    children: np.ndarray    # (n_nodes, k) int32
    word_of: np.ndarray     # (n_nodes,) int32
    idf: np.ndarray         # (n_words,) float64

    @property
    def n_words(self):
        return len(self.idf)

    def transform(self, descriptors):
        """Word id of every descriptor (n,)."""
        d = np.asarray(descriptors, np.uint8).reshape(-1, DESC_BYTES)
        node = np.zeros(len(d), dtype=np.int64)
        for _ in range(self.L + 1):
            ch = self.children[node]                      # (n, k)
            active = ch[:, 0] >= 0
            if not active.any():
                break
            idx = np.flatnonzero(active)
            chi = ch[idx]
            dist = hamming(d[idx, None, :], self.centers[np.maximum(chi, 0)])
            dist = np.where(chi >= 0, dist, np.iinfo(np.int64).max)
            node[idx] = chi[np.arange(len(idx)), np.argmin(dist, axis=1)]
        return self.word_of[node].astype(np.int64)

    def bow(self, descriptors) -> "BowVector":
        d = np.asarray(descriptors, np.uint8).reshape(-1, DESC_BYTES)
        if len(d) == 0:
            return BowVector({})
        words, counts = np.unique(self.transform(d), return_counts=True)
        w = counts / len(d) * self.idf[words]
        total = w.sum()
        if total <= 0:
            return BowVector({})
        return BowVector({int(a): float(b) for a, b in zip(words, w / total) if b > 0})

    # -- serialization ------------------------------------------------------

    def save(self, path):
        """Binary layout (little-endian): magic[8], k u32, L u32, n_nodes u32,
        n_words u32, centers u8[n_nodes*32], children i32[n_nodes*k],
        word_of i32[n_nodes], idf f64[n_words]."""
        with open(path, "wb") as fh:
            fh.write(VOCAB_MAGIC)
            fh.write(struct.pack("<4I", self.k, self.L, len(self.centers), self.n_words))
            fh.write(np.ascontiguousarray(self.centers, np.uint8).tobytes())
            fh.write(np.ascontiguousarray(self.children, "<i4").tobytes())
            fh.write(np.ascontiguousarray(self.word_of, "<i4").tobytes())
            fh.write(np.ascontiguousarray(self.idf, "<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != VOCAB_MAGIC:
            raise FormatError(f"{path}: not a vocabulary file")
        k, L, n_nodes, n_words = struct.unpack_from("<4I", data, 8)
        off = 24
        sizes = [n_nodes * DESC_BYTES, 4 * n_nodes * k, 4 * n_nodes, 8 * n_words]
        if len(data) != off + sum(sizes):
            raise FormatError(f"{path}: truncated vocabulary")
        centers = np.frombuffer(data, np.uint8, n_nodes * DESC_BYTES, off).reshape(n_nodes, DESC_BYTES).copy()
        off += sizes[0]
        children = np.frombuffer(data, "<i4", n_nodes * k, off).reshape(n_nodes, k).astype(np.int32)
        off += sizes[1]
        word_of = np.frombuffer(data, "<i4", n_nodes, off).astype(np.int32)
        off += sizes[2]
        idf = np.frombuffer(data, "<f8", n_words, off).astype(float)
        return cls(k, L, centers, children, word_of, idf)


def _kmedoids(d, k, rng, iters=6, max_candidates=64, max_eval=512):
    """Hamming k-medoids with k-means++ seeding; returns (medoids, labels)."""
    n = len(d)
    first = int(rng.integers(n))
    med = [first]
    dmin = hamming(d, d[first][None]).astype(float)
    for _ in range(1, k):
        tot = dmin.sum()
        if tot <= 0:
            break
        nxt = int(rng.choice(n, p=dmin / tot))
        med.append(nxt)
        dmin = np.minimum(dmin, hamming(d, d[nxt][None]))
    centers = d[med].copy()
    labels = np.argmin(hamming(d[:, None, :], centers[None]), axis=1)
    for _ in range(iters):
        new_centers = centers.copy()
        for c in range(len(centers)):
            members = np.flatnonzero(labels == c)
            if len(members) == 0:
                continue
            cand = members if len(members) <= max_candidates else rng.choice(members, max_candidates, replace=False)
            ev = members if len(members) <= max_eval else rng.choice(members, max_eval, replace=False)
            cost = hamming_matrix(d[cand], d[ev]).sum(axis=1)
            new_centers[c] = d[cand[int(np.argmin(cost))]]
        new_labels = np.argmin(hamming(d[:, None, :], new_centers[None]), axis=1)
        if np.array_equal(new_centers, centers) and np.array_equal(new_labels, labels):
            break
        centers, labels = new_centers, new_labels
    return centers, labels


def build_vocabulary(descriptors, k=32, L=2, seed=0) -> Vocabulary:
    """Hierarchical k-medoids vocabulary, deterministic given ``seed``.

    A node becomes a leaf at depth ``L`` or when its cluster has fewer than
    two distinct descriptors. Clusters that end up empty get no child node.
    IDF of a word is ``log(N / n_w)`` over the N training descriptors.
    """
    d = np.asarray(descriptors, np.uint8).reshape(-1, DESC_BYTES)
    if k < 2 or L < 1:
        raise InsufficientSample("need k >= 2 and L >= 1")
    if len(d) < k**L:
        raise InsufficientSample(f"sample of {len(d)} descriptors is smaller than k^L = {k**L}")
    rng = np.random.default_rng(seed)
    centers = [np.zeros(DESC_BYTES, np.uint8)]
    children = [[]]
    members = [np.arange(len(d))]
    depth = [0]
    queue = [0]
    while queue:
        node = queue.pop(0)
        idx = members[node]
        if depth[node] >= L or len(np.unique(d[idx], axis=0)) < 2:
            continue
        cen, lab = _kmedoids(d[idx], k, rng)
        for c in range(len(cen)):
            sub = idx[lab == c]
            if len(sub) == 0:
                continue
            centers.append(cen[c])
            children.append([])
            members.append(sub)
            depth.append(depth[node] + 1)
            children[node].append(len(centers) - 1)
            queue.append(len(centers) - 1)
    n_nodes = len(centers)
    ch = np.full((n_nodes, k), -1, dtype=np.int32)
    word_of = np.full(n_nodes, -1, dtype=np.int32)
    counts = []
    for n in range(n_nodes):
        ch[n, :len(children[n])] = children[n]
        if not children[n]:
            word_of[n] = len(counts)
            counts.append(len(members[n]))
    idf = np.log(len(d) / np.asarray(counts, float))
    return Vocabulary(k, L, np.stack(centers), ch, word_of, np.maximum(idf, 0.0))


# ---------------------------------------------------------------------------
# bag-of-words vectors and index

@dataclass
class BowVector:
    weights: dict = field(default_factory=dict)   # word id -> weight

    def __len__(self):
        return len(self.weights)

    @property
    def total(self):
        return float(sum(self.weights.values()))


def score(a: BowVector, b: BowVector) -> float:
    """``1 - 0.5 * |a - b|_1``; zero if either vector is empty."""
    if not a.weights or not b.weights:
        return 0.0
    keys = set(a.weights) | set(b.weights)
    l1 = sum(abs(a.weights.get(w, 0.0) - b.weights.get(w, 0.0)) for w in keys)
    return float(min(1.0, max(0.0, 1.0 - 0.5 * l1)))


@dataclass
class _Entry:
    bow: BowVector
    landmarks: frozenset


class KeyframeIndex:
    """Inverted index of keyframe BoW vectors with landmark-sharing exclusion."""

    def __init__(self, vocabulary: Vocabulary):
        self.vocabulary = vocabulary
        self.inverted = {}     # word -> list of keyframe ids
        self.store = {}        # keyframe id -> _Entry

    def __len__(self):
        return len(self.store)

    def __contains__(self, kid):
        return kid in self.store

    def add_keyframe(self, kid, descriptors, landmark_ids=()):
        if kid in self.store:
            raise DuplicateId(f"keyframe {kid} already indexed")
        bow = self.vocabulary.bow(descriptors)
        self.store[kid] = _Entry(bow, frozenset(landmark_ids))
        for w in bow.weights:
            self.inverted.setdefault(w, []).append(kid)
        return bow

    def query(self, descriptors, landmark_ids=(), top_k=5, min_score=0.0, exclude=None):
        """Ranked ``[(keyframe id, score)]``, best first, ties by lower id.

        Candidates must share at least one word with the query; candidates
        sharing any landmark id with it, or listed in ``exclude``, are skipped.
        """
        q = self.vocabulary.bow(descriptors)
        return self.query_bow(q, landmark_ids, top_k, min_score, exclude)

    def query_bow(self, q: BowVector, landmark_ids=(), top_k=5, min_score=0.0, exclude=None):
        lms = frozenset(landmark_ids)
        cands = set()
        for w in q.weights:
            cands.update(self.inverted.get(w, ()))
        out = []
        for kid in cands:
            if exclude is not None and kid in exclude:
                continue
            e = self.store[kid]
            if lms and not lms.isdisjoint(e.landmarks):
                continue
            s = score(q, e.bow)
            if s >= min_score:
                out.append((kid, s))
        out.sort(key=lambda x: (-x[1], x[0]))
        return out[:top_k] if top_k is not None else out


def match_descriptors(query, train, max_distance=64, ratio=0.8):
    """Mutual nearest-neighbour Hamming matches with a ratio test; returns (iq, it) index arrays."""
    q = np.asarray(query, np.uint8).reshape(-1, DESC_BYTES)
    t = np.asarray(train, np.uint8).reshape(-1, DESC_BYTES)
    if len(q) == 0 or len(t) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    d = hamming_matrix(q, t)
    best = np.argmin(d, axis=1)
    bd = d[np.arange(len(q)), best]
    if d.shape[1] > 1:
        second = np.partition(d, 1, axis=1)[:, 1]
    else:
        second = np.full(len(q), np.iinfo(np.int64).max)
    back = np.argmin(d, axis=0)
    ok = (bd <= max_distance) & (bd < ratio * second) & (back[best] == np.arange(len(q)))
    iq = np.flatnonzero(ok)
    return iq, best[iq]
