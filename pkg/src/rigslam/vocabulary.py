"""Hierarchical binary vocabulary and bag-of-words vectors.

Nodes are stored breadth-first in flat arrays. Node 0 is the root and has
no centre; every other node holds a 256-bit centre. A node with no children
is a leaf and carries a word id.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .descriptors import N_BYTES, hamming_matrix, majority
from .errors import InsufficientData

VOCAB_FORMAT_VERSION = 1


@dataclass
class Vocabulary:
    k: int
    depth: int
    centers: np.ndarray          # (n_nodes, 32) uint8; row 0 unused
    children: np.ndarray         # (n_nodes, k) int64, -1 padded
    words: np.ndarray            # (n_nodes,) int64 word id or -1 for inner nodes
    idf: np.ndarray = None       # (n_words,) float

    def __post_init__(self):
        if self.idf is None:
            self.idf = np.ones(self.n_words)

    @property
    def n_words(self):
        return int((self.words >= 0).sum())

    @property
    def n_nodes(self):
        return len(self.words)

    def word_nodes(self):
        out = np.empty(self.n_words, dtype=np.int64)
        leaf = np.flatnonzero(self.words >= 0)
        out[self.words[leaf]] = leaf
        return out

    def transform(self, descriptors):
        return quantize_descriptors(self, descriptors)

    def save(self, path):
        save_vocabulary(self, path)

    @classmethod
    def load(cls, path):
        return load_vocabulary(path)


def _kmedians(descs, k, rng, iters=100):
    """Binary k-medians: k-means++ seeding, Hamming assignment, majority centres."""
    n = len(descs)
    first = int(rng.integers(n))
    centers = [descs[first]]
    d = hamming_matrix(descs, descs[first:first + 1])[:, 0].astype(float)
    for _ in range(1, k):
        w = d * d
        if w.sum() == 0:
            break
        nxt = int(rng.choice(n, p=w / w.sum()))
        centers.append(descs[nxt])
        d = np.minimum(d, hamming_matrix(descs, descs[nxt:nxt + 1])[:, 0])
    centers = np.array(centers)
    assign = None
    for _ in range(iters):
        new = np.argmin(hamming_matrix(descs, centers), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(len(centers)):
            members = descs[assign == c]
            if len(members):
                centers[c] = majority(members)
    # drop empty clusters so every leaf is reachable
    used = np.unique(assign)
    remap = np.full(len(centers), -1)
    remap[used] = np.arange(len(used))
    return centers[used], remap[assign]


def train_vocabulary(descriptors, k=10, depth=3, seed=0, iters=100, return_assignment=False):
    """Hierarchical k-medians tree under Hamming distance.

    With ``return_assignment`` the word each training descriptor ended up in
    during clustering is returned as well.
    """
    if k < 2 or depth < 1:
        raise ValueError("need k >= 2 and depth >= 1")
    descs = np.asarray(descriptors, dtype=np.uint8).reshape(-1, N_BYTES)
    if len(descs) < k:
        raise InsufficientData(f"{len(descs)} descriptors for branching factor {k}")
    rng = np.random.default_rng(seed)
    centers = [np.zeros(N_BYTES, np.uint8)]
    children = [[]]
    level_of = [0]
    queue = [(0, np.arange(len(descs)))]
    members_of = {}
    while queue:
        node, idx = queue.pop(0)
        if level_of[node] == depth or len(idx) < k:
            members_of[node] = idx
            continue
        sub, assign = _kmedians(descs[idx], k, rng, iters)
        if len(sub) < 2:
            members_of[node] = idx
            continue
        for c in range(len(sub)):
            child = len(centers)
            centers.append(sub[c])
            children.append([])
            level_of.append(level_of[node] + 1)
            children[node].append(child)
            queue.append((child, idx[assign == c]))
    n = len(centers)
    child_arr = np.full((n, k), -1, dtype=np.int64)
    for i, ch in enumerate(children):
        child_arr[i, :len(ch)] = ch
    words = np.full(n, -1, dtype=np.int64)
    leaves = [i for i in range(n) if not children[i]]
    words[leaves] = np.arange(len(leaves))
    vocab = Vocabulary(k, depth, np.array(centers, dtype=np.uint8), child_arr, words)
    if not return_assignment:
        return vocab
    assignment = np.empty(len(descs), dtype=np.int64)
    for node, idx in members_of.items():
        assignment[idx] = words[node]
    return vocab, assignment


def quantize_descriptors(vocab, descriptors):
    """Greedy tree descent; returns (word ids, distance to the leaf centre)."""
    d = np.asarray(descriptors, dtype=np.uint8).reshape(-1, N_BYTES)
    node = np.zeros(len(d), dtype=np.int64)
    if len(d) == 0:
        return node, node.copy()
    dist = np.zeros(len(d), dtype=np.int64)
    words_d = d.view(np.uint64)
    cw = vocab.centers.view(np.uint64)
    while True:
        ch = vocab.children[node]                      # (n, k)
        active = ch[:, 0] >= 0
        if not active.any():
            break
        a = np.flatnonzero(active)
        cha = ch[a]
        x = np.bitwise_xor(words_d[a][:, None, :], cw[np.maximum(cha, 0)])
        dd = np.bitwise_count(x).sum(axis=-1, dtype=np.int64)
        dd[cha < 0] = np.iinfo(np.int64).max
        best = np.argmin(dd, axis=1)
        node[a] = cha[np.arange(len(a)), best]
        dist[a] = dd[np.arange(len(a)), best]
    return vocab.words[node], dist


def nearest_word_bruteforce(vocab, descriptors):
    """Flat nearest-leaf search; the oracle for the greedy descent."""
    nodes = vocab.word_nodes()
    dm = hamming_matrix(descriptors, vocab.centers[nodes])
    return np.argmin(dm, axis=1), dm.min(axis=1)


def set_idf_from_documents(vocab, documents):
    """idf_w = ln(N / n_w) over training documents (lists of descriptors)."""
    n_docs = len(documents)
    counts = np.zeros(vocab.n_words)
    for doc in documents:
        w, _ = quantize_descriptors(vocab, doc)
        counts[np.unique(w)] += 1
    vocab.idf = np.where(counts > 0, np.log(n_docs / np.maximum(counts, 1)), math.log(max(n_docs, 1)))
    return vocab


# --- bag-of-words vectors ---------------------------------------------------------

@dataclass
class BowVector:
    weights: dict = field(default_factory=dict)   # word -> weight

    def __len__(self):
        return len(self.weights)

    def l1(self):
        return sum(abs(v) for v in self.weights.values())


def keyframe_descriptors(frame):
    """One representative descriptor per unique feature id."""
    if not frame.uid_table:
        descs = [c.descriptors for c in frame.cameras]
        return np.concatenate(descs) if descs else np.zeros((0, N_BYTES), np.uint8)
    out = np.empty((len(frame.uid_table), N_BYTES), dtype=np.uint8)
    for n, uid in enumerate(sorted(frame.uid_table)):
        cam, idx = frame.representative(uid)
        out[n] = frame.cameras[cam].descriptors[idx]
    return out


def word_counts(vocab, frame):
    words, _ = quantize_descriptors(vocab, keyframe_descriptors(frame))
    u, c = np.unique(words, return_counts=True)
    return {int(w): int(n) for w, n in zip(u, c)}


def bow_from_counts(counts, idf):
    """tf-idf weights, L1 normalised."""
    total = sum(counts.values())
    if total == 0:
        return BowVector()
    raw = {w: (n / total) * float(idf[w]) for w, n in counts.items()}
    norm = sum(abs(v) for v in raw.values())
    if norm == 0:
        return BowVector()
    return BowVector({w: v / norm for w, v in sorted(raw.items()) if v != 0})


def quantize(vocab, keyframe, idf=None):
    """BowVector of a keyframe (or BundledFrame) using ``idf`` or the vocabulary's table."""
    frame = getattr(keyframe, "frame", keyframe)
    return bow_from_counts(word_counts(vocab, frame), vocab.idf if idf is None else idf)


def similarity(a, b):
    """L1 score 1 - |a - b|_1 / 2 of two normalised vectors."""
    if not a.weights or not b.weights:
        return 0.0
    diff = 0.0
    for w in a.weights.keys() | b.weights.keys():
        diff += abs(a.weights.get(w, 0.0) - b.weights.get(w, 0.0))
    return min(max(1.0 - 0.5 * diff, 0.0), 1.0)


# --- persistence -------------------------------------------------------------------
#
# ``.npz`` holding:
#   centers  (n_nodes, 32) uint8
#   children (n_nodes, k)  int64, -1 padded
#   words    (n_nodes,)    int64, -1 for inner nodes
#   idf      (n_words,)    float64
#   meta     JSON string {"format": 1, "k": k, "depth": L}

def save_vocabulary(vocab, path):
    meta = json.dumps({"format": VOCAB_FORMAT_VERSION, "k": vocab.k, "depth": vocab.depth})
    with open(path, "wb") as fh:
        np.savez(fh, centers=vocab.centers, children=vocab.children, words=vocab.words,
                 idf=vocab.idf, meta=np.array(meta))


def load_vocabulary(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != VOCAB_FORMAT_VERSION:
            raise ValueError(f"unsupported vocabulary format {meta.get('format')}")
        return Vocabulary(meta["k"], meta["depth"], z["centers"].copy(), z["children"].copy(),
                          z["words"].copy(), z["idf"].copy())
