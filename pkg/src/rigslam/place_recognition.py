"""Loop detection over keyframes and loop correction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, diags
from scipy.sparse.linalg import spsolve

from . import mapping
from . import optimizer as opt
from . import se3
from .bundled import TAU_DESC
from .descriptors import hamming_matrix
from .errors import LoopRejected, TooFewMatches
from .rig import RigPose
from .vocabulary import bow_from_counts, similarity, word_counts

LOOP_MIN_INLIERS = 20


class KeyframeDatabase:
    """Inverted index word -> keyframe ids, with tf-idf over the stored keyframes."""

    def __init__(self, vocabulary):
        self.vocabulary = vocabulary
        self.index = {}
        self.counts = {}
        self._idf = None

    def __len__(self):
        return len(self.counts)

    def __contains__(self, kf_id):
        return kf_id in self.counts

    def add(self, kf_id, counts):
        if kf_id in self.counts:
            self.remove(kf_id)
        self.counts[kf_id] = dict(counts)
        for w in counts:
            self.index.setdefault(w, []).append(kf_id)
        self._idf = None

    def add_keyframe(self, kf):
        if not kf.bow_counts:
            kf.bow_counts = word_counts(self.vocabulary, kf.frame)
        self.add(kf.id, kf.bow_counts)

    def remove(self, kf_id):
        for w in self.counts.pop(kf_id, {}):
            lst = self.index[w]
            lst.remove(kf_id)
            if not lst:
                del self.index[w]
        self._idf = None

    def idf(self):
        """ln((1 + N) / (1 + n_w)) + 1, recomputed only after the database changes."""
        if self._idf is None:
            n = len(self.counts)
            df = np.zeros(self.vocabulary.n_words)
            for w, lst in self.index.items():
                df[w] = len(lst)
            self._idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
        return self._idf

    def vector(self, kf_id=None, counts=None):
        return bow_from_counts(self.counts[kf_id] if counts is None else counts, self.idf())

    def candidates(self, counts):
        """Keyframe ids sharing at least one word with ``counts``."""
        out = set()
        for w in counts:
            out.update(self.index.get(w, ()))
        return out

    def check_consistency(self):
        for w, lst in self.index.items():
            for k in lst:
                assert w in self.counts[k]
        for k, c in self.counts.items():
            for w in c:
                assert k in self.index[w]


@dataclass
class LoopDetector:
    """Similarity gate plus temporal persistence.

    A candidate must beat the query's weakest covisible neighbour and be the
    best candidate (up to covisibility) for ``persistence`` consecutive queries.
    """

    window: int = 10
    persistence: int = 3
    min_score: float = 0.0
    history: list = field(default_factory=list)   # [(group set, count)]
    last_scores: dict = field(default_factory=dict)

    def detect(self, bmap, db, kf_id):
        kf = bmap.keyframe(kf_id)
        counts = kf.bow_counts if kf.bow_counts else word_counts(db.vocabulary, kf.frame)
        neighbors = bmap.covisibility.neighbors(kf_id)
        self.last_scores = {}
        if not neighbors:
            self.history = []
            return None
        q = db.vector(counts=counts)
        s_min = min(similarity(q, db.vector(counts=bmap.keyframes[n].bow_counts or
                                            word_counts(db.vocabulary, bmap.keyframes[n].frame)))
                    for n in neighbors)
        s_min = max(s_min, self.min_score)
        excluded = {kf_id, *bmap.covisibility.neighbors(kf_id, min_weight=1)}
        recent = sorted(k for k in bmap.keyframes if k < kf_id)[-self.window:]
        excluded.update(recent)
        scored = {}
        for c in db.candidates(counts):
            if c in excluded or c not in bmap.keyframes or c > kf_id:
                continue
            s = similarity(q, db.vector(c))
            if s >= s_min:
                scored[c] = s
        self.last_scores = scored
        if not scored:
            self.history = []
            return None
        best = min(scored, key=lambda c: (-scored[c], c))
        group = {best, *bmap.covisibility.neighbors(best, min_weight=1)}
        count = 1
        for prev_group, prev_count in self.history:
            if group & prev_group:
                count = max(count, prev_count + 1)
        self.history = [(group, count)]
        if count >= self.persistence:
            self.history = []
            return best
        return None


def detect_loop(bmap, db, kf_id, detector):
    return detector.detect(bmap, db, kf_id)


# --- pose graph ---------------------------------------------------------------------------

def pose_graph_edges(bmap, loop_edges=()):
    """Covisibility edges (weight >= theta) with their current relative poses, plus loops.

    Each edge is ``(a, b, T_ab)`` with ``T_ab = T_a ∘ T_b^-1``.
    """
    edges = []
    for (a, b) in sorted(bmap.covisibility.edges()):
        ta, tb = bmap.keyframes[a].pose.c1, bmap.keyframes[b].pose.c1
        edges.append((a, b, se3.compose(ta, tb.inverse())))
    edges.extend(loop_edges)
    return edges


def edge_residual(t_ab, ta, tb):
    return se3.log_se3(se3.compose(t_ab.inverse(), se3.compose(ta, tb.inverse())))


def _ad(xi):
    """Small adjoint of a ``[w, rho]`` twist."""
    out = np.zeros((6, 6))
    out[:3, :3] = se3.skew(xi[:3])
    out[3:, 3:] = out[:3, :3]
    out[3:, :3] = se3.skew(xi[3:])
    return out


def _graph_cost(poses, edges, w):
    res = [w[n] * edge_residual(t, poses[a], poses[b]) for n, (a, b, t) in enumerate(edges)]
    return 0.5 * float(sum(r @ r for r in res)), res


def optimize_pose_graph(poses, edges, fixed=(0,), max_iterations=50, loop_weight=1.0, n_loop=0,
                        tol=1e-12):
    """Left-perturbation SE(3) pose graph solved by sparse Levenberg-Marquardt.

    ``poses`` maps id -> RigidTransform. Returns ``(poses, cost before, cost after)``;
    fixed poses are returned as the same objects.
    """
    ids = [k for k in sorted(poses) if k not in fixed]
    slot = {k: n for n, k in enumerate(ids)}
    cur = dict(poses)
    if not ids or not edges:
        return cur, 0.0, 0.0
    w = np.ones(len(edges))
    if n_loop:
        w[-n_loop:] = loop_weight
    cost, res = _graph_cost(cur, edges, w)
    c0 = cost
    lam = 1e-4
    dim = 6 * len(ids)
    for _ in range(max_iterations):
        if cost == 0.0:
            break
        rows, cols, vals = [], [], []
        g = np.zeros(dim)
        for n, (a, b, t_ab) in enumerate(edges):
            r = res[n] / w[n]
            e = se3.compose(t_ab.inverse(), se3.compose(cur[a], cur[b].inverse()))
            jl = np.eye(6) - 0.5 * _ad(r)
            blocks = []
            if a in slot:
                blocks.append((slot[a], w[n] * jl @ se3.adjoint(t_ab.inverse())))
            if b in slot:
                blocks.append((slot[b], -w[n] * jl @ se3.adjoint(e)))
            for i, ji in blocks:
                g[6 * i:6 * i + 6] += ji.T @ res[n]
                for j, jj in blocks:
                    rr, cc = np.meshgrid(np.arange(6 * i, 6 * i + 6), np.arange(6 * j, 6 * j + 6), indexing="ij")
                    rows.append(rr.ravel())
                    cols.append(cc.ravel())
                    vals.append((ji.T @ jj).ravel())
        h = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(dim, dim)).tocsc()
        diag = h.diagonal()
        improved = False
        while lam < 1e10:
            step = spsolve(h + diags(lam * np.maximum(diag, 1e-9)), -g)
            trial = dict(cur)
            for k, i in slot.items():
                trial[k] = se3.compose(se3.exp_se3(step[6 * i:6 * i + 6]), cur[k])
            t_cost, t_res = _graph_cost(trial, edges, w)
            if np.isfinite(t_cost) and t_cost < cost:
                improved = True
                done = cost - t_cost <= tol * cost or np.abs(step).max() < tol
                cur, cost, res = trial, t_cost, t_res
                lam = max(lam * 0.5, 1e-12)
                break
            lam *= 10.0
        if not improved or done:
            break
    return cur, c0, cost


# --- loop closing -------------------------------------------------------------------------

@dataclass
class LoopReport:
    query: int
    candidate: int
    inliers: int
    correction: se3.RigidTransform
    merged: int = 0
    graph_cost_before: float = 0.0
    graph_cost_after: float = 0.0
    ba: object = None


def _loop_matches(bmap, kf_id, cand_points, tau):
    """Descriptor matches (cam, idx, pid) between the query's features and candidate points."""
    kf = bmap.keyframe(kf_id)
    if not cand_points:
        return []
    desc = np.array([bmap.points[p].descriptor for p in cand_points])
    out = []
    for cam, feats in enumerate(kf.frame.cameras):
        if len(feats) == 0:
            continue
        d = hamming_matrix(feats.descriptors, desc)
        bb = np.argmin(d, axis=1)
        ba = np.argmin(d, axis=0)
        for i in range(len(feats)):
            j = bb[i]
            if d[i, j] <= tau and ba[j] == i:
                out.append((cam, i, cand_points[j]))
    return out


def _initial_correction(bmap, kf_id, matches):
    """Rigid map-to-map alignment from query points to their candidate counterparts."""
    kf = bmap.keyframe(kf_id)
    src, dst = [], []
    for cam, idx, pid in matches:
        own = int(kf.point_ids[cam][idx])
        if own >= 0 and own != pid:
            src.append(bmap.points[own].position)
            dst.append(bmap.points[pid].position)
    if len(src) < 3:
        return None
    src, dst = np.array(src), np.array(dst)
    keep = np.ones(len(src), bool)
    g = None
    for _ in range(4):
        if keep.sum() < 3:
            return g
        g, _ = se3.fit_rigid(src[keep], dst[keep])
        err = np.linalg.norm(se3.act(g, src) - dst, axis=1)
        keep = err <= max(3.0 * np.median(err[keep]), 1e-9)
    return g


def close_loop(bmap, kf_id, cand_id, rig, tau_desc=TAU_DESC, min_inliers=LOOP_MIN_INLIERS,
               ba_iterations=15):
    """Correct the map for a detected loop between ``kf_id`` and ``cand_id``.

    Steps: relative pose by motion-only BA against the candidate's local
    points; SE(3) pose graph over covisibility edges plus the loop edge;
    duplicate point fusion; global BA. Raises LoopRejected (map untouched) when
    the relative pose has too few inliers.
    """
    kf = bmap.keyframe(kf_id)
    bmap.keyframe(cand_id)
    cand_kfs = [cand_id] + bmap.covisibility.neighbors(cand_id, min_weight=1)
    cand_kfs = [k for k in cand_kfs if k != kf_id and k not in bmap.covisibility.neighbors(kf_id, min_weight=1)]
    cand_points = sorted(set().union(*(bmap.keyframe_points(k) for k in cand_kfs)) - bmap.keyframe_points(kf_id))
    matches = _loop_matches(bmap, kf_id, cand_points, tau_desc)
    if len(matches) < min_inliers:
        raise LoopRejected(f"{len(matches)} putative matches between {kf_id} and {cand_id}")

    g = _initial_correction(bmap, kf_id, matches)
    c1_old = kf.pose.c1
    start = c1_old if g is None else se3.compose(c1_old, g.inverse())
    points = {pid: bmap.points[pid].position for _, _, pid in matches}
    obs = [opt.Observation("frame", cam, pid, kf.frame.cameras[cam].pixels[idx], rig.information(cam))
           for cam, idx, pid in matches]
    problem = opt.BaProblem(rig, {"frame": start}, points, obs, set(), set(points), tier="loop")
    try:
        poses, _, inliers, _ = opt.solve_with_outlier_rounds(problem, rounds=4)
    except TooFewMatches:
        inliers = np.zeros(len(obs), bool)
    n_in = int(inliers.sum())
    if n_in < min_inliers:
        raise LoopRejected(f"{n_in} inliers for loop {kf_id} -> {cand_id}")
    c1_new = poses["frame"]

    # pose graph
    old_poses = {k: v.pose.c1 for k, v in bmap.keyframes.items()}
    loop_edge = (kf_id, cand_id, se3.compose(c1_new, old_poses[cand_id].inverse()))
    edges = pose_graph_edges(bmap, [loop_edge])
    origin = 0 if 0 in bmap.keyframes else min(bmap.keyframes)
    new_poses, c0, c1 = optimize_pose_graph(old_poses, edges, fixed=(origin,), n_loop=1,
                                            loop_weight=10.0)
    for k, t in new_poses.items():
        if k != origin:
            old = bmap.keyframes[k].pose
            bmap.keyframes[k].pose = RigPose(t, old.timestamp)
    # points follow their reference keyframe
    for mp in bmap.points.values():
        ref = mp.reference_kf if mp.reference_kf in old_poses else min(mp.keyframes())
        if ref == origin:
            continue
        world_to_ref = old_poses[ref]
        mp.position = se3.act(new_poses[ref].inverse(), se3.act(world_to_ref, mp.position))

    # fuse duplicates across the loop
    merged = 0
    query_side = [kf_id] + bmap.covisibility.neighbors(kf_id, min_weight=1)
    for k in query_side:
        if k in bmap.keyframes:
            live = [p for p in cand_points if p in bmap.points]
            merged += mapping.fuse_into(bmap, k, live, rig)
    ba = mapping.global_bundle_adjustment(bmap, rig, iterations=ba_iterations)
    correction = se3.compose(bmap.keyframes[kf_id].pose.c1, c1_old.inverse())
    return LoopReport(kf_id, cand_id, n_in, correction, merged, c0, c1, ba)
