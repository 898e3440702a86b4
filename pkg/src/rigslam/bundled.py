"""Bundled frames, keyframes, map points and the covisibility graph.

A BundledFrame holds the features of every rig camera at one instant. Features
seen by several cameras share one unique id ("matched"); the rest carry a
unique id of their own ("monocular"), so

    n_unique == n_monocular + n_matched

holds after every call to :func:`bundle_features`.
"""
from __future__ import annotations

import io
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import se3
from .descriptors import N_BYTES, hamming_matrix
from .errors import IndexOutOfRange, UnknownId
from .rig import RigPose
from .se3 import RigidTransform

GRID_COLS = 64
GRID_ROWS = 48
TAU_DESC = 50
THETA_COV = 15
MAP_FORMAT_VERSION = 1


class Feature(NamedTuple):
    camera_id: int
    pixel: np.ndarray
    descriptor: np.ndarray
    unique_id: int


class FeatureGrid:
    """64x48 bucket grid over one camera image, stored CSR-style."""

    def __init__(self, pixels, width, height):
        self.width = width
        self.height = height
        px = np.asarray(pixels, dtype=float).reshape(-1, 2)
        self.cells = cell_of(px, width, height)
        flat = self.cells[:, 1] * GRID_COLS + self.cells[:, 0]
        self.order = np.argsort(flat, kind="stable")
        self.starts = np.searchsorted(flat[self.order], np.arange(GRID_COLS * GRID_ROWS + 1))

    def cell_members(self, col, row):
        k = row * GRID_COLS + col
        return self.order[self.starts[k]:self.starts[k + 1]]

    def candidates(self, center, r):
        """Indices of features in cells intersecting the disc."""
        cx, cy = center
        c0, c1 = _cell_range(cx - r, cx + r, self.width, GRID_COLS)
        r0, r1 = _cell_range(cy - r, cy + r, self.height, GRID_ROWS)
        if c0 > c1 or r0 > r1:
            return np.empty(0, dtype=np.int64)
        parts = [self.order[self.starts[row * GRID_COLS + c0]:self.starts[row * GRID_COLS + c1 + 1]]
                 for row in range(r0, r1 + 1)]
        return np.concatenate(parts)


def _cell_range(lo, hi, size, n):
    a = int(np.floor(n * lo / size))
    b = int(np.floor(n * hi / size))
    return max(a, 0), min(b, n - 1)


def cell_of(pixels, width, height):
    """(col, row) grid cell of each pixel, clamped to the grid."""
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    col = np.clip(np.floor(GRID_COLS * px[:, 0] / width), 0, GRID_COLS - 1).astype(np.int64)
    row = np.clip(np.floor(GRID_ROWS * px[:, 1] / height), 0, GRID_ROWS - 1).astype(np.int64)
    return np.stack([col, row], axis=1)


@dataclass
class CameraFeatures:
    pixels: np.ndarray
    descriptors: np.ndarray
    unique_ids: np.ndarray = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.uint8).reshape(-1, N_BYTES)
        if len(self.pixels) != len(self.descriptors):
            raise ValueError("pixels and descriptors differ in length")
        if self.unique_ids is None:
            self.unique_ids = np.full(len(self.pixels), -1, dtype=np.int64)
        else:
            self.unique_ids = np.asarray(self.unique_ids, dtype=np.int64)

    def __len__(self):
        return len(self.pixels)


@dataclass
class BundledFrame:
    """Synchronised features of all rig cameras at one timestamp."""

    timestamp: float
    cameras: list
    image_sizes: list
    pose: RigPose = None
    grids: list = field(default=None, repr=False)
    uid_table: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.cameras) != len(self.image_sizes):
            raise ValueError("one image size per camera required")
        if self.grids is None:
            assign_to_grid(self)

    @classmethod
    def from_rig(cls, rig, timestamp, pixels, descriptors, pose=None):
        cams = [CameraFeatures(p, d) for p, d in zip(pixels, descriptors)]
        sizes = [(c.width, c.height) for c in rig.intrinsics]
        return cls(timestamp, cams, sizes, pose)

    @property
    def n_cameras(self):
        return len(self.cameras)

    def n_features(self, cam=None):
        if cam is None:
            return sum(len(c) for c in self.cameras)
        return len(self.cameras[cam])

    def feature(self, cam, idx):
        c = self.cameras[cam]
        return Feature(cam, c.pixels[idx], c.descriptors[idx], int(c.unique_ids[idx]))

    def features_in_radius(self, cam, center, r):
        return features_in_radius(self, cam, center, r)

    def monocular_ids(self):
        return [u for u, members in self.uid_table.items() if len(members) == 1]

    def matched_ids(self):
        return [u for u, members in self.uid_table.items() if len(members) >= 2]

    def representative(self, uid):
        """(camera, index) whose descriptor stands for ``uid`` (lowest camera)."""
        return self.uid_table[uid][0]


def assign_to_grid(frame):
    """(Re)build each camera's occupancy grid from feature pixels."""
    frame.grids = [FeatureGrid(c.pixels, w, h) for c, (w, h) in zip(frame.cameras, frame.image_sizes)]
    return frame


def features_in_radius(frame, camera_id, center, r):
    """Indices of features with |pixel - center| <= r, via the grid."""
    if r <= 0:
        raise ValueError("radius must be positive")
    if not 0 <= camera_id < frame.n_cameras:
        raise IndexOutOfRange(f"camera {camera_id}")
    cand = frame.grids[camera_id].candidates(center, r)
    if len(cand) == 0:
        return cand
    d = frame.cameras[camera_id].pixels[cand] - np.asarray(center, dtype=float)
    keep = np.einsum("ij,ij->i", d, d) <= r * r
    return np.sort(cand[keep])


def radius_pairs(frame, camera_id, centers, r):
    """Batched :func:`features_in_radius`.

    Returns ``(query, feature)`` index arrays listing every feature within
    ``r`` of every query centre. Non-finite centres match nothing.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    g = frame.grids[camera_id]
    c = np.asarray(centers, dtype=float).reshape(-1, 2)
    ok = np.all(np.isfinite(c), axis=1)
    cs = np.where(ok[:, None], c, -1e9)
    col0 = np.maximum(np.floor(GRID_COLS * (cs[:, 0] - r) / g.width), 0)
    col1 = np.minimum(np.floor(GRID_COLS * (cs[:, 0] + r) / g.width), GRID_COLS - 1)
    row0 = np.maximum(np.floor(GRID_ROWS * (cs[:, 1] - r) / g.height), 0)
    row1 = np.minimum(np.floor(GRID_ROWS * (cs[:, 1] + r) / g.height), GRID_ROWS - 1)
    ok &= (col0 <= col1) & (row0 <= row1)
    col0, col1, row0 = col0.astype(np.int64), col1.astype(np.int64), row0.astype(np.int64)
    nrows = np.where(ok, row1 - row0 + 1, 0).astype(np.int64)

    q = np.repeat(np.arange(len(c)), nrows)
    row = row0[q] + np.arange(nrows.sum()) - np.repeat(np.cumsum(nrows) - nrows, nrows)
    lo = g.starts[row * GRID_COLS + col0[q]]
    hi = g.starts[row * GRID_COLS + col1[q] + 1]
    n = hi - lo
    qf = np.repeat(q, n)
    pos = np.repeat(lo, n) + np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
    f = g.order[pos]
    d = frame.cameras[camera_id].pixels[f] - c[qf]
    keep = np.einsum("ij,ij->i", d, d) <= r * r
    qf, f = qf[keep], f[keep]
    order = np.lexsort((f, qf))
    return qf[order], f[order]


def fundamental(rig, a, b):
    """F with x_b^T F x_a = 0 for pixels of cameras a and b."""
    t_ba = se3.compose(rig.extrinsics[b], se3.invert(rig.extrinsics[a]))
    e = se3.skew(t_ba.translation) @ t_ba.rotation
    ka = rig.intrinsics[a].matrix()
    kb = rig.intrinsics[b].matrix()
    return np.linalg.inv(kb).T @ e @ np.linalg.inv(ka)


def epipolar_distance(f, xa, xb):
    """Symmetric point-to-epipolar-line distance (mean of both images)."""
    ha = np.column_stack([xa, np.ones(len(xa))])
    hb = np.column_stack([xb, np.ones(len(xb))])
    lb = ha @ f.T        # lines in image b
    la = hb @ f          # lines in image a
    num = np.abs(np.einsum("ij,ij->i", hb, lb))
    db = num / np.maximum(np.hypot(lb[:, 0], lb[:, 1]), 1e-300)
    da = num / np.maximum(np.hypot(la[:, 0], la[:, 1]), 1e-300)
    return 0.5 * (da + db)


@dataclass(frozen=True)
class MatcherSettings:
    tau_desc: int = TAU_DESC
    gate_sigmas: float = 2.0


def bundle_features(frame, rig, settings=MatcherSettings()):
    """Assign unique feature ids across cameras.

    A cross-camera pair is linked when its Hamming distance is within
    ``tau_desc``, it passes the epipolar gate and it is a mutual best match.
    Links are merged with union-find, never joining two features of the same
    camera into one id.
    """
    n_cam = frame.n_cameras
    offsets = np.cumsum([0] + [len(c) for c in frame.cameras])
    parent = np.arange(offsets[-1])
    cams_of = [{cam} for cam in range(n_cam) for _ in range(len(frame.cameras[cam]))]

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    links = []
    for a in range(n_cam):
        for b in range(a + 1, n_cam):
            fa, fb = frame.cameras[a], frame.cameras[b]
            if len(fa) == 0 or len(fb) == 0:
                continue
            dist = hamming_matrix(fa.descriptors, fb.descriptors).astype(float)
            ia, ib = np.nonzero(dist <= settings.tau_desc)
            if len(ia) == 0:
                continue
            sigma = max(rig.sigmas[a], rig.sigmas[b])
            gate = epipolar_distance(fundamental(rig, a, b), fa.pixels[ia], fb.pixels[ib])
            ok = gate < settings.gate_sigmas * sigma
            masked = np.full(dist.shape, np.inf)
            masked[ia[ok], ib[ok]] = dist[ia[ok], ib[ok]]
            best_b = np.argmin(masked, axis=1)
            best_a = np.argmin(masked, axis=0)
            for i in np.nonzero(np.isfinite(masked.min(axis=1)))[0]:
                j = best_b[i]
                if best_a[j] == i:
                    links.append((masked[i, j], offsets[a] + i, offsets[b] + j))

    for _, u, v in sorted(links):
        ru, rv = find(u), find(v)
        if ru == rv or cams_of[ru] & cams_of[rv]:
            continue
        parent[rv] = ru
        cams_of[ru] = cams_of[ru] | cams_of[rv]

    groups = {}
    for cam in range(n_cam):
        for idx in range(len(frame.cameras[cam])):
            groups.setdefault(find(offsets[cam] + idx), []).append((cam, idx))
    frame.uid_table = {}
    for uid, members in enumerate(sorted(groups.values())):
        frame.uid_table[uid] = tuple(members)
        for cam, idx in members:
            frame.cameras[cam].unique_ids[idx] = uid
    return frame


# --- map -------------------------------------------------------------------

@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    observations: dict = field(default_factory=dict)   # (kf_id, cam) -> feature index
    reference_kf: int = -1

    def keyframes(self):
        return {kf for kf, _ in self.observations}

    def n_keyframes(self):
        return len(self.keyframes())


@dataclass
class BundledKeyframe:
    id: int
    frame: BundledFrame
    point_ids: list = field(default=None)    # per camera: (n,) int64, -1 where unassociated
    bow_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.point_ids is None:
            self.point_ids = [np.full(len(c), -1, dtype=np.int64) for c in self.frame.cameras]

    @property
    def pose(self):
        return self.frame.pose

    @pose.setter
    def pose(self, value):
        self.frame.pose = value

    @property
    def timestamp(self):
        return self.frame.timestamp

    def map_point_ids(self):
        ids = set()
        for arr in self.point_ids:
            ids.update(int(p) for p in arr[arr >= 0])
        return ids


class CovisibilityGraph:
    """Shared-point counts between keyframes; edges need ``theta`` shared points."""

    def __init__(self, theta=THETA_COV):
        self.theta = theta
        self.counts = {}

    def _bump(self, a, b, delta):
        for x, y in ((a, b), (b, a)):
            row = self.counts.setdefault(x, {})
            n = row.get(y, 0) + delta
            if n:
                row[y] = n
            else:
                row.pop(y, None)

    def shared(self, a, b):
        return self.counts.get(a, {}).get(b, 0)

    def weight(self, a, b):
        n = self.shared(a, b)
        return n if n >= self.theta else 0

    def neighbors(self, kf, min_weight=None):
        """Covisible keyframes sorted by decreasing weight."""
        th = self.theta if min_weight is None else min_weight
        row = self.counts.get(kf, {})
        return [k for k, n in sorted(row.items(), key=lambda kv: (-kv[1], kv[0])) if n >= th]

    def edges(self):
        return {(a, b): n for a, row in self.counts.items() for b, n in row.items()
                if a < b and n >= self.theta}

    def counts_nonzero(self):
        return {a: dict(row) for a, row in self.counts.items() if row}

    def drop(self, kf):
        for other in list(self.counts.get(kf, {})):
            self.counts[other].pop(kf, None)
        self.counts.pop(kf, None)


class BundledMap:
    """All keyframes, map points and their covisibility graph.

    Mutating methods keep the keyframe <-> point references and the
    covisibility counts consistent; :func:`recompute_covisibility` is the
    from-scratch oracle for the latter.
    """

    def __init__(self, theta_cov=THETA_COV):
        self.keyframes = {}
        self.points = {}
        self.covisibility = CovisibilityGraph(theta_cov)
        self.next_kf_id = 0
        self.next_point_id = 0

    def __repr__(self):
        return f"BundledMap({len(self.keyframes)} keyframes, {len(self.points)} points)"

    def keyframe(self, kf_id):
        try:
            return self.keyframes[kf_id]
        except KeyError:
            raise UnknownId(f"keyframe {kf_id}") from None

    def point(self, pid):
        try:
            return self.points[pid]
        except KeyError:
            raise UnknownId(f"map point {pid}") from None

    def insert_keyframe(self, frame):
        kf = BundledKeyframe(self.next_kf_id, frame)
        self.keyframes[kf.id] = kf
        self.covisibility.counts.setdefault(kf.id, {})
        self.next_kf_id += 1
        return kf.id

    def add_point(self, position, descriptor, reference_kf=-1):
        pid = self.next_point_id
        self.points[pid] = MapPoint(pid, np.array(position, dtype=float),
                                    np.array(descriptor, dtype=np.uint8), {}, reference_kf)
        self.next_point_id += 1
        return pid

    def add_observation(self, pid, kf_id, cam, idx):
        mp = self.point(pid)
        kf = self.keyframe(kf_id)
        if not 0 <= cam < len(kf.point_ids) or not 0 <= idx < len(kf.point_ids[cam]):
            raise UnknownId(f"feature ({cam}, {idx}) of keyframe {kf_id}")
        if (kf_id, cam) in mp.observations:
            raise ValueError(f"point {pid} already observed by camera {cam} of keyframe {kf_id}")
        if kf.point_ids[cam][idx] >= 0:
            raise ValueError(f"feature ({cam}, {idx}) of keyframe {kf_id} already associated")
        first_in_kf = kf_id not in mp.keyframes()
        if first_in_kf:
            for other in mp.keyframes():
                self.covisibility._bump(kf_id, other, 1)
        mp.observations[(kf_id, cam)] = idx
        kf.point_ids[cam][idx] = pid
        if mp.reference_kf < 0:
            mp.reference_kf = kf_id

    def remove_observation(self, pid, kf_id, cam):
        mp = self.point(pid)
        kf = self.keyframe(kf_id)
        try:
            idx = mp.observations.pop((kf_id, cam))
        except KeyError:
            raise UnknownId(f"observation of point {pid} by ({kf_id}, {cam})") from None
        kf.point_ids[cam][idx] = -1
        if kf_id not in mp.keyframes():
            for other in mp.keyframes():
                self.covisibility._bump(kf_id, other, -1)
            if mp.reference_kf == kf_id:
                mp.reference_kf = min(mp.keyframes(), default=-1)

    def remove_point(self, pid):
        mp = self.point(pid)
        for kf_id, cam in list(mp.observations):
            self.remove_observation(pid, kf_id, cam)
        del self.points[pid]

    def remove_keyframe(self, kf_id):
        """Drop a keyframe; points left without observations are removed too."""
        kf = self.keyframe(kf_id)
        for pid in kf.map_point_ids():
            mp = self.points[pid]
            for key in [k for k in mp.observations if k[0] == kf_id]:
                self.remove_observation(pid, *key)
            if not mp.observations:
                del self.points[pid]
        self.covisibility.drop(kf_id)
        del self.keyframes[kf_id]

    def replace_point(self, old, new):
        """Fold point ``old`` into ``new``; conflicting observations keep ``new``'s."""
        if old == new:
            return
        mp_old, mp_new = self.point(old), self.point(new)
        for (kf_id, cam), idx in list(mp_old.observations.items()):
            self.remove_observation(old, kf_id, cam)
            if (kf_id, cam) not in mp_new.observations:
                self.add_observation(new, kf_id, cam, idx)
        del self.points[old]

    def keyframe_points(self, kf_id):
        return self.keyframe(kf_id).map_point_ids()

    def cull_redundant_keyframes(self, candidates=None, redundancy=0.9, min_observers=3,
                                 protected=(0,)):
        """Remove keyframes whose points are mostly seen by >= ``min_observers`` others.

        Returns the removed ids.
        """
        removed = []
        ids = sorted(self.keyframes) if candidates is None else sorted(candidates)
        for kf_id in ids:
            if kf_id in protected or kf_id not in self.keyframes:
                continue
            pids = self.keyframe_points(kf_id)
            if not pids:
                continue
            redundant = sum(1 for p in pids if self.points[p].n_keyframes() - 1 >= min_observers)
            if redundant >= redundancy * len(pids):
                self.remove_keyframe(kf_id)
                removed.append(kf_id)
        return removed

    def check_integrity(self):
        """Raise AssertionError if any cross reference is broken."""
        for pid, mp in self.points.items():
            assert mp.observations, f"point {pid} has no observations"
            for (kf_id, cam), idx in mp.observations.items():
                assert kf_id in self.keyframes, f"point {pid} -> missing keyframe {kf_id}"
                assert self.keyframes[kf_id].point_ids[cam][idx] == pid
        for kf_id, kf in self.keyframes.items():
            for cam, arr in enumerate(kf.point_ids):
                for idx in np.nonzero(arr >= 0)[0]:
                    pid = int(arr[idx])
                    assert pid in self.points, f"keyframe {kf_id} -> missing point {pid}"
                    assert self.points[pid].observations.get((kf_id, cam)) == idx
        assert recompute_covisibility(self) == self.covisibility.counts_nonzero()

    # persistence
    def save(self, path):
        save_map(self, path)

    @classmethod
    def load(cls, path):
        return load_map(path)


def recompute_covisibility(m):
    """Shared-point counts rebuilt from the map points alone."""
    counts = Counter()
    for mp in m.points.values():
        kfs = sorted(mp.keyframes())
        for i, a in enumerate(kfs):
            for b in kfs[i + 1:]:
                counts[(a, b)] += 1
    out = {}
    for (a, b), n in counts.items():
        out.setdefault(a, {})[b] = n
        out.setdefault(b, {})[a] = n
    return out


# --- serialisation ---------------------------------------------------------
#
# Format (numpy .npz, version 1). "meta" holds UTF-8 JSON with version,
# theta_cov, next ids and one record per keyframe (id, timestamp, image sizes,
# uid table, bow counts). Arrays per keyframe k and camera c:
#   kf{k}_pose             4x4 world -> camera-1 matrix (absent if no pose)
#   kf{k}_c{c}_px          (n, 2) float64 pixels
#   kf{k}_c{c}_desc        (n, 32) uint8 descriptors
#   kf{k}_c{c}_uid         (n,) int64 unique ids
#   kf{k}_c{c}_pts         (n,) int64 map point ids (-1 none)
#   kf{k}_c{c}_cells       (n, 2) int64 grid cells
# Map points: pt_ids, pt_pos (m, 3), pt_desc (m, 32), pt_ref (m,),
# pt_obs (k, 4) rows of (point id, keyframe id, camera, feature index).

def save_map(m, path):
    arrays = {}
    kf_meta = []
    for kf_id in sorted(m.keyframes):
        kf = m.keyframes[kf_id]
        fr = kf.frame
        if fr.pose is not None:
            arrays[f"kf{kf_id}_pose"] = fr.pose.c1.matrix()
        for c, cam in enumerate(fr.cameras):
            arrays[f"kf{kf_id}_c{c}_px"] = cam.pixels
            arrays[f"kf{kf_id}_c{c}_desc"] = cam.descriptors
            arrays[f"kf{kf_id}_c{c}_uid"] = cam.unique_ids
            arrays[f"kf{kf_id}_c{c}_pts"] = kf.point_ids[c]
            arrays[f"kf{kf_id}_c{c}_cells"] = fr.grids[c].cells
        kf_meta.append({
            "id": kf_id,
            "timestamp": float.hex(float(fr.timestamp)),
            "pose_timestamp": None if fr.pose is None else float.hex(float(fr.pose.timestamp)),
            "image_sizes": [list(s) for s in fr.image_sizes],
            "uid_table": [[u, [list(x) for x in members]] for u, members in fr.uid_table.items()],
            "bow": [[w, float.hex(float(v))] for w, v in kf.bow_counts.items()],
        })
    pids = sorted(m.points)
    arrays["pt_ids"] = np.array(pids, dtype=np.int64)
    arrays["pt_pos"] = np.array([m.points[p].position for p in pids]).reshape(-1, 3)
    arrays["pt_desc"] = np.array([m.points[p].descriptor for p in pids], dtype=np.uint8).reshape(-1, N_BYTES)
    arrays["pt_ref"] = np.array([m.points[p].reference_kf for p in pids], dtype=np.int64)
    obs = [(p, k, c, i) for p in pids for (k, c), i in m.points[p].observations.items()]
    arrays["pt_obs"] = np.array(obs, dtype=np.int64).reshape(-1, 4)
    meta = {"format": "rigslam-map", "version": MAP_FORMAT_VERSION,
            "theta_cov": m.covisibility.theta, "next_kf_id": m.next_kf_id,
            "next_point_id": m.next_point_id, "keyframes": kf_meta}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_map(path):
    with np.load(path) as z:
        data = {k: z[k] for k in z.files}
    meta = json.loads(data["meta"].tobytes().decode("utf-8"))
    if meta.get("format") != "rigslam-map" or meta.get("version") != MAP_FORMAT_VERSION:
        raise ValueError(f"unsupported map file (format={meta.get('format')}, version={meta.get('version')})")
    m = BundledMap(meta["theta_cov"])
    for rec in meta["keyframes"]:
        k = rec["id"]
        n_cam = len(rec["image_sizes"])
        cams = [CameraFeatures(data[f"kf{k}_c{c}_px"], data[f"kf{k}_c{c}_desc"], data[f"kf{k}_c{c}_uid"])
                for c in range(n_cam)]
        pose = None
        if f"kf{k}_pose" in data:
            pose = RigPose(RigidTransform.from_matrix(data[f"kf{k}_pose"]), float.fromhex(rec["pose_timestamp"]))
        frame = BundledFrame(float.fromhex(rec["timestamp"]), cams, [tuple(s) for s in rec["image_sizes"]], pose)
        for c in range(n_cam):
            if not np.array_equal(frame.grids[c].cells, data[f"kf{k}_c{c}_cells"]):
                raise ValueError(f"grid cells of keyframe {k} camera {c} do not match pixels")
        frame.uid_table = {u: tuple(tuple(x) for x in members) for u, members in rec["uid_table"]}
        kf = BundledKeyframe(k, frame, [data[f"kf{k}_c{c}_pts"].copy() for c in range(n_cam)],
                             {w: float.fromhex(v) for w, v in rec["bow"]})
        m.keyframes[k] = kf
        m.covisibility.counts.setdefault(k, {})
    for pid, pos, desc, ref in zip(data["pt_ids"], data["pt_pos"], data["pt_desc"], data["pt_ref"]):
        m.points[int(pid)] = MapPoint(int(pid), pos.copy(), desc.copy(), {}, int(ref))
    for pid, k, c, i in data["pt_obs"]:
        m.points[int(pid)].observations[(int(k), int(c))] = int(i)
    for a, row in recompute_covisibility(m).items():
        m.covisibility.counts.setdefault(a, {}).update(row)
    m.next_kf_id = meta["next_kf_id"]
    m.next_point_id = meta["next_point_id"]
    return m
