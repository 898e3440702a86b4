"""Frame-to-map tracking and map initialisation."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import mapping
from . import optimizer as opt
from . import se3
from .bundled import TAU_DESC
from .descriptors import hamming_matrix
from .errors import NotTracking, TooFewMatches
from .rig import RigPose
from .se3 import RigidTransform


class Status(enum.Enum):
    UNINITIALIZED = "uninitialized"
    OK = "ok"
    LOST = "lost"


@dataclass(frozen=True)
class TrackingSettings:
    r_search: float = 15.0
    n_min: int = 10
    kf_match_ratio: float = 0.9
    kf_max_gap: int = 20
    init_min_matched: int = 30
    tau_desc: int = TAU_DESC
    outlier_rounds: int = 4
    max_iterations: int = 10
    local_map_keyframes: int = 20
    mono_init_parallax_px: float = 20.0
    mono_init_min_matches: int = 50


@dataclass(frozen=True)
class TrackerState:
    last_pose: RigPose = None
    velocity: RigidTransform = field(default_factory=RigidTransform.identity)
    reference_kf: int = -1
    status: Status = Status.UNINITIALIZED
    frames_since_keyframe: int = 0

    def __post_init__(self):
        if self.status is not Status.OK and self.velocity != RigidTransform.identity():
            object.__setattr__(self, "velocity", RigidTransform.identity())


def predict_pose(state):
    """Constant-velocity prediction ``velocity ∘ last``."""
    if state.status is not Status.OK:
        raise NotTracking(f"tracker is {state.status.value}")
    return RigPose(se3.compose(state.velocity, state.last_pose.c1), state.last_pose.timestamp)


def local_map(bmap, reference_kf, limit=20):
    """Keyframes sharing points with the reference (strongest first) and their points."""
    if reference_kf not in bmap.keyframes:
        return [], []
    kfs = [reference_kf] + bmap.covisibility.neighbors(reference_kf, min_weight=1)[:limit - 1]
    pts = set()
    for k in kfs:
        pts |= bmap.keyframe_points(k)
    return kfs, sorted(pts)


def match_local_map(bmap, frame, rig, c1, point_ids, radius, tau_desc=TAU_DESC):
    """(camera, feature index, point id) triples from projecting ``point_ids`` at ``c1``."""
    if not point_ids:
        return []
    pos = np.array([bmap.points[p].position for p in point_ids])
    desc = np.array([bmap.points[p].descriptor for p in point_ids])
    out = []
    for cam in range(frame.n_cameras):
        q, f, _ = mapping.project_and_match(rig, frame, point_ids, pos, desc, cam, radius, tau_desc, c1=c1)
        out.extend((cam, int(fi), point_ids[qi]) for qi, fi in zip(q, f))
    return out


def track_frame(bmap, state, frame, rig, settings=TrackingSettings()):
    """Track ``frame`` against the local map around the reference keyframe.

    Returns ``(state, inlier matches, SolveReport or None)``. On failure the
    state turns LOST, the frame keeps the predicted pose and the map is untouched.
    """
    pred = predict_pose(state)
    pred = RigPose(pred.c1, frame.timestamp)
    frame.pose = pred
    _, pids = local_map(bmap, state.reference_kf, settings.local_map_keyframes)
    report = None
    for radius in (settings.r_search, 2 * settings.r_search):
        matches = match_local_map(bmap, frame, rig, pred.c1, pids, radius, settings.tau_desc)
        try:
            problem = opt.build_motion_only(bmap, frame, matches, rig,
                                            settings=opt.SolverSettings(max_iterations=settings.max_iterations))
        except TooFewMatches:
            continue
        poses, _, inliers, report = opt.solve_with_outlier_rounds(problem, rounds=settings.outlier_rounds)
        if inliers.sum() >= settings.n_min:
            c1 = poses["frame"]
            frame.pose = RigPose(c1, frame.timestamp)
            good = [m for m, ok in zip(matches, inliers) if ok]
            votes = {}
            for _, _, pid in good:
                for k in bmap.points[pid].keyframes():
                    votes[k] = votes.get(k, 0) + 1
            ref = min(votes, key=lambda k: (-votes[k], k)) if votes else state.reference_kf
            new = TrackerState(frame.pose, se3.compose(c1, state.last_pose.c1.inverse()), ref,
                               Status.OK, state.frames_since_keyframe + 1)
            return new, good, report
    frame.pose = pred
    return replace(state, last_pose=pred, status=Status.LOST), [], report


def need_new_keyframe(state, matches, bmap, settings=TrackingSettings()):
    """True when tracked points fall below the ratio of the reference keyframe's
    points, or too many frames have passed since the last keyframe."""
    if state.status is not Status.OK:
        raise NotTracking(f"tracker is {state.status.value}")
    if state.frames_since_keyframe >= settings.kf_max_gap:
        return True
    tracked = len({m[2] for m in matches})
    ref = len(bmap.keyframe(state.reference_kf).map_point_ids())
    return tracked < settings.kf_match_ratio * ref


# --- initialisation ---------------------------------------------------------------------

def initialize_multicamera(bmap, frame, rig, settings=TrackingSettings(), mapping_settings=None):
    """Make ``frame`` keyframe 0 at the identity pose if it has enough cross-camera
    matches, triangulating them with the known extrinsics. Returns the tracker
    state, or None when the frame does not qualify."""
    if len(frame.matched_ids()) < settings.init_min_matched:
        return None
    frame.pose = RigPose(RigidTransform.identity(), frame.timestamp)
    kf = bmap.insert_keyframe(frame)
    created = mapping.create_multicamera_points(bmap, kf, rig, mapping_settings or mapping.MappingSettings())
    if len(created) < settings.init_min_matched:
        bmap.remove_keyframe(kf)
        bmap.next_kf_id = 0
        return None
    return TrackerState(frame.pose, RigidTransform.identity(), kf, Status.OK, 0)


def _mutual_matches(da, db, tau):
    if len(da) == 0 or len(db) == 0:
        return np.empty(0, int), np.empty(0, int)
    dist = hamming_matrix(da, db)
    bb = np.argmin(dist, axis=1)
    ba = np.argmin(dist, axis=0)
    a = np.arange(len(da))
    ok = (dist[a, bb] <= tau) & (ba[bb] == a)
    return a[ok], bb[ok]


def initialize_monocular(bmap, first, second, rig, settings=TrackingSettings(), mapping_settings=None):
    """Two-view start for a single camera: essential matrix, relative pose, and
    midpoint triangulation with the median scene depth set to 1."""
    import cv2

    ia, ib = _mutual_matches(first.cameras[0].descriptors, second.cameras[0].descriptors, settings.tau_desc)
    if len(ia) < settings.mono_init_min_matches:
        return None
    pa = first.cameras[0].pixels[ia]
    pb = second.cameras[0].pixels[ib]
    if np.median(np.linalg.norm(pa - pb, axis=1)) < settings.mono_init_parallax_px:
        return None
    k = rig.intrinsics[0].matrix()
    e, mask = cv2.findEssentialMat(pa, pb, k, method=cv2.RANSAC, prob=0.999, threshold=1.0)
    if e is None or e.shape != (3, 3):
        return None
    n_good, r, t, mask = cv2.recoverPose(e, pa, pb, k, mask=mask)
    good = mask.ravel() > 0
    if n_good < settings.mono_init_min_matches:
        return None
    first.pose = RigPose(RigidTransform.identity(), first.timestamp)
    second.pose = RigPose(RigidTransform(r, t.ravel()), second.timestamp)
    oa, da = mapping.rays(rig, first.pose.c1, 0, pa[good])
    ob, db = mapping.rays(rig, second.pose.c1, 0, pb[good])
    pts = mapping.triangulate_midpoint(np.stack([oa, ob], 1), np.stack([da, db], 1))
    depth_a = se3.act(first.pose.c1, pts)[:, 2]
    depth_b = se3.act(second.pose.c1, pts)[:, 2]
    ok = np.isfinite(depth_a) & (depth_a > 0) & (depth_b > 0)
    if ok.sum() < settings.mono_init_min_matches:
        return None
    scale = 1.0 / np.median(depth_a[ok])
    second.pose = RigPose(RigidTransform(r, t.ravel() * scale), second.timestamp)
    pts = pts * scale
    k0 = bmap.insert_keyframe(first)
    k1 = bmap.insert_keyframe(second)
    idx_a, idx_b = ia[good], ib[good]
    for n in np.flatnonzero(ok):
        pid = bmap.add_point(pts[n], first.cameras[0].descriptors[idx_a[n]], reference_kf=k0)
        bmap.add_observation(pid, k0, 0, int(idx_a[n]))
        bmap.add_observation(pid, k1, 0, int(idx_b[n]))
    rep = mapping.global_bundle_adjustment(bmap, rig, iterations=20)
    if rep is None or len(bmap.points) < settings.init_min_matched:
        return None
    c1 = bmap.keyframes[k1].pose
    return TrackerState(c1, RigidTransform.identity(), k1, Status.OK, 0)
