"""Sequential SLAM system: tracking, local mapping and loop closing as one
deterministic interleave per frame."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import mapping, se3
from .bundled import BundledMap, MatcherSettings, THETA_COV, bundle_features
from .errors import LoopRejected
from .evaluation import TrajectoryRecord
from .optimizer import local_ba_sets
from .place_recognition import KeyframeDatabase, LoopDetector, close_loop
from .rig import RigPose
from .tracking import (Status, TrackerState, TrackingSettings, initialize_monocular,
                       initialize_multicamera, need_new_keyframe, track_frame)
from .vocabulary import word_counts


@dataclass(frozen=True)
class PipelineSettings:
    tracking: TrackingSettings = field(default_factory=TrackingSettings)
    mapping: mapping.MappingSettings = field(default_factory=mapping.MappingSettings)
    matcher: MatcherSettings = field(default_factory=MatcherSettings)
    theta_cov: int = THETA_COV
    loop_closing: bool = False
    loop_window: int = 10
    loop_persistence: int = 3
    global_ba_iterations: int = 30
    drift_yaw_per_meter: float = 0.0    # injected heading drift, radians per metre travelled
    min_keyframes: int = 10
    mono_init_max_frames: int = 30


@dataclass
class LoopEvent:
    frame: int
    query: int
    candidate: int
    accepted: bool
    inliers: int = 0
    message: str = ""


@dataclass
class RunResult:
    trajectory: TrajectoryRecord
    status: str
    n_frames: int
    n_tracked: int
    n_keyframes: int
    n_points: int
    loop_events: list
    timings: dict
    solver_reports: list
    lost_at: int = -1

    @property
    def lost_early(self):
        return self.lost_at >= 0 and self.n_keyframes < 10


class SlamSystem:
    def __init__(self, rig, settings=PipelineSettings(), vocabulary=None):
        self.rig = rig
        self.settings = settings
        self.map = BundledMap(settings.theta_cov)
        self.state = TrackerState()
        self.vocabulary = vocabulary
        self.db = KeyframeDatabase(vocabulary) if vocabulary is not None else None
        self.detector = LoopDetector(settings.loop_window, settings.loop_persistence)
        self.frames = []              # (timestamp, ref kf, c1 relative to ref kf)
        self.loop_events = []
        self.solver_reports = []
        self.timings = {"tracking": 0.0, "mapping": 0.0, "loop": 0.0}
        self.frame_index = -1
        self._mono_first = None
        self._mono_first_index = -1
        self._drift_anchor = None
        self._drift_floor = -1        # keyframes up to this id are anchored by a loop correction

    # ------------------------------------------------------------------ helpers
    def _record(self, frame, kf_id):
        kf = self.map.keyframes[kf_id]
        rel = se3.compose(frame.pose.c1, kf.pose.c1.inverse())
        self.frames.append((frame.timestamp, kf_id, rel))

    def _rereference(self, removed):
        """Move frames anchored on removed keyframes to a surviving one."""
        if not removed:
            return
        alive = sorted(self.map.keyframes)
        abs_cache = {}
        for n, (ts, k, rel) in enumerate(self.frames):
            if k in self.map.keyframes:
                continue
            if k not in abs_cache:
                abs_cache[k] = self._removed_pose[k]
            c1 = se3.compose(rel, abs_cache[k])
            nk = min(alive, key=lambda a: (abs(a - k), a))
            self.frames[n] = (ts, nk, se3.compose(c1, self.map.keyframes[nk].pose.c1.inverse()))
        if self.state.reference_kf not in self.map.keyframes:
            nk = min(alive, key=lambda a: (abs(a - self.state.reference_kf), a))
            self.state = TrackerState(self.state.last_pose, self.state.velocity, nk,
                                      self.state.status, self.state.frames_since_keyframe)

    def trajectory(self):
        ts, poses = [], []
        for t, k, rel in self.frames:
            ts.append(t)
            poses.append(se3.compose(rel, self.map.keyframes[k].pose.c1))
        return TrajectoryRecord(ts, poses)

    # ------------------------------------------------------------------ stages
    def _initialize(self, frame):
        st = self.settings
        if frame.n_cameras >= 2:
            state = initialize_multicamera(self.map, frame, self.rig, st.tracking, st.mapping)
            if state is None:
                return False
            self.state = state
            self._after_keyframe(0, new_points=False)
            self._inject_drift(0)
            self._record(frame, 0)
            return True
        if self._mono_first is None or self.frame_index - self._mono_first_index > st.mono_init_max_frames:
            self._mono_first, self._mono_first_index = frame, self.frame_index
            return False
        trial = BundledMap(st.theta_cov)
        state = initialize_monocular(trial, self._mono_first, frame, self.rig, st.tracking, st.mapping)
        if state is None:
            return False
        self.map = trial
        self.state = state
        # frames between the two views are not recovered; both views are recorded
        self._record(self._mono_first, 0)
        self._record(frame, 1)
        for k in (0, 1):
            self._after_keyframe(k, new_points=False, local_ba=False)
            self._inject_drift(k)
        return True

    def _after_keyframe(self, kf_id, new_points=True, local_ba=True):
        st = self.settings.mapping
        t0 = time.perf_counter()
        kf = self.map.keyframes[kf_id]
        if new_points:
            mapping.propagate_bundled(self.map, kf_id, self.rig)
            neighbors = self.map.covisibility.neighbors(kf_id, min_weight=1)
            mapping.create_multicamera_points(self.map, kf_id, self.rig, st)
            mapping.create_temporal_points(self.map, kf_id, self.rig,
                                           neighbors[:st.triangulation_neighbors], st)
            neighbors = self.map.covisibility.neighbors(kf_id, min_weight=1)
            mapping.fuse_neighbors(self.map, kf_id, self.rig, neighbors[:st.fusion_neighbors], st)
        if local_ba and len(self.map.keyframes) > 1:
            rep = mapping.local_bundle_adjustment(self.map, kf_id, self.rig, st)
            if rep is not None:
                self.solver_reports.append(("local", kf_id, rep))
        if st.cull_keyframes and new_points:
            cands = [k for k in self.map.covisibility.neighbors(kf_id) if k != kf_id]
            self._removed_pose = {k: self.map.keyframes[k].pose.c1 for k in cands}
            removed = self.map.cull_redundant_keyframes(
                cands, st.cull_redundancy, st.cull_observers, protected=(0, kf_id))
            for k in removed:
                if self.db is not None:
                    self.db.remove(k)
            self._rereference(removed)
        self.timings["mapping"] += time.perf_counter() - t0
        if self.vocabulary is not None:
            kf.bow_counts = word_counts(self.vocabulary, kf.frame)

    def _inject_drift(self, kf_id):
        """Controlled odometry drift: turn the active window (local BA keyframes,
        their fixed border and the window's points) about the new keyframe's
        vertical axis by ``drift_yaw_per_meter`` times the distance since the
        previous keyframe. Local BA never sees the resulting seam, global BA does.
        Keyframe 0 and structure already corrected by a loop closure stay put."""
        kf = self.map.keyframes[kf_id]
        center = kf.pose.c1.center()
        prev, self._drift_anchor = self._drift_anchor, center
        rate = self.settings.drift_yaw_per_meter
        if prev is None or rate == 0.0:
            return
        angle = rate * float(np.linalg.norm(center - prev))
        turn = se3.RigidTransform(se3.exp_so3([0.0, angle, 0.0]), np.zeros(3))
        move = se3.compose(kf.pose.c1.inverse(), se3.compose(turn, kf.pose.c1))
        undo = move.inverse()
        window, border, points = local_ba_sets(self.map, kf_id)
        floor = max(self._drift_floor, min(self.map.keyframes))
        for k in set(window) | set(border):
            if k > floor:
                old = self.map.keyframes[k].pose
                self.map.keyframes[k].pose = RigPose(se3.compose(old.c1, undo), old.timestamp)
        for p in points:
            mp = self.map.points[p]
            if mp.reference_kf > floor:
                mp.position = se3.act(move, mp.position[None])[0]

    def _loop(self, kf_id):
        t0 = time.perf_counter()
        try:
            cand = self.detector.detect(self.map, self.db, kf_id)
            if cand is not None:
                try:
                    rep = close_loop(self.map, kf_id, cand, self.rig,
                                     ba_iterations=self.settings.global_ba_iterations)
                    self.loop_events.append(LoopEvent(self.frame_index, kf_id, cand, True, rep.inliers))
                    if rep.ba is not None:
                        self.solver_reports.append(("global", kf_id, rep.ba))
                    kf = self.map.keyframes[kf_id]
                    self.state = TrackerState(kf.pose, self.state.velocity, kf_id, Status.OK, 0)
                    self.detector.history = []
                    self._drift_floor = kf_id
                except LoopRejected as exc:
                    self.loop_events.append(LoopEvent(self.frame_index, kf_id, cand, False, 0, str(exc)))
        finally:
            self.db.add_keyframe(self.map.keyframes[kf_id])
            self.timings["loop"] += time.perf_counter() - t0

    def process(self, frame):
        """Feed one BundledFrame. Returns the tracker status afterwards."""
        self.frame_index += 1
        bundle_features(frame, self.rig, self.settings.matcher)
        if self.state.status is Status.UNINITIALIZED:
            t0 = time.perf_counter()
            ok = self._initialize(frame)
            self.timings["tracking"] += time.perf_counter() - t0
            if ok and self.db is not None:
                for k in sorted(self.map.keyframes):
                    self.db.add_keyframe(self.map.keyframes[k])
            return self.state.status
        if self.state.status is Status.LOST:
            return Status.LOST

        t0 = time.perf_counter()
        state, matches, report = track_frame(self.map, self.state, frame, self.rig, self.settings.tracking)
        self.timings["tracking"] += time.perf_counter() - t0
        self.state = state
        if state.status is not Status.OK:
            return state.status
        if need_new_keyframe(state, matches, self.map, self.settings.tracking):
            kf_id = self.map.insert_keyframe(frame)
            mapping.attach_tracked(self.map, kf_id, matches)
            self.state = TrackerState(state.last_pose, state.velocity, kf_id, Status.OK, 0)
            self._after_keyframe(kf_id)
            self._inject_drift(kf_id)
            self._record(frame, kf_id)
            # local BA may have moved the keyframe; keep the motion model consistent
            kf_pose = self.map.keyframes[kf_id].pose
            self.state = TrackerState(kf_pose, self.state.velocity, kf_id, Status.OK, 0)
            if self.settings.loop_closing and self.db is not None:
                self._loop(kf_id)
        else:
            self._record(frame, self.state.reference_kf)
        return self.state.status

    def run(self, frames):
        lost_at = -1
        for n, frame in enumerate(frames):
            status = self.process(frame)
            if status is Status.LOST:
                lost_at = n
                break
        traj = self.trajectory() if self.frames else TrajectoryRecord([], [])
        return RunResult(traj, self.state.status.value, self.frame_index + 1, len(self.frames),
                         len(self.map.keyframes), len(self.map.points), self.loop_events,
                         dict(self.timings), self.solver_reports, lost_at)
