"""Robust bundle adjustment over rig poses and map points.

All three tiers share one Levenberg-Marquardt solver. Each observation ties
one rig pose (camera 1, world -> camera) and one point to a pixel of camera i:

    e = u - h(R_i1 (R_1w P + t_1w) + t_i1)

Residuals are whitened by the observation information before the Huber
kernel is applied. Pose steps are left-multiplied twists ``[w, rho]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import se3
from .errors import BehindCamera, SingularSystem, TooFewMatches, UnknownId
from .rig import Z_MIN, camera_pose, project
from .se3 import RigidTransform

CHI2_2DOF_95 = 5.991
HUBER_DELTA = math.sqrt(CHI2_2DOF_95)


@dataclass(frozen=True)
class HuberKernel:
    delta: float = HUBER_DELTA

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("Huber delta must be positive")


def huber_cost(r2, delta):
    """Huber cost of a squared whitened residual and its derivative d cost / d r2.

    cost = r2 inside the knee, 2 delta sqrt(r2) - delta^2 outside.
    Works elementwise on arrays.
    """
    r2 = np.asarray(r2, dtype=float)
    d2 = delta * delta
    inside = r2 <= d2
    root = np.sqrt(np.maximum(r2, d2))
    cost = np.where(inside, r2, 2.0 * delta * root - d2)
    weight = np.where(inside, 1.0, delta / root)
    if cost.ndim == 0:
        return float(cost), float(weight)
    return cost, weight


@dataclass
class Observation:
    frame_id: object
    camera_id: int
    point_id: object
    pixel: np.ndarray
    information: np.ndarray = None

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)
        self.information = np.eye(2) if self.information is None else np.asarray(self.information, float)


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 20
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e8
    rel_cost_tol: float = 1e-10
    step_tol: float = 1e-12


@dataclass
class BaProblem:
    rig: object
    poses: dict
    points: dict
    observations: list
    fixed_poses: set = field(default_factory=set)
    fixed_points: set = field(default_factory=set)
    kernel: HuberKernel = field(default_factory=HuberKernel)
    settings: SolverSettings = field(default_factory=SolverSettings)
    tier: str = "custom"

    def __post_init__(self):
        for ob in self.observations:
            if ob.frame_id not in self.poses:
                raise UnknownId(f"observation references missing pose {ob.frame_id}")
            if ob.point_id not in self.points:
                raise UnknownId(f"observation references missing point {ob.point_id}")

    def free_pose_ids(self):
        return [k for k in self.poses if k not in self.fixed_poses]

    def free_point_ids(self):
        return [k for k in self.points if k not in self.fixed_points]


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    cost_trace: list = field(default_factory=list)
    lambda_trace: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    termination: str = ""
    n_valid: int = 0
    n_removed: int = 0

    def write_trace(self, path):
        write_trace(self, path)


# --- single-observation operations ------------------------------------------------

def _point_in_camera(rig, pose, i, p_world):
    p1 = se3.act(pose.c1 if hasattr(pose, "c1") else pose, p_world)
    ext = rig.extrinsics[i]
    return p1, se3.act(ext, p1)


def residual(rig, pose, i, p_world, u):
    """Observed pixel minus predicted pixel."""
    pc = se3.act(camera_pose(rig, pose, i), p_world)
    return np.asarray(u, dtype=float) - project(rig.intrinsics[i], pc)


def _projection_block(intr, pc):
    x, y, z = pc
    if z <= Z_MIN:
        raise BehindCamera(f"depth {z} <= {Z_MIN}")
    return np.array([[intr.fx / z, 0.0, -intr.fx * x / (z * z)],
                     [0.0, intr.fy / z, -intr.fy * y / (z * z)]])


def jacobian_pose(rig, pose, i, p_world):
    """2x6 derivative of the residual w.r.t. a left twist on camera 1's pose."""
    p1, pc = _point_in_camera(rig, pose, i, p_world)
    a = _projection_block(rig.intrinsics[i], pc) @ rig.extrinsics[i].rotation
    return -a @ np.hstack([se3.skew(-p1), np.eye(3)])


def jacobian_point(rig, pose, i, p_world):
    """2x3 derivative of the residual w.r.t. the world point."""
    c1 = pose.c1 if hasattr(pose, "c1") else pose
    _, pc = _point_in_camera(rig, pose, i, p_world)
    return -_projection_block(rig.intrinsics[i], pc) @ rig.extrinsics[i].rotation @ c1.rotation


# --- vectorised evaluation ----------------------------------------------------------

def _aggregator(slots, n_rows):
    """Sparse (n_rows, m) matrix summing per-observation rows into their slot."""
    m = len(slots)
    keep = slots >= 0
    return sp.csr_matrix((np.ones(int(keep.sum())), (slots[keep], np.flatnonzero(keep))),
                         shape=(n_rows, m))


class _Packed:
    """Observation arrays and sparsity structure for one problem."""

    def __init__(self, problem, active=None):
        rig = problem.rig
        obs = problem.observations
        self.pose_ids = list(problem.poses)
        self.point_ids = list(problem.points)
        pose_index = {k: n for n, k in enumerate(self.pose_ids)}
        point_index = {k: n for n, k in enumerate(self.point_ids)}
        m = len(obs)
        self.m = m
        self.pose = np.fromiter((pose_index[o.frame_id] for o in obs), np.int64, m)
        self.point = np.fromiter((point_index[o.point_id] for o in obs), np.int64, m)
        self.cam = np.fromiter((o.camera_id for o in obs), np.int64, m)
        self.uv = np.array([o.pixel for o in obs]).reshape(m, 2)
        info = np.array([o.information for o in obs]).reshape(m, 2, 2)
        # r = L e with L^T L = information
        self.sqrt_info = np.transpose(np.linalg.cholesky(info), (0, 2, 1))
        self.active = np.ones(m, bool) if active is None else np.asarray(active, bool).copy()

        self.ext_r = np.array([e.rotation for e in rig.extrinsics])[self.cam]
        self.ext_t = np.array([e.translation for e in rig.extrinsics])[self.cam]
        self.fx = np.array([c.fx for c in rig.intrinsics])[self.cam]
        self.fy = np.array([c.fy for c in rig.intrinsics])[self.cam]
        self.cx = np.array([c.cx for c in rig.intrinsics])[self.cam]
        self.cy = np.array([c.cy for c in rig.intrinsics])[self.cam]

        free_pose = [k for k in self.pose_ids if k not in problem.fixed_poses]
        free_point = [k for k in self.point_ids if k not in problem.fixed_points]
        fp = {k: n for n, k in enumerate(free_pose)}
        fl = {k: n for n, k in enumerate(free_point)}
        self.n_free_pose = nfp = len(free_pose)
        self.n_free_point = nfl = len(free_point)
        self.pose_slot = np.array([fp.get(k, -1) for k in self.pose_ids], dtype=np.int64)
        self.point_slot = np.array([fl.get(k, -1) for k in self.point_ids], dtype=np.int64)

        ps = self.pose_slot[self.pose] if m else np.empty(0, np.int64)
        ls = self.point_slot[self.point] if m else np.empty(0, np.int64)
        self.sum_pose = _aggregator(ps, nfp)
        self.sum_point = _aggregator(ls, nfl)
        both = (ps >= 0) & (ls >= 0)
        key = np.where(both, ps * max(nfl, 1) + ls, -1)
        ukey, inv = np.unique(key[both], return_inverse=True)
        slot = np.full(m, -1, dtype=np.int64)
        slot[both] = inv
        self.sum_pair = _aggregator(slot, len(ukey))
        self.pair_pose = ukey // max(nfl, 1)
        self.pair_point = ukey % max(nfl, 1)
        self.pair_indptr = np.searchsorted(self.pair_pose, np.arange(nfp + 1))


def _evaluate(pk, rot, trans, pts, delta, jacobians=False):
    """Whitened residuals, robust costs and (optionally) whitened Jacobians."""
    r1w = rot[pk.pose]
    p1 = np.einsum("mij,mj->mi", r1w, pts[pk.point]) + trans[pk.pose]
    pc = np.einsum("mij,mj->mi", pk.ext_r, p1) + pk.ext_t
    z = pc[:, 2]
    valid = pk.active & (z > Z_MIN)
    zs = np.where(valid, z, 1.0)
    inv_z = 1.0 / zs
    pred = np.column_stack([pk.fx * pc[:, 0] * inv_z + pk.cx, pk.fy * pc[:, 1] * inv_z + pk.cy])
    e = pk.uv - pred
    r = np.einsum("mij,mj->mi", pk.sqrt_info, e)
    r[~valid] = 0.0
    r2 = np.einsum("mi,mi->m", r, r)
    cost, weight = huber_cost(r2, delta)
    cost = np.where(valid, cost, 0.0)
    weight = np.where(valid, weight, 0.0)
    if not jacobians:
        return r, r2, cost, weight, valid, None, None
    proj = np.zeros((len(z), 2, 3))
    proj[:, 0, 0] = pk.fx * inv_z
    proj[:, 0, 2] = -pk.fx * pc[:, 0] * inv_z ** 2
    proj[:, 1, 1] = pk.fy * inv_z
    proj[:, 1, 2] = -pk.fy * pc[:, 1] * inv_z ** 2
    a = pk.sqrt_info @ (proj @ pk.ext_r)              # whitened d h / d p1
    # e = u - h  =>  J = -dh/dx ; d p1 / d xi = [ -[p1]x | I ]
    sk = np.zeros((len(z), 3, 3))
    sk[:, 0, 1], sk[:, 0, 2] = -p1[:, 2], p1[:, 1]
    sk[:, 1, 0], sk[:, 1, 2] = p1[:, 2], -p1[:, 0]
    sk[:, 2, 0], sk[:, 2, 1] = -p1[:, 1], p1[:, 0]
    j_pose = np.concatenate([a @ sk, -a], axis=2)
    j_point = -(a @ r1w)
    j_pose[~valid] = 0.0
    j_point[~valid] = 0.0
    return r, r2, cost, weight, valid, j_pose, j_point


def _state(problem, pk, poses=None, points=None):
    poses = problem.poses if poses is None else poses
    points = problem.points if points is None else points
    rot = np.array([poses[k].rotation for k in pk.pose_ids]).reshape(-1, 3, 3)
    trans = np.array([poses[k].translation for k in pk.pose_ids]).reshape(-1, 3)
    pts = np.array([points[k] for k in pk.point_ids], dtype=float).reshape(-1, 3)
    return rot, trans, pts


def _damp(blocks, lam):
    d = np.clip(np.einsum("nii->ni", blocks), 1e-6, 1e32)
    out = blocks.copy()
    idx = np.arange(blocks.shape[1])
    out[:, idx, idx] += lam * d
    return out


class _Linearization:
    """Normal equations split into pose (U), point (V) and coupling (W) blocks."""

    def __init__(self, pk, r, weight, j_pose, j_point):
        self.pk = pk
        nfp, nfl = pk.n_free_pose, pk.n_free_point
        jpt = j_pose.transpose(0, 2, 1) * weight[:, None, None]
        self.U = (pk.sum_pose @ (jpt @ j_pose).reshape(pk.m, 36)).reshape(nfp, 6, 6)
        self.gc = pk.sum_pose @ (jpt @ r[:, :, None]).reshape(pk.m, 6)
        jlt = j_point.transpose(0, 2, 1) * weight[:, None, None]
        self.V = (pk.sum_point @ (jlt @ j_point).reshape(pk.m, 9)).reshape(nfl, 3, 3)
        self.gl = pk.sum_point @ (jlt @ r[:, :, None]).reshape(pk.m, 3)
        n_pairs = len(pk.pair_pose)
        self.W = (pk.sum_pair @ (jpt @ j_point).reshape(pk.m, 18)).reshape(n_pairs, 6, 3)
        if n_pairs:
            self.Wd = sp.bsr_matrix((self.W, pk.pair_point, pk.pair_indptr), shape=(6 * nfp, 3 * nfl))

    def solve(self, lam):
        pk = self.pk
        nfp, nfl = pk.n_free_pose, pk.n_free_point
        coupled = nfp and nfl and len(self.W)
        if nfl:
            V = _damp(self.V, lam) + 1e-12 * np.eye(3)
            Vinv = np.linalg.inv(V)
        if nfp:
            U = _damp(self.U, lam)
            n = 6 * nfp
            S = np.zeros((n, n))
            for k in range(nfp):
                S[6 * k:6 * k + 6, 6 * k:6 * k + 6] = U[k]
            rhs = -self.gc.reshape(-1)
            if coupled:
                vb = sp.bsr_matrix((Vinv, np.arange(nfl), np.arange(nfl + 1)), shape=(3 * nfl, 3 * nfl))
                y = self.Wd @ vb                                   # W V^-1
                S -= (y @ self.Wd.T).toarray()
                rhs = rhs + y @ self.gl.reshape(-1)
            S = 0.5 * (S + S.T)
            try:
                c = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                return None
            dc = np.linalg.solve(c.T, np.linalg.solve(c, rhs))
            if not np.all(np.isfinite(dc)):
                return None
        else:
            dc = np.zeros(0)
        if nfl:
            rhs_l = -self.gl.reshape(-1)
            if coupled:
                rhs_l = rhs_l - self.Wd.T @ dc
            dl = np.einsum("nij,nj->ni", Vinv, rhs_l.reshape(nfl, 3))
            if not np.all(np.isfinite(dl)):
                return None
        else:
            dl = np.zeros((0, 3))
        return dc.reshape(nfp, 6), dl


def _apply(pk, rot, trans, pts, dc, dl):
    rot, trans, pts = rot.copy(), trans.copy(), pts.copy()
    for n in np.flatnonzero(pk.pose_slot >= 0):
        step = se3.exp_se3(dc[pk.pose_slot[n]])
        rot[n] = step.rotation @ rot[n]
        trans[n] = step.rotation @ trans[n] + step.translation
    m = pk.point_slot >= 0
    pts[m] += dl[pk.point_slot[m]]
    return rot, trans, pts


def _lm(pk, rot, trans, pts, settings, delta, tier):
    st = settings
    r, r2, cost_v, w, valid, jp, jl = _evaluate(pk, rot, trans, pts, delta, jacobians=True)
    cost = float(cost_v.sum())
    report = SolveReport(initial_cost=cost, final_cost=cost, cost_trace=[cost], n_valid=int(valid.sum()))
    lam = st.lambda_init
    report.lambda_trace.append(lam)
    report.step_norms.append(0.0)

    if pk.n_free_pose == 0 and pk.n_free_point == 0:
        report.termination = "nothing_free"
    elif cost == 0.0:
        report.termination = "zero_cost"

    it = 0
    lin = None
    while not report.termination:
        if it >= st.max_iterations:
            report.termination = "max_iterations"
            break
        if lin is None:
            lin = _Linearization(pk, r, w, jp, jl)
        sol = lin.solve(lam)
        if sol is None:
            lam *= st.lambda_up
            if lam > st.lambda_max:
                raise SingularSystem(f"{tier} normal equations unsolvable at lambda {lam:g}")
            continue
        dc, dl = sol
        step_norm = float(math.sqrt(np.sum(dc * dc) + np.sum(dl * dl)))
        nrot, ntrans, npts = _apply(pk, rot, trans, pts, dc, dl)
        ncost = float(_evaluate(pk, nrot, ntrans, npts, delta)[2].sum())
        it += 1
        if ncost < cost:
            rel = (cost - ncost) / cost if cost > 0 else 0.0
            rot, trans, pts, cost = nrot, ntrans, npts, ncost
            lam = max(lam * st.lambda_down, 1e-12)
            report.cost_trace.append(cost)
            report.lambda_trace.append(lam)
            report.step_norms.append(step_norm)
            if cost == 0.0:
                report.termination = "zero_cost"
            elif rel < st.rel_cost_tol:
                report.termination = "converged_cost"
            elif step_norm < st.step_tol:
                report.termination = "converged_step"
            else:
                r, r2, cost_v, w, valid, jp, jl = _evaluate(pk, rot, trans, pts, delta, jacobians=True)
                lin = None
        else:
            if step_norm < st.step_tol:
                report.termination = "converged_step"
                break
            lam *= st.lambda_up
            if lam > st.lambda_max:
                report.termination = "lambda_max"
    report.iterations = it
    report.final_cost = cost
    report.n_valid = int(valid.sum())
    return rot, trans, pts, report


def _unpack(problem, pk, rot, trans, pts):
    poses = {}
    for n, k in enumerate(pk.pose_ids):
        poses[k] = problem.poses[k] if pk.pose_slot[n] < 0 else RigidTransform(rot[n], trans[n])
    points = {}
    for n, k in enumerate(pk.point_ids):
        points[k] = problem.points[k] if pk.point_slot[n] < 0 else pts[n].copy()
    return poses, points


def solve_lm(problem, active=None):
    """Levenberg-Marquardt on ``problem``.

    Returns ``(poses, points, report)`` as new dicts. Fixed entries are the
    very objects passed in. ``active`` masks observations out of the cost.
    """
    pk = _Packed(problem, active)
    rot, trans, pts = _state(problem, pk)
    rot, trans, pts, report = _lm(pk, rot, trans, pts, problem.settings, problem.kernel.delta, problem.tier)
    poses, points = _unpack(problem, pk, rot, trans, pts)
    return poses, points, report


def chi2_errors(problem, poses=None, points=None):
    """Whitened squared residual per observation (inf when behind the camera)."""
    pk = _Packed(problem)
    rot, trans, pts = _state(problem, pk, poses, points)
    _, r2, _, _, valid, _, _ = _evaluate(pk, rot, trans, pts, problem.kernel.delta)
    return np.where(valid, r2, np.inf)


def robust_cost(problem, poses=None, points=None, active=None):
    pk = _Packed(problem, active)
    rot, trans, pts = _state(problem, pk, poses, points)
    return float(_evaluate(pk, rot, trans, pts, problem.kernel.delta)[2].sum())


def solve_with_outlier_rounds(problem, rounds=4, chi2_threshold=None):
    """Alternate optimisation and outlier reclassification.

    After each round every observation (including earlier outliers) is
    re-tested at the current estimate; whitened chi^2 above ``delta^2`` marks
    it out for the next round. Returns ``(poses, points, inlier_mask, report)``.
    """
    th = problem.kernel.delta ** 2 if chi2_threshold is None else chi2_threshold
    pk = _Packed(problem)
    rot, trans, pts = _state(problem, pk)
    report = None
    active = pk.active
    for _ in range(rounds):
        pk.active = active
        rot, trans, pts, rep = _lm(pk, rot, trans, pts, problem.settings, problem.kernel.delta, problem.tier)
        if report is None:
            report = rep
        else:
            report.iterations += rep.iterations
            report.cost_trace += rep.cost_trace[1:]
            report.lambda_trace += rep.lambda_trace[1:]
            report.step_norms += rep.step_norms[1:]
            report.final_cost = rep.final_cost
            report.termination = rep.termination
            report.n_valid = rep.n_valid
        pk.active = np.ones(pk.m, bool)
        _, r2, _, _, valid, _, _ = _evaluate(pk, rot, trans, pts, problem.kernel.delta)
        active = valid & (r2 <= th)
    poses, points = _unpack(problem, pk, rot, trans, pts)
    return poses, points, active, report


# --- problem builders ----------------------------------------------------------------

def build_motion_only(bmap, frame, matches, rig, kernel=None, settings=None, min_matches=6):
    """Single free rig pose against fixed map points.

    ``matches`` are ``(camera, feature index, point id)`` triples into ``frame``.
    """
    if len(matches) < min_matches:
        raise TooFewMatches(f"{len(matches)} matches, need {min_matches}")
    if frame.pose is None:
        raise ValueError("frame has no initial pose")
    points, obs = {}, []
    info = [rig.information(c) for c in range(len(rig))]
    for cam, idx, pid in matches:
        points[pid] = bmap.point(pid).position
        obs.append(Observation("frame", cam, pid, frame.cameras[cam].pixels[idx], info[cam]))
    return BaProblem(rig, {"frame": frame.pose.c1}, points, obs, set(), set(points),
                     kernel or HuberKernel(), settings or SolverSettings(), "motion-only")


def local_ba_sets(bmap, center):
    """(B_L, B_F, P_L) for local bundle adjustment around ``center``."""
    bmap.keyframe(center)
    local = {center, *bmap.covisibility.neighbors(center)}
    pts = set()
    for k in local:
        pts |= bmap.keyframe_points(k)
    fixed = set()
    for p in pts:
        fixed |= bmap.points[p].keyframes()
    fixed -= local
    return local, fixed, pts


def _map_problem(bmap, rig, free_kfs, fixed_kfs, point_ids, kernel, settings, tier):
    poses, points, obs = {}, {}, []
    for k in sorted(free_kfs | fixed_kfs):
        poses[k] = bmap.keyframes[k].pose.c1
    kfs = free_kfs | fixed_kfs
    info = [rig.information(c) for c in range(len(rig))]
    for p in sorted(point_ids):
        mp = bmap.points[p]
        for (k, cam), idx in sorted(mp.observations.items()):
            if k in kfs:
                obs.append(Observation(k, cam, p, bmap.keyframes[k].frame.cameras[cam].pixels[idx], info[cam]))
        points[p] = mp.position
    seen = {}
    for ob in obs:
        seen.setdefault(ob.point_id, set()).add((ob.frame_id, ob.camera_id))
    # a point with a single ray in the problem is unconstrained along that ray
    fixed_points = {p for p in points if len(seen.get(p, ())) < 2}
    return BaProblem(rig, poses, points, obs, set(fixed_kfs), fixed_points,
                     kernel or HuberKernel(), settings or SolverSettings(), tier)


def build_local_ba(bmap, center, rig, kernel=None, settings=None):
    """Covisible keyframes of ``center`` and their points free; observers outside fixed.

    With no outside observers the lowest-id local keyframe is fixed instead.
    The map origin (lowest surviving keyframe) is never free: after a loop
    closure it can land inside a window and would otherwise drift the gauge.
    """
    local, fixed, pts = local_ba_sets(bmap, center)
    origin = min(bmap.keyframes)
    if origin in local:
        fixed = fixed | {origin}
        local = local - {origin}
    if not fixed:
        fixed = {min(local)}
        local = local - fixed
    return _map_problem(bmap, rig, local, fixed, pts, kernel, settings, "local")


def build_global_ba(bmap, rig, kernel=None, settings=None, origin=0):
    """Every keyframe and point free except the origin keyframe."""
    if not bmap.keyframes:
        raise ValueError("empty map")
    origin = origin if origin in bmap.keyframes else min(bmap.keyframes)
    free = set(bmap.keyframes) - {origin}
    return _map_problem(bmap, rig, free, {origin}, set(bmap.points), kernel, settings, "global")


# --- trace file ---------------------------------------------------------------------
#
# Plain text: '#' header lines, then one line per accepted iteration:
#   <iteration> <lambda> <cost> <step norm>

def format_trace(report):
    """Trace rows ``iteration lambda cost step_norm``, one per LM iteration."""
    rows = zip(report.lambda_trace, report.cost_trace, report.step_norms)
    return "".join(f"{k} {lam!r} {c!r} {s!r}\n" for k, (lam, c, s) in enumerate(rows))


def write_trace(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# rigslam solver trace v1\n")
        fh.write(f"# termination {report.termination}\n")
        fh.write("# iteration lambda cost step_norm\n")
        fh.write(format_trace(report))


def read_trace(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            k, lam, c, s = line.split()
            rows.append((int(k), float(lam), float(c), float(s)))
    return rows
