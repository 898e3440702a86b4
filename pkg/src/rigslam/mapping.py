"""Map building: triangulation, new points, duplicate fusion, local BA."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import optimizer as opt
from . import se3
from .bundled import TAU_DESC, radius_pairs
from .descriptors import hamming, hamming_matrix
from .rig import Z_MIN, camera_pose

CHI2 = opt.CHI2_2DOF_95


@dataclass(frozen=True)
class MappingSettings:
    tau_desc: int = TAU_DESC
    min_parallax_deg: float = 0.0
    max_depth: float = 60.0
    triangulation_neighbors: int = 10
    fusion_neighbors: int = 10
    local_ba_iterations: int = 6
    local_ba_rounds: int = 2
    cull_keyframes: bool = True
    cull_redundancy: float = 0.9
    cull_observers: int = 3


# --- geometry -------------------------------------------------------------------------

def rays(rig, c1, cam, pixels):
    """World origin and unit direction of the viewing rays of ``pixels`` in camera ``cam``."""
    t = camera_pose(rig, c1, cam)
    intr = rig.intrinsics[cam]
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    d = np.column_stack([(px[:, 0] - intr.cx) / intr.fx, (px[:, 1] - intr.cy) / intr.fy, np.ones(len(px))])
    d = d @ t.rotation            # R^T d for each row
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(t.center(), d.shape).copy(), d


def triangulate_midpoint(origins, directions, mask=None):
    """Point(s) minimising the summed squared distance to a bundle of rays.

    ``origins``/``directions`` are (k, 3) for one point or (m, k, 3) batched,
    with an optional (m, k) mask of rays to use.
    """
    o = np.asarray(origins, dtype=float)
    d = np.asarray(directions, dtype=float)
    single = o.ndim == 2
    if single:
        o, d = o[None], d[None]
    w = np.ones(o.shape[:2]) if mask is None else np.asarray(mask, dtype=float).reshape(o.shape[:2])
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    proj = np.eye(3) - d[..., :, None] * d[..., None, :]          # (m, k, 3, 3)
    a = np.einsum("mk,mkij->mij", w, proj)
    b = np.einsum("mk,mkij,mkj->mi", w, proj, o)
    det = np.linalg.det(a)
    ok = np.abs(det) > 1e-18
    p = np.full(b.shape, np.nan)
    if ok.any():
        p[ok] = np.linalg.solve(a[ok], b[ok][..., None])[..., 0]
    return p[0] if single else p


def max_parallax_cos(directions, mask=None):
    """Cosine of the widest angle between any two rays of each bundle."""
    d = np.asarray(directions, dtype=float)
    if d.ndim == 2:
        d = d[None]
    g = np.einsum("mki,mli->mkl", d, d)
    if mask is not None:
        m = np.asarray(mask, bool)
        g = np.where(m[:, :, None] & m[:, None, :], g, 1.0)
    return g.min(axis=(1, 2))


def reprojection_chi2(rig, c1, cam, points, pixels):
    """Whitened squared reprojection errors; inf where the point is behind the camera."""
    t = camera_pose(rig, c1, cam)
    intr = rig.intrinsics[cam]
    pc = se3.act(t, np.asarray(points, dtype=float).reshape(-1, 3))
    z = pc[:, 2]
    ok = z > Z_MIN
    zs = np.where(ok, z, 1.0)
    e = np.asarray(pixels, float).reshape(-1, 2) - np.column_stack(
        [intr.fx * pc[:, 0] / zs + intr.cx, intr.fy * pc[:, 1] / zs + intr.cy])
    chi2 = np.einsum("ij,ij->i", e, e) / rig.sigmas[cam] ** 2
    return np.where(ok, chi2, np.inf), z


# --- point creation ---------------------------------------------------------------------

def _uid_rays(rig, frame, uid):
    members = frame.uid_table[uid]
    origins, dirs = [], []
    for cam, idx in members:
        o, d = rays(rig, frame.pose.c1, cam, frame.cameras[cam].pixels[idx])
        origins.append(o[0])
        dirs.append(d[0])
    return members, origins, dirs


def _accept(rig, views, p, settings):
    """views: list of (frame, cam, idx). All must reproject within the chi2 gate."""
    if not np.all(np.isfinite(p)):
        return False
    for frame, cam, idx in views:
        chi2, z = reprojection_chi2(rig, frame.pose.c1, cam, p, frame.cameras[cam].pixels[idx])
        if not (chi2[0] <= CHI2 and z[0] <= settings.max_depth):
            return False
    return True


def _add_point(bmap, kf_id, p, descriptor, obs):
    pid = bmap.add_point(p, descriptor, reference_kf=kf_id)
    for k, cam, idx in obs:
        bmap.add_observation(pid, k, cam, idx)
    return pid


def _free_uids(kf):
    out = []
    for uid, members in sorted(kf.frame.uid_table.items()):
        if all(kf.point_ids[c][i] < 0 for c, i in members):
            out.append(uid)
    return out


def create_multicamera_points(bmap, kf_id, rig, settings=MappingSettings()):
    """Triangulate unassociated unique features seen by two or more cameras."""
    kf = bmap.keyframe(kf_id)
    frame = kf.frame
    uids = [u for u in _free_uids(kf) if len(frame.uid_table[u]) >= 2]
    if not uids:
        return []
    kmax = max(len(frame.uid_table[u]) for u in uids)
    o = np.zeros((len(uids), kmax, 3))
    d = np.zeros((len(uids), kmax, 3))
    d[..., 2] = 1.0
    mask = np.zeros((len(uids), kmax), bool)
    for n, u in enumerate(uids):
        _, oo, dd = _uid_rays(rig, frame, u)
        o[n, :len(oo)] = oo
        d[n, :len(dd)] = dd
        mask[n, :len(oo)] = True
    pts = triangulate_midpoint(o, d, mask)
    par = max_parallax_cos(d, mask)
    cos_min = math.cos(math.radians(settings.min_parallax_deg))
    created = []
    for n, u in enumerate(uids):
        if par[n] > cos_min:
            continue
        views = [(frame, c, i) for c, i in frame.uid_table[u]]
        if not _accept(rig, views, pts[n], settings):
            continue
        c, i = frame.representative(u)
        created.append(_add_point(bmap, kf_id, pts[n], frame.cameras[c].descriptors[i],
                                  [(kf_id, c2, i2) for c2, i2 in frame.uid_table[u]]))
    return created


def create_temporal_points(bmap, kf_id, rig, neighbors, settings=MappingSettings()):
    """Triangulate unassociated features of ``kf_id`` against unassociated features of neighbours."""
    kf = bmap.keyframe(kf_id)
    created = []
    cos_min = math.cos(math.radians(settings.min_parallax_deg))
    for nb_id in neighbors:
        nb = bmap.keyframes.get(nb_id)
        if nb is None:
            continue
        ua, ub = _free_uids(kf), _free_uids(nb)
        if not ua or not ub:
            continue
        da = np.array([kf.frame.cameras[c].descriptors[i] for c, i in (kf.frame.representative(u) for u in ua)])
        db = np.array([nb.frame.cameras[c].descriptors[i] for c, i in (nb.frame.representative(u) for u in ub)])
        dist = hamming_matrix(da, db)
        best_b = np.argmin(dist, axis=1)
        best_a = np.argmin(dist, axis=0)
        for a in range(len(ua)):
            b = best_b[a]
            if dist[a, b] > settings.tau_desc or best_a[b] != a:
                continue
            ma, oa, va = _uid_rays(rig, kf.frame, ua[a])
            mb, ob, vb = _uid_rays(rig, nb.frame, ub[b])
            origins, dirs = np.array(oa + ob), np.array(va + vb)
            if max_parallax_cos(dirs)[0] > cos_min:
                continue
            p = triangulate_midpoint(origins, dirs)
            views = [(kf.frame, c, i) for c, i in ma] + [(nb.frame, c, i) for c, i in mb]
            if not _accept(rig, views, p, settings):
                continue
            c, i = kf.frame.representative(ua[a])
            obs = [(kf_id, c2, i2) for c2, i2 in ma] + [(nb_id, c2, i2) for c2, i2 in mb]
            created.append(_add_point(bmap, kf_id, p, kf.frame.cameras[c].descriptors[i], obs))
    return created


def attach_tracked(bmap, kf_id, matches):
    """Record tracking matches ``(cam, idx, pid)`` as keyframe observations."""
    kf = bmap.keyframe(kf_id)
    for cam, idx, pid in matches:
        if pid in bmap.points and kf.point_ids[cam][idx] < 0 and (kf_id, cam) not in bmap.points[pid].observations:
            bmap.add_observation(pid, kf_id, cam, idx)


def propagate_bundled(bmap, kf_id, rig):
    """Extend each point to the other cameras sharing its unique feature id."""
    kf = bmap.keyframe(kf_id)
    frame = kf.frame
    added = 0
    for members in frame.uid_table.values():
        if len(members) < 2:
            continue
        pids = {int(kf.point_ids[c][i]) for c, i in members if kf.point_ids[c][i] >= 0}
        if len(pids) != 1:
            continue
        pid = pids.pop()
        mp = bmap.points[pid]
        for c, i in members:
            if kf.point_ids[c][i] >= 0 or (kf_id, c) in mp.observations:
                continue
            chi2, _ = reprojection_chi2(rig, frame.pose.c1, c, mp.position, frame.cameras[c].pixels[i])
            if chi2[0] <= CHI2:
                bmap.add_observation(pid, kf_id, c, i)
                added += 1
    return added


# --- fusion ------------------------------------------------------------------------------

def project_and_match(rig, frame, point_ids, positions, descriptors, cam, radius, tau_desc, c1=None):
    """Match projected points to features of one camera within ``radius``.

    Returns arrays (point index, feature index, hamming distance), one row per
    matched point; a feature keeps only its closest-descriptor point.
    """
    c1 = frame.pose.c1 if c1 is None else c1
    t = camera_pose(rig, c1, cam)
    intr = rig.intrinsics[cam]
    pc = se3.act(t, positions)
    z = pc[:, 2]
    ok = z > Z_MIN
    zs = np.where(ok, z, 1.0)
    uv = np.column_stack([intr.fx * pc[:, 0] / zs + intr.cx, intr.fy * pc[:, 1] / zs + intr.cy])
    ok &= intr.in_bounds(uv)
    uv[~ok] = np.nan
    q, f = radius_pairs(frame, cam, uv, radius)
    empty = np.empty(0, dtype=np.int64)
    if len(q) == 0:
        return empty, empty, empty
    dist = hamming(descriptors[q], frame.cameras[cam].descriptors[f])
    keep = dist <= tau_desc
    q, f, dist = q[keep], f[keep], dist[keep]
    if len(q) == 0:
        return empty, empty, empty
    # best feature per point, then best point per feature
    order = np.lexsort((f, dist, q))
    q, f, dist = q[order], f[order], dist[order]
    first = np.r_[True, q[1:] != q[:-1]]
    q, f, dist = q[first], f[first], dist[first]
    order = np.lexsort((q, dist, f))
    q, f, dist = q[order], f[order], dist[order]
    first = np.r_[True, f[1:] != f[:-1]]
    q, f, dist = q[first], f[first], dist[first]
    order = np.argsort(q, kind="stable")
    return q[order], f[order], dist[order]


def fuse_into(bmap, kf_id, point_ids, rig, settings=MappingSettings()):
    """Project ``point_ids`` into keyframe ``kf_id``; add or merge on agreement."""
    kf = bmap.keyframe(kf_id)
    pids = [p for p in point_ids if p in bmap.points and kf_id not in bmap.points[p].keyframes()]
    if not pids:
        return 0
    pos = np.array([bmap.points[p].position for p in pids])
    desc = np.array([bmap.points[p].descriptor for p in pids])
    changed = 0
    for cam in range(kf.frame.n_cameras):
        radius = math.sqrt(CHI2) * rig.sigmas[cam]
        q, f, _ = project_and_match(rig, kf.frame, pids, pos, desc, cam, radius, settings.tau_desc)
        for qi, fi in zip(q, f):
            pid = pids[qi]
            if pid not in bmap.points:
                continue
            mp = bmap.points[pid]
            if (kf_id, cam) in mp.observations:
                continue
            other = int(kf.point_ids[cam][fi])
            if other < 0:
                bmap.add_observation(pid, kf_id, cam, int(fi))
            elif other != pid:
                keep, drop = (pid, other) if len(mp.observations) >= len(bmap.points[other].observations) else (other, pid)
                bmap.replace_point(drop, keep)
            else:
                continue
            changed += 1
    return changed


def fuse_neighbors(bmap, kf_id, rig, neighbors, settings=MappingSettings()):
    own = sorted(bmap.keyframe_points(kf_id))
    n = 0
    for nb in neighbors:
        if nb in bmap.keyframes:
            n += fuse_into(bmap, nb, own, rig, settings)
    theirs = set()
    for nb in neighbors:
        if nb in bmap.keyframes:
            theirs |= bmap.keyframe_points(nb)
    n += fuse_into(bmap, kf_id, sorted(theirs), rig, settings)
    return n


# --- bundle adjustment write-back ----------------------------------------------------------

def apply_solution(bmap, problem, poses, points):
    """Copy free variables of a solved map problem back into the map."""
    for k in problem.poses:
        if k not in problem.fixed_poses and k in bmap.keyframes:
            old = bmap.keyframes[k].pose
            bmap.keyframes[k].pose = type(old)(poses[k], old.timestamp)
    for p in problem.points:
        if p not in problem.fixed_points and p in bmap.points:
            bmap.points[p].position = np.array(points[p])


def remove_outlier_observations(bmap, problem, poses, points, threshold=CHI2):
    """Drop map observations whose whitened chi^2 exceeds ``threshold``; then drop
    points left with fewer than two views."""
    chi2 = opt.chi2_errors(problem, poses, points)
    removed = 0
    touched = set()
    for ob, c in zip(problem.observations, chi2):
        if c > threshold:
            mp = bmap.points.get(ob.point_id)
            if mp is not None and (ob.frame_id, ob.camera_id) in mp.observations:
                bmap.remove_observation(ob.point_id, ob.frame_id, ob.camera_id)
                touched.add(ob.point_id)
                removed += 1
    for p in touched:
        if p in bmap.points and len(bmap.points[p].observations) < 2:
            bmap.remove_point(p)
    return removed


def local_bundle_adjustment(bmap, kf_id, rig, settings=MappingSettings(), solver=None):
    solver = solver or opt.SolverSettings(max_iterations=settings.local_ba_iterations)
    problem = opt.build_local_ba(bmap, kf_id, rig, settings=solver)
    if not problem.observations:
        return None
    poses, points, _, report = opt.solve_with_outlier_rounds(problem, rounds=settings.local_ba_rounds)
    apply_solution(bmap, problem, poses, points)
    report.n_removed = remove_outlier_observations(bmap, problem, poses, points)
    return report


def global_bundle_adjustment(bmap, rig, iterations=15, rounds=2):
    problem = opt.build_global_ba(bmap, rig, settings=opt.SolverSettings(max_iterations=iterations))
    if not problem.observations:
        return None
    poses, points, _, report = opt.solve_with_outlier_rounds(problem, rounds=rounds)
    apply_solution(bmap, problem, poses, points)
    report.n_removed = remove_outlier_observations(bmap, problem, poses, points)
    return report
