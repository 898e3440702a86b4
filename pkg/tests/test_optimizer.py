import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from rigslam import optimizer as opt
from rigslam import se3
from rigslam.bundled import BundledMap
from rigslam.errors import BehindCamera, TooFewMatches, UnknownId
from rigslam.jacobian_check import check_jacobians, numeric_jacobians, random_configuration
from rigslam.rig import CameraRig, PinholeIntrinsics, RigPose, camera_pose, load_preset, observe
from rigslam.se3 import RigidTransform

from conftest import random_transform, synthetic_map

K500 = PinholeIntrinsics(500, 500, 320, 240, 640, 480)
MONO = CameraRig((K500,), (RigidTransform.identity(),))
IDENT = RigPose(RigidTransform.identity())


# --- single observation ------------------------------------------------------------

def test_residual_examples(rng):
    rig = load_preset("stereo")
    pose = RigPose(random_transform(rng, max_angle=0.2, scale=0.3))
    p = se3.act(pose.c1.inverse(), [0.3, -0.2, 4.0])
    u, _ = observe(rig, pose, 1, p)
    np.testing.assert_allclose(opt.residual(rig, pose, 1, p, u), [0, 0], atol=1e-12)
    np.testing.assert_allclose(opt.residual(rig, pose, 1, p, u + [1, -2]), [1, -2], atol=1e-12)
    with pytest.raises(BehindCamera):
        opt.residual(rig, IDENT, 0, [0, 0, -1], [0, 0])


def test_residual_matches_chained_reimplementation():
    for index in range(50):
        cfg = random_configuration(5, index)
        m = cfg.rig.extrinsics[cfg.camera].matrix() @ cfg.pose.c1.matrix()
        x, y, z = (m @ np.append(cfg.point, 1))[:3]
        k = cfg.rig.intrinsics[cfg.camera]
        expect = cfg.pixel - [k.fx * x / z + k.cx, k.fy * y / z + k.cy]
        np.testing.assert_allclose(opt.residual(cfg.rig, cfg.pose, cfg.camera, cfg.point, cfg.pixel),
                                   expect, atol=1e-9)


def test_pose_jacobian_hand_values():
    j = opt.jacobian_pose(MONO, IDENT, 0, [0, 0, 2])
    np.testing.assert_allclose(j[:, 3:], -np.array([[250, 0, 0], [0, 250, 0]]), atol=1e-12)
    # rotation block for a point on the optical axis, frozen after a finite-difference check
    np.testing.assert_allclose(j[:, :3], [[0, -500, 0], [500, 0, 0]], atol=1e-12)
    cfg = random_configuration(0, 0)
    cfg.rig, cfg.pose, cfg.camera, cfg.point, cfg.pixel = MONO, IDENT, 0, np.array([0, 0, 2.0]), np.zeros(2)
    jp, jx = numeric_jacobians(cfg)
    np.testing.assert_allclose(jp, j, atol=1e-6)


def test_point_jacobian_hand_values():
    j = opt.jacobian_point(MONO, IDENT, 0, [0, 0, 2])
    np.testing.assert_allclose(j, -np.array([[250, 0, 0], [0, 250, 0]]), atol=1e-12)


def test_jacobians_raise_behind_camera():
    with pytest.raises(BehindCamera):
        opt.jacobian_pose(MONO, IDENT, 0, [0, 0, -2])
    with pytest.raises(BehindCamera):
        opt.jacobian_point(MONO, IDENT, 0, [0, 0, 0])


def test_jacobians_against_finite_differences():
    res = check_jacobians(seed=17, trials=200)
    assert res.passed, res


def test_negated_jacobian_is_caught():
    res = check_jacobians(seed=0, trials=5, jacobian_pose=lambda *a: -opt.jacobian_pose(*a))
    assert not res.passed and res.worst_block == "pose"


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_point_jacobian_world_rotation_equivariance(seed):
    cfg = random_configuration(seed % 1000, seed // 1000)
    g = RigidTransform(random_transform(np.random.default_rng(seed)).rotation, np.zeros(3))
    j = opt.jacobian_point(cfg.rig, cfg.pose, cfg.camera, cfg.point)
    moved = RigPose(se3.compose(cfg.pose.c1, g.inverse()))
    jg = opt.jacobian_point(cfg.rig, moved, cfg.camera, se3.act(g, cfg.point))
    np.testing.assert_allclose(jg, j @ g.rotation.T, atol=1e-9 * max(1.0, np.abs(j).max()))


# --- Huber ---------------------------------------------------------------------------

def test_huber_values():
    d = opt.HUBER_DELTA
    assert opt.huber_cost(0.0, d) == (0.0, 1.0)
    c, w = opt.huber_cost(d * d, d)
    assert math.isclose(c, d * d) and w == 1.0
    c, w = opt.huber_cost(4 * d * d, d)
    assert math.isclose(c, 3 * d * d) and math.isclose(w, 0.5)
    eps = 1e-7
    lo, hi = opt.huber_cost(d * d - eps, d), opt.huber_cost(d * d + eps, d)
    assert abs(hi[0] - lo[0]) < 3 * eps and abs(hi[1] - lo[1]) < 1e-6
    with pytest.raises(ValueError):
        opt.HuberKernel(0.0)


@given(st.floats(0, 1e6), st.floats(0.1, 10))
def test_huber_weight_is_derivative(r2, delta):
    h = 1e-6 * max(1.0, r2)
    c0 = opt.huber_cost(max(r2 - h, 0.0), delta)[0]
    c1 = opt.huber_cost(r2 + h, delta)[0]
    if abs(r2 - delta * delta) > 2 * h:
        slope = (c1 - c0) / (r2 + h - max(r2 - h, 0.0))
        assert math.isclose(opt.huber_cost(r2, delta)[1], slope, rel_tol=1e-4, abs_tol=1e-9)
    assert opt.huber_cost(r2, delta)[0] <= r2 + 1e-9


# --- problems -------------------------------------------------------------------------

def scene_problem(rig, n_poses, n_points, sigma, rng, fixed_poses=(), free_points=True):
    pts = {j: np.array([rng.uniform(-2, 2), rng.uniform(-1.5, 1.5), rng.uniform(4, 8)]) for j in range(n_points)}
    poses, obs = {}, []
    for k in range(n_poses):
        poses[k] = RigidTransform(se3.exp_so3(rng.normal(0, 0.05, 3)), rng.normal(0, 0.3, 3))
        for cam in range(len(rig)):
            for j, p in pts.items():
                u, ok = observe(rig, RigPose(poses[k]), cam, p)
                if ok:
                    obs.append(opt.Observation(k, cam, j, u + sigma * rng.standard_normal(2),
                                               rig.information(cam)))
    fixed_points = set() if free_points else set(pts)
    return opt.BaProblem(rig, poses, pts, obs, set(fixed_poses), fixed_points)


def perturb(t, rng, size):
    xi = rng.standard_normal(6)
    return se3.compose(se3.exp_se3(size * xi / np.linalg.norm(xi)), t)


def pose_error(a, b):
    d = se3.compose(a, b.inverse())
    return se3.rotation_angle(d.rotation), float(np.linalg.norm(a.center() - b.center()))


def test_problem_rejects_dangling_observation():
    with pytest.raises(UnknownId):
        opt.BaProblem(MONO, {0: RigidTransform.identity()}, {}, [opt.Observation(0, 0, 5, [1, 1])])


def test_zero_residual_start_is_untouched(rng):
    prob = scene_problem(load_preset("stereo"), 2, 20, 0.0, rng, fixed_poses=(0,))
    poses, points, rep = opt.solve_lm(prob)
    assert rep.iterations <= 1
    for k in prob.poses:
        np.testing.assert_allclose(poses[k].matrix(), prob.poses[k].matrix(), atol=1e-12)
    for j in prob.points:
        np.testing.assert_allclose(points[j], prob.points[j], atol=1e-12)


def test_motion_only_exact_recovery(rng):
    rig = load_preset("stereo")
    for _ in range(20):
        prob = scene_problem(rig, 1, 30, 0.0, rng, free_points=False)
        truth = prob.poses[0]
        prob.poses[0] = perturb(truth, rng, 0.1)
        poses, _, rep = opt.solve_lm(prob)
        ang, dist = pose_error(poses[0], truth)
        assert ang < 1e-8 and dist < 1e-8, rep.termination


def reference_cost(prob, poses, points):
    """Independent scalar robust cost written from the definition."""
    total = 0.0
    d = prob.kernel.delta
    for ob in prob.observations:
        t = camera_pose(prob.rig, poses[ob.frame_id], ob.camera_id)
        pc = t.rotation @ points[ob.point_id] + t.translation
        k = prob.rig.intrinsics[ob.camera_id]
        e = ob.pixel - [k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy]
        r2 = float(e @ ob.information @ e)
        total += r2 if r2 <= d * d else 2 * d * math.sqrt(r2) - d * d
    return total


def test_dense_problem_matches_generic_minimizer():
    rng = np.random.default_rng(21)
    rig = load_preset("stereo")
    prob = scene_problem(rig, 3, 10, 1.0, rng, fixed_poses=(0,))
    start_poses = {k: (t if k == 0 else perturb(t, rng, 0.02)) for k, t in prob.poses.items()}
    start_pts = {j: p + rng.normal(0, 0.05, 3) for j, p in prob.points.items()}
    prob.poses, prob.points = start_poses, start_pts
    _, _, rep = opt.solve_lm(prob)

    def unpack(x):
        poses = {0: start_poses[0]}
        for n, k in enumerate((1, 2)):
            poses[k] = se3.compose(se3.exp_se3(x[6 * n:6 * n + 6]), start_poses[k])
        pts = {j: start_pts[j] + x[12 + 3 * j:15 + 3 * j] for j in start_pts}
        return poses, pts

    res = minimize(lambda x: reference_cost(prob, *unpack(x)), np.zeros(12 + 30), method="BFGS",
                   options={"gtol": 1e-10, "maxiter": 20000})
    assert math.isclose(rep.final_cost, res.fun, rel_tol=1e-6)
    assert math.isclose(rep.final_cost, reference_cost(prob, *opt.solve_lm(prob)[:2]), rel_tol=1e-12)


def test_accepted_steps_decrease_cost():
    rng = np.random.default_rng(4)
    prob = scene_problem(load_preset("trinocular"), 4, 40, 1.0, rng, fixed_poses=(0,))
    prob.poses = {k: t if k == 0 else perturb(t, rng, 0.05) for k, t in prob.poses.items()}
    _, _, rep = opt.solve_lm(prob)
    assert all(b < a for a, b in zip(rep.cost_trace, rep.cost_trace[1:]))
    assert rep.final_cost == rep.cost_trace[-1] < rep.initial_cost


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=10, deadline=None)
def test_gauge_invariance_of_final_cost(seed):
    rng = np.random.default_rng(seed)
    rig = load_preset("stereo")
    prob = scene_problem(rig, 2, 15, 1.0, rng, fixed_poses=(0,))
    g = random_transform(rng)
    moved = opt.BaProblem(rig, {k: se3.compose(t, g.inverse()) for k, t in prob.poses.items()},
                          {j: se3.act(g, p) for j, p in prob.points.items()},
                          prob.observations, {0}, set())
    r0 = opt.chi2_errors(prob)
    np.testing.assert_allclose(opt.chi2_errors(moved), r0, rtol=1e-9, atol=1e-12)
    a = opt.solve_lm(prob)[2].final_cost
    b = opt.solve_lm(moved)[2].final_cost
    assert abs(a - b) <= 1e-9 * max(1.0, a)


def test_single_outlier_has_bounded_influence():
    rng = np.random.default_rng(8)
    rig = MONO
    errs_clean, errs_bad = [], []
    for _ in range(10):
        prob = scene_problem(rig, 1, 40, 1.0, rng, free_points=False)
        assert len(prob.observations) == 40
        truth = prob.poses[0]
        prob.poses[0] = perturb(truth, rng, 0.02)
        clean = opt.solve_lm(prob)[0][0]
        prob.observations[7].pixel = prob.observations[7].pixel + [400.0, -300.0]
        bad = opt.solve_lm(prob)[0][0]
        errs_clean.append(pose_error(clean, truth)[1])
        errs_bad.append(pose_error(bad, truth)[1])
    assert np.mean(errs_bad) < 5 * np.mean(errs_clean)


def test_outlier_rounds_flag_the_corrupted_observation(rng):
    prob = scene_problem(load_preset("stereo"), 1, 30, 0.0, rng, free_points=False)
    prob.observations[3].pixel = prob.observations[3].pixel + [30.0, 30.0]
    truth = prob.poses[0]
    prob.poses[0] = perturb(truth, rng, 0.05)
    poses, _, inliers, _ = opt.solve_with_outlier_rounds(prob)
    assert not inliers[3] and inliers.sum() == len(inliers) - 1
    assert pose_error(poses[0], truth)[1] < 1e-8


def test_noiseless_inliers_equal_matches(rng):
    prob = scene_problem(load_preset("stereo"), 1, 30, 0.0, rng, free_points=False)
    prob.poses[0] = perturb(prob.poses[0], rng, 0.05)
    assert opt.solve_with_outlier_rounds(prob)[2].all()


def test_fixed_variables_are_identical_objects(rng):
    prob = scene_problem(load_preset("stereo"), 3, 15, 1.0, rng, fixed_poses=(0, 2))
    prob.fixed_points = {0, 1}
    before = {k: prob.poses[k].matrix().tobytes() for k in (0, 2)}
    poses, points, _ = opt.solve_lm(prob)
    for k in (0, 2):
        assert poses[k] is prob.poses[k] and poses[k].matrix().tobytes() == before[k]
    assert points[0] is prob.points[0]


def test_trace_round_trip(tmp_path, rng):
    prob = scene_problem(load_preset("stereo"), 2, 15, 1.0, rng, fixed_poses=(0,))
    prob.poses[1] = perturb(prob.poses[1], rng, 0.05)
    rep = opt.solve_lm(prob)[2]
    rep.write_trace(tmp_path / "t.txt")
    rows = opt.read_trace(tmp_path / "t.txt")
    assert [r[2] for r in rows] == rep.cost_trace
    assert [r[0] for r in rows] == list(range(len(rep.cost_trace)))


# --- builders on maps ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def loop_map():
    return synthetic_map(load_preset("stereo"), n_kf=10, sigma=0.5, seed=3)


def test_build_motion_only_counts():
    rig = load_preset("stereo")
    m, scene, sims = synthetic_map(rig, n_kf=10, seed=1)
    sim = sims[4]
    frame = m.keyframes[4].frame
    shared = sorted(set(sim.cameras[0].landmark_ids) & set(sim.cameras[1].landmark_ids) & set(m.points))[:20]
    matches = []
    for cam in (0, 1):
        ids = list(sim.cameras[cam].landmark_ids)
        matches += [(cam, ids.index(l), int(l)) for l in shared]
    prob = opt.build_motion_only(m, frame, matches, rig)
    assert prob.free_pose_ids() == ["frame"] and len(prob.observations) == 40
    assert prob.fixed_points == set(shared) and len(shared) == 20
    with pytest.raises(TooFewMatches):
        opt.build_motion_only(m, frame, matches[:5], rig)


def test_mono_rig_matches_camera_one_only_problem(rng):
    rig = load_preset("stereo")
    prob = scene_problem(rig, 1, 30, 1.0, rng, free_points=False)
    prob.poses[0] = perturb(prob.poses[0], rng, 0.05)
    cam0 = [o for o in prob.observations if o.camera_id == 0]
    a = opt.solve_lm(opt.BaProblem(rig.subset(1), prob.poses, prob.points, cam0, set(), set(prob.points)))
    b = opt.solve_lm(opt.BaProblem(rig, prob.poses, prob.points, cam0, set(), set(prob.points)))
    np.testing.assert_allclose(a[0][0].matrix(), b[0][0].matrix(), atol=1e-12)
    full = opt.solve_lm(prob)
    assert pose_error(full[0][0], a[0][0])[1] > 1e-6     # camera 2 changes the optimum


def brute_sets(m, center):
    local = {center} | {k for k in m.keyframes if k != center and m.covisibility.shared(center, k) >= m.covisibility.theta}
    pts = {p for p, mp in m.points.items() if mp.keyframes() & local}
    fixed = {k for k in m.keyframes if k not in local and any(k in m.points[p].keyframes() for p in pts)}
    return local, fixed, pts


def test_local_sets_match_definitions(loop_map):
    m = loop_map[0]
    for center in m.keyframes:
        assert opt.local_ba_sets(m, center) == brute_sets(m, center)


def test_local_sets_on_random_maps():
    rng = np.random.default_rng(5)
    m, _, _ = synthetic_map(load_preset("stereo"), n_kf=12, seed=9)
    for pid in rng.choice(sorted(m.points), 150, replace=False):
        m.remove_point(int(pid))
    for center in m.keyframes:
        assert opt.local_ba_sets(m, center) == brute_sets(m, center)


def chain_map():
    from test_bundled import toy_frame
    m = BundledMap(theta_cov=2)
    ks = [m.insert_keyframe(toy_frame(t=float(i))) for i in range(4)]
    for a, b in ((0, 1), (1, 2)):
        for j in range(3):
            p = m.add_point(np.array([0.0, 0.0, 5.0]), np.zeros(32, np.uint8))
            m.add_observation(p, a, 0, 10 * a + j)
            m.add_observation(p, b, 1, 10 * a + j)
    return m, ks


def test_local_ba_chain_and_isolated():
    m, _ = chain_map()
    local, fixed, _ = opt.local_ba_sets(m, 1)
    assert local == {0, 1, 2} and fixed == set()
    prob = opt.build_local_ba(m, 1, load_preset("stereo"))
    assert prob.fixed_poses == {0} and set(prob.free_pose_ids()) == {1, 2}
    iso = opt.build_local_ba(m, 3, load_preset("stereo"))
    assert iso.fixed_poses == {3} and iso.free_pose_ids() == []
    with pytest.raises(UnknownId):
        opt.build_local_ba(m, 99, load_preset("stereo"))


def test_global_ba_single_keyframe():
    m, _ = chain_map()
    for k in (1, 2, 3):
        m.remove_keyframe(k)
    prob = opt.build_global_ba(m, load_preset("stereo"))
    assert prob.fixed_poses == {0} and prob.free_pose_ids() == []


def ate(poses, truth):
    from rigslam.evaluation import PosePair, align_umeyama_se3, ate_rmse
    pairs = [PosePair(float(k), poses[k].center(), truth[k].center()) for k in truth]
    return ate_rmse(pairs, align_umeyama_se3(pairs))


@pytest.mark.parametrize("seed", [0, 3])
def test_global_ba_shrinks_perturbation(seed):
    from rigslam.synthetic import TrajectorySpec, generate_scene
    rig = load_preset("stereo")
    # ten keyframes on a circle, all looking at a central cloud of landmarks
    scene = generate_scene(300, ((-1.5, -1.5, -1), (1.5, 1.5, 1)), seed)
    spec = TrajectorySpec("circle", duration=10.0, rate=1.0, size=3.0, look="inward")
    m, _, sims = synthetic_map(rig, sigma=0.5, seed=seed, scene=scene, spec=spec)
    truth = {k: sims[k].true_pose.c1 for k in m.keyframes}
    rng = np.random.default_rng(seed)
    for k in m.keyframes:
        if k:
            m.keyframes[k].pose = RigPose(se3.compose(se3.exp_se3(rng.normal(0, 0.05, 6)), truth[k]))
    prob = opt.build_global_ba(m, rig)
    origin = prob.poses[0].matrix().tobytes()
    ext = [e.matrix().tobytes() for e in rig.extrinsics]
    pre = ate(prob.poses, truth)
    poses, _, _ = opt.solve_lm(prob)
    assert ate(poses, truth) < 0.1 * pre
    assert poses[0].matrix().tobytes() == origin
    assert [e.matrix().tobytes() for e in rig.extrinsics] == ext
