import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import synthetic_map
from rigslam import mapping, se3
from rigslam.bundled import BundledMap, bundle_features
from rigslam.optimizer import build_local_ba, local_ba_sets
from rigslam.rig import load_preset
from rigslam.synthetic import TrajectorySpec, generate_scene, landmark_lookup, simulate, to_bundled_frame

RIG = load_preset("stereo")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 5))
def test_midpoint_exact_for_noiseless_rays(seed, k):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-3, 3, 3)
    origins = p + rng.uniform(-2, 2, (k, 3)) + 3.0
    dirs = p - origins
    dirs *= rng.uniform(0.2, 5.0, (k, 1))
    assert np.allclose(mapping.triangulate_midpoint(origins, dirs), p, atol=1e-9)


def test_midpoint_batched_matches_single_and_mask(rng):
    o = rng.normal(size=(6, 3, 3))
    d = rng.normal(size=(6, 3, 3))
    mask = np.ones((6, 3), bool)
    mask[2, 2] = False
    batch = mapping.triangulate_midpoint(o, d, mask)
    for n in range(6):
        use = mask[n]
        assert np.allclose(batch[n], mapping.triangulate_midpoint(o[n][use], d[n][use]), atol=1e-10)


def test_parallel_rays_give_nan():
    o = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    d = np.array([[0.0, 0, 1], [0.0, 0, 1]])
    assert np.isnan(mapping.triangulate_midpoint(o, d)).all()


def test_parallax_cos_brute_force(rng):
    d = rng.normal(size=(4, 5, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    got = mapping.max_parallax_cos(d)
    for n in range(4):
        assert got[n] == pytest.approx(min(d[n, a] @ d[n, b] for a in range(5) for b in range(5)))


def _noiseless_frames(n=3, rate=5.0):
    scene = generate_scene(800, ((-5, -5, -1.5), (5, 5, 1.5)), 0, layout="walls")
    spec = TrajectorySpec("circle", duration=10.0, rate=rate, size=1.5)
    sims = simulate(scene, RIG, spec, sigma=0.0, seed=0, descriptor_flips=0)[:n]
    frames = []
    for s in sims:
        fr = bundle_features(to_bundled_frame(s, RIG), RIG)
        fr.pose = s.true_pose
        frames.append(fr)
    return scene, sims, frames


def test_multicamera_points_land_on_landmarks():
    scene, sims, frames = _noiseless_frames(1)
    m = BundledMap(15)
    k = m.insert_keyframe(frames[0])
    created = mapping.create_multicamera_points(m, k, RIG)
    assert len(created) > 50
    truth = landmark_lookup(sims[0])
    for pid in created:
        mp = m.points[pid]
        lids = {truth[(cam, idx)] for (_, cam), idx in mp.observations.items()}
        assert len(lids) == 1 and len(mp.observations) == 2
        assert np.allclose(mp.position, scene.positions[lids.pop()], atol=1e-8)
    m.check_integrity()


def test_temporal_points_single_camera():
    mono = RIG.subset(1)
    scene = generate_scene(800, ((-5, -5, -1.5), (5, 5, 1.5)), 0, layout="walls")
    spec = TrajectorySpec("circle", duration=10.0, rate=5.0, size=1.5)
    sims = simulate(scene, mono, spec, sigma=0.0, seed=0, descriptor_flips=0)[:2]
    m = BundledMap(15)
    for s in sims:
        fr = bundle_features(to_bundled_frame(s, mono), mono)
        fr.pose = s.true_pose
        m.insert_keyframe(fr)
    created = mapping.create_temporal_points(m, 1, mono, [0])
    assert len(created) > 50
    for pid in created:
        mp = m.points[pid]
        idx = mp.observations[(1, 0)]
        lid = int(sims[1].cameras[0].landmark_ids[idx])
        assert np.allclose(mp.position, scene.positions[lid], atol=1e-6)
    assert m.covisibility.weight(0, 1) == len(created)


def test_fuse_links_relabelled_keyframes():
    scene = generate_scene(600, ((-5, -5, -1.5), (5, 5, 1.5)), 0, layout="walls")
    m, _, sims = synthetic_map(RIG, n_kf=20, sigma=0.0, scene=scene, relabel_from=10)
    own = sorted(m.keyframe_points(10))
    assert m.covisibility.weight(9, 10) == 0
    merged = mapping.fuse_into(m, 9, own, RIG)
    assert merged > 20
    assert m.covisibility.weight(9, 10) > 0
    m.check_integrity()
    # every point still gathers observations of a single landmark
    truth = [landmark_lookup(s) for s in sims]
    for mp in m.points.values():
        lids = {truth[k][(cam, idx)] for (k, cam), idx in mp.observations.items()}
        assert len(lids) == 1


def test_local_ba_only_moves_window():
    scene = generate_scene(600, ((-5, -5, -1.5), (5, 5, 1.5)), 1, layout="walls")
    m, _, _ = synthetic_map(RIG, n_kf=12, sigma=0.5, scene=scene, seed=1)
    rng = np.random.default_rng(0)
    for k in range(1, 12):
        kf = m.keyframes[k]
        kf.pose = type(kf.pose)(se3.compose(se3.exp_se3(rng.normal(0, 0.01, 6)), kf.pose.c1), kf.pose.timestamp)
    before = {k: kf.pose.c1.matrix().tobytes() for k, kf in m.keyframes.items()}
    window, _, _ = local_ba_sets(m, 11)
    rep = mapping.local_bundle_adjustment(m, 11, RIG)
    assert rep is not None
    moved = {k for k in m.keyframes if m.keyframes[k].pose.c1.matrix().tobytes() != before[k]}
    assert moved and moved <= set(window)
    m.check_integrity()


def test_local_ba_keeps_origin_fixed():
    scene = generate_scene(600, ((-5, -5, -1.5), (5, 5, 1.5)), 1, layout="walls")
    m, _, _ = synthetic_map(RIG, n_kf=12, sigma=0.5, scene=scene, seed=1)
    k0 = m.keyframes[0].pose.c1.matrix().tobytes()
    # the circle closes on itself, so keyframe 0 sits in the windows of 1 and 11
    for center in (1, 11):
        window, border, _ = local_ba_sets(m, center)
        assert 0 in window and border
        assert 0 in build_local_ba(m, center, RIG).fixed_poses
        mapping.local_bundle_adjustment(m, center, RIG)
        assert m.keyframes[0].pose.c1.matrix().tobytes() == k0
