import io

import numpy as np
import pytest

from rigslam import se3
from rigslam.descriptors import hamming_matrix
from rigslam.errors import SeparationUnsatisfiable
from rigslam.rig import Z_MIN, camera_pose, load_preset, observe
from rigslam.synthetic import (MAX_LANDMARKS, TrajectorySpec, dump_observations, generate_scene,
                               inject_drift, landmark_lookup, load_observations, preset_world,
                               simulate, to_bundled_frame, trajectory)

RIG = load_preset("stereo")
BOUNDS = ((-5, -5, -1.5), (5, 5, 1.5))


def test_single_landmark_inside_bounds():
    s = generate_scene(1, BOUNDS, 0)
    assert len(s) == 1
    assert np.all(s.positions >= BOUNDS[0]) and np.all(s.positions <= BOUNDS[1])


def test_scene_deterministic():
    a, b = generate_scene(300, BOUNDS, 4, layout="walls"), generate_scene(300, BOUNDS, 4, layout="walls")
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.descriptors.tobytes() == b.descriptors.tobytes()
    assert generate_scene(300, BOUNDS, 5).descriptors.tobytes() != a.descriptors.tobytes()


def test_descriptor_separation_exhaustive():
    d = generate_scene(1000, BOUNDS, 0).descriptors
    dm = hamming_matrix(d, d)
    np.fill_diagonal(dm, 256)
    assert dm.min() >= 101


def test_scene_errors():
    with pytest.raises(SeparationUnsatisfiable):
        generate_scene(MAX_LANDMARKS + 1, BOUNDS, 0)
    with pytest.raises(ValueError):
        generate_scene(0, BOUNDS, 0)


def test_wall_layout_on_faces():
    s = generate_scene(500, BOUNDS, 2, layout="walls")
    on_x = np.isclose(np.abs(s.positions[:, 0]), 5.0)
    on_y = np.isclose(np.abs(s.positions[:, 1]), 5.0)
    assert np.all(on_x | on_y)


SPEC = TrajectorySpec("circle", duration=4.0, rate=5.0, size=1.5)


def test_noiseless_pixels_equal_observe():
    scene = generate_scene(400, BOUNDS, 1, layout="walls")
    sims = simulate(scene, RIG, SPEC, sigma=0.0, seed=3)
    n = 0
    for fr in sims:
        for i, cam in enumerate(fr.cameras):
            for lid, px in zip(cam.landmark_ids, cam.pixels):
                uv, inside = observe(RIG, fr.true_pose, i, scene.positions[lid])
                assert inside
                assert np.array_equal(px, uv)
                n += 1
    assert n > 500


def _noise_samples(sigma, outliers=0.0, n_frames=300):
    scene, _ = preset_world("circle", 0)
    spec = TrajectorySpec("circle", duration=n_frames / 20.0, rate=20.0, size=1.5)
    sims = simulate(scene, RIG, spec, sigma=sigma, outlier_fraction=outliers, seed=9)
    err, flags = [], []
    for fr in sims:
        for i, cam in enumerate(fr.cameras):
            intr = RIG.intrinsics[i]
            uv = np.array([observe(RIG, fr.true_pose, i, scene.positions[l])[0] for l in cam.landmark_ids])
            # keep clear of the border where noisy pixels are clamped
            away = ((uv[:, 0] > 10) & (uv[:, 0] < intr.width - 10) &
                    (uv[:, 1] > 10) & (uv[:, 1] < intr.height - 10))
            err.append((cam.pixels - uv)[away & ~cam.is_outlier])
            flags.append(cam.is_outlier)
    return np.concatenate(err), np.concatenate(flags)


def test_pixel_noise_statistics():
    err, _ = _noise_samples(1.0)
    assert len(err) >= 100_000
    assert np.all(np.abs(err.mean(axis=0)) < 0.02)
    assert np.all(np.abs(err.var(axis=0) - 1.0) < 0.05)
    # non-outlier entries sit within 6 sigma of their noiseless reprojection
    assert np.abs(err).max() < 6.0


def test_outlier_fraction():
    _, flags = _noise_samples(1.0, outliers=0.2, n_frames=30)
    assert len(flags) >= 10_000
    assert abs(flags.mean() - 0.2) <= 0.02


def test_visibility():
    scene = generate_scene(600, ((-4, -4, -1), (4, 4, 1)), 5)
    sims = simulate(scene, RIG, SPEC, sigma=0.0, seed=0)
    for fr in sims:
        for i, cam in enumerate(fr.cameras):
            p_cam = se3.act(camera_pose(RIG, fr.true_pose, i), scene.positions)
            seen = set(cam.landmark_ids.tolist())
            for lid in range(len(scene)):
                uv, inside = (observe(RIG, fr.true_pose, i, scene.positions[lid])
                              if p_cam[lid, 2] > Z_MIN else (None, False))
                assert (lid in seen) == (inside and p_cam[lid, 2] < 30.0)


def test_simulation_deterministic_and_ids_withheld():
    scene = generate_scene(400, BOUNDS, 1, layout="walls")
    a = simulate(scene, RIG, SPEC, sigma=1.0, outlier_fraction=0.1, seed=2)
    b = simulate(scene, RIG, SPEC, sigma=1.0, outlier_fraction=0.1, seed=2)
    fa, fb = io.StringIO(), io.StringIO()
    dump_observations(a, fa)
    dump_observations(b, fb)
    assert fa.getvalue() == fb.getvalue()
    fr = to_bundled_frame(a[0], RIG)
    assert all((c.unique_ids == -1).all() for c in fr.cameras)
    assert len(landmark_lookup(a[0])) == sum(len(c) for c in fr.cameras)


def test_dump_round_trip():
    scene = generate_scene(300, BOUNDS, 1, layout="walls")
    sims = simulate(scene, RIG, SPEC, sigma=1.0, outlier_fraction=0.1, seed=2)
    buf = io.StringIO()
    dump_observations(sims, buf)
    buf.seek(0)
    back = load_observations(buf, len(RIG))
    assert len(back) == len(sims)
    for x, y in zip(sims, back):
        assert x.timestamp == y.timestamp
        assert np.allclose(x.true_pose.c1.matrix(), y.true_pose.c1.matrix(), atol=1e-12)
        for cx, cy in zip(x.cameras, y.cameras):
            assert np.array_equal(cx.landmark_ids, cy.landmark_ids)
            assert np.array_equal(cx.pixels, cy.pixels)
            assert np.array_equal(cx.descriptors, cy.descriptors)
            assert np.array_equal(cx.is_outlier, cy.is_outlier)


def test_dump_rejects_garbage():
    with pytest.raises(ValueError, match="line 2"):
        load_observations(io.StringIO("# header\nbogus 1 2\n"), 2)


def test_trajectory_spec_validation():
    with pytest.raises(ValueError):
        TrajectorySpec("spiral")
    with pytest.raises(ValueError):
        TrajectorySpec(rate=0.0)
    assert len(trajectory(SPEC)) == SPEC.n_frames == 20


def test_square_loop_closes_on_itself():
    spec = TrajectorySpec("square-loop", duration=8.0, rate=10.0, size=1.5, loops=1.0)
    poses = trajectory(spec)
    centers = np.array([p.c1.center() for p in poses])
    assert np.allclose(np.abs(centers[:, :2]).max(axis=1), 1.5)
    # one frame past the end lands back at the start
    step = np.linalg.norm(centers[1] - centers[0])
    assert np.linalg.norm(centers[-1] - centers[0]) == pytest.approx(step, rel=1e-9)


def test_inject_drift():
    spec = TrajectorySpec("square-loop", duration=8.0, rate=10.0, size=1.5)
    gt = trajectory(spec)
    same = inject_drift(gt, 0.0)
    assert same[0] is gt[0]
    for a, b in zip(same, gt):
        assert np.allclose(a.c1.matrix(), b.c1.matrix(), atol=1e-9)
    dr = inject_drift(gt, 0.02)
    err = np.array([np.linalg.norm(a.c1.center() - b.c1.center()) for a, b in zip(dr, gt)])
    assert err[0] == 0.0
    # error accumulates with distance travelled
    assert err[-1] > err[len(err) // 4] > 0.0
    assert err[-1] > 0.05
