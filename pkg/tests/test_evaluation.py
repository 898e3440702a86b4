import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_transform
from rigslam import se3
from rigslam.errors import DegenerateGeometry, NoOverlap
from rigslam.evaluation import (PosePair, TrajectoryRecord, align_umeyama_se3, ape_series,
                                associate, ate_rmse, evaluate, format_trajectory,
                                parse_trajectory, read_trajectory, summarize, write_trajectory)
from rigslam.se3 import RigidTransform


def _record(ts, rng):
    return TrajectoryRecord(ts, [random_transform(rng) for _ in range(len(ts))])


def test_identical_stamps_pair_fully(rng):
    ts = np.arange(50) * 0.05
    pairs = associate(_record(ts, rng), _record(ts, rng), 0.01)
    assert [p.timestamp for p in pairs] == list(ts)


def test_half_tolerance_offset_pairs_fully(rng):
    ts = np.arange(50) * 0.05
    pairs = associate(_record(ts + 0.005, rng), _record(ts, rng), 0.01)
    assert len(pairs) == 50


def test_jitter_pairs_exactly_the_tolerant_subset(rng):
    ts = np.arange(200) * 0.05
    jitter = rng.uniform(-0.02, 0.02, 200)
    est, gt = _record(ts + jitter, rng), _record(ts, rng)
    pairs = associate(est, gt, 0.01)
    # brute force: every (i, j) within tolerance; stamps are spaced so each est has at most one
    brute = [(i, j) for i in range(200) for j in range(200)
             if abs(est.timestamps[i] - gt.timestamps[j]) <= 0.01]
    assert len({i for i, _ in brute}) == len(brute)
    assert [p.timestamp for p in pairs] == [float(est.timestamps[i]) for i, _ in brute]
    ge, gg = est.positions(), gt.positions()
    for p, (i, j) in zip(pairs, brute):
        assert np.array_equal(p.est, ge[i]) and np.array_equal(p.gt, gg[j])


def test_greedy_prefers_closest(rng):
    est = _record([1.0, 1.004], rng)
    gt = _record([1.003], rng)
    pairs = associate(est, gt, 0.01)
    assert len(pairs) == 1 and pairs[0].timestamp == 1.004


def test_association_errors(rng):
    with pytest.raises(NoOverlap):
        associate(_record([0.0, 1.0], rng), _record([5.0], rng), 0.1)
    with pytest.raises(ValueError):
        associate(_record([0.0], rng), _record([0.0], rng), 0.0)
    with pytest.raises(ValueError):
        TrajectoryRecord([1.0, 1.0], [RigidTransform.identity()] * 2)


def _pairs(est, gt):
    return [PosePair(float(n), e, g) for n, (e, g) in enumerate(zip(est, gt))]


def test_alignment_identity_and_zero():
    gt = np.random.default_rng(0).normal(size=(30, 3))
    pairs = _pairs(gt, gt)
    g = align_umeyama_se3(pairs)
    assert g == RigidTransform.identity()
    assert ate_rmse(pairs, g) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_alignment_recovers_transform(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(40, 3)) * 3
    g = random_transform(rng)
    est = se3.act(g, gt)
    a = align_umeyama_se3(_pairs(est, gt))
    assert np.abs(a.matrix() - g.inverse().matrix()).max() < 1e-9


def _cost(pairs, g):
    return float(np.sum(ape_series(pairs, g) ** 2))


def test_alignment_beats_random_search():
    rng = np.random.default_rng(4)
    gt = rng.normal(size=(25, 3)) * 2
    est = se3.act(random_transform(rng), gt) + rng.normal(0, 0.1, gt.shape)
    pairs = _pairs(est, gt)
    best = _cost(pairs, align_umeyama_se3(pairs))
    a = align_umeyama_se3(pairs)
    for _ in range(1000):
        probe = se3.compose(se3.exp_se3(rng.normal(0, 0.05, 6)), a)
        assert _cost(pairs, probe) >= best - 1e-9
        assert _cost(pairs, random_transform(rng)) >= best


def test_degenerate_alignment():
    line = np.outer(np.arange(10.0), [1.0, 2.0, 0.5])
    with pytest.raises(DegenerateGeometry):
        align_umeyama_se3(_pairs(line, line + 1))
    with pytest.raises(DegenerateGeometry):
        align_umeyama_se3(_pairs(np.zeros((2, 3)), np.zeros((2, 3))))


def test_single_offset_rmse():
    pairs = [PosePair(0.0, np.zeros(3), np.array([3.0, 4.0, 0.0]))]
    assert ate_rmse(pairs, RigidTransform.identity()) == 5.0
    assert list(ape_series(pairs)) == [5.0]


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 60), st.integers(0, 2 ** 31))
def test_rmse_is_quadratic_mean(n, seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(n, 3))
    est = gt + rng.normal(0, 0.3, (n, 3))
    pairs = _pairs(est, gt)
    ape = ape_series(pairs)
    rmse = ate_rmse(pairs)
    assert len(ape) == n
    assert abs(rmse ** 2 * n - float(np.sum(ape ** 2))) <= 1e-12 * max(1.0, float(np.sum(ape ** 2)))
    assert rmse == math.sqrt(float(np.mean(ape * ape)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_ate_invariant_to_rigid_motion_of_estimate(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(20, 3)) * 2
    est = gt + rng.normal(0, 0.2, gt.shape)
    p1 = _pairs(est, gt)
    p2 = _pairs(se3.act(random_transform(rng), est), gt)
    assert abs(ate_rmse(p1, align_umeyama_se3(p1)) - ate_rmse(p2, align_umeyama_se3(p2))) < 1e-9


def test_evaluate_self_is_exactly_zero(rng):
    ts = np.arange(30) * 0.1
    rec = _record(ts, rng)
    rmse, ape, stamps, g = evaluate(rec, rec)
    assert rmse == 0.0 and np.all(ape == 0.0) and np.array_equal(stamps, ts)


def test_trajectory_file_round_trip(tmp_path, rng):
    rec = _record(np.arange(20) * 0.05 + 3.0, rng)
    path = tmp_path / "traj.txt"
    write_trajectory(rec, path)
    back = read_trajectory(path)
    assert np.allclose(back.timestamps, rec.timestamps, atol=1e-9)
    for a, b in zip(back.poses, rec.poses):
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-12
    # the file stores body-in-world: the position column is the pose centre
    first = path.read_text().splitlines()[1].split()
    assert np.allclose([float(x) for x in first[1:4]], rec.poses[0].center(), atol=1e-12)
    again = parse_trajectory(format_trajectory(back))
    assert np.array_equal(again.timestamps, back.timestamps)


def test_trajectory_parse_errors():
    with pytest.raises(ValueError, match="line 2"):
        parse_trajectory("# c\n0.0 1 2 3\n")
    with pytest.raises(ValueError, match="quaternion"):
        parse_trajectory("0.0 0 0 0 0 0 0 2\n")
    with pytest.raises(ValueError, match="line 2"):
        parse_trajectory("1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n")


def test_summarize():
    s = summarize([0.3, 0.1, 0.5, 0.2, 0.4])
    assert s == {"runs": 5, "best": 0.1, "median": 0.3, "average": pytest.approx(0.3)}
    assert summarize([0.1, math.inf, 0.2])["average"] == math.inf
    with pytest.raises(ValueError):
        summarize([])
