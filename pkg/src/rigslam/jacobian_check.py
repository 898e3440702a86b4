"""Finite-difference verification of the reprojection Jacobians.

Every trial draws its configuration from ``default_rng([seed, index])`` so a
failing case can be replayed on its own.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import optimizer as opt
from . import se3
from .rig import CameraRig, PinholeIntrinsics, RigPose

TOLERANCE = 1e-5


@dataclass
class Configuration:
    rig: CameraRig
    pose: RigPose
    camera: int
    point: np.ndarray
    pixel: np.ndarray


@dataclass
class CheckResult:
    seed: int
    trials: int
    max_error: float
    worst_index: int
    worst_block: str
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.max_error < self.tolerance


def _random_rotation(rng, max_angle):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return se3.exp_so3(axis * rng.uniform(0.0, max_angle))


def random_configuration(seed, index):
    """A random 1-4 camera rig, rig pose, camera and visible world point."""
    rng = np.random.default_rng([seed, index])
    n = int(rng.integers(1, 5))
    intr, ext = [], [se3.RigidTransform.identity()]
    for _ in range(n):
        f = rng.uniform(300.0, 800.0)
        intr.append(PinholeIntrinsics(f * rng.uniform(0.9, 1.1), f, rng.uniform(280, 360),
                                      rng.uniform(200, 280), 640, 480))
    for _ in range(n - 1):
        ext.append(se3.RigidTransform(_random_rotation(rng, 1.2), rng.uniform(-0.3, 0.3, 3)))
    rig = CameraRig(tuple(intr), tuple(ext), (1.0,) * n)
    pose = RigPose(se3.RigidTransform(_random_rotation(rng, np.pi * 0.95), rng.uniform(-5, 5, 3)), 0.0)
    cam = int(rng.integers(n))
    # a point in front of the chosen camera, somewhere inside its image
    uv = rng.uniform([20, 20], [620, 460])
    z = rng.uniform(0.5, 20.0)
    k = intr[cam]
    p_cam = np.array([(uv[0] - k.cx) / k.fx * z, (uv[1] - k.cy) / k.fy * z, z])
    world_to_cam = opt.camera_pose(rig, pose, cam)
    point = se3.act(world_to_cam.inverse(), p_cam)
    pixel = uv + rng.normal(0.0, 2.0, 2)
    return Configuration(rig, pose, cam, point, pixel)


def numeric_jacobians(cfg, h=1e-6):
    """Central differences of the residual: left twist on the pose, then the point."""
    def r_pose(xi):
        c1 = se3.compose(se3.exp_se3(xi), cfg.pose.c1)
        return opt.residual(cfg.rig, c1, cfg.camera, cfg.point, cfg.pixel)

    def r_point(dp):
        return opt.residual(cfg.rig, cfg.pose, cfg.camera, cfg.point + dp, cfg.pixel)

    jp = np.zeros((2, 6))
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        jp[:, j] = (r_pose(e) - r_pose(-e)) / (2 * h)
    jx = np.zeros((2, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        jx[:, j] = (r_point(e) - r_point(-e)) / (2 * h)
    return jp, jx


def relative_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_jacobians(seed=0, trials=1000, jacobian_pose=None, jacobian_point=None):
    """Compare analytic Jacobians with finite differences over ``trials`` configurations.

    The Jacobian functions can be swapped out, which is how the mutation test
    confirms the check actually fails on a broken build.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    jacobian_pose = jacobian_pose or opt.jacobian_pose
    jacobian_point = jacobian_point or opt.jacobian_point
    worst = (-1.0, -1, "")
    for index in range(trials):
        cfg = random_configuration(seed, index)
        jp, jx = numeric_jacobians(cfg)
        for name, analytic, numeric in (
                ("pose", jacobian_pose(cfg.rig, cfg.pose, cfg.camera, cfg.point), jp),
                ("point", jacobian_point(cfg.rig, cfg.pose, cfg.camera, cfg.point), jx)):
            err = relative_error(analytic, numeric)
            if not err <= worst[0]:
                worst = (err, index, name)
    return CheckResult(seed, trials, worst[0], worst[1], worst[2])
