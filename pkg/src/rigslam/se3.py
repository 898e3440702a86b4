"""Rotation and rigid-transform algebra.

Conventions
-----------
A ``RigidTransform`` T = (R, t) maps a point expressed in frame B into frame A
as ``p_A = R p_B + t``. Camera poses are stored world -> camera.

A twist is a length-6 array ``[w, rho]``: rotational part first (radians),
translational part second. Perturbations are applied on the left,
``T <- exp(xi) T``, so the rotational columns of every pose Jacobian come
before the translational ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi

SMALL_ANGLE = 1e-8
ORTHO_TOL = 1e-7


def _frozen(a, shape):
    a = np.array(a, dtype=float).reshape(shape)
    a.flags.writeable = False
    return a


def skew(v):
    """Matrix M such that ``M @ w == np.cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def nearest_rotation(m):
    """Project a 3x3 matrix onto SO(3) (Frobenius-nearest rotation)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


SERIES_ANGLE = 1e-2     # below this the cancelling closed forms switch to series


def _rodrigues_coeffs(theta):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series for small angles."""
    t2 = theta * theta
    if theta < SERIES_ANGLE:
        return (1.0 - t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0)),
                0.5 - t2 / 24.0 * (1.0 - t2 / 30.0 * (1.0 - t2 / 56.0)),
                1.0 / 6.0 - t2 / 120.0 * (1.0 - t2 / 42.0 * (1.0 - t2 / 72.0)))
    s = math.sin(theta)
    h = math.sin(0.5 * theta)
    return s / theta, 2.0 * h * h / t2, (theta - s) / (t2 * theta)


def exp_so3(w):
    w = np.asarray(w, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    a, b, _ = _rodrigues_coeffs(theta)
    k = skew(w)
    return np.eye(3) + a * k + b * (k @ k)


def log_so3(r):
    """Rotation vector of ``r``. Raises AngleNearPi within 1e-6 of pi."""
    r = np.asarray(r, dtype=float)
    v = 0.5 * vee(r - r.T)
    s = float(np.linalg.norm(v))
    c = 0.5 * (np.trace(r) - 1.0)
    theta = math.atan2(s, c)
    if theta > math.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    if theta < SMALL_ANGLE:
        return v * (1.0 + theta * theta / 6.0)
    return v * (theta / s)


def left_jacobian_so3(w):
    w = np.asarray(w, dtype=float).reshape(3)
    _, b, c = _rodrigues_coeffs(float(np.linalg.norm(w)))
    k = skew(w)
    return np.eye(3) + b * k + c * (k @ k)


def _left_jacobian_inv_so3(w):
    theta = float(np.linalg.norm(w))
    k = skew(w)
    t2 = theta * theta
    if theta < SERIES_ANGLE:
        coef = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        half = 0.5 * theta
        coef = (1.0 - half / math.tan(half)) / t2
    return np.eye(3) - 0.5 * k + coef * (k @ k)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Immutable rigid transform ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
            r = nearest_rotation(r)
        object.__setattr__(self, "rotation", _frozen(r, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        return invert(self)

    def center(self):
        """-R^T t: for a world -> camera pose, the camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return compose(self, other)
        return act(self, other)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        w = log_so3(self.rotation) if np.trace(self.rotation) > -0.999 else "~pi"
        return f"RigidTransform(rotvec={w}, t={self.translation})"


def compose(a, b):
    """a ∘ b: apply b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t):
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def act(t, p):
    """Apply ``t`` to a point (3,) or a stack of points (n, 3).

    Written as explicit sums so a single point and the same point inside a
    stack give bit-identical results (matmul kernels round differently).
    """
    p = np.asarray(p, dtype=float)
    r = t.rotation
    return p[..., 0:1] * r[:, 0] + p[..., 1:2] * r[:, 1] + p[..., 2:3] * r[:, 2] + t.translation


def twist(rotational, translational):
    return np.concatenate([np.asarray(rotational, float).reshape(3),
                           np.asarray(translational, float).reshape(3)])


def exp_se3(xi):
    xi = np.asarray(xi, dtype=float).reshape(6)
    w, rho = xi[:3], xi[3:]
    return RigidTransform(exp_so3(w), left_jacobian_so3(w) @ rho)


def log_se3(t):
    """Twist ``[w, rho]`` with ``exp_se3(log_se3(T)) == T``."""
    w = log_so3(t.rotation)
    rho = _left_jacobian_inv_so3(w) @ t.translation
    return np.concatenate([w, rho])


def adjoint(t):
    """6x6 adjoint for ``[w, rho]`` twists: exp(Ad_T xi) = T exp(xi) T^-1."""
    r = t.rotation
    ad = np.zeros((6, 6))
    ad[:3, :3] = r
    ad[3:, 3:] = r
    ad[3:, :3] = skew(t.translation) @ r
    return ad


def rotation_angle(r):
    """Geodesic angle of a rotation matrix, valid over [0, pi]."""
    r = np.asarray(r, dtype=float)
    s = 0.5 * float(np.linalg.norm(vee(r - r.T)))
    c = 0.5 * (float(np.trace(r)) - 1.0)
    return math.atan2(s, c)


def quat_to_rotation(q):
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(r):
    """Rotation matrix to unit quaternion (w, x, y, z) with w >= 0."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def fit_rigid(src, dst, weights=None):
    """Least-squares R, t minimising sum w_i |dst_i - (R src_i + t)|^2.

    Returns ``(RigidTransform, singular_values)`` where the singular values
    are those of the centred source cloud, for degeneracy checks by callers.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    cs, cd = src - mu_s, dst - mu_d
    cov = (cd * w[:, None]).T @ cs
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    sv = np.linalg.svd(cs * np.sqrt(w)[:, None], compute_uv=False)
    return RigidTransform(r, mu_d - r @ mu_s), sv
