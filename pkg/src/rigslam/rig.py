"""Pinhole cameras rigidly mounted on a rig.

The rig state is the pose of camera 1 (``c1``, world -> camera 1). Every other
camera is reached through its fixed extrinsic ``T_i1`` (camera 1 -> camera i),
so camera i sees the world through ``T_i1 ∘ c1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import se3
from .errors import BehindCamera, ConfigError, IndexOutOfRange
from .se3 import RigidTransform

Z_MIN = 1e-6
QUAT_NORM_TOL = 1e-3


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def in_bounds(self, uv):
        uv = np.asarray(uv, dtype=float)
        return ((uv[..., 0] >= 0) & (uv[..., 0] < self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] < self.height))


@dataclass(frozen=True)
class RigPose:
    """Rig state at one instant: world -> camera-1 transform plus timestamp."""

    c1: RigidTransform
    timestamp: float = 0.0


@dataclass(frozen=True, eq=False)
class CameraRig:
    intrinsics: tuple
    extrinsics: tuple
    sigmas: tuple = field(default=None)

    def __post_init__(self):
        intr = tuple(self.intrinsics)
        ext = tuple(self.extrinsics)
        if len(intr) == 0 or len(intr) != len(ext):
            raise ValueError("need one extrinsic per camera")
        if ext[0] != RigidTransform.identity():
            raise ValueError("camera 1 extrinsic must be the identity")
        sig = tuple([1.0] * len(intr) if self.sigmas is None else (float(s) for s in self.sigmas))
        if len(sig) != len(intr) or any(s <= 0 for s in sig):
            raise ValueError("need one positive noise sigma per camera")
        object.__setattr__(self, "intrinsics", intr)
        object.__setattr__(self, "extrinsics", ext)
        object.__setattr__(self, "sigmas", sig)

    def __len__(self):
        return len(self.intrinsics)

    @property
    def n_cameras(self):
        return len(self.intrinsics)

    def noise_cov(self, i):
        """Measurement covariance Q of camera i (pixels^2)."""
        return self.sigmas[i] ** 2 * np.eye(2)

    def information(self, i):
        return np.eye(2) / self.sigmas[i] ** 2

    def subset(self, k):
        """Rig made of the first ``k`` cameras."""
        if not 1 <= k <= len(self):
            raise IndexOutOfRange(f"cannot take {k} cameras from a {len(self)}-camera rig")
        return CameraRig(self.intrinsics[:k], self.extrinsics[:k], self.sigmas[:k])

    def camera_center_in_c1(self, i):
        return self.extrinsics[i].center()


def camera_pose(rig, pose, i):
    """World -> camera-i transform ``T_i1 ∘ c1``."""
    if not 0 <= i < len(rig):
        raise IndexOutOfRange(f"camera index {i} outside [0, {len(rig)})")
    c1 = pose.c1 if isinstance(pose, RigPose) else pose
    if i == 0:
        return c1
    return se3.compose(rig.extrinsics[i], c1)


def project(intr, p_cam):
    """Pinhole projection of a camera-frame point."""
    x, y, z = np.asarray(p_cam, dtype=float).reshape(3)
    if z <= Z_MIN:
        raise BehindCamera(f"depth {z} <= {Z_MIN}")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def project_many(intr, p_cam):
    """Vectorised projection of (n, 3) camera-frame points.

    Returns ``(uv, valid)``; entries with depth <= Z_MIN are NaN and invalid.
    """
    p = np.asarray(p_cam, dtype=float).reshape(-1, 3)
    z = p[:, 2]
    valid = z > Z_MIN
    zs = np.where(valid, z, np.nan)
    uv = np.empty((len(p), 2))
    uv[:, 0] = intr.fx * p[:, 0] / zs + intr.cx
    uv[:, 1] = intr.fy * p[:, 1] / zs + intr.cy
    return uv, valid


def observe(rig, pose, i, p_world):
    """Noiseless pixel of a world point in camera i, plus an in-image flag."""
    p_cam = se3.act(camera_pose(rig, pose, i), p_world)
    uv = project(rig.intrinsics[i], p_cam)
    return uv, bool(rig.intrinsics[i].in_bounds(uv))


# --- configuration files ---------------------------------------------------

_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "extrinsic")


def _line(node):
    return node.start_mark.line + 1


def _scalar(node, key, kind=float):
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError("expected a number", key=key, line=_line(node))
    try:
        value = float(node.value)
    except ValueError:
        raise ConfigError(f"not a number: {node.value!r}", key=key, line=_line(node)) from None
    if kind is int:
        if value != int(value):
            raise ConfigError("expected an integer", key=key, line=_line(node))
        return int(value)
    return value


def _mapping(node, key):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("expected a mapping", key=key, line=_line(node))
    return {k.value: v for k, v in node.value}


def parse_rig(text):
    """Parse rig YAML text into a CameraRig. Errors carry key and line."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed rig file: {getattr(exc, 'problem', exc)}",
                          line=None if mark is None else mark.line + 1) from None
    if root is None:
        raise ConfigError("empty rig file", key="cameras", line=1)
    top = _mapping(root, "<root>")
    if "cameras" not in top:
        raise ConfigError("missing section", key="cameras", line=_line(root))
    cams_node = top["cameras"]
    if not isinstance(cams_node, yaml.SequenceNode) or not cams_node.value:
        raise ConfigError("expected a non-empty list", key="cameras", line=_line(cams_node))

    intrinsics, extrinsics, sigmas = [], [], []
    for ci, cnode in enumerate(cams_node.value):
        fields = _mapping(cnode, f"cameras[{ci}]")
        for k in _CAMERA_KEYS:
            if k not in fields:
                raise ConfigError("missing key", key=f"cameras[{ci}].{k}", line=_line(cnode))
        vals = {k: _scalar(fields[k], f"cameras[{ci}].{k}", int if k in ("width", "height") else float)
                for k in ("fx", "fy", "cx", "cy", "width", "height")}
        try:
            intrinsics.append(PinholeIntrinsics(**vals))
        except ValueError as exc:
            raise ConfigError(str(exc), key=f"cameras[{ci}]", line=_line(cnode)) from None

        enode = fields["extrinsic"]
        ekey = f"cameras[{ci}].extrinsic"
        if not isinstance(enode, yaml.SequenceNode) or len(enode.value) != 7:
            raise ConfigError("expected 7 numbers: qw qx qy qz tx ty tz", key=ekey, line=_line(enode))
        e = np.array([_scalar(v, ekey) for v in enode.value])
        qn = np.linalg.norm(e[:4])
        if abs(qn - 1.0) > QUAT_NORM_TOL:
            raise ConfigError(f"quaternion norm {qn:.6f} deviates from 1", key=ekey, line=_line(enode))
        q = e[:4] / qn
        if ci == 0:
            if np.abs(q - [1, 0, 0, 0]).max() > 1e-9 or np.abs(e[4:]).max() > 1e-9:
                raise ConfigError("camera 1 extrinsic must be the identity", key=ekey, line=_line(enode))
            extrinsics.append(RigidTransform.identity())
        else:
            extrinsics.append(RigidTransform(se3.quat_to_rotation(q), e[4:]))

        sigmas.append(_scalar(fields["sigma"], f"cameras[{ci}].sigma") if "sigma" in fields else 1.0)
        if sigmas[-1] <= 0:
            raise ConfigError("sigma must be positive", key=f"cameras[{ci}].sigma", line=_line(fields["sigma"]))

    return CameraRig(tuple(intrinsics), tuple(extrinsics), tuple(sigmas))


def load_rig(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read rig file {path}: {exc.strerror}") from None
    return parse_rig(text)


def dump_rig(rig):
    """Serialise a rig to the YAML config format."""
    lines = ["cameras:"]
    for intr, ext, sigma in zip(rig.intrinsics, rig.extrinsics, rig.sigmas):
        q = se3.rotation_to_quat(ext.rotation)
        nums = ", ".join(repr(float(v)) for v in (*q, *ext.translation))
        lines += [
            f"  - fx: {intr.fx!r}",
            f"    fy: {intr.fy!r}",
            f"    cx: {intr.cx!r}",
            f"    cy: {intr.cy!r}",
            f"    width: {intr.width}",
            f"    height: {intr.height}",
            f"    extrinsic: [{nums}]",
            f"    sigma: {sigma!r}",
        ]
    return "\n".join(lines) + "\n"


PRESETS = ("stereo", "trinocular", "quad")


def preset_path(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown rig preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("rigslam") / "presets" / f"{name}.yaml"


def load_preset(name):
    return parse_rig(preset_path(name).read_text(encoding="utf-8"))


def make_rig(yaws_deg, offsets, fx=458.0, fy=458.0, cx=320.0, cy=240.0,
             width=640, height=480, sigma=1.0):
    """Build a rig from per-camera yaw angles and centre offsets in camera-1 coords.

    Yaw turns the optical axis about camera 1's y axis (image down), so
    positive yaw looks to the right.
    """
    intr = PinholeIntrinsics(fx, fy, cx, cy, width, height)
    exts = []
    for k, (yaw, off) in enumerate(zip(yaws_deg, offsets)):
        if k == 0:
            exts.append(RigidTransform.identity())
            continue
        a = math.radians(yaw)
        r_1i = np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])
        exts.append(se3.invert(RigidTransform(r_1i, off)))
    n = len(exts)
    return CameraRig((intr,) * n, tuple(exts), (sigma,) * n)
