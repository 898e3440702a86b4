"""Ground-truth scenes, trajectories and noisy rig observations.

Landmark identities travel with every simulated observation so tests and
metrics can check associations, but :func:`to_bundled_frame` strips them
before anything reaches the SLAM pipeline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import se3
from .bundled import TAU_DESC, BundledFrame, CameraFeatures
from .descriptors import N_BYTES, as_words, flip_bits, random_descriptors
from .errors import SeparationUnsatisfiable
from .rig import Z_MIN, RigPose, camera_pose, project_many
from .se3 import RigidTransform

MAX_LANDMARKS = 100_000
UP = np.array([0.0, 0.0, 1.0])


@dataclass
class Scene:
    positions: np.ndarray
    descriptors: np.ndarray
    seed: int = 0

    def __len__(self):
        return len(self.positions)


def generate_scene(n_landmarks, bounds, seed, layout="volume", tau_desc=TAU_DESC):
    """Random landmarks inside (or on the walls of) an axis-aligned box.

    ``bounds`` is ``((xmin, ymin, zmin), (xmax, ymax, zmax))``. With
    ``layout="walls"`` points lie on the four vertical faces. Descriptors are
    rejection-sampled so every pair differs in at least ``2 * tau_desc + 1``
    bits.
    """
    if n_landmarks < 1:
        raise ValueError("need at least one landmark")
    if n_landmarks > MAX_LANDMARKS:
        raise SeparationUnsatisfiable(f"{n_landmarks} landmarks exceed the descriptor budget")
    rng = np.random.default_rng(seed)
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if layout == "volume":
        pos = lo + rng.random((n_landmarks, 3)) * (hi - lo)
    elif layout == "walls":
        pos = _wall_points(rng, n_landmarks, lo, hi)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return Scene(pos, _separated_descriptors(rng, n_landmarks, 2 * tau_desc + 1), seed)


def _wall_points(rng, n, lo, hi):
    span = hi - lo
    perimeter = 2 * (span[0] + span[1])
    s = rng.random(n) * perimeter
    z = lo[2] + rng.random(n) * span[2]
    pos = np.empty((n, 3))
    for i, si in enumerate(s):
        if si < span[0]:
            pos[i, :2] = lo[0] + si, lo[1]
        elif si < span[0] + span[1]:
            pos[i, :2] = hi[0], lo[1] + si - span[0]
        elif si < 2 * span[0] + span[1]:
            pos[i, :2] = hi[0] - (si - span[0] - span[1]), hi[1]
        else:
            pos[i, :2] = lo[0], hi[1] - (si - 2 * span[0] - span[1])
    pos[:, 2] = z
    return pos


def _separated_descriptors(rng, n, min_dist, max_tries=200):
    out = np.empty((n, N_BYTES), dtype=np.uint8)
    words = np.empty((n, N_BYTES // 8), dtype=np.uint64)
    count = 0
    tries = 0
    while count < n:
        batch = random_descriptors(rng, min(2 * (n - count) + 8, 4096))
        for d in batch:
            w = as_words(d)[0]
            if count:
                dist = np.bitwise_count(np.bitwise_xor(words[:count], w)).sum(axis=1)
                if dist.min() < min_dist:
                    continue
            out[count] = d
            words[count] = w
            count += 1
            if count == n:
                break
        tries += 1
        if tries > max_tries:
            raise SeparationUnsatisfiable(f"could not place {n} descriptors {min_dist} bits apart")
    return out


# --- trajectories ------------------------------------------------------------

TRAJECTORY_KINDS = ("line", "circle", "square-loop", "lissajous")
LOOK_POLICIES = ("outward", "inward", "forward", "left")


@dataclass(frozen=True)
class TrajectorySpec:
    """Parametric rig path.

    ``size`` is the circle radius, half the square side, the Lissajous
    amplitude or (for lines) unused; ``speed`` is metres per second along the
    path. ``loops`` scales the duration so loop kinds can overshoot the start.
    """

    kind: str = "circle"
    duration: float = 10.0
    rate: float = 20.0
    size: float = 1.5
    speed: float = None
    height: float = 0.0
    look: str = "outward"
    center: tuple = (0.0, 0.0)
    loops: float = 1.0

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.look not in LOOK_POLICIES:
            raise ValueError(f"unknown look policy {self.look!r}")
        if not (self.rate > 0 and self.duration > 0):
            raise ValueError("rate and duration must be positive")

    @property
    def n_frames(self):
        return int(round(self.duration * self.rate))

    def path_length(self):
        if self.kind == "circle":
            return 2 * math.pi * self.size * self.loops
        if self.kind == "square-loop":
            return 8 * self.size * self.loops
        return (self.speed or 1.0) * self.duration


def _position_and_velocity(spec, t):
    cx, cy = spec.center
    frac = t / spec.duration
    if spec.kind == "line":
        v = spec.speed or 1.0
        return np.array([cx + v * t, cy, spec.height]), np.array([v, 0.0, 0.0])
    if spec.kind == "circle":
        a = 2 * math.pi * spec.loops * frac
        da = 2 * math.pi * spec.loops / spec.duration
        p = np.array([cx + spec.size * math.cos(a), cy + spec.size * math.sin(a), spec.height])
        v = spec.size * da * np.array([-math.sin(a), math.cos(a), 0.0])
        return p, v
    if spec.kind == "square-loop":
        side = 2 * spec.size
        s = (8 * spec.size * spec.loops * frac) % (4 * side)
        speed = 8 * spec.size * spec.loops / spec.duration
        h = spec.size
        corners = [(-h, -h), (h, -h), (h, h), (-h, h)]
        k = int(s // side)
        u = s - k * side
        p0, p1 = np.array(corners[k]), np.array(corners[(k + 1) % 4])
        d = (p1 - p0) / side
        xy = p0 + d * u
        return np.array([cx + xy[0], cy + xy[1], spec.height]), np.array([d[0], d[1], 0.0]) * speed
    # lissajous
    w = 2 * math.pi * spec.loops / spec.duration
    a = w * t
    p = np.array([cx + spec.size * math.sin(a), cy + 0.6 * spec.size * math.sin(2 * a), spec.height])
    v = np.array([spec.size * w * math.cos(a), 1.2 * spec.size * w * math.cos(2 * a), 0.0])
    return p, v


def look_at(position, forward):
    """World -> camera transform for a camera at ``position`` looking along ``forward``.

    Camera axes: x right, y down, z forward; world z is up.
    """
    z = np.asarray(forward, dtype=float)
    z = z / np.linalg.norm(z)
    x = np.cross(z, UP)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r_wc = np.column_stack([x, y, z])
    return RigidTransform(r_wc.T, -r_wc.T @ np.asarray(position, dtype=float))


def _lap_fraction(spec, p):
    """Arc-length fraction of one lap at square-loop position ``p``."""
    h = spec.size
    x, y = p[0] - spec.center[0], p[1] - spec.center[1]
    if abs(y + h) < 1e-9 and x < h:
        s = x + h
    elif abs(x - h) < 1e-9 and y < h:
        s = 2 * h + y + h
    elif abs(y - h) < 1e-9 and x > -h:
        s = 4 * h + h - x
    else:
        s = 6 * h + h - y
    return s / (8 * h)


def _heading(spec, p, v):
    c = np.array([spec.center[0], spec.center[1], p[2]])
    if spec.look == "forward":
        return v
    if spec.look == "left":
        return np.cross(UP, v)
    radial = p - c
    if np.linalg.norm(radial[:2]) < 1e-9:
        radial = np.array([1.0, 0.0, 0.0])
    if spec.kind == "square-loop":
        # constant yaw rate: one turn per lap, starting towards the first corner
        a = -0.75 * math.pi + 2 * math.pi * _lap_fraction(spec, p)
        radial = np.array([math.cos(a), math.sin(a), 0.0])
    return radial if spec.look == "outward" else -radial


def trajectory(spec):
    """Ground-truth rig poses (camera 1, world -> camera) at ``rate`` Hz."""
    poses = []
    for k in range(spec.n_frames):
        t = k / spec.rate
        p, v = _position_and_velocity(spec, t)
        poses.append(RigPose(look_at(p, _heading(spec, p, v)), t))
    return poses


def inject_drift(poses, drift_per_meter, yaw_per_meter=None, seed=0):
    """Dead-reckoned copy of ``poses`` whose relative motions carry a bias.

    Each step's translation is stretched by ``drift_per_meter`` along the rig's
    lateral axis and rotated by ``yaw_per_meter`` radians per metre about the
    world vertical, so error accumulates with distance like wheel odometry.
    """
    yaw_per_meter = drift_per_meter if yaw_per_meter is None else yaw_per_meter
    out = [poses[0]]
    est = poses[0].c1
    for prev, cur in zip(poses[:-1], poses[1:]):
        rel = se3.compose(cur.c1, se3.invert(prev.c1))      # camera_prev -> camera_cur
        step = float(np.linalg.norm(cur.c1.center() - prev.c1.center()))
        up_cam = cur.c1.rotation @ UP
        bias = se3.exp_se3(np.concatenate([yaw_per_meter * step * up_cam,
                                           drift_per_meter * step * np.array([1.0, 0.0, 0.0])]))
        est = se3.compose(se3.compose(bias, rel), est)
        out.append(RigPose(est, cur.timestamp))
    return out


# --- observations -------------------------------------------------------------

@dataclass
class CameraObservations:
    landmark_ids: np.ndarray
    pixels: np.ndarray
    descriptors: np.ndarray
    is_outlier: np.ndarray

    def __len__(self):
        return len(self.landmark_ids)


@dataclass
class SimFrameObservations:
    index: int
    timestamp: float
    true_pose: RigPose
    cameras: list = field(default_factory=list)


def simulate(scene, rig, spec, sigma=1.0, outlier_fraction=0.0, seed=0, descriptor_flips=4,
             max_depth=30.0, poses=None):
    """Observe ``scene`` from every rig camera along ``spec``.

    Visible landmarks (in front of the camera, inside the image, closer than
    ``max_depth``) produce a pixel with N(0, sigma^2 I) noise and a descriptor
    with up to ``descriptor_flips`` flipped bits. A fraction of observations
    is replaced by uniform in-image pixels and flagged as outliers.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if not 0.0 <= outlier_fraction < 0.5:
        raise ValueError("outlier fraction must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    poses = trajectory(spec) if poses is None else poses
    frames = []
    for k, pose in enumerate(poses):
        fr = SimFrameObservations(k, pose.timestamp, pose)
        for i, intr in enumerate(rig.intrinsics):
            p_cam = se3.act(camera_pose(rig, pose, i), scene.positions)
            uv, valid = project_many(intr, p_cam)
            vis = valid & (p_cam[:, 2] > Z_MIN) & (p_cam[:, 2] < max_depth)
            vis &= intr.in_bounds(np.nan_to_num(uv, nan=-1.0))
            ids = np.nonzero(vis)[0]
            px = uv[ids] + sigma * rng.standard_normal((len(ids), 2)) if sigma > 0 else uv[ids].copy()
            out = rng.random(len(ids)) < outlier_fraction
            n_out = int(out.sum())
            if n_out:
                px[out] = rng.random((n_out, 2)) * [intr.width, intr.height]
            # noisy pixels may leave the image; keep them inside
            px[:, 0] = np.clip(px[:, 0], 0.0, np.nextafter(intr.width, 0))
            px[:, 1] = np.clip(px[:, 1], 0.0, np.nextafter(intr.height, 0))
            descs = scene.descriptors[ids].copy()
            if descriptor_flips > 0:
                flips = rng.integers(0, descriptor_flips + 1, size=len(ids))
                for j in np.nonzero(flips)[0]:
                    descs[j] = flip_bits(descs[j], int(flips[j]), rng)
            fr.cameras.append(CameraObservations(ids.astype(np.int64), px, descs, out))
        frames.append(fr)
    return frames


def to_bundled_frame(sim_frame, rig, cameras=None):
    """BundledFrame for the pipeline: pixels and descriptors only, no landmark ids.

    ``cameras`` restricts to the first k cameras (other observations withheld).
    """
    n = len(rig) if cameras is None else cameras
    cams = [CameraFeatures(c.pixels, c.descriptors) for c in sim_frame.cameras[:n]]
    sizes = [(intr.width, intr.height) for intr in rig.intrinsics[:n]]
    return BundledFrame(sim_frame.timestamp, cams, sizes)


def landmark_lookup(sim_frame):
    """Ground-truth association oracle: (camera, feature index) -> landmark id."""
    return {(i, j): int(lid) for i, cam in enumerate(sim_frame.cameras)
            for j, lid in enumerate(cam.landmark_ids)}


# --- world presets ---------------------------------------------------------------

def preset_world(name, seed=0, n_landmarks=None):
    """(scene, trajectory spec) pairs used by the demos, CLI and acceptance suite."""
    if name == "circle":
        scene = generate_scene(n_landmarks or 1200, ((-5, -5, -1.5), (5, 5, 1.5)), seed, layout="walls")
        return scene, TrajectorySpec("circle", duration=10.0, rate=20.0, size=1.5, look="outward")
    if name == "square-loop":
        scene = generate_scene(n_landmarks or 1200, ((-3.5, -3.5, -1.5), (3.5, 3.5, 1.5)), seed, layout="walls")
        return scene, TrajectorySpec("square-loop", duration=12.0, rate=20.0, size=1.5, look="outward",
                                     loops=1.15)
    if name == "corridor":
        scene = generate_scene(n_landmarks or 1600, ((-3, -3, -1.5), (26, 3, 1.5)), seed, layout="walls")
        return scene, TrajectorySpec("line", duration=15.0, rate=20.0, speed=1.4, look="left")
    if name == "lissajous":
        scene = generate_scene(n_landmarks or 1200, ((-5, -5, -1.5), (5, 5, 1.5)), seed, layout="walls")
        return scene, TrajectorySpec("lissajous", duration=8.0, rate=20.0, size=1.5, look="outward")
    raise ValueError(f"unknown world preset {name!r}")


# --- observation dump ---------------------------------------------------------------
#
# Text, UTF-8, one record per line, '#' starts a comment:
#   frame <index> <timestamp> <tx ty tz qx qy qz qw>    true pose, camera-1 in world
#   obs <frame> <camera> <landmark> <u> <v> <flags> <descriptor hex, 64 chars>
# flags bit 0 marks an outlier. Floats are written with repr() and read back exactly.

def dump_observations(frames, fh):
    fh.write("# rigslam observation dump v1\n")
    fh.write("# frame <index> <timestamp> <tx ty tz qx qy qz qw>\n")
    fh.write("# obs <frame> <camera> <landmark> <u> <v> <flags> <descriptor-hex>\n")
    for fr in frames:
        wc = se3.invert(fr.true_pose.c1)
        q = se3.rotation_to_quat(wc.rotation)
        vals = [*wc.translation, q[1], q[2], q[3], q[0]]
        fh.write(f"frame {fr.index} {fr.timestamp!r} " + " ".join(repr(float(v)) for v in vals) + "\n")
        for i, cam in enumerate(fr.cameras):
            for lid, (u, v), d, o in zip(cam.landmark_ids, cam.pixels, cam.descriptors, cam.is_outlier):
                fh.write(f"obs {fr.index} {i} {int(lid)} {float(u)!r} {float(v)!r} {int(o)} {d.tobytes().hex()}\n")


def load_observations(fh, n_cameras):
    """Parse a dump; the stored poses are rounded through quaternions."""
    frames = {}
    rows = {}
    for lineno, line in enumerate(fh, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "frame":
                k = int(tok[1])
                vals = [float(x) for x in tok[3:10]]
                r = se3.quat_to_rotation([vals[6], vals[3], vals[4], vals[5]])
                pose = se3.invert(RigidTransform(r, vals[:3]))
                frames[k] = SimFrameObservations(k, float(tok[2]), RigPose(pose, float(tok[2])))
                rows[k] = [[] for _ in range(n_cameras)]
            elif tok[0] == "obs":
                k, cam, lid = int(tok[1]), int(tok[2]), int(tok[3])
                rows[k][cam].append((lid, float(tok[4]), float(tok[5]), int(tok[6]), bytes.fromhex(tok[7])))
            else:
                raise ValueError(f"unknown record {tok[0]!r}")
        except (ValueError, IndexError, KeyError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    out = []
    for k in sorted(frames):
        fr = frames[k]
        for cam_rows in rows[k]:
            n = len(cam_rows)
            fr.cameras.append(CameraObservations(
                np.array([r[0] for r in cam_rows], dtype=np.int64),
                np.array([[r[1], r[2]] for r in cam_rows], dtype=float).reshape(n, 2),
                np.frombuffer(b"".join(r[4] for r in cam_rows), dtype=np.uint8).reshape(n, N_BYTES).copy(),
                np.array([bool(r[3] & 1) for r in cam_rows], dtype=bool)))
        out.append(fr)
    return out

