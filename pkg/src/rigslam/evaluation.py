"""Trajectory association, rigid alignment and absolute error metrics.

Trajectories hold world -> body transforms. On disk they use the common
``timestamp tx ty tz qx qy qz qw`` layout, which stores the body pose in the
world (the inverse), so files interoperate with third-party evaluators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import se3
from .errors import DegenerateGeometry, NoOverlap
from .se3 import RigidTransform


@dataclass
class TrajectoryRecord:
    timestamps: np.ndarray
    poses: list          # world -> body RigidTransforms

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("one pose per timestamp")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def positions(self):
        """Body origins in the world frame."""
        return np.array([p.center() for p in self.poses]).reshape(-1, 3)

    @classmethod
    def from_rig_poses(cls, rig_poses):
        return cls([p.timestamp for p in rig_poses], [p.c1 for p in rig_poses])


@dataclass
class PosePair:
    timestamp: float
    est: np.ndarray      # position
    gt: np.ndarray


def associate(est, gt, max_dt):
    """Greedy nearest-timestamp pairing; each pose is used at most once.

    Candidate pairs within ``max_dt`` are taken in order of increasing |dt|
    (ties: earlier estimate, then earlier ground truth).
    """
    if not max_dt > 0:
        raise ValueError("max_dt must be positive")
    te, tg = est.timestamps, gt.timestamps
    cand = []
    for i, t in enumerate(te):
        lo = np.searchsorted(tg, t - max_dt, side="left")
        hi = np.searchsorted(tg, t + max_dt, side="right")
        for j in range(lo, hi):
            dt = abs(tg[j] - t)
            if dt <= max_dt:
                cand.append((dt, i, j))
    cand.sort()
    used_e, used_g, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_e or j in used_g:
            continue
        used_e.add(i)
        used_g.add(j)
        pairs.append((i, j))
    if not pairs:
        raise NoOverlap("no timestamps within tolerance")
    pairs.sort()
    pe, pg = est.positions(), gt.positions()
    return [PosePair(float(te[i]), pe[i], pg[j]) for i, j in pairs]


def _arrays(pairs):
    est = np.array([p.est for p in pairs], dtype=float).reshape(-1, 3)
    gt = np.array([p.gt for p in pairs], dtype=float).reshape(-1, 3)
    return est, gt


def align_umeyama_se3(pairs):
    """Rigid transform (no scale) minimising sum |gt - (R est + t)|^2."""
    est, gt = _arrays(pairs)
    if len(est) < 3:
        raise DegenerateGeometry("need at least 3 pairs")
    g, sv = se3.fit_rigid(est, gt)
    scale = max(sv[0], 1e-300)
    if sv[1] <= 1e-9 * scale or sv[0] <= 1e-12:
        raise DegenerateGeometry("positions are collinear or coincident")
    if np.array_equal(est, gt):
        # already aligned; skip the SVD round-off so self-comparison is exactly zero
        return RigidTransform.identity()
    return g


def ape_series(pairs, alignment=None):
    est, gt = _arrays(pairs)
    if alignment is not None:
        est = se3.act(alignment, est)
    return np.linalg.norm(gt - est, axis=1)


def ate_rmse(pairs, alignment=None):
    if not pairs:
        raise ValueError("no pairs")
    a = ape_series(pairs, alignment)
    return math.sqrt(float(np.mean(a * a)))


def evaluate(est, gt, max_dt=0.01):
    """(rmse, ape series, timestamps, alignment) of ``est`` against ``gt``."""
    pairs = associate(est, gt, max_dt)
    g = align_umeyama_se3(pairs)
    return ate_rmse(pairs, g), ape_series(pairs, g), np.array([p.timestamp for p in pairs]), g


def summarize(values):
    """Best, median and average of per-run errors (inf entries mark failed runs)."""
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        raise ValueError("no runs")
    finite = v[np.isfinite(v)]
    return {"runs": len(v), "best": float(v[0]), "median": float(np.median(v)),
            "average": float(finite.mean()) if len(finite) == len(v) else math.inf}


# --- trajectory files -------------------------------------------------------------------

def format_trajectory(record):
    lines = ["# timestamp tx ty tz qx qy qz qw (body pose in world)"]
    for t, p in zip(record.timestamps, record.poses):
        inv = p.inverse()
        w, x, y, z = se3.rotation_to_quat(inv.rotation)
        vals = (*inv.translation, x, y, z, w)
        lines.append(f"{t:.9f} " + " ".join(f"{v:.17g}" for v in vals))
    return "\n".join(lines) + "\n"


def write_trajectory(record, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_trajectory(record))


def parse_trajectory(text, name="<string>"):
    ts, poses = [], []
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 8:
            raise ValueError(f"{name}: line {n}: expected 8 fields, got {len(parts)}")
        try:
            v = [float(x) for x in parts]
        except ValueError:
            raise ValueError(f"{name}: line {n}: non-numeric field") from None
        q = np.array([v[7], v[4], v[5], v[6]])
        qn = np.linalg.norm(q)
        if not np.isfinite(qn) or abs(qn - 1.0) > 1e-3:
            raise ValueError(f"{name}: line {n}: quaternion norm {qn:.6g} is not 1")
        if ts and v[0] <= ts[-1]:
            raise ValueError(f"{name}: line {n}: timestamp not increasing")
        body_in_world = RigidTransform(se3.quat_to_rotation(q / qn), v[1:4])
        ts.append(v[0])
        poses.append(body_in_world.inverse())
    return TrajectoryRecord(ts, poses)


def read_trajectory(path):
    with open(path, encoding="utf-8") as fh:
        return parse_trajectory(fh.read(), str(path))


def write_ape_series(path, timestamps, ape):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp ape\n")
        for t, a in zip(timestamps, ape):
            fh.write(f"{t:.9f} {a:.17g}\n")
