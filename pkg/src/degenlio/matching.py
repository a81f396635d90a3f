"""Correspondence search with selectable outlier-rejection strategies.

A fixed cutoff rejects more of the far field than the near field for the same
platform motion, because rotation sweeps distant points through larger arcs.
The point-adaptive threshold bounds exactly that: for a relative motion
(R, t) the displacement of a point p satisfies

    |(R p + t) - p|  <=  |t| + 2 |p| sin(theta / 2),

with theta the rotation angle — the chord length of the rotation arc plus the
translation. Matching against this per-point bound keeps acceptance behavior
consistent across ranges.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .so3 import Pose, log_so3
from .voxel_map import VoxelSubmap

STRATEGY_KINDS = ("none", "fixed", "scan_adaptive", "point_adaptive")
DEFAULT_FIXED_TAU = 2.0
DEFAULT_NOISE_FLOOR = 0.05


@dataclass(frozen=True)
class RejectionStrategy:
    """Outlier-rejection policy: accept-all, fixed cutoff, or motion-adaptive."""

    kind: str = "point_adaptive"
    tau: float = DEFAULT_FIXED_TAU  # fixed cutoff, used only by kind == "fixed"

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown rejection strategy {self.kind!r}")
        if self.kind == "fixed" and not self.tau > 0:
            raise ValueError("fixed threshold must be positive")


@dataclass(frozen=True)
class RelativeMotion:
    """Predicted motion of the current platform frame w.r.t. the previous one."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "RelativeMotion":
        return RelativeMotion(np.eye(3), np.zeros(3))

    @staticmethod
    def between(prev: Pose, curr: Pose) -> "RelativeMotion":
        rel = prev.inverse().compose(curr)
        return RelativeMotion(rel.R, rel.t)

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(log_so3(self.R)))

    @property
    def translation(self) -> float:
        return float(np.linalg.norm(self.t))


def point_threshold(motion: RelativeMotion, points: np.ndarray) -> np.ndarray | float:
    """Per-point acceptance radius |t| + 2 |p| sin(angle / 2).

    Accepts one 3-vector or an (N, 3) stack; returns a scalar or (N,).
    """
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    r = np.linalg.norm(points.reshape(-1, 3), axis=1)
    eps = motion.translation + 2.0 * r * np.sin(0.5 * motion.angle)
    return float(eps[0]) if single else eps


def scan_threshold(motion: RelativeMotion, r_max: float) -> float:
    """One scan-level acceptance radius: the point threshold at maximum range."""
    if not r_max > 0:
        raise ValueError("r_max must be positive")
    return float(point_threshold(motion, np.array([r_max, 0.0, 0.0])))


@dataclass
class CorrespondenceSet:
    """Per-point match results of one scan against the submap.

    Arrays are aligned with the input point order. normals rows are NaN where
    no reliable local surface normal was available; such correspondences fall
    back to point-to-point residuals downstream.
    """

    sources: np.ndarray     # (N, 3) de-skewed points, platform frame at scan end
    targets: np.ndarray     # (N, 3) matched submap points, global frame
    normals: np.ndarray     # (N, 3) local surface normal at target, NaN if none
    has_normal: np.ndarray  # (N,) bool
    thresholds: np.ndarray  # (N,) acceptance radius applied per point
    distances: np.ndarray   # (N,) transformed-source to target distance
    accepted: np.ndarray    # (N,) bool

    def __len__(self) -> int:
        return len(self.sources)

    @property
    def n_accepted(self) -> int:
        return int(np.count_nonzero(self.accepted))


def match_scan(points: np.ndarray, submap: VoxelSubmap, pose: Pose,
               motion: RelativeMotion, strategy: RejectionStrategy,
               *, noise_floor: float = DEFAULT_NOISE_FLOOR,
               r_max: float | None = None, normal_k: int = 5,
               normal_radius: float = 1.0, planarity_min: float = 3.0,
               accept_mask: np.ndarray | None = None) -> CorrespondenceSet:
    """Match de-skewed points against the submap under the given strategy.

    Each point is transformed by the pose estimate and paired with its exact
    nearest submap point; acceptance compares that distance with the strategy
    threshold (plus the additive noise floor that keeps a motionless platform
    from rejecting its own measurement noise). When accept_mask is given the
    acceptance decision from a previous iteration is reused and only targets,
    distances, and normals are refreshed.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(submap) == 0:
        raise ValueError("cannot match against an empty submap")
    moved = pose.transform(points)
    targets, dist, _ = submap.nearest_batch(moved)

    if strategy.kind == "none":
        thr = np.full(len(points), np.inf)
    elif strategy.kind == "fixed":
        thr = np.full(len(points), strategy.tau + noise_floor)
    elif strategy.kind == "scan_adaptive":
        if r_max is None:
            raise ValueError("scan_adaptive needs the sensor r_max")
        thr = np.full(len(points), scan_threshold(motion, r_max) + noise_floor)
    else:  # point_adaptive
        thr = point_threshold(motion, points) + noise_floor

    if accept_mask is not None:
        accepted = np.asarray(accept_mask, dtype=bool).reshape(len(points)).copy()
    else:
        accepted = dist <= thr

    normals = np.full((len(points), 3), np.nan)
    has_normal = np.zeros(len(points), dtype=bool)
    if np.any(accepted):
        n, ok = submap.local_normals_batch(targets[accepted], k=normal_k,
                                           radius=normal_radius,
                                           planarity_min=planarity_min)
        normals[accepted] = n
        has_normal[accepted] = ok
    return CorrespondenceSet(points, targets, normals, has_normal, thr, dist, accepted)
