"""LiDAR scan containers, preprocessing, and the voxel-hashed submap.

The submap buckets global-frame points into fixed-size voxels. Single-point
nearest-neighbor queries walk expanding voxel shells and are exact; batched
queries go through a KD-tree over the same stored points (also exact) so a
whole scan can be matched within the per-scan time budget. Read queries and
insert/prune phases alternate; queries rebuild the flat index lazily after a
mutation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .so3 import Pose, sym_eig3, sym_eig3_batch
from .imu import StampedPoses


@dataclass
class Scan:
    """One LiDAR sweep: sensor-frame points with per-point time offsets.

    tau holds each point's firing time minus the scan end time, so values lie
    in [t_start - t_end, 0].
    """

    points: np.ndarray     # (N, 3), sensor frame at emission time
    tau: np.ndarray        # (N,), seconds, <= 0
    t_start: float
    t_end: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.tau = np.asarray(self.tau, dtype=float).reshape(-1)
        if len(self.points) != len(self.tau):
            raise ValueError("points/tau length mismatch")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")
        span = self.t_start - self.t_end
        if len(self.tau) and (self.tau.min() < span - 1e-9 or self.tau.max() > 1e-9):
            raise ValueError("point time offsets outside the scan window")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def times(self) -> np.ndarray:
        return self.t_end + self.tau


@dataclass(frozen=True)
class SensorRig:
    """LiDAR mounting and range spec: extrinsic, usable range, sweep period."""

    T_L_I: Pose = field(default_factory=Pose.identity)
    r_min: float = 0.5
    r_max: float = 80.0
    scan_period: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.r_min < self.r_max):
            raise ValueError("require 0 < r_min < r_max")
        if not self.T_L_I.is_valid(tol=1e-8):
            raise ValueError("invalid extrinsic pose")


def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    """Integer voxel index per point, floor binning."""
    return np.floor(np.asarray(points, dtype=float) / voxel).astype(np.int64)


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Reduce a point set to one centroid per occupied voxel.

    Output rows are ordered by voxel index, which makes the result independent
    of the input ordering.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return points.copy()
    keys = voxel_keys(points, voxel)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inv, points)
    return sums / counts[:, None]


def deskew(scan: Scan, rig: SensorRig, motion: StampedPoses) -> np.ndarray:
    """Map every scan point into the platform frame at scan end.

    Each point is first taken through the LiDAR extrinsic, then through the
    relative pose of its firing time with respect to the window end, obtained
    by interpolating the propagated motion. Cardinality is preserved.
    """
    times = scan.times
    if len(times) == 0:
        return np.zeros((0, 3))
    if times.min() < motion.t_start - 1e-9 or times.max() > motion.t_end + 1e-9:
        raise ValueError("scan timestamps outside the propagated motion window")
    p_imu = scan.points @ rig.T_L_I.R.T + rig.T_L_I.t
    R_rel, t_rel = motion.relative_to_end(times)
    return np.einsum("nij,nj->ni", R_rel, p_imu) + t_rel


def _shell_offsets(r: int) -> np.ndarray:
    """Integer offsets at Chebyshev distance exactly r (the shell of a cube)."""
    if r == 0:
        return np.zeros((1, 3), dtype=np.int64)
    rng = range(-r, r + 1)
    offs = [(dx, dy, dz) for dx in rng for dy in rng for dz in rng
            if max(abs(dx), abs(dy), abs(dz)) == r]
    return np.array(offs, dtype=np.int64)


class VoxelSubmap:
    """Voxel-hashed global point store with exact nearest-neighbor queries."""

    def __init__(self, voxel: float = 0.5, max_points_per_voxel: int = 20,
                 prune_radius: float = 100.0):
        if voxel <= 0 or max_points_per_voxel < 1 or prune_radius <= 0:
            raise ValueError("invalid submap parameters")
        self.voxel = float(voxel)
        self.max_points_per_voxel = int(max_points_per_voxel)
        self.prune_radius = float(prune_radius)
        self._cells: dict[tuple[int, int, int], np.ndarray] = {}
        self._count = 0
        self._flat: np.ndarray | None = None
        self._tree: cKDTree | None = None

    def __len__(self) -> int:
        return self._count

    @property
    def n_voxels(self) -> int:
        return len(self._cells)

    def points(self) -> np.ndarray:
        """All stored points as one (P, 3) array (insertion order within voxels)."""
        self._ensure_index()
        return self._flat.copy() if self._flat is not None else np.zeros((0, 3))

    def insert(self, points: np.ndarray, origin: np.ndarray | None = None) -> int:
        """Add global-frame points, capping each voxel at its capacity.

        The earliest-inserted points of a voxel are kept; overflow is dropped.
        When origin is given, voxels beyond the pruning radius from it are
        evicted afterwards. Returns the number of points actually stored.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) and not np.all(np.isfinite(points)):
            raise ValueError("non-finite points")
        added = 0
        if len(points):
            keys = voxel_keys(points, self.voxel)
            order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))  # stable: keeps arrival order per voxel
            sorted_keys = keys[order]
            sorted_pts = points[order]
            boundaries = np.flatnonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)) + 1
            starts = np.concatenate([[0], boundaries])
            ends = np.concatenate([boundaries, [len(sorted_pts)]])
            for s, e in zip(starts, ends):
                key = tuple(int(k) for k in sorted_keys[s])
                cell = self._cells.get(key)
                have = 0 if cell is None else len(cell)
                room = self.max_points_per_voxel - have
                if room <= 0:
                    continue
                take = sorted_pts[s:min(e, s + room)]
                self._cells[key] = take.copy() if cell is None else np.vstack([cell, take])
                added += len(take)
        if added:
            self._count += added
            self._invalidate()
        if origin is not None:
            self.prune(origin)
        return added

    def prune(self, center: np.ndarray) -> int:
        """Evict voxels whose center is farther than the pruning radius; returns count evicted."""
        center = np.asarray(center, dtype=float).reshape(3)
        doomed = []
        for key, cell in self._cells.items():
            c = (np.array(key, dtype=float) + 0.5) * self.voxel
            if np.linalg.norm(c - center) > self.prune_radius:
                doomed.append((key, len(cell)))
        for key, n in doomed:
            del self._cells[key]
            self._count -= n
        if doomed:
            self._invalidate()
        return len(doomed)

    def _invalidate(self) -> None:
        self._flat = None
        self._tree = None

    def _ensure_index(self) -> None:
        if self._flat is not None or not self._cells:
            return
        self._flat = np.vstack(list(self._cells.values()))
        self._tree = cKDTree(self._flat)

    def nearest(self, q: np.ndarray):
        """Exact nearest stored point to q via expanding voxel shells.

        Starts from the 3x3x3 neighborhood of the query's voxel and widens the
        shell until no farther shell can beat the best squared distance.
        Returns (point, distance) or None for an empty map.
        """
        if not self._cells:
            return None
        q = np.asarray(q, dtype=float).reshape(3)
        center = np.floor(q / self.voxel).astype(np.int64)
        keys = np.array(list(self._cells.keys()), dtype=np.int64)
        max_r = int(np.max(np.max(np.abs(keys - center), axis=1)))
        best_d2 = np.inf
        best = None
        r = 0
        while r <= max_r:
            if best is not None and (r - 1) * self.voxel > np.sqrt(best_d2):
                break
            for off in _shell_offsets(r):
                cell = self._cells.get((int(center[0] + off[0]),
                                        int(center[1] + off[1]),
                                        int(center[2] + off[2])))
                if cell is None:
                    continue
                d2 = np.sum((cell - q) ** 2, axis=1)
                i = int(np.argmin(d2))
                if d2[i] < best_d2:
                    best_d2 = float(d2[i])
                    best = cell[i]
            r += 1
        if best is None:
            return None
        return best.copy(), float(np.sqrt(best_d2))

    def nearest_batch(self, queries: np.ndarray):
        """Exact nearest stored point for each query row, via the KD index.

        Returns (targets (M, 3), distances (M,), indices (M,)) into points().
        Matches nearest() distances exactly; ties (measure-zero on real data)
        may resolve to a different co-distant point.
        """
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        if not self._cells:
            raise ValueError("empty submap")
        self._ensure_index()
        dist, idx = self._tree.query(queries, k=1, workers=1)
        return self._flat[idx], dist, idx

    def local_normal(self, q: np.ndarray, k: int = 5, radius: float = 1.0,
                     planarity_min: float = 3.0):
        """Surface normal at q from its k nearest stored neighbors, or None.

        None when fewer than k neighbors lie within the search radius or when
        the neighborhood is not planar enough (mid/small eigenvalue ratio
        below planarity_min, or rank below 2).
        """
        normals, valid = self.local_normals_batch(
            np.asarray(q, dtype=float).reshape(1, 3), k=k, radius=radius,
            planarity_min=planarity_min)
        return normals[0] if valid[0] else None

    def local_normals_batch(self, queries: np.ndarray, k: int = 5,
                            radius: float = 1.0, planarity_min: float = 3.0):
        """Vectorized local_normal. Returns (normals (M, 3), valid (M,) bool)."""
        if k < 3:
            raise ValueError("normal estimation needs k >= 3 neighbors")
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        m = len(queries)
        normals = np.full((m, 3), np.nan)
        valid = np.zeros(m, dtype=bool)
        if not self._cells or m == 0:
            return normals, valid
        self._ensure_index()
        k_eff = min(k, len(self._flat))
        if k_eff < k:
            return normals, valid
        dist, idx = self._tree.query(queries, k=k_eff, workers=1,
                                     distance_upper_bound=radius)
        ok = np.all(np.isfinite(dist), axis=1)
        if not np.any(ok):
            return normals, valid
        nb = self._flat[idx[ok]]                      # (m_ok, k, 3)
        mean = nb.mean(axis=1, keepdims=True)
        centered = nb - mean
        cov = np.einsum("mki,mkj->mij", centered, centered) / k
        w, V = sym_eig3_batch(cov)
        lam0 = np.maximum(w[:, 0], 0.0)
        lam1 = np.maximum(w[:, 1], 0.0)
        lam2 = np.maximum(w[:, 2], 0.0)
        planar = (lam1 > planarity_min * lam0) & (lam1 > 1e-12 * np.maximum(lam2, 1e-300))
        out = np.full((int(ok.sum()), 3), np.nan)
        out[planar] = V[planar][:, :, 0]
        normals[ok] = out
        valid[ok] = planar
        return normals, valid
