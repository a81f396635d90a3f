"""Deterministic synthetic world: scenes, trajectories, LiDAR sweeps, IMU streams.

Trajectories are closed-form, so velocity, angular rate, and acceleration come
from exact derivatives and the IMU measurement model can be inverted without
integration error. LiDAR sweeps fire one azimuth column at a time from the
continuously moving sensor pose, which is what produces the in-scan motion
distortion the odometry front end has to undo. All randomness is owned by
per-scan seeded generators, so identical seeds give bit-identical outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imu import GRAVITY, ImuNoiseParams, ImuStream
from .so3 import Pose
from .voxel_map import Scan, SensorRig

SCENE_KINDS = ("corridor", "tunnel", "plane", "room", "offroad_scatter")
TRAJECTORY_KINDS = ("static", "constant_velocity", "line_with_yaw", "figure_eight")


# ---------------------------------------------------------------------------
# scenes

@dataclass(frozen=True)
class SceneModel:
    """Parametric scene description; dimensions in meters.

    length/width/height parameterize box-like scenes (corridor/room), radius
    the tunnel bore, density the scatter-post density (posts per square meter
    over the annulus between scatter_r_min and scatter_r_max).
    """

    kind: str = "room"
    length: float = 8.0
    width: float = 8.0
    height: float = 3.0
    radius: float = 4.0
    density: float = 0.004
    scatter_r_min: float = 8.0
    scatter_r_max: float = 55.0
    post_radius: float = 0.2
    post_height: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if min(self.length, self.width, self.height, self.radius) <= 0:
            raise ValueError("scene dimensions must be positive")


class Scene:
    """Analytic scene geometry: ray casting and closest-surface queries."""

    degenerate_axis: np.ndarray | None = None

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Range to the first surface hit per unit-direction ray; inf on miss."""
        raise NotImplementedError

    def foot_points(self, points: np.ndarray) -> np.ndarray:
        """Closest surface point for each query point."""
        raise NotImplementedError

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.linalg.norm(points - self.foot_points(points), axis=1)


class PlaneScene(Scene):
    """Infinite ground plane z = 0."""

    def raycast(self, origins, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -origins[:, 2] / dirs[:, 2]
        ok = (np.abs(dirs[:, 2]) > 1e-12) & (t > 1e-9)
        return np.where(ok, t, np.inf)

    def foot_points(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        out = points.copy()
        out[:, 2] = 0.0
        return out


class RoomScene(Scene):
    """Axis-aligned box interior: floor z=0, ceiling z=height, four walls."""

    def __init__(self, length: float, width: float, height: float):
        self.hx = length / 2.0
        self.hy = width / 2.0
        self.height = height
        self._lo = np.array([-self.hx, -self.hy, 0.0])
        self._hi = np.array([self.hx, self.hy, height])

    def raycast(self, origins, dirs):
        best = np.full(len(origins), np.inf)
        for ax in range(3):
            for bound in (self._lo[ax], self._hi[ax]):
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = (bound - origins[:, ax]) / dirs[:, ax]
                    ok = (np.abs(dirs[:, ax]) > 1e-12) & (t > 1e-9)
                    hit = origins + np.where(ok, t, 0.0)[:, None] * dirs
                for other in range(3):
                    if other == ax:
                        continue
                    ok &= (hit[:, other] >= self._lo[other] - 1e-9)
                    ok &= (hit[:, other] <= self._hi[other] + 1e-9)
                best = np.where(ok & (t < best), t, best)
        return best

    def foot_points(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        clamped = np.clip(points, self._lo, self._hi)
        # distance to each face from inside; snap to the closest one
        d_lo = clamped - self._lo
        d_hi = self._hi - clamped
        gaps = np.concatenate([d_lo, d_hi], axis=1)
        face = np.argmin(gaps, axis=1)
        out = clamped.copy()
        for i, f in enumerate(face):
            ax = f % 3
            out[i, ax] = self._lo[ax] if f < 3 else self._hi[ax]
        return out


class CorridorScene(Scene):
    """Two walls at x = +-width/2, floor z = 0, ceiling z = height; infinite y."""

    def __init__(self, width: float, height: float):
        self.hx = width / 2.0
        self.height = height
        self.degenerate_axis = np.array([0.0, 1.0, 0.0])

    def raycast(self, origins, dirs):
        best = np.full(len(origins), np.inf)
        for ax, bounds in ((0, (-self.hx, self.hx)), (2, (0.0, self.height))):
            for bound in bounds:
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = (bound - origins[:, ax]) / dirs[:, ax]
                ok = (np.abs(dirs[:, ax]) > 1e-12) & (t > 1e-9)
                best = np.where(ok & (t < best), t, best)
        return best

    def foot_points(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        cands = np.stack([
            np.column_stack([np.full(len(points), -self.hx), points[:, 1], points[:, 2]]),
            np.column_stack([np.full(len(points), self.hx), points[:, 1], points[:, 2]]),
            np.column_stack([points[:, 0], points[:, 1], np.zeros(len(points))]),
            np.column_stack([points[:, 0], points[:, 1], np.full(len(points), self.height)]),
        ])
        d = np.linalg.norm(cands - points[None], axis=2)
        pick = np.argmin(d, axis=0)
        return cands[pick, np.arange(len(points))]


class TunnelScene(Scene):
    """Circular bore of given radius around the axis x = 0, z = height-of-axis.

    The axis runs along y at z = radius so the floor tangent sits at z = 0.
    """

    def __init__(self, radius: float):
        self.radius = radius
        self.z0 = radius
        self.degenerate_axis = np.array([0.0, 1.0, 0.0])

    def _radial(self, points):
        r = points[:, [0, 2]].copy()
        r[:, 1] -= self.z0
        return r

    def raycast(self, origins, dirs):
        o = self._radial(origins)
        d = dirs[:, [0, 2]]
        a = np.sum(d * d, axis=1)
        b = 2.0 * np.sum(o * d, axis=1)
        c = np.sum(o * o, axis=1) - self.radius ** 2
        disc = b * b - 4 * a * c
        ok = (a > 1e-12) & (disc >= 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (-b + np.sqrt(np.maximum(disc, 0.0))) / (2 * a)  # inside -> exit root
        return np.where(ok & (t > 1e-9), t, np.inf)

    def foot_points(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        rad = self._radial(points)
        rn = np.linalg.norm(rad, axis=1)
        rn = np.where(rn < 1e-12, 1e-12, rn)
        scaled = rad * (self.radius / rn)[:, None]
        out = points.copy()
        out[:, 0] = scaled[:, 0]
        out[:, 2] = scaled[:, 1] + self.z0
        return out


class ScatterScene(Scene):
    """Open ground plane with sparse vertical posts scattered in an annulus."""

    def __init__(self, density: float, r_min: float, r_max: float,
                 post_radius: float, post_height: float, seed: int):
        area = np.pi * (r_max ** 2 - r_min ** 2)
        n_posts = max(1, int(round(density * area)))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        radii = np.sqrt(rng.uniform(r_min ** 2, r_max ** 2, n_posts))
        angles = rng.uniform(0.0, 2 * np.pi, n_posts)
        self.posts = np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
        self.post_radius = post_radius
        self.post_height = post_height
        self._plane = PlaneScene()

    def raycast(self, origins, dirs):
        best = self._plane.raycast(origins, dirs)
        o_xy = origins[:, :2]
        d_xy = dirs[:, :2]
        a = np.sum(d_xy * d_xy, axis=1)
        for cx, cy in self.posts:
            rel = o_xy - np.array([cx, cy])
            b = 2.0 * np.sum(d_xy * rel, axis=1)
            c = np.sum(rel * rel, axis=1) - self.post_radius ** 2
            disc = b * b - 4 * a * c
            ok = (a > 1e-12) & (disc >= 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a)  # entry root
            z = origins[:, 2] + t * dirs[:, 2]
            ok &= (t > 1e-9) & (z >= 0.0) & (z <= self.post_height)
            best = np.where(ok & (t < best), t, best)
        return best

    def foot_points(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        best = self._plane.foot_points(points)
        best_d = np.linalg.norm(points - best, axis=1)
        for cx, cy in self.posts:
            rel = points[:, :2] - np.array([cx, cy])
            rn = np.linalg.norm(rel, axis=1)
            rn_safe = np.where(rn < 1e-12, 1e-12, rn)
            lateral = np.column_stack([
                np.array([cx, cy]) + rel * (self.post_radius / rn_safe)[:, None],
                np.clip(points[:, 2], 0.0, self.post_height),
            ])
            d = np.linalg.norm(points - lateral, axis=1)
            closer = d < best_d
            best[closer] = lateral[closer]
            best_d[closer] = d[closer]
        return best


def make_scene(model: SceneModel) -> Scene:
    if model.kind == "plane":
        return PlaneScene()
    if model.kind == "room":
        return RoomScene(model.length, model.width, model.height)
    if model.kind == "corridor":
        return CorridorScene(model.width, model.height)
    if model.kind == "tunnel":
        return TunnelScene(model.radius)
    return ScatterScene(model.density, model.scatter_r_min, model.scatter_r_max,
                        model.post_radius, model.post_height, model.seed)


# ---------------------------------------------------------------------------
# trajectories

@dataclass(frozen=True)
class TrajectorySpec:
    """Closed-form platform trajectory.

    velocity drives constant_velocity and line_with_yaw; yaw_rate spins
    line_with_yaw; figure_eight sweeps a lemniscate of amplitude pos_amplitude
    at angular frequency omega with a yaw oscillation of yaw_amplitude.
    start_z sets the platform height above the ground plane.
    """

    kind: str = "static"
    duration: float = 5.0
    imu_rate: float = 200.0
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw_rate: float = 0.0
    pos_amplitude: tuple[float, float, float] = (1.0, 1.0, 0.0)
    yaw_amplitude: float = 0.2
    omega: float = 1.0
    start_z: float = 1.5

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.imu_rate < 100.0:
            raise ValueError("IMU synthesis needs at least 100 Hz")


@dataclass
class TrajectorySample:
    pose: Pose
    velocity: np.ndarray     # world, m/s
    omega_body: np.ndarray   # body, rad/s
    accel: np.ndarray        # world, m/s^2


def _traj_arrays(spec: TrajectorySpec, t: np.ndarray):
    """Positions, yaws, and exact derivatives at times t (vectorized)."""
    t = np.asarray(t, dtype=float)
    zeros = np.zeros_like(t)
    base = np.array([0.0, 0.0, spec.start_z])
    if spec.kind == "static":
        pos = np.zeros(t.shape + (3,)) + base
        vel = np.zeros_like(pos)
        acc = np.zeros_like(pos)
        yaw = zeros
        yaw_rate = zeros
    elif spec.kind in ("constant_velocity", "line_with_yaw"):
        v = np.array(spec.velocity, dtype=float)
        pos = base + t[..., None] * v
        vel = np.broadcast_to(v, pos.shape).copy()
        acc = np.zeros_like(pos)
        rate = spec.yaw_rate if spec.kind == "line_with_yaw" else 0.0
        yaw = rate * t
        yaw_rate = np.full_like(t, rate)
    else:  # figure_eight
        ax, ay, az = spec.pos_amplitude
        om = spec.omega
        s, c = np.sin(om * t), np.cos(om * t)
        s2, c2 = np.sin(2 * om * t), np.cos(2 * om * t)
        pos = base + np.stack([ax * s, 0.5 * ay * s2, az * s], axis=-1)
        vel = np.stack([ax * om * c, ay * om * c2, az * om * c], axis=-1)
        acc = np.stack([-ax * om * om * s, -2 * ay * om * om * s2,
                        -az * om * om * s], axis=-1)
        yaw = spec.yaw_amplitude * s
        yaw_rate = spec.yaw_amplitude * om * c
    return pos, vel, acc, yaw, yaw_rate


def _yaw_matrices(yaw: np.ndarray) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.zeros(np.shape(yaw) + (3, 3))
    R[..., 0, 0] = c
    R[..., 0, 1] = -s
    R[..., 1, 0] = s
    R[..., 1, 1] = c
    R[..., 2, 2] = 1.0
    return R


def sample_trajectory(spec: TrajectorySpec, t: float) -> TrajectorySample:
    """Exact kinematic state at time t (closed form, no numeric differentiation)."""
    if not (0.0 <= t <= spec.duration + 1e-9):
        raise ValueError(f"t={t} outside [0, {spec.duration}]")
    pos, vel, acc, yaw, yaw_rate = _traj_arrays(spec, np.atleast_1d(t))
    R = _yaw_matrices(yaw)[0]
    # yaw-only attitude: world z-rate maps to body z-rate unchanged
    omega_body = np.array([0.0, 0.0, float(yaw_rate[0])])
    return TrajectorySample(Pose(R, pos[0]), vel[0], omega_body, acc[0])


def trajectory_poses(spec: TrajectorySpec, t: np.ndarray):
    """Vectorized poses at times t: returns (Rs (N, 3, 3), positions (N, 3))."""
    t = np.asarray(t, dtype=float)
    if len(t) and (t.min() < -1e-9 or t.max() > spec.duration + 1e-9):
        raise ValueError("times outside trajectory span")
    pos, _, _, yaw, _ = _traj_arrays(spec, t)
    return _yaw_matrices(yaw), pos


# ---------------------------------------------------------------------------
# sensors

def simulate_imu(spec: TrajectorySpec, noise: ImuNoiseParams,
                 gyro_bias=(0.0, 0.0, 0.0), accel_bias=(0.0, 0.0, 0.0),
                 g=(0.0, 0.0, -GRAVITY), rate: float | None = None,
                 seed: int = 0, bias_walk: bool = False) -> ImuStream:
    """Body-frame IMU measurements along the trajectory.

    Measurements are built from the exact kinematics: the gyro reads the body
    angular rate plus bias and white noise, the accelerometer reads the
    specific force R^T (a - g) plus bias and white noise. White-noise sigma is
    density * sqrt(rate). With bias_walk, biases random-walk at the configured
    densities starting from the given values.
    """
    rate = float(rate if rate is not None else spec.imu_rate)
    if rate <= 0:
        raise ValueError("rate must be positive")
    n = int(round(spec.duration * rate))
    ts = np.arange(1, n + 1) / rate
    pos, vel, acc, yaw, yaw_rate = _traj_arrays(spec, ts)
    Rs = _yaw_matrices(yaw)
    g = np.asarray(g, dtype=float)
    omega = np.zeros((n, 3))
    omega[:, 2] = yaw_rate
    spec_force = np.einsum("nji,nj->ni", Rs, acc - g)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    sqrt_rate = np.sqrt(rate)
    dt = 1.0 / rate
    gyro_b = np.zeros((n, 3)) + np.asarray(gyro_bias, dtype=float)
    accel_b = np.zeros((n, 3)) + np.asarray(accel_bias, dtype=float)
    if bias_walk:
        gyro_b += np.cumsum(rng.normal(0.0, noise.gyro_walk * np.sqrt(dt), (n, 3)), axis=0)
        accel_b += np.cumsum(rng.normal(0.0, noise.accel_walk * np.sqrt(dt), (n, 3)), axis=0)
    gyro = omega + gyro_b + rng.normal(0.0, noise.gyro_noise * sqrt_rate, (n, 3))
    accel = spec_force + accel_b + rng.normal(0.0, noise.accel_noise * sqrt_rate, (n, 3))
    return ImuStream(ts, gyro, accel)


@dataclass(frozen=True)
class LidarModel:
    """Spinning LiDAR: channels over an elevation fan, azimuth steps per turn."""

    channels: int = 16
    azimuth_steps: int = 1024
    period: float = 0.1
    sigma_r: float = 0.01
    r_min: float = 0.5
    r_max: float = 80.0
    elev_min: float = -np.pi / 6
    elev_max: float = np.pi / 6

    def __post_init__(self):
        if self.channels < 1 or self.azimuth_steps < 1:
            raise ValueError("channel/azimuth counts must be positive")
        if self.sigma_r < 0 or not (0 < self.r_min < self.r_max):
            raise ValueError("invalid range spec")

    def ray_directions(self) -> np.ndarray:
        """(azimuth_steps, channels, 3) unit directions in the sensor frame."""
        az = 2 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps
        if self.channels == 1:
            elev = np.array([0.5 * (self.elev_min + self.elev_max)])
        else:
            elev = np.linspace(self.elev_min, self.elev_max, self.channels)
        ca, sa = np.cos(az)[:, None], np.sin(az)[:, None]
        ce, se = np.cos(elev)[None, :], np.sin(elev)[None, :]
        x = ce * ca
        return np.stack([x, ce * sa, np.broadcast_to(se, x.shape)], axis=-1)

    def firing_times(self, t_k: float) -> np.ndarray:
        """Per-azimuth firing timestamps for the sweep ending at t_k."""
        m = np.arange(1, self.azimuth_steps + 1)
        return t_k - self.period + m * (self.period / self.azimuth_steps)


def simulate_scan(scene: Scene, spec: TrajectorySpec, lidar: LidarModel,
                  t_k: float, seed: int = 0,
                  rig: SensorRig | None = None) -> Scan:
    """One motion-distorted sweep ending at t_k.

    Every azimuth column is ray-cast from the exact sensor pose at its firing
    time; hits are stored in the sensor frame at that time with the firing
    offset tau = t_fire - t_k, plus Gaussian range noise. Misses and returns
    outside (r_min, r_max] are dropped.
    """
    if t_k - lidar.period < -1e-9 or t_k > spec.duration + 1e-9:
        raise ValueError("scan window outside the trajectory span")
    extr = rig.T_L_I if rig is not None else Pose.identity()
    times = lidar.firing_times(t_k)
    R_body, p_body = trajectory_poses(spec, times)
    R_sensor = R_body @ extr.R
    o_sensor = np.einsum("nij,j->ni", R_body, extr.t) + p_body

    d_sensor = lidar.ray_directions()                      # (M, C, 3)
    M, C = lidar.azimuth_steps, lidar.channels
    d_world = np.einsum("mij,mcj->mci", R_sensor, d_sensor)
    origins = np.repeat(o_sensor[:, None, :], C, axis=1)

    ranges = scene.raycast(origins.reshape(-1, 3), d_world.reshape(-1, 3))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2, int(round(t_k * 1e6))]))
    noisy = ranges + rng.normal(0.0, lidar.sigma_r, size=ranges.shape)
    keep = np.isfinite(ranges) & (noisy > lidar.r_min) & (noisy <= lidar.r_max)

    p_sensor = noisy[keep, None] * d_sensor.reshape(-1, 3)[keep]
    tau = np.repeat(times[:, None], C, axis=1).reshape(-1)[keep] - t_k
    return Scan(points=p_sensor, tau=tau, t_start=t_k - lidar.period, t_end=t_k)


def ground_truth_pairs(scan: Scan, scene: Scene, spec: TrajectorySpec,
                       rig: SensorRig | None = None):
    """Exact world-frame surface foot-point per scan point (test/ablation oracle).

    Each point is carried to the world through the true pose at its own firing
    time, then projected to the nearest scene surface. Returns
    (foot_points (N, 3), distances (N,)); with zero range noise the distances
    vanish.
    """
    extr = rig.T_L_I if rig is not None else Pose.identity()
    R_body, p_body = trajectory_poses(spec, scan.times)
    p_imu = scan.points @ extr.R.T + extr.t
    world = np.einsum("nij,nj->ni", R_body, p_imu) + p_body
    feet = scene.foot_points(world)
    return feet, np.linalg.norm(world - feet, axis=1)


def true_pose(spec: TrajectorySpec, t: float) -> Pose:
    return sample_trajectory(spec, t).pose
