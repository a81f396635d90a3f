"""IMU state and covariance propagation between scans.

State tangent ordering is fixed as (R, t, v, b_g, b_a, g), 3 components each,
18 total; the noise vector is (n_g, n_a, n_wg, n_wa), 12 total. The discrete
transition is forward Euler over each sample interval, which a negated-dt step
inverts exactly for constant inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .so3 import Pose, exp_so3, hat, is_rotation, log_so3, log_so3_batch, so3_right_jacobian

STATE_DIM = 18
NOISE_DIM = 12
I_R = slice(0, 3)
I_T = slice(3, 6)
I_V = slice(6, 9)
I_BG = slice(9, 12)
I_BA = slice(12, 15)
I_G = slice(15, 18)

GRAVITY = 9.81
DEFAULT_MAX_STEP = 0.02
DEFAULT_MAX_GAP = 0.1


class ImuSample(NamedTuple):
    t: float
    gyro: np.ndarray   # rad/s, body frame
    accel: np.ndarray  # m/s^2, body frame


class ImuDropoutError(RuntimeError):
    """Raised when consecutive IMU samples are farther apart than the dropout gap."""


@dataclass
class NavState:
    """Full navigation state: attitude, position, velocity, IMU biases, gravity."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -GRAVITY]))

    def __post_init__(self):
        for name in ("R", "t", "v", "b_g", "b_a", "g"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def pose(self) -> Pose:
        return Pose(self.R, self.t)

    def copy(self) -> "NavState":
        return NavState(self.R.copy(), self.t.copy(), self.v.copy(),
                        self.b_g.copy(), self.b_a.copy(), self.g.copy())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, n)))
                   for n in ("R", "t", "v", "b_g", "b_a", "g"))

    def validate(self, g_bounds=(9.0, 10.5)) -> None:
        if not self.is_finite():
            raise ValueError("non-finite NavState")
        if not is_rotation(self.R, tol=1e-8):
            raise ValueError("NavState.R is not a rotation")
        gn = np.linalg.norm(self.g)
        if not (g_bounds[0] <= gn <= g_bounds[1]):
            raise ValueError(f"|g| = {gn:.4f} outside {g_bounds}")


def state_boxplus(x: NavState, delta: np.ndarray) -> NavState:
    """Perturb a NavState by an 18-tangent (rotation right-perturbed)."""
    d = np.asarray(delta, dtype=float).reshape(STATE_DIM)
    return NavState(x.R @ exp_so3(d[I_R]), x.t + d[I_T], x.v + d[I_V],
                    x.b_g + d[I_BG], x.b_a + d[I_BA], x.g + d[I_G])


def state_boxminus(a: NavState, b: NavState) -> np.ndarray:
    """18-tangent difference; inverse of state_boxplus at b."""
    return np.concatenate([log_so3(b.R.T @ a.R), a.t - b.t, a.v - b.v,
                           a.b_g - b.b_g, a.b_a - b.b_a, a.g - b.g])


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time noise densities; all units per sqrt(Hz)."""

    gyro_noise: float = 1e-3      # rad/s/sqrt(Hz)
    accel_noise: float = 1e-2     # m/s^2/sqrt(Hz)
    gyro_walk: float = 1e-5       # rad/s^2/sqrt(Hz)
    accel_walk: float = 1e-4      # m/s^3/sqrt(Hz)

    def __post_init__(self):
        if min(self.gyro_noise, self.accel_noise, self.gyro_walk, self.accel_walk) < 0:
            raise ValueError("noise densities must be non-negative")

    def discrete_q(self, dt: float) -> np.ndarray:
        """12x12 diagonal covariance of the discrete noise vector over a step dt.

        Measurement noise is averaged over the step (variance density^2 / dt);
        bias random walk accumulates variance density^2 * dt.
        """
        dt = abs(dt)
        d = np.concatenate([
            np.full(3, self.gyro_noise ** 2 / dt),
            np.full(3, self.accel_noise ** 2 / dt),
            np.full(3, self.gyro_walk ** 2 * dt),
            np.full(3, self.accel_walk ** 2 * dt),
        ])
        return np.diag(d)


@dataclass(frozen=True)
class PosePrior:
    """Predicted pose with its rotation/translation covariance blocks."""

    pose: Pose
    P_r: np.ndarray
    P_t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "P_r", np.asarray(self.P_r, dtype=float).reshape(3, 3))
        object.__setattr__(self, "P_t", np.asarray(self.P_t, dtype=float).reshape(3, 3))


def _check_step(x: NavState, u: ImuSample, dt: float, max_dt: float) -> None:
    if not np.isfinite(dt) or dt == 0.0:
        raise ValueError(f"invalid step dt={dt}")
    if abs(dt) > max_dt:
        raise ValueError(f"|dt|={abs(dt):.4f} exceeds max step {max_dt}")
    if not x.is_finite():
        raise ValueError("non-finite state")
    if not (np.all(np.isfinite(u.gyro)) and np.all(np.isfinite(u.accel))):
        raise ValueError("non-finite IMU sample")


def _transition(x: NavState, u: ImuSample, dt: float, w: np.ndarray | None = None) -> NavState:
    """One discrete step of the motion model, optionally noise-perturbed.

    Single-sample Euler step over dt, except that the body acceleration is
    rotated through the step-midpoint attitude 0.5*(R + R*Exp(omega*dt)).
    The midpoint makes a negated-dt step the exact inverse of the forward
    step (the stated reversibility contract), and the retained half-dt^2
    position term keeps constant-acceleration segments truncation-free.
    """
    if w is None:
        w = np.zeros(NOISE_DIM)
    omega = np.asarray(u.gyro, dtype=float) - x.b_g - w[0:3]
    a_body = np.asarray(u.accel, dtype=float) - x.b_a - w[3:6]
    E = exp_so3(omega * dt)
    a_world = 0.5 * (x.R @ a_body + x.R @ (E @ a_body)) + x.g
    return NavState(
        R=x.R @ E,
        t=x.t + x.v * dt + 0.5 * a_world * dt * dt,
        v=x.v + a_world * dt,
        b_g=x.b_g + w[6:9],
        b_a=x.b_a + w[9:12],
        g=x.g.copy(),
    )


def propagate_state(x: NavState, u: ImuSample, dt: float,
                    max_dt: float = DEFAULT_MAX_STEP) -> NavState:
    """Propagate the state through one IMU sample held constant over dt.

    Negative dt integrates backward and exactly inverts the forward step for
    identical inputs; dt == 0 and non-finite inputs are rejected.
    """
    _check_step(x, u, dt, max_dt)
    return _transition(x, u, dt)


def transition_jacobians(x: NavState, u: ImuSample, dt: float):
    """Analytic Jacobians (F_x, F_w) of the discrete transition on the state tangent."""
    omega = np.asarray(u.gyro, dtype=float) - x.b_g
    a_body = np.asarray(u.accel, dtype=float) - x.b_a
    R = x.R
    phi = omega * dt
    E = exp_so3(phi)
    Jr = so3_right_jacobian(phi)
    M = 0.5 * (np.eye(3) + E)                 # midpoint attitude factor
    dAcc_dTheta = -R @ hat(M @ a_body)        # accel sensitivity to attitude
    dAcc_dBg = 0.5 * R @ E @ hat(a_body) @ Jr * dt
    dAcc_dBa = -R @ M
    eye = np.eye(3)
    half = 0.5 * dt * dt

    F_x = np.eye(STATE_DIM)
    F_x[I_R, I_R] = E.T
    F_x[I_R, I_BG] = -Jr * dt
    F_x[I_T, I_R] = dAcc_dTheta * half
    F_x[I_T, I_V] = eye * dt
    F_x[I_T, I_BG] = dAcc_dBg * half
    F_x[I_T, I_BA] = dAcc_dBa * half
    F_x[I_T, I_G] = eye * half
    F_x[I_V, I_R] = dAcc_dTheta * dt
    F_x[I_V, I_BG] = dAcc_dBg * dt
    F_x[I_V, I_BA] = dAcc_dBa * dt
    F_x[I_V, I_G] = eye * dt

    F_w = np.zeros((STATE_DIM, NOISE_DIM))
    F_w[I_R, 0:3] = -Jr * dt
    F_w[I_T, 0:3] = dAcc_dBg * half
    F_w[I_T, 3:6] = dAcc_dBa * half
    F_w[I_V, 0:3] = dAcc_dBg * dt
    F_w[I_V, 3:6] = dAcc_dBa * dt
    F_w[I_BG, 6:9] = eye
    F_w[I_BA, 9:12] = eye
    return F_x, F_w


def propagate_covariance(P: np.ndarray, x: NavState, u: ImuSample, dt: float,
                         noise: ImuNoiseParams,
                         max_dt: float = DEFAULT_MAX_STEP) -> np.ndarray:
    """One covariance step: F_x P F_x^T + F_w Q F_w^T, re-symmetrized."""
    _check_step(x, u, dt, max_dt)
    P = np.asarray(P, dtype=float)
    if P.shape != (STATE_DIM, STATE_DIM) or not np.all(np.isfinite(P)):
        raise ValueError("invalid covariance")
    F_x, F_w = transition_jacobians(x, u, dt)
    P_new = F_x @ P @ F_x.T + F_w @ noise.discrete_q(dt) @ F_w.T
    return 0.5 * (P_new + P_new.T)


@dataclass
class StampedPoses:
    """Time-indexed pose samples of one propagation window, for interpolation."""

    times: np.ndarray    # (M,), strictly increasing
    Rs: np.ndarray       # (M, 3, 3)
    ts: np.ndarray       # (M, 3)
    _seg_xi: np.ndarray | None = None  # cached per-segment rotation logs

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def end_pose(self) -> Pose:
        return Pose(self.Rs[-1], self.ts[-1])

    def _segment_logs(self) -> np.ndarray:
        if self._seg_xi is None:
            rel = np.einsum("nji,njk->nik", self.Rs[:-1], self.Rs[1:])
            self._seg_xi = log_so3_batch(rel)
        return self._seg_xi

    def interpolate(self, tau: float | np.ndarray):
        """World pose(s) at time(s) tau: slerp in rotation, linear in translation."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        if tau.min() < self.times[0] - 1e-9 or tau.max() > self.times[-1] + 1e-9:
            raise ValueError(
                f"time {tau.min():.6f}..{tau.max():.6f} outside window "
                f"[{self.times[0]:.6f}, {self.times[-1]:.6f}]")
        if len(self.times) == 1:
            return np.broadcast_to(self.Rs[0], (len(tau), 3, 3)).copy(), \
                np.broadcast_to(self.ts[0], (len(tau), 3)).copy()
        idx = np.clip(np.searchsorted(self.times, tau, side="right") - 1,
                      0, len(self.times) - 2)
        ta = self.times[idx]
        tb = self.times[idx + 1]
        s = np.clip((tau - ta) / (tb - ta), 0.0, 1.0)
        xi = self._segment_logs()[idx] * s[:, None]
        R = np.einsum("nij,njk->nik", self.Rs[idx], exp_so3(xi))
        t = (1.0 - s)[:, None] * self.ts[idx] + s[:, None] * self.ts[idx + 1]
        return R, t

    def relative_to_end(self, tau: float | np.ndarray):
        """Relative pose(s) mapping the frame at tau into the window-end frame."""
        R, t = self.interpolate(tau)
        Re = self.Rs[-1]
        te = self.ts[-1]
        R_rel = np.einsum("ji,njk->nik", Re, R)
        t_rel = (t - te) @ Re
        return R_rel, t_rel


def interpolate_relative_pose(window: StampedPoses, tau: float) -> Pose:
    """Pose of the platform at time tau expressed in the window-end frame."""
    R_rel, t_rel = window.relative_to_end(float(tau))
    return Pose(R_rel[0], t_rel[0])


@dataclass
class Prediction:
    """Output of predict_pose: propagated state, covariance, pose prior, pose track."""

    state: NavState
    cov: np.ndarray
    prior: PosePrior
    poses: StampedPoses


def predict_pose(x: NavState, P: np.ndarray, samples: Sequence[ImuSample],
                 noise: ImuNoiseParams, t_start: float,
                 max_dt: float = DEFAULT_MAX_STEP,
                 max_gap: float = DEFAULT_MAX_GAP) -> Prediction:
    """Propagate state and covariance across an IMU window ending at the next scan.

    Samples must strictly follow t_start; a sample spacing above max_gap is
    treated as an IMU dropout. Steps longer than max_dt are subdivided with the
    measurement held constant. Also records the pose at every sample time for
    de-skew interpolation.

    Returns a Prediction whose prior carries the rotation/translation blocks of
    the propagated covariance.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty IMU window")
    x = x.copy()
    P = 0.5 * (np.asarray(P, dtype=float) + np.asarray(P, dtype=float).T)
    times = [float(t_start)]
    Rs = [x.R.copy()]
    ts = [x.t.copy()]
    t_prev = float(t_start)
    for u in samples:
        dt = float(u.t) - t_prev
        if dt <= 0.0:
            raise ValueError(f"IMU timestamps must strictly increase past {t_prev}")
        if dt > max_gap:
            raise ImuDropoutError(f"IMU gap of {dt:.4f}s at t={u.t:.4f} exceeds {max_gap}s")
        n_sub = max(1, int(np.ceil(dt / max_dt)))
        sub = dt / n_sub
        for _ in range(n_sub):
            P = propagate_covariance(P, x, u, sub, noise, max_dt=max_dt)
            x = propagate_state(x, u, sub, max_dt=max_dt)
        t_prev = float(u.t)
        times.append(t_prev)
        Rs.append(x.R.copy())
        ts.append(x.t.copy())
    poses = StampedPoses(np.array(times), np.stack(Rs), np.stack(ts))
    prior = PosePrior(x.pose, P[I_R, I_R].copy(), P[I_T, I_T].copy())
    return Prediction(x, P, prior, poses)


@dataclass
class ImuStream:
    """Columnar IMU sample stream with strictly increasing timestamps."""

    times: np.ndarray  # (N,)
    gyro: np.ndarray   # (N, 3)
    accel: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if len(self.times) and np.any(np.diff(self.times) <= 0):
            raise ValueError("IMU timestamps must strictly increase")

    def __len__(self) -> int:
        return len(self.times)

    def sample(self, i: int) -> ImuSample:
        return ImuSample(float(self.times[i]), self.gyro[i], self.accel[i])

    def __iter__(self):
        return (self.sample(i) for i in range(len(self)))

    def window(self, t0: float, t1: float) -> list[ImuSample]:
        """Samples with t in (t0, t1]."""
        lo = int(np.searchsorted(self.times, t0, side="right"))
        hi = int(np.searchsorted(self.times, t1, side="right"))
        return [self.sample(i) for i in range(lo, hi)]


def relative_motion_of(prev_pose: Pose, pred_pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) of the predicted frame expressed in the previous-scan frame."""
    rel = prev_pose.inverse().compose(pred_pose)
    return rel.R, rel.t
