"""Rotation and rigid-pose algebra: SO(3) exp/log maps, box-operators, 3x3 symmetric eigs.

Rotations are plain (3, 3) orthonormal numpy arrays throughout the package.
Tangent vectors for poses are 6-vectors ordered [rotation | translation].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector; batched for (..., 3) input."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def vee(M: np.ndarray) -> np.ndarray:
    """Inverse of hat for (..., 3, 3) skew-symmetric matrices."""
    M = np.asarray(M, dtype=float)
    return np.stack([M[..., 2, 1], M[..., 0, 2], M[..., 1, 0]], axis=-1)


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for an axis-angle vector (radians); batched for (..., 3).

    Below SMALL_ANGLE the sin/cos coefficients switch to their second-order
    series so the zero-rotation limit is exact and division-free.
    """
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    th2 = theta * theta
    small = theta < SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - th2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, th2))
    K = hat(omega)
    KK = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * KK


def log_so3(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, with norm in [0, pi].

    Extracted through the unit quaternion and an atan2 angle, which stays
    accurate at every angle including the theta = pi branch (there the sign
    convention makes the largest-magnitude axis component positive).
    """
    return log_so3_batch(np.asarray(R, dtype=float)[None])[0]


def log_so3_batch(R: np.ndarray) -> np.ndarray:
    """log_so3 over a stack of rotations (N, 3, 3) -> (N, 3)."""
    q = quat_xyzw_from_rot_batch(np.asarray(R, dtype=float))
    nv = np.linalg.norm(q[..., :3], axis=-1)
    tiny = nv < 1e-9
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = 2.0 * np.arctan2(nv, q[..., 3])
        scale = np.where(tiny, 2.0, theta / np.where(tiny, 1.0, nv))
    return q[..., :3] * scale[..., None]


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (1.0 / 6.0) * (K @ K)
    th2 = theta * theta
    c1 = (1.0 - np.cos(theta)) / th2
    c2 = (theta - np.sin(theta)) / (th2 * theta)
    return np.eye(3) - c1 * K + c2 * (K @ K)


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    """Orthonormality and det(+1) check within tol (Frobenius)."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (np.linalg.norm(R @ R.T - np.eye(3)) < tol
            and abs(np.linalg.det(R) - 1.0) < tol)


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi - 1e-3) -> np.ndarray:
    """Uniform-axis random rotation with angle uniform in (0, max_angle)."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0.0, max_angle))


@dataclass(frozen=True)
class Pose:
    """Rigid transform (R, t); maps points from its own frame into the parent frame."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -(Rt @ self.t))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to a 3-vector or an (N, 3) stack."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def is_valid(self, tol: float = 1e-9) -> bool:
        return is_rotation(self.R, tol) and bool(np.all(np.isfinite(self.t)))


def boxplus_pose(a: Pose, delta: np.ndarray) -> Pose:
    """Right-perturb a pose by a 6-tangent [rot | trans]: (R Exp(dr), t + dt)."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    return Pose(a.R @ exp_so3(delta[:3]), a.t + delta[3:])


def boxminus(a: Pose, b: Pose) -> np.ndarray:
    """6-tangent difference with boxplus_pose(b, boxminus(a, b)) == a."""
    return np.concatenate([log_so3(b.R.T @ a.R), a.t - b.t])


def _fix_eigvec_signs(V: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude component of each eigenvector column positive."""
    V = V.copy()
    idx = np.argmax(np.abs(V), axis=-2)
    if V.ndim == 2:
        for j in range(V.shape[1]):
            if V[idx[j], j] < 0.0:
                V[:, j] = -V[:, j]
        return V
    picked = np.take_along_axis(V, idx[..., None, :], axis=-2)[..., 0, :]
    V *= np.where(picked < 0.0, -1.0, 1.0)[..., None, :]
    return V


def sym_eig3(M: np.ndarray, asym_tol: float = 1e-6):
    """Eigen-decomposition of a symmetric 3x3 matrix.

    Returns (eigvals, eigvecs) with eigenvalues ascending and eigenvectors as
    orthonormal columns, sign-fixed so results are reproducible across runs.
    The input is symmetrized internally; a gross asymmetry (relative to its
    norm) is rejected as a usage error.
    """
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {M.shape}")
    scale = max(np.linalg.norm(M), 1e-300)
    if np.linalg.norm(M - M.T) > asym_tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return w, _fix_eigvec_signs(V)


def sym_eig3_batch(M: np.ndarray):
    """sym_eig3 over a stack (N, 3, 3) -> ((N, 3), (N, 3, 3)); same sign convention."""
    M = np.asarray(M, dtype=float)
    w, V = np.linalg.eigh(0.5 * (M + np.swapaxes(M, -1, -2)))
    return w, _fix_eigvec_signs(V)


def quat_xyzw_from_rot_batch(R: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) as (x, y, z, w) with w >= 0 for stacked rotations.

    Picks the largest of the four squared components per matrix to avoid
    cancellation; at w == 0 the sign is fixed by the largest vector component.
    """
    R = np.asarray(R, dtype=float)
    m00, m01, m02 = R[..., 0, 0], R[..., 0, 1], R[..., 0, 2]
    m10, m11, m12 = R[..., 1, 0], R[..., 1, 1], R[..., 1, 2]
    m20, m21, m22 = R[..., 2, 0], R[..., 2, 1], R[..., 2, 2]
    tr = m00 + m11 + m22
    case = np.argmax(np.stack([tr, m00, m11, m22], axis=-1), axis=-1)
    q = np.zeros(R.shape[:-2] + (4,))
    with np.errstate(invalid="ignore", divide="ignore"):
        s0 = np.sqrt(np.maximum(tr + 1.0, 0.0)) * 2.0
        m = case == 0
        if np.any(m):
            q[m, 0] = (m21 - m12)[m] / s0[m]
            q[m, 1] = (m02 - m20)[m] / s0[m]
            q[m, 2] = (m10 - m01)[m] / s0[m]
            q[m, 3] = 0.25 * s0[m]
        s1 = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 0.0)) * 2.0
        m = case == 1
        if np.any(m):
            q[m, 0] = 0.25 * s1[m]
            q[m, 1] = (m01 + m10)[m] / s1[m]
            q[m, 2] = (m02 + m20)[m] / s1[m]
            q[m, 3] = (m21 - m12)[m] / s1[m]
        s2 = np.sqrt(np.maximum(1.0 + m11 - m00 - m22, 0.0)) * 2.0
        m = case == 2
        if np.any(m):
            q[m, 0] = (m01 + m10)[m] / s2[m]
            q[m, 1] = 0.25 * s2[m]
            q[m, 2] = (m12 + m21)[m] / s2[m]
            q[m, 3] = (m02 - m20)[m] / s2[m]
        s3 = np.sqrt(np.maximum(1.0 + m22 - m00 - m11, 0.0)) * 2.0
        m = case == 3
        if np.any(m):
            q[m, 0] = (m02 + m20)[m] / s3[m]
            q[m, 1] = (m12 + m21)[m] / s3[m]
            q[m, 2] = 0.25 * s3[m]
            q[m, 3] = (m10 - m01)[m] / s3[m]
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    neg = q[..., 3] < 0.0
    exact_zero = q[..., 3] == 0.0
    if np.any(exact_zero):
        big = np.argmax(np.abs(q[..., :3]), axis=-1)
        picked = np.take_along_axis(q[..., :3], big[..., None], axis=-1)[..., 0]
        neg = neg | (exact_zero & (picked < 0.0))
    q[neg] = -q[neg]
    return q


def rot_to_quat_xyzw(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) of one rotation matrix, with w >= 0."""
    return quat_xyzw_from_rot_batch(np.asarray(R, dtype=float)[None])[0]


def quat_xyzw_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion (x, y, z, w); non-unit input is normalized."""
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero quaternion")
    x, y, z, w = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
