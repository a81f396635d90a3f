"""Robust scan-to-submap registration with split-eigenspace degeneracy handling.

Each Gauss-Newton iteration stacks robustly weighted point-to-plane (or
point-to-point) residual rows A x = b over the accepted correspondences. The
3x3 rotation and translation blocks of the normal matrix are eigen-analyzed
separately: small eigenvalues flag directions the scene fails to constrain.
Those directions are re-anchored to the IMU-predicted pose through weight
matrices W = (H P)^-1 that fuse constraint strength with prior confidence —
weak geometry and a confident prior both tighten the pull, strong geometry
relaxes it. The update solves

    (A^T A + w blockdiag(W_r, W_t)) delta = A^T b - w blockdiag(W_r, W_t) (T [-] T_prior)

so in the well-constrained limit it reduces to plain Gauss-Newton and in the
unconstrained limit it snaps exactly to the prior.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imu import PosePrior
from .matching import CorrespondenceSet, RejectionStrategy, RelativeMotion, match_scan
from .so3 import Pose, boxminus, boxplus_pose, hat, sym_eig3
from .voxel_map import VoxelSubmap

TINY_EIG = 1e-12
RESIDUAL_MODES = ("point_to_plane", "point_to_point")


class RegistrationError(RuntimeError):
    """Solver failure (singular or non-finite system)."""


@dataclass(frozen=True)
class RobustKernel:
    """Residual reweighting: none, huber(delta), or cauchy(c); scales in meters."""

    kind: str = "huber"
    scale: float = 0.1

    def __post_init__(self):
        if self.kind not in ("none", "huber", "cauchy"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind != "none" and not self.scale > 0:
            raise ValueError("kernel scale must be positive")

    def weights(self, norms: np.ndarray) -> np.ndarray:
        """IRLS weight rho'(|e|^2) per residual norm."""
        norms = np.asarray(norms, dtype=float)
        if self.kind == "none":
            return np.ones_like(norms)
        if self.kind == "huber":
            with np.errstate(divide="ignore"):
                return np.minimum(1.0, self.scale / np.where(norms > 0, norms, np.inf))
        return 1.0 / (1.0 + (norms / self.scale) ** 2)

    def rho(self, norms: np.ndarray) -> np.ndarray:
        """Robust cost rho(|e|^2) per residual norm."""
        norms = np.asarray(norms, dtype=float)
        s = norms * norms
        if self.kind == "none":
            return s
        if self.kind == "huber":
            d = self.scale
            return np.where(norms <= d, s, 2.0 * d * norms - d * d)
        c2 = self.scale * self.scale
        return c2 * np.log1p(s / c2)


@dataclass(frozen=True)
class RegistrationConfig:
    iter_max: int = 8
    epsilon: float = 1e-4               # convergence threshold on |delta|
    w: float = 1.0                      # regularization strength
    kernel: RobustKernel = field(default_factory=RobustKernel)
    eig_floor_ratio: float = 1e-6       # eigenvalue floor as a fraction of lambda_max
    residual_mode: str = "point_to_plane"
    max_step_halvings: int = 4

    def __post_init__(self):
        if self.iter_max < 1 or not self.epsilon > 0 or self.w < 0:
            raise ValueError("invalid registration config")
        if self.residual_mode not in RESIDUAL_MODES:
            raise ValueError(f"unknown residual mode {self.residual_mode!r}")


def residual(source: np.ndarray, target: np.ndarray, normal: np.ndarray | None,
             T: Pose):
    """Residual and Jacobian of one correspondence at pose T.

    With a normal: scalar point-to-plane residual n.(R p + t - q) and its 1x6
    Jacobian; without: the 3-vector point-to-point residual and its 3x6
    Jacobian. Columns are ordered [rotation | translation] under the right
    perturbation T * Exp(delta).
    """
    p = np.asarray(source, dtype=float).reshape(3)
    q = np.asarray(target, dtype=float).reshape(3)
    moved = T.R @ p + T.t
    if normal is None:
        J = np.zeros((3, 6))
        J[:, :3] = -T.R @ hat(p)
        J[:, 3:] = np.eye(3)
        return moved - q, J
    n = np.asarray(normal, dtype=float).reshape(3)
    e = float(n @ (moved - q))
    J = np.zeros((1, 6))
    J[0, :3] = -np.cross(T.R.T @ n, p)
    J[0, 3:] = n
    return e, J


@dataclass
class LinearSystem:
    """Stacked weighted residual rows A x = b; columns [rotation | translation]."""

    A: np.ndarray  # (M, 6)
    b: np.ndarray  # (M,)
    n_correspondences: int

    @property
    def A_r(self) -> np.ndarray:
        return self.A[:, :3]

    @property
    def A_t(self) -> np.ndarray:
        return self.A[:, 3:]

    def normal_matrix(self) -> np.ndarray:
        # fixed-order reduction keeps the result identical across BLAS thread counts
        return np.einsum("mi,mj->ij", self.A, self.A, optimize=False)

    def gradient(self) -> np.ndarray:
        return np.einsum("mi,m->i", self.A, self.b, optimize=False)


def build_system(corrs: CorrespondenceSet, T: Pose, kernel: RobustKernel,
                 residual_mode: str = "point_to_plane") -> LinearSystem:
    """Assemble the robustly weighted least-squares system at pose T.

    Accepted correspondences with a usable normal contribute one
    point-to-plane row; the rest (or all, in point_to_point mode) contribute
    three point-to-point rows. Rows are scaled by the square root of the IRLS
    weight of their correspondence.
    """
    acc = corrs.accepted
    if not np.any(acc):
        raise ValueError("no accepted correspondences")
    p = corrs.sources[acc]
    q = corrs.targets[acc]
    use_normal = corrs.has_normal[acc] if residual_mode == "point_to_plane" \
        else np.zeros(int(acc.sum()), dtype=bool)
    moved = p @ T.R.T + T.t
    diff = moved - q

    rows_A = []
    rows_b = []
    if np.any(use_normal):
        n = corrs.normals[acc][use_normal]
        e = np.einsum("mi,mi->m", n, diff[use_normal])
        w = kernel.weights(np.abs(e))
        sw = np.sqrt(w)
        Jr = -np.cross(n @ T.R, p[use_normal])
        A1 = np.concatenate([Jr, n], axis=1) * sw[:, None]
        rows_A.append(A1)
        rows_b.append(-sw * e)
    rest = ~use_normal
    if np.any(rest):
        pr = p[rest]
        er = diff[rest]
        w = kernel.weights(np.linalg.norm(er, axis=1))
        sw = np.sqrt(w)
        Jrot = -np.einsum("ij,mjk->mik", T.R, hat(pr))       # (m, 3, 3)
        A3 = np.zeros((len(pr), 3, 6))
        A3[:, :, :3] = Jrot
        A3[:, :, 3:] = np.eye(3)
        A3 *= sw[:, None, None]
        rows_A.append(A3.reshape(-1, 6))
        rows_b.append((-sw[:, None] * er).reshape(-1))
    A = np.concatenate(rows_A, axis=0)
    b = np.concatenate(rows_b, axis=0)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise RegistrationError("non-finite rows in the linear system")
    return LinearSystem(A, b, int(acc.sum()))


@dataclass
class DegeneracyReport:
    """Split-eigenspace analysis of one iteration's normal matrix.

    Eigenpairs are of the raw (unclamped) rotation/translation Hessian blocks,
    ascending. The weight matrices already include clamping, symmetrization,
    and PSD projection. lambda_*_reg are the minimum eigenvalues of the
    regularized blocks H + w W actually used by the solve.
    """

    rot_eigvals: np.ndarray
    rot_eigvecs: np.ndarray
    trans_eigvals: np.ndarray
    trans_eigvecs: np.ndarray
    W_r: np.ndarray
    W_t: np.ndarray
    clamped_rot: np.ndarray
    clamped_trans: np.ndarray
    floor_rot: float
    floor_trans: float
    lambda_min_rot_reg: float
    lambda_min_trans_reg: float

    @property
    def lambda_min_rot(self) -> float:
        return float(self.rot_eigvals[0])

    @property
    def lambda_min_trans(self) -> float:
        return float(self.trans_eigvals[0])

    def hessian_rot(self) -> np.ndarray:
        return self.rot_eigvecs @ np.diag(self.rot_eigvals) @ self.rot_eigvecs.T

    def hessian_trans(self) -> np.ndarray:
        return self.trans_eigvecs @ np.diag(self.trans_eigvals) @ self.trans_eigvecs.T


def _condition_psd(P: np.ndarray) -> np.ndarray:
    """Jitter a (near-)singular covariance so it is safely invertible."""
    P = 0.5 * (P + P.T)
    tr = max(np.trace(P), 0.0)
    w = np.linalg.eigvalsh(P)
    jitter = 1e-12 * max(tr, 1.0)
    if w[0] < jitter:
        P = P + (jitter - min(w[0], 0.0)) * np.eye(3)
    return P


def _psd_project(W: np.ndarray, floor_ratio: float) -> np.ndarray:
    """Symmetrize and raise negative eigenvalues to the floor."""
    w, V = sym_eig3(0.5 * (W + W.T))
    floor = max(floor_ratio * w[2], TINY_EIG)
    w = np.maximum(w, floor)
    return V @ np.diag(w) @ V.T


def _fuse_weight(H: np.ndarray, eigvals: np.ndarray, eigvecs: np.ndarray,
                 P: np.ndarray, floor_ratio: float):
    floor = max(floor_ratio * eigvals[2], TINY_EIG)
    clamped = eigvals < floor
    lam = np.maximum(eigvals, floor)
    H_cl = eigvecs @ np.diag(lam) @ eigvecs.T
    W = np.linalg.inv(H_cl @ _condition_psd(P))
    return _psd_project(W, floor_ratio), clamped, floor


def analyze_degeneracy(sys: LinearSystem, prior: PosePrior,
                       cfg: RegistrationConfig) -> DegeneracyReport:
    """Eigen-analyze the rotation/translation blocks and fuse the prior weights.

    Eigenvalues below floor_ratio * lambda_max are clamped to the floor before
    the inverse (their directions are flagged), W = (H_clamped P)^-1 is
    symmetrized and projected to PSD, and the minimum eigenvalues of the
    regularized blocks are recorded for the eigenvalue timeline.
    """
    H_r = np.einsum("mi,mj->ij", sys.A_r, sys.A_r, optimize=False)
    H_t = np.einsum("mi,mj->ij", sys.A_t, sys.A_t, optimize=False)
    wr, Vr = sym_eig3(H_r)
    wt, Vt = sym_eig3(H_t)
    W_r, cl_r, floor_r = _fuse_weight(H_r, wr, Vr, prior.P_r, cfg.eig_floor_ratio)
    W_t, cl_t, floor_t = _fuse_weight(H_t, wt, Vt, prior.P_t, cfg.eig_floor_ratio)
    reg_r, _ = sym_eig3(H_r + cfg.w * W_r)
    reg_t, _ = sym_eig3(H_t + cfg.w * W_t)
    return DegeneracyReport(
        rot_eigvals=wr, rot_eigvecs=Vr, trans_eigvals=wt, trans_eigvecs=Vt,
        W_r=W_r, W_t=W_t, clamped_rot=cl_r, clamped_trans=cl_t,
        floor_rot=float(floor_r), floor_trans=float(floor_t),
        lambda_min_rot_reg=float(reg_r[0]), lambda_min_trans_reg=float(reg_t[0]))


def _reg_block(report: DegeneracyReport, w: float) -> np.ndarray:
    W6 = np.zeros((6, 6))
    W6[:3, :3] = report.W_r
    W6[3:, 3:] = report.W_t
    return w * W6


def solve_iteration(sys: LinearSystem, T: Pose, T_prior: Pose,
                    report: DegeneracyReport, cfg: RegistrationConfig) -> np.ndarray:
    """One regularized Gauss-Newton update delta (6-tangent).

    Minimizes the local quadratic model |A d - b|^2 + w |(T [+] d) [-] T_prior|^2
    weighted by blockdiag(W_r, W_t). With w = 0 this is the plain Gauss-Newton
    step; with no geometric rows it returns exactly the pull to the prior.
    """
    W6 = _reg_block(report, cfg.w)
    d = boxminus(T, T_prior)
    H = sys.normal_matrix() + W6
    g = sys.gradient() - W6 @ d
    try:
        delta = np.linalg.solve(H, g)
    except np.linalg.LinAlgError as exc:
        raise RegistrationError(f"singular normal system: {exc}") from None
    if not np.all(np.isfinite(delta)):
        raise RegistrationError(
            f"non-finite update (lambda_min_trans={report.lambda_min_trans:.3e}, "
            f"lambda_min_rot={report.lambda_min_rot:.3e})")
    return delta


def _local_model(sys: LinearSystem, W6: np.ndarray, d: np.ndarray,
                 delta: np.ndarray) -> float:
    r = sys.A @ delta - sys.b
    pd = d + delta
    return float(r @ r + pd @ (W6 @ pd))


@dataclass
class RegistrationResult:
    pose: Pose
    reports: list[DegeneracyReport]
    iterations: int
    status: str                 # converged | max_iter | skipped | diverged
    first_match: CorrespondenceSet | None
    points_global: np.ndarray
    n_accepted: int
    n_points: int

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def estimate_pose(points: np.ndarray, submap: VoxelSubmap, prior: PosePrior,
                  motion: RelativeMotion, cfg: RegistrationConfig,
                  strategy: RejectionStrategy | None = None,
                  *, noise_floor: float = 0.05, r_max: float | None = None,
                  normal_k: int = 5, normal_radius: float = 1.0,
                  planarity_min: float = 3.0) -> RegistrationResult:
    """Register a de-skewed scan against the submap, starting from the prior.

    Iterates match / build / analyze / solve / retract until the update norm
    drops below epsilon or the iteration budget runs out. Correspondence
    acceptance is decided on the first iteration and reused afterwards, with
    targets refreshed every iteration. A scan with no accepted correspondence
    is skipped (prior returned); a solver failure or an update norm that grows
    three iterations in a row is flagged as divergence (prior returned).
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    strategy = strategy or RejectionStrategy()
    T = prior.pose
    mask = None
    reports: list[DegeneracyReport] = []
    first_match = None
    prev_norm = None
    grow = 0
    status = "max_iter"
    iterations = 0
    n_accepted = 0

    for it in range(cfg.iter_max):
        corrs = match_scan(points, submap, T, motion, strategy,
                           noise_floor=noise_floor, r_max=r_max,
                           normal_k=normal_k, normal_radius=normal_radius,
                           planarity_min=planarity_min, accept_mask=mask)
        if it == 0:
            mask = corrs.accepted
            first_match = corrs
            n_accepted = corrs.n_accepted
            if n_accepted == 0:
                return RegistrationResult(prior.pose, [], 0, "skipped", corrs,
                                          prior.pose.transform(points), 0, len(points))
        sys = build_system(corrs, T, cfg.kernel, cfg.residual_mode)
        report = analyze_degeneracy(sys, prior, cfg)
        reports.append(report)
        try:
            delta = solve_iteration(sys, T, prior.pose, report, cfg)
        except RegistrationError:
            return RegistrationResult(prior.pose, reports, it + 1, "diverged",
                                      first_match, prior.pose.transform(points),
                                      n_accepted, len(points))
        # safeguard: the solve minimizes the local model exactly, so halving
        # only ever triggers on numerical pathologies
        W6 = _reg_block(report, cfg.w)
        d = boxminus(T, prior.pose)
        m0 = _local_model(sys, W6, d, np.zeros(6))
        for _ in range(cfg.max_step_halvings):
            if _local_model(sys, W6, d, delta) <= m0 + 1e-9 * max(m0, 1.0):
                break
            delta = 0.5 * delta
        T = boxplus_pose(T, delta)
        iterations = it + 1
        nd = float(np.linalg.norm(delta))
        if prev_norm is not None and nd > prev_norm:
            grow += 1
            if grow >= 3:
                return RegistrationResult(prior.pose, reports, iterations, "diverged",
                                          first_match, prior.pose.transform(points),
                                          n_accepted, len(points))
        else:
            grow = 0
        prev_norm = nd
        if nd < cfg.epsilon:
            status = "converged"
            break
    return RegistrationResult(T, reports, iterations, status, first_match,
                              T.transform(points), n_accepted, len(points))
