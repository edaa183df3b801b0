"""Rigid-motion helpers: SE(3) transforms, a batched 3x3 Jacobi SVD,
weighted Procrustes, pinhole projection and registration error measures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INLIER_THRESHOLD_M = 0.1

_SVD_MAX_SWEEPS = 30
_SVD_TOL = 1e-12
_DEGENERACY_RATIO = 1e-9


class DegenerateError(ValueError):
    """Raised when a correspondence configuration does not pin down a transform."""


@dataclass(frozen=True, eq=False)
class RigidTransform:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)

    def __hash__(self):
        return hash((self.R.tobytes(), self.t.tobytes()))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(axis_angle_matrix(axis, angle_rad), t)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return apply_transform(self, pts)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self ∘ other (apply ``other`` first)."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    pose: RigidTransform = field(default_factory=RigidTransform)  # world -> camera

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")


@dataclass
class CorrespondenceSet:
    """Putative matches ``p[i] <-> q[i]`` with optional ground-truth labels.

    ``kinds`` is an optional per-pair provenance tag (see ``synthdata``):
    0 inlier, 1 plain outlier, 2 ambiguous (texture-mismatch) outlier.
    """

    p: np.ndarray
    q: np.ndarray
    labels: np.ndarray | None = None
    kinds: np.ndarray | None = None

    def __post_init__(self):
        self.p = np.asarray(self.p)
        self.q = np.asarray(self.q)
        if self.p.ndim != 2 or self.p.shape[1] != 3 or self.p.shape != self.q.shape:
            raise ValueError(f"p and q must both be (N, 3), got {self.p.shape} and {self.q.shape}")
        n = len(self.p)
        for name in ("labels", "kinds"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                if arr.shape != (n,):
                    raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
                setattr(self, name, arr)

    def __len__(self) -> int:
        return len(self.p)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(
            self.p[idx],
            self.q[idx],
            None if self.labels is None else self.labels[idx],
            None if self.kinds is None else self.kinds[idx],
        )


def axis_angle_matrix(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def apply_transform(T: RigidTransform, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ T.R.T + T.t


def svd3(M: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of one 3x3 matrix or a stack ``(..., 3, 3)``; returns ``U, S, V``
    with ``M = U @ diag(S) @ V.T`` and ``S`` sorted in descending order.

    One-sided (Hestenes) cyclic Jacobi: rotating column pairs of ``M`` is the
    implicit Jacobi eigen-iteration on ``M.T @ M`` without forming it.
    """
    M = np.asarray(M, dtype=np.float64)
    batch_shape = M.shape[:-2]
    A = M.reshape(-1, 3, 3).copy()
    n = A.shape[0]
    V = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()

    # a vanishing off-diagonal term can push zeta to inf; the rotation then
    # correctly degenerates to tan = 0
    with np.errstate(over="ignore"):
        for _ in range(_SVD_MAX_SWEEPS):
            rotated = False
            for i, j in ((0, 1), (0, 2), (1, 2)):
                ai = A[:, :, i]
                aj = A[:, :, j]
                alpha = np.einsum("bk,bk->b", ai, ai)
                beta = np.einsum("bk,bk->b", aj, aj)
                gamma = np.einsum("bk,bk->b", ai, aj)
                active = np.abs(gamma) > _SVD_TOL * np.sqrt(alpha * beta)
                if not active.any():
                    continue
                rotated = True
                g = np.where(active, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                tan = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
                tan = np.where(zeta == 0.0, 1.0, tan)
                c = 1.0 / np.sqrt(1.0 + tan * tan)
                s = c * tan
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]
                for X in (A, V):
                    xi = X[:, :, i].copy()
                    xj = X[:, :, j]
                    X[:, :, i] = c * xi - s * xj
                    X[:, :, j] = s * xi + c * xj
            if not rotated:
                break

    S = np.linalg.norm(A, axis=1)
    order = np.argsort(-S, axis=1, kind="stable")
    S = np.take_along_axis(S, order, axis=1)
    A = np.take_along_axis(A, order[:, None, :], axis=2)
    V = np.take_along_axis(V, order[:, None, :], axis=2)

    U = np.empty_like(A)
    scale = np.maximum(S[:, :1], 1e-300)
    for k in range(3):
        col = A[:, :, k]
        # orthogonalize against earlier columns so rank-deficient inputs
        # still produce an orthogonal U
        for m in range(k):
            col = col - np.einsum("bk,bk->b", U[:, :, m], col)[:, None] * U[:, :, m]
        norm = np.linalg.norm(col, axis=1)
        weak = norm <= 1e-13 * scale[:, 0]
        if weak.any():
            col = col.copy()
            if k == 2:
                col[weak] = np.cross(U[weak, :, 0], U[weak, :, 1])
            else:
                for b in np.flatnonzero(weak):
                    col[b] = _orthogonal_fill(U[b, :, :k])
            norm = np.linalg.norm(col, axis=1)
        U[:, :, k] = col / norm[:, None]

    return (
        U.reshape(batch_shape + (3, 3)),
        S.reshape(batch_shape + (3,)),
        V.reshape(batch_shape + (3, 3)),
    )


def _orthogonal_fill(basis: np.ndarray) -> np.ndarray:
    for e in np.eye(3):
        v = e - basis @ (basis.T @ e)
        if np.linalg.norm(v) > 0.5:
            return v
    raise AssertionError("unreachable: a 3-vector basis of rank < 3 always has a complement")


def _procrustes_from_moments(p_bar, q_bar, H):
    U, S, V = svd3(H)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = V @ D @ np.swapaxes(U, -1, -2)
    t = q_bar - np.einsum("...ij,...j->...i", R, p_bar)
    return R, t, S


def weighted_procrustes(corrs: CorrespondenceSet, w=None) -> RigidTransform:
    """Closed-form minimiser of ``sum_i w_i |R p_i + t - q_i|^2``."""
    p = np.asarray(corrs.p, dtype=np.float64)
    q = np.asarray(corrs.q, dtype=np.float64)
    w = np.ones(len(p)) if w is None else np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape != (len(p),):
        raise ValueError("one weight per correspondence required")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if not total > 0:
        raise DegenerateError("weights sum to zero")
    wn = w / total
    p_bar = wn @ p
    q_bar = wn @ q
    H = (p - p_bar).T @ ((q - q_bar) * wn[:, None])
    R, t, S = _procrustes_from_moments(p_bar, q_bar, H)
    if not S[1] >= _DEGENERACY_RATIO * S[0] or S[0] == 0.0:
        raise DegenerateError("correspondences are collinear or coincident")
    return RigidTransform(R, t)


def procrustes_batch(p: np.ndarray, q: np.ndarray):
    """Unweighted Procrustes for a stack of small samples ``(B, n, 3)``.

    Returns ``(R, t, ok)``; ``ok`` is False where the sample is degenerate.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p_bar = p.mean(axis=1)
    q_bar = q.mean(axis=1)
    H = np.einsum("bni,bnj->bij", p - p_bar[:, None], q - q_bar[:, None]) / p.shape[1]
    R, t, S = _procrustes_from_moments(p_bar, q_bar, H)
    ok = (S[:, 1] >= _DEGENERACY_RATIO * S[:, 0]) & (S[:, 0] > 0)
    return R, t, ok


def rotation_error(R_est: np.ndarray, R_gt: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees.

    Same angle as ``arccos((trace(R_gt.T @ R_est) - 1) / 2)``, but taken as
    ``atan2(sin, cos)`` with the sine read off the skew part.  The arccos form
    turns an orthogonality error of ``e`` (float32-stored rotations carry about
    1e-8) into a phantom angle of order ``sqrt(e)``; this one stays linear.
    """
    R_est = np.asarray(R_est, dtype=np.float64)
    R_gt = np.asarray(R_gt, dtype=np.float64)
    M = R_gt.T @ R_est
    cos = (np.trace(M) - 1.0) / 2.0
    sin = np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]]) / 2.0
    return float(np.degrees(np.arctan2(sin, cos)))


def translation_error(t_est, t_gt) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


def correspondence_residuals(corrs: CorrespondenceSet, T_gt: RigidTransform) -> np.ndarray:
    return np.linalg.norm(apply_transform(T_gt, corrs.p) - np.asarray(corrs.q, dtype=np.float64), axis=1)


def ground_truth_labels(corrs: CorrespondenceSet, T_gt: RigidTransform) -> np.ndarray:
    return correspondence_residuals(corrs, T_gt) < INLIER_THRESHOLD_M


def project(cam: PinholeCamera, p_world) -> tuple[float, float] | None:
    """Pixel coordinates of one world point, or ``None`` if it is behind the camera."""
    uv, valid = project_points(cam, np.asarray(p_world, dtype=np.float64).reshape(1, 3))
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def project_points(cam: PinholeCamera, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns ``(uv, in_front)``.  ``uv`` rows for
    points behind the camera are NaN."""
    pc = apply_transform(cam.pose, pts)
    z = pc[:, 2]
    valid = z > 1e-6
    safe_z = np.where(valid, z, 1.0)
    uv = np.stack([cam.fx * pc[:, 0] / safe_z + cam.cx, cam.fy * pc[:, 1] / safe_z + cam.cy], axis=1)
    uv[~valid] = np.nan
    return uv, valid
