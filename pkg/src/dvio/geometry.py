"""Rigid-body transforms, pinhole projection, and trajectory alignment.

Quaternions are stored as length-4 arrays in [w, x, y, z] order and kept
unit-norm. Poses map points from their local frame into the parent frame:
``x_parent = R(q) @ x_local + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, NonPositiveDepth

# -- quaternion / SO(3) helpers ----------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical sign keeps trajectories comparable across runs
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns [w, x, y, z] with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_exp(theta: np.ndarray) -> np.ndarray:
    """Axis-angle rotation vector -> unit quaternion."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    if angle < 1e-12:
        q = np.array([1.0, 0.5 * theta[0], 0.5 * theta[1], 0.5 * theta[2]])
        return q / np.linalg.norm(q)
    axis = theta / angle
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def quat_log(q: np.ndarray) -> np.ndarray:
    """Unit quaternion -> rotation vector (inverse of quat_exp)."""
    q = quat_normalize(q)
    v = q[1:]
    n = np.linalg.norm(v)
    if n < 1e-12:
        return 2.0 * v
    angle = 2.0 * np.arctan2(n, q[0])
    return angle * v / n


def quat_rotate(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    return quat_to_matrix(q) @ np.asarray(p, dtype=float)


def quat_left(q: np.ndarray) -> np.ndarray:
    """4x4 matrix L with L(a) @ b = a * b (quaternion product, wxyz)."""
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def quat_right(q: np.ndarray) -> np.ndarray:
    """4x4 matrix R with R(b) @ a = a * b (quaternion product, wxyz)."""
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, z, -y],
            [y, -z, w, x],
            [z, y, -x, w],
        ]
    )


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# -- rigid transforms ---------------------------------------------------------


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform: rotation quaternion [w,x,y,z] plus translation (m)."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, dtype=float)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3()

    @staticmethod
    def from_matrix(T: np.ndarray) -> "PoseSE3":
        T = np.asarray(T, dtype=float)
        return PoseSE3(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @staticmethod
    def from_rotation_matrix(R: np.ndarray, t: np.ndarray) -> "PoseSE3":
        return PoseSE3(matrix_to_quat(R), t)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "PoseSE3":
        qi = quat_conj(self.q)
        return PoseSE3(qi, -quat_rotate(qi, self.t))

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform one point or an (N,3) batch into the parent frame."""
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            return quat_rotate(self.q, p) + self.t
        return p @ self.rotation_matrix.T + self.t


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Group composition a*b; renormalizes so long chains do not drift."""
    return PoseSE3(quat_mul(a.q, b.q), quat_rotate(a.q, b.t) + a.t)


# -- pinhole camera -----------------------------------------------------------


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside image")

    def project(self, p: np.ndarray) -> np.ndarray:
        """Camera-frame point(s) -> pixel coordinates. Requires z > 0."""
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            if p[2] <= 0.0:
                raise NonPositiveDepth(f"z={p[2]}")
            return np.array([self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy])
        if np.any(p[:, 2] <= 0.0):
            raise NonPositiveDepth("batch contains z <= 0")
        uv = np.empty((p.shape[0], 2))
        uv[:, 0] = self.fx * p[:, 0] / p[:, 2] + self.cx
        uv[:, 1] = self.fy * p[:, 1] / p[:, 2] + self.cy
        return uv

    def unproject(self, uv: np.ndarray, depth: float | np.ndarray) -> np.ndarray:
        """Pixel + depth -> camera-frame point (depth is z, meters)."""
        uv = np.asarray(uv, dtype=float)
        depth = np.asarray(depth, dtype=float)
        if np.any(depth <= 0.0):
            raise NonPositiveDepth("depth must be > 0")
        if uv.ndim == 1:
            return np.array(
                [(uv[0] - self.cx) / self.fx * depth, (uv[1] - self.cy) / self.fy * depth, depth]
            )
        p = np.empty((uv.shape[0], 3))
        p[:, 0] = (uv[:, 0] - self.cx) / self.fx * depth
        p[:, 1] = (uv[:, 1] - self.cy) / self.fy * depth
        p[:, 2] = depth
        return p

    def ray(self, uv: np.ndarray) -> np.ndarray:
        """Normalized-plane ray [x/z, y/z, 1] for pixel(s)."""
        uv = np.asarray(uv, dtype=float)
        if uv.ndim == 1:
            return np.array([(uv[0] - self.cx) / self.fx, (uv[1] - self.cy) / self.fy, 1.0])
        r = np.empty((uv.shape[0], 3))
        r[:, 0] = (uv[:, 0] - self.cx) / self.fx
        r[:, 1] = (uv[:, 1] - self.cy) / self.fy
        r[:, 2] = 1.0
        return r

    def in_bounds(self, uv: np.ndarray, border: float = 0.0) -> np.ndarray:
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        ok = (
            (uv[:, 0] >= border)
            & (uv[:, 0] <= self.width - 1 - border)
            & (uv[:, 1] >= border)
            & (uv[:, 1] <= self.height - 1 - border)
        )
        return ok if ok.size > 1 else bool(ok[0])


# -- trajectory alignment -----------------------------------------------------


def align_umeyama(
    estimated: np.ndarray, reference: np.ndarray, with_scale: bool = False
) -> tuple[PoseSE3, float]:
    """Least-squares alignment mapping estimated positions onto the reference.

    Solves ``reference ~ s * R @ estimated + t`` over (N,3) position arrays.
    With ``with_scale=False`` (the default, metric systems) s is fixed to 1.

    Returns the aligning transform and scale. Raises DegenerateGeometry for
    fewer than 3 points or collinear geometry.
    """
    est = np.asarray(estimated, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if est.shape != ref.shape or est.ndim != 2 or est.shape[1] != 3:
        raise ValueError("expected matching (N,3) arrays")
    n = est.shape[0]
    if n < 3:
        raise DegenerateGeometry(f"need >= 3 point pairs, got {n}")

    mu_e = est.mean(axis=0)
    mu_r = ref.mean(axis=0)
    xe = est - mu_e
    xr = ref - mu_r

    C = xr.T @ xe / n
    U, D, Vt = np.linalg.svd(C)
    # collinear clouds leave a rotation dof free
    scale_ref = max(D[0], np.sqrt((xe**2).sum() / n) * np.sqrt((xr**2).sum() / n), 1e-30)
    if D[1] / scale_ref < 1e-9:
        raise DegenerateGeometry("point sets are collinear")

    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt

    if with_scale:
        var_e = (xe**2).sum() / n
        s = float(np.trace(np.diag(D) @ S) / var_e)
    else:
        s = 1.0
    t = mu_r - s * R @ mu_e
    return PoseSE3.from_rotation_matrix(R, t), s
