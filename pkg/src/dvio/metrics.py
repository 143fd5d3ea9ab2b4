"""Trajectory containers and accuracy metrics.

Absolute trajectory error aligns the estimate to the reference (rigid by
default; similarity for scale-free runs) and reports the position RMSE.
Relative errors compare motion increments over a fixed time delta,
normalized per second. Correct rate is the fraction of the reference
timeline where a sufficiently accurate estimate exists, so tracking loss is
penalized instead of hidden.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometry, InsufficientSpan, NonMonotonicTimestamps
from .geometry import PoseSE3, align_umeyama, compose, quat_mul, quat_normalize

ASSOCIATION_TOL = 0.02  # seconds
DEFAULT_CR_TOLERANCE = 0.3  # meters


@dataclass
class Trajectory:
    timestamps: np.ndarray  # (N,)
    positions: np.ndarray  # (N,3)
    quaternions: np.ndarray  # (N,4) wxyz, body-to-world

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        if np.any(np.diff(self.timestamps) <= 0):
            raise NonMonotonicTimestamps("trajectory timestamps must increase")

    def __len__(self) -> int:
        return len(self.timestamps)

    def pose(self, i: int) -> PoseSE3:
        return PoseSE3(self.quaternions[i], self.positions[i])

    @staticmethod
    def from_poses(stamped_poses: list[tuple[float, PoseSE3]]) -> "Trajectory":
        return Trajectory(
            np.array([t for t, _ in stamped_poses]),
            np.array([p.t for _, p in stamped_poses]),
            np.array([p.q for _, p in stamped_poses]),
        )

    def transformed(self, T: PoseSE3, scale: float = 1.0) -> "Trajectory":
        R = T.rotation_matrix
        pos = scale * self.positions @ R.T + T.t
        quats = np.array([quat_normalize(quat_mul(T.q, q)) for q in self.quaternions])
        return Trajectory(self.timestamps.copy(), pos, quats)

    def write_tum(self, path: str | Path) -> None:
        """One `timestamp tx ty tz qx qy qz qw` line per pose, 9 decimals."""
        with open(path, "w") as f:
            for t, p, q in zip(self.timestamps, self.positions, self.quaternions):
                f.write(
                    f"{t:.9f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                    f"{q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}\n"
                )

    @staticmethod
    def read_tum(path: str | Path) -> "Trajectory":
        ts, pos, quat = [], [], []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vals = [float(x) for x in line.split()]
                ts.append(vals[0])
                pos.append(vals[1:4])
                qx, qy, qz, qw = vals[4:8]
                quat.append([qw, qx, qy, qz])
        return Trajectory(np.array(ts), np.array(pos), np.array(quat))


def associate(
    ts_a: np.ndarray, ts_b: np.ndarray, tol: float = ASSOCIATION_TOL
) -> tuple[np.ndarray, np.ndarray]:
    """Mutual nearest-neighbor timestamp pairs within tol (symmetric)."""
    ts_a = np.asarray(ts_a, dtype=float)
    ts_b = np.asarray(ts_b, dtype=float)
    if len(ts_a) == 0 or len(ts_b) == 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)

    def nearest(src, dst):
        idx = np.searchsorted(dst, src)
        idx = np.clip(idx, 1, len(dst) - 1)
        left = dst[idx - 1]
        right = dst[idx]
        pick = np.where(np.abs(src - left) <= np.abs(src - right), idx - 1, idx)
        return pick

    a_to_b = nearest(ts_a, ts_b)
    b_to_a = nearest(ts_b, ts_a)
    ia = np.arange(len(ts_a))
    mutual = b_to_a[a_to_b] == ia
    close = np.abs(ts_a - ts_b[a_to_b]) <= tol
    keep = mutual & close
    return ia[keep], a_to_b[keep]


def compute_ate(
    estimated: Trajectory,
    reference: Trajectory,
    mode: str = "se3",
    tol: float = ASSOCIATION_TOL,
) -> tuple[float, np.ndarray]:
    """Aligned position RMSE; also returns the per-pair error magnitudes."""
    ia, ib = associate(estimated.timestamps, reference.timestamps, tol)
    if len(ia) < 3:
        raise DegenerateGeometry(f"only {len(ia)} associated pairs")
    est = estimated.positions[ia]
    ref = reference.positions[ib]
    T, s = align_umeyama(est, ref, with_scale=(mode == "sim3"))
    aligned = s * est @ T.rotation_matrix.T + T.t
    errors = np.linalg.norm(aligned - ref, axis=1)
    return float(np.sqrt(np.mean(errors**2))), errors


def compute_rpe(
    estimated: Trajectory,
    reference: Trajectory,
    delta_t: float = 1.0,
    tol: float = ASSOCIATION_TOL,
) -> tuple[float, float]:
    """(translational m/s, rotational deg/s) relative error RMSE."""
    ia, ib = associate(estimated.timestamps, reference.timestamps, tol)
    if len(ia) < 2:
        raise InsufficientSpan("too few associated pairs")
    ts = estimated.timestamps[ia]
    if ts[-1] - ts[0] < delta_t:
        raise InsufficientSpan(f"span {ts[-1] - ts[0]:.3f}s < delta {delta_t}s")

    t_errors, r_errors = [], []
    j = 0
    for i in range(len(ts)):
        target = ts[i] + delta_t
        j = int(np.searchsorted(ts, target))
        if j >= len(ts):
            break
        k = j if j == 0 or abs(ts[j] - target) < abs(ts[j - 1] - target) else j - 1
        if abs(ts[k] - target) > tol or k <= i:
            continue
        dt = ts[k] - ts[i]
        rel_est = compose_rel(estimated, ia[i], ia[k])
        rel_ref = compose_rel(reference, ib[i], ib[k])
        err = compose(rel_ref.inverse(), rel_est)
        t_errors.append(np.linalg.norm(err.t) / dt)
        ang = 2 * np.arccos(np.clip(abs(err.q[0]), -1.0, 1.0))
        r_errors.append(np.degrees(ang) / dt)
    if not t_errors:
        raise InsufficientSpan("no delta-separated pairs inside tolerance")
    return (
        float(np.sqrt(np.mean(np.square(t_errors)))),
        float(np.sqrt(np.mean(np.square(r_errors)))),
    )


def compose_rel(traj: Trajectory, i: int, j: int) -> PoseSE3:
    return compose(traj.pose(i).inverse(), traj.pose(j))


def compute_correct_rate(
    estimated: Trajectory,
    reference: Trajectory,
    position_tolerance: float = DEFAULT_CR_TOLERANCE,
    tol: float = ASSOCIATION_TOL,
) -> float:
    """Fraction of reference timestamps with an accurate aligned estimate."""
    ia, ib = associate(estimated.timestamps, reference.timestamps, tol)
    if len(ia) < 3:
        return 0.0
    T, s = align_umeyama(estimated.positions[ia], reference.positions[ib])
    aligned = s * estimated.positions @ T.rotation_matrix.T + T.t
    correct = np.zeros(len(reference), dtype=bool)
    err = np.linalg.norm(aligned[ia] - reference.positions[ib], axis=1)
    correct[ib] = err <= position_tolerance
    return float(np.mean(correct))


@dataclass
class EvalResult:
    ate_rmse: float
    t_rpe_rmse: float
    r_rpe_rmse: float
    correct_rate: float
    aligned: bool = True
    per_frame_errors: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ate_rmse": self.ate_rmse,
            "t_rpe": self.t_rpe_rmse,
            "r_rpe": self.r_rpe_rmse,
            "correct_rate": self.correct_rate,
            "aligned": self.aligned,
            "per_frame_errors": self.per_frame_errors,
        }

    def write_json(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def evaluate(
    estimated: Trajectory,
    reference: Trajectory,
    mode: str = "se3",
    rpe_delta: float = 1.0,
    cr_tolerance: float = DEFAULT_CR_TOLERANCE,
) -> EvalResult:
    ate, per_frame = compute_ate(estimated, reference, mode=mode)
    try:
        t_rpe, r_rpe = compute_rpe(estimated, reference, delta_t=rpe_delta)
    except InsufficientSpan:
        t_rpe, r_rpe = float("nan"), float("nan")
    cr = compute_correct_rate(estimated, reference, cr_tolerance)
    return EvalResult(ate, t_rpe, r_rpe, cr, True, [float(e) for e in per_frame])
