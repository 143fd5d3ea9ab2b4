"""Inertial preintegration between camera frames.

Gyro/accelerometer spans are accumulated with the midpoint rule into a
relative-motion triple (rotation gamma, velocity beta, position alpha)
expressed in the span's start body frame, together with a 15-state error
covariance and the accumulated state-transition Jacobian whose bias columns
give first-order bias corrections.

Error-state ordering: [dp(0:3), dtheta(3:6), dv(6:9), dbg(9:12), dba(12:15)],
with rotation perturbed on the right: R <- R @ Exp(dtheta).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BiasMismatch, ExcessiveGap, NonMonotonicTimestamps
from .geometry import PoseSE3, quat_exp, quat_mul, quat_normalize, quat_to_matrix, skew

GRAVITY_MAGNITUDE = 9.81
BIAS_CORRECTION_BOUND = 0.05  # |bias - bias_ref| beyond this: first-order repropagation invalid
GYRO_BIAS_PLAUSIBLE = 0.5  # rad/s
ACCEL_BIAS_PLAUSIBLE = 2.0  # m/s^2


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    gyro: np.ndarray  # rad/s
    accel: np.ndarray  # m/s^2

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))


@dataclass(frozen=True)
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        g = np.asarray(self.gyro, dtype=float).reshape(3)
        a = np.asarray(self.accel, dtype=float).reshape(3)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(a))):
            raise ValueError("bias must be finite")
        if np.linalg.norm(g) > GYRO_BIAS_PLAUSIBLE or np.linalg.norm(a) > ACCEL_BIAS_PLAUSIBLE:
            raise ValueError("bias outside plausibility bound")
        object.__setattr__(self, "gyro", g)
        object.__setattr__(self, "accel", a)

    def distance(self, other: "ImuBias") -> float:
        return max(
            float(np.linalg.norm(self.gyro - other.gyro)),
            float(np.linalg.norm(self.accel - other.accel)),
        )


@dataclass(frozen=True)
class ImuNoiseModel:
    """Continuous-time noise densities (units per sqrt(Hz))."""

    gyro_noise: float = 1e-4
    accel_noise: float = 1e-2
    gyro_walk: float = 1e-5
    accel_walk: float = 1e-4


@dataclass(frozen=True)
class NavState:
    pose: PoseSE3
    velocity: np.ndarray
    bias: ImuBias

    def __post_init__(self):
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))


@dataclass(frozen=True)
class PreintegratedDelta:
    """Relative motion accumulated over one inter-frame span."""

    dt_total: float
    gamma: np.ndarray  # unit quaternion, start body frame -> end body frame
    beta: np.ndarray  # velocity change (m/s), start body frame
    alpha: np.ndarray  # position change (m), start body frame
    bias_ref: ImuBias
    covariance: np.ndarray  # 15x15
    jacobian: np.ndarray  # 15x15 accumulated state transition; bias columns = corrections

    @staticmethod
    def initial(bias: ImuBias | None = None) -> "PreintegratedDelta":
        return PreintegratedDelta(
            dt_total=0.0,
            gamma=np.array([1.0, 0.0, 0.0, 0.0]),
            beta=np.zeros(3),
            alpha=np.zeros(3),
            bias_ref=bias or ImuBias(),
            covariance=np.zeros((15, 15)),
            jacobian=np.eye(15),
        )

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.gamma)


def right_jacobian_so3(phi: np.ndarray) -> np.ndarray:
    """d Exp(phi + d) / d d at d=0, right convention."""
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < 1e-7:
        return np.eye(3) - 0.5 * K + (1.0 / 6.0) * K @ K
    return (
        np.eye(3)
        - (1 - np.cos(angle)) / angle**2 * K
        + (angle - np.sin(angle)) / angle**3 * K @ K
    )


def integrate(
    delta: PreintegratedDelta,
    sample_prev: ImuSample,
    sample_next: ImuSample,
    noise: ImuNoiseModel = ImuNoiseModel(),
    max_dt: float = 0.1,
) -> PreintegratedDelta:
    """Advance the delta by one midpoint step between two samples."""
    dt = sample_next.timestamp - sample_prev.timestamp
    if dt <= 0.0:
        raise NonMonotonicTimestamps(
            f"sample at {sample_next.timestamp} not after {sample_prev.timestamp}"
        )
    if dt > max_dt:
        raise ExcessiveGap(f"dt={dt:.4f}s exceeds max {max_dt}s")

    bg = delta.bias_ref.gyro
    ba = delta.bias_ref.accel
    w_mid = 0.5 * (sample_prev.gyro + sample_next.gyro) - bg
    a0 = sample_prev.accel - ba
    a1 = sample_next.accel - ba

    q0 = delta.gamma
    step = quat_exp(w_mid * dt)
    q1 = quat_normalize(quat_mul(q0, step))
    R0 = quat_to_matrix(q0)
    R1 = quat_to_matrix(q1)

    acc_world0 = R0 @ a0
    acc_world1 = R1 @ a1
    acc_mid = 0.5 * (acc_world0 + acc_world1)

    alpha = delta.alpha + delta.beta * dt + 0.5 * acc_mid * dt * dt
    beta = delta.beta + acc_mid * dt

    # error-state transition (exact to first order; Jr keeps bias columns
    # accurate enough that correction error stays quadratic in the bias shift)
    A = quat_to_matrix(step).T
    B = right_jacobian_so3(w_mid * dt) * dt
    Ka0 = skew(a0)
    Ka1 = skew(a1)
    R1Ka1 = R1 @ Ka1

    dacc_dtheta = -0.5 * (R0 @ Ka0 + R1Ka1 @ A)
    dacc_dbg = 0.5 * R1Ka1 @ B
    dacc_dba = -0.5 * (R0 + R1)

    F = np.eye(15)
    F[0:3, 3:6] = 0.5 * dt * dt * dacc_dtheta
    F[0:3, 6:9] = dt * np.eye(3)
    F[0:3, 9:12] = 0.5 * dt * dt * dacc_dbg
    F[0:3, 12:15] = 0.5 * dt * dt * dacc_dba
    F[3:6, 3:6] = A
    F[3:6, 9:12] = -B
    F[6:9, 3:6] = dt * dacc_dtheta
    F[6:9, 9:12] = dt * dacc_dbg
    F[6:9, 12:15] = dt * dacc_dba

    # noise input: [n_a0, n_g0, n_a1, n_g1, n_bg, n_ba]
    G = np.zeros((15, 18))
    G[3:6, 3:6] = -0.5 * B
    G[3:6, 9:12] = -0.5 * B
    G[6:9, 0:3] = -0.5 * dt * R0
    G[6:9, 3:6] = 0.5 * dt * dacc_dbg  # gyro noise enters like a bias blip
    G[6:9, 6:9] = -0.5 * dt * R1
    G[6:9, 9:12] = 0.5 * dt * dacc_dbg
    G[0:3, :] = 0.5 * dt * G[6:9, :]
    G[9:12, 12:15] = np.eye(3)
    G[12:15, 15:18] = np.eye(3)

    qa = noise.accel_noise**2 / dt
    qg = noise.gyro_noise**2 / dt
    Q = np.diag(
        [qa] * 3 + [qg] * 3 + [qa] * 3 + [qg] * 3
        + [noise.gyro_walk**2 * dt] * 3
        + [noise.accel_walk**2 * dt] * 3
    )

    P = F @ delta.covariance @ F.T + G @ Q @ G.T
    P = 0.5 * (P + P.T)
    J = F @ delta.jacobian

    return PreintegratedDelta(
        dt_total=delta.dt_total + dt,
        gamma=q1,
        beta=beta,
        alpha=alpha,
        bias_ref=delta.bias_ref,
        covariance=P,
        jacobian=J,
    )


def compose_deltas(d1: PreintegratedDelta, d2: PreintegratedDelta) -> PreintegratedDelta:
    """Chain two consecutive spans into one.

    States and bias-correction Jacobians compose exactly to first order;
    the composed covariance omits the second span's bias-walk block (the
    pipeline re-integrates from raw samples where covariance matters).
    """
    R1 = d1.rotation_matrix
    R2 = d2.rotation_matrix
    gamma = quat_normalize(quat_mul(d1.gamma, d2.gamma))
    beta = d1.beta + R1 @ d2.beta
    alpha = d1.alpha + d1.beta * d2.dt_total + R1 @ d2.alpha

    A = np.eye(15)
    A[0:3, 3:6] = -R1 @ skew(d2.alpha)
    A[0:3, 6:9] = d2.dt_total * np.eye(3)
    A[3:6, 3:6] = R2.T
    A[6:9, 3:6] = -R1 @ skew(d2.beta)

    B = np.zeros((15, 15))
    B[0:3, 0:3] = R1
    B[3:6, 3:6] = np.eye(3)
    B[6:9, 6:9] = R1

    J = A @ d1.jacobian + B @ d2.jacobian
    P = A @ d1.covariance @ A.T + B @ d2.covariance @ B.T
    return PreintegratedDelta(
        dt_total=d1.dt_total + d2.dt_total,
        gamma=gamma,
        beta=beta,
        alpha=alpha,
        bias_ref=d1.bias_ref,
        covariance=0.5 * (P + P.T),
        jacobian=J,
    )


def repropagate(delta: PreintegratedDelta, new_bias: ImuBias) -> PreintegratedDelta:
    """First-order bias correction without touching the raw samples."""
    dbg = new_bias.gyro - delta.bias_ref.gyro
    dba = new_bias.accel - delta.bias_ref.accel
    J = delta.jacobian
    alpha = delta.alpha + J[0:3, 9:12] @ dbg + J[0:3, 12:15] @ dba
    beta = delta.beta + J[6:9, 9:12] @ dbg + J[6:9, 12:15] @ dba
    dq = quat_normalize(np.concatenate(([1.0], 0.5 * (J[3:6, 9:12] @ dbg))))
    gamma = quat_normalize(quat_mul(delta.gamma, dq))
    return replace(delta, gamma=gamma, beta=beta, alpha=alpha, bias_ref=new_bias)


def predict_pose(
    state: NavState, delta: PreintegratedDelta, gravity: np.ndarray
) -> tuple[PoseSE3, np.ndarray]:
    """Propagate a nav state across a preintegrated span.

    The delta is bias-corrected to the state's bias first; a shift beyond
    the first-order validity bound raises BiasMismatch.
    """
    shift = state.bias.distance(delta.bias_ref)
    if shift > BIAS_CORRECTION_BOUND:
        raise BiasMismatch(f"bias shift {shift:.3f} exceeds {BIAS_CORRECTION_BOUND}")
    if shift > 0.0:
        delta = repropagate(delta, state.bias)

    g = np.asarray(gravity, dtype=float).reshape(3)
    dt = delta.dt_total
    Ri = state.pose.rotation_matrix
    p = state.pose.t + state.velocity * dt + 0.5 * g * dt * dt + Ri @ delta.alpha
    v = state.velocity + g * dt + Ri @ delta.beta
    q = quat_normalize(quat_mul(state.pose.q, delta.gamma))
    return PoseSE3(q, p), v


class Preintegrator:
    """Accumulates one inter-frame span and keeps the raw samples.

    Keeping samples makes exact re-integration possible when the span is
    merged with its neighbor (window frame dropped) or when the linearization
    bias moves too far for the first-order correction.
    """

    def __init__(
        self,
        bias: ImuBias | None = None,
        noise: ImuNoiseModel = ImuNoiseModel(),
        max_dt: float = 0.1,
    ):
        self.noise = noise
        self.max_dt = max_dt
        self.samples: list[ImuSample] = []
        self.delta = PreintegratedDelta.initial(bias)

    def add(self, sample: ImuSample) -> None:
        if self.samples:
            self.delta = integrate(self.delta, self.samples[-1], sample, self.noise, self.max_dt)
        self.samples.append(sample)

    def reintegrate(self, bias: ImuBias) -> None:
        """Exact recomputation of the whole span at a new bias."""
        self.delta = PreintegratedDelta.initial(bias)
        for prev, nxt in zip(self.samples, self.samples[1:]):
            self.delta = integrate(self.delta, prev, nxt, self.noise, self.max_dt)

    def merge_from(self, earlier: "Preintegrator") -> None:
        """Prepend an earlier span (used when its end frame is discarded).

        Spans built at the same reference bias chain by composition; a
        mismatched reference falls back to exact re-integration.
        """
        if earlier.samples and self.samples:
            joined = earlier.samples + [
                s for s in self.samples if s.timestamp > earlier.samples[-1].timestamp
            ]
        else:
            joined = earlier.samples + self.samples
        same_ref = earlier.delta.bias_ref.distance(self.delta.bias_ref) < 1e-12
        if same_ref and earlier.samples and self.samples:
            self.samples = joined
            self.delta = compose_deltas(earlier.delta, self.delta)
        else:
            self.samples = joined
            self.reintegrate(self.delta.bias_ref)


def slice_stream(samples: list[ImuSample], t0: float, t1: float) -> list[ImuSample]:
    """Samples covering [t0, t1], with linearly interpolated endpoints.

    The stream must span the interval; raises NonMonotonicTimestamps on
    unsorted input and ValueError when coverage is missing.
    """
    if t1 <= t0:
        raise ValueError("empty interval")
    ts = np.array([s.timestamp for s in samples])
    if np.any(np.diff(ts) <= 0):
        raise NonMonotonicTimestamps("imu stream not strictly increasing")
    if t0 < ts[0] - 1e-9 or t1 > ts[-1] + 1e-9:
        raise ValueError(f"imu stream does not cover [{t0}, {t1}]")

    def interp(t: float) -> ImuSample:
        i = int(np.searchsorted(ts, t, side="right")) - 1
        i = min(max(i, 0), len(samples) - 2)
        s0, s1 = samples[i], samples[i + 1]
        w = (t - s0.timestamp) / (s1.timestamp - s0.timestamp)
        return ImuSample(t, (1 - w) * s0.gyro + w * s1.gyro, (1 - w) * s0.accel + w * s1.accel)

    inner = [s for s in samples if t0 + 1e-12 < s.timestamp < t1 - 1e-12]
    return [interp(t0)] + inner + [interp(t1)]


def estimate_static_init(
    samples: list[ImuSample], duration: float = 0.5
) -> tuple[np.ndarray, ImuBias]:
    """Gravity direction and gyro bias from a near-static startup span.

    World frame is pinned to the first body frame, so gravity is the negated
    mean specific force rescaled to standard magnitude.
    """
    if not samples:
        raise ValueError("no samples")
    t0 = samples[0].timestamp
    window = [s for s in samples if s.timestamp <= t0 + duration] or samples[:1]
    mean_gyro = np.mean([s.gyro for s in window], axis=0)
    mean_accel = np.mean([s.accel for s in window], axis=0)
    norm = np.linalg.norm(mean_accel)
    if norm < 1e-6:
        raise ValueError("degenerate accelerometer mean during static init")
    gravity = -mean_accel / norm * GRAVITY_MAGNITUDE
    return gravity, ImuBias(gyro=mean_gyro, accel=np.zeros(3))
