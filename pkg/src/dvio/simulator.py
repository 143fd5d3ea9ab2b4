"""Deterministic dynamic-scene simulator.

World: a box-shaped room with landmarks on its walls, axis-aligned moving
objects carrying surface landmarks, and a body (robot) frame flying a C2
spline trajectory. Inertial signals come from the spline's analytic
derivatives, so a perfect integrator reproduces the trajectory. Depth is
served by ray casting against the nearest surface; every random quantity
(pixel/depth noise, dropouts, detection misses, box jitter) derives from the
scene seed through counter-based hashes, so outputs are bit-identical per
seed no matter the query order.

Body frame: x forward, y left, z up. Camera: z forward, x right, y down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import SpecInvalid
from .geometry import PinholeCamera, PoseSE3, compose, matrix_to_quat
from .imu import GRAVITY_MAGNITUDE, ImuSample
from .semantic import DEFAULT_DYNAMIC_CLASSES, DetectionBox

# camera axes expressed in the body frame
R_CAMERA_TO_BODY = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
DEFAULT_EXTRINSIC = PoseSE3(matrix_to_quat(R_CAMERA_TO_BODY), np.array([0.05, 0.0, 0.02]))
GRAVITY_W = np.array([0.0, 0.0, -GRAVITY_MAGNITUDE])


@dataclass(frozen=True)
class ObjectSpec:
    dims: tuple[float, float, float]
    landmark_count: int
    waypoints: list[tuple[float, float, float, float]]  # (t, x, y, z) of center
    class_label: str = "person"


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.0
    depth_sigma: float = 0.0
    depth_dropout: float = 0.0
    gyro_noise: float = 0.0  # density, rad/s/sqrt(Hz)
    accel_noise: float = 0.0  # density, m/s^2/sqrt(Hz)
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    detection_miss_prob: float = 0.0
    box_jitter_sigma: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    duration: float = 10.0
    frame_rate: float = 30.0
    imu_rate: float = 200.0
    camera: PinholeCamera = field(
        default_factory=lambda: PinholeCamera(460.0, 460.0, 320.0, 240.0, 640, 480)
    )
    extrinsic: PoseSE3 = field(default_factory=lambda: DEFAULT_EXTRINSIC)
    room_extent: float = 8.0
    static_landmarks: int = 400
    camera_waypoints: list[tuple[float, float, float, float]] | None = None
    camera_euler_waypoints: list[tuple[float, float, float, float]] | None = None  # yaw,pitch,roll
    objects: list[ObjectSpec] = field(default_factory=list)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    detectable_classes: frozenset[str] = DEFAULT_DYNAMIC_CLASSES
    depth_max_range: float = 15.0
    min_range: float = 0.3

    def __post_init__(self):
        if self.duration <= 0 or self.frame_rate <= 0 or self.imu_rate <= 0:
            raise SpecInvalid("rates and duration must be positive")
        if self.imu_rate < 4 * self.frame_rate:
            raise SpecInvalid("imu_rate must be at least 4x frame_rate")
        if self.static_landmarks < 0:
            raise SpecInvalid("static_landmarks must be >= 0")
        for obj in self.objects:
            if obj.landmark_count < 0 or min(obj.dims) <= 0:
                raise SpecInvalid("object dims must be positive")
            times = [w[0] for w in obj.waypoints]
            if len(times) < 2 or times[0] > 0 or times[-1] < self.duration:
                raise SpecInvalid("object waypoints must cover [0, duration]")


# -- counter-based randomness --------------------------------------------------


def _hash01(a: np.ndarray, b: np.ndarray, c: np.ndarray, seed: int, salt: int) -> np.ndarray:
    """Deterministic uniform [0,1) from integer coordinates."""
    h = (
        a.astype(np.uint64) * np.uint64(374761393)
        + b.astype(np.uint64) * np.uint64(668265263)
        + c.astype(np.uint64) * np.uint64(2246822519)
        + np.uint64(seed * 2654435761 + salt * 40503)
    )
    h ^= h >> np.uint64(13)
    h *= np.uint64(1274126177)
    h ^= h >> np.uint64(16)
    return (h & np.uint64(0xFFFFFFFF)).astype(np.float64) / 2.0**32


def _hash_normal(a, b, c, seed: int, salt: int) -> np.ndarray:
    u1 = _hash01(a, b, c, seed, 2 * salt)
    u2 = _hash01(a, b, c, seed, 2 * salt + 1)
    return np.sqrt(-2.0 * np.log(1.0 - u1)) * np.cos(2.0 * np.pi * u2)


# -- geometry helpers -----------------------------------------------------------


def euler_zyx_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


def body_rates_from_euler(yaw, pitch, roll, dyaw, dpitch, droll) -> np.ndarray:
    """Angular velocity in the body frame from aerospace yaw-pitch-roll rates."""
    return np.array(
        [
            droll - dyaw * np.sin(pitch),
            dpitch * np.cos(roll) + dyaw * np.cos(pitch) * np.sin(roll),
            -dpitch * np.sin(roll) + dyaw * np.cos(pitch) * np.cos(roll),
        ]
    )


class _Spline3:
    """Clamped C2 spline through (t, xyz) waypoints with analytic derivatives.

    An optional quintic time warp reparameterizes progress so velocity AND
    acceleration vanish at both ends: the sequence starts truly static (the
    estimator's gravity initialization assumes that) while staying C2.
    """

    def __init__(self, waypoints, ease: bool = False):
        pts = np.asarray(waypoints, dtype=float)
        if pts.shape[0] < 2:
            raise SpecInvalid("need at least two waypoints")
        t = pts[:, 0]
        if np.any(np.diff(t) <= 0):
            raise SpecInvalid("waypoint times must increase")
        self.t0, self.t1 = t[0], t[-1]
        self.ease = ease
        self.spline = CubicSpline(t, pts[:, 1:4], axis=0, bc_type="clamped")
        self.d1 = self.spline.derivative(1)
        self.d2 = self.spline.derivative(2)

    def _warp(self, t):
        T = self.t1 - self.t0
        x = (np.clip(t, self.t0, self.t1) - self.t0) / T
        q = 10 * x**3 - 15 * x**4 + 6 * x**5
        dq = (30 * x**2 - 60 * x**3 + 30 * x**4) / T
        ddq = (60 * x - 180 * x**2 + 120 * x**3) / T**2
        return self.t0 + T * q, T * dq, T * ddq

    def pos(self, t):
        if not self.ease:
            return self.spline(np.clip(t, self.t0, self.t1))
        w, _, _ = self._warp(t)
        return self.spline(w)

    def vel(self, t):
        if not self.ease:
            return self.d1(np.clip(t, self.t0, self.t1))
        w, dw, _ = self._warp(t)
        return self.d1(w) * np.expand_dims(dw, -1) if np.ndim(t) else self.d1(w) * dw

    def acc(self, t):
        if not self.ease:
            return self.d2(np.clip(t, self.t0, self.t1))
        w, dw, ddw = self._warp(t)
        if np.ndim(t):
            dw = np.expand_dims(dw, -1)
            ddw = np.expand_dims(ddw, -1)
        return self.d2(w) * dw**2 + self.d1(w) * ddw


# -- depth service --------------------------------------------------------------


class DepthView:
    """Nearest-surface depth for one frame, with counter-hashed sensor noise."""

    def __init__(
        self,
        cam: PinholeCamera,
        T_wc: PoseSE3,
        room_extent: float,
        object_bounds: list[tuple[np.ndarray, np.ndarray]],
        noise: NoiseSpec,
        frame_index: int,
        seed: int,
        max_range: float,
    ):
        self.cam = cam
        self.T_wc = T_wc
        self.R_wc = T_wc.rotation_matrix
        self.origin = T_wc.t
        self.room_lo = np.full(3, -room_extent)
        self.room_hi = np.full(3, room_extent)
        self.object_bounds = object_bounds
        self.noise = noise
        self.frame_index = frame_index
        self.seed = seed
        self.max_range = max_range

    def raycast(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(depth t, hit object index or -1) for (N,2) pixels; t is camera-z."""
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        d_c = self.cam.ray(uv)  # z component 1: ray parameter equals depth
        dirs = d_c @ self.R_wc.T
        n = dirs.shape[0]
        o = self.origin

        with np.errstate(divide="ignore", invalid="ignore"):
            t_walls = np.where(
                np.abs(dirs) > 1e-12,
                np.maximum((self.room_lo - o) / dirs, (self.room_hi - o) / dirs),
                np.inf,
            )
        t_hit = t_walls.min(axis=1)
        hit_obj = np.full(n, -1, dtype=int)
        for k, (lo, hi) in enumerate(self.object_bounds):
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = np.where(np.abs(dirs) > 1e-12, (lo - o) / dirs, -np.inf)
                tb = np.where(np.abs(dirs) > 1e-12, (hi - o) / dirs, np.inf)
            t_near = np.minimum(ta, tb).max(axis=1)
            t_far = np.maximum(ta, tb).min(axis=1)
            hit = (t_near <= t_far) & (t_near > 1e-6) & (t_near < t_hit)
            t_hit = np.where(hit, t_near, t_hit)
            hit_obj = np.where(hit, k, hit_obj)
        return t_hit, hit_obj

    def _apply_noise(self, depth: np.ndarray, xi: np.ndarray, yi: np.ndarray) -> np.ndarray:
        f = np.full_like(xi, self.frame_index)
        out = depth.copy()
        if self.noise.depth_sigma > 0:
            out = out + self.noise.depth_sigma * _hash_normal(f, xi, yi, self.seed, 11)
        if self.noise.depth_dropout > 0:
            drop = _hash01(f, xi, yi, self.seed, 12) < self.noise.depth_dropout
            out = np.where(drop, 0.0, out)
        out = np.where((out <= 0) | (depth > self.max_range), 0.0, out)
        return out

    def sample(self, x: float, y: float) -> float:
        """Measured depth at one pixel: median of the noisy 3x3 patch
        (mirrors the image-path depth lookup); 0 when nothing is available."""
        xs, ys = self._patch(np.array([round(x)]), np.array([round(y)]))
        t, _ = self.raycast(np.stack([xs.astype(float), ys.astype(float)], axis=1))
        noisy = self._apply_noise(t, xs, ys)
        good = noisy[noisy > 0]
        return float(np.median(good)) if good.size else 0.0

    def _patch(self, xi: np.ndarray, yi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """3x3 neighborhoods (clamped) around integer pixel centers."""
        off = np.array([-1, 0, 1])
        xs = np.clip(xi[:, None, None] + off[None, :, None], 0, self.cam.width - 1)
        ys = np.clip(yi[:, None, None] + off[None, None, :], 0, self.cam.height - 1)
        xs, ys = np.broadcast_arrays(xs, ys)
        return xs.reshape(-1).astype(np.int64), ys.reshape(-1).astype(np.int64)

    def sample_batch(self, px_u: np.ndarray, px_v: np.ndarray) -> np.ndarray:
        """Median-of-3x3 measured depths for many pixels at once."""
        n = len(px_u)
        if n == 0:
            return np.empty(0)
        xi = np.round(px_u).astype(np.int64)
        yi = np.round(px_v).astype(np.int64)
        xs, ys = self._patch(xi, yi)
        t, _ = self.raycast(np.stack([xs.astype(float), ys.astype(float)], axis=1))
        noisy = self._apply_noise(t, xs, ys).reshape(n, 9)
        out = np.zeros(n)
        masked = np.where(noisy > 0, noisy, np.nan)
        with np.errstate(invalid="ignore"):
            med = np.nanmedian(masked, axis=1)
        out = np.where(np.isnan(med), 0.0, med)
        return out

    def materialize(self) -> np.ndarray:
        """Full (H,W) measured depth image (same noise as point samples)."""
        h, w = self.cam.height, self.cam.width
        xs, ys = np.meshgrid(np.arange(w), np.arange(h))
        uv = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
        t, _ = self.raycast(uv)
        noisy = self._apply_noise(t, xs.ravel(), ys.ravel())
        return noisy.reshape(h, w)


# -- frame bundles ---------------------------------------------------------------


@dataclass(frozen=True)
class SimObservation:
    feature_id: int
    pixel: np.ndarray  # noisy pixel
    depth: float  # measured depth (0 = unavailable)
    true_pixel: np.ndarray
    is_dynamic: bool
    object_index: int  # -1 for static


@dataclass(frozen=True)
class FrameBundle:
    frame_index: int
    timestamp: float
    pose: PoseSE3  # true body-to-world
    observations: list[SimObservation]
    detections: list[DetectionBox]
    depth_view: DepthView
    true_boxes: dict[int, tuple[float, float, float, float]]


@dataclass
class SimulatedSequence:
    spec: SceneSpec
    frames: list[FrameBundle]
    imu: list[ImuSample]
    true_timestamps: np.ndarray
    true_positions: np.ndarray
    true_quaternions: np.ndarray  # wxyz, body-to-world
    true_velocities: np.ndarray
    landmarks_static: np.ndarray
    object_offsets: list[np.ndarray]

    def pose_at(self, index: int) -> PoseSE3:
        return PoseSE3(self.true_quaternions[index], self.true_positions[index])


DWELL = 1.0  # seconds of rest at the start so static initialization holds


def _default_camera_waypoints(duration: float, extent: float):
    # rest, then a gentle closed wander near the room center
    amp = min(1.5, extent / 4)
    start = (-extent / 4, 0.0, 0.0)
    pts = [(0.0, *start), (min(DWELL / 2, duration / 4), *start), (min(DWELL, duration / 2), *start)]
    move_t = np.linspace(min(DWELL, duration / 2), duration, max(int(duration / 2.5) + 2, 4))
    for i, t in enumerate(move_t[1:], start=1):
        phase = 2 * np.pi * i / max(len(move_t) - 1, 1)
        pts.append(
            (
                float(t),
                -extent / 4 + amp * 0.4 * np.sin(phase),
                amp * np.sin(phase / 2),
                0.2 * np.sin(phase),
            )
        )
    return pts


def _default_euler_waypoints(duration: float):
    pts = [(0.0, 0.0, 0.0, 0.0), (min(DWELL / 2, duration / 4), 0.0, 0.0, 0.0),
           (min(DWELL, duration / 2), 0.0, 0.0, 0.0)]
    move_t = np.linspace(min(DWELL, duration / 2), duration, max(int(duration / 2.5) + 2, 4))
    for i, t in enumerate(move_t[1:], start=1):
        phase = 2 * np.pi * i / max(len(move_t) - 1, 1)
        pts.append((float(t), 0.25 * np.sin(phase), 0.08 * np.sin(phase / 2), 0.05 * np.sin(phase)))
    return pts


def _sample_wall_points(rng: np.random.Generator, count: int, extent: float) -> np.ndarray:
    """Landmarks on the inside faces of the room box."""
    faces = rng.integers(0, 6, size=count)
    u = rng.uniform(-extent, extent, size=count)
    v = rng.uniform(-extent, extent, size=count)
    pts = np.empty((count, 3))
    for i, f in enumerate(faces):
        axis = f // 2
        side = extent if f % 2 == 0 else -extent
        coords = [u[i], v[i]]
        coords.insert(axis, side)
        pts[i] = coords
    return pts


def _object_surface_points(rng: np.random.Generator, count: int, dims) -> np.ndarray:
    """Offsets on the surface of an axis-aligned box centered at origin."""
    half = np.asarray(dims, dtype=float) / 2
    faces = rng.integers(0, 6, size=count)
    u = rng.uniform(-1, 1, size=count)
    v = rng.uniform(-1, 1, size=count)
    pts = np.empty((count, 3))
    for i, f in enumerate(faces):
        axis = f // 2
        side = half[axis] if f % 2 == 0 else -half[axis]
        others = [a for a in range(3) if a != axis]
        p = np.empty(3)
        p[axis] = side
        p[others[0]] = u[i] * half[others[0]]
        p[others[1]] = v[i] * half[others[1]]
        pts[i] = p
    return pts


def generate(spec: SceneSpec) -> SimulatedSequence:
    """Render the whole sequence; deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    landmarks_static = _sample_wall_points(rng, spec.static_landmarks, spec.room_extent * 0.999)
    object_offsets = [
        _object_surface_points(rng, obj.landmark_count, obj.dims) for obj in spec.objects
    ]
    object_splines = [_Spline3(obj.waypoints) for obj in spec.objects]

    cam_spline = _Spline3(
        spec.camera_waypoints or _default_camera_waypoints(spec.duration, spec.room_extent),
        ease=True,
    )
    euler_spline = _Spline3(
        spec.camera_euler_waypoints or _default_euler_waypoints(spec.duration), ease=True
    )

    # ground truth at frame rate
    n_frames = int(round(spec.duration * spec.frame_rate)) + 1
    frame_times = np.arange(n_frames) / spec.frame_rate
    positions = cam_spline.pos(frame_times)
    quats = np.empty((n_frames, 4))
    for i, t in enumerate(frame_times):
        yaw, pitch, roll = euler_spline.pos(t)
        quats[i] = matrix_to_quat(euler_zyx_matrix(yaw, pitch, roll))

    imu = _generate_imu(spec, cam_spline, euler_spline)

    frames = []
    static_count = spec.static_landmarks
    for i, t in enumerate(frame_times):
        pose = PoseSE3(quats[i], positions[i])
        T_wc = compose(pose, spec.extrinsic)
        T_cw = T_wc.inverse()

        centers = [sp.pos(t) for sp in object_splines]
        bounds = [
            (c - np.asarray(o.dims) / 2, c + np.asarray(o.dims) / 2)
            for c, o in zip(centers, spec.objects)
        ]
        view = DepthView(
            spec.camera, T_wc, spec.room_extent, bounds, spec.noise, i, spec.seed,
            spec.depth_max_range,
        )

        world_points = [landmarks_static] if static_count else []
        for k in range(len(spec.objects)):
            if len(object_offsets[k]):
                world_points.append(centers[k] + object_offsets[k])
        all_points = (
            np.concatenate(world_points, axis=0) if world_points else np.empty((0, 3))
        )

        observations = []
        if len(all_points):
            p_cam = T_cw.apply(all_points)
            z = p_cam[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                u = spec.camera.fx * p_cam[:, 0] / z + spec.camera.cx
                v = spec.camera.fy * p_cam[:, 1] / z + spec.camera.cy
            visible = (
                (z > spec.min_range)
                & (u >= 1)
                & (u <= spec.camera.width - 2)
                & (v >= 1)
                & (v <= spec.camera.height - 2)
            )
            ids = np.nonzero(visible)[0]
            # static landmarks must not be occluded by an object
            if len(ids) and spec.objects:
                t_hit, hit_obj = view.raycast(np.stack([u[ids], v[ids]], axis=1))
                occluded = (hit_obj >= 0) & (t_hit < z[ids] - 0.05) & (ids < static_count)
                own = ids >= static_count
                # dynamic landmarks: keep only if their own object is the first hit
                obj_of = np.zeros(len(ids), dtype=int)
                off = static_count
                for k in range(len(spec.objects)):
                    cnt = len(object_offsets[k])
                    obj_of[(ids >= off) & (ids < off + cnt)] = k
                    off += cnt
                blocked_dyn = own & (hit_obj != obj_of) & (t_hit < z[ids] - 0.05)
                ids = ids[~(occluded | blocked_dyn)]
            fidx = np.full(len(ids), i)
            noise_u = (
                spec.noise.pixel_sigma * _hash_normal(fidx, ids, np.zeros_like(ids), spec.seed, 1)
                if spec.noise.pixel_sigma > 0
                else np.zeros(len(ids))
            )
            noise_v = (
                spec.noise.pixel_sigma * _hash_normal(fidx, ids, np.zeros_like(ids), spec.seed, 2)
                if spec.noise.pixel_sigma > 0
                else np.zeros(len(ids))
            )
            px_u = np.clip(u[ids] + noise_u, 0.0, spec.camera.width - 1.0)
            px_v = np.clip(v[ids] + noise_v, 0.0, spec.camera.height - 1.0)
            # batch depth lookups (same semantics as view.sample per pixel)
            depths = view.sample_batch(px_u, px_v)
            for n_idx, lid in enumerate(ids):
                observations.append(
                    SimObservation(
                        feature_id=int(lid),
                        pixel=np.array([px_u[n_idx], px_v[n_idx]]),
                        depth=float(depths[n_idx]),
                        true_pixel=np.array([u[lid], v[lid]]),
                        is_dynamic=bool(lid >= static_count),
                        object_index=int(-1 if lid < static_count else obj_index_of(
                            int(lid), static_count, object_offsets
                        )),
                    )
                )

        detections = []
        true_boxes = {}
        for k, obj in enumerate(spec.objects):
            lo, hi = bounds[k]
            corners = np.array(
                [[x, y, z_] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z_ in (lo[2], hi[2])]
            )
            pc = T_cw.apply(corners)
            if np.any(pc[:, 2] < 0.1):
                continue
            uu = spec.camera.fx * pc[:, 0] / pc[:, 2] + spec.camera.cx
            vv = spec.camera.fy * pc[:, 1] / pc[:, 2] + spec.camera.cy
            x1, x2 = uu.min(), uu.max()
            y1, y2 = vv.min(), vv.max()
            if x2 < 0 or x1 > spec.camera.width - 1 or y2 < 0 or y1 > spec.camera.height - 1:
                continue
            x1c, x2c = max(x1, 0.0), min(x2, spec.camera.width - 1.0)
            y1c, y2c = max(y1, 0.0), min(y2, spec.camera.height - 1.0)
            if x2c - x1c < 2 or y2c - y1c < 2:
                continue
            true_boxes[k] = (x1c, y1c, x2c, y2c)
            if obj.class_label not in spec.detectable_classes:
                continue
            kk = np.array([k])
            ff = np.array([i])
            if spec.noise.detection_miss_prob > 0 and float(
                _hash01(ff, kk, kk, spec.seed, 21)[0]
            ) < spec.noise.detection_miss_prob:
                continue
            if spec.noise.box_jitter_sigma > 0:
                j = spec.noise.box_jitter_sigma * _hash_normal(
                    np.full(4, i), np.full(4, k), np.arange(4), spec.seed, 22
                )
            else:
                j = np.zeros(4)
            box = DetectionBox(
                obj.class_label,
                min(x1c + j[0], x2c + j[2] - 1),
                min(y1c + j[1], y2c + j[3] - 1),
                max(x2c + j[2], x1c + j[0] + 1),
                max(y2c + j[3], y1c + j[1] + 1),
                score=0.9,
                frame_index=i,
            ).clamped(spec.camera.width, spec.camera.height)
            detections.append(box)

        frames.append(
            FrameBundle(i, float(t), pose, observations, detections, view, true_boxes)
        )

    return SimulatedSequence(
        spec=spec,
        frames=frames,
        imu=imu,
        true_timestamps=frame_times,
        true_positions=positions,
        true_quaternions=quats,
        true_velocities=cam_spline.vel(frame_times),
        landmarks_static=landmarks_static,
        object_offsets=object_offsets,
    )


def obj_index_of(lid: int, static_count: int, object_offsets: list[np.ndarray]) -> int:
    off = static_count
    for k, pts in enumerate(object_offsets):
        if lid < off + len(pts):
            return k
        off += len(pts)
    return -1


def _generate_imu(spec: SceneSpec, cam_spline: _Spline3, euler_spline: _Spline3):
    n = int(round(spec.duration * spec.imu_rate)) + 1
    times = np.arange(n) / spec.imu_rate
    sigma_g = spec.noise.gyro_noise * math.sqrt(spec.imu_rate)
    sigma_a = spec.noise.accel_noise * math.sqrt(spec.imu_rate)
    bg = np.asarray(spec.noise.gyro_bias, dtype=float)
    ba = np.asarray(spec.noise.accel_bias, dtype=float)
    samples = []
    for k, t in enumerate(times):
        yaw, pitch, roll = euler_spline.pos(t)
        dyaw, dpitch, droll = euler_spline.vel(t)
        R_wb = euler_zyx_matrix(yaw, pitch, roll)
        omega = body_rates_from_euler(yaw, pitch, roll, dyaw, dpitch, droll)
        acc_w = cam_spline.acc(t)
        f_body = R_wb.T @ (acc_w - GRAVITY_W)
        kk = np.full(3, k)
        axes = np.arange(3)
        if sigma_g > 0:
            omega = omega + sigma_g * _hash_normal(kk, axes, axes, spec.seed, 31)
        if sigma_a > 0:
            f_body = f_body + sigma_a * _hash_normal(kk, axes, axes, spec.seed, 32)
        samples.append(ImuSample(float(t), omega + bg, f_body + ba))
    return samples


# -- procedural texture (image path) --------------------------------------------


def _value_noise(points: np.ndarray, scale: float, seed: int, salt: int) -> np.ndarray:
    p = np.asarray(points, dtype=float) / scale
    i0 = np.floor(p).astype(np.int64)
    f = p - i0
    f = f * f * (3 - 2 * f)  # smoothstep
    total = np.zeros(len(p))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = _hash01(
                    i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz, seed, salt
                )
                wx = f[:, 0] if dx else 1 - f[:, 0]
                wy = f[:, 1] if dy else 1 - f[:, 1]
                wz = f[:, 2] if dz else 1 - f[:, 2]
                total += corner * wx * wy * wz
    return total


def render_image(sequence: SimulatedSequence, bundle: FrameBundle) -> np.ndarray:
    """Grayscale frame: seeded value-noise texture glued to world surfaces.

    Object pixels sample texture in object-local coordinates so their pattern
    travels with them; walls are textured in world coordinates.
    """
    spec = sequence.spec
    cam = spec.camera
    view = bundle.depth_view
    h, w = cam.height, cam.width
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    uv = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    t_hit, hit_obj = view.raycast(uv)
    dirs = cam.ray(uv) @ view.R_wc.T
    pts = view.origin + dirs * t_hit[:, None]
    tex_pts = pts.copy()
    for k in range(len(spec.objects)):
        m = hit_obj == k
        if not np.any(m):
            continue
        lo, hi = view.object_bounds[k]
        center = (lo + hi) / 2
        tex_pts[m] = pts[m] - center + np.array([50.0 * (k + 1), 0.0, 0.0])
    n = (
        0.55 * _value_noise(tex_pts, 1.1, spec.seed, 41)
        + 0.30 * _value_noise(tex_pts, 0.37, spec.seed, 42)
        + 0.15 * _value_noise(tex_pts, 0.13, spec.seed, 43)
    )
    img = 40 + 60 * (n > 0.52) + 150 * n
    return np.clip(img, 0, 255).astype(np.uint8).reshape(h, w)


# -- abstract front-end provider --------------------------------------------------


class OracleFrontend:
    """Tracking-stage stand-in that feeds simulator observations directly.

    Mirrors the image tracker's contract (feature budget, minimum pixel
    separation, track continuity, losses on leaving the view) without images.
    Selection priority is a fixed id hash so static and moving landmarks mix.
    """

    def __init__(self, max_features: int = 130, min_separation_px: float = 15.0):
        from .tracks import FeatureRegistry

        self.max_features = max_features
        self.min_separation = min_separation_px
        self.registry = FeatureRegistry()
        self.track_of_landmark: dict[int, int] = {}
        self.landmark_of_track: dict[int, int] = {}
        self.truth: dict[int, tuple[bool, int]] = {}  # track id -> (is_dynamic, object idx)

    @staticmethod
    def _priority(lid: int) -> int:
        return (lid * 2654435761) % (2**32)

    def process(self, bundle: FrameBundle, delta=None) -> "TrackingOutput":
        from .frontend import TrackingOutput
        from .tracks import FeatureObservation

        visible = {o.feature_id: o for o in bundle.observations}
        observations = []
        failed_pixels = []
        taken_pixels = []

        for lid in sorted(self.track_of_landmark):
            tid = self.track_of_landmark[lid]
            sim_obs = visible.get(lid)
            track = self.registry.get(tid)
            if sim_obs is None:
                if track is not None and track.observations:
                    failed_pixels.append(track.last.pixel)
                self.registry.mark_failed(tid)
                continue
            obs = FeatureObservation(tid, bundle.frame_index, sim_obs.pixel, sim_obs.depth)
            self.registry.ingest(obs)
            observations.append(obs)
            taken_pixels.append(sim_obs.pixel)

        lost = [
            lid
            for lid, tid in self.track_of_landmark.items()
            if lid not in visible
        ]
        for lid in lost:
            tid = self.track_of_landmark.pop(lid)
            self.landmark_of_track.pop(tid, None)

        new_ids = []
        deficit = self.max_features - len(observations)
        if deficit > 0:
            candidates = sorted(
                (lid for lid in visible if lid not in self.track_of_landmark),
                key=lambda lid: (self._priority(lid), lid),
            )
            for lid in candidates:
                if deficit <= 0:
                    break
                px = visible[lid].pixel
                if self.min_separation > 0 and any(
                    np.hypot(px[0] - q[0], px[1] - q[1]) < self.min_separation
                    for q in taken_pixels
                ):
                    continue
                tid = self.registry.new_id()
                self.track_of_landmark[lid] = tid
                self.landmark_of_track[tid] = lid
                self.truth[tid] = (visible[lid].is_dynamic, visible[lid].object_index)
                obs = FeatureObservation(tid, bundle.frame_index, px, visible[lid].depth)
                self.registry.ingest(obs)
                observations.append(obs)
                taken_pixels.append(px)
                new_ids.append(tid)
                deficit -= 1

        self.registry.drop_unstable()
        self.registry.prune_before(bundle.frame_index - 2)
        return TrackingOutput(
            frame_index=bundle.frame_index,
            timestamp=bundle.timestamp,
            observations=observations,
            failed_pixels=np.array(failed_pixels) if failed_pixels else np.empty((0, 2)),
            new_ids=new_ids,
            delta=delta,
        )


# -- dataset export ---------------------------------------------------------------


def export_tum(
    sequence: SimulatedSequence,
    root: str,
    depth_scale: float = 5000.0,
    with_texture: bool = False,
) -> None:
    """Write the sequence as a TUM-layout directory.

    rgb/ and depth/ hold PNG frames (8-bit gray, 16-bit depth at the given
    scale); rgb.txt/depth.txt/groundtruth.txt follow the stock column
    layout; imu.csv holds `t wx wy wz ax ay az`; detections.txt holds one
    `timestamp class x1 y1 x2 y2 score` record per box (frames the detector
    missed simply have no record).
    """
    import cv2

    from .errors import IoFailure

    root_path = Path(root)
    try:
        (root_path / "rgb").mkdir(parents=True, exist_ok=True)
        (root_path / "depth").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(str(e)) from e

    rgb_lines, depth_lines = [], []
    det_lines = []
    for bundle in sequence.frames:
        name = f"{bundle.timestamp:.6f}.png"
        if with_texture:
            img = render_image(sequence, bundle)
        else:
            img = np.full(
                (sequence.spec.camera.height, sequence.spec.camera.width), 128, np.uint8
            )
        depth_m = bundle.depth_view.materialize()
        depth_u16 = np.clip(depth_m * depth_scale, 0, 65535).astype(np.uint16)
        if not cv2.imwrite(str(root_path / "rgb" / name), img):
            raise IoFailure(f"failed to write rgb/{name}")
        if not cv2.imwrite(str(root_path / "depth" / name), depth_u16):
            raise IoFailure(f"failed to write depth/{name}")
        rgb_lines.append(f"{bundle.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{bundle.timestamp:.6f} depth/{name}")
        for box in bundle.detections:
            det_lines.append(
                f"{bundle.timestamp:.6f} {box.class_label} "
                f"{box.x1:.3f} {box.y1:.3f} {box.x2:.3f} {box.y2:.3f} {box.score:.3f}"
            )

    (root_path / "rgb.txt").write_text(
        "# color images\n# timestamp filename\n" + "\n".join(rgb_lines) + "\n"
    )
    (root_path / "depth.txt").write_text(
        "# depth images\n# timestamp filename\n" + "\n".join(depth_lines) + "\n"
    )
    with open(root_path / "groundtruth.txt", "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, p, q in zip(
            sequence.true_timestamps, sequence.true_positions, sequence.true_quaternions
        ):
            f.write(
                f"{t:.6f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                f"{q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}\n"
            )
    with open(root_path / "imu.csv", "w") as f:
        f.write("timestamp,wx,wy,wz,ax,ay,az\n")
        for s in sequence.imu:
            f.write(
                f"{s.timestamp:.6f},{s.gyro[0]:.9f},{s.gyro[1]:.9f},{s.gyro[2]:.9f},"
                f"{s.accel[0]:.9f},{s.accel[1]:.9f},{s.accel[2]:.9f}\n"
            )
    (root_path / "detections.txt").write_text("\n".join(det_lines) + ("\n" if det_lines else ""))


def example_scene(
    seed: int = 7,
    duration: float = 60.0,
    frame_rate: float = 30.0,
    imu_rate: float = 240.0,
    n_objects: int = 4,
    object_landmarks: int = 30,
    unknown_objects: int = 0,
    static_landmarks: int = 4000,
    noisy: bool = True,
    detection_miss_prob: float = 0.08,
) -> SceneSpec:
    """A ready-made dynamic indoor scene: a hall with a distant shell of
    static structure and people moving at close range.

    The background sits mostly beyond the depth camera's range, so the
    near-field movers carry the strongest geometry: exactly the regime where
    blindly trusting them wrecks the estimate. unknown_objects of the movers
    carry a class the detector never reports, so only the consistency check
    can catch their features.
    """
    objects = []
    extent = 11.0
    for k in range(n_objects):
        label = "cart" if k < unknown_objects else "person"
        waypoints = []
        if k % 4 in (0, 1):
            # slow shufflers drifting about at close range: too little pixel
            # motion for the residual check, plainly visible to the detector
            n_legs = max(int(duration / 6.0), 1)
            cx = 2.6 + 0.9 * k
            cy = -0.8 + 0.9 * k
            for leg in range(n_legs + 1):
                t = duration * leg / n_legs
                x = cx + (0.45 if leg % 2 == 0 else -0.45)
                y = cy + (0.35 if (leg // 2) % 2 == 0 else -0.35)
                waypoints.append((t, x, y, 0.2))
        elif k % 4 == 2:
            # walks toward the camera and back
            n_legs = max(int(duration / 8.0), 1)
            for leg in range(n_legs + 1):
                t = duration * leg / n_legs
                x = 6.0 if leg % 2 == 0 else 2.2
                waypoints.append((t, x, 1.3, 0.2))
        else:
            # lateral crosser
            n_legs = max(int(duration / 9.0), 1)
            for leg in range(n_legs + 1):
                t = duration * leg / n_legs
                y = -4.5 if leg % 2 == 0 else 4.5
                waypoints.append((t, 5.0, y, 0.2))
        objects.append(
            ObjectSpec(
                dims=(0.7, 0.7, 1.8),
                landmark_count=object_landmarks,
                waypoints=waypoints,
                class_label=label,
            )
        )
    noise = (
        NoiseSpec(
            pixel_sigma=0.5,
            depth_sigma=0.02,
            depth_dropout=0.03,
            gyro_noise=2e-4,
            accel_noise=4e-3,
            gyro_bias=(0.002, -0.0015, 0.001),
            accel_bias=(0.02, -0.015, 0.03),
            detection_miss_prob=detection_miss_prob,
            box_jitter_sigma=1.5,
        )
        if noisy
        else NoiseSpec()
    )
    return SceneSpec(
        seed=seed,
        duration=duration,
        frame_rate=frame_rate,
        imu_rate=imu_rate,
        room_extent=extent,
        static_landmarks=static_landmarks,
        objects=objects,
        noise=noise,
        depth_max_range=8.0,
    )
