import numpy as np
import pytest

from dvio.errors import InsufficientConstraints
from dvio.estimator import (
    EstimatorConfig,
    FrameState,
    SlidingWindowEstimator,
    WindowFeature,
    WindowProblem,
    keyframe_decision,
    levenberg_marquardt,
)
from dvio.geometry import PinholeCamera, PoseSE3, compose, quat_exp
from dvio.imu import ImuBias, ImuSample, PreintegratedDelta, Preintegrator, integrate
from dvio.tracks import FeatureObservation, FeatureRegistry
from oracles import central_difference_jacobian

CAM = PinholeCamera(fx=460.0, fy=460.0, cx=320.0, cy=240.0, width=640, height=480)
EXTRINSIC = PoseSE3(quat_exp(np.array([0.02, -0.01, 0.03])), np.array([0.04, 0.01, -0.02]))
GRAVITY = np.array([0.0, 0.0, -9.81])


def mild_pose(rng, i):
    q = quat_exp(rng.normal(0, 0.05, 3))
    t = np.array([0.25 * i, 0.03 * i, 0.0]) + rng.normal(0, 0.05, 3)
    return PoseSE3(q, t)


def integrate_span(rng, bias, duration=0.1, rate=200.0):
    t = np.arange(0, duration + 0.5 / rate, 1.0 / rate)
    gyro = 0.3 * np.stack([np.sin(3 * t + p) for p in rng.uniform(0, 6, 3)], axis=1)
    accel = np.array([0.0, 0.0, 9.81]) + 0.5 * np.stack(
        [np.sin(2 * t + p) for p in rng.uniform(0, 6, 3)], axis=1
    )
    delta = PreintegratedDelta.initial(bias)
    for k in range(len(t) - 1):
        delta = integrate(
            delta,
            ImuSample(t[k], gyro[k], accel[k]),
            ImuSample(t[k + 1], gyro[k + 1], accel[k + 1]),
        )
    return delta


def build_problem(rng, n_frames=4, n_feats=12, vo=False, with_depth=True):
    frames = []
    biases = [
        ImuBias(gyro=rng.normal(0, 0.005, 3), accel=rng.normal(0, 0.02, 3))
        for _ in range(n_frames)
    ]
    for i in range(n_frames):
        frames.append(
            FrameState(
                frame_id=i,
                timestamp=0.1 * i,
                pose=mild_pose(rng, i),
                velocity=rng.normal(0, 0.3, 3),
                bias=biases[i],
            )
        )
    features = []
    observations = {}
    for k in range(n_feats):
        anchor = int(rng.integers(0, n_frames - 1))
        lam = 1.0 / rng.uniform(2.0, 8.0)
        depth_meas = (1.0 / lam) * rng.uniform(0.9, 1.1) if with_depth and k % 2 == 0 else 0.0
        features.append(WindowFeature(k, anchor, lam, depth_meas))
        per_frame = {}
        for j in range(anchor, n_frames):
            px = np.array([rng.uniform(50, CAM.width - 50), rng.uniform(50, CAM.height - 50)])
            d = rng.uniform(2.0, 8.0) if (with_depth and j % 2 == 0) else 0.0
            per_frame[j] = (px, d)
        observations[k] = per_frame
    preints = None
    if not vo:
        # spans built at each start frame's bias: corrections linearize at zero
        preints = [integrate_span(rng, biases[i]) for i in range(n_frames - 1)]
    cfg = EstimatorConfig(vo_mode=vo)
    problem = WindowProblem(
        CAM, EXTRINSIC, cfg, frames, features, observations, preints, GRAVITY
    )
    return problem


def relative_jacobian_error(problem):
    x0 = problem.state0()
    r0, J = problem.linearize(x0)
    J_fd = central_difference_jacobian(
        lambda x: problem.residuals(x), x0, problem.retract, problem.dim
    )
    denom = np.maximum(1.0, np.maximum(np.abs(J), np.abs(J_fd)))
    return np.max(np.abs(J - J_fd) / denom)


def test_jacobians_match_finite_differences_inertial():
    rng = np.random.default_rng(0)
    for _ in range(10):
        problem = build_problem(rng)
        assert relative_jacobian_error(problem) < 1e-5


def test_jacobians_match_finite_differences_vo():
    rng = np.random.default_rng(1)
    for _ in range(10):
        problem = build_problem(rng, vo=True)
        assert relative_jacobian_error(problem) < 1e-5


def build_consistent_scene(rng, n_frames=5, n_feats=40, vo=True):
    """Ground-truth poses, landmarks, exact observations and depth priors."""
    cfg = EstimatorConfig(vo_mode=vo, min_features=5, depth_weight=10.0)
    poses = [
        PoseSE3(quat_exp(np.array([0.0, 0.01 * i, 0.02 * i])), np.array([0.15 * i, 0.02 * i, 0.0]))
        for i in range(n_frames)
    ]
    landmarks = np.stack(
        [
            rng.uniform(-2.5, 2.5, n_feats),
            rng.uniform(-1.8, 1.8, n_feats),
            rng.uniform(4.0, 9.0, n_feats),
        ],
        axis=1,
    )
    frames = [
        FrameState(i, 0.1 * i, poses[i], np.array([1.5, 0.2, 0.0]), ImuBias())
        for i in range(n_frames)
    ]
    features, observations = [], {}
    for k in range(n_feats):
        per_frame = {}
        anchor_depth = None
        for i in range(n_frames):
            p_c = compose(poses[i], EXTRINSIC).inverse().apply(landmarks[k])
            if p_c[2] <= 0.5:
                continue
            uv = CAM.project(p_c)
            if not (0 <= uv[0] < CAM.width and 0 <= uv[1] < CAM.height):
                continue
            per_frame[i] = (uv, float(p_c[2]))
            if anchor_depth is None:
                anchor = i
                anchor_depth = float(p_c[2])
        if len(per_frame) < 2:
            continue
        features.append(WindowFeature(k, anchor, 1.0 / anchor_depth, anchor_depth))
        observations[k] = per_frame
    return cfg, frames, features, observations, poses


def test_perturbation_recovery_vo_with_depth():
    rng = np.random.default_rng(2)
    cfg, frames, features, observations, truth = build_consistent_scene(rng)
    problem = WindowProblem(CAM, EXTRINSIC, cfg, frames, features, observations, None, None)
    x0 = problem.state0()
    assert problem.block_costs(problem.residuals(x0)) < 1e-12  # fixed point

    dx = np.zeros(problem.dim)
    for i in range(1, len(frames)):
        c = problem.cols_frame[i]
        dx[c : c + 3] = rng.normal(0, 0.01, 3)  # 1 cm position jolt
        axis = rng.normal(size=3)
        dx[c + 3 : c + 6] = axis * np.deg2rad(0.5) / np.linalg.norm(axis)
    x_pert = problem.retract(x0, dx)
    x_opt, info = levenberg_marquardt(problem, x_pert, cfg)
    for i in range(1, len(frames)):
        assert np.linalg.norm(x_opt.p[i] - truth[i].t) < 1e-4
    assert info.final_cost <= info.initial_cost
    assert all(b <= a + 1e-15 for a, b in zip(info.costs, info.costs[1:]))


def test_optimizer_fixed_point_zero_update():
    rng = np.random.default_rng(3)
    cfg, frames, features, observations, truth = build_consistent_scene(rng)
    problem = WindowProblem(CAM, EXTRINSIC, cfg, frames, features, observations, None, None)
    x0 = problem.state0()
    x_opt, info = levenberg_marquardt(problem, x0, cfg)
    assert info.final_cost < 1e-12
    for i in range(len(frames)):
        assert np.linalg.norm(x_opt.p[i] - truth[i].t) < 1e-9


def test_perturbation_recovery_with_imu():
    rng = np.random.default_rng(4)
    # constant-velocity level flight: exact closed-form inertial spans
    n_frames, dt = 5, 0.1
    vel = np.array([1.0, 0.0, 0.0])
    poses = [PoseSE3(np.array([1.0, 0, 0, 0]), vel * dt * i) for i in range(n_frames)]
    rate = 200.0
    samples = [
        ImuSample(t, np.zeros(3), np.array([0.0, 0.0, 9.81]))
        for t in np.arange(0, dt * (n_frames - 1) + 0.5 / rate, 1.0 / rate)
    ]
    preints = []
    for i in range(n_frames - 1):
        pre = Preintegrator()
        lo, hi = i * dt - 1e-9, (i + 1) * dt + 1e-9
        for s in samples:
            if lo <= s.timestamp <= hi:
                pre.add(s)
        preints.append(pre.delta)

    landmarks = np.stack(
        [rng.uniform(-2, 2, 60), rng.uniform(-1.5, 1.5, 60), rng.uniform(4, 8, 60)], axis=1
    )
    cfg = EstimatorConfig(min_features=5)
    frames = [FrameState(i, dt * i, poses[i], vel, ImuBias()) for i in range(n_frames)]
    features, observations = [], {}
    for k in range(len(landmarks)):
        per_frame = {}
        anchor_depth = None
        for i in range(n_frames):
            p_c = compose(poses[i], EXTRINSIC).inverse().apply(landmarks[k])
            uv = CAM.project(p_c)
            if not (0 <= uv[0] < CAM.width and 0 <= uv[1] < CAM.height):
                continue
            per_frame[i] = (uv, float(p_c[2]))
            if anchor_depth is None:
                anchor, anchor_depth = i, float(p_c[2])
        if len(per_frame) >= 2:
            features.append(WindowFeature(k, anchor, 1.0 / anchor_depth, anchor_depth))
            observations[k] = per_frame

    problem = WindowProblem(
        CAM, EXTRINSIC, cfg, frames, features, observations, preints, GRAVITY
    )
    x0 = problem.state0()
    assert problem.block_costs(problem.residuals(x0)) < 1e-6

    x_pert = x0.copy()
    for i in range(1, n_frames):
        x_pert.p[i] = x0.p[i] + rng.normal(0, 0.01, 3)
        x_pert.v[i] = x0.v[i] + rng.normal(0, 0.02, 3)
    x_opt, info = levenberg_marquardt(problem, x_pert, cfg)
    for i in range(1, n_frames):
        assert np.linalg.norm(x_opt.p[i] - poses[i].t) < 1e-4
    assert all(b <= a + 1e-15 for a, b in zip(info.costs, info.costs[1:]))


def test_excluding_feature_leaves_other_blocks_unchanged():
    rng = np.random.default_rng(5)
    cfg, frames, features, observations, _ = build_consistent_scene(rng, n_feats=20)
    full = WindowProblem(CAM, EXTRINSIC, cfg, frames, features, observations, None, None)
    reduced = WindowProblem(
        CAM, EXTRINSIC, cfg, frames, features[1:], observations, None, None
    )
    r_full = full.residuals(full.state0())
    r_red = reduced.residuals(reduced.state0())
    dropped = full.n_reproj - reduced.n_reproj  # first feature's blocks lead
    np.testing.assert_allclose(
        r_full[2 * dropped : 2 * full.n_reproj], r_red[: 2 * reduced.n_reproj], atol=0
    )


def test_keyframe_decision_rules():
    cfg = EstimatorConfig(parallax_threshold_px=10.0, count_floor=50)
    assert not keyframe_decision(0.0, 130, cfg)  # stationary, full tracks
    assert keyframe_decision(15.0, 130, cfg)  # parallax above threshold
    assert keyframe_decision(2.0, 30, cfg)  # starving tracker
    assert not keyframe_decision(2.0, 130, cfg)  # dynamic-only motion excluded upstream


def test_insufficient_constraints():
    est = SlidingWindowEstimator(CAM, EXTRINSIC, EstimatorConfig(min_features=8))
    registry = FeatureRegistry()
    est.add_frame(0, 0.0, registry)
    with pytest.raises(InsufficientConstraints):
        est.optimize(registry)
    est.add_frame(1, 0.1, registry, Preintegrator())
    with pytest.raises(InsufficientConstraints):
        est.optimize(registry)


def test_propagate_imu_rate_quiescent():
    est = SlidingWindowEstimator(CAM, EXTRINSIC, EstimatorConfig())
    registry = FeatureRegistry()
    est.add_frame(0, 0.0, registry)
    samples = [
        ImuSample(t, np.zeros(3), np.array([0.0, 0.0, 9.81]))
        for t in np.arange(0.005, 0.105, 0.005)
    ]
    stream = est.propagate_imu_rate(samples)
    assert len(stream) == len(samples)
    for _, pose, _vel in stream:
        assert np.linalg.norm(pose.t) < 1e-3
