import cv2
import numpy as np
import pytest

from dvio.errors import ImageSizeMismatch
from dvio.frontend import (
    CircularMask,
    DetectionGridConfig,
    build_mask,
    cell_index_of,
    depth_median,
    detect_new_features,
    grid_cells,
    klt_track,
    predict_features,
    to_grayscale,
)
from dvio.geometry import PinholeCamera, PoseSE3, quat_exp
from dvio.imu import ImuBias, ImuSample, PreintegratedDelta, integrate

CAM = PinholeCamera(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
CFG = DetectionGridConfig()


def textured_image(rng, w=640, h=480, cell=12):
    coarse = rng.integers(0, 255, size=(h // cell + 2, w // cell + 2), dtype=np.uint8)
    img = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    return img


def test_mask_empty_is_open():
    mask = build_mask((64, 48), np.empty((0, 2)), np.empty((0, 2)), CFG)
    assert not mask.blocked.any()


def test_mask_single_disk_exact_euclidean():
    cfg = DetectionGridConfig(mask_radius=15)
    mask = build_mask((100, 100), np.array([[50.0, 50.0]]), np.empty((0, 2)), cfg)
    ys, xs = np.mgrid[0:100, 0:100]
    expected = (xs - 50) ** 2 + (ys - 50) ** 2 <= 15**2
    np.testing.assert_array_equal(mask.blocked, expected)


def test_mask_union_of_two_disks():
    cfg = DetectionGridConfig(mask_radius=15)
    mask = build_mask((100, 100), np.array([[45.0, 50.0], [55.0, 50.0]]), np.empty((0, 2)), cfg)
    ys, xs = np.mgrid[0:100, 0:100]
    expected = ((xs - 45) ** 2 + (ys - 50) ** 2 <= 225) | ((xs - 55) ** 2 + (ys - 50) ** 2 <= 225)
    np.testing.assert_array_equal(mask.blocked, expected)
    assert mask.is_blocked(50, 50)  # midway point


def test_mask_clips_at_borders():
    cfg = DetectionGridConfig(mask_radius=15)
    mask = build_mask((100, 100), np.array([[2.0, 2.0]]), np.empty((0, 2)), cfg)
    assert mask.is_blocked(0, 0)
    assert not mask.is_blocked(99, 99)


def test_grid_cells_tile_image():
    cells = grid_cells(640, 480, CFG)
    assert len(cells) == CFG.rows * CFG.cols
    area = sum((x1 - x0) * (y1 - y0) for x0, y0, x1, y1 in cells)
    assert area == 640 * 480
    for x0, y0, x1, y1 in cells:
        idx = cell_index_of((x0 + x1) / 2, (y0 + y1) / 2, 640, 480, CFG)
        assert cells[idx] == (x0, y0, x1, y1)


def test_detect_saturated_runs_nothing():
    rng = np.random.default_rng(0)
    img = textured_image(rng)
    cfg = DetectionGridConfig(max_features=10)
    pts = rng.uniform(50, 400, size=(10, 2))
    mask = build_mask((640, 480), pts, np.empty((0, 2)), cfg)
    new, skips = detect_new_features(img, mask, pts, cfg, frozenset({3}))
    assert new == []
    assert skips == frozenset({3})  # untouched when no detection executes


def test_detect_fills_grid_with_spread_features():
    rng = np.random.default_rng(1)
    img = textured_image(rng)
    cfg = DetectionGridConfig(rows=7, cols=8, max_features=130, mask_radius=15, fast_threshold=10)
    mask = build_mask((640, 480), np.empty((0, 2)), np.empty((0, 2)), cfg)
    new, _ = detect_new_features(img, mask, np.empty((0, 2)), cfg)
    assert len(new) >= 0.9 * cfg.max_features
    pts = np.array(new)
    cells_hit = {cell_index_of(x, y, 640, 480, cfg) for x, y in new}
    assert len(cells_hit) >= 0.95 * cfg.rows * cfg.cols
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            assert np.hypot(*(pts[i] - pts[j])) >= cfg.mask_radius


def test_detect_deterministic_across_worker_counts():
    rng = np.random.default_rng(2)
    img = textured_image(rng)
    for workers in (1, 4, 8):
        cfg = DetectionGridConfig(fast_threshold=10, workers=workers)
        mask = build_mask((640, 480), np.empty((0, 2)), np.empty((0, 2)), cfg)
        new, skips = detect_new_features(img, mask, np.empty((0, 2)), cfg)
        if workers == 1:
            ref_new, ref_skips = new, skips
        else:
            assert new == ref_new
            assert skips == ref_skips


def test_skip_set_round_trip():
    rng = np.random.default_rng(3)
    img = textured_image(rng)
    cfg = DetectionGridConfig(rows=2, cols=2, max_features=40, fast_threshold=10)
    # fully mask the top-left cell: it yields nothing and enters the skip set
    mask = CircularMask(640, 480, cfg.mask_radius)
    mask.blocked[:240, :320] = True
    new1, skips1 = detect_new_features(img, mask, np.empty((0, 2)), cfg)
    assert 0 in skips1
    # next detection frame: cell 0 skipped, so it cannot re-enter the skip set
    mask2 = CircularMask(640, 480, cfg.mask_radius)
    mask2.blocked[:240, :320] = True
    new2, skips2 = detect_new_features(img, mask2, np.empty((0, 2)), cfg, skips1)
    assert 0 not in skips2
    # and the frame after that it is scanned (and masked) again
    mask3 = CircularMask(640, 480, cfg.mask_radius)
    mask3.blocked[:240, :320] = True
    _, skips3 = detect_new_features(img, mask3, np.empty((0, 2)), cfg, skips2)
    assert 0 in skips3


def test_klt_identity_images():
    rng = np.random.default_rng(4)
    img = textured_image(rng)
    pts = rng.uniform(60, 400, size=(40, 2)).astype(np.float32)
    matched, ok = klt_track(img, img, pts, pts, CFG)
    assert ok.all()
    assert np.max(np.linalg.norm(matched - pts, axis=1)) < 0.1


def test_klt_synthetic_shift():
    rng = np.random.default_rng(5)
    img = textured_image(rng)
    shifted = np.roll(img, 3, axis=1)  # 3 px to the right
    pts = rng.uniform(100, 380, size=(40, 2)).astype(np.float32)
    matched, ok = klt_track(img, shifted, pts, pts, CFG)
    good = matched[ok]
    ref = pts[ok] + np.array([3.0, 0.0])
    assert ok.mean() > 0.9
    assert np.max(np.linalg.norm(good - ref, axis=1)) < 0.3


def test_klt_textureless_fails():
    img = np.full((128, 128), 100, dtype=np.uint8)
    pts = np.array([[40.0, 40.0], [64.0, 64.0], [90.0, 90.0]], dtype=np.float32)
    _, ok = klt_track(img, img, pts, pts, CFG)
    assert not ok.any()


def test_klt_size_mismatch():
    a = np.zeros((32, 32), np.uint8)
    b = np.zeros((64, 64), np.uint8)
    with pytest.raises(ImageSizeMismatch):
        klt_track(a, b, np.zeros((1, 2), np.float32), np.zeros((1, 2), np.float32), CFG)


def identity_delta():
    return PreintegratedDelta.initial()


def yaw_delta(angle_rad):
    # body yaw about camera-y axis for an identity camera-body extrinsic
    rate = angle_rad / 0.05
    d = PreintegratedDelta.initial()
    s0 = ImuSample(0.0, np.array([0.0, rate, 0.0]), np.zeros(3))
    s1 = ImuSample(0.05, np.array([0.0, rate, 0.0]), np.zeros(3))
    return integrate(d, s0, s1)


def test_predict_identity_delta_keeps_pixels():
    pixels = np.array([[320.0, 240.0], [100.0, 50.0]])
    preds, ok = predict_features(
        pixels, np.zeros(2), identity_delta(), CAM, PoseSE3.identity()
    )
    np.testing.assert_allclose(preds, pixels, atol=1e-12)
    assert ok.all()


def test_predict_one_degree_yaw_shift():
    # camera pans by one degree: stationary points flow ~ fx*tan(1 deg)
    angle = np.deg2rad(1.0)
    pixels = np.array([[320.0, 240.0], [300.0, 200.0], [360.0, 280.0]])
    preds, ok = predict_features(
        pixels, np.zeros(3), yaw_delta(angle), CAM, PoseSE3.identity()
    )
    assert ok.all()
    expected_shift = 500.0 * np.tan(angle)  # ~8.73 px magnitude
    assert abs(preds[0, 0] - 320.0) == pytest.approx(expected_shift, abs=0.01)
    shifts = np.abs(preds[:, 0] - pixels[:, 0])
    assert np.all(np.abs(shifts - expected_shift) < 0.35)


def test_predict_translation_needs_depth():
    # camera moves 0.1 m along +x (body==camera): near point shifts, far ray barely
    delta = PreintegratedDelta.initial()
    pixels = np.array([[320.0, 240.0], [320.0, 240.0]])
    depths = np.array([2.0, 0.0])
    t_body = np.array([0.1, 0.0, 0.0])
    preds, ok = predict_features(pixels, depths, delta, CAM, PoseSE3.identity(), t_body)
    assert ok.all()
    assert preds[0, 0] == pytest.approx(320.0 - 500.0 * 0.1 / 2.0, abs=1e-9)
    assert preds[1, 0] == pytest.approx(320.0)  # rotation-only fallback


def test_predict_out_of_bounds_flagged():
    # a big pan sweeps an edge pixel out of the frame
    angle = np.deg2rad(45.0)
    pixels = np.array([[20.0, 240.0]])
    preds, ok = predict_features(pixels, np.zeros(1), yaw_delta(angle), CAM, PoseSE3.identity())
    assert not ok[0]


def test_grayscale_luma_weights():
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 0)
    rgb[0, 1] = (0, 255, 0)
    rgb[1, 0] = (0, 0, 255)
    gray = to_grayscale(rgb)
    assert gray[0, 0] == round(0.299 * 255)
    assert gray[0, 1] == round(0.587 * 255)
    assert gray[1, 0] == round(0.114 * 255)


def test_depth_median_window():
    depth = np.zeros((10, 10))
    depth[4:7, 4:7] = [[1.0, 2.0, 0.0], [3.0, 4.0, 5.0], [0.0, 6.0, 7.0]]
    assert depth_median(depth, 5, 5) == 4.0
    assert depth_median(depth, 0, 0) == 0.0
