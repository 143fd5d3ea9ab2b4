"""Feature tracking front end.

Per frame: inertial rotation (plus translation when depth is known) predicts
each feature's new pixel, pyramidal LK refines it with a forward-backward
gate, circular masks around tracked and failed features keep detections
spread out, and deficient grid cells are re-seeded with FAST corners picked
by greedy non-maximum suppression. Barren cells sit out the next detection
round.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import cv2
import numpy as np

from . import fast
from .errors import ImageSizeMismatch
from .geometry import PinholeCamera, PoseSE3
from .imu import PreintegratedDelta
from .tracks import FeatureObservation, FeatureRegistry, TrackStatus


@dataclass(frozen=True)
class DetectionGridConfig:
    rows: int = 7
    cols: int = 8
    padding: int = 3
    max_features: int = 130
    mask_radius: int = 15
    fast_threshold: int = 20
    fb_error_threshold: float = 1.0
    pyramid_levels: int = 3  # without inertial prediction
    pyramid_levels_predicted: int = 1  # with inertial prediction
    klt_window: int = 21
    min_eig_threshold: float = 1e-3
    workers: int = 1

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one cell")
        if self.padding < 3:
            raise ValueError("padding must cover the corner ring (>= 3)")
        if self.max_features <= 0:
            raise ValueError("max_features must be positive")

    @property
    def cell_quota(self) -> int:
        return math.ceil(self.max_features / (self.rows * self.cols))


class CircularMask:
    """Per-pixel blocked map built from disks around feature locations."""

    def __init__(self, width: int, height: int, radius: int):
        self.width = width
        self.height = height
        self.radius = radius
        self.blocked = np.zeros((height, width), dtype=bool)
        r = int(radius)
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        self._stamp = xx * xx + yy * yy <= radius * radius

    def block_disk(self, x: float, y: float) -> None:
        r = self.radius
        cx, cy = int(round(x)), int(round(y))
        x0, x1 = max(cx - r, 0), min(cx + r + 1, self.width)
        y0, y1 = max(cy - r, 0), min(cy + r + 1, self.height)
        if x0 >= x1 or y0 >= y1:
            return
        sx0, sy0 = x0 - (cx - r), y0 - (cy - r)
        self.blocked[y0:y1, x0:x1] |= self._stamp[sy0 : sy0 + (y1 - y0), sx0 : sx0 + (x1 - x0)]

    def is_blocked(self, x: float, y: float) -> bool:
        xi, yi = int(round(x)), int(round(y))
        if not (0 <= xi < self.width and 0 <= yi < self.height):
            return True
        return bool(self.blocked[yi, xi])


def build_mask(
    image_size: tuple[int, int],
    stable_pixels: np.ndarray,
    unstable_pixels: np.ndarray,
    cfg: DetectionGridConfig,
) -> CircularMask:
    """Disks around every tracked feature and every failure location."""
    width, height = image_size
    mask = CircularMask(width, height, cfg.mask_radius)
    for px in np.atleast_2d(np.asarray(stable_pixels, dtype=float)).reshape(-1, 2):
        mask.block_disk(px[0], px[1])
    for px in np.atleast_2d(np.asarray(unstable_pixels, dtype=float)).reshape(-1, 2):
        mask.block_disk(px[0], px[1])
    return mask


def grid_cells(width: int, height: int, cfg: DetectionGridConfig) -> list[tuple[int, int, int, int]]:
    """Cell rectangles tiling the full image (row-major order)."""
    xs = np.linspace(0, width, cfg.cols + 1).astype(int)
    ys = np.linspace(0, height, cfg.rows + 1).astype(int)
    return [
        (xs[c], ys[r], xs[c + 1], ys[r + 1])
        for r in range(cfg.rows)
        for c in range(cfg.cols)
    ]


def cell_index_of(x: float, y: float, width: int, height: int, cfg: DetectionGridConfig) -> int:
    col = min(int(x * cfg.cols / width), cfg.cols - 1)
    row = min(int(y * cfg.rows / height), cfg.rows - 1)
    return row * cfg.cols + col


def predict_features(
    pixels: np.ndarray,
    depths: np.ndarray,
    delta: PreintegratedDelta,
    cam: PinholeCamera,
    extrinsic: PoseSE3,
    translation: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Predict current-frame pixels from the inter-frame inertial rotation.

    Rays rotate through the body rotation mapped into the camera frame;
    features with known depth additionally see the body translation (start
    body frame, supplied by the caller from the propagated state). Returns
    (predictions (N,2), in_bounds (N,)).
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float)).reshape(-1, 2)
    depths = np.asarray(depths, dtype=float).reshape(-1)
    R_cb = extrinsic.rotation_matrix
    t_cb = extrinsic.t
    R_delta = delta.rotation_matrix  # maps end-frame body coords into start-frame body
    t_delta = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)

    rays = cam.ray(pixels)  # (N,3), z=1 in previous camera frame
    preds = np.array(pixels, copy=True)
    ok = np.ones(len(pixels), dtype=bool)
    for k in range(len(pixels)):
        if depths[k] > 0:
            p_ci = rays[k] * depths[k]
            p_bi = R_cb @ p_ci + t_cb
            p_bj = R_delta.T @ (p_bi - t_delta)
            p_cj = R_cb.T @ (p_bj - t_cb)
        else:
            p_cj = R_cb.T @ (R_delta.T @ (R_cb @ rays[k]))
        if p_cj[2] <= 1e-9:
            ok[k] = False
            continue
        u = cam.fx * p_cj[0] / p_cj[2] + cam.cx
        v = cam.fy * p_cj[1] / p_cj[2] + cam.cy
        preds[k] = (u, v)
        if not (0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1):
            ok[k] = False
    return preds, ok


def klt_track(
    prev: np.ndarray,
    curr: np.ndarray,
    points: np.ndarray,
    predictions: np.ndarray,
    cfg: DetectionGridConfig,
    pyramid_levels: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Pyramidal LK from the predicted positions with a forward-backward gate.

    Returns (matched (N,2), ok (N,)). Failures: no convergence, out of
    bounds, or forward-backward error above the configured threshold.
    """
    if prev.shape != curr.shape:
        raise ImageSizeMismatch(f"{prev.shape} vs {curr.shape}")
    points = np.atleast_2d(np.asarray(points, dtype=np.float32)).reshape(-1, 2)
    if points.shape[0] == 0:
        return np.empty((0, 2), dtype=np.float32), np.empty(0, dtype=bool)
    predictions = np.asarray(predictions, dtype=np.float32).reshape(-1, 2).copy()

    levels = cfg.pyramid_levels if pyramid_levels is None else pyramid_levels
    lk = dict(
        winSize=(cfg.klt_window, cfg.klt_window),
        maxLevel=max(levels - 1, 0),
        criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 30, 0.01),
        minEigThreshold=cfg.min_eig_threshold,
    )
    fwd, st_f, _ = cv2.calcOpticalFlowPyrLK(
        prev, curr, points, predictions, flags=cv2.OPTFLOW_USE_INITIAL_FLOW, **lk
    )
    back, st_b, _ = cv2.calcOpticalFlowPyrLK(curr, prev, fwd, None, **lk)

    fb_err = np.linalg.norm(points - back, axis=1)
    h, w = curr.shape
    in_bounds = (
        (fwd[:, 0] >= 0) & (fwd[:, 0] <= w - 1) & (fwd[:, 1] >= 0) & (fwd[:, 1] <= h - 1)
    )
    ok = (
        (st_f.ravel() == 1)
        & (st_b.ravel() == 1)
        & in_bounds
        & (fb_err <= cfg.fb_error_threshold)
    )
    return fwd, ok


def detect_new_features(
    image: np.ndarray,
    mask: CircularMask,
    counted_pixels: np.ndarray,
    cfg: DetectionGridConfig,
    skip_cells: frozenset[int] = frozenset(),
) -> tuple[list[tuple[float, float]], frozenset[int]]:
    """Fill deficient grid cells with mask-respecting FAST picks.

    counted_pixels: pixel locations of features that count toward the budget.
    Returns (new pixel list, cells to skip at the next detection round).
    Deterministic for a fixed (image, mask, config) whatever the worker count.
    """
    h, w = image.shape
    counted = np.atleast_2d(np.asarray(counted_pixels, dtype=float)).reshape(-1, 2)
    needed = cfg.max_features - len(counted)
    if needed <= 0:
        return [], skip_cells

    cells = grid_cells(w, h, cfg)
    per_cell = np.zeros(len(cells), dtype=int)
    for px in counted:
        per_cell[cell_index_of(px[0], px[1], w, h, cfg)] += 1
    deficient = [i for i, n in enumerate(per_cell) if n < cfg.cell_quota]
    scan = [i for i in deficient if i not in skip_cells]
    if not scan:
        return [], frozenset()

    quota = math.ceil(needed / len(deficient))

    def run_cell(i: int) -> np.ndarray:
        return fast.detect_cell(image, cells[i], cfg.fast_threshold, mask.blocked)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run_cell, scan))
    else:
        results = [run_cell(i) for i in scan]

    # merge round-robin across cells (one pick per cell per pass) so the
    # budget spreads over the whole grid; NMS runs against the shared mask,
    # which grows with every pick
    picked: list[tuple[float, float]] = []
    barren = [cell_idx for cell_idx, cands in zip(scan, results) if cands.shape[0] == 0]
    cursors = {cell_idx: 0 for cell_idx in scan}
    taken = {cell_idx: 0 for cell_idx in scan}
    remaining = needed
    for _ in range(quota):
        if remaining <= 0:
            break
        progress = False
        for cell_idx, cands in zip(scan, results):
            if remaining <= 0:
                break
            if taken[cell_idx] >= quota:
                continue
            k = cursors[cell_idx]
            while k < cands.shape[0]:
                x, y, _score = cands[k]
                k += 1
                if not mask.is_blocked(x, y):
                    picked.append((float(x), float(y)))
                    mask.block_disk(x, y)
                    taken[cell_idx] += 1
                    remaining -= 1
                    progress = True
                    break
            cursors[cell_idx] = k
        if not progress:
            break
    return picked, frozenset(barren)


def depth_median(depth_image: np.ndarray, x: float, y: float, window: int = 3) -> float:
    """Median of available depths in a window around the pixel; 0 if none."""
    h, w = depth_image.shape
    xi, yi = int(round(x)), int(round(y))
    r = window // 2
    patch = depth_image[max(yi - r, 0) : yi + r + 1, max(xi - r, 0) : xi + r + 1]
    vals = patch[patch > 0]
    if vals.size == 0:
        return 0.0
    return float(np.median(vals))


@dataclass
class TrackingOutput:
    """Per-frame product of the tracking stage."""

    frame_index: int
    timestamp: float
    observations: list[FeatureObservation]
    failed_pixels: np.ndarray
    new_ids: list[int] = field(default_factory=list)
    delta: PreintegratedDelta | None = None


def to_grayscale(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image if image.dtype == np.uint8 else image.astype(np.uint8)
    luma = image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114
    return np.clip(luma + 0.5, 0, 255).astype(np.uint8)


class ImageFrontend:
    """KLT + grid-FAST tracker over real images."""

    def __init__(
        self,
        cam: PinholeCamera,
        cfg: DetectionGridConfig,
        extrinsic: PoseSE3,
        use_prediction: bool = True,
        use_mask: bool = True,
    ):
        self.cam = cam
        self.cfg = cfg
        self.extrinsic = extrinsic
        self.use_prediction = use_prediction
        self.use_mask = use_mask
        self.registry = FeatureRegistry()
        self.skip_cells: frozenset[int] = frozenset()
        self.prev_gray: np.ndarray | None = None
        self.prev_frame_index: int | None = None
        self.last_timings: dict[str, float] = {}

    def process(
        self,
        frame_index: int,
        timestamp: float,
        image: np.ndarray,
        depth_image: np.ndarray | None = None,
        delta: PreintegratedDelta | None = None,
        translation: np.ndarray | None = None,
    ) -> TrackingOutput:
        gray = to_grayscale(image)
        observations: list[FeatureObservation] = []
        failed_pixels: list[np.ndarray] = []

        t0 = time.perf_counter()
        active = (
            self.registry.active_in(self.prev_frame_index)
            if self.prev_frame_index is not None
            else []
        )
        if active and self.prev_gray is not None:
            pixels = np.array([t.last.pixel for t in active])
            depths = np.array([t.last.depth for t in active])
            if self.use_prediction and delta is not None:
                preds, _ok = predict_features(
                    pixels, depths, delta, self.cam, self.extrinsic, translation
                )
                levels = self.cfg.pyramid_levels_predicted
            else:
                preds = pixels.copy()
                levels = self.cfg.pyramid_levels
            matched, ok = klt_track(self.prev_gray, gray, pixels, preds, self.cfg, levels)
            for track, px, good in zip(active, matched, ok):
                if good:
                    d = (
                        depth_median(depth_image, px[0], px[1])
                        if depth_image is not None
                        else 0.0
                    )
                    obs = FeatureObservation(track.feature_id, frame_index, px, d)
                    self.registry.ingest(obs)
                    observations.append(obs)
                else:
                    self.registry.mark_failed(track.feature_id)
                    failed_pixels.append(np.asarray(px, dtype=float))
        track_time = time.perf_counter() - t0

        t0 = time.perf_counter()
        tracked_pixels = (
            np.array([o.pixel for o in observations]) if observations else np.empty((0, 2))
        )
        failed = np.array(failed_pixels) if failed_pixels else np.empty((0, 2))
        if self.use_mask:
            mask = build_mask((self.cam.width, self.cam.height), tracked_pixels, failed, self.cfg)
        else:
            mask = CircularMask(self.cam.width, self.cam.height, self.cfg.mask_radius)

        new_pixels, self.skip_cells = detect_new_features(
            gray, mask, tracked_pixels, self.cfg, self.skip_cells
        )
        new_ids = []
        for x, y in new_pixels:
            fid = self.registry.new_id()
            d = depth_median(depth_image, x, y) if depth_image is not None else 0.0
            obs = FeatureObservation(fid, frame_index, np.array([x, y]), d)
            self.registry.ingest(obs)
            observations.append(obs)
            new_ids.append(fid)
        detect_time = time.perf_counter() - t0

        self.registry.drop_unstable()
        self.registry.prune_before(frame_index - 2)
        self.prev_gray = gray
        self.prev_frame_index = frame_index
        self.last_timings = {"feature_tracking": track_time, "feature_detection": detect_time}
        return TrackingOutput(frame_index, timestamp, observations, failed, new_ids, delta)
