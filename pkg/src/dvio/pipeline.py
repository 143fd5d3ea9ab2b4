"""Three-stage pipeline: tracking, detection provider, state optimization.

The tracking stage turns frames (real images through LK + grid FAST, or
simulator bundles through the oracle provider) into per-frame feature
observations plus the inter-frame inertial span. The detection provider
forwards per-frame boxes, optionally delayed to emulate an accelerator. The
optimization stage joins both by timestamp, compensates missed detections,
classifies dynamic features, runs the consistency check, and optimizes the
sliding window. A sync mode collapses everything onto one thread and is
bit-reproducible; pipelined mode matches it whenever the detection join
never times out.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import consistency
from .compensation import ObjectRegistry
from .config import PipelineConfig
from .errors import InsufficientConstraints
from .estimator import EstimatorConfig, SlidingWindowEstimator
from .frontend import ImageFrontend, TrackingOutput
from .geometry import PinholeCamera, PoseSE3, compose
from .imu import ImuBias, ImuSample, Preintegrator, estimate_static_init, slice_stream
from .metrics import EvalResult, Trajectory, evaluate
from .semantic import DetectionBox, build_semantic_mask, classify_feature
from .simulator import FrameBundle, OracleFrontend, SimulatedSequence
from .tracks import FeatureRegistry


@dataclass
class FrameInput:
    frame_index: int
    timestamp: float
    gray: np.ndarray | None = None
    depth_image: np.ndarray | None = None
    bundle: FrameBundle | None = None
    detections: list[DetectionBox] = field(default_factory=list)


class SimulatedSource:
    """Feeds simulator output; abstract observations or rendered images."""

    def __init__(self, sequence: SimulatedSequence, use_images: bool = False):
        self.sequence = sequence
        self.use_images = use_images
        self.camera = sequence.spec.camera
        self.extrinsic = sequence.spec.extrinsic

    @property
    def imu(self) -> list[ImuSample]:
        return self.sequence.imu

    def groundtruth(self) -> Trajectory:
        return Trajectory(
            self.sequence.true_timestamps,
            self.sequence.true_positions,
            self.sequence.true_quaternions,
        )

    def frames(self):
        from .simulator import render_image

        for bundle in self.sequence.frames:
            if self.use_images:
                yield FrameInput(
                    frame_index=bundle.frame_index,
                    timestamp=bundle.timestamp,
                    gray=render_image(self.sequence, bundle),
                    depth_image=bundle.depth_view.materialize(),
                    bundle=bundle,
                    detections=list(bundle.detections),
                )
            else:
                yield FrameInput(
                    frame_index=bundle.frame_index,
                    timestamp=bundle.timestamp,
                    bundle=bundle,
                    detections=list(bundle.detections),
                )


class DatasetSource:
    """Feeds a TUM-layout manifest through the image front end."""

    def __init__(self, manifest, camera: PinholeCamera, extrinsic: PoseSE3):
        self.manifest = manifest
        self.camera = camera
        self.extrinsic = extrinsic

    @property
    def imu(self) -> list[ImuSample]:
        return self.manifest.imu

    def groundtruth(self) -> Trajectory | None:
        return self.manifest.groundtruth

    def frames(self):
        for i, entry in enumerate(self.manifest.frames):
            yield FrameInput(
                frame_index=i,
                timestamp=entry.timestamp,
                gray=self.manifest.load_gray(i),
                depth_image=self.manifest.load_depth(i),
                detections=list(self.manifest.detections.get(i, [])),
            )


class _Timing:
    def __init__(self):
        self.samples: dict[str, list[float]] = {}

    def add(self, name: str, seconds: float) -> None:
        self.samples.setdefault(name, []).append(seconds)

    def report(self) -> "TimingReport":
        stats = {}
        for name, vals in self.samples.items():
            arr = np.array(vals) * 1000.0  # milliseconds
            stats[name] = {
                "mean_ms": float(arr.mean()),
                "p50_ms": float(np.percentile(arr, 50)),
                "p95_ms": float(np.percentile(arr, 95)),
                "count": int(arr.size),
            }
        return TimingReport(stats)


@dataclass
class TimingReport:
    stats: dict[str, dict]

    def to_dict(self) -> dict:
        return self.stats

    def mean_ms(self, name: str) -> float:
        return self.stats.get(name, {}).get("mean_ms", 0.0)


@dataclass
class RunResult:
    trajectory: Trajectory
    eval_result: EvalResult | None
    timing: TimingReport
    diagnostics: dict


class Pipeline:
    """State shared across stages for one run."""

    def __init__(self, camera: PinholeCamera, extrinsic: PoseSE3, config: PipelineConfig):
        self.camera = camera
        self.extrinsic = extrinsic
        self.config = config
        vo = config.pipeline.vo_mode
        est_cfg: EstimatorConfig = config.estimator
        if est_cfg.vo_mode != vo:
            import dataclasses

            est_cfg = dataclasses.replace(est_cfg, vo_mode=vo)
        self.est_cfg = est_cfg
        self.registry = FeatureRegistry()  # optimization-side authoritative tracks
        self.objects = ObjectRegistry(
            (camera.width, camera.height),
            miss_limit=config.compensation.miss_limit,
            iou_threshold=config.compensation.iou_threshold,
        )
        self.gravity = None
        self.initial_bias = ImuBias()
        self.estimator: SlidingWindowEstimator | None = None
        self.image_frontend: ImageFrontend | None = None
        self.oracle_frontend: OracleFrontend | None = None
        self.timing = _Timing()
        self.poses: list[tuple[float, PoseSE3]] = []
        self.prev_frame_time: float | None = None
        self.prev_obs_pixels: dict[int, np.ndarray] = {}
        self.diagnostics = {"detection_timeouts": 0, "keyframes": 0, "frames": 0,
                            "optimization_skips": 0}

    # -- setup --

    def prepare(self, imu_samples: list[ImuSample]) -> None:
        vo = self.config.pipeline.vo_mode
        if not vo and imu_samples:
            gravity, bias = estimate_static_init(
                imu_samples, self.config.imu.static_init_duration
            )
            self.gravity = gravity
            self.initial_bias = bias
        self.estimator = SlidingWindowEstimator(
            self.camera, self.extrinsic, self.est_cfg, self.gravity, self.initial_bias
        )
        self._imu = imu_samples

    # -- tracking stage --

    def track_frame(self, fi: FrameInput) -> tuple[TrackingOutput, Preintegrator | None]:
        t_start = time.perf_counter()
        vo = self.config.pipeline.vo_mode
        pre: Preintegrator | None = None
        if not vo and self._imu and self.prev_frame_time is not None:
            pre = Preintegrator(
                bias=self.initial_bias,
                noise=self.config.imu.noise_model(),
                max_dt=self.config.imu.max_dt,
            )
            for s in slice_stream(self._imu, self.prev_frame_time, fi.timestamp):
                pre.add(s)

        if fi.gray is not None:
            if self.image_frontend is None:
                self.image_frontend = ImageFrontend(
                    self.camera,
                    self.config.frontend,
                    self.extrinsic,
                    use_prediction=not vo,
                    use_mask=not self.config.ablation.disable_circular_mask,
                )
            out = self.image_frontend.process(
                fi.frame_index,
                fi.timestamp,
                fi.gray,
                fi.depth_image,
                pre.delta if pre is not None else None,
            )
            for name, dt in self.image_frontend.last_timings.items():
                self.timing.add(name, dt)
        else:
            if self.oracle_frontend is None:
                sep = 0.0 if self.config.ablation.disable_circular_mask else float(
                    self.config.frontend.mask_radius
                )
                self.oracle_frontend = OracleFrontend(
                    max_features=self.config.frontend.max_features, min_separation_px=sep
                )
            t0 = time.perf_counter()
            out = self.oracle_frontend.process(fi.bundle)
            self.timing.add("feature_tracking", time.perf_counter() - t0)
        self.prev_frame_time = fi.timestamp
        self.timing.add("tracking_stage", time.perf_counter() - t_start)
        return out, pre

    # -- optimization stage --

    def optimize_frame(
        self,
        out: TrackingOutput,
        pre: Preintegrator | None,
        boxes: list[DetectionBox],
        depth_source,
        timed_out: bool = False,
    ) -> PoseSE3:
        t_stage = time.perf_counter()
        cfg = self.config
        est = self.estimator

        for obs in out.observations:
            self.registry.ingest(obs)
        est.add_frame(out.frame_index, out.timestamp, self.registry, pre)

        # dynamic feature recognition: detections + compensated boxes + depth
        t0 = time.perf_counter()
        if cfg.ablation.disable_detection or timed_out:
            real_boxes = []
        else:
            allowed = set(cfg.semantic.dynamic_classes)
            real_boxes = [b for b in boxes if b.class_label in allowed]
        if not cfg.ablation.disable_detection:
            self.objects.associate_and_update(real_boxes, out.frame_index)
            compensated = self.objects.predict_missed(out.frame_index)
            all_boxes = real_boxes + compensated
            if all_boxes and depth_source is not None:
                mask = build_semantic_mask(
                    all_boxes,
                    depth_source,
                    epsilon=cfg.semantic.epsilon,
                    mask_whole_box=cfg.ablation.disable_seg_like_mask,
                    image_size=(self.camera.width, self.camera.height),
                )
                for track in self.registry.active_in(out.frame_index):
                    classify_feature(track.last, mask, track)

        # moving consistency check on the predicted newest pose; held off
        # until the window has converged once so bootstrap predictions
        # cannot flag the whole scene
        if (
            not cfg.ablation.disable_mcc
            and len(est.frames) >= 2
            and est.last_optimize_info is not None
        ):
            body_poses = est.window_poses()
            landmarks = self._feature_landmarks(body_poses)
            candidates = [
                t
                for t in self.registry.tracks.values()
                if t.track_length >= 2 and t.last.frame_index == out.frame_index
            ]
            consistency.check_and_recycle(
                candidates,
                body_poses,
                self.camera,
                self.extrinsic,
                threshold_px=cfg.mcc.threshold_px,
                recycle_min_obs=cfg.mcc.recycle_min_obs,
                landmarks_world=landmarks,
            )
        self.timing.add("dynamic_recognition", time.perf_counter() - t0)

        t0 = time.perf_counter()
        try:
            est.optimize(self.registry)
        except InsufficientConstraints:
            self.diagnostics["optimization_skips"] += 1
        self.timing.add("state_optimization", time.perf_counter() - t0)

        parallax, tracked = self._parallax_and_count(out.frame_index)
        is_kf = est.apply_keyframe_and_slide(parallax, tracked, self.registry)
        if is_kf:
            self.diagnostics["keyframes"] += 1
        self.diagnostics["frames"] += 1

        pose = est.latest.pose
        self.poses.append((out.timestamp, pose))
        self.prev_obs_pixels = {
            o.feature_id: o.pixel for o in out.observations
        }
        self.timing.add("optimization_stage", time.perf_counter() - t_stage)
        return pose

    def _feature_landmarks(self, body_poses) -> dict[int, np.ndarray]:
        """World points for window features whose observations lack depth
        (the consistency check falls back to these)."""
        est = self.estimator
        landmarks = {}
        cache: dict[int, PoseSE3] = {}
        for fid, feat in est.features.items():
            if feat.anchor_frame not in body_poses:
                continue
            track = self.registry.get(fid)
            if track is None:
                continue
            if all(o.depth > 0 for o in track.observations[1:]):
                continue  # every co-observation can use its own depth
            anchor_obs = track.observation_in(feat.anchor_frame)
            if anchor_obs is None or feat.inv_depth <= 1e-9:
                continue
            T_wc = cache.get(feat.anchor_frame)
            if T_wc is None:
                T_wc = compose(body_poses[feat.anchor_frame], self.extrinsic)
                cache[feat.anchor_frame] = T_wc
            landmarks[fid] = T_wc.apply(self.camera.ray(anchor_obs.pixel) / feat.inv_depth)
        return landmarks

    def _parallax_and_count(self, frame_index: int) -> tuple[float, int]:
        displacements = []
        tracked = 0
        for track in self.registry.active_in(frame_index):
            if not track.usable_for_estimation:
                continue
            tracked += 1
            prev = self.prev_obs_pixels.get(track.feature_id)
            if prev is not None:
                displacements.append(float(np.linalg.norm(track.last.pixel - prev)))
        parallax = float(np.mean(displacements)) if displacements else 0.0
        return parallax, tracked

    @staticmethod
    def depth_source_for(fi: FrameInput):
        if fi.depth_image is not None:
            return fi.depth_image
        if fi.bundle is not None:
            return fi.bundle.depth_view.sample
        return None


def run(source, config: PipelineConfig | None = None) -> RunResult:
    """Execute the pipeline over a source; returns trajectory + reports."""
    config = config or PipelineConfig()
    pipe = Pipeline(source.camera, source.extrinsic, config)
    pipe.prepare(source.imu)

    if config.pipeline.sync:
        for fi in source.frames():
            out, pre = pipe.track_frame(fi)
            t0 = time.perf_counter()
            boxes = fi.detections
            pipe.timing.add("detection_provider", time.perf_counter() - t0)
            pipe.optimize_frame(out, pre, boxes, pipe.depth_source_for(fi))
    else:
        _run_pipelined(pipe, source, config)

    trajectory = Trajectory.from_poses(pipe.poses)
    gt = source.groundtruth()
    eval_result = None
    if gt is not None and len(trajectory) >= 3:
        try:
            eval_result = evaluate(trajectory, gt, mode="se3")
        except Exception:
            eval_result = None
    return RunResult(trajectory, eval_result, pipe.timing.report(), dict(pipe.diagnostics))


def _run_pipelined(pipe: Pipeline, source, config: PipelineConfig) -> None:
    q_frames: queue.Queue = queue.Queue(maxsize=config.pipeline.queue_size)
    q_track: queue.Queue = queue.Queue(maxsize=config.pipeline.queue_size)
    q_det: queue.Queue = queue.Queue()
    latency = config.pipeline.detection_latency_ms / 1000.0
    timeout = config.pipeline.join_timeout_ms / 1000.0
    det_in: queue.Queue = queue.Queue()

    def tracker():
        while True:
            fi = q_frames.get()
            if fi is None:
                q_track.put(None)
                return
            out, pre = pipe.track_frame(fi)
            q_track.put((fi, out, pre))

    def detector():
        # reads shared inputs by frame index pushed from the tracker side
        while True:
            item = det_in.get()
            if item is None:
                return
            idx, boxes = item
            t0 = time.perf_counter()
            if latency > 0:
                time.sleep(latency)
            pipe.timing.add("detection_provider", time.perf_counter() - t0)
            q_det.put((idx, boxes))

    def feeder_with_det():
        for fi in source.frames():
            det_in.put((fi.frame_index, list(fi.detections)))
            q_frames.put(fi)
        det_in.put(None)
        q_frames.put(None)

    threads = [
        threading.Thread(target=feeder_with_det, daemon=True),
        threading.Thread(target=tracker, daemon=True),
        threading.Thread(target=detector, daemon=True),
    ]
    for t in threads:
        t.start()

    det_ready: dict[int, list] = {}
    while True:
        packet = q_track.get()
        if packet is None:
            break
        fi, out, pre = packet
        timed_out = False
        boxes: list[DetectionBox] = []
        deadline = time.monotonic() + timeout
        while True:
            if fi.frame_index in det_ready:
                boxes = det_ready.pop(fi.frame_index)
                break
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                timed_out = True
                pipe.diagnostics["detection_timeouts"] += 1
                break
            try:
                idx, b = q_det.get(timeout=remaining)
            except queue.Empty:
                continue
            if idx >= fi.frame_index:
                det_ready[idx] = b
        pipe.optimize_frame(out, pre, boxes, pipe.depth_source_for(fi), timed_out)
    for t in threads:
        t.join(timeout=5.0)


def run_ablation_suite(make_source, config: PipelineConfig | None = None) -> dict:
    """Five-variant comparison: default plus each module knocked out."""
    config = config or PipelineConfig()
    variants = {
        "default": {},
        "wo_circular_mask": {"disable_circular_mask": True},
        "wo_object_detection": {"disable_detection": True},
        "wo_seg_like_mask": {"disable_seg_like_mask": True},
        "wo_mcc": {"disable_mcc": True},
    }
    rows = {}
    for name, flags in variants.items():
        result = run(make_source(), config.with_ablation(**flags))
        ev = result.eval_result
        rows[name] = {
            "ate_rmse": ev.ate_rmse if ev else float("nan"),
            "t_rpe": ev.t_rpe_rmse if ev else float("nan"),
            "r_rpe": ev.r_rpe_rmse if ev else float("nan"),
            "correct_rate": ev.correct_rate if ev else 0.0,
            "frames": result.diagnostics["frames"],
        }
    return rows
