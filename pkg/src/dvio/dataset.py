"""TUM-layout sequence ingestion.

A sequence directory holds rgb.txt / depth.txt (timestamp + relative path
per line), optional groundtruth.txt (timestamp tx ty tz qx qy qz qw),
optional imu.csv (timestamp, wx, wy, wz, ax, ay, az, header allowed) and an
optional detections.txt sidecar (`timestamp class x1 y1 x2 y2 score`; a
frame with no record means the detector produced nothing there).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import AssociationGap, MissingFile, NonMonotonicTimestamps
from .imu import ImuSample
from .metrics import ASSOCIATION_TOL, Trajectory, associate
from .semantic import DetectionBox

DEFAULT_DEPTH_SCALE = 5000.0  # units per meter (stock TUM convention)


@dataclass(frozen=True)
class FrameEntry:
    timestamp: float
    color_path: Path
    depth_path: Path | None


@dataclass
class SequenceManifest:
    root: Path
    frames: list[FrameEntry]
    imu: list[ImuSample] = field(default_factory=list)
    detections: dict[int, list[DetectionBox]] = field(default_factory=dict)  # frame idx -> boxes
    groundtruth: Trajectory | None = None
    depth_scale: float = DEFAULT_DEPTH_SCALE
    dropped_frames: int = 0

    @property
    def has_imu(self) -> bool:
        return bool(self.imu)

    def load_gray(self, index: int) -> np.ndarray:
        img = cv2.imread(str(self.frames[index].color_path), cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise MissingFile(str(self.frames[index].color_path))
        return img

    def load_depth(self, index: int) -> np.ndarray | None:
        entry = self.frames[index]
        if entry.depth_path is None:
            return None
        raw = cv2.imread(str(entry.depth_path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise MissingFile(str(entry.depth_path))
        return raw.astype(np.float64) / self.depth_scale


def _read_stamped_paths(path: Path) -> tuple[np.ndarray, list[str]]:
    if not path.exists():
        raise MissingFile(str(path))
    stamps, names = [], []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        t, name = line.split()[:2]
        stamps.append(float(t))
        names.append(name)
    ts = np.array(stamps)
    if np.any(np.diff(ts) <= 0):
        raise NonMonotonicTimestamps(str(path))
    return ts, names


def _read_imu_csv(path: Path) -> list[ImuSample]:
    samples = []
    last_t = -np.inf
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        try:
            vals = [float(x) for x in parts]
        except ValueError:
            continue  # header
        if len(vals) < 7:
            continue
        if vals[0] <= last_t:
            raise NonMonotonicTimestamps(str(path))
        last_t = vals[0]
        samples.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return samples


def load_sequence(
    root: str | Path,
    depth_scale: float = DEFAULT_DEPTH_SCALE,
    assoc_tol: float = ASSOCIATION_TOL,
    check_files: bool = True,
) -> SequenceManifest:
    """Parse and cross-associate a sequence directory.

    Color and depth streams pair by mutual nearest timestamp within the
    tolerance; color frames without a depth partner are dropped (counted in
    dropped_frames). If an IMU stream exists it must cover the frame span.
    """
    root = Path(root)
    color_ts, color_names = _read_stamped_paths(root / "rgb.txt")
    depth_ts, depth_names = _read_stamped_paths(root / "depth.txt")

    ic, idp = associate(color_ts, depth_ts, assoc_tol)
    matched = dict(zip(ic.tolist(), idp.tolist()))
    frames = []
    dropped = 0
    for i, (t, name) in enumerate(zip(color_ts, color_names)):
        j = matched.get(i)
        if j is None:
            dropped += 1
            continue
        frames.append(FrameEntry(float(t), root / name, root / depth_names[j]))
    if not frames:
        raise AssociationGap("no color/depth pairs inside tolerance")

    if check_files:
        for entry in frames:
            if not entry.color_path.exists():
                raise MissingFile(str(entry.color_path))
            if entry.depth_path is not None and not entry.depth_path.exists():
                raise MissingFile(str(entry.depth_path))

    imu: list[ImuSample] = []
    imu_path = root / "imu.csv"
    if imu_path.exists():
        imu = _read_imu_csv(imu_path)
        if imu and (
            imu[0].timestamp > frames[0].timestamp + 1e-6
            or imu[-1].timestamp < frames[-1].timestamp - 1e-6
        ):
            raise AssociationGap("imu stream does not cover the frame span")

    detections: dict[int, list[DetectionBox]] = {}
    det_path = root / "detections.txt"
    if det_path.exists():
        frame_ts = np.array([f.timestamp for f in frames])
        for line in det_path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            t, label = float(parts[0]), parts[1]
            x1, y1, x2, y2, score = (float(x) for x in parts[2:7])
            k = int(np.argmin(np.abs(frame_ts - t)))
            if abs(frame_ts[k] - t) > assoc_tol:
                continue
            detections.setdefault(k, []).append(
                DetectionBox(label, x1, y1, x2, y2, min(max(score, 0.0), 1.0), k)
            )

    groundtruth = None
    gt_path = root / "groundtruth.txt"
    if gt_path.exists():
        groundtruth = Trajectory.read_tum(gt_path)

    return SequenceManifest(
        root=root,
        frames=frames,
        imu=imu,
        detections=detections,
        groundtruth=groundtruth,
        depth_scale=depth_scale,
        dropped_frames=dropped,
    )
