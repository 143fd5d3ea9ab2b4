"""Dynamic feature recognition from detection boxes plus depth.

Box corners usually land on background, so the largest corner depth bounds
the background behind a detected object. A per-box depth threshold is placed
between the box-center depth and that background depth (or epsilon behind
the center when the object hugs the background); features measured closer
than the threshold belong to the object and are excluded from estimation.
Pixels outside every box carry a zero threshold, and a box with no usable
depth at all gets an infinite one: everything inside is treated as moving.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tracks import DynamicReason, FeatureObservation, FeatureTrack

DEFAULT_EPSILON = 1.0  # meters; person-scale object depth extent
DEFAULT_DYNAMIC_CLASSES = frozenset(
    {"person", "car", "bus", "truck", "bicycle", "motorbike", "dog", "cat"}
)


@dataclass(frozen=True)
class DetectionBox:
    """Axis-aligned detector output, pixel coordinates."""

    class_label: str
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0
    frame_index: int = -1

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError("box corners must form a rectangle")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError("score must lie in [0, 1]")

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2])

    @property
    def corners(self) -> np.ndarray:
        """(tl, tr, bl, br) rows."""
        return np.array(
            [
                [self.x1, self.y1],
                [self.x2, self.y1],
                [self.x1, self.y2],
                [self.x2, self.y2],
            ]
        )

    def shifted(self, velocity: np.ndarray) -> "DetectionBox":
        vx, vy = float(velocity[0]), float(velocity[1])
        return DetectionBox(
            self.class_label,
            self.x1 + vx,
            self.y1 + vy,
            self.x2 + vx,
            self.y2 + vy,
            self.score,
            self.frame_index,
        )

    def clamped(self, width: int, height: int) -> "DetectionBox":
        return DetectionBox(
            self.class_label,
            min(max(self.x1, 0.0), width - 1.0),
            min(max(self.y1, 0.0), height - 1.0),
            min(max(self.x2, 0.0), width - 1.0),
            min(max(self.y2, 0.0), height - 1.0),
            self.score,
            self.frame_index,
        )

    def iou(self, other: "DetectionBox") -> float:
        ix1, iy1 = max(self.x1, other.x1), max(self.y1, other.y1)
        ix2, iy2 = min(self.x2, other.x2), min(self.y2, other.y2)
        inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
        a = (self.x2 - self.x1) * (self.y2 - self.y1)
        b = (other.x2 - other.x1) * (other.y2 - other.y1)
        union = a + b - inter
        return inter / union if union > 0 else 0.0


class SemanticMask:
    """Per-pixel depth threshold map (meters; 0 = no moving object there)."""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.threshold = np.zeros((height, width), dtype=np.float64)

    def threshold_at(self, x: float, y: float) -> float:
        xi = min(max(int(round(x)), 0), self.width - 1)
        yi = min(max(int(round(y)), 0), self.height - 1)
        return float(self.threshold[yi, xi])


def _depth_at(depth, x: float, y: float) -> float:
    """Pixel depth from an (H,W) array or a callable sampler."""
    if callable(depth):
        return float(depth(x, y))
    h, w = depth.shape
    xi = min(max(int(round(x)), 0), w - 1)
    yi = min(max(int(round(y)), 0), h - 1)
    return float(depth[yi, xi])


def background_depth(box: DetectionBox, depth) -> float:
    """Largest of the four corner depths (dropouts read as 0)."""
    return max(_depth_at(depth, cx, cy) for cx, cy in box.corners)


def depth_threshold(d_max: float, d_center: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """Per-box threshold between object and background.

    Midway between center and background when the gap exceeds epsilon;
    epsilon behind the center when the object hugs the background; the
    background depth alone when the center has no reading; infinite when
    no reading is usable (conservative: the whole box is masked).
    The gap-equals-epsilon boundary takes the hugging branch.
    """
    if d_max < 0 or d_center < 0:
        raise ValueError("depths must be >= 0")
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if d_center > 0 and d_max - d_center > epsilon:
        return 0.5 * (d_max + d_center)
    if d_center > 0 and d_max - d_center <= epsilon:
        return d_center + epsilon
    if d_max > 0:
        return d_max
    return float("inf")


def build_semantic_mask(
    boxes: list[DetectionBox],
    depth,
    epsilon: float = DEFAULT_EPSILON,
    mask_whole_box: bool = False,
    image_size: tuple[int, int] | None = None,
) -> SemanticMask:
    """Threshold map over all boxes (detections plus compensated ones).

    depth: (H,W) array or a callable (x, y) -> meters; callables need
    image_size=(width, height). Overlapping boxes keep the larger threshold,
    the conservative choice. mask_whole_box ignores depth and floods each
    box with an infinite threshold (the blunt-rejection ablation).
    """
    if callable(depth):
        if image_size is None:
            raise ValueError("image_size required with a depth sampler")
        w, h = image_size
    else:
        h, w = depth.shape
    mask = SemanticMask(w, h)
    for box in boxes:
        b = box.clamped(w, h)
        if mask_whole_box:
            d_bar = float("inf")
        else:
            d_max = background_depth(b, depth)
            d_c = _depth_at(depth, b.center[0], b.center[1])
            d_bar = depth_threshold(d_max, d_c, epsilon)
        x0, y0 = int(round(b.x1)), int(round(b.y1))
        x1, y1 = int(round(b.x2)) + 1, int(round(b.y2)) + 1
        region = mask.threshold[y0:y1, x0:x1]
        np.maximum(region, d_bar, out=region)
    return mask


def classify_feature(
    obs: FeatureObservation, mask: SemanticMask, track: FeatureTrack
) -> bool:
    """True when the feature is dynamic at this frame.

    Dynamic when its depth reads closer than the local threshold, or when the
    track already carries a semantic verdict (historical flag). Verdicts feed
    the track so later frames inherit them; dynamic features stay tracked but
    are excluded from estimation.
    """
    if track.dynamic_reason is DynamicReason.SEMANTIC:
        track.mark_dynamic(DynamicReason.SEMANTIC)
        return True
    d_bar = mask.threshold_at(obs.pixel[0], obs.pixel[1])
    if d_bar > 0 and obs.depth < d_bar:
        track.mark_dynamic(DynamicReason.SEMANTIC)
        return True
    return False
