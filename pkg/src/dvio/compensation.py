"""Bounding-box prediction through detector dropouts.

Each tracked object keeps a smoothed pixel velocity: every new detection
measures the center displacement since the previous detection and averages
it into the running estimate, so older motion decays geometrically. While
the detector stays silent the box coasts on that velocity, one step per
camera frame, until a miss budget runs out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .semantic import DetectionBox

DEFAULT_MISS_LIMIT = 5
DEFAULT_IOU_MATCH = 0.3


def smoothed_velocity(v_measured: np.ndarray, v_hat_prev: np.ndarray) -> np.ndarray:
    """Running average giving older frames geometrically decaying weight."""
    return 0.5 * (np.asarray(v_measured, float) + np.asarray(v_hat_prev, float))


@dataclass
class TrackedObject:
    object_id: int
    class_label: str
    box: DetectionBox
    velocity_smoothed: np.ndarray = field(default_factory=lambda: np.zeros(2))
    last_detected_frame: int = -1
    last_detected_center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    missed_count: int = 0
    updates: int = 0  # detections seen so far

    @property
    def center(self) -> np.ndarray:
        return self.box.center


class ObjectRegistry:
    """Tracked dynamic objects with miss compensation.

    Association is greedy highest-IoU within the same class against each
    object's velocity-predicted box. Removed ids are never reused.
    """

    def __init__(
        self,
        image_size: tuple[int, int],
        miss_limit: int = DEFAULT_MISS_LIMIT,
        iou_threshold: float = DEFAULT_IOU_MATCH,
    ):
        self.width, self.height = image_size
        self.miss_limit = miss_limit
        self.iou_threshold = iou_threshold
        self.objects: dict[int, TrackedObject] = {}
        self._next_id = 0

    def associate_and_update(self, detections: list[DetectionBox], frame_index: int) -> None:
        """Match detections to objects; update velocities; spawn the rest."""
        candidates = []
        for oid, obj in self.objects.items():
            predicted = obj.box.shifted(obj.velocity_smoothed).clamped(self.width, self.height)
            for j, det in enumerate(detections):
                if det.class_label != obj.class_label:
                    continue
                iou = predicted.iou(det)
                if iou >= self.iou_threshold:
                    candidates.append((iou, oid, j))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

        used_objects: set[int] = set()
        used_detections: set[int] = set()
        for iou, oid, j in candidates:
            if oid in used_objects or j in used_detections:
                continue
            used_objects.add(oid)
            used_detections.add(j)
            obj = self.objects[oid]
            det = detections[j].clamped(self.width, self.height)
            # center displacement between detected frames, in pixels/frame
            gap = max(frame_index - obj.last_detected_frame, 1)
            v = (det.center - obj.last_detected_center) / gap
            if obj.updates == 0:
                # first measured velocity seeds the average
                obj.velocity_smoothed = v.astype(float)
            else:
                obj.velocity_smoothed = smoothed_velocity(v, obj.velocity_smoothed)
            obj.box = det
            obj.last_detected_frame = frame_index
            obj.last_detected_center = det.center
            obj.missed_count = 0
            obj.updates += 1

        for j, det in enumerate(detections):
            if j in used_detections:
                continue
            oid = self._next_id
            self._next_id += 1
            clamped = det.clamped(self.width, self.height)
            self.objects[oid] = TrackedObject(
                object_id=oid,
                class_label=det.class_label,
                box=clamped,
                last_detected_frame=frame_index,
                last_detected_center=clamped.center,
            )

    def predict_missed(self, frame_index: int) -> list[DetectionBox]:
        """Coast undetected objects one frame; drop the ones out of budget.

        Returns the compensated boxes to feed the semantic mask alongside
        real detections.
        """
        compensated: list[DetectionBox] = []
        expired: list[int] = []
        for oid in sorted(self.objects):
            obj = self.objects[oid]
            if obj.last_detected_frame == frame_index:
                continue
            obj.missed_count += 1
            if obj.missed_count > self.miss_limit:
                expired.append(oid)
                continue
            obj.box = obj.box.shifted(obj.velocity_smoothed).clamped(self.width, self.height)
            compensated.append(obj.box)
        for oid in expired:
            del self.objects[oid]
        return compensated
