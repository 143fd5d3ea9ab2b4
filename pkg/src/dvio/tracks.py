"""Feature track lifecycle shared by the tracking and optimization stages.

Lifecycle: new -> stable (tracked for 2+ frames) -> unstable (track failure,
removed once its location has fed the detection mask). A stable feature
recognized as moving turns dynamic: it stays tracked but is excluded from
estimation. Only consistency-check verdicts may recycle it back.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class TrackStatus(enum.Enum):
    NEW = "new"
    STABLE = "stable"
    UNSTABLE = "unstable"
    DYNAMIC = "dynamic"
    RECYCLED = "recycled"


class DynamicReason(enum.Enum):
    NONE = "none"
    SEMANTIC = "semantic"  # detection box + depth; sticky, never recycled
    CONSISTENCY = "consistency"  # residual check; may recycle


@dataclass
class FeatureObservation:
    feature_id: int
    frame_index: int
    pixel: np.ndarray  # (2,) pixels
    depth: float = 0.0  # meters; 0 = unavailable

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)
        if self.depth < 0:
            raise ValueError("depth must be >= 0")


@dataclass
class FeatureTrack:
    feature_id: int
    observations: list[FeatureObservation] = field(default_factory=list)
    status: TrackStatus = TrackStatus.NEW
    dynamic_reason: DynamicReason = DynamicReason.NONE

    @property
    def track_length(self) -> int:
        return len(self.observations)

    @property
    def last(self) -> FeatureObservation:
        return self.observations[-1]

    def observation_in(self, frame_index: int) -> FeatureObservation | None:
        for obs in reversed(self.observations):
            if obs.frame_index == frame_index:
                return obs
            if obs.frame_index < frame_index:
                return None
        return None

    def add_observation(self, obs: FeatureObservation) -> None:
        if self.observations and obs.frame_index <= self.observations[-1].frame_index:
            raise ValueError("observations must advance in frame index")
        self.observations.append(obs)
        if self.status is TrackStatus.NEW and self.track_length >= 2:
            self.status = TrackStatus.STABLE

    def mark_dynamic(self, reason: DynamicReason) -> None:
        # semantic verdicts dominate: a box+depth hit is never recycled
        if self.dynamic_reason is not DynamicReason.SEMANTIC:
            self.dynamic_reason = reason
        self.status = TrackStatus.DYNAMIC

    def recycle(self) -> bool:
        if self.status is TrackStatus.DYNAMIC and self.dynamic_reason is DynamicReason.CONSISTENCY:
            self.status = TrackStatus.RECYCLED
            self.dynamic_reason = DynamicReason.NONE
            return True
        return False

    @property
    def usable_for_estimation(self) -> bool:
        return self.status in (TrackStatus.STABLE, TrackStatus.RECYCLED)


class FeatureRegistry:
    """Id-keyed track table with per-frame update helpers."""

    def __init__(self):
        self.tracks: dict[int, FeatureTrack] = {}
        self._next_id = 0

    def new_id(self) -> int:
        fid = self._next_id
        self._next_id += 1
        return fid

    def get(self, feature_id: int) -> FeatureTrack | None:
        return self.tracks.get(feature_id)

    def ingest(self, obs: FeatureObservation) -> FeatureTrack:
        track = self.tracks.get(obs.feature_id)
        if track is None:
            track = FeatureTrack(feature_id=obs.feature_id)
            self.tracks[obs.feature_id] = track
            self._next_id = max(self._next_id, obs.feature_id + 1)
        track.add_observation(obs)
        return track

    def mark_failed(self, feature_id: int) -> None:
        track = self.tracks.get(feature_id)
        if track is not None:
            track.status = TrackStatus.UNSTABLE

    def remove(self, feature_id: int) -> None:
        self.tracks.pop(feature_id, None)

    def drop_unstable(self) -> list[int]:
        gone = [fid for fid, t in self.tracks.items() if t.status is TrackStatus.UNSTABLE]
        for fid in gone:
            del self.tracks[fid]
        return gone

    def active_in(self, frame_index: int) -> list[FeatureTrack]:
        return [
            t
            for t in self.tracks.values()
            if t.observations and t.last.frame_index == frame_index
        ]

    def prune_before(self, frame_index: int) -> None:
        """Forget observations older than the estimation window."""
        dead = []
        for fid, t in self.tracks.items():
            t.observations = [o for o in t.observations if o.frame_index >= frame_index]
            if not t.observations:
                dead.append(fid)
        for fid in dead:
            del self.tracks[fid]
