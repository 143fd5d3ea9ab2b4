"""Moving consistency check over the sliding window.

Unknown moving objects (or detector misses) leave no box, but their features
disagree with the window geometry: reprojecting each co-observation's 3D
location back into the feature's first window frame yields a large average
residual. Flagged features are excluded from estimation; ones that later
behave (enough observations, residual back under threshold) are recycled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoCoObservation, NonPositiveDepth
from .geometry import PinholeCamera, PoseSE3, compose
from .tracks import DynamicReason, FeatureTrack, TrackStatus

DEFAULT_THRESHOLD_PX = 3.0
DEFAULT_RECYCLE_MIN_OBS = 4


@dataclass(frozen=True)
class ResidualReport:
    feature_id: int
    residual_px: float
    observation_count: int  # co-observing frames actually used
    verdict: TrackStatus


def reprojection_residual(
    track: FeatureTrack,
    body_poses: dict[int, PoseSE3],
    cam: PinholeCamera,
    extrinsic: PoseSE3,
    landmark_world: np.ndarray | None = None,
) -> float:
    """Average residual of the track's first window observation against its
    co-observations' 3D locations carried through the pose chain.

    body_poses: body-to-world pose per window frame (the newest entry is the
    inertially predicted pose, older ones the optimized ones). Each
    co-observation's 3D point comes from its measured depth; frames without
    depth fall back to landmark_world when given, else are skipped.
    """
    window_obs = [o for o in track.observations if o.frame_index in body_poses]
    if len(window_obs) < 2:
        raise NoCoObservation(f"feature {track.feature_id} lacks co-observations")
    anchor = window_obs[0]
    T_wc_anchor = compose(body_poses[anchor.frame_index], extrinsic)

    total = 0.0
    used = 0
    for obs in window_obs[1:]:
        T_wc_j = compose(body_poses[obs.frame_index], extrinsic)
        if obs.depth > 0:
            p_cj = cam.unproject(obs.pixel, obs.depth)
        elif landmark_world is not None:
            p_cj = T_wc_j.inverse().apply(landmark_world)
        else:
            continue
        p_anchor_cam = T_wc_anchor.inverse().apply(T_wc_j.apply(p_cj))
        if p_anchor_cam[2] <= 0:
            raise NonPositiveDepth("co-observation reprojects behind the anchor camera")
        total += float(np.linalg.norm(anchor.pixel - cam.project(p_anchor_cam)))
        used += 1
    if used == 0:
        raise NoCoObservation(f"feature {track.feature_id} has no usable 3D co-observation")
    return total / used


def check_and_recycle(
    tracks: list[FeatureTrack],
    body_poses: dict[int, PoseSE3],
    cam: PinholeCamera,
    extrinsic: PoseSE3,
    threshold_px: float = DEFAULT_THRESHOLD_PX,
    recycle_min_obs: int = DEFAULT_RECYCLE_MIN_OBS,
    landmarks_world: dict[int, np.ndarray] | None = None,
) -> list[ResidualReport]:
    """Flag residual-inconsistent tracks; recycle recovered false positives.

    Semantic verdicts are left alone: only consistency-flagged features can
    re-enter estimation, and a recycled feature that misbehaves again is
    re-flagged (the verdict always follows the latest check).
    """
    residuals = batch_residuals(tracks, body_poses, cam, extrinsic, landmarks_world)
    reports: list[ResidualReport] = []
    for track in tracks:
        if track.feature_id not in residuals:
            continue
        r = residuals[track.feature_id]
        m = sum(1 for o in track.observations[1:] if o.frame_index in body_poses)
        if r > threshold_px:
            track.mark_dynamic(DynamicReason.CONSISTENCY)
            verdict = TrackStatus.DYNAMIC
        elif (
            track.status is TrackStatus.DYNAMIC
            and track.dynamic_reason is DynamicReason.CONSISTENCY
            and m >= recycle_min_obs
        ):
            track.recycle()
            verdict = TrackStatus.RECYCLED
        else:
            verdict = track.status
        reports.append(ResidualReport(track.feature_id, r, m, verdict))
    return reports


def batch_residuals(
    tracks: list[FeatureTrack],
    body_poses: dict[int, PoseSE3],
    cam: PinholeCamera,
    extrinsic: PoseSE3,
    landmarks_world: dict[int, np.ndarray] | None = None,
) -> dict[int, float]:
    """Vectorized windowed residuals for many tracks at once.

    Matches reprojection_residual per track (tracks whose chain degenerates
    or that lack usable co-observations are omitted, as the scalar path
    skips them).
    """
    frame_ids = list(body_poses)
    frame_slot = {fid: k for k, fid in enumerate(frame_ids)}
    R_wc = np.empty((len(frame_ids), 3, 3))
    t_wc = np.empty((len(frame_ids), 3))
    for k, fid in enumerate(frame_ids):
        T = compose(body_poses[fid], extrinsic)
        R_wc[k] = T.rotation_matrix
        t_wc[k] = T.t

    rows_track, rows_anchor, rows_obs, rows_uvd, rows_px = [], [], [], [], []
    lm_rows = []  # (row index, landmark, frame slot) for depthless fallbacks
    track_order = []
    for track in tracks:
        if track.status in (TrackStatus.NEW, TrackStatus.UNSTABLE):
            continue
        if track.dynamic_reason is DynamicReason.SEMANTIC:
            continue
        window_obs = [o for o in track.observations if o.frame_index in frame_slot]
        if len(window_obs) < 2:
            continue
        anchor = window_obs[0]
        landmark = (landmarks_world or {}).get(track.feature_id)
        added = 0
        for obs in window_obs[1:]:
            j = frame_slot[obs.frame_index]
            if obs.depth > 0:
                rows_uvd.append((obs.pixel[0], obs.pixel[1], obs.depth))
            elif landmark is not None:
                lm_rows.append((len(rows_track), landmark, j))
                rows_uvd.append((0.0, 0.0, 1.0))
            else:
                continue
            rows_track.append(track.feature_id)
            rows_anchor.append(frame_slot[anchor.frame_index])
            rows_obs.append(j)
            rows_px.append(anchor.pixel)
            added += 1
        if added:
            track_order.append(track.feature_id)

    if not rows_track:
        return {}
    a = np.array(rows_anchor)
    j = np.array(rows_obs)
    uvd = np.array(rows_uvd)
    p_cj = cam.unproject(uvd[:, :2], uvd[:, 2])
    for row, landmark, slot in lm_rows:
        p_cj[row] = R_wc[slot].T @ (landmark - t_wc[slot])
    px = np.array(rows_px)
    p_w = np.einsum("nij,nj->ni", R_wc[j], p_cj) + t_wc[j]
    p_ca = np.einsum("nji,nj->ni", R_wc[a], p_w - t_wc[a])
    z = p_ca[:, 2]
    ok = z > 0
    zs = np.where(ok, z, 1.0)
    u = cam.fx * p_ca[:, 0] / zs + cam.cx
    v = cam.fy * p_ca[:, 1] / zs + cam.cy
    err = np.hypot(px[:, 0] - u, px[:, 1] - v)

    out: dict[int, float] = {}
    bad: set[int] = set()
    sums: dict[int, tuple[float, int]] = {}
    for fid, good, e in zip(rows_track, ok, err):
        if not good:
            bad.add(fid)
            continue
        s, n = sums.get(fid, (0.0, 0))
        sums[fid] = (s + float(e), n + 1)
    for fid in track_order:
        if fid in bad or fid not in sums:
            continue
        s, n = sums[fid]
        out[fid] = s / n
    return out
