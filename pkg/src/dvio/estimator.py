"""Keyframe-based sliding-window state estimation.

Fuses reprojection residuals of usable features (inverse depth anchored at
first observation, measured depth as an extra prior) with whitened 15-dim
inertial preintegration residuals under a damped Gauss-Newton loop. The
oldest window frame's pose is held fixed as the gauge; there is no
marginalization prior, the window simply drops the oldest frame (newest was
a keyframe) or the second-newest (it was not).

Rotation perturbations are right-multiplied: q <- q * Exp(dtheta). Per-frame
parameter block: [dp(3), dtheta(3), dv(3), dbg(3), dba(3)]; inertial states
are omitted in VO mode.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InsufficientConstraints
from .geometry import (
    PinholeCamera,
    PoseSE3,
    compose,
    quat_conj,
    quat_exp,
    quat_left,
    quat_mul,
    quat_normalize,
    quat_right,
    quat_to_matrix,
    skew,
)
from .imu import (
    GRAVITY_MAGNITUDE,
    ImuBias,
    ImuSample,
    NavState,
    PreintegratedDelta,
    Preintegrator,
    predict_pose,
    repropagate,
)
from .tracks import FeatureRegistry, FeatureTrack


@dataclass(frozen=True)
class EstimatorConfig:
    window_size: int = 10
    huber_scale_px: float = 1.0
    parallax_threshold_px: float = 10.0
    count_floor: int = 50
    depth_weight: float = 100.0  # anchor inverse-depth prior (1/m units)
    obs_depth_weight: float = 30.0  # measured depth at co-observations (m units)
    depth_huber_m: float = 0.5  # depth-row outlier cap (silhouette flips)
    max_iterations: int = 10
    gradient_tol: float = 1e-8
    step_tol: float = 1e-10
    cost_rel_tol: float = 1e-5  # stop once accepted steps stop paying
    min_features: int = 8
    vo_mode: bool = False
    min_depth: float = 0.05
    max_depth: float = 80.0


@dataclass
class FrameState:
    frame_id: int
    timestamp: float
    pose: PoseSE3
    velocity: np.ndarray
    bias: ImuBias
    is_keyframe: bool = True


@dataclass
class WindowFeature:
    feature_id: int
    anchor_frame: int
    inv_depth: float
    depth_meas: float = 0.0  # measured depth at the anchor (0 = none)


def keyframe_decision(parallax_px: float, tracked_count: int, cfg: EstimatorConfig) -> bool:
    """Promote when stable features moved enough or tracking is starving."""
    return parallax_px > cfg.parallax_threshold_px or tracked_count < cfg.count_floor


# -- local parameterization ----------------------------------------------------


@dataclass
class StateVector:
    """Working copy of all window states for the optimizer."""

    p: np.ndarray  # (n,3)
    q: np.ndarray  # (n,4)
    v: np.ndarray  # (n,3)
    bg: np.ndarray  # (n,3)
    ba: np.ndarray  # (n,3)
    lam: np.ndarray  # (F,)

    def copy(self) -> "StateVector":
        return StateVector(
            self.p.copy(), self.q.copy(), self.v.copy(), self.bg.copy(), self.ba.copy(),
            self.lam.copy(),
        )


class WindowProblem:
    """Nonlinear least squares over one window snapshot.

    Column layout: frames 1..n-1 contribute [dp, dtheta(, dv, dbg, dba)],
    then one inverse-depth column per active feature. Frame 0 is fixed.
    """

    def __init__(
        self,
        cam: PinholeCamera,
        extrinsic: PoseSE3,
        cfg: EstimatorConfig,
        frames: list[FrameState],
        features: list[WindowFeature],
        observations: dict[int, dict[int, tuple[np.ndarray, float]]],  # fid -> frame -> (px, d)
        preints: list[PreintegratedDelta] | None,
        gravity: np.ndarray | None,
    ):
        self.cam = cam
        self.cfg = cfg
        self.R_cb = extrinsic.rotation_matrix
        self.t_cb = extrinsic.t
        self.frames = frames
        self.features = features
        self.gravity = gravity
        self.use_imu = preints is not None and not cfg.vo_mode
        self.frame_ids = [f.frame_id for f in frames]
        self.id_to_idx = {fid: i for i, fid in enumerate(self.frame_ids)}
        n = len(frames)

        self.frame_dim = 15 if self.use_imu else 6
        self.cols_frame = {i: (i - 1) * self.frame_dim for i in range(1, n)}
        self.n_frame_cols = (n - 1) * self.frame_dim
        self.cols_feature = {
            f.feature_id: self.n_frame_cols + k for k, f in enumerate(features)
        }
        self.dim = self.n_frame_cols + len(features)

        # flatten reprojection blocks: anchor idx, target idx, feature slot
        anchor_idx, target_idx, feat_slot, rays, obs_px, obs_d = [], [], [], [], [], []
        for k, feat in enumerate(features):
            per_frame = observations[feat.feature_id]
            a = self.id_to_idx[feat.anchor_frame]
            anchor_px, _anchor_d = per_frame[feat.anchor_frame]
            ray = cam.ray(anchor_px)
            for frame_id, (pixel, depth) in per_frame.items():
                if frame_id == feat.anchor_frame or frame_id not in self.id_to_idx:
                    continue
                anchor_idx.append(a)
                target_idx.append(self.id_to_idx[frame_id])
                feat_slot.append(k)
                rays.append(ray)
                obs_px.append(pixel)
                obs_d.append(depth)
        self.anchor_idx = np.array(anchor_idx, dtype=int)
        self.target_idx = np.array(target_idx, dtype=int)
        self.feat_slot = np.array(feat_slot, dtype=int)
        self.rays = np.array(rays).reshape(-1, 3)
        self.obs_px = np.array(obs_px).reshape(-1, 2)
        self.obs_depth = np.array(obs_d, dtype=float).reshape(-1)
        self.n_reproj = len(anchor_idx)
        # co-observations with a depth reading get a range residual too
        self.depth_obs_idx = np.nonzero(self.obs_depth > 0)[0]

        self.depth_slots = [
            (k, f.depth_meas) for k, f in enumerate(features) if f.depth_meas > 0
        ]
        if self.use_imu:
            self.deltas = list(preints)
        else:
            self.deltas = []

        self.n_rows = (
            2 * self.n_reproj
            + len(self.depth_slots)
            + len(self.depth_obs_idx)
            + 15 * len(self.deltas)
        )
        # covariance is bias-invariant, so whitening factors are fixed
        self.imu_whiten = [
            np.linalg.inv(np.linalg.cholesky(d.covariance + 1e-14 * np.eye(15)))
            for d in self.deltas
        ]
        self._build_scatter_indices()

    def _build_scatter_indices(self) -> None:
        """Static COO structure of the Jacobian; iterations only fill values."""
        n, dim = self.n_reproj, self.dim
        rows_parts: list[np.ndarray] = []
        cols_parts: list[np.ndarray] = []
        if n:
            rows = (np.arange(n) * 2)[:, None, None] + np.array([0, 1])[None, :, None]
            six = np.arange(6)[None, None, :]

            def flat_for(frame_idx):
                cols = np.array(
                    [self.cols_frame.get(i, 0) for i in frame_idx]
                )[:, None, None] + six
                return (rows * dim + cols), frame_idx > 0

            self._flat_j, self._mask_j = flat_for(self.target_idx)
            self._flat_a, self._mask_a = flat_for(self.anchor_idx)
            lam_cols = self.n_frame_cols + self.feat_slot
            self._flat_lam = rows[:, :, 0] * dim + lam_cols[:, None]
            for flat in (self._flat_j, self._flat_a, self._flat_lam):
                rows_parts.append(flat.ravel() // dim)
                cols_parts.append(flat.ravel() % dim)

        row = 2 * n
        depth_rows = np.arange(row, row + len(self.depth_slots))
        depth_cols = np.array(
            [self.n_frame_cols + k for k, _ in self.depth_slots], dtype=int
        )
        rows_parts.append(depth_rows)
        cols_parts.append(depth_cols)
        row += len(self.depth_slots)

        # measured-range rows: one per depth-carrying co-observation
        nd = len(self.depth_obs_idx)
        if nd:
            sel = self.depth_obs_idx
            drow = np.arange(row, row + nd)
            six = np.arange(6)[None, :]
            cols_t = np.array(
                [self.cols_frame.get(i, 0) for i in self.target_idx[sel]]
            )[:, None] + six
            cols_a = np.array(
                [self.cols_frame.get(i, 0) for i in self.anchor_idx[sel]]
            )[:, None] + six
            lam_cols = self.n_frame_cols + self.feat_slot[sel]
            self._dmask_t = self.target_idx[sel] > 0
            self._dmask_a = self.anchor_idx[sel] > 0
            rows_parts += [
                np.repeat(drow, 6),
                np.repeat(drow, 6),
                drow,
            ]
            cols_parts += [cols_t.ravel(), cols_a.ravel(), lam_cols]
            row += nd

        self._imu_col_spans = []
        for pair in range(len(self.deltas)):
            i, jj = pair, pair + 1
            cols = []
            if i > 0:
                cols.extend(range(self.cols_frame[i], self.cols_frame[i] + 15))
            cols.extend(range(self.cols_frame[jj], self.cols_frame[jj] + 15))
            cols = np.array(cols, dtype=int)
            self._imu_col_spans.append((row, i > 0, cols))
            rr = np.repeat(np.arange(row, row + 15), len(cols))
            rows_parts.append(rr)
            cols_parts.append(np.tile(cols, 15))
            row += 15

        self.coo_rows = np.concatenate(rows_parts) if rows_parts else np.empty(0, dtype=int)
        self.coo_cols = np.concatenate(cols_parts) if cols_parts else np.empty(0, dtype=int)

    # -- state plumbing --

    def state0(self) -> StateVector:
        return StateVector(
            p=np.array([f.pose.t for f in self.frames]),
            q=np.array([f.pose.q for f in self.frames]),
            v=np.array([f.velocity for f in self.frames]),
            bg=np.array([f.bias.gyro for f in self.frames]),
            ba=np.array([f.bias.accel for f in self.frames]),
            lam=np.array([f.inv_depth for f in self.features]),
        )

    def retract(self, x: StateVector, dx: np.ndarray) -> StateVector:
        out = x.copy()
        for i in range(1, len(self.frames)):
            c = self.cols_frame[i]
            out.p[i] = x.p[i] + dx[c : c + 3]
            out.q[i] = quat_normalize(quat_mul(x.q[i], quat_exp(dx[c + 3 : c + 6])))
            if self.use_imu:
                out.v[i] = x.v[i] + dx[c + 6 : c + 9]
                out.bg[i] = x.bg[i] + dx[c + 9 : c + 12]
                out.ba[i] = x.ba[i] + dx[c + 12 : c + 15]
        nf = self.n_frame_cols
        out.lam = x.lam + dx[nf : nf + len(self.features)]
        return out

    # -- residuals and jacobians --

    def _reproj_terms(self, x: StateVector):
        """Batched reprojection residuals and partials."""
        if self.n_reproj == 0:
            z = np.zeros((0,))
            return (np.zeros((0, 2)), np.zeros((0,), dtype=bool)) + (None,) * 5
        R = np.stack([quat_to_matrix(q) for q in x.q])  # (n,3,3)
        a, j, s = self.anchor_idx, self.target_idx, self.feat_slot
        lam = np.maximum(x.lam[s], 1e-6)

        p_ci = self.rays / lam[:, None]
        x_ba = p_ci @ self.R_cb.T + self.t_cb  # anchor body frame
        Ra, Rj = R[a], R[j]
        p_w = np.einsum("nij,nj->ni", Ra, x_ba) + x.p[a]
        x_bj = np.einsum("nji,nj->ni", Rj, p_w - x.p[j])  # R_j^T (...)
        p_cj = (x_bj - self.t_cb) @ self.R_cb  # R_cb^T applied rowwise

        z = p_cj[:, 2]
        valid = z > self.cfg.min_depth / 10.0
        zs = np.where(valid, z, 1.0)
        u = self.cam.fx * p_cj[:, 0] / zs + self.cam.cx
        v = self.cam.fy * p_cj[:, 1] / zs + self.cam.cy
        r = np.stack([u, v], axis=1) - self.obs_px
        r[~valid] = 0.0
        return r, valid, R, p_ci, x_ba, x_bj, p_cj

    def residuals(self, x: StateVector) -> np.ndarray:
        out = np.zeros(self.n_rows)
        terms = self._reproj_terms(x)
        r_rep, valid = terms[:2]
        out[: 2 * self.n_reproj] = r_rep.ravel()
        row = 2 * self.n_reproj
        for k, d_meas in self.depth_slots:
            out[row] = self.cfg.depth_weight * (x.lam[k] - 1.0 / d_meas)
            row += 1
        nd = len(self.depth_obs_idx)
        if nd:
            sel = self.depth_obs_idx
            p_cj = terms[6]
            r_d = self.cfg.obs_depth_weight * (p_cj[sel, 2] - self.obs_depth[sel])
            r_d[~valid[sel]] = 0.0
            out[row : row + nd] = r_d
            row += nd
        for pair, delta in enumerate(self.deltas):
            out[row : row + 15] = self._imu_residual(x, pair, delta)[0]
            row += 15
        return out

    def _imu_residual(self, x: StateVector, pair: int, delta: PreintegratedDelta):
        i, jj = pair, pair + 1
        # correct the span to the current linearization bias so the
        # first-order bias jacobians are exact at this point
        dbg = x.bg[i] - delta.bias_ref.gyro
        dba = x.ba[i] - delta.bias_ref.accel
        Jb = delta.jacobian
        alpha = delta.alpha + Jb[0:3, 9:12] @ dbg + Jb[0:3, 12:15] @ dba
        beta = delta.beta + Jb[6:9, 9:12] @ dbg + Jb[6:9, 12:15] @ dba
        corr = np.concatenate(([1.0], 0.5 * (Jb[3:6, 9:12] @ dbg)))
        gamma = quat_mul(delta.gamma, corr / np.linalg.norm(corr))

        dt = delta.dt_total
        g = self.gravity
        RiT = quat_to_matrix(x.q[i]).T

        dp_world = x.p[jj] - x.p[i] - x.v[i] * dt - 0.5 * g * dt * dt
        dv_world = x.v[jj] - x.v[i] - g * dt
        r_p = RiT @ dp_world - alpha
        r_v = RiT @ dv_world - beta
        q_ij = quat_mul(quat_conj(x.q[i]), x.q[jj])
        dq = quat_mul(quat_conj(gamma), q_ij)
        r_theta = 2.0 * dq[1:]
        r_bg = x.bg[jj] - x.bg[i]
        r_ba = x.ba[jj] - x.ba[i]

        Linv = self.imu_whiten[pair]
        raw = np.concatenate([r_p, r_theta, r_v, r_bg, r_ba])
        return Linv @ raw, (gamma, Linv, RiT, dp_world, dv_world, dq, q_ij)

    def _assemble(self, x: StateVector) -> tuple[np.ndarray, np.ndarray]:
        """Residuals and Jacobian values aligned with the COO structure."""
        r = np.zeros(self.n_rows)
        vals_parts: list[np.ndarray] = []

        r_rep, valid, R, p_ci, x_ba, x_bj, p_cj = self._reproj_terms(x)
        if self.n_reproj:
            a, j, s = self.anchor_idx, self.target_idx, self.feat_slot
            lam = np.maximum(x.lam[s], 1e-6)
            z = np.where(valid, p_cj[:, 2], 1.0)
            fx, fy = self.cam.fx, self.cam.fy
            n = self.n_reproj
            dpi = np.zeros((n, 2, 3))
            dpi[:, 0, 0] = fx / z
            dpi[:, 0, 2] = -fx * p_cj[:, 0] / z**2
            dpi[:, 1, 1] = fy / z
            dpi[:, 1, 2] = -fy * p_cj[:, 1] / z**2
            dpi[~valid] = 0.0

            RcbT = self.R_cb.T
            Ra, Rj = R[a], R[j]
            RjT = Rj.transpose(0, 2, 1)
            # d p_cj / d (world point)
            dP = np.einsum("ij,njk->nik", RcbT, RjT)
            A = np.einsum("nij,njk->nik", dpi, dP)  # (n,2,3), per-block helper

            skew_xbj = _batch_skew(x_bj)
            skew_xba = _batch_skew(x_ba)

            # unprojected chains, reused by the range rows below
            Tj_full = np.einsum("ij,njk->nik", RcbT, skew_xbj)
            N2 = np.einsum("nij,njk->nik", dP, Ra)
            Ti_full = -np.einsum("nij,njk->nik", N2, skew_xba)
            dray = (self.R_cb @ (self.rays / (lam**2)[:, None]).T).T  # (n,3)
            Lam3 = -np.einsum("nij,nj->ni", N2, dray)

            J_pj = -A
            J_thj = np.einsum("nij,njk->nik", dpi, Tj_full)
            J_pi = A
            J_thi = np.einsum("nij,njk->nik", dpi, Ti_full)
            J_lam = np.einsum("nij,nj->ni", dpi, Lam3)

            vals_j = np.concatenate([J_pj, J_thj], axis=2)
            vals_a = np.concatenate([J_pi, J_thi], axis=2)
            vals_j[~(self._mask_j & valid)] = 0.0
            vals_a[~(self._mask_a & valid)] = 0.0
            J_lam[~valid] = 0.0
            vals_parts += [vals_j.ravel(), vals_a.ravel(), J_lam.ravel()]
            r[: 2 * n] = r_rep.ravel()

        row = 2 * self.n_reproj
        for k, d_meas in self.depth_slots:
            r[row] = self.cfg.depth_weight * (x.lam[k] - 1.0 / d_meas)
            row += 1
        vals_parts.append(np.full(len(self.depth_slots), self.cfg.depth_weight))

        nd = len(self.depth_obs_idx)
        if nd:
            sel = self.depth_obs_idx
            w = self.cfg.obs_depth_weight
            ok = valid[sel]
            r_d = w * (p_cj[sel, 2] - self.obs_depth[sel])
            r_d[~ok] = 0.0
            r[row : row + nd] = r_d
            row += nd

            vt = w * np.concatenate([-dP[sel, 2, :], Tj_full[sel, 2, :]], axis=1)
            va = w * np.concatenate([dP[sel, 2, :], Ti_full[sel, 2, :]], axis=1)
            vl = w * Lam3[sel, 2]
            vt[~(self._dmask_t & ok)] = 0.0
            va[~(self._dmask_a & ok)] = 0.0
            vl[~ok] = 0.0
            vals_parts += [vt.ravel(), va.ravel(), vl]

        for pair, delta in enumerate(self.deltas):
            whitened, aux = self._imu_residual(x, pair, delta)
            gamma_c, Linv, RiT, dp_world, dv_world, dq, q_ij = aux
            dt = delta.dt_total
            Jb = delta.jacobian
            Jp_bg, Jp_ba = Jb[0:3, 9:12], Jb[0:3, 12:15]
            Jq_bg = Jb[3:6, 9:12]
            Jv_bg, Jv_ba = Jb[6:9, 9:12], Jb[6:9, 12:15]

            block = np.zeros((15, 2 * 15))  # cols: frame i | frame jj

            block[0:3, 0:3] = -RiT
            block[0:3, 3:6] = skew(RiT @ dp_world)
            block[0:3, 6:9] = -RiT * dt
            block[0:3, 9:12] = -Jp_bg
            block[0:3, 12:15] = -Jp_ba
            block[0:3, 15:18] = RiT

            block[3:6, 3:6] = -(quat_left(quat_conj(gamma_c)) @ quat_right(q_ij))[1:4, 1:4]
            block[3:6, 9:12] = -quat_right(dq)[1:4, 1:4] @ Jq_bg
            block[3:6, 18:21] = quat_left(dq)[1:4, 1:4]

            block[6:9, 3:6] = skew(RiT @ dv_world)
            block[6:9, 6:9] = -RiT
            block[6:9, 9:12] = -Jv_bg
            block[6:9, 12:15] = -Jv_ba
            block[6:9, 21:24] = RiT

            block[9:12, 9:12] = -np.eye(3)
            block[9:12, 24:27] = np.eye(3)
            block[12:15, 12:15] = -np.eye(3)
            block[12:15, 27:30] = np.eye(3)

            wb = Linv @ block
            row_start, has_i, _cols = self._imu_col_spans[pair]
            r[row_start : row_start + 15] = whitened
            vals_parts.append(wb.ravel() if has_i else wb[:, 15:30].ravel())

        vals = np.concatenate(vals_parts) if vals_parts else np.empty(0)
        return r, vals

    def linearize(self, x: StateVector) -> tuple[np.ndarray, np.ndarray]:
        r, vals = self._assemble(x)
        J = np.zeros((self.n_rows, self.dim))
        # masked entries share slots with live ones; duplicates must sum
        np.add.at(J, (self.coo_rows, self.coo_cols), vals)
        return r, J

    def normal_system(self, x: StateVector) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Robust-weighted gradient and Gauss-Newton Hessian via sparse J."""
        from scipy import sparse

        r, vals = self._assemble(x)
        w = self.robust_weights(r)
        Jw = sparse.csr_matrix(
            (vals * w[self.coo_rows], (self.coo_rows, self.coo_cols)),
            shape=(self.n_rows, self.dim),
        )
        rw = r * w
        g = Jw.T @ rw
        H = (Jw.T @ Jw).toarray()
        return r, g, H

    # -- robust cost --

    def _depth_rows_slice(self) -> slice:
        start = 2 * self.n_reproj + len(self.depth_slots)
        return slice(start, start + len(self.depth_obs_idx))

    def block_costs(self, r: np.ndarray) -> float:
        """Huber on reprojection blocks and depth rows, quadratic elsewhere."""
        cost = 0.0
        if self.n_reproj:
            rr = r[: 2 * self.n_reproj].reshape(-1, 2)
            e = np.linalg.norm(rr, axis=1)
            d = self.cfg.huber_scale_px
            quad = e <= d
            cost += float(np.sum(e[quad] ** 2) + np.sum(2 * d * e[~quad] - d * d))
        sl = self._depth_rows_slice()
        if sl.stop > sl.start:
            e = np.abs(r[sl])
            d = self.cfg.depth_huber_m * self.cfg.obs_depth_weight
            quad = e <= d
            cost += float(np.sum(e[quad] ** 2) + np.sum(2 * d * e[~quad] - d * d))
        rest = np.concatenate([r[2 * self.n_reproj : sl.start], r[sl.stop :]])
        cost += float(rest @ rest)
        return cost

    def robust_weights(self, r: np.ndarray) -> np.ndarray:
        """Per-row sqrt IRLS weights, 1 outside the robust blocks."""
        w = np.ones(self.n_rows)
        if self.n_reproj:
            rr = r[: 2 * self.n_reproj].reshape(-1, 2)
            e = np.linalg.norm(rr, axis=1)
            d = self.cfg.huber_scale_px
            scale = np.ones_like(e)
            out = e > d
            scale[out] = np.sqrt(d / e[out])
            w[: 2 * self.n_reproj] = np.repeat(scale, 2)
        sl = self._depth_rows_slice()
        if sl.stop > sl.start:
            e = np.abs(r[sl])
            d = self.cfg.depth_huber_m * self.cfg.obs_depth_weight
            scale = np.ones_like(e)
            out = e > d
            scale[out] = np.sqrt(d / e[out])
            w[sl] = scale
        return w


def _batch_skew(v: np.ndarray) -> np.ndarray:
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


@dataclass
class OptimizeInfo:
    initial_cost: float
    final_cost: float
    costs: list[float]
    iterations: int
    converged: bool


def levenberg_marquardt(problem: WindowProblem, x0: StateVector, cfg: EstimatorConfig):
    """Damped Gauss-Newton with IRLS robust weighting.

    Steps are accepted only when the true robust cost decreases, so the cost
    sequence over accepted steps is non-increasing by construction.
    """
    x = x0
    r = problem.residuals(x)
    cost = problem.block_costs(r)
    costs = [cost]
    mu = 1e-4
    converged = False
    iters = 0
    for iters in range(1, cfg.max_iterations + 1):
        r, g, H = problem.normal_system(x)
        if np.linalg.norm(g, ord=np.inf) < cfg.gradient_tol:
            converged = True
            break
        diag = np.diag(H).copy()
        diag[diag < 1e-9] = 1e-9
        accepted = False
        for _ in range(8):
            try:
                step = np.linalg.solve(H + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            x_new = problem.retract(x, step)
            cost_new = problem.block_costs(problem.residuals(x_new))
            if cost_new <= cost:
                x = x_new
                decrease = cost - cost_new
                cost = cost_new
                costs.append(cost)
                mu = max(mu / 3.0, 1e-12)
                accepted = True
                if np.linalg.norm(step) < cfg.step_tol:
                    converged = True
                if decrease <= cfg.cost_rel_tol * max(cost, 1e-12):
                    converged = True
                break
            mu = min(mu * 4.0, 1e12)
        if not accepted or converged:
            converged = converged or not accepted
            break
    return x, OptimizeInfo(costs[0], cost, costs, iters, converged)


class SlidingWindowEstimator:
    """Owns the window, feature depths, and per-frame optimization."""

    def __init__(
        self,
        cam: PinholeCamera,
        extrinsic: PoseSE3,
        cfg: EstimatorConfig = EstimatorConfig(),
        gravity: np.ndarray | None = None,
        initial_bias: ImuBias | None = None,
    ):
        self.cam = cam
        self.extrinsic = extrinsic
        self.cfg = cfg
        self.gravity = (
            np.array([0.0, 0.0, -GRAVITY_MAGNITUDE]) if gravity is None else np.asarray(gravity)
        )
        self.initial_bias = initial_bias or ImuBias()
        self.frames: list[FrameState] = []
        self.preints: list[Preintegrator] = []
        self.features: dict[int, WindowFeature] = {}
        self.last_optimize_info: OptimizeInfo | None = None

    # -- window bookkeeping --

    def window_poses(self) -> dict[int, PoseSE3]:
        return {f.frame_id: f.pose for f in self.frames}

    @property
    def latest(self) -> FrameState | None:
        return self.frames[-1] if self.frames else None

    def predict_next_pose(
        self, preint: Preintegrator | None
    ) -> tuple[PoseSE3, np.ndarray]:
        """Initial guess for an incoming frame."""
        last = self.frames[-1]
        if not self.cfg.vo_mode and preint is not None and preint.samples:
            state = NavState(last.pose, last.velocity, last.bias)
            return predict_pose(state, preint.delta, self.gravity)
        if len(self.frames) >= 2:  # constant velocity in SE(3)
            prev = self.frames[-2]
            step = compose(prev.pose.inverse(), last.pose)
            return compose(last.pose, step), last.velocity
        return last.pose, last.velocity

    def add_frame(
        self,
        frame_id: int,
        timestamp: float,
        registry: FeatureRegistry,
        preint: Preintegrator | None = None,
    ) -> FrameState:
        """Append a frame with its predicted pose (origin bootstrap first)."""
        if not self.frames:
            state = FrameState(
                frame_id, timestamp, PoseSE3.identity(), np.zeros(3), self.initial_bias
            )
            self.frames.append(state)
            return state
        pose, vel = self.predict_next_pose(preint)
        state = FrameState(frame_id, timestamp, pose, vel, self.frames[-1].bias)
        self.frames.append(state)
        self.preints.append(preint if preint is not None else Preintegrator())
        self._admit_features(registry)
        return state

    def _admit_features(self, registry: FeatureRegistry) -> None:
        window_ids = {f.frame_id for f in self.frames}
        for fid, track in registry.tracks.items():
            if not track.usable_for_estimation:
                continue
            obs_in = [o for o in track.observations if o.frame_index in window_ids]
            if len(obs_in) < 2:
                continue
            feat = self.features.get(fid)
            if feat is None:
                anchor = obs_in[0]
                if anchor.depth > 0:
                    lam = 1.0 / min(max(anchor.depth, self.cfg.min_depth), self.cfg.max_depth)
                    self.features[fid] = WindowFeature(fid, anchor.frame_index, lam, anchor.depth)
                else:
                    lam = self._triangulate(track, window_ids)
                    if lam is not None:
                        self.features[fid] = WindowFeature(fid, anchor.frame_index, lam, 0.0)

    def _triangulate(self, track: FeatureTrack, window_ids: set[int]) -> float | None:
        """Two-view midpoint triangulation; inverse depth in the anchor frame."""
        obs = [o for o in track.observations if o.frame_index in window_ids]
        if len(obs) < 2:
            return None
        poses = self.window_poses()
        o0, o1 = obs[0], obs[-1]
        T0 = compose(poses[o0.frame_index], self.extrinsic)
        T1 = compose(poses[o1.frame_index], self.extrinsic)
        r0 = T0.rotation_matrix @ self.cam.ray(o0.pixel)
        r1 = T1.rotation_matrix @ self.cam.ray(o1.pixel)
        b = T1.t - T0.t
        if np.linalg.norm(b) < 1e-3:
            return None
        A = np.stack([r0, -r1], axis=1)
        try:
            depths, *_ = np.linalg.lstsq(A, b, rcond=None)
        except np.linalg.LinAlgError:
            return None
        z0 = depths[0]
        if not (self.cfg.min_depth < z0 < self.cfg.max_depth):
            return None
        return 1.0 / z0

    def _window_observations(self, registry: FeatureRegistry):
        window_ids = {f.frame_id for f in self.frames}
        obs: dict[int, dict[int, np.ndarray]] = {}
        active: list[WindowFeature] = []
        for fid, feat in self.features.items():
            track = registry.get(fid)
            if track is None or not track.usable_for_estimation:
                continue
            per_frame = {
                o.frame_index: (o.pixel, o.depth)
                for o in track.observations
                if o.frame_index in window_ids
            }
            if feat.anchor_frame not in per_frame or len(per_frame) < 2:
                continue
            obs[fid] = per_frame
            active.append(feat)
        return active, obs

    # -- optimization --

    def optimize(self, registry: FeatureRegistry) -> OptimizeInfo:
        if len(self.frames) < 2:
            raise InsufficientConstraints("need at least two frames")
        active, obs = self._window_observations(registry)
        if len(active) < self.cfg.min_features:
            raise InsufficientConstraints(
                f"{len(active)} usable features < {self.cfg.min_features}"
            )
        deltas = None
        if not self.cfg.vo_mode:
            # re-integrate spans whose linearization bias has drifted past
            # the comfortable first-order correction range
            for i, pre in enumerate(self.preints):
                if pre.samples and self.frames[i].bias.distance(pre.delta.bias_ref) > 0.02:
                    pre.reintegrate(self.frames[i].bias)
            deltas = [p.delta for p in self.preints]
        problem = WindowProblem(
            self.cam, self.extrinsic, self.cfg, self.frames, active, obs, deltas, self.gravity
        )
        x, info = levenberg_marquardt(problem, problem.state0(), self.cfg)
        self._write_back(problem, x, active)
        self.last_optimize_info = info
        return info

    def _write_back(self, problem: WindowProblem, x: StateVector, active: list[WindowFeature]):
        for i, frame in enumerate(self.frames):
            frame.pose = PoseSE3(x.q[i], x.p[i])
            if problem.use_imu:
                frame.velocity = x.v[i]
                frame.bias = ImuBias(
                    gyro=np.clip(x.bg[i], -0.5, 0.5), accel=np.clip(x.ba[i], -2.0, 2.0)
                )
        for k, feat in enumerate(active):
            self.features[feat.feature_id] = replace(feat, inv_depth=float(x.lam[k]))

    # -- window management --

    def apply_keyframe_and_slide(
        self, parallax_px: float, tracked_count: int, registry: FeatureRegistry
    ) -> bool:
        newest = self.frames[-1]
        newest.is_keyframe = len(self.frames) <= 2 or keyframe_decision(
            parallax_px, tracked_count, self.cfg
        )
        if len(self.frames) <= self.cfg.window_size:
            return newest.is_keyframe
        if newest.is_keyframe:
            self._drop_oldest(registry)
        else:
            self._drop_second_newest(registry)
        return newest.is_keyframe

    def _drop_oldest(self, registry: FeatureRegistry) -> None:
        poses_before = self.window_poses()
        gone = self.frames.pop(0)
        self.preints.pop(0)
        self._reanchor_features(gone.frame_id, poses_before, registry)
        registry.prune_before(self.frames[0].frame_id)

    def _drop_second_newest(self, registry: FeatureRegistry) -> None:
        poses_before = self.window_poses()
        gone = self.frames.pop(-2)
        mid = self.preints.pop(-2)
        self.preints[-1].merge_from(mid)
        for track in registry.tracks.values():
            track.observations = [o for o in track.observations if o.frame_index != gone.frame_id]
        empty = [fid for fid, t in registry.tracks.items() if not t.observations]
        for fid in empty:
            registry.remove(fid)
        self._reanchor_features(gone.frame_id, poses_before, registry)

    def _reanchor_features(
        self, dropped_frame: int, poses_before: dict[int, PoseSE3], registry: FeatureRegistry
    ) -> None:
        """Move anchors off the dropped frame, carrying the depth estimate
        through the dropped frame's last pose."""
        window_ids = {f.frame_id for f in self.frames}
        doomed = []
        for fid, feat in self.features.items():
            track = registry.get(fid)
            if track is None:
                doomed.append(fid)
                continue
            if feat.anchor_frame in window_ids:
                continue
            if feat.anchor_frame != dropped_frame:
                doomed.append(fid)
                continue
            obs_in = [o for o in track.observations if o.frame_index in window_ids]
            old_obs = track.observation_in(dropped_frame)
            if not obs_in or old_obs is None:
                doomed.append(fid)
                continue
            T_wc_old = compose(poses_before[dropped_frame], self.extrinsic)
            p_w = T_wc_old.apply(self.cam.ray(old_obs.pixel) / max(feat.inv_depth, 1e-6))
            new_anchor = obs_in[0]
            T_wc_new = compose(poses_before[new_anchor.frame_index], self.extrinsic)
            p_c = T_wc_new.inverse().apply(p_w)
            if not (self.cfg.min_depth < p_c[2] < self.cfg.max_depth):
                doomed.append(fid)
                continue
            self.features[fid] = WindowFeature(
                fid, new_anchor.frame_index, 1.0 / p_c[2], new_anchor.depth
            )
        for fid in doomed:
            self.features.pop(fid, None)

    # -- inertial-rate output --

    def propagate_imu_rate(
        self, samples: list[ImuSample]
    ) -> list[tuple[float, PoseSE3, np.ndarray]]:
        """High-rate poses from the latest optimized state onward."""
        last = self.frames[-1]
        out = []
        if self.cfg.vo_mode or not samples:
            return out
        pre = Preintegrator(bias=last.bias)
        state = NavState(last.pose, last.velocity, last.bias)
        for s in samples:
            if s.timestamp <= last.timestamp:
                continue
            pre.add(s)
            pose, vel = predict_pose(state, pre.delta, self.gravity)
            out.append((s.timestamp, pose, vel))
        return out
