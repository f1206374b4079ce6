"""Residual blocks of the estimation cost.

Every factor returns raw residuals and tangent-space Jacobians (left/world
increment convention); whitening (the square-root information) is applied
separately so finite-difference checks compare the raw math. The two
high-count reprojection families also register vectorized batch evaluators
with the solver.

Sign conventions: residual = measurement - model. Jacobians of the pose
blocks are wrt [dr, dalpha] with q boxplus delta = Exp(delta) * q.
"""

import json

import numpy as np

from . import geometry as geo
from . import imu as imu_mod
from . import solver as solver_mod
from .camera import MIN_DEPTH


def _pose_parts(v):
    return v[:3], v[3:], geo.quat_to_matrix(v[3:])


def _quat_to_matrix_batch(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    R[:, 0, 0] = 1 - 2 * (yy + zz)
    R[:, 0, 1] = 2 * (xy - wz)
    R[:, 0, 2] = 2 * (xz + wy)
    R[:, 1, 0] = 2 * (xy + wz)
    R[:, 1, 1] = 1 - 2 * (xx + zz)
    R[:, 1, 2] = 2 * (yz - wx)
    R[:, 2, 0] = 2 * (xz - wy)
    R[:, 2, 1] = 2 * (yz + wx)
    R[:, 2, 2] = 1 - 2 * (xx + yy)
    return R


def _skew_batch(v):
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


class Factor:
    kind = "generic"

    def __init__(self, blocks, robust=None):
        self.blocks = tuple(blocks)
        self.robust = robust
        self.active = True

    @property
    def residual_dim(self):
        raise NotImplementedError

    def evaluate(self, values, jac=True):
        raise NotImplementedError

    def sqrt_info(self, values):
        return 1.0

    def evaluate_whitened(self, values, jac=True):
        out = self.evaluate(values, jac)
        if out is None:
            return None
        res, jacs = out
        S = self.sqrt_info(values)
        if np.isscalar(S):
            res = S * res
            jacs = [S * J for J in jacs] if jac else None
        elif S.ndim == 1:
            res = S * res
            jacs = [S[:, None] * J for J in jacs] if jac else None
        else:
            res = S @ res
            jacs = [S @ J for J in jacs] if jac else None
        return res, jacs


# ---------------------------------------------------------------------------
# landmark reprojection

class LandmarkReprojectionFactor(Factor):
    """Pixel residual of a static homogeneous landmark in one camera."""

    kind = "landmark_reproj"

    def __init__(self, pose_block, landmark_block, camera, uv,
                 pixel_sigma=1.0, robust=1.0):
        super().__init__((pose_block, landmark_block), robust)
        self.camera = camera
        self.uv = np.asarray(uv, dtype=float)
        self.pixel_sigma = float(pixel_sigma)

    @property
    def residual_dim(self):
        return 2

    def sqrt_info(self, values):
        return 1.0 / self.pixel_sigma

    def evaluate(self, values, jac=True):
        r_ws, _, C_ws = _pose_parts(values[0])
        l = values[1]
        cam = self.camera
        R_sc = cam.T_SC.rotation_matrix()
        r_sc = cam.T_SC.r
        p_S = C_ws.T @ (l[:3] - r_ws * l[3])
        p_C = R_sc.T @ (p_S - r_sc * l[3])
        uv_hat, Jproj, valid = cam.project_batch(p_C[None])
        if not valid[0]:
            return None
        res = self.uv - uv_hat[0]
        if not jac:
            return res, None
        Jp = Jproj[0]
        M = Jp @ R_sc.T  # -d(residual)/d p_S
        J_pose = np.zeros((2, 6))
        J_pose[:, :3] = M @ C_ws.T * l[3]
        J_pose[:, 3:] = -M @ C_ws.T @ geo.skew(l[:3] - r_ws * l[3])
        dpC_dl = np.zeros((3, 4))
        dpC_dl[:, :3] = R_sc.T @ C_ws.T
        dpC_dl[:, 3] = -R_sc.T @ (C_ws.T @ r_ws + r_sc)
        J_lm = -Jp @ dpC_dl @ self.blocks[1].lift(l)
        return res, [J_pose, J_lm]


def _landmark_batch(factors, values, jac):
    """Vectorized evaluation of landmark reprojections, one item per camera."""
    by_cam = {}
    for f in factors:
        by_cam.setdefault(id(f.camera), []).append(f)
    items = []
    for fs in by_cam.values():
        cam = fs[0].camera
        R_sc = cam.T_SC.rotation_matrix()
        r_sc = cam.T_SC.r
        pv = np.stack([values[f.blocks[0]] for f in fs])
        lv = np.stack([values[f.blocks[1]] for f in fs])
        z = np.stack([f.uv for f in fs])
        sig = np.array([1.0 / f.pixel_sigma for f in fs])
        C_ws = _quat_to_matrix_batch(pv[:, 3:])
        r_ws = pv[:, :3]
        d = lv[:, :3] - r_ws * lv[:, 3:4]
        p_S = np.einsum("nji,nj->ni", C_ws, d)
        p_C = np.einsum("ji,nj->ni", R_sc, p_S - r_sc[None] * lv[:, 3:4])
        uv, Jproj, valid = cam.project_batch(p_C)
        if not np.any(valid):
            continue
        idx = np.nonzero(valid)[0]
        res = (z[idx] - uv[idx]) * sig[idx, None]
        Jp_blk = None
        Jl_blk = None
        if jac:
            M = np.einsum("nrk,jk->nrj", Jproj[idx], R_sc)  # (k,2,3)
            CwsT = np.transpose(C_ws[idx], (0, 2, 1))
            lw = lv[idx, 3]
            Jp_blk = np.zeros((len(idx), 2, 6))
            Jp_blk[:, :, :3] = np.einsum("nrj,nji->nri", M, CwsT) * lw[:, None, None]
            S = _skew_batch(d[idx])
            Jp_blk[:, :, 3:] = -np.einsum("nrj,njk,nki->nri", M, CwsT, S)
            dpS_dl = np.concatenate([CwsT, -np.einsum("nij,nj->ni", CwsT,
                                                      r_ws[idx])[:, :, None]],
                                    axis=2)  # (k,3,4)
            dpC_dl = np.einsum("ji,njk->nik", R_sc, dpS_dl)
            dpC_dl[:, :, 3] -= (R_sc.T @ r_sc)[None]
            lifts = np.stack([fs[i].blocks[1].lift(lv[i]) for i in idx])
            Jl_blk = -np.einsum("nrj,njk,nki->nri", Jproj[idx], dpC_dl, lifts)
            Jp_blk *= sig[idx, None, None]
            Jl_blk *= sig[idx, None, None]
        items.append(solver_mod.LandmarkItem(
            [fs[i].blocks[0] for i in idx], [fs[i].blocks[1] for i in idx],
            res, Jp_blk if jac else np.zeros((len(idx), 2, 6)),
            Jl_blk if jac else np.zeros((len(idx), 2, 3)),
            fs[0].robust))
    return items


# ---------------------------------------------------------------------------
# human joint reprojection

class HumanJointReprojectionFactor(Factor):
    """Pixel residual of one detected body joint in one camera.

    Blocks: (T_SH pose, theta, beta). The information is confidence-based:
    'information' weights by c^2 (confident detections count more); 'literal'
    reproduces the printed c^-2 form.
    """

    kind = "human_joint"

    def __init__(self, human_pose_block, theta_block, beta_block, body_model,
                 camera, joint_index, uv, confidence, pixel_sigma=1.0,
                 robust=1.0, weighting="information"):
        super().__init__((human_pose_block, theta_block, beta_block), robust)
        self.body_model = body_model
        self.camera = camera
        self.joint_index = int(joint_index)
        self.uv = np.asarray(uv, dtype=float)
        self.confidence = float(confidence)
        self.pixel_sigma = float(pixel_sigma)
        if weighting not in ("information", "literal"):
            raise ValueError("weighting must be 'information' or 'literal'")
        self.weighting = weighting

    @property
    def residual_dim(self):
        return 2

    def sqrt_info(self, values):
        c = max(self.confidence, 1e-6)
        w = c if self.weighting == "information" else 1.0 / c
        return w / self.pixel_sigma

    def evaluate(self, values, jac=True):
        r_sh, _, C_sh = _pose_parts(values[0])
        theta, beta = values[1], values[2]
        model = self.body_model
        cam = self.camera
        R_sc = cam.T_SC.rotation_matrix()
        r_sc = cam.T_SC.r

        if jac:
            det, Jdet = model.detector_batch(beta[None], theta[None])
        else:
            det, Jdet = model.detector_batch(beta[None], theta[None], False)
        l_H = det[0, self.joint_index]
        p_S = C_sh @ l_H + r_sh
        p_C = R_sc.T @ (p_S - r_sc)
        uv_hat, Jproj, valid = cam.project_batch(p_C[None])
        if not valid[0]:
            return None
        res = self.uv - uv_hat[0]
        if not jac:
            return res, None
        M = Jproj[0] @ R_sc.T
        J_pose = np.zeros((2, 6))
        J_pose[:, :3] = -M
        J_pose[:, 3:] = M @ geo.skew(C_sh @ l_H)
        Jj = Jdet[0, self.joint_index]  # (3, K + 3*(J-1))
        K = model.n_shape
        J_full = -M @ C_sh @ Jj
        return res, [J_pose, J_full[:, K:], J_full[:, :K]]


def _human_joint_batch(factors, values, jac):
    """Group by (pose, theta, beta) blocks; one FK per group, one GroupItem
    per group across all of its joints and cameras."""
    groups = {}
    for f in factors:
        groups.setdefault(f.blocks, []).append(f)
    if not groups:
        return []
    keys = list(groups.keys())
    model = factors[0].body_model
    betas = np.stack([values[k[2]] for k in keys])
    thetas = np.stack([values[k[1]] for k in keys])
    det, Jdet = model.detector_batch(betas, thetas, want_jac=jac)

    items = []
    K = model.n_shape
    for gi, key in enumerate(keys):
        fs = groups[key]
        pose_v = values[key[0]]
        r_sh, _, C_sh = _pose_parts(pose_v)
        joints = np.array([f.joint_index for f in fs])
        l_H = det[gi, joints]                     # (m,3)
        p_S = l_H @ C_sh.T + r_sh
        # per-camera projection
        res = np.zeros((len(fs), 2))
        Jcat = np.zeros((len(fs), 2, 6 + thetas.shape[1] + K)) if jac else None
        valid = np.zeros(len(fs), dtype=bool)
        cams = {}
        for i, f in enumerate(fs):
            cams.setdefault(id(f.camera), []).append(i)
        for idxs in cams.values():
            cam = fs[idxs[0]].camera
            R_sc = cam.T_SC.rotation_matrix()
            r_sc = cam.T_SC.r
            p_C = (p_S[idxs] - r_sc) @ R_sc
            uv, Jproj, ok = cam.project_batch(p_C)
            for row, i in enumerate(idxs):
                if not ok[row]:
                    continue
                f = fs[i]
                sq = f.sqrt_info(None)
                valid[i] = True
                res[i] = sq * (f.uv - uv[row])
                if jac:
                    M = Jproj[row] @ R_sc.T
                    Jcat[i, :, :3] = -M
                    Jcat[i, :, 3:6] = M @ geo.skew(C_sh @ l_H[row])
                    Jfull = -M @ C_sh @ Jdet[gi, f.joint_index]
                    Jcat[i, :, 6:6 + thetas.shape[1]] = Jfull[:, K:]
                    Jcat[i, :, 6 + thetas.shape[1]:] = Jfull[:, :K]
                    Jcat[i] *= sq
        if not np.any(valid):
            continue
        items.append(solver_mod.GroupItem(
            (key[0], key[1], key[2]),
            res[valid], Jcat[valid] if jac else np.zeros((valid.sum(), 2, 6 + thetas.shape[1] + K)),
            fs[0].robust))
    return items


solver_mod.register_batch_evaluator("landmark_reproj", _landmark_batch)
solver_mod.register_batch_evaluator("human_joint", _human_joint_batch)


# ---------------------------------------------------------------------------
# priors

class ShapePriorFactor(Factor):
    """Penalty on shape deviation from a measured or zero prior; the first
    component carries an inflated sigma so scale stays softly constrained."""

    kind = "shape_prior"

    def __init__(self, beta_block, beta_meas=None, lambda_beta=0.1,
                 sigma_beta1=10.0):
        super().__init__((beta_block,))
        n = beta_block.value.shape[0]
        self.beta_meas = (np.zeros(n) if beta_meas is None
                          else np.asarray(beta_meas, dtype=float))
        s = np.ones(n)
        s[0] = 1.0 / sigma_beta1
        self._sqrt = np.sqrt(lambda_beta) * s

    @property
    def residual_dim(self):
        return self.beta_meas.shape[0]

    def sqrt_info(self, values):
        return self._sqrt

    def evaluate(self, values, jac=True):
        res = self.beta_meas - values[0]
        if not jac:
            return res, None
        return res, [-np.eye(res.shape[0])]


class GmmPrior:
    """Gaussian mixture over postures; diagonal or full covariances."""

    def __init__(self, weights, means, covariances):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.asarray(means, dtype=float)
        if abs(self.weights.sum() - 1.0) > 1e-6:
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        G, D = self.means.shape
        covs = [np.asarray(c, dtype=float) for c in covariances]
        self.infos = []
        self.sqrt_infos = []
        for c in covs:
            if c.ndim == 1:
                if np.any(c <= 0):
                    raise ValueError("diagonal covariance must be positive")
                self.infos.append(1.0 / c)
                self.sqrt_infos.append(1.0 / np.sqrt(c))
            else:
                info = np.linalg.inv(c)
                self.infos.append(0.5 * (info + info.T))
                L = np.linalg.cholesky(self.infos[-1])
                self.sqrt_infos.append(L.T)
        self.log_weights = np.log(self.weights)

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def score(self, g, theta):
        d = theta - self.means[g]
        info = self.infos[g]
        mahal = float(d @ (info * d) if info.ndim == 1 else d @ info @ d)
        return mahal - 2.0 * self.log_weights[g]

    def select(self, theta):
        """Component with the smallest weighted Mahalanobis distance."""
        scores = [self.score(g, theta) for g in range(self.n_components)]
        return int(np.argmin(scores))


def gmm_select(prior, theta):
    return prior.select(np.asarray(theta, dtype=float))


def load_gmm_prior(path):
    with open(path) as f:
        data = json.load(f)
    return GmmPrior(data["weights"], data["means"], data["covariances"])


class PosturePriorFactor(Factor):
    """Residual against the nearest mixture component; the selection is held
    fixed within a solver iteration and refreshed between iterations."""

    kind = "posture_prior"

    def __init__(self, theta_block, prior):
        super().__init__((theta_block,))
        self.prior = prior
        self.selected = prior.select(theta_block.value)

    @property
    def residual_dim(self):
        return self.prior.dim

    def reselect(self, values):
        self.selected = self.prior.select(values[self.blocks[0]])

    def sqrt_info(self, values):
        return self.prior.sqrt_infos[self.selected]

    def evaluate(self, values, jac=True):
        res = values[0] - self.prior.means[self.selected]
        if not jac:
            return res, None
        return res, [np.eye(res.shape[0])]


class JointAnglePriorFactor(Factor):
    """One-sided hinge keeping hinge joints out of hyperextension.

    entries: [(flat theta index, anatomical sign)]; residual component is
    max(0, -sign * theta). mode 'literal' keeps the always-on linear form.
    """

    kind = "joint_angle_prior"

    def __init__(self, theta_block, entries, lambda_alpha=0.4, mode="hinge"):
        super().__init__((theta_block,))
        if not entries:
            raise ValueError("joint-angle prior needs at least one entry")
        if mode not in ("hinge", "literal"):
            raise ValueError("mode must be 'hinge' or 'literal'")
        self.entries = [(int(i), float(s)) for i, s in entries]
        self.mode = mode
        self._sqrt = np.sqrt(lambda_alpha)

    @property
    def residual_dim(self):
        return len(self.entries)

    def sqrt_info(self, values):
        return self._sqrt

    def evaluate(self, values, jac=True):
        theta = values[0]
        m = len(self.entries)
        res = np.zeros(m)
        J = np.zeros((m, theta.shape[0])) if jac else None
        for k, (idx, s) in enumerate(self.entries):
            v = -s * theta[idx]
            if self.mode == "literal" or v > 0:
                res[k] = v
                if jac:
                    J[k, idx] = -s
        if not jac:
            return res, None
        return res, [J]


# ---------------------------------------------------------------------------
# motion model factors

class MotionTranslationFactor(Factor):
    """Predicted root translation (in the previous human frame) vs the
    relative motion implied by two sensor poses and two human poses."""

    kind = "motion_translation"

    def __init__(self, sensor_pose_prev, sensor_pose_cur, human_pose_prev,
                 human_pose_cur, p_pred, lambda_mp=0.1):
        super().__init__((sensor_pose_prev, sensor_pose_cur,
                          human_pose_prev, human_pose_cur))
        self.p_pred = np.asarray(p_pred, dtype=float)
        self._sqrt = np.sqrt(lambda_mp)

    @property
    def residual_dim(self):
        return 3

    def sqrt_info(self, values):
        return self._sqrt

    def evaluate(self, values, jac=True):
        r1, _, C_ws1 = _pose_parts(values[0])
        r2, _, C_ws2 = _pose_parts(values[1])
        r_sh, _, C_sh = _pose_parts(values[2])
        p2 = values[3][:3]

        u = C_ws2 @ p2 + r2 - r1
        a = C_ws1.T @ u
        m = C_sh.T @ (a - r_sh)
        res = self.p_pred - m
        if not jac:
            return res, None

        F = C_sh.T @ C_ws1.T
        G = C_sh.T
        J_s1 = np.zeros((3, 6))
        J_s1[:, :3] = F
        J_s1[:, 3:] = -F @ geo.skew(u)
        J_s2 = np.zeros((3, 6))
        J_s2[:, :3] = -F
        J_s2[:, 3:] = F @ geo.skew(C_ws2 @ p2)
        J_h1 = np.zeros((3, 6))
        J_h1[:, :3] = G
        J_h1[:, 3:] = -G @ geo.skew(a - r_sh)
        J_h2 = np.zeros((3, 6))
        J_h2[:, :3] = -F @ C_ws2
        return res, [J_s1, J_s2, J_h1, J_h2]


class MotionPostureFactor(Factor):
    """Linear posture-change residual against the predicted delta."""

    kind = "motion_posture"

    def __init__(self, theta_prev, theta_cur, dtheta_pred, lambda_mtheta=3.0):
        super().__init__((theta_prev, theta_cur))
        self.dtheta_pred = np.asarray(dtheta_pred, dtype=float)
        self._sqrt = np.sqrt(lambda_mtheta)

    @property
    def residual_dim(self):
        return self.dtheta_pred.shape[0]

    def sqrt_info(self, values):
        return self._sqrt

    def evaluate(self, values, jac=True):
        res = self.dtheta_pred - (values[1] - values[0])
        if not jac:
            return res, None
        n = res.shape[0]
        return res, [np.eye(n), -np.eye(n)]


# ---------------------------------------------------------------------------
# inertial and relative-pose factors

class ImuFactor(Factor):
    """Preintegrated inertial constraint between two (pose, speed/bias)
    block pairs; whitened by the propagated information."""

    kind = "imu"

    def __init__(self, pose_k, sb_k, pose_n, sb_n, preintegrated, params):
        super().__init__((pose_k, sb_k, pose_n, sb_n))
        self.pre = preintegrated
        self.params = params

    @property
    def residual_dim(self):
        return 15

    def _states(self, values):
        sk = imu_mod.SensorState(p=values[0][:3], q=values[0][3:],
                                 v=values[1][:3], bg=values[1][3:6],
                                 ba=values[1][6:9])
        sn = imu_mod.SensorState(p=values[2][:3], q=values[2][3:],
                                 v=values[3][:3], bg=values[3][3:6],
                                 ba=values[3][6:9])
        return sk, sn

    def evaluate(self, values, jac=True):
        sk, sn = self._states(values)
        res, jacs, _ = imu_mod.imu_error(sk, sn, self.pre, self.params, jac)
        return res, list(jacs) if jac else None

    def sqrt_info(self, values):
        sk, sn = self._states(values)
        _, _, info = imu_mod.imu_error(sk, sn, self.pre, self.params,
                                       jac=False)
        return np.linalg.cholesky(info).T

    def evaluate_whitened(self, values, jac=True):
        sk, sn = self._states(values)
        res, jacs, info = imu_mod.imu_error(sk, sn, self.pre, self.params, jac)
        S = np.linalg.cholesky(info).T
        if jac:
            return S @ res, [S @ J for J in jacs]
        return S @ res, None


class RelativePoseFactor(Factor):
    """Six-dof residual between two poses against a nominal relative pose,
    with a stored linearization offset."""

    kind = "relative_pose"

    def __init__(self, pose_r, pose_c, p_nom, q_nom, e0=None, sqrt_info=None):
        super().__init__((pose_r, pose_c))
        self.p_nom = np.asarray(p_nom, dtype=float)
        self.q_nom = geo.quat_normalize(np.asarray(q_nom, dtype=float))
        self.e0 = np.zeros(6) if e0 is None else np.asarray(e0, dtype=float)
        self._sqrt = np.eye(6) if sqrt_info is None else np.asarray(sqrt_info)

    @property
    def residual_dim(self):
        return 6

    def sqrt_info(self, values):
        return self._sqrt

    def evaluate(self, values, jac=True):
        r_r, q_r, C_r = _pose_parts(values[0])
        r_c, q_c, _ = _pose_parts(values[1])
        p_rc = C_r.T @ (r_c - r_r)
        q_rc = geo.quat_mul(geo.quat_conj(q_r), q_c)
        eq = geo.quat_boxminus(q_rc, self.q_nom)
        res = self.e0 + np.concatenate([p_rc - self.p_nom, eq])
        if not jac:
            return res, None
        Jl_inv = geo.so3_left_jacobian_inv(eq)
        J_r = np.zeros((6, 6))
        J_r[:3, :3] = -C_r.T
        J_r[:3, 3:] = C_r.T @ geo.skew(r_c - r_r)
        J_r[3:, 3:] = -Jl_inv @ C_r.T
        J_c = np.zeros((6, 6))
        J_c[:3, :3] = C_r.T
        J_c[3:, 3:] = Jl_inv @ C_r.T
        return res, [J_r, J_c]
