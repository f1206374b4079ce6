"""Causal sliding-window estimator.

Keeps the T most recent frames plus up to M keyframes in the active
problem; frames that age out are summarized by a relative-pose edge to the
temporally nearest retained keyframe and their pose blocks become constant.
Human states are created by the frontend, optimized while their frame is
recent, then frozen; each track owns exactly one shape block which becomes
constant after enough observations. The problem is rebuilt from the
persistent blocks every frame, so deactivated structures simply stop being
added while their estimates remain.
"""

import time

import numpy as np

from . import factors as fmod
from . import geometry as geo
from . import human_frontend as hf
from . import imu as imu_mod
from . import solver as smod
from .body_model import load_body_model
from .camera import TriangulationError, triangulate_stereo
from .config import EstimatorConfig
from .factors import load_gmm_prior
from .geometry import Pose
from .solver import HomPointBlock, PoseBlock, Problem, VecBlock


class FrameRejected(RuntimeError):
    pass


class FrameState:
    __slots__ = ("index", "t", "pose_block", "sb_block", "is_keyframe",
                 "status", "landmark_ids")

    def __init__(self, index, t, pose_block, sb_block):
        self.index = index
        self.t = t
        self.pose_block = pose_block
        self.sb_block = sb_block          # [v, bg, ba]; None once demoted
        self.is_keyframe = False
        self.status = "recent"            # recent | keyframe | posegraph
        self.landmark_ids = set()

    @property
    def active(self):
        return self.status in ("recent", "keyframe")

    def pose(self):
        return self.pose_block.pose()

    def state(self):
        sb = self.sb_block.value if self.sb_block is not None else np.zeros(9)
        return imu_mod.SensorState(p=self.pose_block.value[:3],
                                   q=self.pose_block.value[3:],
                                   v=sb[:3], bg=sb[3:6], ba=sb[6:9])


class LandmarkState:
    __slots__ = ("lid", "block", "obs")

    def __init__(self, lid, block):
        self.lid = lid
        self.block = block
        self.obs = []           # (frame, cam_idx, uv)


class HumanFrameState:
    __slots__ = ("frame", "pose_block", "theta_block", "obs",
                 "p_pred", "dtheta_pred", "frozen")

    def __init__(self, frame, pose_block, theta_block, obs, p_pred,
                 dtheta_pred):
        self.frame = frame
        self.pose_block = pose_block      # T_SH
        self.theta_block = theta_block
        self.obs = obs                    # {cam: (J_det, 3) array}
        self.p_pred = p_pred              # None for the first frame of track
        self.dtheta_pred = dtheta_pred
        self.frozen = False


class HumanTrack:
    __slots__ = ("tid", "beta_block", "frames", "obs_count", "missed",
                 "beta_frozen", "alive")

    def __init__(self, tid, beta_block):
        self.tid = tid
        self.beta_block = beta_block
        self.frames = []
        self.obs_count = 0
        self.missed = 0
        self.beta_frozen = False
        self.alive = True


class Estimator:
    def __init__(self, config=None, cameras=None, body_model=None,
                 gmm_prior=None, enable_humans=True):
        self.config = config or EstimatorConfig()
        if cameras is None:
            raise ValueError("camera calibration required")
        self.cameras = cameras
        self.body_model = body_model or load_body_model(
            self.config.resolved_body_model_path())
        self.gmm_prior = gmm_prior or load_gmm_prior(
            self.config.resolved_gmm_prior_path())
        self.enable_humans = enable_humans
        self.predictor = hf.ConstantVelocityPredictor()

        self.frames = []
        self.landmarks = {}
        self.tracks = {}
        self._next_track_id = 0
        self.posegraph_edges = []       # (frame_r, frame_c, factor)
        self._imu_buffer = []
        self._preint_cache = {}
        self.last_report = None

    # ------------------------------------------------------------------
    # bookkeeping helpers

    def _recent_frames(self):
        return [f for f in self.frames if f.status == "recent"]

    def _keyframes(self):
        return [f for f in self.frames if f.status == "keyframe"]

    def active_frames(self):
        return [f for f in self.frames if f.active]

    def _append_imu(self, batch):
        last_t = self._imu_buffer[-1].t if self._imu_buffer else -np.inf
        for m in batch:
            if m.t > last_t:
                self._imu_buffer.append(m)
                last_t = m.t

    def _trim_imu(self):
        if not self.frames:
            return
        oldest = min(f.t for f in self.active_frames())
        keep = [m for m in self._imu_buffer if m.t >= oldest - 0.05]
        self._imu_buffer = keep

    def _preintegrate(self, fa, fb):
        """Cached preintegration between two frames, refreshed on bias drift."""
        key = (fa.index, fb.index)
        bg = fa.sb_block.value[3:6]
        ba = fa.sb_block.value[6:9]
        pre = self._preint_cache.get(key)
        if pre is not None and not pre.needs_repreintegration(bg, ba):
            return pre
        pre = imu_mod.preintegrate(self._imu_buffer, self.config.imu,
                                   fa.t, fb.t, bg.copy(), ba.copy())
        self._preint_cache[key] = pre
        return pre

    # ------------------------------------------------------------------
    # frame intake

    def add_frame(self, t, imu_batch, landmark_obs, detections):
        """Process one multi-camera frame.

        landmark_obs: [(cam_idx, landmark_id, uv)]
        detections:   [(cam_idx, joints (J_det, 3))]
        Returns the SolveReport of the window optimization.
        """
        t = float(t)
        if self.frames and t <= self.frames[-1].t:
            raise FrameRejected("timestamps must increase (got %.6f)" % t)
        self._append_imu(imu_batch)

        if not self.frames:
            frame = self._bootstrap(t)
        else:
            prev = self.frames[-1]
            if t - prev.t > self.config.max_imu_gap:
                raise FrameRejected("IMU gap %.3f s exceeds %.3f s"
                                    % (t - prev.t, self.config.max_imu_gap))
            if not self._imu_buffer or self._imu_buffer[-1].t < t - 1e-6 or \
                    self._imu_buffer[0].t > prev.t + 1e-6:
                raise FrameRejected("IMU batch does not cover the frame gap")
            pre = self._preintegrate_raw(prev, t)
            pred = imu_mod.propagate(prev.state(), pre,
                                     self.config.imu.gravity)
            frame = FrameState(
                len(self.frames), t,
                PoseBlock(Pose(pred.p, pred.q), name="T_WS@%.3f" % t),
                VecBlock(np.concatenate([pred.v, pred.bg, pred.ba]),
                         name="sb@%.3f" % t))
            self.frames.append(frame)

        try:
            self._ingest_landmarks(frame, landmark_obs)
            if self.enable_humans and detections:
                self._run_human_frontend(frame, detections)
            self._select_keyframe(frame)
            self._manage_window()
            report = self._solve_window()
        except smod.SolverError as exc:
            self._rollback_frame(frame)
            raise FrameRejected("solver failure: %s" % exc)
        self._apply_freezes()
        self._trim_imu()
        self.last_report = report
        return report

    def _preintegrate_raw(self, prev, t):
        return imu_mod.preintegrate(self._imu_buffer, self.config.imu,
                                    prev.t, t,
                                    prev.sb_block.value[3:6].copy(),
                                    prev.sb_block.value[6:9].copy())

    def _bootstrap(self, t):
        """World frame from the gravity direction of the accelerometer mean."""
        if self._imu_buffer:
            acc = np.mean([m.acc for m in self._imu_buffer], axis=0)
        else:
            acc = -self.config.imu.gravity
        q0 = geo.align_z_to(acc) if self.config.imu.z_up else \
            geo.align_z_to(-acc)
        frame = FrameState(0, t, PoseBlock(Pose(np.zeros(3), q0),
                                           name="T_WS@%.3f" % t),
                           VecBlock(np.zeros(9), name="sb@%.3f" % t))
        frame.pose_block.constant = True    # gauge anchor
        frame.is_keyframe = True
        self.frames.append(frame)
        return frame

    def _rollback_frame(self, frame):
        for lm in self.landmarks.values():
            lm.obs = [o for o in lm.obs if o[0] is not frame]
        for tr in self.tracks.values():
            tr.frames = [hfr for hfr in tr.frames if hfr.frame is not frame]
        self.frames.remove(frame)

    # ------------------------------------------------------------------
    # landmarks

    def _ingest_landmarks(self, frame, landmark_obs):
        by_lid = {}
        for (cam, lid, uv) in landmark_obs:
            frame.landmark_ids.add(lid)
            by_lid.setdefault(lid, []).append((cam, np.asarray(uv, float)))
        for lid, obs in by_lid.items():
            lm = self.landmarks.get(lid)
            if lm is None:
                p_W = self._triangulate_landmark(frame, obs)
                if p_W is None:
                    continue
                lm = LandmarkState(lid, HomPointBlock(
                    p_W, name="lm%d" % lid, mode=self.config.landmark_mode))
                self.landmarks[lid] = lm
            for (cam, uv) in obs:
                lm.obs.append((frame, cam, uv))

    def _triangulate_landmark(self, frame, obs):
        if len(obs) < 2:
            return None
        (ca, uva), (cb, uvb) = obs[0], obs[1]
        cam_a, cam_b = self.cameras[ca], self.cameras[cb]
        T_AB = cam_a.T_SC.inverse().compose(cam_b.T_SC)
        try:
            p_A, ok = triangulate_stereo(cam_a, cam_b, T_AB, uva, uvb)
        except TriangulationError:
            return None
        T_WA = frame.pose().compose(cam_a.T_SC)
        return T_WA.transform(p_A)

    # ------------------------------------------------------------------
    # human frontend

    def _track_history(self, track):
        hist = []
        for hfr in track.frames[-2:]:
            T_WH = hfr.frame.pose().compose(hfr.pose_block.pose())
            hist.append((hfr.frame.t, T_WH, hfr.theta_block.value))
        return hist

    def _run_human_frontend(self, frame, detections):
        cfg = self.config
        dets_per_cam = {}
        for (cam, joints) in detections:
            dets_per_cam.setdefault(cam, []).append(np.asarray(joints, float))

        # propagate live tracks and project them into the cameras
        predictions = {}
        projections = {ci: {} for ci in dets_per_cam}
        T_WS = frame.pose()
        for tid, track in self.tracks.items():
            if not track.alive or not track.frames:
                continue
            hist = self._track_history(track)
            pred = self.predictor.predict(hist, frame.t - hist[-1][0])
            predictions[tid] = pred
            T_SH_pred = T_WS.inverse().compose(pred.T_WH_pred)
            joints_H, _ = self.body_model.detector_batch(
                track.beta_block.value[None], pred.theta_pred[None],
                want_jac=False)
            joints_S = (T_SH_pred.rotation_matrix() @ joints_H[0].T).T \
                + T_SH_pred.r
            for ci in dets_per_cam:
                cam = self.cameras[ci]
                T_CS = cam.T_SC.inverse()
                p_C = (T_CS.rotation_matrix() @ joints_S.T).T + T_CS.r
                uv, _, valid = cam.project_batch(p_C)
                projections[ci][tid] = (uv, valid)

        assoc = hf.associate(projections, dets_per_cam,
                             iou_gate=cfg.iou_gate,
                             c_min=cfg.weights.confidence_min)

        matched_tracks = {}
        for ci, matches in assoc.matches.items():
            for tid, di in matches.items():
                matched_tracks.setdefault(tid, {})[ci] = \
                    dets_per_cam[ci][di]

        for tid, obs in matched_tracks.items():
            track = self.tracks[tid]
            pred = predictions[tid]
            T_SH_init = T_WS.inverse().compose(pred.T_WH_pred)
            hfr = HumanFrameState(
                frame,
                PoseBlock(T_SH_init, name="T_SH%d@%.3f" % (tid, frame.t)),
                VecBlock(pred.theta_pred.copy(),
                         name="th%d@%.3f" % (tid, frame.t)),
                obs, pred.p_pred, pred.dtheta_pred)
            track.frames.append(hfr)
            track.obs_count += 1
            track.missed = 0

        for tid, track in self.tracks.items():
            if track.alive and tid not in matched_tracks:
                track.missed += 1
                if track.missed > cfg.track_max_missed:
                    track.alive = False

        # try to start new tracks from leftover stereo detections
        cams_present = sorted(dets_per_cam.keys())
        if len(cams_present) >= 2:
            ca, cb = cams_present[0], cams_present[1]
            left_a = assoc.unmatched.get(ca, [])
            left_b = assoc.unmatched.get(cb, [])
            pairing = hf.pair_stereo_detections(
                [dets_per_cam[ca][i] for i in left_a],
                [dets_per_cam[cb][i] for i in left_b],
                c_min=cfg.weights.confidence_min)
            for ia, ib in pairing.items():
                da = dets_per_cam[ca][left_a[ia]]
                db = dets_per_cam[cb][left_b[ib]]
                try:
                    T_SH, theta0, beta0 = hf.initialize_human(
                        da, db, self.cameras[ca], self.cameras[cb],
                        self.body_model, self.gmm_prior,
                        c_min=cfg.weights.confidence_min,
                        min_joints=cfg.min_init_joints,
                        rms_max=cfg.init_rms_max)
                except hf.InitializationError:
                    continue
                tid = self._next_track_id
                self._next_track_id += 1
                track = HumanTrack(tid, VecBlock(beta0,
                                                 name="beta%d" % tid))
                hfr = HumanFrameState(
                    frame,
                    PoseBlock(T_SH, name="T_SH%d@%.3f" % (tid, frame.t)),
                    VecBlock(theta0.copy(),
                             name="th%d@%.3f" % (tid, frame.t)),
                    {ca: da, cb: db}, None, None)
                track.frames.append(hfr)
                track.obs_count = 1
                self.tracks[tid] = track

    # ------------------------------------------------------------------
    # window management

    def _select_keyframe(self, frame):
        if not frame.landmark_ids:
            frame.is_keyframe = False
            return
        newest_kf = None
        for f in reversed(self.frames[:-1]):
            if f.is_keyframe and f.active:
                newest_kf = f
                break
        if newest_kf is None:
            frame.is_keyframe = True
            return
        overlap = len(frame.landmark_ids & newest_kf.landmark_ids) \
            / len(frame.landmark_ids)
        frame.is_keyframe = overlap < self.config.keyframe_overlap

    def _manage_window(self):
        cfg = self.config
        recent = self._recent_frames()
        while len(recent) > cfg.num_recent_frames:
            leaving = recent.pop(0)
            self._freeze_humans_at(leaving)
            if leaving.is_keyframe:
                leaving.status = "keyframe"
            else:
                self._demote_to_posegraph(leaving)
        kfs = self._keyframes()
        while len(kfs) > cfg.num_keyframes:
            self._demote_to_posegraph(kfs.pop(0))

    def _freeze_humans_at(self, frame):
        for track in self.tracks.values():
            for hfr in track.frames:
                if hfr.frame is frame and not hfr.frozen:
                    hfr.frozen = True
                    hfr.pose_block.constant = True
                    hfr.theta_block.constant = True

    def _demote_to_posegraph(self, frame):
        """Summarize the frame by a relative-pose edge and fix its pose."""
        cfg = self.config
        anchor = None
        best_gap = np.inf
        for f in self.frames:
            if f is frame or not f.active:
                continue
            gap = abs(f.t - frame.t)
            if gap < best_gap:
                anchor = f
                best_gap = gap
        frame.status = "posegraph"
        self._freeze_humans_at(frame)
        frame.sb_block = None
        self._preint_cache = {k: v for k, v in self._preint_cache.items()
                              if frame.index not in k}
        if anchor is None:
            frame.pose_block.constant = True
            return
        # nominal relative pose from current estimates, zero offset
        T_r = frame.pose()
        T_c = anchor.pose()
        rel = T_r.inverse().compose(T_c)
        gap = max(best_gap, 1e-3)
        s_pos = cfg.posegraph_sigma_pos * np.sqrt(gap / 1.0 + 1.0)
        s_rot = np.radians(cfg.posegraph_sigma_rot_deg) \
            * np.sqrt(gap / 1.0 + 1.0)
        sqrt_info = np.diag([1.0 / s_pos] * 3 + [1.0 / s_rot] * 3)
        edge = fmod.RelativePoseFactor(frame.pose_block, anchor.pose_block,
                                       rel.r, rel.q, sqrt_info=sqrt_info)
        frame.pose_block.constant = True
        self.posegraph_edges.append((frame, anchor, edge))

    # ------------------------------------------------------------------
    # problem assembly and solve

    def _solve_window(self):
        cfg = self.config
        w = cfg.weights
        problem = Problem()
        active = self.active_frames()
        active_set = set(id(f) for f in active)

        for f in active:
            problem.add_block(f.pose_block)
            if f.sb_block is not None:
                problem.add_block(f.sb_block)

        # landmark reprojections over the active window
        live_lms = set()
        for lm in self.landmarks.values():
            rows = [(fr, cam, uv) for (fr, cam, uv) in lm.obs
                    if id(fr) in active_set]
            if not rows:
                continue
            problem.add_block(lm.block)
            live_lms.add(lm.lid)
            for (fr, cam, uv) in rows:
                problem.add_factor(fmod.LandmarkReprojectionFactor(
                    fr.pose_block, lm.block, self.cameras[cam], uv,
                    pixel_sigma=w.pixel_sigma, robust=w.cauchy_scale))

        # inertial chain between consecutive active frames
        for fa, fb in zip(active, active[1:]):
            if fa.sb_block is None or fb.sb_block is None:
                continue
            pre = self._preintegrate(fa, fb)
            problem.add_factor(fmod.ImuFactor(
                fa.pose_block, fa.sb_block, fb.pose_block, fb.sb_block,
                pre, cfg.imu))

        # pose-graph edges with at least one active endpoint
        for (fr, fc, edge) in self.posegraph_edges:
            if fr.pose_block.constant and fc.pose_block.constant:
                continue
            problem.add_block(fr.pose_block)
            problem.add_block(fc.pose_block)
            problem.add_factor(edge)

        # human factors for non-frozen human frames
        posture_factors = []
        hinges = self.body_model.hinge_entries()
        for track in self.tracks.values():
            live = [hfr for hfr in track.frames if not hfr.frozen
                    and id(hfr.frame) in active_set]
            if live:
                problem.add_block(track.beta_block)
                if not track.beta_frozen:
                    problem.add_factor(fmod.ShapePriorFactor(
                        track.beta_block, lambda_beta=w.lambda_beta,
                        sigma_beta1=w.sigma_beta1))
            for hfr in live:
                problem.add_block(hfr.pose_block)
                problem.add_block(hfr.theta_block)
                for cam, det in hfr.obs.items():
                    for j in range(det.shape[0]):
                        if det[j, 2] <= w.confidence_min:
                            continue
                        problem.add_factor(fmod.HumanJointReprojectionFactor(
                            hfr.pose_block, hfr.theta_block,
                            track.beta_block, self.body_model,
                            self.cameras[cam], j, det[j, :2], det[j, 2],
                            pixel_sigma=w.pixel_sigma,
                            robust=w.cauchy_scale,
                            weighting=w.confidence_weighting))
                pf = fmod.PosturePriorFactor(hfr.theta_block, self.gmm_prior)
                posture_factors.append(pf)
                problem.add_factor(pf)
                if hinges:
                    problem.add_factor(fmod.JointAnglePriorFactor(
                        hfr.theta_block, hinges,
                        lambda_alpha=w.lambda_alpha, mode=w.angle_prior))
            # motion factors between consecutive track frames (newest active)
            for prev_h, cur_h in zip(track.frames, track.frames[1:]):
                if cur_h.frozen or id(cur_h.frame) not in active_set:
                    continue
                if cur_h.p_pred is None:
                    continue
                for b in (prev_h.frame.pose_block, cur_h.frame.pose_block,
                          prev_h.pose_block, cur_h.pose_block,
                          prev_h.theta_block, cur_h.theta_block):
                    problem.add_block(b)
                problem.add_factor(fmod.MotionTranslationFactor(
                    prev_h.frame.pose_block, cur_h.frame.pose_block,
                    prev_h.pose_block, cur_h.pose_block,
                    cur_h.p_pred, lambda_mp=w.lambda_mp))
                problem.add_factor(fmod.MotionPostureFactor(
                    prev_h.theta_block, cur_h.theta_block,
                    cur_h.dtheta_pred, lambda_mtheta=w.lambda_mtheta))

        if posture_factors:
            def reselect(values):
                for pf in posture_factors:
                    pf.reselect(values)
            problem.iteration_callbacks.append(reselect)

        report = smod.solve(problem, cfg.solve)
        self._last_problem_size = (len(problem.blocks), len(problem.factors))
        return report

    def _apply_freezes(self):
        n = self.config.shape_freeze_observations
        for track in self.tracks.values():
            if not track.beta_frozen and track.obs_count >= n:
                track.beta_frozen = True
                track.beta_block.constant = True

    # ------------------------------------------------------------------
    # outputs

    def get_trajectory(self):
        return [(f.t, f.pose()) for f in self.frames]

    def get_human_trajectories(self):
        out = {}
        for tid, track in self.tracks.items():
            rows = []
            for hfr in track.frames:
                T_WH = hfr.frame.pose().compose(hfr.pose_block.pose())
                rows.append((hfr.frame.t, T_WH,
                             hfr.theta_block.value.copy(),
                             track.beta_block.value.copy()))
            out[tid] = rows
        return out

    def get_human_joints(self, track_id, t=None):
        """World-frame detector joints of one track at time t (default:
        latest). Raises KeyError for unknown ids."""
        track = self.tracks[track_id]
        if not track.frames:
            raise KeyError("track %d has no frames" % track_id)
        if t is None:
            hfr = track.frames[-1]
        else:
            hfr = min(track.frames, key=lambda h: abs(h.frame.t - t))
        T_WH = hfr.frame.pose().compose(hfr.pose_block.pose())
        joints_H = self.body_model.detector_joints(
            track.beta_block.value, hfr.theta_block.value)[:, :3]
        return (T_WH.rotation_matrix() @ joints_H.T).T + T_WH.r

    def problem_size(self):
        return getattr(self, "_last_problem_size", (0, 0))
