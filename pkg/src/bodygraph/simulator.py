"""Deterministic synthetic scene generator.

World frame is z-up. The sensor rig moves on an analytic trajectory inside
a cylindrical "room" whose wall carries the landmarks; humans stand or walk
between the sensor and the wall so they can occlude landmark observations.
IMU readings come from exact analytic derivatives; all randomness flows
from one seeded generator, so identical configs give identical datasets.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .body_model import load_body_model
from . import assets
from .camera import CameraModel
from .dataset import (CALIB_FILE, DETECTION_FILE, GT_JOINTS_FILE,
                      GT_LANDMARKS_FILE, GT_TRAJECTORY_FILE, IMU_FILE,
                      LANDMARK_FILE, Dataset, FrameInput, write_calibration,
                      write_detections_jsonl, write_imu_csv,
                      write_joints_csv, write_landmark_obs_csv,
                      write_points_csv, write_trajectory_txt)
from .geometry import Pose
from .imu import ImuMeasurement, ImuParams


@dataclass
class HumanSimConfig:
    kind: str = "stand"            # stand | walk-circle | sinusoid-joints
    position: tuple = (2.5, 0.0)   # ground (x, y); walk-circle: circle center
    facing: float = 3.14159265     # rad, yaw of body forward axis
    circle_radius: float = 0.8
    speed: float = 0.25            # rad/s along the walk circle
    joint_amp: float = 0.35
    joint_freq: float = 0.5        # Hz
    beta: tuple = tuple([0.0] * 10)


@dataclass
class SimNoiseConfig:
    pixel_sigma: float = 0.0
    imu_noise: bool = False
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    detection_dropout: float = 0.0       # per-joint probability
    conf_falloff: float = 0.05           # confidence loss per meter beyond 2 m
    landmark_dropout: float = 0.0        # unconditional observation dropout
    human_occlusion_prob: float = 0.0    # drop prob inside a human's bbox
    occlusion_margin: float = 0.15       # bbox inflation fraction


@dataclass
class SimConfig:
    seed: int = 0
    duration: float = 10.0
    frame_rate: float = 15.0
    imu_rate: float = 200.0
    trajectory: str = "circle"     # circle | lissajous | spline
    ramp_time: float = 1.0         # start-at-rest ramp duration
    traj_radius: float = 1.5
    traj_height: float = 1.2
    traj_rate: float = 0.4         # rad/s
    waypoints: list = field(default_factory=list)
    n_landmarks: int = 200
    wall_radius: float = 4.0
    wall_height: float = 2.5
    humans: list = field(default_factory=list)
    noise: SimNoiseConfig = field(default_factory=SimNoiseConfig)
    imu_params: ImuParams = field(default_factory=ImuParams)
    body_model_path: str = ""

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.frame_rate <= 0 or self.imu_rate <= 0:
            raise ValueError("rates must be positive")
        if (self.imu_rate / self.frame_rate) % 1.0 > 1e-9:
            raise ValueError("frame rate must divide IMU rate")

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "humans" in d:
            d["humans"] = [HumanSimConfig(**h) for h in d["humans"]]
        if "noise" in d:
            d["noise"] = SimNoiseConfig(**d["noise"])
        if "imu_params" in d:
            d["imu_params"] = ImuParams.from_dict(d["imu_params"])
        return SimConfig(**d)


@dataclass
class GroundTruth:
    frame_times: np.ndarray
    sensor_poses: list                 # Pose per frame
    landmarks: dict                    # id -> xyz
    human_root_poses: dict             # id -> [Pose per frame]
    human_thetas: dict                 # id -> (F, 3*(J-1))
    human_betas: dict                  # id -> (K,)
    human_joints: dict                 # id -> (F, J_det, 3)
    warnings: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# analytic sensor trajectories

def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# sensor axes at yaw 0: x right(tangent), y down, z forward (outward radial)
_R0 = np.array([[0.0, 0.0, 1.0],
                [-1.0, 0.0, 0.0],
                [0.0, -1.0, 0.0]])


class _CircleTrajectory:
    def __init__(self, cfg):
        self.r = cfg.traj_radius
        self.h = cfg.traj_height
        self.w = cfg.traj_rate

    def position(self, t):
        p = self.w * t
        return np.stack([self.r * np.cos(p), self.r * np.sin(p),
                         np.full_like(p, self.h, dtype=float)], axis=-1)

    def acceleration(self, t):
        p = self.w * t
        w2 = self.w * self.w
        return np.stack([-self.r * w2 * np.cos(p), -self.r * w2 * np.sin(p),
                         np.zeros_like(p)], axis=-1)

    def velocity(self, t):
        p = self.w * t
        return np.stack([-self.r * self.w * np.sin(p),
                         self.r * self.w * np.cos(p),
                         np.zeros_like(p)], axis=-1)

    def yaw(self, t):
        return self.w * t

    def yaw_rate(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.w)


class _LissajousTrajectory:
    def __init__(self, cfg):
        self.r = cfg.traj_radius
        self.h = cfg.traj_height
        self.w = cfg.traj_rate

    def position(self, t):
        w = self.w
        return np.stack([self.r * np.sin(w * t),
                         0.7 * self.r * np.sin(2.0 * w * t),
                         self.h + 0.15 * np.sin(3.0 * w * t)], axis=-1)

    def velocity(self, t):
        w = self.w
        return np.stack([self.r * w * np.cos(w * t),
                         1.4 * self.r * w * np.cos(2.0 * w * t),
                         0.45 * w * np.cos(3.0 * w * t)], axis=-1)

    def acceleration(self, t):
        w = self.w
        return np.stack([-self.r * w * w * np.sin(w * t),
                         -2.8 * self.r * w * w * np.sin(2.0 * w * t),
                         -1.35 * w * w * np.sin(3.0 * w * t)], axis=-1)

    def yaw(self, t):
        return 0.3 * self.w * t

    def yaw_rate(self, t):
        return np.full_like(np.asarray(t, dtype=float), 0.3 * self.w)


class _SplineTrajectory:
    def __init__(self, cfg):
        from scipy.interpolate import CubicSpline
        wp = np.asarray(cfg.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[0] < 4 or wp.shape[1] != 3:
            raise ValueError("spline trajectory needs >= 4 xyz waypoints")
        knots = np.linspace(0.0, cfg.duration, wp.shape[0])
        self._s = CubicSpline(knots, wp, bc_type="clamped")
        self._v = self._s.derivative(1)
        self._a = self._s.derivative(2)
        self.w = cfg.traj_rate

    def position(self, t):
        return self._s(t)

    def velocity(self, t):
        return self._v(t)

    def acceleration(self, t):
        return self._a(t)

    def yaw(self, t):
        return self.w * np.asarray(t, dtype=float)

    def yaw_rate(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.w)


class _TimeWarp:
    """Start-at-rest wrapper: warps time with a quintic ramp so position,
    velocity, and acceleration are all zero-derivative at t = 0 (a rig
    picked up from rest), then runs the base trajectory at unit rate."""

    def __init__(self, base, ramp):
        self.base = base
        self.ramp = float(ramp)

    def _warp(self, t):
        t = np.asarray(t, dtype=float)
        u = np.clip(t / self.ramp, 0.0, 1.0)
        # tau' is the quintic smoothstep; tau its integral
        s = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
        tau_ramp = self.ramp * (u ** 4) * (2.5 - 3.0 * u + u * u)
        tau = np.where(t <= self.ramp, tau_ramp, t - 0.5 * self.ramp)
        dtau = np.where(t <= self.ramp, s, 1.0)
        ddtau = np.where(
            t <= self.ramp,
            (30.0 * u * u * (1.0 - u) ** 2) / self.ramp, 0.0)
        return tau, dtau, ddtau

    def position(self, t):
        tau, _, _ = self._warp(t)
        return self.base.position(tau)

    def velocity(self, t):
        tau, d, _ = self._warp(t)
        return np.asarray(self.base.velocity(tau)) * np.expand_dims(d, -1) \
            if np.ndim(t) else np.asarray(self.base.velocity(tau)) * d

    def acceleration(self, t):
        tau, d, dd = self._warp(t)
        a = np.asarray(self.base.acceleration(tau))
        v = np.asarray(self.base.velocity(tau))
        if np.ndim(t):
            return a * np.expand_dims(d * d, -1) + v * np.expand_dims(dd, -1)
        return a * (d * d) + v * dd

    def yaw(self, t):
        tau, _, _ = self._warp(t)
        return self.base.yaw(tau)

    def yaw_rate(self, t):
        tau, d, _ = self._warp(t)
        return np.asarray(self.base.yaw_rate(tau)) * d


_TRAJECTORIES = {"circle": _CircleTrajectory,
                 "lissajous": _LissajousTrajectory,
                 "spline": _SplineTrajectory}


def make_trajectory(config):
    base = _TRAJECTORIES[config.trajectory](config)
    if config.ramp_time > 0:
        return _TimeWarp(base, config.ramp_time)
    return base


def sensor_pose_at(traj, t):
    R = _rot_z(float(traj.yaw(t))) @ _R0
    return Pose(np.asarray(traj.position(t), dtype=float).reshape(3),
                geo.matrix_to_quat(R))


# ---------------------------------------------------------------------------
# humans

def _human_root_pose(h, t):
    base = geo.matrix_to_quat(
        np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]))
    if h.kind == "walk-circle":
        a = h.speed * t
        cx, cy = h.position
        pos = np.array([cx + h.circle_radius * np.cos(a),
                        cy + h.circle_radius * np.sin(a), 0.0])
        facing = a + np.pi / 2.0
    else:
        pos = np.array([h.position[0], h.position[1], 0.0])
        facing = h.facing
    q = geo.quat_mul(geo.so3_exp(np.array([0.0, 0.0, facing])), base)
    return Pose(pos, q)


def _human_theta(h, t, n_posture_joints):
    theta = np.zeros(3 * n_posture_joints)
    if h.kind == "stand":
        return theta
    w = 2.0 * np.pi * h.joint_freq
    amp = h.joint_amp
    s = np.sin(w * t)
    # hips (joints 1, 2) swing in antiphase about x
    theta[3 * 0 + 0] = 0.6 * amp * s
    theta[3 * 1 + 0] = -0.6 * amp * s
    # knees (4, 5): legal flexion is positive about x
    theta[3 * 3 + 0] = 0.5 * amp * (1.0 + np.sin(w * t + np.pi / 2.0))
    theta[3 * 4 + 0] = 0.5 * amp * (1.0 - np.sin(w * t + np.pi / 2.0))
    if n_posture_joints >= 19:
        # shoulders (16, 17) about x, elbows (18, 19) about y (legal signs)
        theta[3 * 15 + 0] = -0.5 * amp * s
        theta[3 * 16 + 0] = 0.5 * amp * s
        theta[3 * 17 + 1] = -0.4 * amp * (1.0 + s) / 2.0
        theta[3 * 18 + 1] = 0.4 * amp * (1.0 - s) / 2.0
    return theta


# ---------------------------------------------------------------------------
# generation

def default_stereo_rig():
    """0.11 m baseline stereo pair, slight inward distortion on cam 0."""
    cam0 = CameraModel(400.0, 400.0, 320.0, 240.0, 640, 480, "radtan",
                       [-0.05, 0.01, 0.0, 0.0],
                       Pose(np.array([-0.055, 0.0, 0.0]), geo.quat_identity()))
    cam1 = CameraModel(400.0, 400.0, 320.0, 240.0, 640, 480, "none", None,
                       Pose(np.array([0.055, 0.0, 0.0]), geo.quat_identity()))
    return [cam0, cam1]


def _bbox_of(pixels):
    return (pixels[:, 0].min(), pixels[:, 1].min(),
            pixels[:, 0].max(), pixels[:, 1].max())


def generate(config, cameras=None):
    """Build (Dataset, GroundTruth) from a SimConfig."""
    rng = np.random.default_rng(config.seed)
    cameras = cameras or default_stereo_rig()
    params = config.imu_params
    noise = config.noise
    model = load_body_model(config.body_model_path
                            or assets.path(assets.FULL_BODY_MODEL))

    traj = make_trajectory(config)
    n_frames = int(round(config.duration * config.frame_rate)) + 1
    frame_times = np.arange(n_frames) / config.frame_rate

    # IMU stream from analytic derivatives
    n_imu = int(round(config.duration * config.imu_rate)) + 1
    t_imu = np.arange(n_imu) / config.imu_rate
    g_W = params.gravity
    bg = np.asarray(noise.gyro_bias, dtype=float)
    ba = np.asarray(noise.accel_bias, dtype=float)
    imu = []
    for t in t_imu:
        R_WS = _rot_z(float(traj.yaw(t))) @ _R0
        w_world = np.array([0.0, 0.0, float(traj.yaw_rate(t))])
        gyro = R_WS.T @ w_world + bg
        acc = R_WS.T @ (np.asarray(traj.acceleration(t)).reshape(3) - g_W) + ba
        if noise.imu_noise:
            gyro = gyro + rng.normal(
                scale=params.sigma_g * np.sqrt(config.imu_rate), size=3)
            acc = acc + rng.normal(
                scale=params.sigma_a * np.sqrt(config.imu_rate), size=3)
        imu.append(ImuMeasurement(float(t), gyro, acc))

    # landmarks on the room wall
    ang = rng.uniform(0.0, 2.0 * np.pi, size=config.n_landmarks)
    hei = rng.uniform(0.1, config.wall_height, size=config.n_landmarks)
    rad = config.wall_radius + rng.normal(scale=0.05, size=config.n_landmarks)
    lms = np.stack([rad * np.cos(ang), rad * np.sin(ang), hei], axis=1)
    landmarks = {i: lms[i] for i in range(config.n_landmarks)}

    gt = GroundTruth(frame_times, [], landmarks, {}, {}, {}, {})
    for hid, h in enumerate(config.humans):
        gt.human_betas[hid] = np.asarray(h.beta, dtype=float)
        gt.human_root_poses[hid] = []
        gt.human_thetas[hid] = []
        gt.human_joints[hid] = []

    frames = []
    n_lm_obs_total = 0
    n_lm_obs_occluded = 0
    human_seen = np.zeros(len(config.humans), dtype=bool)

    for t in frame_times:
        T_WS = sensor_pose_at(traj, t)
        gt.sensor_poses.append(T_WS)
        frame = FrameInput(float(t))

        # humans first: their bboxes gate landmark occlusion
        human_boxes = []   # (cam_idx, bbox, root_depth)
        for hid, h in enumerate(config.humans):
            T_WH = _human_root_pose(h, t)
            theta = _human_theta(h, t, model.n_posture_joints)
            beta = gt.human_betas[hid]
            joints_H = model.detector_joints(beta, theta)[:, :3]
            joints_W = (T_WH.rotation_matrix() @ joints_H.T).T + T_WH.r
            gt.human_root_poses[hid].append(T_WH)
            gt.human_thetas[hid].append(theta)
            gt.human_joints[hid].append(joints_W)
            for ci, cam in enumerate(cameras):
                T_WC = T_WS.compose(cam.T_SC)
                T_CW = T_WC.inverse()
                p_C = (T_CW.rotation_matrix() @ joints_W.T).T + T_CW.r
                uv, _, valid = cam.project_batch(p_C)
                inside = valid & (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width - 1) \
                    & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height - 1)
                if np.count_nonzero(inside) < 3:
                    continue
                human_seen[hid] = True
                root_depth = float(p_C[0, 2])
                box = _bbox_of(uv[inside])
                human_boxes.append((ci, box, root_depth))
                det = np.zeros((model.n_detector_joints, 3))
                rng_conf = rng.uniform(size=model.n_detector_joints)
                for j in range(model.n_detector_joints):
                    if not inside[j]:
                        continue
                    if noise.detection_dropout > 0 and \
                            rng_conf[j] < noise.detection_dropout:
                        continue
                    rngn = rng.normal(scale=noise.pixel_sigma, size=2) \
                        if noise.pixel_sigma > 0 else 0.0
                    conf = float(np.clip(
                        1.0 - noise.conf_falloff * max(0.0, p_C[j, 2] - 2.0),
                        0.3, 1.0))
                    det[j, :2] = uv[j] + rngn
                    det[j, 2] = conf
                if np.count_nonzero(det[:, 2] > 0) >= 3:
                    frame.detections.append((ci, det))

        # landmark observations
        for ci, cam in enumerate(cameras):
            T_WC = T_WS.compose(cam.T_SC)
            T_CW = T_WC.inverse()
            p_C = (T_CW.rotation_matrix() @ lms.T).T + T_CW.r
            uv, _, valid = cam.project_batch(p_C)
            inside = valid & (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width - 1) \
                & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height - 1)
            for lid in np.nonzero(inside)[0]:
                n_lm_obs_total += 1
                px = uv[lid]
                occluded = False
                for (bci, box, rdepth) in human_boxes:
                    if bci != ci:
                        continue
                    mx = noise.occlusion_margin * (box[2] - box[0])
                    my = noise.occlusion_margin * (box[3] - box[1])
                    if (box[0] - mx <= px[0] <= box[2] + mx
                            and box[1] - my <= px[1] <= box[3] + my
                            and p_C[lid, 2] > rdepth):
                        if rng.uniform() < noise.human_occlusion_prob:
                            occluded = True
                        break
                if occluded:
                    n_lm_obs_occluded += 1
                    continue
                if noise.landmark_dropout > 0 and \
                        rng.uniform() < noise.landmark_dropout:
                    continue
                obs = px + (rng.normal(scale=noise.pixel_sigma, size=2)
                            if noise.pixel_sigma > 0 else 0.0)
                frame.landmark_obs.append((ci, int(lid), obs))
        frames.append(frame)

    for hid in gt.human_root_poses:
        gt.human_thetas[hid] = np.asarray(gt.human_thetas[hid])
        gt.human_joints[hid] = np.asarray(gt.human_joints[hid])
    for hid, seen in enumerate(human_seen):
        if not seen:
            gt.warnings.append("human %d never visible in any frame" % hid)
    gt.stats = {
        "n_frames": n_frames,
        "n_landmark_obs": n_lm_obs_total - n_lm_obs_occluded,
        "occluded_fraction": (n_lm_obs_occluded / n_lm_obs_total
                              if n_lm_obs_total else 0.0),
        "n_detections": int(sum(len(f.detections) for f in frames)),
    }
    ds = Dataset(cameras, params, imu, frames)
    return ds, gt


def write_dataset(ds, gt, out_dir, sim_config=None):
    """Emit all dataset + ground-truth files into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    write_calibration(os.path.join(out_dir, CALIB_FILE), ds.cameras,
                      ds.imu_params)
    write_imu_csv(os.path.join(out_dir, IMU_FILE), ds.imu)
    lm_rows = []
    det_records = []
    for f in ds.frames:
        for (cam, lid, uv) in f.landmark_obs:
            lm_rows.append((f.t, cam, lid, uv[0], uv[1]))
        for (cam, joints) in f.detections:
            det_records.append((f.t, cam, joints))
    write_landmark_obs_csv(os.path.join(out_dir, LANDMARK_FILE), lm_rows)
    write_detections_jsonl(os.path.join(out_dir, DETECTION_FILE), det_records)
    if gt is not None:
        write_trajectory_txt(os.path.join(out_dir, GT_TRAJECTORY_FILE),
                             list(zip(gt.frame_times, gt.sensor_poses)))
        joint_rows = []
        for hid, joints in gt.human_joints.items():
            for fi, t in enumerate(gt.frame_times):
                for j in range(joints.shape[1]):
                    joint_rows.append((t, hid, j, joints[fi, j]))
        write_joints_csv(os.path.join(out_dir, GT_JOINTS_FILE), joint_rows)
        write_points_csv(os.path.join(out_dir, GT_LANDMARKS_FILE),
                         sorted(gt.landmarks.items()))
        for hid, poses in gt.human_root_poses.items():
            write_trajectory_txt(
                os.path.join(out_dir, "gt_human_%d_root.txt" % hid),
                list(zip(gt.frame_times, poses)))
        summary = dict(gt.stats)
        summary["warnings"] = gt.warnings
        if sim_config is not None:
            summary["seed"] = sim_config.seed
        with open(os.path.join(out_dir, "sim_summary.json"), "w") as f:
            json.dump(summary, f, indent=1)
            f.write("\n")
