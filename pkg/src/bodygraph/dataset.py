"""Dataset file formats: reading and writing everything the estimator
consumes and the simulator produces.

Files in a dataset directory:
    calibration.json   cameras (intrinsics, distortion, T_SC) + IMU params
    imu.csv            t, wx, wy, wz, ax, ay, az
    landmarks.csv      t, cam, landmark_id, u, v
    detections.jsonl   one JSON record per (frame, camera, person):
                       {"t": ..., "cam": ..., "joints": [[u, v, c], ...]}
    gt_trajectory.txt  t tx ty tz qx qy qz qw
    gt_joints.csv      t, human_id, joint_id, x, y, z
    gt_landmarks.csv   landmark_id, x, y, z

Floats are written with repr-exact precision so write/read/write round
trips are byte-identical.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel
from .imu import ImuMeasurement, ImuParams


def fmt_float(x):
    """Shortest representation that round-trips a float64."""
    return repr(float(x))


@dataclass
class FrameInput:
    """Measurements of one multi-camera frame."""
    t: float
    landmark_obs: list = field(default_factory=list)   # (cam, lm_id, uv)
    detections: list = field(default_factory=list)     # (cam, joints (J,3))


@dataclass
class Dataset:
    cameras: list
    imu_params: ImuParams
    imu: list                       # ImuMeasurement, sorted
    frames: list                    # FrameInput, sorted by t

    def frame_times(self):
        return np.array([f.t for f in self.frames])


class DatasetError(ValueError):
    def __init__(self, path, msg, line=None):
        loc = "%s:%d" % (path, line) if line is not None else path
        super().__init__("%s: %s" % (loc, msg))
        self.path = path
        self.line = line


# ---------------------------------------------------------------------------
# calibration

def write_calibration(path, cameras, imu_params):
    data = {"cameras": [c.to_dict() for c in cameras],
            "imu": imu_params.to_dict()}
    with open(path, "w") as f:
        json.dump(data, f, indent=1)
        f.write("\n")


def read_calibration(path):
    try:
        with open(path) as f:
            data = json.load(f)
        cameras = [CameraModel.from_dict(c) for c in data["cameras"]]
        imu_params = ImuParams.from_dict(data["imu"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(path, "bad calibration: %s" % exc)
    return cameras, imu_params


# ---------------------------------------------------------------------------
# IMU

def write_imu_csv(path, measurements):
    with open(path, "w") as f:
        f.write("t,wx,wy,wz,ax,ay,az\n")
        for m in measurements:
            f.write(",".join([fmt_float(m.t)]
                             + [fmt_float(v) for v in m.gyro]
                             + [fmt_float(v) for v in m.acc]) + "\n")


def read_imu_csv(path):
    out = []
    last_t = -np.inf
    with open(path) as f:
        for i, line in enumerate(f):
            if i == 0 and line.startswith("t,"):
                continue
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            if len(parts) != 7:
                raise DatasetError(path, "expected 7 columns", i + 1)
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise DatasetError(path, "non-numeric value", i + 1)
            if vals[0] <= last_t:
                raise DatasetError(path, "non-increasing timestamp", i + 1)
            last_t = vals[0]
            out.append(ImuMeasurement(vals[0], np.array(vals[1:4]),
                                      np.array(vals[4:7])))
    return out


# ---------------------------------------------------------------------------
# landmark observations

def write_landmark_obs_csv(path, rows):
    """rows: iterable of (t, cam, landmark_id, u, v)."""
    with open(path, "w") as f:
        f.write("t,cam,landmark_id,u,v\n")
        for (t, cam, lid, u, v) in rows:
            f.write("%s,%d,%d,%s,%s\n" % (fmt_float(t), cam, lid,
                                          fmt_float(u), fmt_float(v)))


def read_landmark_obs_csv(path):
    rows = []
    with open(path) as f:
        for i, line in enumerate(f):
            if i == 0 and line.startswith("t,"):
                continue
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            if len(parts) != 5:
                raise DatasetError(path, "expected 5 columns", i + 1)
            try:
                rows.append((float(parts[0]), int(parts[1]), int(parts[2]),
                             float(parts[3]), float(parts[4])))
            except ValueError:
                raise DatasetError(path, "non-numeric value", i + 1)
    return rows


# ---------------------------------------------------------------------------
# human keypoint detections

def write_detections_jsonl(path, records):
    """records: iterable of (t, cam, joints (J,3) array)."""
    with open(path, "w") as f:
        for (t, cam, joints) in records:
            rec = {"t": float(t), "cam": int(cam),
                   "joints": [[float(u), float(v), float(c)]
                              for (u, v, c) in joints]}
            f.write(json.dumps(rec) + "\n")


def read_detections_jsonl(path):
    records = []
    with open(path) as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                joints = np.asarray(rec["joints"], dtype=float)
            except (ValueError, KeyError) as exc:
                raise DatasetError(path, "bad record: %s" % exc, i + 1)
            if joints.size and (joints.ndim != 2 or joints.shape[1] != 3):
                raise DatasetError(path, "joints must be [[u,v,c], ...]",
                                   i + 1)
            records.append((float(rec["t"]), int(rec["cam"]), joints))
    return records


# ---------------------------------------------------------------------------
# trajectories and joints

def write_trajectory_txt(path, stamped_poses):
    """stamped_poses: iterable of (t, Pose); wire format t tx..qw."""
    with open(path, "w") as f:
        for (t, pose) in stamped_poses:
            vals = [t] + list(pose.to_wire())
            f.write(" ".join(fmt_float(v) for v in vals) + "\n")


def read_trajectory_txt(path):
    from .geometry import Pose
    out = []
    with open(path) as f:
        for i, line in enumerate(f):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 8:
                raise DatasetError(path, "expected 8 columns", i + 1)
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise DatasetError(path, "non-numeric value", i + 1)
            out.append((vals[0], Pose.from_wire(np.array(vals[1:]))))
    return out


def write_joints_csv(path, rows):
    """rows: iterable of (t, human_id, joint_id, xyz)."""
    with open(path, "w") as f:
        f.write("t,human_id,joint_id,x,y,z\n")
        for (t, hid, jid, p) in rows:
            f.write("%s,%d,%d,%s,%s,%s\n"
                    % (fmt_float(t), hid, jid,
                       fmt_float(p[0]), fmt_float(p[1]), fmt_float(p[2])))


def read_joints_csv(path):
    rows = []
    with open(path) as f:
        for i, line in enumerate(f):
            if i == 0 and line.startswith("t,"):
                continue
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            if len(parts) != 6:
                raise DatasetError(path, "expected 6 columns", i + 1)
            try:
                rows.append((float(parts[0]), int(parts[1]), int(parts[2]),
                             np.array([float(parts[3]), float(parts[4]),
                                       float(parts[5])])))
            except ValueError:
                raise DatasetError(path, "non-numeric value", i + 1)
    return rows


def write_points_csv(path, rows):
    """rows: iterable of (point_id, xyz)."""
    with open(path, "w") as f:
        f.write("landmark_id,x,y,z\n")
        for (pid, p) in rows:
            f.write("%d,%s,%s,%s\n" % (pid, fmt_float(p[0]),
                                       fmt_float(p[1]), fmt_float(p[2])))


def read_points_csv(path):
    rows = []
    with open(path) as f:
        for i, line in enumerate(f):
            if i == 0 and line.startswith("landmark_id"):
                continue
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            rows.append((int(parts[0]), np.array([float(parts[1]),
                                                  float(parts[2]),
                                                  float(parts[3])])))
    return rows


# ---------------------------------------------------------------------------
# whole-dataset assembly

CALIB_FILE = "calibration.json"
IMU_FILE = "imu.csv"
LANDMARK_FILE = "landmarks.csv"
DETECTION_FILE = "detections.jsonl"
GT_TRAJECTORY_FILE = "gt_trajectory.txt"
GT_JOINTS_FILE = "gt_joints.csv"
GT_LANDMARKS_FILE = "gt_landmarks.csv"


def group_into_frames(landmark_rows, detection_records, tol=1e-7):
    """Group per-observation rows into FrameInput objects by timestamp."""
    times = sorted({round(t, 9) for t, *_ in landmark_rows}
                   | {round(t, 9) for t, _, _ in detection_records})
    frames = {t: FrameInput(t) for t in times}
    for (t, cam, lid, u, v) in landmark_rows:
        frames[round(t, 9)].landmark_obs.append((cam, lid,
                                                 np.array([u, v])))
    for (t, cam, joints) in detection_records:
        frames[round(t, 9)].detections.append((cam, joints))
    return [frames[t] for t in times]


def load_dataset(dataset_dir):
    calib = os.path.join(dataset_dir, CALIB_FILE)
    if not os.path.exists(calib):
        raise DatasetError(calib, "missing calibration file")
    cameras, imu_params = read_calibration(calib)
    imu = read_imu_csv(os.path.join(dataset_dir, IMU_FILE))
    lm_path = os.path.join(dataset_dir, LANDMARK_FILE)
    lm_rows = read_landmark_obs_csv(lm_path) if os.path.exists(lm_path) else []
    det_path = os.path.join(dataset_dir, DETECTION_FILE)
    det_records = (read_detections_jsonl(det_path)
                   if os.path.exists(det_path) else [])
    frames = group_into_frames(lm_rows, det_records)
    return Dataset(cameras, imu_params, imu, frames)
