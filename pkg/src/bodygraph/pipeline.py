"""Dataset-to-estimator streaming and result serialization."""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import write_joints_csv, write_trajectory_txt
from .estimator import Estimator, FrameRejected


@dataclass
class RunResult:
    trajectory: list = field(default_factory=list)     # (t, Pose)
    human_roots: dict = field(default_factory=dict)    # id -> [(t, Pose)]
    human_joint_rows: list = field(default_factory=list)
    timing: list = field(default_factory=list)         # (t, solve_ms, total_ms, iters)
    reports: list = field(default_factory=list)
    rejected_frames: list = field(default_factory=list)

    def mean_solve_ms(self):
        return float(np.mean([r[1] for r in self.timing])) if self.timing else 0.0

    def mean_total_ms(self):
        return float(np.mean([r[2] for r in self.timing])) if self.timing else 0.0

    def fps(self):
        m = self.mean_total_ms()
        return 1000.0 / m if m > 0 else float("inf")


def run_dataset(ds, config, enable_humans=True, max_frames=None,
                progress=None):
    """Stream a Dataset causally through a fresh Estimator."""
    est = Estimator(config, ds.cameras, enable_humans=enable_humans)
    imu = ds.imu
    cursor = 0
    result = RunResult()
    frames = ds.frames if max_frames is None else ds.frames[:max_frames]
    for fi, frame in enumerate(frames):
        batch = []
        while cursor < len(imu) and imu[cursor].t <= frame.t + 1e-9:
            batch.append(imu[cursor])
            cursor += 1
        t0 = time.perf_counter()
        try:
            report = est.add_frame(frame.t, batch, frame.landmark_obs,
                                   frame.detections)
        except FrameRejected as exc:
            result.rejected_frames.append((frame.t, str(exc)))
            continue
        total_ms = (time.perf_counter() - t0) * 1000.0
        result.timing.append((frame.t, report.wall_time_s * 1000.0,
                              total_ms, report.iterations))
        result.reports.append(report.to_dict())
        if progress is not None:
            progress(fi, len(frames))

    result.trajectory = est.get_trajectory()
    for tid, rows in est.get_human_trajectories().items():
        result.human_roots[tid] = [(t, T_WH) for (t, T_WH, _, _) in rows]
        for (t, _, _, _) in rows:
            joints = est.get_human_joints(tid, t)
            for j in range(joints.shape[0]):
                result.human_joint_rows.append((t, tid, j, joints[j]))
    result.estimator = est
    return result


def write_run_result(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_trajectory_txt(os.path.join(out_dir, "trajectory.txt"),
                         result.trajectory)
    for tid, rows in result.human_roots.items():
        write_trajectory_txt(os.path.join(out_dir,
                                          "human_%d_root.txt" % tid), rows)
    write_joints_csv(os.path.join(out_dir, "human_joints.csv"),
                     result.human_joint_rows)
    with open(os.path.join(out_dir, "timing.csv"), "w") as f:
        f.write("t,solve_ms,total_ms,iterations\n")
        for (t, s, tot, it) in result.timing:
            f.write("%.9f,%.6f,%.6f,%d\n" % (t, s, tot, it))
    with open(os.path.join(out_dir, "solve_reports.json"), "w") as f:
        json.dump(result.reports, f, indent=1)
        f.write("\n")
