"""Human detection ingestion: 3D-2D track association, motion prediction,
and stereo initialization of new tracks.

Tracks are propagated with a pluggable motion predictor (constant velocity
by default), projected into each camera, and greedily matched to keypoint
detections by bounding-box overlap with a root-aligned mean joint distance
tie-break. Detections that stay unmatched are paired across the stereo rig
and triangulated into new human states.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .camera import TriangulationError, triangulate_stereo
from .geometry import Pose


@dataclass
class MotionPrediction:
    p_pred: np.ndarray              # expected root translation in H_{k-1}
    dtheta_pred: np.ndarray         # expected posture change
    T_WH_pred: Pose                 # propagated world pose (for association)
    theta_pred: np.ndarray


@dataclass
class AssociationResult:
    matches: dict = field(default_factory=dict)      # cam -> {track_id: det}
    unmatched: dict = field(default_factory=dict)    # cam -> [det indices]
    lost_tracks: list = field(default_factory=list)


class ConstantVelocityPredictor:
    """Default motion model: repeat the last body-frame motion, scaled by
    the timestep ratio. One-state histories predict zero motion."""

    def predict(self, history, dt):
        """history: list of (t, T_WH, theta), oldest first."""
        t_last, T_last, theta_last = history[-1]
        n = theta_last.shape[0]
        if len(history) < 2 or dt <= 0:
            return MotionPrediction(np.zeros(3), np.zeros(n), T_last,
                                    theta_last.copy())
        t_prev, T_prev, theta_prev = history[-2]
        dt_prev = t_last - t_prev
        if dt_prev <= 0:
            return MotionPrediction(np.zeros(3), np.zeros(n), T_last,
                                    theta_last.copy())
        s = dt / dt_prev
        rel = T_prev.inverse().compose(T_last)
        p_pred = s * rel.r
        dq = s * geo.so3_log(rel.q)
        dtheta = s * (theta_last - theta_prev)
        T_pred = T_last.compose(Pose(p_pred, geo.so3_exp(dq)))
        return MotionPrediction(p_pred, dtheta, T_pred, theta_last + dtheta)


def keypoint_bbox(points, valid):
    """Axis-aligned box over valid 2D points; None if fewer than 2."""
    if np.count_nonzero(valid) < 2:
        return None
    p = points[valid]
    return (float(p[:, 0].min()), float(p[:, 1].min()),
            float(p[:, 0].max()), float(p[:, 1].max()))


def bbox_iou(a, b):
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    denom = area_a + area_b - inter
    return inter / denom if denom > 0 else 0.0


def root_aligned_distance(track_px, track_valid, det, c_min=0.25):
    """Mean joint distance after subtracting the root pixel from both sets.

    Root is joint 0; pairs need a confident detection and a valid projection.
    Returns inf when the root or every pair is unavailable.
    """
    if not track_valid[0] or det[0, 2] <= c_min:
        return np.inf
    both = track_valid & (det[:, 2] > c_min)
    both[0] = False
    if not np.any(both):
        return np.inf
    t_rel = track_px[both] - track_px[0]
    d_rel = det[both, :2] - det[0, :2]
    return float(np.mean(np.linalg.norm(t_rel - d_rel, axis=1)))


def _greedy_match(pairs, gate):
    """pairs: (score_iou, tiebreak_dist, a, b); greedy on descending IoU."""
    order = sorted(pairs, key=lambda x: (-x[0], x[1], x[2], x[3]))
    used_a, used_b = set(), set()
    out = {}
    for (iou, _, a, b) in order:
        if iou < gate or a in used_a or b in used_b:
            continue
        out[a] = b
        used_a.add(a)
        used_b.add(b)
    return out


def associate(track_projections, detections_per_cam, iou_gate=0.3,
              c_min=0.25):
    """Match propagated tracks to detections, camera by camera.

    track_projections: {cam: {track_id: (px (J,2), valid (J,))}}
    detections_per_cam: {cam: [joints (J,3)]}
    """
    result = AssociationResult()
    for cam, dets in detections_per_cam.items():
        det_boxes = []
        for d in dets:
            det_boxes.append(keypoint_bbox(d[:, :2], d[:, 2] > c_min))
        tracks = track_projections.get(cam, {})
        pairs = []
        for tid, (px, valid) in sorted(tracks.items()):
            tbox = keypoint_bbox(px, valid)
            if tbox is None:
                continue
            for di, dbox in enumerate(det_boxes):
                if dbox is None:
                    continue
                iou = bbox_iou(tbox, dbox)
                if iou <= 0.0:
                    continue
                dist = root_aligned_distance(px, valid, dets[di], c_min)
                pairs.append((iou, dist, tid, di))
        matches = _greedy_match(pairs, iou_gate)
        result.matches[cam] = matches
        matched_dets = set(matches.values())
        result.unmatched[cam] = [i for i in range(len(dets))
                                 if i not in matched_dets]
    return result


def pair_stereo_detections(dets_a, dets_b, c_min=0.25, iou_gate=0.1):
    """Pair leftover detections across the stereo pair, same overlap cue."""
    pairs = []
    for ia, da in enumerate(dets_a):
        box_a = keypoint_bbox(da[:, :2], da[:, 2] > c_min)
        if box_a is None:
            continue
        for ib, db in enumerate(dets_b):
            box_b = keypoint_bbox(db[:, :2], db[:, 2] > c_min)
            if box_b is None:
                continue
            iou = bbox_iou(box_a, box_b)
            if iou <= 0.0:
                continue
            valid_a = da[:, 2] > c_min
            dist = root_aligned_distance(da[:, :2], valid_a, db, c_min)
            pairs.append((iou, dist, ia, ib))
    return _greedy_match(pairs, iou_gate)


def procrustes(src, dst):
    """Rigid (no scale) alignment R, t minimizing |R src + t - dst|^2."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    t = cd - R @ cs
    rms = float(np.sqrt(np.mean(np.sum((src @ R.T + t - dst) ** 2, axis=1))))
    return R, t, rms


class InitializationError(ValueError):
    pass


def initialize_human(det_a, det_b, cam_a, cam_b, body_model, gmm_prior,
                     c_min=0.25, min_joints=4, rms_max=0.3):
    """Triangulate a stereo detection pair into a new human state.

    Returns (T_SH, theta0, beta0). theta0 is the top-weight prior mean;
    the root pose comes from a rigid alignment of the model's torso joints
    onto the triangulated ones. Raises InitializationError when the pair is
    not usable (too few joints, bad geometry, bad alignment fit).
    """
    both = (det_a[:, 2] > c_min) & (det_b[:, 2] > c_min)
    if np.count_nonzero(both) < min_joints:
        raise InitializationError("only %d joints confident in both views"
                                  % np.count_nonzero(both))
    T_AB = cam_a.T_SC.inverse().compose(cam_b.T_SC)
    tri = {}
    for j in np.nonzero(both)[0]:
        try:
            p, ok = triangulate_stereo(cam_a, cam_b, T_AB,
                                       det_a[j, :2], det_b[j, :2])
        except TriangulationError:
            continue
        if ok:
            tri[int(j)] = p
    if len(tri) < min_joints:
        raise InitializationError("only %d joints triangulated" % len(tri))

    theta0 = gmm_prior.means[int(np.argmax(gmm_prior.weights))].copy()
    beta0 = np.zeros(body_model.n_shape)
    rest = body_model.detector_joints(beta0, theta0)[:, :3]
    torso = [j for j in body_model.torso_detection_indices if j in tri]
    if len(torso) < 3:
        raise InitializationError("fewer than 3 torso joints triangulated")
    src = rest[torso]
    dst = np.stack([tri[j] for j in torso])
    R, t, rms = procrustes(src, dst)
    if rms > rms_max:
        raise InitializationError("alignment RMS %.3f m too high" % rms)
    T_CA_H = Pose(t, geo.matrix_to_quat(R))
    T_SH = cam_a.T_SC.compose(T_CA_H)
    return T_SH, theta0, beta0
