"""Pinhole camera models with distortion, projection Jacobians, and stereo
triangulation."""

import numpy as np

from . import kernels
from .geometry import Pose

MIN_DEPTH = kernels.MIN_DEPTH

DISTORTION_TYPES = ("none", "radtan", "equidistant")


class BehindCameraError(ValueError):
    """Point does not project (depth <= MIN_DEPTH)."""


class TriangulationError(ValueError):
    """Rays are degenerate or intersect behind a camera."""


class CameraModel:
    """Pinhole intrinsics + distortion + extrinsics T_SC (camera in IMU frame).

    distortion: 'none', 'radtan' (k1,k2,p1,p2) or 'equidistant' (k1..k4).
    """

    def __init__(self, fx, fy, cx, cy, width, height,
                 distortion_type="none", distortion=None, T_SC=None):
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        if width <= 0 or height <= 0:
            raise ValueError("image dimensions must be positive")
        if distortion_type not in DISTORTION_TYPES:
            raise ValueError("unknown distortion type %r" % distortion_type)
        self.fx, self.fy, self.cx, self.cy = (float(fx), float(fy),
                                              float(cx), float(cy))
        self.width, self.height = int(width), int(height)
        self.distortion_type = distortion_type
        n_coef = {"none": 0, "radtan": 4, "equidistant": 4}[distortion_type]
        d = np.zeros(n_coef) if distortion is None else np.asarray(distortion, dtype=float)
        if d.shape != (n_coef,):
            raise ValueError("expected %d distortion coefficients, got %s"
                             % (n_coef, d.shape))
        self.distortion = d
        self.T_SC = T_SC if T_SC is not None else Pose.identity()

    def _dist8(self):
        d = np.zeros(4)
        d[:self.distortion.shape[0]] = self.distortion
        return d

    def project_batch(self, P):
        """(uv (N,2), J (N,2,3), valid (N,)) for camera-frame points."""
        d = self._dist8()
        if self.distortion_type == "equidistant":
            return kernels.project_equidistant(
                P, self.fx, self.fy, self.cx, self.cy, d[0], d[1], d[2], d[3])
        # 'none' is radtan with zero coefficients
        return kernels.project_radtan(
            P, self.fx, self.fy, self.cx, self.cy, d[0], d[1], d[2], d[3])

    def project(self, p_C):
        """Project one camera-frame point; returns (uv, inside_image)."""
        p_C = np.asarray(p_C, dtype=float)
        uv, _, valid = self.project_batch(p_C[None, :])
        if not valid[0]:
            raise BehindCameraError("depth %.3g <= %.3g" % (p_C[2], MIN_DEPTH))
        return uv[0], self.in_image(uv[0])

    def project_jacobian(self, p_C):
        p_C = np.asarray(p_C, dtype=float)
        _, J, valid = self.project_batch(p_C[None, :])
        if not valid[0]:
            raise BehindCameraError("depth %.3g <= %.3g" % (p_C[2], MIN_DEPTH))
        return J[0]

    def in_image(self, uv):
        return bool(0.0 <= uv[0] <= self.width - 1
                    and 0.0 <= uv[1] <= self.height - 1)

    def _distort_normalized(self, xy):
        p = np.array([xy[0], xy[1], 1.0])
        uv, _, _ = self.project_batch(p[None, :])
        return np.array([(uv[0, 0] - self.cx) / self.fx,
                         (uv[0, 1] - self.cy) / self.fy])

    def undistort_normalized(self, xy_d, iters=20):
        """Invert the distortion map in normalized coordinates (fixed point)."""
        xy = np.asarray(xy_d, dtype=float).copy()
        if self.distortion_type == "none":
            return xy
        x = xy.copy()
        for _ in range(iters):
            d = self._distort_normalized(x) - x
            x = xy - d
        return x

    def backproject(self, uv):
        """Unit ray through pixel uv."""
        xy_d = np.array([(uv[0] - self.cx) / self.fx,
                         (uv[1] - self.cy) / self.fy])
        xy = self.undistort_normalized(xy_d)
        ray = np.array([xy[0], xy[1], 1.0])
        return ray / np.linalg.norm(ray)

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "distortion_type": self.distortion_type,
            "distortion": self.distortion.tolist(),
            "T_SC": self.T_SC.to_wire().tolist(),
        }

    @staticmethod
    def from_dict(d):
        return CameraModel(
            d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
            d.get("distortion_type", "none"), d.get("distortion") or None,
            Pose.from_wire(np.asarray(d["T_SC"], dtype=float)))


# triangulation quality gates
MIN_RAY_ANGLE_DEG = 0.5
MAX_REPROJ_PX = 4.0


def triangulate_stereo(cam_a, cam_b, T_AB, z_a, z_b):
    """Midpoint triangulation of a pixel pair; point in camera-A frame.

    T_AB: pose of camera B in camera A. Returns (point, ok) where ok is the
    quality flag (ray angle and reprojection residual gates). Raises
    TriangulationError for parallel rays or a behind-camera solution.
    """
    d1 = cam_a.backproject(z_a)
    d2 = T_AB.rotation_matrix() @ cam_b.backproject(z_b)
    o2 = T_AB.r

    # closest points on the two rays: o1 + s*d1 and o2 + t*d2
    a = float(d1 @ d1)
    b = float(d1 @ d2)
    c = float(d2 @ d2)
    den = a * c - b * b
    if den < 1e-12:
        raise TriangulationError("rays are parallel")
    e1 = float(d1 @ o2)
    e2 = float(d2 @ o2)
    s = (c * e1 - b * e2) / den
    t = (b * e1 - a * e2) / den
    if s <= 0 or t <= 0:
        raise TriangulationError("triangulated point behind a camera")
    point = 0.5 * (s * d1 + (o2 + t * d2))

    ok = True
    cosang = np.clip(b / np.sqrt(a * c), -1.0, 1.0)
    if np.degrees(np.arccos(cosang)) < MIN_RAY_ANGLE_DEG:
        ok = False
    try:
        uv_a, _ = cam_a.project(point)
        uv_b, _ = cam_b.project(T_AB.inverse().transform(point))
        res = max(np.linalg.norm(uv_a - np.asarray(z_a, dtype=float)),
                  np.linalg.norm(uv_b - np.asarray(z_b, dtype=float)))
        if res > MAX_REPROJ_PX:
            ok = False
    except BehindCameraError:
        raise TriangulationError("triangulated point behind a camera")
    return point, ok
