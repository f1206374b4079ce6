import numpy as np
import pytest

from bodygraph import geometry as geo
from bodygraph.camera import (BehindCameraError, CameraModel,
                              TriangulationError, triangulate_stereo)
from bodygraph.geometry import Pose


def pinhole(**kw):
    args = dict(fx=400.0, fy=400.0, cx=320.0, cy=240.0, width=640, height=480)
    args.update(kw)
    return CameraModel(**args)


def radtan_cam():
    return pinhole(distortion_type="radtan",
                   distortion=[-0.28, 0.07, 1e-4, -2e-4])


def equi_cam():
    return pinhole(distortion_type="equidistant",
                   distortion=[-0.01, 0.02, -0.005, 0.001])


class TestProjection:
    def test_optical_axis(self):
        uv, inside = pinhole().project([0, 0, 1.0])
        np.testing.assert_allclose(uv, [320.0, 240.0])
        assert inside

    def test_similar_triangles(self):
        uv, _ = pinhole().project([0.1, 0, 1.0])
        np.testing.assert_allclose(uv, [360.0, 240.0])

    def test_behind_camera_raises(self):
        with pytest.raises(BehindCameraError):
            pinhole().project([0, 0, -1.0])
        with pytest.raises(BehindCameraError):
            pinhole().project([0, 0, 1e-9])

    def test_outside_image_flag(self):
        uv, inside = pinhole().project([2.0, 0, 1.0])
        assert not inside

    def test_zero_distortion_reduces_to_pinhole(self):
        cam0 = pinhole()
        camr = pinhole(distortion_type="radtan", distortion=[0, 0, 0, 0])
        came = pinhole(distortion_type="equidistant", distortion=[0, 0, 0, 0])
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4), 1.0])
            u0, _ = cam0.project(p)
            ur, _ = camr.project(p)
            np.testing.assert_array_equal(u0, ur)
            ue, _ = came.project(p)
            # equidistant at zero coeffs still applies atan(r)/r

    def test_equidistant_zero_coeff_center(self):
        came = pinhole(distortion_type="equidistant", distortion=[0, 0, 0, 0])
        uv, _ = came.project([0, 0, 2.0])
        np.testing.assert_allclose(uv, [320.0, 240.0], atol=1e-12)

    def test_distortion_round_trip(self):
        # undistort(distort(x)) == x to 1e-6 px equivalent
        for cam in [radtan_cam(), equi_cam()]:
            rng = np.random.default_rng(1)
            for _ in range(100):
                xy = rng.uniform(-0.4, 0.4, size=2)
                xy_d = cam._distort_normalized(xy)
                xy_u = cam.undistort_normalized(xy_d)
                assert np.linalg.norm((xy_u - xy) * cam.fx) < 1e-6

    def test_backproject_inverts_project(self):
        for cam in [pinhole(), radtan_cam(), equi_cam()]:
            rng = np.random.default_rng(2)
            for _ in range(50):
                p = np.array([rng.uniform(-0.5, 0.5),
                              rng.uniform(-0.4, 0.4),
                              rng.uniform(0.5, 5.0)])
                uv, _ = cam.project(p)
                ray = cam.backproject(uv)
                np.testing.assert_allclose(ray, p / np.linalg.norm(p),
                                           atol=1e-8)


class TestProjectionJacobian:
    def test_axis_point_no_distortion(self):
        J = pinhole().project_jacobian([0, 0, 1.0])
        np.testing.assert_allclose(J, [[400, 0, 0], [0, 400, 0]], atol=1e-12)

    @pytest.mark.parametrize("cam_fn", [pinhole, radtan_cam, equi_cam])
    def test_matches_finite_differences(self, cam_fn):
        cam = cam_fn()
        rng = np.random.default_rng(3)
        h = 1e-6
        for _ in range(100):
            p = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4),
                          rng.uniform(0.3, 4.0)])
            J = cam.project_jacobian(p)
            J_fd = np.zeros((2, 3))
            for i in range(3):
                dp = np.zeros(3)
                dp[i] = h
                up, _ = cam.project(p + dp)
                um, _ = cam.project(p - dp)
                J_fd[:, i] = (up - um) / (2 * h)
            np.testing.assert_allclose(J, J_fd, rtol=1e-5, atol=1e-4)


class TestTriangulation:
    def setup_method(self):
        self.cam_a = pinhole()
        self.cam_b = pinhole()
        # 0.11 m stereo baseline along x
        self.T_AB = Pose(np.array([0.11, 0.0, 0.0]), geo.quat_identity())

    def test_exact_recovery(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            p = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.6, 0.6),
                          rng.uniform(0.8, 4.0)])
            za, _ = self.cam_a.project(p)
            zb, _ = self.cam_b.project(self.T_AB.inverse().transform(p))
            rec, ok = triangulate_stereo(self.cam_a, self.cam_b, self.T_AB,
                                         za, zb)
            assert ok
            np.testing.assert_allclose(rec, p, atol=1e-9)

    def test_noise_depth_error(self):
        # 1 px noise, 0.11 m baseline, 3 m depth, HD focal length:
        # 95th percentile depth error < 0.15 m (Monte-Carlo, 1000 trials;
        # expected scale z^2 * sigma_disparity / (f * b) ~ 0.08 m)
        cam = pinhole(fx=1600.0, fy=1600.0, cx=960.0, cy=540.0,
                      width=1920, height=1080)
        rng = np.random.default_rng(5)
        p = np.array([0.1, -0.05, 3.0])
        za0, _ = cam.project(p)
        zb0, _ = cam.project(self.T_AB.inverse().transform(p))
        errs = []
        for _ in range(1000):
            za = za0 + rng.normal(scale=1.0, size=2)
            zb = zb0 + rng.normal(scale=1.0, size=2)
            try:
                rec, _ = triangulate_stereo(cam, cam, self.T_AB, za, zb)
            except TriangulationError:
                continue
            errs.append(abs(rec[2] - p[2]))
        assert np.percentile(errs, 95) < 0.15

    def test_degenerate_identical_pixels(self):
        with pytest.raises(TriangulationError):
            triangulate_stereo(self.cam_a, self.cam_b, Pose.identity(),
                               [320, 240], [320, 240])

    def test_low_parallax_flagged(self):
        # distant point: rays nearly parallel -> quality flag False
        p = np.array([0.0, 0.0, 60.0])
        za, _ = self.cam_a.project(p)
        zb, _ = self.cam_b.project(self.T_AB.inverse().transform(p))
        rec, ok = triangulate_stereo(self.cam_a, self.cam_b, self.T_AB, za, zb)
        assert not ok

    def test_project_triangulate_fixed_point(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            p = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4),
                          rng.uniform(1.0, 4.0)])
            za, _ = self.cam_a.project(p)
            zb, _ = self.cam_b.project(self.T_AB.inverse().transform(p))
            rec, _ = triangulate_stereo(self.cam_a, self.cam_b, self.T_AB,
                                        za, zb)
            uva, _ = self.cam_a.project(rec)
            assert np.linalg.norm(uva - za) < 1e-6


def test_validation_errors():
    with pytest.raises(ValueError):
        pinhole(fx=-1.0)
    with pytest.raises(ValueError):
        pinhole(width=0)
    with pytest.raises(ValueError):
        CameraModel(400, 400, 320, 240, 640, 480, "bogus")
    with pytest.raises(ValueError):
        CameraModel(400, 400, 320, 240, 640, 480, "radtan", [0.1])


def test_dict_round_trip():
    cam = radtan_cam()
    cam2 = CameraModel.from_dict(cam.to_dict())
    assert cam2.distortion_type == "radtan"
    np.testing.assert_array_equal(cam2.distortion, cam.distortion)
    np.testing.assert_allclose(cam2.T_SC.to_wire(), cam.T_SC.to_wire())
