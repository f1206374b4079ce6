import numpy as np
import pytest

from bodygraph import assets
from bodygraph import factors as fmod
from bodygraph import geometry as geo
from bodygraph import imu as imu_mod
from bodygraph import solver as smod
from bodygraph.body_model import load_body_model
from bodygraph.camera import CameraModel
from bodygraph.geometry import Pose


@pytest.fixture(scope="module")
def toy_model():
    return load_body_model(assets.path(assets.TOY_BODY_MODEL))


@pytest.fixture(scope="module")
def full_model():
    return load_body_model(assets.path(assets.FULL_BODY_MODEL))


def make_cam(T_SC=None):
    return CameraModel(400, 400, 320, 240, 640, 480, "radtan",
                       [-0.1, 0.02, 1e-4, -1e-4], T_SC or Pose.identity())


def random_pose(rng, scale=1.0):
    return Pose(rng.normal(scale=scale, size=3),
                geo.so3_exp(rng.normal(scale=0.6, size=3)))


def fd_check(factor, values, rtol=1e-5, atol=1e-8, h=1e-6):
    """Manifold-aware central differences on the raw residual.

    A block fails only when its error exceeds the absolute floor AND the
    relative bound (relative to the block magnitude), the same rule the
    solver's check_jacobians applies.
    """
    out = factor.evaluate(values, jac=True)
    assert out is not None
    _, jacs = out
    for bi, b in enumerate(factor.blocks):
        td = b.tangent_dim
        J_fd = np.zeros((factor.residual_dim, td))
        for k in range(td):
            d = np.zeros(td)
            d[k] = h
            vp = list(values)
            vm = list(values)
            vp[bi] = b.boxplus(values[bi], d)
            vm[bi] = b.boxplus(values[bi], -d)
            rp = factor.evaluate(vp, jac=False)[0]
            rm = factor.evaluate(vm, jac=False)[0]
            J_fd[:, k] = (rp - rm) / (2 * h)
        abs_err = float(np.max(np.abs(jacs[bi] - J_fd)))
        rel_err = abs_err / max(1.0, float(np.max(np.abs(J_fd))))
        assert abs_err <= atol or rel_err <= rtol, \
            "block %d: abs %.3g rel %.3g" % (bi, abs_err, rel_err)


class TestLandmarkReprojection:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.cam = make_cam(Pose(np.array([0.05, 0.0, 0.0]),
                                 geo.so3_exp(np.array([0.0, 0.02, 0.0]))))

    def make_factor(self, mode="euclidean"):
        T_WS = random_pose(self.rng, scale=0.5)
        p_W = T_WS.transform(self.cam.T_SC.transform(
            np.array([self.rng.uniform(-0.4, 0.4),
                      self.rng.uniform(-0.3, 0.3),
                      self.rng.uniform(1.0, 4.0)])))
        pose_block = smod.PoseBlock(T_WS)
        lm_block = smod.HomPointBlock(p_W, mode=mode)
        p_C = self.cam.T_SC.inverse().transform(T_WS.inverse().transform(p_W))
        uv, _ = self.cam.project(p_C)
        return fmod.LandmarkReprojectionFactor(pose_block, lm_block,
                                               self.cam, uv), pose_block, lm_block

    def test_zero_residual_at_exact_projection(self):
        f, pb, lb = self.make_factor()
        res, _ = f.evaluate([pb.value, lb.value], jac=False)
        np.testing.assert_allclose(res, 0.0, atol=1e-9)

    @pytest.mark.parametrize("mode", ["euclidean", "unit"])
    def test_jacobians_fd(self, mode):
        for _ in range(50):
            f, pb, lb = self.make_factor(mode)
            fd_check(f, [pb.value, lb.value])

    def test_behind_camera_invalidates(self):
        f, pb, lb = self.make_factor()
        # move the landmark far behind the camera
        lb.value[:3] = -100.0 * lb.value[:3]
        assert f.evaluate([pb.value, lb.value], jac=False) is None

    def test_cauchy_cost_below_quadratic_for_outlier(self):
        f, pb, lb = self.make_factor()
        f.uv = f.uv + np.array([100.0, 0.0])
        res, _ = f.evaluate_whitened([pb.value, lb.value], jac=False)
        sq = float(res @ res)
        rho, w = smod.robust_rho(sq, 1.0)
        assert rho < sq
        assert w < 1.0


class TestHumanJointReprojection:
    def setup_method(self):
        self.rng = np.random.default_rng(1)
        self.cam = make_cam()

    def make_factor(self, model, conf=0.9):
        T_SH = Pose(np.array([0.2, 0.1, 3.0]),
                    geo.so3_exp(self.rng.normal(scale=0.4, size=3)))
        theta = self.rng.normal(scale=0.3, size=3 * model.n_posture_joints)
        beta = self.rng.normal(scale=0.4, size=model.n_shape)
        pose_block = smod.PoseBlock(T_SH)
        theta_block = smod.VecBlock(theta)
        beta_block = smod.VecBlock(beta)
        j = int(self.rng.integers(0, model.n_detector_joints))
        l_H = model.detector_joints(beta, theta)[j, :3]
        p_C = self.cam.T_SC.inverse().transform(T_SH.transform(l_H))
        uv, _ = self.cam.project(p_C)
        f = fmod.HumanJointReprojectionFactor(
            pose_block, theta_block, beta_block, model, self.cam, j, uv, conf)
        return f, (pose_block, theta_block, beta_block)

    def test_zero_residual(self, toy_model):
        f, blocks = self.make_factor(toy_model)
        res, _ = f.evaluate([b.value for b in blocks], jac=False)
        np.testing.assert_allclose(res, 0.0, atol=1e-9)

    def test_jacobians_fd_toy(self, toy_model):
        for _ in range(50):
            f, blocks = self.make_factor(toy_model)
            fd_check(f, [b.value for b in blocks])

    def test_jacobians_fd_full(self, full_model):
        for _ in range(10):
            f, blocks = self.make_factor(full_model)
            fd_check(f, [b.value for b in blocks])

    def test_confidence_weighting_modes(self, toy_model):
        f, _ = self.make_factor(toy_model, conf=0.5)
        assert f.sqrt_info(None) == pytest.approx(0.5)
        f.weighting = "literal"
        assert f.sqrt_info(None) == pytest.approx(2.0)


class TestShapePrior:
    def test_zero_residual(self):
        b = smod.VecBlock(np.zeros(10))
        f = fmod.ShapePriorFactor(b)
        res, _ = f.evaluate([b.value], jac=False)
        np.testing.assert_array_equal(res, 0.0)

    def test_weighted_cost_matches_hand_arithmetic(self):
        # beta = e1, meas = 0, sigma1 = 10, lambda = 0.1:
        # cost = 0.5 * 0.1 * (1/100) = 5e-4
        beta = np.zeros(10)
        beta[0] = 1.0
        b = smod.VecBlock(beta)
        f = fmod.ShapePriorFactor(b, lambda_beta=0.1, sigma_beta1=10.0)
        res, _ = f.evaluate_whitened([b.value], jac=False)
        assert 0.5 * float(res @ res) == pytest.approx(5e-4)

    def test_jacobian_constant_minus_identity(self):
        b = smod.VecBlock(np.random.default_rng(2).normal(size=10))
        f = fmod.ShapePriorFactor(b)
        _, jacs = f.evaluate([b.value], jac=True)
        np.testing.assert_array_equal(jacs[0], -np.eye(10))
        fd_check(f, [b.value])


def make_gmm(rng, dim=9, n=4):
    means = rng.normal(scale=0.5, size=(n, dim))
    w = rng.uniform(0.5, 1.5, size=n)
    w = w / w.sum()
    covs = [rng.uniform(0.2, 0.8, size=dim) for _ in range(n - 1)]
    A = rng.normal(size=(dim, dim)) * 0.1
    covs.append(A @ A.T + np.eye(dim) * 0.5)  # one full covariance
    return fmod.GmmPrior(w, means, covs)


class TestGmm:
    def test_single_component(self):
        prior = fmod.GmmPrior([1.0], np.zeros((1, 5)), [np.ones(5)])
        assert prior.select(np.ones(5)) == 0

    def test_at_mean_with_equal_weights(self):
        rng = np.random.default_rng(3)
        means = rng.normal(size=(4, 6))
        prior = fmod.GmmPrior(np.full(4, 0.25), means,
                              [np.ones(6)] * 4)
        for g in range(4):
            assert prior.select(means[g]) == g

    def test_select_against_exhaustive_oracle(self):
        rng = np.random.default_rng(4)
        prior = make_gmm(rng)
        for _ in range(1000):
            theta = rng.normal(scale=1.0, size=9)
            # independent scoring: explicit Mahalanobis - 2 log w
            scores = []
            for g in range(prior.n_components):
                d = theta - prior.means[g]
                info = prior.infos[g]
                m = d @ (info * d) if info.ndim == 1 else d @ info @ d
                scores.append(m - 2.0 * np.log(prior.weights[g]))
            assert prior.select(theta) == int(np.argmin(scores))

    def test_posture_prior_zero_at_selected_mean(self):
        rng = np.random.default_rng(5)
        prior = make_gmm(rng)
        b = smod.VecBlock(prior.means[2].copy())
        f = fmod.PosturePriorFactor(b, prior)
        assert f.selected == 2
        res, _ = f.evaluate([b.value], jac=False)
        np.testing.assert_allclose(res, 0.0, atol=1e-12)

    def test_quadratic_descent_direction(self):
        rng = np.random.default_rng(6)
        prior = make_gmm(rng)
        b = smod.VecBlock(prior.means[0] + 0.3)
        f = fmod.PosturePriorFactor(b, prior)

        def cost(theta):
            res, _ = f.evaluate_whitened([theta], jac=False)
            return 0.5 * float(res @ res)

        info = prior.infos[f.selected]
        d = b.value - prior.means[f.selected]
        grad = info * d if np.ndim(info) == 1 else info @ d
        c0 = cost(b.value)
        c1 = cost(b.value - 1e-3 * grad)
        assert c1 <= c0

    def test_reselection_consistent(self):
        rng = np.random.default_rng(7)
        prior = make_gmm(rng)
        b = smod.VecBlock(prior.means[1].copy())
        f = fmod.PosturePriorFactor(b, prior)
        assert f.selected == 1
        b.value = prior.means[3] + 0.01
        f.reselect({b: b.value})
        assert f.selected == prior.select(b.value)
        res, _ = f.evaluate([b.value], jac=False)
        np.testing.assert_allclose(res, b.value - prior.means[f.selected])

    def test_fd(self):
        rng = np.random.default_rng(8)
        prior = make_gmm(rng)
        b = smod.VecBlock(rng.normal(size=9))
        f = fmod.PosturePriorFactor(b, prior)
        fd_check(f, [b.value])

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            fmod.GmmPrior([0.5, 0.3], np.zeros((2, 3)), [np.ones(3)] * 2)


class TestJointAnglePrior:
    def test_zero_at_rest(self):
        b = smod.VecBlock(np.zeros(9))
        f = fmod.JointAnglePriorFactor(b, [(0, 1.0), (3, -1.0)])
        res, _ = f.evaluate([b.value], jac=False)
        np.testing.assert_array_equal(res, 0.0)

    def test_legal_bend_inactive(self):
        theta = np.zeros(9)
        theta[0] = 0.5  # legal direction for sign +1
        b = smod.VecBlock(theta)
        f = fmod.JointAnglePriorFactor(b, [(0, 1.0)])
        res, _ = f.evaluate([b.value], jac=False)
        np.testing.assert_array_equal(res, 0.0)

    def test_illegal_bend_penalized(self):
        theta = np.zeros(9)
        theta[0] = -0.3  # hyperextension for sign +1
        b = smod.VecBlock(theta)
        f = fmod.JointAnglePriorFactor(b, [(0, 1.0)])
        res, _ = f.evaluate([b.value], jac=False)
        np.testing.assert_allclose(res, [0.3])

    def test_fd_away_from_kink(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            theta = rng.normal(scale=0.5, size=9)
            b = smod.VecBlock(theta)
            f = fmod.JointAnglePriorFactor(b, [(0, 1.0), (4, -1.0)])
            fd_check(f, [b.value])

    def test_literal_mode_always_linear(self):
        theta = np.zeros(9)
        theta[0] = 0.5
        b = smod.VecBlock(theta)
        f = fmod.JointAnglePriorFactor(b, [(0, 1.0)], mode="literal")
        res, _ = f.evaluate([b.value], jac=False)
        np.testing.assert_allclose(res, [-0.5])


class TestMotionTranslation:
    """Finite-difference validation of the four analytic blocks; the single
    most sensitive Jacobian in the system."""

    def make_factor(self, rng, exact=False):
        T_WS1 = random_pose(rng)
        T_WS2 = random_pose(rng)
        T_SH1 = random_pose(rng)
        p_SH2 = rng.normal(size=3)
        sp1 = smod.PoseBlock(T_WS1)
        sp2 = smod.PoseBlock(T_WS2)
        hp1 = smod.PoseBlock(T_SH1)
        hp2 = smod.PoseBlock(Pose(p_SH2, geo.so3_exp(rng.normal(size=3))))
        if exact:
            m = T_SH1.inverse().transform(
                T_WS1.inverse().transform(T_WS2.transform(p_SH2)))
            p_pred = m
        else:
            p_pred = rng.normal(size=3)
        f = fmod.MotionTranslationFactor(sp1, sp2, hp1, hp2, p_pred)
        return f, (sp1, sp2, hp1, hp2)

    def test_static_zero_residual(self):
        I = Pose.identity()
        sp1, sp2 = smod.PoseBlock(I), smod.PoseBlock(I)
        h = Pose(np.array([0.0, 0.0, 2.0]), geo.quat_identity())
        hp1, hp2 = smod.PoseBlock(h), smod.PoseBlock(h)
        f = fmod.MotionTranslationFactor(sp1, sp2, hp1, hp2, np.zeros(3))
        res, _ = f.evaluate([b.value for b in (sp1, sp2, hp1, hp2)],
                            jac=False)
        np.testing.assert_allclose(res, 0.0, atol=1e-12)

    def test_exact_prediction_zero_residual(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            f, blocks = self.make_factor(rng, exact=True)
            res, _ = f.evaluate([b.value for b in blocks], jac=False)
            np.testing.assert_allclose(res, 0.0, atol=1e-9)

    def test_pure_sensor_translation_identities(self):
        # two hand-derived closed-form cases under pure sensor translation d:
        # (a) human fixed in the world, relative pose updated consistently:
        #     its apparent motion in the previous human frame is zero;
        # (b) human rigidly attached to the sensor (T_SH unchanged): its
        #     apparent world motion in H_{k-1} is C_SH^T C_WS^T d.
        rng = np.random.default_rng(11)
        for _ in range(20):
            T_WS1 = random_pose(rng)
            d = rng.normal(size=3)
            T_WS2 = Pose(T_WS1.r + d, T_WS1.q)
            T_SH1 = random_pose(rng)
            C_SH = T_SH1.rotation_matrix()
            C_WS = T_WS1.rotation_matrix()

            T_WH = T_WS1.compose(T_SH1)
            T_SH2 = T_WS2.inverse().compose(T_WH)
            f = fmod.MotionTranslationFactor(
                smod.PoseBlock(T_WS1), smod.PoseBlock(T_WS2),
                smod.PoseBlock(T_SH1), smod.PoseBlock(T_SH2), np.zeros(3))
            res, _ = f.evaluate([b.value for b in f.blocks], jac=False)
            np.testing.assert_allclose(res, 0.0, atol=1e-9)

            p_pred = C_SH.T @ C_WS.T @ d
            f = fmod.MotionTranslationFactor(
                smod.PoseBlock(T_WS1), smod.PoseBlock(T_WS2),
                smod.PoseBlock(T_SH1), smod.PoseBlock(T_SH1), p_pred)
            res, _ = f.evaluate([b.value for b in f.blocks], jac=False)
            np.testing.assert_allclose(res, 0.0, atol=1e-9)

    def test_all_four_jacobian_blocks_fd_200(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            f, blocks = self.make_factor(rng)
            fd_check(f, [b.value for b in blocks])


class TestMotionPosture:
    def test_zero_cases(self):
        t1 = smod.VecBlock(np.ones(9))
        t2 = smod.VecBlock(np.ones(9))
        f = fmod.MotionPostureFactor(t1, t2, np.zeros(9))
        res, _ = f.evaluate([t1.value, t2.value], jac=False)
        np.testing.assert_array_equal(res, 0.0)

        rng = np.random.default_rng(13)
        a, b = rng.normal(size=9), rng.normal(size=9)
        f = fmod.MotionPostureFactor(smod.VecBlock(a), smod.VecBlock(b),
                                     b - a)
        res, _ = f.evaluate([a, b], jac=False)
        np.testing.assert_allclose(res, 0.0, atol=1e-15)

    def test_fd(self):
        rng = np.random.default_rng(14)
        t1 = smod.VecBlock(rng.normal(size=9))
        t2 = smod.VecBlock(rng.normal(size=9))
        f = fmod.MotionPostureFactor(t1, t2, rng.normal(size=9),
                                     lambda_mtheta=3.0)
        fd_check(f, [t1.value, t2.value])

    def test_cost_gradient_direction(self):
        rng = np.random.default_rng(15)
        t1 = smod.VecBlock(rng.normal(size=9))
        t2 = smod.VecBlock(rng.normal(size=9))
        lam = 3.0
        f = fmod.MotionPostureFactor(t1, t2, np.zeros(9), lambda_mtheta=lam)

        def cost(x2):
            res, _ = f.evaluate_whitened([t1.value, x2], jac=False)
            return 0.5 * float(res @ res)

        res, _ = f.evaluate([t1.value, t2.value], jac=False)
        h = 1e-7
        g_fd = np.zeros(9)
        for i in range(9):
            d = np.zeros(9)
            d[i] = h
            g_fd[i] = (cost(t2.value + d) - cost(t2.value - d)) / (2 * h)
        np.testing.assert_allclose(g_fd, -lam * res, rtol=1e-5, atol=1e-8)


class TestImuFactor:
    def make_factor(self, rng):
        params = imu_mod.ImuParams()
        n = 41
        ts = np.arange(n) / 200.0
        meas = [imu_mod.ImuMeasurement(
            t, rng.normal(scale=0.3, size=3),
            rng.normal(scale=0.5, size=3) - params.gravity) for t in ts]
        sk = imu_mod.SensorState(p=rng.normal(size=3),
                                 q=geo.so3_exp(rng.normal(scale=0.5, size=3)),
                                 v=rng.normal(size=3),
                                 bg=rng.normal(scale=0.005, size=3),
                                 ba=rng.normal(scale=0.02, size=3))
        pre = imu_mod.preintegrate(meas, params, 0.0, ts[-1], sk.bg, sk.ba)
        sn = imu_mod.propagate(sk, pre, params.gravity)
        pose_k = smod.PoseBlock(sk.pose())
        sb_k = smod.VecBlock(np.concatenate([sk.v, sk.bg, sk.ba]))
        pose_n = smod.PoseBlock(sn.pose())
        sb_n = smod.VecBlock(np.concatenate([sn.v, sn.bg, sn.ba]))
        return fmod.ImuFactor(pose_k, sb_k, pose_n, sb_n, pre, params)

    def test_zero_residual_on_propagation(self):
        rng = np.random.default_rng(16)
        f = self.make_factor(rng)
        res, _ = f.evaluate([b.value for b in f.blocks], jac=False)
        np.testing.assert_allclose(res, 0.0, atol=1e-9)

    def test_fd(self):
        rng = np.random.default_rng(17)
        f = self.make_factor(rng)
        # perturb the states so the residual is nonzero
        vals = [b.value.copy() for b in f.blocks]
        vals[2][:3] += 0.05
        vals[3][:3] += 0.1
        fd_check(f, vals, rtol=1e-4, atol=1e-6)


class TestRelativePose:
    def test_zero_at_nominal(self):
        rng = np.random.default_rng(18)
        T_r = random_pose(rng)
        T_c = random_pose(rng)
        rel = T_r.inverse().compose(T_c)
        f = fmod.RelativePoseFactor(smod.PoseBlock(T_r), smod.PoseBlock(T_c),
                                    rel.r, rel.q)
        res, _ = f.evaluate([b.value for b in f.blocks], jac=False)
        np.testing.assert_allclose(res, 0.0, atol=1e-12)

    def test_world_offset_invariance(self):
        rng = np.random.default_rng(19)
        T_r = random_pose(rng)
        T_c = random_pose(rng)
        rel = T_r.inverse().compose(T_c)
        f = fmod.RelativePoseFactor(smod.PoseBlock(T_r), smod.PoseBlock(T_c),
                                    rel.r * 0.5, rel.q)
        res0, _ = f.evaluate([T_r.to_vector(), T_c.to_vector()], jac=False)
        off = rng.normal(size=3)
        res1, _ = f.evaluate([Pose(T_r.r + off, T_r.q).to_vector(),
                              Pose(T_c.r + off, T_c.q).to_vector()],
                             jac=False)
        np.testing.assert_allclose(res0, res1, atol=1e-12)

    def test_fd(self):
        rng = np.random.default_rng(20)
        for _ in range(50):
            T_r = random_pose(rng)
            T_c = random_pose(rng)
            f = fmod.RelativePoseFactor(
                smod.PoseBlock(T_r), smod.PoseBlock(T_c),
                rng.normal(size=3), geo.so3_exp(rng.normal(size=3)),
                e0=rng.normal(scale=0.1, size=6))
            fd_check(f, [b.value for b in f.blocks])


class TestAssemblyEquivalence:
    """Eq.-14-style total cost: solver assembly vs naive per-factor oracle."""

    def build_problem(self, toy_model):
        rng = np.random.default_rng(21)
        cam = make_cam()
        problem = smod.Problem()
        pose = problem.add_block(smod.PoseBlock(random_pose(rng, 0.3)))
        factors = []
        for _ in range(15):
            p_W = pose.pose().transform(np.array([rng.uniform(-0.5, 0.5),
                                                  rng.uniform(-0.4, 0.4),
                                                  rng.uniform(1, 3)]))
            lm = problem.add_block(smod.HomPointBlock(p_W))
            uv, _ = cam.project(pose.pose().inverse().transform(p_W))
            f = fmod.LandmarkReprojectionFactor(
                pose, lm, cam, uv + rng.normal(scale=2.0, size=2))
            factors.append(problem.add_factor(f))
        theta = problem.add_block(
            smod.VecBlock(rng.normal(scale=0.3, size=9)))
        beta = problem.add_block(smod.VecBlock(rng.normal(scale=0.3, size=10)))
        hpose = problem.add_block(smod.PoseBlock(
            Pose(np.array([0, 0, 2.5]), geo.quat_identity())))
        det = toy_model.detector_joints(beta.value, theta.value)
        for j in range(toy_model.n_detector_joints):
            p_C = hpose.pose().transform(det[j, :3])
            uv, _ = cam.project(p_C)
            f = fmod.HumanJointReprojectionFactor(
                hpose, theta, beta, toy_model, cam, j,
                uv + rng.normal(scale=1.0, size=2), 0.8)
            factors.append(problem.add_factor(f))
        factors.append(problem.add_factor(fmod.ShapePriorFactor(beta)))
        factors.append(problem.add_factor(
            fmod.JointAnglePriorFactor(theta, [(0, 1.0)])))
        return problem, factors

    def test_total_cost_matches_naive_oracle(self, toy_model):
        problem, factors = self.build_problem(toy_model)
        values = {b: b.value for b in problem.blocks}
        _, cost, _ = smod.evaluate_problem(problem, values, jac=False)
        naive = 0.0
        for f in problem.active_factors():
            out = f.evaluate_whitened([values[b] for b in f.blocks],
                                      jac=False)
            if out is None:
                continue
            res = out[0]
            rho, _ = smod.robust_rho(float(res @ res), f.robust)
            naive += 0.5 * rho
        assert abs(cost - naive) <= 1e-12 * max(1.0, abs(naive))

    def test_batch_jacobians_match_single(self, toy_model):
        problem, factors = self.build_problem(toy_model)
        values = {b: b.value for b in problem.blocks}
        items, _, _ = smod.evaluate_problem(problem, values, jac=True)
        # reconstruct whitened residuals per factor from single evaluation
        for it in items:
            if isinstance(it, smod.GroupItem):
                blocks = it.blocks
                singles = [f for f in factors if f.kind == "human_joint"
                           and f.blocks == blocks]
                assert it.res.shape[0] == len(singles)
                for n, f in enumerate(singles):
                    res, jacs = f.evaluate_whitened(
                        [values[b] for b in f.blocks], jac=True)
                    np.testing.assert_allclose(it.res[n], res, atol=1e-12)
                    Jcat = np.concatenate(jacs, axis=1)
                    np.testing.assert_allclose(it.Jcat[n], Jcat, atol=1e-12)
            if isinstance(it, smod.LandmarkItem):
                lm_factors = [f for f in factors
                              if f.kind == "landmark_reproj"]
                for n in range(it.res.shape[0]):
                    f = lm_factors[n]
                    res, jacs = f.evaluate_whitened(
                        [values[b] for b in f.blocks], jac=True)
                    np.testing.assert_allclose(it.res[n], res, atol=1e-12)
                    np.testing.assert_allclose(it.Jp[n], jacs[0], atol=1e-12)
                    np.testing.assert_allclose(it.Jl[n], jacs[1], atol=1e-12)

    def test_deactivation_exact_and_reversible(self, toy_model):
        problem, factors = self.build_problem(toy_model)
        values = {b: b.value for b in problem.blocks}
        _, cost_full, _ = smod.evaluate_problem(problem, values, jac=False)
        f = factors[0]
        problem.set_active(f, False)
        _, cost_off, _ = smod.evaluate_problem(problem, values, jac=False)
        problem.remove_factor(f)
        _, cost_removed, _ = smod.evaluate_problem(problem, values, jac=False)
        assert cost_off == cost_removed
        problem.factors.insert(0, f)
        problem.set_active(f, True)
        _, cost_back, _ = smod.evaluate_problem(problem, values, jac=False)
        assert cost_back == cost_full
