import itertools

import numpy as np
import pytest

from bodygraph import assets
from bodygraph import geometry as geo
from bodygraph import human_frontend as hf
from bodygraph.body_model import load_body_model
from bodygraph.factors import load_gmm_prior
from bodygraph.geometry import Pose
from bodygraph.simulator import default_stereo_rig


@pytest.fixture(scope="module")
def model():
    return load_body_model(assets.path(assets.FULL_BODY_MODEL))


@pytest.fixture(scope="module")
def gmm():
    return load_gmm_prior(assets.path(assets.GMM_PRIOR))


class TestPredictor:
    def test_single_state_zero_motion(self):
        pred = hf.ConstantVelocityPredictor()
        T = Pose(np.array([1.0, 2.0, 3.0]), geo.quat_identity())
        out = pred.predict([(0.0, T, np.zeros(9))], 0.1)
        np.testing.assert_array_equal(out.p_pred, 0.0)
        np.testing.assert_array_equal(out.dtheta_pred, 0.0)

    def test_constant_velocity_exact(self):
        pred = hf.ConstantVelocityPredictor()
        v = np.array([0.3, -0.1, 0.0])
        th0 = np.zeros(9)
        dth = np.full(9, 0.02)
        hist = [(0.0, Pose(np.zeros(3), geo.quat_identity()), th0),
                (0.1, Pose(0.1 * v, geo.quat_identity()), th0 + dth)]
        out = pred.predict(hist, 0.1)
        np.testing.assert_allclose(out.p_pred, 0.1 * v, atol=1e-12)
        np.testing.assert_allclose(out.dtheta_pred, dth, atol=1e-12)
        np.testing.assert_allclose(out.T_WH_pred.r, 0.2 * v, atol=1e-12)

    def test_dt_ratio_scaling(self):
        pred = hf.ConstantVelocityPredictor()
        hist = [(0.0, Pose(np.zeros(3), geo.quat_identity()), np.zeros(3)),
                (0.2, Pose(np.array([0.2, 0, 0]), geo.quat_identity()),
                 np.zeros(3))]
        out = pred.predict(hist, 0.1)
        np.testing.assert_allclose(out.p_pred, [0.1, 0, 0], atol=1e-12)

    def test_time_reversed_negates(self):
        pred = hf.ConstantVelocityPredictor()
        a = (0.0, Pose(np.zeros(3), geo.quat_identity()), np.zeros(3))
        b = (0.1, Pose(np.array([0.1, 0, 0]), geo.quat_identity()),
             np.zeros(3))
        fwd = pred.predict([a, b], 0.1)
        rev = pred.predict([(0.0, b[1], b[2]), (0.1, a[1], a[2])], 0.1)
        np.testing.assert_allclose(rev.p_pred, -fwd.p_pred, atol=1e-12)


def synth_detection(center, spread=40.0, n=22, conf=0.9, rng=None):
    rng = rng or np.random.default_rng(0)
    d = np.zeros((n, 3))
    d[:, :2] = center + rng.uniform(-spread, spread, size=(n, 2))
    d[:, 2] = conf
    return d


class TestAssociation:
    def test_single_track_single_detection(self):
        rng = np.random.default_rng(1)
        det = synth_detection(np.array([300.0, 200.0]), rng=rng)
        px = det[:, :2] + rng.normal(scale=2.0, size=(22, 2))
        res = hf.associate({0: {7: (px, np.ones(22, dtype=bool))}},
                           {0: [det]})
        assert res.matches[0] == {7: 0}
        assert res.unmatched[0] == []

    def test_two_tracks_bijective_matches_bruteforce(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n_tracks = int(rng.integers(2, 5))
            dets = []
            projs = {}
            centers = []
            for i in range(n_tracks):
                c = rng.uniform([100, 100], [540, 380])
                centers.append(c)
                dets.append(synth_detection(c, rng=rng))
                px = dets[-1][:, :2] + rng.normal(scale=3.0, size=(22, 2))
                projs[i] = (px, np.ones(22, dtype=bool))
            order = rng.permutation(n_tracks)
            dets_shuffled = [dets[i] for i in order]
            res = hf.associate({0: projs}, {0: dets_shuffled})
            got = res.matches[0]
            # brute-force optimum over assignments by total IoU
            def total_iou(assign):
                s = 0.0
                for tid, di in assign.items():
                    tb = hf.keypoint_bbox(*projs[tid])
                    db = hf.keypoint_bbox(dets_shuffled[di][:, :2],
                                          dets_shuffled[di][:, 2] > 0.25)
                    s += hf.bbox_iou(tb, db)
                return s
            best = None
            for perm in itertools.permutations(range(n_tracks)):
                assign = dict(zip(range(n_tracks), perm))
                v = total_iou(assign)
                if best is None or v > best[0]:
                    best = (v, assign)
            assert total_iou(got) >= best[0] - 1e-9

    def test_zero_iou_unmatched(self):
        rng = np.random.default_rng(3)
        det = synth_detection(np.array([500.0, 400.0]), rng=rng)
        px = synth_detection(np.array([100.0, 80.0]), rng=rng)[:, :2]
        res = hf.associate({0: {0: (px, np.ones(22, dtype=bool))}},
                           {0: [det]})
        assert res.matches[0] == {}
        assert res.unmatched[0] == [0]

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        dets = [synth_detection(np.array([200.0, 200.0]), rng=rng),
                synth_detection(np.array([450.0, 300.0]), rng=rng)]
        projs = {}
        for i, d in enumerate(dets):
            projs[i] = (d[:, :2] + 1.0, np.ones(22, dtype=bool))
        res1 = hf.associate({0: projs}, {0: dets})
        relabeled = {10: projs[1], 5: projs[0]}
        res2 = hf.associate({0: relabeled}, {0: dets})
        mapping = {0: 5, 1: 10}
        for tid, di in res1.matches[0].items():
            assert res2.matches[0][mapping[tid]] == di

    def test_no_double_assignment(self):
        rng = np.random.default_rng(5)
        det = synth_detection(np.array([300.0, 240.0]), rng=rng)
        projs = {0: (det[:, :2] + 1.0, np.ones(22, dtype=bool)),
                 1: (det[:, :2] - 1.0, np.ones(22, dtype=bool))}
        res = hf.associate({0: projs}, {0: [det]})
        assert len(res.matches[0]) == 1


class TestInitialization:
    def make_pair(self, model, T_SH, theta, beta, conf=0.9):
        cams = default_stereo_rig()
        joints = model.detector_joints(beta, theta)[:, :3]
        out = []
        for cam in cams:
            T_CH = cam.T_SC.inverse().compose(T_SH)
            det = np.zeros((model.n_detector_joints, 3))
            for j in range(model.n_detector_joints):
                p_C = T_CH.transform(joints[j])
                uv, _ = cam.project(p_C)
                det[j, :2] = uv
                det[j, 2] = conf
            out.append(det)
        return cams, out

    def test_noiseless_recovery(self, model, gmm):
        theta0 = gmm.means[int(np.argmax(gmm.weights))]
        T_SH = Pose(np.array([0.3, -0.1, 3.0]),
                    geo.so3_exp(np.array([0.05, 0.4, -0.1])))
        cams, (da, db) = self.make_pair(model, T_SH, theta0, np.zeros(10))
        T_est, theta_est, beta_est = hf.initialize_human(
            da, db, cams[0], cams[1], model, gmm)
        assert np.linalg.norm(T_est.r - T_SH.r) < 0.01
        ang = np.linalg.norm(geo.quat_boxminus(T_est.q, T_SH.q))
        assert np.degrees(ang) < 2.0
        np.testing.assert_array_equal(theta_est, theta0)
        np.testing.assert_array_equal(beta_est, 0.0)

    def test_zero_confidence_rejected(self, model, gmm):
        theta0 = gmm.means[0]
        T_SH = Pose(np.array([0.0, 0.0, 3.0]), geo.quat_identity())
        cams, (da, db) = self.make_pair(model, T_SH, theta0, np.zeros(10),
                                        conf=0.0)
        with pytest.raises(hf.InitializationError):
            hf.initialize_human(da, db, cams[0], cams[1], model, gmm)

    def test_procrustes_exact(self):
        rng = np.random.default_rng(6)
        src = rng.normal(size=(6, 3))
        R_true = geo.quat_to_matrix(geo.so3_exp(rng.normal(size=3)))
        t_true = rng.normal(size=3)
        dst = src @ R_true.T + t_true
        R, t, rms = hf.procrustes(src, dst)
        np.testing.assert_allclose(R, R_true, atol=1e-10)
        np.testing.assert_allclose(t, t_true, atol=1e-10)
        assert rms < 1e-10

    def test_stereo_pairing(self):
        rng = np.random.default_rng(7)
        a = [synth_detection(np.array([200.0, 200.0]), rng=rng),
             synth_detection(np.array([450.0, 300.0]), rng=rng)]
        b = [synth_detection(np.array([455.0, 300.0]), rng=rng),
             synth_detection(np.array([205.0, 200.0]), rng=rng)]
        m = hf.pair_stereo_detections(a, b)
        assert m == {0: 1, 1: 0}
