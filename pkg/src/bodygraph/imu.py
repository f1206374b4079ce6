"""IMU preintegration and the inertial error term between sensor states.

Preintegrated deltas live in the frame of the first state; the error-state
is (dp, dtheta, dv, dbg, dba) with dtheta the world-side (left) tangent of
the delta rotation, matching the boxminus convention used by the residual.
First-order bias corrections are kept so the factor can absorb small bias
updates without re-integration.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import geometry as geo

# re-preintegrate when linearization biases drift further than this
BIAS_REPREINTEGRATE_THRESHOLD = 0.02

MAX_INFORMATION_CONDITION = 1e12


class NumericError(RuntimeError):
    """Singular or ill-conditioned quantity encountered."""


class ImuMeasurement(NamedTuple):
    t: float
    gyro: np.ndarray
    acc: np.ndarray


@dataclass
class ImuParams:
    sigma_g: float = 1.7e-4      # rad/s/sqrt(Hz)
    sigma_a: float = 2.0e-3      # m/s^2/sqrt(Hz)
    sigma_bg: float = 2.0e-5     # rad/s^2/sqrt(Hz) bias random walk
    sigma_ba: float = 3.0e-4     # m/s^3/sqrt(Hz)
    g: float = 9.81
    z_up: bool = True
    rate: float = 200.0

    def __post_init__(self):
        if min(self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba) <= 0:
            raise ValueError("noise densities must be positive")
        if self.rate <= 0:
            raise ValueError("IMU rate must be positive")

    @property
    def gravity(self):
        return np.array([0.0, 0.0, -self.g if self.z_up else self.g])

    def to_dict(self):
        return {"sigma_g": self.sigma_g, "sigma_a": self.sigma_a,
                "sigma_bg": self.sigma_bg, "sigma_ba": self.sigma_ba,
                "g": self.g, "z_up": self.z_up, "rate": self.rate}

    @staticmethod
    def from_dict(d):
        return ImuParams(**d)


@dataclass
class SensorState:
    """World-frame sensor state [p_WS, q_WS, v_WS, b_g, b_a]."""
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=geo.quat_identity)
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self):
        return SensorState(self.p.copy(), self.q.copy(), self.v.copy(),
                           self.bg.copy(), self.ba.copy())

    def pose(self):
        return geo.Pose(self.p, self.q)


class PreintegratedImu:
    """Relative-motion constraint compounded from IMU readings on [t0, t1]."""

    def __init__(self, t0, t1, delta_p, delta_v, delta_q, cov, phi,
                 bg_lin, ba_lin):
        self.t0 = float(t0)
        self.t1 = float(t1)
        self.dt = self.t1 - self.t0
        self.delta_p = delta_p
        self.delta_v = delta_v
        self.delta_q = delta_q
        self.cov = cov          # 15x15, order (dp, dtheta, dv, dbg, dba)
        self.phi = phi          # accumulated state transition
        self.bg_lin = bg_lin
        self.ba_lin = ba_lin

    # bias-correction Jacobian blocks out of the accumulated transition
    @property
    def J_p_bg(self):
        return self.phi[0:3, 9:12]

    @property
    def J_p_ba(self):
        return self.phi[0:3, 12:15]

    @property
    def J_q_bg(self):
        return self.phi[3:6, 9:12]

    @property
    def J_v_bg(self):
        return self.phi[6:9, 9:12]

    @property
    def J_v_ba(self):
        return self.phi[6:9, 12:15]

    def corrected_deltas(self, bg, ba):
        """First-order bias-corrected (delta_p, delta_v, delta_q)."""
        dbg = bg - self.bg_lin
        dba = ba - self.ba_lin
        dp = self.delta_p + self.J_p_bg @ dbg + self.J_p_ba @ dba
        dv = self.delta_v + self.J_v_bg @ dbg + self.J_v_ba @ dba
        dq = geo.quat_mul(geo.so3_exp(self.J_q_bg @ dbg), self.delta_q)
        return dp, dv, dq

    def bias_deviation(self, bg, ba):
        return max(float(np.max(np.abs(bg - self.bg_lin))),
                   float(np.max(np.abs(ba - self.ba_lin))))

    def needs_repreintegration(self, bg, ba,
                               threshold=BIAS_REPREINTEGRATE_THRESHOLD):
        return self.bias_deviation(bg, ba) > threshold


def _stack(measurements):
    ts = np.array([m.t for m in measurements], dtype=float)
    gyr = np.array([m.gyro for m in measurements], dtype=float)
    acc = np.array([m.acc for m in measurements], dtype=float)
    return ts, gyr, acc


def preintegrate(measurements, params, t0, t1, bg0=None, ba0=None):
    """Midpoint-rule preintegration of bias-corrected measurements.

    measurements must be timestamp-sorted and (with boundary interpolation)
    cover [t0, t1].
    """
    if len(measurements) == 0:
        raise ValueError("empty IMU batch")
    if t1 <= t0:
        raise ValueError("need t1 > t0 (got %.6f, %.6f)" % (t0, t1))
    ts, gyr, acc = _stack(measurements)
    if np.any(np.diff(ts) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")
    bg0 = np.zeros(3) if bg0 is None else np.asarray(bg0, dtype=float)
    ba0 = np.zeros(3) if ba0 is None else np.asarray(ba0, dtype=float)

    # resample onto knots t0, interior sample times, t1
    inner = ts[(ts > t0) & (ts < t1)]
    knots = np.concatenate([[t0], inner, [t1]])
    gyr_k = np.stack([np.interp(knots, ts, gyr[:, i]) for i in range(3)], 1)
    acc_k = np.stack([np.interp(knots, ts, acc[:, i]) for i in range(3)], 1)

    delta_p = np.zeros(3)
    delta_v = np.zeros(3)
    delta_q = geo.quat_identity()
    P = np.zeros((15, 15))
    Phi = np.eye(15)

    sg2, sa2 = params.sigma_g ** 2, params.sigma_a ** 2
    sbg2, sba2 = params.sigma_bg ** 2, params.sigma_ba ** 2

    R = np.eye(3)
    for i in range(len(knots) - 1):
        dt = knots[i + 1] - knots[i]
        if dt <= 0:
            continue
        w = 0.5 * (gyr_k[i] + gyr_k[i + 1]) - bg0
        a_a = acc_k[i] - ba0
        a_b = acc_k[i + 1] - ba0

        wdt = w * dt
        R_next = R @ geo.quat_to_matrix(geo.so3_exp(wdt))
        aw_a = R @ a_a
        aw_b = R_next @ a_b
        a_mid = 0.5 * (aw_a + aw_b)

        delta_p = delta_p + delta_v * dt + 0.5 * a_mid * dt * dt
        delta_v = delta_v + a_mid * dt
        delta_q = geo.quat_mul(delta_q, geo.so3_exp(wdt))

        # error-state transition (left/world tangent on the delta rotation)
        Jstep = R_next @ geo.so3_right_jacobian(wdt) * dt
        A = -0.5 * (geo.skew(aw_a) + geo.skew(aw_b))
        Bg = 0.5 * geo.skew(aw_b) @ Jstep
        Ba = -0.5 * (R + R_next)

        F = np.eye(15)
        F[0:3, 3:6] = 0.5 * dt * dt * A
        F[0:3, 6:9] = dt * np.eye(3)
        F[0:3, 9:12] = 0.5 * dt * dt * Bg
        F[0:3, 12:15] = 0.5 * dt * dt * Ba
        F[3:6, 9:12] = -Jstep
        F[6:9, 3:6] = dt * A
        F[6:9, 9:12] = dt * Bg
        F[6:9, 12:15] = dt * Ba

        G = np.zeros((15, 12))
        G[0:3, 0:3] = 0.5 * dt * dt * Bg
        G[0:3, 3:6] = 0.5 * dt * dt * Ba
        G[3:6, 0:3] = -Jstep
        G[6:9, 0:3] = dt * Bg
        G[6:9, 3:6] = dt * Ba
        G[9:12, 6:9] = np.eye(3)
        G[12:15, 9:12] = np.eye(3)

        Qd = np.zeros((12, 12))
        Qd[0:3, 0:3] = sg2 / dt * np.eye(3)
        Qd[3:6, 3:6] = sa2 / dt * np.eye(3)
        Qd[6:9, 6:9] = sbg2 * dt * np.eye(3)
        Qd[9:12, 9:12] = sba2 * dt * np.eye(3)

        P = F @ P @ F.T + G @ Qd @ G.T
        Phi = F @ Phi
        R = R_next

    P = 0.5 * (P + P.T)
    return PreintegratedImu(t0, t1, delta_p, delta_v,
                            geo.quat_normalize(delta_q), P, Phi, bg0, ba0)


def propagate(state, pre, gravity):
    """Predict the sensor state at pre.t1 from the state at pre.t0."""
    dp, dv, dq = pre.corrected_deltas(state.bg, state.ba)
    C = geo.quat_to_matrix(state.q)
    dt = pre.dt
    out = SensorState()
    out.p = state.p + state.v * dt + 0.5 * gravity * dt * dt + C @ dp
    out.v = state.v + gravity * dt + C @ dv
    out.q = geo.quat_mul(state.q, dq)
    out.bg = state.bg.copy()
    out.ba = state.ba.copy()
    return out


def imu_error(state_k, state_n, pre, params, jac=True):
    """15-vector residual (dp, dq, dv, dbg, dba) + Jacobians + information.

    Jacobians are wrt the pose tangents [dr, dalpha] and speed/bias vectors
    [dv, dbg, dba] of both states, left/world convention on orientations.
    Returns (res, jacs_or_None, information) where jacs is
    (J_pose_k, J_sb_k, J_pose_n, J_sb_n).
    """
    g = params.gravity
    dp, dv, dq = pre.corrected_deltas(state_k.bg, state_k.ba)
    C_k = geo.quat_to_matrix(state_k.q)
    dt = pre.dt

    p_pred = state_k.p + state_k.v * dt + 0.5 * g * dt * dt + C_k @ dp
    v_pred = state_k.v + g * dt + C_k @ dv
    q_pred = geo.quat_mul(state_k.q, dq)

    e = np.zeros(15)
    e[0:3] = p_pred - state_n.p
    e[3:6] = geo.quat_boxminus(q_pred, state_n.q)
    e[6:9] = v_pred - state_n.v
    e[9:12] = state_k.bg - state_n.bg
    e[12:15] = state_k.ba - state_n.ba

    # information: covariance expressed in the residual's (world) tangent
    D = np.eye(15)
    D[0:3, 0:3] = C_k
    D[3:6, 3:6] = C_k
    D[6:9, 6:9] = C_k
    cov_w = D @ pre.cov @ D.T
    cond = np.linalg.cond(cov_w)
    if not np.isfinite(cond) or cond > MAX_INFORMATION_CONDITION:
        raise NumericError(
            "preintegrated covariance is ill-conditioned (cond=%.3g)" % cond)
    information = np.linalg.inv(cov_w)
    information = 0.5 * (information + information.T)

    if not jac:
        return e, None, information

    eq = e[3:6]
    Jl_inv = geo.so3_left_jacobian_inv(eq)
    Jr_inv = geo.so3_right_jacobian_inv(eq)

    J_pose_k = np.zeros((15, 6))
    J_pose_k[0:3, 0:3] = np.eye(3)
    J_pose_k[0:3, 3:6] = -geo.skew(C_k @ dp)
    J_pose_k[3:6, 3:6] = Jl_inv
    J_pose_k[6:9, 3:6] = -geo.skew(C_k @ dv)

    # bias correction enters as exp(w0 + J_q_bg d); the left Jacobian at the
    # current correction w0 keeps the derivative exact away from w0 = 0
    w0 = pre.J_q_bg @ (state_k.bg - pre.bg_lin)
    Jl_w0 = geo.so3_right_jacobian(-w0)

    J_sb_k = np.zeros((15, 9))
    J_sb_k[0:3, 0:3] = dt * np.eye(3)
    J_sb_k[0:3, 3:6] = C_k @ pre.J_p_bg
    J_sb_k[0:3, 6:9] = C_k @ pre.J_p_ba
    J_sb_k[3:6, 3:6] = Jl_inv @ C_k @ Jl_w0 @ pre.J_q_bg
    J_sb_k[6:9, 0:3] = np.eye(3)
    J_sb_k[6:9, 3:6] = C_k @ pre.J_v_bg
    J_sb_k[6:9, 6:9] = C_k @ pre.J_v_ba
    J_sb_k[9:12, 3:6] = np.eye(3)
    J_sb_k[12:15, 6:9] = np.eye(3)

    J_pose_n = np.zeros((15, 6))
    J_pose_n[0:3, 0:3] = -np.eye(3)
    J_pose_n[3:6, 3:6] = -Jr_inv

    J_sb_n = np.zeros((15, 9))
    J_sb_n[6:9, 0:3] = -np.eye(3)
    J_sb_n[9:12, 3:6] = -np.eye(3)
    J_sb_n[12:15, 6:9] = -np.eye(3)

    return e, (J_pose_k, J_sb_k, J_pose_n, J_sb_n), information
