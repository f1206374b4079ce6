"""Rotation and rigid-transform primitives.

Quaternions are Hamilton convention, stored scalar-first (w, x, y, z) and
canonicalized to w >= 0 so that q and -q collapse to one representative.
Manifold increments are applied in the world frame (left multiplication):

    q boxplus delta  = Exp(delta) * q
    q boxminus q2    = Log(q * q2^-1)

which makes boxplus/boxminus exact inverses of each other. Pose increments
are [dr, dalpha] with plain translation addition.
"""

import numpy as np

# Below this angle (rad) the exp/log maps switch to their Taylor branches.
SMALL_ANGLE = 1e-8

_UNIT_TOL = 1e-6


def quat_identity():
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("cannot normalize zero quaternion")
    q = q / n
    return quat_canonicalize(q)


def quat_canonicalize(q):
    """Flip sign so w >= 0 (both signs encode the same rotation)."""
    if q[0] < 0.0:
        return -q
    return q


def _check_unit(q):
    if abs(np.dot(q, q) - 1.0) > 2.0 * _UNIT_TOL:
        raise ValueError("quaternion is not unit norm: |q| = %.6g" % np.linalg.norm(q))


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    q = np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])
    return quat_canonicalize(q)


def quat_conj(q):
    return quat_canonicalize(np.array([q[0], -q[1], -q[2], -q[3]]))


def quat_rotate(q, v):
    """Rotate v by q without building the full matrix."""
    w = q[0]
    u = q[1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q):
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
        [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
        [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
    ])


def matrix_to_quat(R):
    """Shepperd's method; returns the canonical (w >= 0) quaternion."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def so3_exp(v):
    """Axis-angle vector -> unit quaternion."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < SMALL_ANGLE:
        # second-order Taylor of sin(a/2)/a and cos(a/2)
        w = 1.0 - angle * angle / 8.0
        s = 0.5 - angle * angle / 48.0
    else:
        w = np.cos(0.5 * angle)
        s = np.sin(0.5 * angle) / angle
    return quat_canonicalize(np.array([w, s * v[0], s * v[1], s * v[2]]))


def so3_log(q):
    """Unit quaternion -> axis-angle vector with angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    _check_unit(q)
    q = quat_canonicalize(q)
    n = np.linalg.norm(q[1:])
    if n < SMALL_ANGLE:
        return 2.0 / q[0] * q[1:]
    angle = 2.0 * np.arctan2(n, q[0])
    return (angle / n) * q[1:]


def skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_right_jacobian(v):
    """Jr(v) with Exp(v + d) = Exp(v) Exp(Jr(v) d)."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    S = skew(v)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * S + S @ S / 6.0
    a2 = angle * angle
    return (np.eye(3)
            - (1.0 - np.cos(angle)) / a2 * S
            + (angle - np.sin(angle)) / (a2 * angle) * S @ S)


def so3_right_jacobian_inv(v):
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    S = skew(v)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * S + S @ S / 12.0
    a2 = angle * angle
    c = 1.0 / a2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * S + c * S @ S


def so3_left_jacobian_inv(v):
    # Jl(v) = Jr(-v)
    return so3_right_jacobian_inv(-np.asarray(v, dtype=float))


def quat_boxplus(q, delta):
    return quat_mul(so3_exp(delta), q)


def quat_boxminus(q, q2):
    """Minimal rotation vector taking q2 to q: Log(q * q2^-1)."""
    return so3_log(quat_mul(q, quat_conj(q2)))


class Pose:
    """Rigid transform T_AB = (r, q): p_A = C(q) p_B + r."""

    __slots__ = ("r", "q")

    def __init__(self, r, q):
        self.r = np.asarray(r, dtype=float)
        self.q = quat_canonicalize(np.asarray(q, dtype=float))

    @staticmethod
    def identity():
        return Pose(np.zeros(3), quat_identity())

    @staticmethod
    def from_rt(R, t):
        return Pose(np.asarray(t, dtype=float), matrix_to_quat(R))

    def rotation_matrix(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.q)
        T[:3, 3] = self.r
        return T

    @staticmethod
    def from_matrix(T):
        return Pose(T[:3, 3], matrix_to_quat(T[:3, :3]))

    def compose(self, other):
        return Pose(self.r + quat_rotate(self.q, other.r),
                    quat_mul(self.q, other.q))

    def inverse(self):
        qc = quat_conj(self.q)
        return Pose(-quat_rotate(qc, self.r), qc)

    def transform(self, p):
        return quat_rotate(self.q, np.asarray(p, dtype=float)) + self.r

    def boxplus(self, delta):
        delta = np.asarray(delta, dtype=float)
        return Pose(self.r + delta[:3], quat_boxplus(self.q, delta[3:]))

    def boxminus(self, other):
        return np.concatenate([self.r - other.r,
                               quat_boxminus(self.q, other.q)])

    # ambient 7-vector (r, q scalar-first) used by the solver blocks
    def to_vector(self):
        return np.concatenate([self.r, self.q])

    @staticmethod
    def from_vector(x):
        return Pose(x[:3], quat_normalize(x[3:7]))

    # wire format is scalar-last: tx ty tz qx qy qz qw
    def to_wire(self):
        return np.array([self.r[0], self.r[1], self.r[2],
                         self.q[1], self.q[2], self.q[3], self.q[0]])

    @staticmethod
    def from_wire(x):
        return Pose(x[:3], quat_normalize([x[6], x[3], x[4], x[5]]))

    def __repr__(self):
        return "Pose(r=%s, q=%s)" % (np.array_str(self.r, precision=4),
                                     np.array_str(self.q, precision=4))


def pose_compose(a, b):
    return a.compose(b)


def pose_inverse(a):
    return a.inverse()


def transform_point(a, p):
    return a.transform(p)


def pose_boxplus(T, delta):
    return T.boxplus(delta)


def pose_boxminus(a, b):
    return a.boxminus(b)


def align_z_to(direction):
    """Quaternion q with C(q) @ (direction/|direction|) = e_z.

    Minimal rotation; used to bootstrap the world frame from gravity.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    ez = np.array([0.0, 0.0, 1.0])
    c = float(np.dot(d, ez))
    if c > 1.0 - 1e-12:
        return quat_identity()
    if c < -1.0 + 1e-12:
        return so3_exp(np.array([np.pi, 0.0, 0.0]))
    axis = np.cross(d, ez)
    axis = axis / np.linalg.norm(axis)
    return so3_exp(axis * np.arccos(np.clip(c, -1.0, 1.0)))
