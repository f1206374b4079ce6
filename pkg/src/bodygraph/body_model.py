"""Parametric articulated body: shape-dependent rest joints, kinematic-tree
forward kinematics, and analytic Jacobians wrt shape and posture.

Only joint positions are modeled; they are all any residual consumes. The
rest-joint map is affine in the shape coefficients (template + shape_dirs @
beta), and a row-stochastic detection regressor maps model joints onto the
keypoint detector's joint set.
"""

import json

import numpy as np

from . import kernels


class ModelLoadError(ValueError):
    """Body-model file is malformed or inconsistent."""


class BodyModel:
    def __init__(self, parents, template, shape_dirs, detection_regressor,
                 elbow_entries, knee_entries, torso_detection_indices=None,
                 name="body"):
        self.parents = np.asarray(parents, dtype=np.int64)
        self.template = np.asarray(template, dtype=float)
        self.shape_dirs = np.asarray(shape_dirs, dtype=float)
        self.detection_regressor = np.asarray(detection_regressor, dtype=float)
        self.elbow_entries = [tuple(e) for e in elbow_entries]
        self.knee_entries = [tuple(e) for e in knee_entries]
        self.torso_detection_indices = (list(torso_detection_indices)
                                        if torso_detection_indices else [0])
        self.name = name
        self._validate()

    # sizes
    @property
    def n_joints(self):
        return self.template.shape[0]

    @property
    def n_posture_joints(self):
        return self.n_joints - 1

    @property
    def n_shape(self):
        return self.shape_dirs.shape[2]

    @property
    def n_detector_joints(self):
        return self.detection_regressor.shape[0]

    @property
    def n_params(self):
        return self.n_shape + 3 * self.n_posture_joints

    def _validate(self):
        J = self.n_joints
        if self.parents.shape != (J,):
            raise ModelLoadError("parents: expected %d entries" % J)
        if self.parents[0] != -1:
            raise ModelLoadError("parents: root (index 0) must have parent -1")
        for j in range(1, J):
            if not 0 <= self.parents[j] < j:
                raise ModelLoadError(
                    "parents: joint %d has parent %d; tree must be "
                    "topologically sorted and acyclic" % (j, self.parents[j]))
        if self.template.shape != (J, 3):
            raise ModelLoadError("template_joints: expected shape (%d, 3)" % J)
        if self.shape_dirs.shape[:2] != (J, 3):
            raise ModelLoadError("shape_dirs: expected shape (%d, 3, K)" % J)
        reg = self.detection_regressor
        if reg.ndim != 2 or reg.shape[1] != J:
            raise ModelLoadError("detection_regressor: expected (J_det, %d)" % J)
        rowsums = reg.sum(axis=1)
        if np.any(np.abs(rowsums - 1.0) > 1e-9):
            raise ModelLoadError(
                "detection_regressor: rows must sum to 1 (got %s)"
                % np.array_str(rowsums, precision=4))
        for name, entries in [("elbow_indices", self.elbow_entries),
                              ("knee_indices", self.knee_entries)]:
            for (joint, comp, sign) in entries:
                if not 1 <= joint < J:
                    raise ModelLoadError("%s: joint %d out of range" % (name, joint))
                if comp not in (0, 1, 2):
                    raise ModelLoadError("%s: component %d invalid" % (name, comp))
                if sign not in (-1, 1):
                    raise ModelLoadError("%s: sign must be -1 or 1" % name)
        for d in self.torso_detection_indices:
            if not 0 <= d < self.n_detector_joints:
                raise ModelLoadError("torso_detection_indices: %d out of range" % d)

    def hinge_entries(self):
        """Flat-theta hinge terms [(flat_index, sign), ...], elbows first."""
        out = []
        for (joint, comp, sign) in self.elbow_entries + self.knee_entries:
            out.append((3 * (joint - 1) + comp, float(sign)))
        return out

    def check_dims(self, beta, theta):
        beta = np.asarray(beta, dtype=float).reshape(-1)
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if beta.shape[0] != self.n_shape:
            raise ValueError("beta: expected %d coefficients, got %d"
                             % (self.n_shape, beta.shape[0]))
        if theta.shape[0] != 3 * self.n_posture_joints:
            raise ValueError("theta: expected %d entries, got %d"
                             % (3 * self.n_posture_joints, theta.shape[0]))
        return beta, theta

    def rest_joints(self, beta):
        beta = np.asarray(beta, dtype=float).reshape(-1)
        return self.template + self.shape_dirs @ beta

    def fk_batch(self, betas, thetas, want_jac=True):
        """Batched joints + Jacobian.

        betas (B, K), thetas (B, 3*(J-1)) flat. Returns pos (B, J, 3) and
        Jfull (B, J, 3, K + 3*(J-1)) with shape columns first, or None.
        """
        betas = np.atleast_2d(np.asarray(betas, dtype=float))
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        B = betas.shape[0]
        J = self.n_joints
        rest = self.template[None] + np.einsum("jck,bk->bjc",
                                               self.shape_dirs, betas)
        pos, Rw, Jtheta = kernels.fk_chain(
            self.parents, rest, thetas.reshape(B, J - 1, 3), want_jac)
        if not want_jac:
            return pos, None
        Jbeta = kernels.fk_rest_jacobian(self.parents, Rw, self.shape_dirs)
        Jfull = np.concatenate([Jbeta, Jtheta], axis=3)
        return pos, Jfull

    def regress_joints(self, beta, theta):
        """Homogeneous model-joint positions (J, 4) in the body frame."""
        beta, theta = self.check_dims(beta, theta)
        pos, _ = self.fk_batch(beta[None], theta[None], want_jac=False)
        return np.concatenate([pos[0], np.ones((self.n_joints, 1))], axis=1)

    def body_jacobian(self, beta, theta):
        """d(all joint positions)/d(beta, theta), shape (3J, K + 3(J-1))."""
        beta, theta = self.check_dims(beta, theta)
        _, Jfull = self.fk_batch(beta[None], theta[None])
        return Jfull[0].reshape(3 * self.n_joints, self.n_params)

    def detector_joints(self, beta, theta):
        """Homogeneous detector-joint positions (J_det, 4)."""
        joints = self.regress_joints(beta, theta)
        det = self.detection_regressor @ joints[:, :3]
        return np.concatenate([det, np.ones((det.shape[0], 1))], axis=1)

    def detector_jacobian(self, beta, theta):
        J = self.body_jacobian(beta, theta).reshape(self.n_joints, 3, -1)
        det = np.einsum("dj,jcp->dcp", self.detection_regressor, J)
        return det.reshape(3 * self.n_detector_joints, self.n_params)

    def detector_batch(self, betas, thetas, want_jac=True):
        """Batched detector joints (B, J_det, 3) and Jacobians."""
        pos, Jfull = self.fk_batch(betas, thetas, want_jac)
        det = np.einsum("dj,bjc->bdc", self.detection_regressor, pos)
        if not want_jac:
            return det, None
        Jdet = np.einsum("dj,bjcp->bdcp", self.detection_regressor, Jfull)
        return det, Jdet


def validate_posture(theta, n_posture_joints):
    """Input-boundary check: per-joint rotation magnitude below pi."""
    theta = np.asarray(theta, dtype=float).reshape(n_posture_joints, 3)
    mags = np.linalg.norm(theta, axis=1)
    if np.any(mags >= np.pi):
        bad = int(np.argmax(mags))
        raise ValueError("posture joint %d has rotation %.3f rad >= pi"
                         % (bad + 1, mags[bad]))


def load_body_model(path):
    """Load and validate a body-model JSON file."""
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelLoadError("cannot read body model %s: %s" % (path, exc))
    try:
        parents = data["parents"]
        template = np.asarray(data["template_joints"], dtype=float)
        J = template.shape[0]
        shape_dirs = np.asarray(data["shape_dirs"], dtype=float)
        if shape_dirs.ndim == 2:
            if shape_dirs.shape[0] != 3 * J:
                raise ModelLoadError(
                    "shape_dirs: expected %d rows (3*J), got %d"
                    % (3 * J, shape_dirs.shape[0]))
            shape_dirs = shape_dirs.reshape(J, 3, -1)
        reg = data["detection_regressor"]
        elbow = data.get("elbow_indices", [])
        knee = data.get("knee_indices", [])
        torso = data.get("torso_detection_indices")
    except KeyError as exc:
        raise ModelLoadError("body model %s: missing field %s" % (path, exc))
    return BodyModel(parents, template, shape_dirs, reg, elbow, knee, torso,
                     name=data.get("name", "body"))
