"""Regenerate the bundled synthetic body models and posture prior.

Run as: python -m bodygraph.assets.make_assets [out_dir]

The 24-joint template follows the usual skeleton topology (pelvis root,
spine chain, legs, arms) with hand-picked anthropometric proportions; it is
NOT a licensed mesh model, just a structurally compatible stand-in. Holders
of a real model can convert it with the recipe in the README.
"""

import json
import os
import sys

import numpy as np

PARENTS_24 = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14,
              16, 17, 18, 19, 20, 21]

# meters, y-up, z forward, +x = subject's left
TEMPLATE_24 = [
    [0.00, 0.97, 0.00],   # 0 pelvis
    [0.09, 0.91, 0.00],   # 1 hip L
    [-0.09, 0.91, 0.00],  # 2 hip R
    [0.00, 1.08, 0.00],   # 3 spine1
    [0.10, 0.50, 0.00],   # 4 knee L
    [-0.10, 0.50, 0.00],  # 5 knee R
    [0.00, 1.20, 0.00],   # 6 spine2
    [0.10, 0.09, 0.00],   # 7 ankle L
    [-0.10, 0.09, 0.00],  # 8 ankle R
    [0.00, 1.32, 0.00],   # 9 spine3
    [0.11, 0.03, 0.12],   # 10 foot L
    [-0.11, 0.03, 0.12],  # 11 foot R
    [0.00, 1.45, 0.00],   # 12 neck
    [0.07, 1.40, 0.00],   # 13 collar L
    [-0.07, 1.40, 0.00],  # 14 collar R
    [0.00, 1.58, 0.00],   # 15 head
    [0.17, 1.42, 0.00],   # 16 shoulder L
    [-0.17, 1.42, 0.00],  # 17 shoulder R
    [0.44, 1.42, 0.00],   # 18 elbow L
    [-0.44, 1.42, 0.00],  # 19 elbow R
    [0.69, 1.42, 0.00],   # 20 wrist L
    [-0.69, 1.42, 0.00],  # 21 wrist R
    [0.77, 1.42, 0.00],   # 22 hand L
    [-0.77, 1.42, 0.00],  # 23 hand R
]


def make_shape_dirs(template, n_shape=10, seed=7, stature_gain=0.06):
    """First component scales stature; the rest are small seeded offsets."""
    template = np.asarray(template, dtype=float)
    J = template.shape[0]
    dirs = np.zeros((J, 3, n_shape))
    dirs[:, :, 0] = stature_gain * template
    rng = np.random.default_rng(seed)
    dirs[:, :, 1:] = rng.normal(scale=0.012, size=(J, 3, n_shape - 1))
    return dirs


def full_model_dict():
    J = 24
    reg = np.zeros((22, J))
    for d in range(22):  # detector joints = model joints 0..21 (hands dropped)
        reg[d, d] = 1.0
    return {
        "name": "synthetic-24",
        "parents": PARENTS_24,
        "template_joints": TEMPLATE_24,
        "shape_dirs": make_shape_dirs(TEMPLATE_24).reshape(3 * J, 10).tolist(),
        "detection_regressor": reg.tolist(),
        # [joint, axis-angle component, anatomical sign]: hinge penalizes
        # sign*theta < 0 (hyperextension direction)
        "elbow_indices": [[18, 1, -1], [19, 1, 1]],
        "knee_indices": [[4, 0, 1], [5, 0, 1]],
        "torso_detection_indices": [0, 1, 2, 12, 16, 17],
    }


def toy_model_dict():
    J = 4
    template = np.array([[0, 0, 0], [0, 0.3, 0], [0, 0.6, 0], [0, 0.9, 0]],
                        dtype=float)
    dirs = np.zeros((J, 3, 10))
    dirs[:, :, 0] = 0.1 * template
    return {
        "name": "toy-chain-4",
        "parents": [-1, 0, 1, 2],
        "template_joints": template.tolist(),
        "shape_dirs": dirs.reshape(3 * J, 10).tolist(),
        "detection_regressor": np.eye(J).tolist(),
        "elbow_indices": [[2, 0, 1]],
        "knee_indices": [[1, 0, 1]],
        "torso_detection_indices": [0, 1],
    }


def gmm_prior_dict(dim=69, n_components=8, seed=11):
    """Synthetic standing-ish posture prior; component 0 is near-zero mean
    with the largest weight so new tracks initialize close to a T-pose."""
    rng = np.random.default_rng(seed)
    weights = np.array([0.25, 0.20, 0.15, 0.10, 0.10, 0.08, 0.07, 0.05])
    weights = (weights / weights.sum())[:n_components]
    means = rng.normal(scale=0.08, size=(n_components, dim))
    means[0] *= 0.1
    # bend elbows/knees slightly in their legal directions
    legal = {3 * (18 - 1) + 1: -1, 3 * (19 - 1) + 1: 1,
             3 * (4 - 1) + 0: 1, 3 * (5 - 1) + 0: 1}
    for g in range(n_components):
        for idx, s in legal.items():
            if idx < dim:
                means[g, idx] = s * abs(rng.normal(scale=0.15))
    sigmas = rng.uniform(0.2, 0.5, size=(n_components, dim))
    return {
        "weights": weights.tolist(),
        "means": means.tolist(),
        "covariances": (sigmas ** 2).tolist(),  # diagonal
    }


def write(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    files = {
        "body_model_24.json": full_model_dict(),
        "body_model_toy.json": toy_model_dict(),
        "gmm_prior_8.json": gmm_prior_dict(),
    }
    for fname, data in files.items():
        path = os.path.join(out_dir, fname)
        with open(path, "w") as f:
            json.dump(data, f)
        print("wrote", path)


if __name__ == "__main__":
    write(sys.argv[1] if len(sys.argv) > 1 else os.path.dirname(__file__))
