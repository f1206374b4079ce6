"""Bundled synthetic assets (body models, posture prior)."""

import os

_BASE = os.path.dirname(__file__)

FULL_BODY_MODEL = "body_model_24.json"
TOY_BODY_MODEL = "body_model_toy.json"
GMM_PRIOR = "gmm_prior_8.json"


def path(name):
    """Absolute path of a bundled asset file."""
    p = os.path.join(_BASE, name)
    if not os.path.exists(p):
        raise FileNotFoundError("no bundled asset %r" % name)
    return p
