"""bodygraph: tightly-coupled visual-inertial and human state estimation."""

__version__ = "0.1.0"
