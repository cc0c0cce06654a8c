"""Curation toolkit for egocentric hand-object interaction video sets.

Measures per-video properties, fits diagonal-Gaussian KDEs over them and
uses the likelihoods to select, prune and replace videos when building
balanced pre-train and test sets. Reference numerics for the contrastive,
camera-motion and counterfactual losses live in :mod:`egocurate.losses`.
"""

__version__ = "0.1.0"

PROPERTIES = ("semantic", "hand_loc", "pose", "obj_loc", "motion", "blur")
"""Property order used by every weight vector."""

DEFAULT_WEIGHTS = (5.0, 10.0, 8.0, 8.0, 10.0, 5.0)


class DataError(ValueError):
    """Input data violates a contract (bad record, bad shape, bad value)."""
